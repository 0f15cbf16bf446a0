use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv_transpose1d_backward, conv_transpose1d_forward, dense_backward, dense_forward,
    transposed_geom, zero_grads, Param,
};
use super::real::Real;
use crate::error::{Error, Result};

/// Length of the sequence produced by the dense projection.
pub const BASE_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub output_len: usize,
    pub upsample_factor: usize,
    pub kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            model_dim: 64,
            output_len: 16384,
            upsample_factor: 4,
            kernel: 25,
        }
    }
}

impl GeneratorConfig {
    /// Compact configuration for CPU-scale experiments (4096 samples).
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            model_dim: 32,
            output_len: 4096,
            ..Self::default()
        }
    }

    /// Number of transposed-convolution layers: `output_len = 16·factor^layers`.
    pub fn layers(&self) -> Result<usize> {
        upsampling_layers(self.output_len, self.upsample_factor)
    }

    /// Channel count entering each transposed convolution, then the output's 1.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let layers = self.layers()?;
        let mut ch: Vec<usize> = (0..layers)
            .map(|l| self.model_dim << (layers - 1 - l))
            .collect();
        ch.push(1);
        Ok(ch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.kernel == 0 {
            return Err(Error::Config(
                "generator dimensions must be positive".into(),
            ));
        }
        self.layers().map(|_| ())
    }
}

pub(crate) fn upsampling_layers(output_len: usize, factor: usize) -> Result<usize> {
    if factor < 2 {
        return Err(Error::Config("resampling factor must be at least 2".into()));
    }
    let mut len = BASE_STEPS;
    let mut layers = 0;
    while len < output_len {
        len *= factor;
        layers += 1;
    }
    if len != output_len || layers == 0 {
        return Err(Error::Config(format!(
            "output length {output_len} is not {BASE_STEPS}·{factor}^k for k >= 1"
        )));
    }
    Ok(layers)
}

/// WaveGAN-style generator: dense projection to a 16-step sequence, then
/// ReLU transposed convolutions, each upsampling 4x, ending in `tanh`.
///
/// Parameter layout: `[dense.w, dense.b, up0.w, up0.b, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    channels: Vec<usize>,
    pub params: Vec<Param<T>>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTape<T> {
    batch: usize,
    input: Vec<T>,
    /// Post-ReLU input to each transposed convolution.
    hidden: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> GeneratorTape<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let channels = config.channels()?;
        let k = config.kernel;
        let top = channels[0];
        let mut params = vec![
            Param::glorot(
                "g.dense.w",
                vec![config.input_dim, BASE_STEPS * top],
                config.input_dim,
                BASE_STEPS * top,
                rng,
            ),
            Param::zeros("g.dense.b", vec![BASE_STEPS * top]),
        ];
        for l in 0..channels.len() - 1 {
            let (cin, cout) = (channels[l], channels[l + 1]);
            params.push(Param::glorot(
                format!("g.up{l}.w"),
                vec![cin, k * cout],
                k * cin,
                k * cout,
                rng,
            ));
            params.push(Param::zeros(format!("g.up{l}.b"), vec![cout]));
        }
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    pub fn from_params(config: GeneratorConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let channels = config.channels()?;
        let template = Generator::<T>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&template.params, &params)?;
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            channels: self.channels.clone(),
            params: self.params.iter().map(Param::cast).collect(),
        }
    }

    /// Zeroes the last transposed convolution, forcing silent output.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_input(&self, inputs: &[T], batch: usize) -> Result<()> {
        if inputs.len() != batch * self.config.input_dim {
            return Err(Error::Shape(format!(
                "expected {batch} inputs of dimension {}, got {} values",
                self.config.input_dim,
                inputs.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("generator inputs must be finite".into()));
        }
        Ok(())
    }

    /// `[batch, input_dim]` → `[batch, output_len]` waveforms in `[−1, 1]`.
    pub fn forward(&self, inputs: &[T], batch: usize) -> Result<Vec<T>> {
        Ok(self.forward_tape(inputs, batch)?.output)
    }

    pub fn forward_tape(&self, inputs: &[T], batch: usize) -> Result<GeneratorTape<T>> {
        self.check_input(inputs, batch)?;
        let k = self.config.kernel;
        let stride = self.config.upsample_factor;
        let mut h = dense_forward(inputs, batch, &self.params[0], Some(&self.params[1]));
        relu(&mut h);
        let mut hidden = Vec::with_capacity(self.channels.len() - 1);
        let mut len = BASE_STEPS;
        let last = self.channels.len() - 2;
        for l in 0..=last {
            let geom = transposed_geom(batch, len, self.channels[l + 1], k, stride);
            let mut z = conv_transpose1d_forward(
                &h,
                &geom,
                &self.params[2 + 2 * l],
                Some(&self.params[3 + 2 * l]),
            );
            if l == last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                relu(&mut z);
            }
            hidden.push(std::mem::replace(&mut h, z));
            len *= stride;
        }
        Ok(GeneratorTape {
            batch,
            input: inputs.to_vec(),
            hidden,
            output: h,
        })
    }

    /// Parameter gradients for `∂L/∂output`.
    pub fn backward(&self, tape: &GeneratorTape<T>, grad_output: &[T]) -> Vec<Vec<T>> {
        assert_eq!(
            grad_output.len(),
            tape.output.len(),
            "generator output gradient shape"
        );
        let mut grads = zero_grads(&self.params);
        let k = self.config.kernel;
        let stride = self.config.upsample_factor;
        let batch = tape.batch;

        let mut g: Vec<T> = grad_output
            .iter()
            .zip(&tape.output)
            .map(|(g, y)| *g * (T::one() - *y * *y))
            .collect();
        let n_up = self.channels.len() - 1;
        for l in (0..n_up).rev() {
            let len_in = BASE_STEPS * stride.pow(l as u32);
            let geom = transposed_geom(batch, len_in, self.channels[l + 1], k, stride);
            let (head, tail) = grads.split_at_mut(3 + 2 * l);
            let gx = conv_transpose1d_backward(
                &tape.hidden[l],
                &geom,
                &self.params[2 + 2 * l],
                &g,
                Some((&mut head[2 + 2 * l], Some(&mut tail[0]))),
                true,
            )
            .expect("input gradient requested");
            // ReLU mask from the stored post-activation
            g = gx
                .into_iter()
                .zip(&tape.hidden[l])
                .map(|(g, h)| if *h > T::zero() { g } else { T::zero() })
                .collect();
        }
        let (head, tail) = grads.split_at_mut(1);
        dense_backward(
            &tape.input,
            batch,
            &self.params[0],
            &g,
            Some((&mut head[0], Some(&mut tail[0]))),
            false,
        );
        grads
    }
}

fn relu<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub(crate) fn check_layout<T>(expected: &[Param<T>], got: &[Param<T>]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for (e, g) in expected.iter().zip(got) {
        if e.name != g.name
            || e.shape != g.shape
            || g.data.len() != g.shape.iter().product::<usize>()
        {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                g.name, g.shape, e.name, e.shape
            )));
        }
    }
    Ok(())
}
