use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{check_layout, upsampling_layers, GeneratorConfig, BASE_STEPS};
use super::layers::{
    conv1d_backward, conv1d_forward, dense_backward, dense_forward, draw_shifts,
    phase_shuffle_apply, phase_shuffle_backward, same_pad, zero_grads, ConvGeom, Param,
    LEAKY_SLOPE,
};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub model_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub phase_shuffle_n: usize,
    pub input_len: usize,
}

impl DiscriminatorConfig {
    /// Mirror of a generator: same depth, width and clip length.
    pub fn matching(g: &GeneratorConfig) -> Self {
        Self {
            model_dim: g.model_dim,
            kernel: g.kernel,
            stride: g.upsample_factor,
            phase_shuffle_n: 2,
            input_len: g.output_len,
        }
    }

    pub fn layers(&self) -> Result<usize> {
        upsampling_layers(self.input_len, self.stride)
    }

    /// `[1, d, 2d, ..., d·2^(layers−1)]`
    pub fn channels(&self) -> Result<Vec<usize>> {
        let layers = self.layers()?;
        let mut ch = vec![1];
        ch.extend((0..layers).map(|l| self.model_dim << l));
        Ok(ch)
    }
}

/// WaveGAN-style critic: strided leaky-ReLU convolutions with phase shuffle
/// between them, flattened into a single linear score.
///
/// Parameter layout: `[conv0.w, conv0.b, ..., dense.w, dense.b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    channels: Vec<usize>,
    pub params: Vec<Param<T>>,
}

/// Forward-pass record. A tangent pass shares the activation masks and shifts
/// of the primal pass it linearizes.
#[derive(Debug, Clone)]
pub struct DiscTape<T> {
    batch: usize,
    cols: Vec<Vec<T>>,
    masks: Vec<Vec<bool>>,
    shifts: Vec<Vec<i32>>,
    features: Vec<T>,
    tangent: bool,
}

impl<T> DiscTape<T> {
    pub fn shifts(&self) -> &[Vec<i32>] {
        &self.shifts
    }
}

/// How to run the network.
pub enum Pass<'a, T> {
    /// Ordinary evaluation with the given phase-shuffle shifts (one vector
    /// per shuffled layer).
    Primal(Vec<Vec<i32>>),
    /// Jacobian-vector product at the point recorded in the tape: biases off,
    /// activation slopes frozen.
    Tangent(&'a DiscTape<T>),
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let channels = config.channels()?;
        if config.model_dim == 0 || config.kernel == 0 {
            return Err(Error::Config(
                "discriminator dimensions must be positive".into(),
            ));
        }
        let k = config.kernel;
        let mut params = Vec::new();
        for l in 0..channels.len() - 1 {
            let (cin, cout) = (channels[l], channels[l + 1]);
            params.push(Param::glorot(
                format!("d.conv{l}.w"),
                vec![k * cin, cout],
                k * cin,
                k * cout,
                rng,
            ));
            params.push(Param::zeros(format!("d.conv{l}.b"), vec![cout]));
        }
        let feat = BASE_STEPS * channels[channels.len() - 1];
        params.push(Param::glorot("d.dense.w", vec![feat, 1], feat, 1, rng));
        params.push(Param::zeros("d.dense.b", vec![1]));
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    pub fn from_params(config: DiscriminatorConfig, params: Vec<Param<T>>) -> Result<Self> {
        let template = Discriminator::<T>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&template.params, &params)?;
        Ok(Self {
            channels: template.channels,
            config,
            params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            channels: self.channels.clone(),
            params: self.params.iter().map(Param::cast).collect(),
        }
    }

    fn n_conv(&self) -> usize {
        self.channels.len() - 1
    }

    fn geom(&self, batch: usize, l: usize) -> ConvGeom {
        let len_in = self.config.input_len / self.config.stride.pow(l as u32);
        ConvGeom {
            batch,
            len_in,
            len_out: len_in / self.config.stride,
            channels: self.channels[l],
            kernel: self.config.kernel,
            stride: self.config.stride,
            pad: same_pad(self.config.kernel, self.config.stride),
        }
    }

    /// Phase-shuffle shifts for every shuffled layer.
    pub fn draw_shifts<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Vec<i32>> {
        (0..self.n_conv() - 1)
            .map(|_| draw_shifts(batch, self.config.phase_shuffle_n, rng))
            .collect()
    }

    /// Shifts that disable phase shuffle.
    pub fn no_shifts(&self, batch: usize) -> Vec<Vec<i32>> {
        vec![vec![0; batch]; self.n_conv() - 1]
    }

    pub fn check_clips(&self, clips: &[T], batch: usize) -> Result<()> {
        if clips.len() != batch * self.config.input_len {
            return Err(Error::Shape(format!(
                "expected {batch} clips of {} samples, got {} values",
                self.config.input_len,
                clips.len()
            )));
        }
        Ok(())
    }

    /// One score per clip.
    pub fn run(&self, x: &[T], batch: usize, pass: Pass<'_, T>) -> Result<(Vec<T>, DiscTape<T>)> {
        self.check_clips(x, batch)?;
        let n_conv = self.n_conv();
        let (shifts, primal, tangent) = match pass {
            Pass::Primal(s) => {
                if s.len() != n_conv - 1 || s.iter().any(|v| v.len() != batch) {
                    return Err(Error::Shape(
                        "phase-shuffle shifts do not match the batch".into(),
                    ));
                }
                (s, None, false)
            }
            Pass::Tangent(p) => {
                if p.batch != batch {
                    return Err(Error::Shape(
                        "tangent batch differs from primal batch".into(),
                    ));
                }
                (p.shifts.clone(), Some(p), true)
            }
        };
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut h = x.to_vec();
        let mut cols_all = Vec::with_capacity(n_conv);
        let mut masks = Vec::with_capacity(n_conv);
        for l in 0..n_conv {
            let geom = self.geom(batch, l);
            let bias = (!tangent).then(|| &self.params[2 * l + 1]);
            let (mut z, cols) = conv1d_forward(&h, &geom, &self.params[2 * l], bias);
            let mask: Vec<bool> = match primal {
                Some(p) => p.masks[l].clone(),
                None => z.iter().map(|v| *v > T::zero()).collect(),
            };
            for (v, m) in z.iter_mut().zip(&mask) {
                if !m {
                    *v = *v * slope;
                }
            }
            if l + 1 < n_conv {
                z = phase_shuffle_apply(&z, geom.len_out, self.channels[l + 1], &shifts[l]);
            }
            cols_all.push(cols);
            masks.push(mask);
            h = z;
        }
        let dense_b = (!tangent).then(|| &self.params[2 * n_conv + 1]);
        let scores = dense_forward(&h, batch, &self.params[2 * n_conv], dense_b);
        let tape = DiscTape {
            batch,
            cols: cols_all,
            masks,
            shifts,
            features: h,
            tangent,
        };
        Ok((scores, tape))
    }

    /// Scores with the given shifts (use [`Self::no_shifts`] at inference).
    pub fn forward(&self, x: &[T], batch: usize, shifts: Vec<Vec<i32>>) -> Result<Vec<T>> {
        Ok(self.run(x, batch, Pass::Primal(shifts))?.0)
    }

    /// Back-propagates `grad_scores`. Parameter gradients are accumulated
    /// into `param_grads` when given (biases are skipped for tangent tapes);
    /// returns `∂/∂x` when `want_input`.
    pub fn backward(
        &self,
        tape: &DiscTape<T>,
        grad_scores: &[T],
        mut param_grads: Option<&mut [Vec<T>]>,
        want_input: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(grad_scores.len(), tape.batch, "one score gradient per clip");
        let n_conv = self.n_conv();
        let batch = tape.batch;
        let slope = T::from_f64_lossy(LEAKY_SLOPE);

        let dense_grads = param_grads.as_deref_mut().map(|g| {
            let (head, tail) = g.split_at_mut(2 * n_conv + 1);
            let gb = if tape.tangent {
                None
            } else {
                Some(tail[0].as_mut_slice())
            };
            (head[2 * n_conv].as_mut_slice(), gb)
        });
        let mut g = dense_backward(
            &tape.features,
            batch,
            &self.params[2 * n_conv],
            grad_scores,
            dense_grads,
            true,
        )
        .expect("input gradient requested");

        for l in (0..n_conv).rev() {
            let geom = self.geom(batch, l);
            if l + 1 < n_conv {
                g = phase_shuffle_backward(&g, geom.len_out, self.channels[l + 1], &tape.shifts[l]);
            }
            for (v, m) in g.iter_mut().zip(&tape.masks[l]) {
                if !m {
                    *v = *v * slope;
                }
            }
            let conv_grads = param_grads.as_deref_mut().map(|gr| {
                let (head, tail) = gr.split_at_mut(2 * l + 1);
                let gb = if tape.tangent {
                    None
                } else {
                    Some(tail[0].as_mut_slice())
                };
                (head[2 * l].as_mut_slice(), gb)
            });
            let need_input = l > 0 || want_input;
            match conv1d_backward(
                &tape.cols[l],
                &geom,
                &self.params[2 * l],
                &g,
                conv_grads,
                need_input,
            ) {
                Some(gx) => g = gx,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        zero_grads(&self.params)
    }
}
