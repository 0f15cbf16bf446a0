//! Waveform generator, critic, their objectives and the persisted model state.

mod adam;
mod checkpoint;
mod discriminator;
mod generator;
pub mod layers;
mod loss;
mod real;

use rand::Rng;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use discriminator::{DiscTape, Discriminator, DiscriminatorConfig, Pass};
pub use generator::{Generator, GeneratorConfig, GeneratorTape, BASE_STEPS};
pub use layers::{phase_shuffle, Param};
pub use loss::{
    discriminator_loss, generator_loss, gradient_penalty, gradient_penalty_at, interpolate,
    metric_term, DiscriminatorLoss, GeneratorLoss, GeneratorObjective, Penalty,
};
pub use real::{matmul, Real};

use crate::audio::{AudioClip, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Both networks, their optimizer moments and the generator step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub step: u64,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(
        g: GeneratorConfig,
        d: DiscriminatorConfig,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if d.input_len != g.output_len {
            return Err(Error::Config(format!(
                "discriminator input length {} differs from generator output length {}",
                d.input_len, g.output_len
            )));
        }
        let generator = Generator::new(g, rng)?;
        let discriminator = Discriminator::new(d, rng)?;
        Ok(Self {
            g_opt: Adam::new(adam, &generator.params),
            d_opt: Adam::new(adam, &discriminator.params),
            generator,
            discriminator,
            step: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.generator.config().input_dim
    }

    pub fn output_len(&self) -> usize {
        self.generator.config().output_len
    }

    /// Sonifies a batch of feature vectors.
    pub fn generate<V: AsRef<[f64]>>(&self, inputs: &[V]) -> Result<Vec<AudioClip>> {
        generate(&self.generator, inputs)
    }

    /// Critic scores with phase shuffle disabled.
    pub fn discriminate(&self, clips: &[AudioClip]) -> Result<Vec<f64>> {
        let len = self.output_len();
        let mut flat = Vec::with_capacity(clips.len() * len);
        for (i, c) in clips.iter().enumerate() {
            if c.len() != len {
                return Err(Error::Shape(format!(
                    "clip {i} has {} samples, the critic expects {len}",
                    c.len()
                )));
            }
            flat.extend(c.samples.iter().map(|s| *s as f32));
        }
        let d = &self.discriminator;
        let scores = d.forward(&flat, clips.len(), d.no_shifts(clips.len()))?;
        Ok(scores.into_iter().map(f64::from).collect())
    }
}

/// Runs `g` over `inputs`; one clip per input vector.
pub fn generate<T: Real, V: AsRef<[f64]>>(
    g: &Generator<T>,
    inputs: &[V],
) -> Result<Vec<AudioClip>> {
    let dim = g.config().input_dim;
    let mut flat = Vec::with_capacity(inputs.len() * dim);
    for (i, v) in inputs.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "input {i} has dimension {}, the generator expects {dim}",
                v.len()
            )));
        }
        flat.extend(v.iter().map(|x| T::from_f64_lossy(*x)));
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let len = g.config().output_len;
    // bounded chunks keep activation memory flat for large tables
    let mut clips = Vec::with_capacity(inputs.len());
    for chunk in flat.chunks(64 * dim) {
        let n = chunk.len() / dim;
        let out = g.forward(chunk, n)?;
        clips.extend(
            out.chunks(len).map(|c| {
                AudioClip::new(c.iter().map(|s| s.as_f64()).collect(), DEFAULT_SAMPLE_RATE)
            }),
        );
    }
    Ok(clips)
}
