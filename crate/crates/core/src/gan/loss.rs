//! Adversarial objectives with the metric-preservation term and the
//! Wasserstein gradient penalty.

use rand::Rng;

use super::discriminator::{Discriminator, Pass};
use super::generator::Generator;
use super::layers::zero_grads;
use super::real::Real;
use crate::audio::{AudioMetric, FeatureExtractor};
use crate::error::{Error, Result};
use crate::geometry::{metric_loss_with_grad, Metric};

/// Value of the gradient penalty and the per-example input-gradient norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub grad_norms: Vec<f64>,
}

/// `mean_i (‖∇ₓD(x̂ᵢ)‖ − 1)²` at the given interpolates. When `grads` is
/// given, `scale · ∂penalty/∂θ` is accumulated into it.
///
/// The critic is piecewise linear in its input, so `∂/∂θ (uᵀ∇ₓD)` for a
/// fixed `u` is the parameter gradient of the Jacobian-vector product `J(θ)u`
/// with activation slopes frozen. That is one tangent pass plus one backward
/// pass, with no second-order machinery.
pub fn gradient_penalty_at<T: Real>(
    d: &Discriminator<T>,
    interp: &[T],
    batch: usize,
    shifts: Vec<Vec<i32>>,
    grads: Option<(&mut [Vec<T>], f64)>,
) -> Result<Penalty> {
    let (_, tape) = d.run(interp, batch, Pass::Primal(shifts))?;
    let ones = vec![T::one(); batch];
    let gx = d
        .backward(&tape, &ones, None, true)
        .expect("input gradient requested");
    let len = interp.len() / batch;
    let grad_norms: Vec<f64> = gx
        .chunks(len)
        .map(|g| {
            g.iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let value = grad_norms
        .iter()
        .map(|n| (n - 1.0) * (n - 1.0))
        .sum::<f64>()
        / batch as f64;

    if let Some((param_grads, scale)) = grads {
        // u_i = c_i g_i with c_i = 2 (‖g_i‖ − 1) / (‖g_i‖ B); a zero gradient
        // contributes the zero subgradient.
        let mut u = gx;
        for (row, norm) in u.chunks_mut(len).zip(&grad_norms) {
            let c = if *norm > 0.0 {
                scale * 2.0 * (norm - 1.0) / (norm * batch as f64)
            } else {
                0.0
            };
            let c = T::from_f64_lossy(c);
            row.iter_mut().for_each(|v| *v = *v * c);
        }
        let (_, tangent) = d.run(&u, batch, Pass::Tangent(&tape))?;
        d.backward(&tangent, &ones, Some(param_grads), false);
    }
    Ok(Penalty { value, grad_norms })
}

/// `x̂ = ε·real + (1 − ε)·fake` with one `ε ~ U[0, 1)` per example.
pub fn interpolate<T: Real, R: Rng + ?Sized>(
    real: &[T],
    fake: &[T],
    batch: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    if real.len() != fake.len() || batch == 0 || real.len() % batch != 0 {
        return Err(Error::Shape(format!(
            "real ({}) and fake ({}) batches must have equal shape",
            real.len(),
            fake.len()
        )));
    }
    let len = real.len() / batch;
    let mut out = Vec::with_capacity(real.len());
    for i in 0..batch {
        let e: f64 = rng.random_range(0.0..1.0);
        let (e, one_minus) = (T::from_f64_lossy(e), T::from_f64_lossy(1.0 - e));
        for (r, f) in real[i * len..(i + 1) * len]
            .iter()
            .zip(&fake[i * len..(i + 1) * len])
        {
            out.push(e * *r + one_minus * *f);
        }
    }
    Ok(out)
}

pub fn gradient_penalty<T: Real, R: Rng + ?Sized, S: Rng + ?Sized>(
    d: &Discriminator<T>,
    real: &[T],
    fake: &[T],
    batch: usize,
    epsilon_rng: &mut R,
    shuffle_rng: &mut S,
) -> Result<f64> {
    let interp = interpolate(real, fake, batch, epsilon_rng)?;
    let shifts = d.draw_shifts(batch, shuffle_rng);
    Ok(gradient_penalty_at(d, &interp, batch, shifts, None)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorLoss {
    pub total: f64,
    pub fake_score: f64,
    pub real_score: f64,
    pub penalty: f64,
}

/// `mean D(G(x)) − mean D(a) + λ_gp·penalty`, optionally with parameter
/// gradients for the critic.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss<T: Real, R: Rng + ?Sized, S: Rng + ?Sized>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    features: &[T],
    audio: &[T],
    batch: usize,
    lambda_gp: f64,
    epsilon_rng: &mut R,
    shuffle_rng: &mut S,
    want_grads: bool,
) -> Result<(DiscriminatorLoss, Option<Vec<Vec<T>>>)> {
    let fake = g.forward(features, batch)?;
    d.check_clips(audio, batch)?;

    // fake and real share one pass: rows [0, B) fake, [B, 2B) real
    let mut both = fake.clone();
    both.extend_from_slice(audio);
    let shifts = d.draw_shifts(2 * batch, shuffle_rng);
    let (scores, tape) = d.run(&both, 2 * batch, Pass::Primal(shifts))?;
    let fake_score = scores[..batch].iter().map(|s| s.as_f64()).sum::<f64>() / batch as f64;
    let real_score = scores[batch..].iter().map(|s| s.as_f64()).sum::<f64>() / batch as f64;

    let interp = interpolate(audio, &fake, batch, epsilon_rng)?;
    let gp_shifts = d.draw_shifts(batch, shuffle_rng);

    let mut grads = want_grads.then(|| zero_grads(&d.params));
    if let Some(grads) = grads.as_mut() {
        let inv = T::from_f64_lossy(1.0 / batch as f64);
        let seed: Vec<T> = (0..2 * batch)
            .map(|i| if i < batch { inv } else { -inv })
            .collect();
        d.backward(&tape, &seed, Some(grads), false);
    }
    let penalty = gradient_penalty_at(
        d,
        &interp,
        batch,
        gp_shifts,
        grads.as_mut().map(|g| (g.as_mut_slice(), lambda_gp)),
    )?
    .value;

    let loss = DiscriminatorLoss {
        total: fake_score - real_score + lambda_gp * penalty,
        fake_score,
        real_score,
        penalty,
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLoss {
    pub total: f64,
    /// `−mean D(G(x))`, zero for undiscriminated batches.
    pub adversarial: f64,
    /// Metric-preservation loss of the batch (NaN when it could not be
    /// evaluated and carried no weight).
    pub metric: f64,
}

/// Everything `generator_loss` needs besides the networks and the batch.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorObjective<'a> {
    pub lambda_metric: f64,
    pub source_metric: Metric,
    pub target_metric: AudioMetric,
    pub features: &'a FeatureExtractor,
}

/// Metric loss of a generated batch and, if asked, its gradient with respect
/// to the generated samples.
pub fn metric_term<T: Real>(
    inputs: &[Vec<f64>],
    outputs: &[T],
    objective: &GeneratorObjective<'_>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let batch = inputs.len();
    let len = outputs.len() / batch;
    let waves: Vec<Vec<f64>> = outputs
        .chunks(len)
        .map(|c| c.iter().map(|v| v.as_f64()).collect())
        .collect();
    match objective.target_metric {
        AudioMetric::L2 => {
            let (loss, grads) =
                metric_loss_with_grad(inputs, &waves, objective.source_metric, Metric::Euclidean)?;
            Ok((loss, want_grad.then(|| grads.concat())))
        }
        AudioMetric::Mfcc => {
            let mut frames = Vec::with_capacity(batch);
            let mut caches = Vec::with_capacity(batch);
            for w in &waves {
                let (f, c) = objective.features.extract_cached(w)?;
                frames.push(f.into_vec());
                caches.push(c);
            }
            let (loss, grads) = metric_loss_with_grad(
                inputs,
                &frames,
                objective.source_metric,
                Metric::SquaredFeatureFrame,
            )?;
            let g = want_grad.then(|| {
                grads
                    .iter()
                    .zip(&caches)
                    .flat_map(|(g, c)| objective.features.backward(c, g))
                    .collect()
            });
            Ok((loss, g))
        }
    }
}

/// `−mean D(G(x)) + λ_metric·metric_loss(x, G(x))`. Undiscriminated (URI)
/// batches drop the adversarial term.
pub fn generator_loss<T: Real, S: Rng + ?Sized>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    inputs: &[Vec<f64>],
    objective: &GeneratorObjective<'_>,
    uri: bool,
    shuffle_rng: &mut S,
    want_grads: bool,
) -> Result<(GeneratorLoss, Option<Vec<Vec<T>>>)> {
    let batch = inputs.len();
    if batch < 2 {
        return Err(Error::Arity(
            "generator batches need at least 2 inputs".into(),
        ));
    }
    let flat: Vec<T> = inputs
        .iter()
        .flat_map(|v| v.iter().map(|x| T::from_f64_lossy(*x)))
        .collect();
    let tape = g.forward_tape(&flat, batch)?;
    let out = tape.output();
    let mut grad_out = want_grads.then(|| vec![T::zero(); out.len()]);

    let adversarial = if uri {
        0.0
    } else {
        let shifts = d.draw_shifts(batch, shuffle_rng);
        let (scores, dtape) = d.run(out, batch, Pass::Primal(shifts))?;
        if let Some(go) = grad_out.as_mut() {
            let seed = vec![T::from_f64_lossy(-1.0 / batch as f64); batch];
            let gx = d
                .backward(&dtape, &seed, None, true)
                .expect("input gradient requested");
            go.copy_from_slice(&gx);
        }
        -scores.iter().map(|s| s.as_f64()).sum::<f64>() / batch as f64
    };

    let weighted = objective.lambda_metric != 0.0;
    let metric = match metric_term(inputs, out, objective, want_grads && weighted) {
        Ok((m, mg)) => {
            if let (Some(go), Some(mg)) = (grad_out.as_mut(), mg) {
                for (a, b) in go.iter_mut().zip(mg) {
                    *a = *a + T::from_f64_lossy(objective.lambda_metric * b);
                }
            }
            m
        }
        Err(e) if weighted => return Err(e),
        Err(_) => f64::NAN,
    };

    let total = adversarial
        + if weighted {
            objective.lambda_metric * metric
        } else {
            0.0
        };
    let grads = grad_out.map(|go| g.backward(&tape, &go));
    Ok((
        GeneratorLoss {
            total,
            adversarial,
            metric,
        },
        grads,
    ))
}
