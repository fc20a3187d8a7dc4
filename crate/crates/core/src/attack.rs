//! Gradient-based adversarial attacks on the codec: projected sign-gradient
//! ascent (PGD) with rate / distortion / combined targets, expectation over
//! random transforms (EoT) for attacking the randomized defense, and a
//! feature-disruption variant that pushes encoder activations away from their
//! clean statistics instead of attacking the final loss directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{sign, CodecError, CodecModel};
use crate::tensor::{Graph, QuantizeMode, Tensor, TensorError, Var};
use crate::transform::TransformDescriptor;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error("non-finite gradient at iteration {iter}: {what}")]
    NonFinite { iter: usize, what: String },
}

type AttackResult<T> = Result<T, AttackError>;

/// What the adversary maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    /// Model-estimated bits per pixel of the adversarial encode.
    Rate,
    /// MSE between the clean image and the reconstruction of the adversarial
    /// input (the victim serves a degraded image for an almost-clean input).
    Distortion,
    /// rate_bpp + lambda * distortion, the full operating loss.
    Rd,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l-infinity radius in [0,1] pixel units.
    pub eps: f32,
    /// Step size per iteration.
    pub alpha: f32,
    pub iters: usize,
    pub target: AttackTarget,
    /// Transform samples per step; 0 gives the vanilla single-path attack.
    pub eot_samples: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps: 4.0 / 255.0,
            alpha: 2.0 / 255.0,
            iters: 50,
            target: AttackTarget::Rd,
            eot_samples: 0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// `eps = 0` is allowed and makes every attack the identity.
    pub fn validate(&self) -> AttackResult<()> {
        if !(0.0..=1.0).contains(&self.eps) || !self.eps.is_finite() {
            return Err(AttackError::BadConfig(format!(
                "eps {} outside [0, 1]",
                self.eps
            )));
        }
        if self.eps > 0.0 && !(self.alpha > 0.0 && self.alpha <= self.eps) {
            return Err(AttackError::BadConfig(format!(
                "alpha {} must satisfy 0 < alpha <= eps ({})",
                self.alpha, self.eps
            )));
        }
        if self.iters == 0 {
            return Err(AttackError::BadConfig("iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One differentiable loss evaluation: graph plus the handles pgd needs.
struct LossGraph {
    graph: Graph,
    image: Var,
    loss: Var,
}

/// Loss along the plain (untransformed) codec path with straight-through
/// rounding. Distortion is always measured against `x_clean`.
fn plain_loss(
    model: &CodecModel,
    x_adv: &Tensor,
    x_clean: &Tensor,
    target: AttackTarget,
) -> AttackResult<LossGraph> {
    let (_, h, w) = x_adv.dims3("attack_loss")?;
    let mut eval = model.rd_eval(x_adv, QuantizeMode::Round, true, false, Some(x_clean))?;
    let loss = match target {
        AttackTarget::Rd => eval.rd,
        AttackTarget::Distortion => eval.distortion,
        AttackTarget::Rate => eval
            .graph
            .mul_scalar(eval.rate_bits, 1.0 / (h * w) as f32)?,
    };
    Ok(LossGraph {
        graph: eval.graph,
        image: eval.image,
        loss,
    })
}

/// Loss along one randomized-defense path: transform, encode, decode, invert,
/// then compare against the clean image in the original frame. Rate is still
/// normalized by the original pixel count so paths are commensurable.
fn transformed_loss(
    model: &CodecModel,
    x_adv: &Tensor,
    x_clean: &Tensor,
    target: AttackTarget,
    desc: &TransformDescriptor,
) -> AttackResult<LossGraph> {
    let (c, h, w) = x_adv.dims3("attack_loss")?;
    let mut g = Graph::new();
    let p = model.insert_params(&mut g, false);
    let image = g.leaf(x_adv.clone(), true);
    let transformed = desc.apply_graph(&mut g, image)?;
    let (tc, th, tw) = g.value(transformed).dims3("attack_loss")?;
    let batched = g.reshape(transformed, vec![1, tc, th, tw])?;
    let padded = model.pad_input(&mut g, batched)?;
    let (_, yhat) = model.encode_latent(&mut g, &p, padded, QuantizeMode::Round)?;
    let rate_bits = model.rate_bits(&mut g, &p, yhat)?;
    let decoded = model.decoder_forward(&mut g, &p, yhat)?;
    let (_, _, ph, pw) = g.value(decoded).dims4("attack_loss")?;
    let flat = g.reshape(decoded, vec![c, ph, pw])?;
    let cropped = g.crop(flat, 0, 0, th, tw)?;
    let clamped = g.clamp01(cropped)?;
    let restored = desc.invert_graph(&mut g, clamped, h, w)?;
    let clean = g.constant(x_clean.clone());
    let distortion = g.mse(restored, clean)?;
    let inv_px = 1.0 / (h * w) as f32;
    let loss = match target {
        AttackTarget::Rate => g.mul_scalar(rate_bits, inv_px)?,
        AttackTarget::Distortion => distortion,
        AttackTarget::Rd => {
            let bpp = g.mul_scalar(rate_bits, inv_px)?;
            let weighted = g.mul_scalar(distortion, model.config.lambda)?;
            g.add(bpp, weighted)?
        }
    };
    Ok(LossGraph {
        graph: g,
        image,
        loss,
    })
}

/// Scalar attack objective at `x_adv` (plain path), mostly for inspection and
/// tests; the optimizers below build the same graphs internally.
pub fn attack_loss(
    model: &CodecModel,
    x_adv: &Tensor,
    x_clean: &Tensor,
    target: AttackTarget,
) -> AttackResult<f64> {
    let lg = plain_loss(model, x_adv, x_clean, target)?;
    Ok(lg.graph.value(lg.loss).item()? as f64)
}

fn backward_image_grad(mut lg: LossGraph, iter: usize) -> AttackResult<Vec<f32>> {
    lg.graph.backward(lg.loss).map_err(|e| AttackError::NonFinite {
        iter,
        what: e.to_string(),
    })?;
    Ok(lg
        .graph
        .grad(lg.image)
        .expect("attack image leaf is trainable")
        .to_vec())
}

/// Loss value and gradient for the attack objective. With `eot_samples = 0`
/// this is the plain single-path loss. With samples, the expectation mirrors
/// the randomness of the defended encoder under attack: that encoder chooses
/// between the untransformed path and a random transform draw, so the plain
/// path and the mean over `eot_samples` fresh draws enter with equal weight.
/// (Averaging over transform draws alone leaves the untransformed path
/// unattacked, and the defense simply falls back to it.)
fn loss_gradient(
    model: &CodecModel,
    x: &Tensor,
    x_clean: &Tensor,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
    iter: usize,
) -> AttackResult<(f64, Vec<f32>)> {
    let lg = plain_loss(model, x, x_clean, cfg.target)?;
    let plain_value = lg.graph.value(lg.loss).item()? as f64;
    let plain_grad = backward_image_grad(lg, iter)?;
    if cfg.eot_samples == 0 {
        return Ok((plain_value, plain_grad));
    }
    let mut arm_value = 0.0f64;
    let mut arm_grad = vec![0.0f64; plain_grad.len()];
    for _ in 0..cfg.eot_samples {
        let desc = TransformDescriptor::sample(rng, true);
        let lg = transformed_loss(model, x, x_clean, cfg.target, &desc)?;
        arm_value += lg.graph.value(lg.loss).item()? as f64;
        let g = backward_image_grad(lg, iter)?;
        for (t, &gi) in arm_grad.iter_mut().zip(&g) {
            *t += gi as f64;
        }
    }
    let scale = 0.5 / cfg.eot_samples as f64;
    let grad = plain_grad
        .iter()
        .zip(&arm_grad)
        .map(|(&p, &a)| (0.5 * p as f64 + scale * a) as f32)
        .collect();
    Ok((0.5 * plain_value + scale * arm_value, grad))
}

fn check_input(x: &Tensor) -> AttackResult<()> {
    x.dims3("attack")?;
    if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(AttackError::BadConfig(
            "attack input must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

fn ascend(x: &Tensor, x_clean: &Tensor, grad: &[f32], cfg: &AttackConfig) -> Tensor {
    let data: Vec<f32> = x
        .iter()
        .zip(grad.iter())
        .zip(x_clean.iter())
        .map(|((&xi, &gi), &x0)| {
            (xi + cfg.alpha * sign(gi))
                .clamp(x0 - cfg.eps, x0 + cfg.eps)
                .clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Projected sign-gradient ascent on the configured target. The ball and box
/// constraints are re-applied after every step, and `eot_samples > 0` turns
/// this into the expectation-over-transforms attack.
///
/// The single-path objective is deterministic, so the attack returns the best
/// iterate seen (sign ascent oscillates around maxima; the endpoint is often
/// not the strongest point visited). The EoT objective is re-sampled every
/// step, so per-iterate values are noisy estimates and the final iterate is
/// returned instead.
pub fn pgd(model: &CodecModel, x_clean: &Tensor, cfg: &AttackConfig) -> AttackResult<Tensor> {
    cfg.validate()?;
    check_input(x_clean)?;
    if cfg.eps == 0.0 {
        return Ok(x_clean.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = x_clean.clone();
    let mut best: Option<(f64, Tensor)> = None;
    for iter in 0..cfg.iters {
        let (value, grad) = loss_gradient(model, &x, x_clean, cfg, &mut rng, iter)?;
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(AttackError::NonFinite {
                iter,
                what: "image gradient".into(),
            });
        }
        if cfg.eot_samples == 0 && best.as_ref().is_none_or(|(v, _)| value >= *v) {
            best = Some((value, x.clone()));
        }
        x = ascend(&x, x_clean, &grad, cfg);
    }
    if cfg.eot_samples == 0 {
        // the loop scored x_0..x_{iters-1}; score the endpoint too
        let value = attack_loss(model, &x, x_clean, cfg.target)?;
        if let Some((best_value, best_x)) = best {
            if best_value > value {
                return Ok(best_x);
            }
        }
    }
    Ok(x)
}

/// PGD on the defense-aware expectation: the untransformed path and the mean
/// over `eot_samples` fresh random transforms, mixed half-and-half each step.
/// With `eot_samples = 0` this is exactly `pgd`.
pub fn eot_attack(
    model: &CodecModel,
    x_clean: &Tensor,
    cfg: &AttackConfig,
) -> AttackResult<Tensor> {
    pgd(model, x_clean, cfg)
}

/// Feature-disruption attack: instead of the rate-distortion loss, maximize
///
///   sum over encoder stages of  ||f(x) - f(x_clean)||^2 - ||f(x) - mean(f(x))||^2
///
/// where `mean` is the per-channel spatial mean. This pushes activations away
/// from their clean values while collapsing their spatial structure. The
/// `target` field of the config is ignored.
pub fn fda_lite(model: &CodecModel, x_clean: &Tensor, cfg: &AttackConfig) -> AttackResult<Tensor> {
    cfg.validate()?;
    check_input(x_clean)?;
    if cfg.eps == 0.0 {
        return Ok(x_clean.clone());
    }
    let (c, h, w) = x_clean.dims3("fda_lite")?;

    // clean reference features, computed once
    let clean_feats: Vec<Tensor> = {
        let mut g = Graph::new();
        let p = model.insert_params(&mut g, false);
        let img = g.constant(x_clean.clone().reshape(vec![1, c, h, w])?);
        let padded = model.pad_input(&mut g, img)?;
        let (a1, y) = model.encoder_features(&mut g, &p, padded)?;
        vec![g.value(a1).clone(), g.value(y).clone()]
    };

    let mut x = x_clean.clone();
    for iter in 0..cfg.iters {
        let mut g = Graph::new();
        let p = model.insert_params(&mut g, false);
        let image = g.leaf(x.clone(), true);
        let batched = g.reshape(image, vec![1, c, h, w])?;
        let padded = model.pad_input(&mut g, batched)?;
        let (a1, y) = model.encoder_features(&mut g, &p, padded)?;
        let mut loss = None;
        for (feat, clean) in [a1, y].into_iter().zip(&clean_feats) {
            let clean_var = g.constant(clean.clone());
            let away = g.sub(feat, clean_var)?;
            let away_sq = g.mul(away, away)?;
            let away_term = g.sum(away_sq)?;
            let centered = g.sub_channel_mean(feat)?;
            let centered_sq = g.mul(centered, centered)?;
            let structure_term = g.sum(centered_sq)?;
            let term = g.sub(away_term, structure_term)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let loss = loss.expect("two encoder stages");
        let grad = backward_image_grad(
            LossGraph {
                graph: g,
                image,
                loss,
            },
            iter,
        )?;
        x = ascend(&x, x_clean, &grad, cfg);
    }
    Ok(x)
}
