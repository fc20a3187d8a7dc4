//! Randomized-transform defense. The encoder evaluates K arms — the identity
//! plus K−1 randomly drawn input transforms — picks the arm with the lowest
//! rate-distortion loss, and records the winning transform index in the
//! bitstream header so the decoder can invert it. Because the identity arm is
//! always among the candidates, the selected loss can never exceed the plain
//! encoder's loss on the same input, attacked or not.

use std::time::Instant;

use rand::Rng;

use crate::codec::{CodecError, CodecModel, LatentCode, RDRecord};
use crate::entropy::{self, Bitstream, EntropyError, BITSTREAM_VERSION};
use crate::metrics;
use crate::tensor::Tensor;
use crate::transform::TransformDescriptor;

/// Result of a selection encode.
#[derive(Debug, Clone)]
pub struct EncodeOutcome {
    pub bitstream: Bitstream,
    /// Packed index of the winning transform; 0 iff the identity arm won.
    pub theta: u32,
    /// Per-arm rd losses in arm order (arm 0 is the identity).
    pub losses: Vec<f64>,
    /// Index of the winning arm.
    pub chosen: usize,
    /// Reporting record: measured bits of the emitted stream per source
    /// pixel, plus the quality of the winning reconstruction.
    pub record: RDRecord,
    /// Wall-clock time of the whole encode.
    pub encode_seconds: f64,
}

/// One fully evaluated candidate arm.
struct ArmEval {
    desc: TransformDescriptor,
    latent: LatentCode,
    /// Coder-rate rd loss: quantized-pmf bits per source pixel plus
    /// lambda * MSE against the encoder's input in the original frame.
    loss: f64,
    /// Reconstruction restored to the original frame (clamped, exact dims).
    reconstruction: Tensor,
}

fn eval_arm(
    model: &CodecModel,
    x: &Tensor,
    desc: TransformDescriptor,
) -> Result<ArmEval, CodecError> {
    let (_, h, w) = x.dims3("defense")?;
    let transformed;
    let xt = if desc.is_identity() {
        x
    } else {
        transformed = desc.apply(x)?;
        &transformed
    };
    let (_, th, tw) = xt.dims3("defense")?;
    let latent = model.quantize_latent(xt)?;
    let table = model.pmf_table(latent.ymin, latent.ymax)?;
    let bits = entropy::ideal_payload_bits(&table, &latent.values, latent.channels, latent.h * latent.w);
    let recon_t = model.decode_image(&latent, (th, tw))?;
    let reconstruction = if desc.is_identity() {
        recon_t
    } else {
        desc.invert(&recon_t, h, w)?
    };
    let distortion = metrics::mse(x, &reconstruction)?;
    let loss = bits / (h * w) as f64 + model.config.lambda as f64 * distortion;
    Ok(ArmEval {
        desc,
        latent,
        loss,
        reconstruction,
    })
}

/// Picks the winning arm from per-arm losses. Later arms win ties, so any
/// transformed arm that matches the identity arm is preferred over it.
/// Because [`encode_k_way`] draws all descriptors before evaluating, calling
/// this on a prefix `&losses[..k]` reproduces the choice a smaller K-way
/// encoder would have made with the same rng.
pub fn select(losses: &[f64]) -> usize {
    let mut chosen = 0;
    let mut best = losses[0];
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l <= best {
            best = l;
            chosen = i;
        }
    }
    chosen
}

/// Assembles the container for an arm. The header always carries the
/// pre-transform dims; the decoder re-derives the transformed and padded
/// extents from the transform index.
fn assemble(
    model: &CodecModel,
    arm: &ArmEval,
    orig: (usize, usize),
) -> Result<Bitstream, CodecError> {
    let (h, w) = orig;
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(CodecError::DimsTooLarge { h, w });
    }
    let table = model.pmf_table(arm.latent.ymin, arm.latent.ymax)?;
    let payload = entropy::encode_payload(
        &table,
        &arm.latent.values,
        arm.latent.channels,
        arm.latent.h * arm.latent.w,
    )?;
    Ok(Bitstream {
        version: BITSTREAM_VERSION,
        model_id: model.model_id(),
        orig_h: h as u16,
        orig_w: w as u16,
        latent_channels: arm.latent.channels as u16,
        ymin: arm.latent.ymin as i16,
        ymax: arm.latent.ymax as i16,
        transform_index: arm.desc.pack(),
        payload,
    })
}

fn outcome_from(
    model: &CodecModel,
    x: &Tensor,
    arms: Vec<ArmEval>,
    started: Instant,
) -> Result<EncodeOutcome, CodecError> {
    let (_, h, w) = x.dims3("defense")?;
    let losses: Vec<f64> = arms.iter().map(|a| a.loss).collect();
    let chosen = select(&losses);
    let arm = &arms[chosen];
    let bitstream = assemble(model, arm, (h, w))?;
    let rate_bpp = (bitstream.total_bytes() * 8) as f64 / (h * w) as f64;
    let distortion = metrics::mse(x, &arm.reconstruction)?;
    let record = RDRecord {
        rate_bpp,
        distortion,
        rd_loss: rate_bpp + model.config.lambda as f64 * distortion,
        psnr_db: metrics::psnr_db(x, &arm.reconstruction)?,
        ms_ssim: metrics::ms_ssim(x, &arm.reconstruction).unwrap_or(f64::NAN),
    };
    Ok(EncodeOutcome {
        theta: bitstream.transform_index,
        bitstream,
        losses,
        chosen,
        record,
        encode_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Plain (identity-only) encode through the same machinery: equivalent to the
/// selection encode with K = 1.
pub fn encode_plain(model: &CodecModel, x: &Tensor) -> Result<EncodeOutcome, CodecError> {
    let started = Instant::now();
    let arms = vec![eval_arm(model, x, TransformDescriptor::IDENTITY)?];
    outcome_from(model, x, arms, started)
}

/// Naive randomized encode: one transform drawn over the whole space
/// (identity included), no selection. The rd record compares against the
/// original image after inversion.
pub fn encode_oneway_random<R: Rng + ?Sized>(
    model: &CodecModel,
    x: &Tensor,
    rng: &mut R,
) -> Result<(Bitstream, RDRecord), CodecError> {
    let (_, h, w) = x.dims3("defense")?;
    let desc = TransformDescriptor::sample(rng, false);
    let arm = eval_arm(model, x, desc)?;
    let bitstream = assemble(model, &arm, (h, w))?;
    let rate_bpp = (bitstream.total_bytes() * 8) as f64 / (h * w) as f64;
    let distortion = metrics::mse(x, &arm.reconstruction)?;
    let record = RDRecord {
        rate_bpp,
        distortion,
        rd_loss: rate_bpp + model.config.lambda as f64 * distortion,
        psnr_db: metrics::psnr_db(x, &arm.reconstruction)?,
        ms_ssim: metrics::ms_ssim(x, &arm.reconstruction).unwrap_or(f64::NAN),
    };
    Ok((bitstream, record))
}

/// Two-arm selection encode: identity versus one random transform.
pub fn encode_two_way<R: Rng + ?Sized>(
    model: &CodecModel,
    x: &Tensor,
    rng: &mut R,
) -> Result<EncodeOutcome, CodecError> {
    encode_k_way(model, x, rng, 2)
}

/// K-arm selection encode. All K−1 transform draws happen up front from the
/// given generator, so for a fixed rng state the arm list for K is a prefix
/// of the arm list for any larger K (selected loss is monotone in K).
pub fn encode_k_way<R: Rng + ?Sized>(
    model: &CodecModel,
    x: &Tensor,
    rng: &mut R,
    k: usize,
) -> Result<EncodeOutcome, CodecError> {
    if k == 0 {
        return Err(CodecError::CheckpointFormat(
            "encode_k_way needs at least one arm".into(),
        ));
    }
    let started = Instant::now();
    let mut descs = vec![TransformDescriptor::IDENTITY];
    for _ in 1..k {
        descs.push(TransformDescriptor::sample(rng, true));
    }
    let arms = descs
        .into_iter()
        .map(|d| eval_arm(model, x, d))
        .collect::<Result<Vec<_>, _>>()?;
    outcome_from(model, x, arms, started)
}

/// Header-driven decode of any stream this model produced: plain, one-way,
/// or selection encodes all round-trip through here. Applies the inverse
/// transform exactly when the header says one was used.
pub fn decode_any(model: &CodecModel, bs: &Bitstream) -> Result<Tensor, CodecError> {
    let want = model.model_id();
    if bs.model_id != want {
        return Err(CodecError::Entropy(EntropyError::ModelMismatch {
            stream: bs.model_id,
            model: want,
        }));
    }
    if bs.transform_index == 0 {
        return model.decompress(bs);
    }
    let desc = TransformDescriptor::unpack(bs.transform_index)?;
    let (h, w) = (bs.orig_h as usize, bs.orig_w as usize);
    let (th, tw) = desc.output_dims(h, w);
    let channels = bs.latent_channels as usize;
    if channels != model.config.cy {
        return Err(CodecError::Entropy(EntropyError::ChannelMismatch {
            table: model.config.cy,
            stream: channels,
        }));
    }
    let (lh, lw) = model.config.latent_dims(th, tw);
    let table = model.pmf_table(bs.ymin as i32, bs.ymax as i32)?;
    let values = entropy::decode_payload(&table, &bs.payload, channels, lh * lw)?;
    let latent = LatentCode {
        channels,
        h: lh,
        w: lw,
        values,
        ymin: bs.ymin as i32,
        ymax: bs.ymax as i32,
    };
    let recon_t = model.decode_image(&latent, (th, tw))?;
    Ok(desc.invert(&recon_t, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, IN_CHANNELS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CodecModel {
        CodecModel::seeded(
            CodecConfig {
                cmid: 8,
                cy: 6,
                lambda: 100.0,
            },
            24,
        )
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..IN_CHANNELS * h * w)
            .map(|i| {
                let base = 0.3 + 0.4 * ((i % w) as f32 / w as f32);
                (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
            })
            .collect();
        Tensor::new(vec![IN_CHANNELS, h, w], data).unwrap()
    }

    /// Rng stub that always yields zero, forcing transform index 0.
    struct ZeroRng;
    impl rand::RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
    }

    #[test]
    fn selection_prefers_later_arms_on_ties() {
        assert_eq!(select(&[3.0, 5.0, 3.0]), 2);
        assert_eq!(select(&[1.0, 1.0]), 1);
        assert_eq!(select(&[2.0, 1.0, 1.0]), 2);
        assert_eq!(select(&[5.0, 4.0, 3.0]), 2);
        assert_eq!(select(&[7.0]), 0);
        assert_eq!(select(&[1.0, 2.0]), 0);
    }

    #[test]
    fn oneway_forced_identity_matches_plain_encoding() {
        let m = model();
        let x = image(20, 16, 1);
        let (bs, record) = encode_oneway_random(&m, &x, &mut ZeroRng).unwrap();
        let plain = m.compress(&x, 0).unwrap();
        assert_eq!(bs.to_bytes(), plain.to_bytes());
        assert!(record.rd_loss > 0.0);
    }

    #[test]
    fn oneway_restores_original_dims_for_any_transform() {
        let m = model();
        let x = image(20, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let (bs, record) = encode_oneway_random(&m, &x, &mut rng).unwrap();
            let out = decode_any(&m, &bs).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(
                (record.rd_loss - (record.rate_bpp + 100.0 * record.distortion)).abs() < 1e-9
            );
        }
    }

    #[test]
    fn two_way_safety_net_is_exact() {
        let m = model();
        for seed in 0..8u64 {
            let x = image(20, 16, 10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = encode_two_way(&m, &x, &mut rng).unwrap();
            assert_eq!(out.losses.len(), 2);
            assert!(
                out.losses[out.chosen] <= out.losses[0],
                "selected loss must never exceed the identity arm"
            );
            assert_eq!(out.theta == 0, out.chosen == 0);
            assert!(out.encode_seconds > 0.0);
        }
    }

    #[test]
    fn identity_wins_give_byte_identical_plain_payloads() {
        let m = model();
        let x = image(20, 16, 30);
        let plain = m.compress(&x, 0).unwrap().to_bytes();
        let mut identity_wins = 0;
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = encode_two_way(&m, &x, &mut rng).unwrap();
            if out.chosen == 0 {
                identity_wins += 1;
                assert_eq!(out.bitstream.to_bytes(), plain);
            }
        }
        assert!(
            identity_wins > 0,
            "expected the identity arm to win at least once in 40 draws"
        );
    }

    #[test]
    fn k_way_nesting_and_monotonicity() {
        let m = model();
        let x = image(20, 16, 40);

        // K = 1 is the plain encode
        let one = encode_k_way(&m, &x, &mut ChaCha8Rng::seed_from_u64(9), 1).unwrap();
        assert_eq!(one.theta, 0);
        assert_eq!(one.bitstream.to_bytes(), m.compress(&x, 0).unwrap().to_bytes());

        // K = 2 equals encode_two_way under the same seed
        let two = encode_two_way(&m, &x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let two_k = encode_k_way(&m, &x, &mut ChaCha8Rng::seed_from_u64(9), 2).unwrap();
        assert_eq!(two.bitstream.to_bytes(), two_k.bitstream.to_bytes());
        assert_eq!(two.losses, two_k.losses);

        // nested prefixes: same seed, larger K extends the arm list
        let four = encode_k_way(&m, &x, &mut ChaCha8Rng::seed_from_u64(9), 4).unwrap();
        assert_eq!(&four.losses[..2], &two.losses[..]);
        assert!(
            four.losses[four.chosen] <= two.losses[two.chosen],
            "more arms can only help"
        );
    }

    #[test]
    fn decode_any_reproduces_the_selected_reconstruction() {
        let m = model();
        // scan seeds so both arm types are exercised
        let mut saw_identity = false;
        let mut saw_transformed = false;
        for seed in 0..60u64 {
            let x = image(20, 16, 50 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = encode_two_way(&m, &x, &mut rng).unwrap();
            let decoded = decode_any(&m, &out.bitstream).unwrap();
            assert_eq!(decoded.shape(), x.shape());
            // the decoder-side image is the same deterministic function that
            // produced the distortion used during selection
            let direct = {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let redo = encode_two_way(&m, &x, &mut rng).unwrap();
                assert_eq!(redo.bitstream.to_bytes(), out.bitstream.to_bytes());
                decode_any(&m, &redo.bitstream).unwrap()
            };
            assert_eq!(decoded.data(), direct.data());
            if out.chosen == 0 {
                saw_identity = true;
            } else {
                saw_transformed = true;
            }
            if saw_identity && saw_transformed {
                break;
            }
        }
        assert!(saw_identity, "no identity win in 60 seeds");
    }

    #[test]
    fn decode_any_rejects_foreign_models() {
        let m = model();
        let other = CodecModel::seeded(m.config, 25);
        let x = image(20, 16, 70);
        let out = encode_two_way(&m, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            decode_any(&other, &out.bitstream),
            Err(CodecError::Entropy(EntropyError::ModelMismatch { .. }))
        ));
    }

    #[test]
    fn naive_random_encoding_is_no_better_than_plain_on_average() {
        let m = model();
        let x = image(20, 16, 80);
        let plain = encode_plain(&m, &x).unwrap().record.rd_loss;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean: f64 = (0..30)
            .map(|_| encode_oneway_random(&m, &x, &mut rng).unwrap().1.rd_loss)
            .sum::<f64>()
            / 30.0;
        assert!(
            mean >= plain,
            "random transforms should not help on average (mean {mean} vs plain {plain})"
        );
    }
}
