//! Small learned image codec: a two-stage strided conv encoder, a mirrored
//! transpose-conv decoder, round/noise quantization, and a per-channel
//! discretized-logistic rate model. The same graph serves training (noise
//! surrogate), attacks (straight-through rounding, gradients w.r.t. the
//! image), and the real entropy coder (whose tables quantize the identical
//! logistic pmf, so estimated and measured rates agree to coder tolerance).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{
    self, Bitstream, EntropyError, PmfTable, BITSTREAM_VERSION, SYMBOL_CLAMP,
};
use crate::metrics;
use crate::tensor::{Graph, QuantizeMode, Tensor, TensorError, TensorResult, Var};
use crate::transform::TransformDescriptor;

pub const IN_CHANNELS: usize = 3;
const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic (expected \"RDSC\")")]
    CheckpointMagic,
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u16),
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
    },
    #[error("image dims {h}x{w} exceed the u16 header fields")]
    DimsTooLarge { h: usize, w: usize },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Architecture and loss configuration. The downsampling factor is fixed by
/// the two stride-2 stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Hidden width between the two encoder (and decoder) stages.
    pub cmid: usize,
    /// Latent channel count.
    pub cy: usize,
    /// Rate-distortion trade-off weight on MSE.
    pub lambda: f32,
}

impl CodecConfig {
    pub const DOWNSAMPLE: usize = STRIDE * STRIDE;

    /// Low-rate preset.
    pub fn low_rate() -> Self {
        Self {
            cmid: 16,
            cy: 24,
            lambda: 100.0,
        }
    }

    /// High-rate preset (heavier distortion penalty).
    pub fn high_rate() -> Self {
        Self {
            cmid: 16,
            cy: 24,
            lambda: 1000.0,
        }
    }

    /// Input dims rounded up to the downsampling multiple.
    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let s = Self::DOWNSAMPLE;
        (h.div_ceil(s) * s, w.div_ceil(s) * s)
    }

    /// Latent spatial extent for an `h x w` input after padding.
    pub fn latent_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.padded_dims(h, w);
        (ph / Self::DOWNSAMPLE, pw / Self::DOWNSAMPLE)
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::low_rate()
    }
}

/// Trained parameters. Field order here is the checkpoint declaration order.
#[derive(Debug, Clone)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w2: Tensor,
    pub enc_b2: Tensor,
    pub dec_w1: Tensor,
    pub dec_b1: Tensor,
    pub dec_w2: Tensor,
    pub dec_b2: Tensor,
    /// Per-latent-channel logistic location.
    pub mu: Tensor,
    /// Per-latent-channel log scale; sigma = max(exp(log_scale), 1e-6).
    pub log_scale: Tensor,
}

/// Handles to one model's parameters inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub enc_w1: Var,
    pub enc_b1: Var,
    pub enc_w2: Var,
    pub enc_b2: Var,
    pub dec_w1: Var,
    pub dec_b1: Var,
    pub dec_w2: Var,
    pub dec_b2: Var,
    pub mu: Var,
    pub log_scale: Var,
}

impl ModelVars {
    fn all(&self) -> [Var; 10] {
        [
            self.enc_w1,
            self.enc_b1,
            self.enc_w2,
            self.enc_b2,
            self.dec_w1,
            self.dec_b1,
            self.dec_w2,
            self.dec_b2,
            self.mu,
            self.log_scale,
        ]
    }
}

/// Quantized latent plus its per-image symbol range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentCode {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// Channel-major symbols, each within [ymin, ymax].
    pub values: Vec<i32>,
    pub ymin: i32,
    pub ymax: i32,
}

/// Everything rd_loss knows about one image, detached from the graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDRecord {
    /// Model-estimated rate in bits per source pixel.
    pub rate_bpp: f64,
    /// Mean squared error of the reconstruction against the reference.
    pub distortion: f64,
    /// rate_bpp + lambda * distortion.
    pub rd_loss: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

/// A live rd_loss evaluation: the graph plus handles for backprop.
pub struct RdEval {
    pub graph: Graph,
    /// The image leaf (gradients land here when it was marked trainable).
    pub image: Var,
    pub params: ModelVars,
    /// Scalar rate in bits (not yet normalized per pixel).
    pub rate_bits: Var,
    /// Scalar MSE against the reference image.
    pub distortion: Var,
    /// Scalar rate_bpp + lambda * distortion: the differentiable loss.
    pub rd: Var,
    /// Reconstruction at original dims, `[3, H, W]` (clamped in round mode).
    pub reconstruction: Var,
    pub record: RDRecord,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data constructed together")
}

impl CodecModel {
    /// Fresh model with seeded uniform fan-in initialization, zero biases,
    /// and a unit logistic prior (mu = 0, log_scale = 0).
    pub fn seeded(config: CodecConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cm, cy) = (config.cmid, config.cy);
        let k2 = KERNEL * KERNEL;
        Self {
            config,
            enc_w1: uniform_init(&mut rng, vec![cm, IN_CHANNELS, KERNEL, KERNEL], IN_CHANNELS * k2),
            enc_b1: Tensor::zeros(vec![cm]),
            enc_w2: uniform_init(&mut rng, vec![cy, cm, KERNEL, KERNEL], cm * k2),
            enc_b2: Tensor::zeros(vec![cy]),
            dec_w1: uniform_init(&mut rng, vec![cy, cm, KERNEL, KERNEL], cy * k2 / 4),
            dec_b1: Tensor::zeros(vec![cm]),
            dec_w2: uniform_init(&mut rng, vec![cm, IN_CHANNELS, KERNEL, KERNEL], cm * k2 / 4),
            dec_b2: Tensor::zeros(vec![IN_CHANNELS]),
            mu: Tensor::zeros(vec![cy]),
            log_scale: Tensor::zeros(vec![cy]),
        }
    }

    fn params(&self) -> [&Tensor; 10] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w2,
            &self.enc_b2,
            &self.dec_w1,
            &self.dec_b1,
            &self.dec_w2,
            &self.dec_b2,
            &self.mu,
            &self.log_scale,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.dec_w1,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
            &mut self.mu,
            &mut self.log_scale,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// 64-bit FNV-1a over all parameter bytes in declaration order; any
    /// single-parameter change changes the id.
    pub fn model_id(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in self.params() {
            for v in t.iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Inserts all parameters into `g` as leaves.
    pub fn insert_params(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        ModelVars {
            enc_w1: g.leaf(self.enc_w1.clone(), trainable),
            enc_b1: g.leaf(self.enc_b1.clone(), trainable),
            enc_w2: g.leaf(self.enc_w2.clone(), trainable),
            enc_b2: g.leaf(self.enc_b2.clone(), trainable),
            dec_w1: g.leaf(self.dec_w1.clone(), trainable),
            dec_b1: g.leaf(self.dec_b1.clone(), trainable),
            dec_w2: g.leaf(self.dec_w2.clone(), trainable),
            dec_b2: g.leaf(self.dec_b2.clone(), trainable),
            mu: g.leaf(self.mu.clone(), trainable),
            log_scale: g.leaf(self.log_scale.clone(), trainable),
        }
    }

    /// Encoder forward on a padded `[1, 3, H, W]` input; `H`, `W` must be
    /// multiples of the downsampling factor.
    pub fn encoder_forward(&self, g: &mut Graph, p: &ModelVars, x: Var) -> TensorResult<Var> {
        Ok(self.encoder_features(g, p, x)?.1)
    }

    /// Encoder forward that also exposes the intermediate activation: returns
    /// `(first-stage activation, latent)`.
    pub fn encoder_features(
        &self,
        g: &mut Graph,
        p: &ModelVars,
        x: Var,
    ) -> TensorResult<(Var, Var)> {
        let (_, _, h, w) = g.value(x).dims4("encoder")?;
        if h % CodecConfig::DOWNSAMPLE != 0 || w % CodecConfig::DOWNSAMPLE != 0 {
            return Err(TensorError::Invalid {
                op: "encoder",
                msg: format!("input {h}x{w} not padded to a multiple of {}", CodecConfig::DOWNSAMPLE),
            });
        }
        let h1 = g.conv2d(x, p.enc_w1, Some(p.enc_b1), STRIDE, PAD)?;
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE)?;
        let y = g.conv2d(a1, p.enc_w2, Some(p.enc_b2), STRIDE, PAD)?;
        Ok((a1, y))
    }

    /// Decoder forward from a `[1, Cy, h, w]` latent back to padded dims.
    /// The output is not clamped; eval paths clamp afterwards.
    pub fn decoder_forward(&self, g: &mut Graph, p: &ModelVars, yhat: Var) -> TensorResult<Var> {
        let h1 = g.conv2d_transpose(yhat, p.dec_w1, Some(p.dec_b1), STRIDE, PAD)?;
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE)?;
        g.conv2d_transpose(a1, p.dec_w2, Some(p.dec_b2), STRIDE, PAD)
    }

    /// Replicate-pads a `[1, 3, H, W]` image var to downsampling multiples.
    pub fn pad_input(&self, g: &mut Graph, x: Var) -> TensorResult<Var> {
        let (_, _, h, w) = g.value(x).dims4("pad_input")?;
        let (ph, pw) = self.config.padded_dims(h, w);
        if (ph, pw) == (h, w) {
            return Ok(x);
        }
        // pad_replicate works on [C, H, W]: drop and restore the batch axis
        let flat = g.reshape(x, vec![IN_CHANNELS, h, w])?;
        let padded = g.pad_replicate(flat, ph - h, pw - w)?;
        g.reshape(padded, vec![1, IN_CHANNELS, ph, pw])
    }

    /// Runs the encoder and quantizer: returns `(y, yhat)` where `yhat` is
    /// `round(y)` with a straight-through gradient, or `y + u` with seeded
    /// uniform noise `u ~ U(-0.5, 0.5)` in noise mode.
    pub fn encode_latent(
        &self,
        g: &mut Graph,
        p: &ModelVars,
        x: Var,
        mode: QuantizeMode,
    ) -> TensorResult<(Var, Var)> {
        let y = self.encoder_forward(g, p, x)?;
        let yhat = match mode {
            QuantizeMode::Round => g.round_ste(y)?,
            QuantizeMode::Noise { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = g.shape(y).to_vec();
                let len: usize = shape.iter().product();
                let noise: Vec<f32> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
                let nv = g.constant(Tensor::new(shape, noise)?);
                g.add(y, nv)?
            }
        };
        Ok((y, yhat))
    }

    /// Total model-estimated code length of `yhat` in bits.
    pub fn rate_bits(&self, g: &mut Graph, p: &ModelVars, yhat: Var) -> TensorResult<Var> {
        g.logistic_bits(yhat, p.mu, p.log_scale)
    }

    /// Builds the full rate-distortion graph for one `[3, H, W]` image.
    ///
    /// Round mode mirrors the deployed codec (reconstruction clamped to
    /// [0,1]); noise mode is the training surrogate and leaves the decoder
    /// output unclamped so early-training gradients stay alive. `reference`
    /// is the image distortion is measured against (defaults to the input).
    pub fn rd_eval(
        &self,
        image: &Tensor,
        mode: QuantizeMode,
        image_trainable: bool,
        params_trainable: bool,
        reference: Option<&Tensor>,
    ) -> TensorResult<RdEval> {
        let (c, h, w) = image.dims3("rd_eval")?;
        if c != IN_CHANNELS {
            return Err(TensorError::Invalid {
                op: "rd_eval",
                msg: format!("expected {IN_CHANNELS} channels, got {c}"),
            });
        }
        let mut g = Graph::new();
        let params = self.insert_params(&mut g, params_trainable);
        let image_var = g.leaf(image.clone().reshape(vec![1, c, h, w])?, image_trainable);
        let reference_var = match reference {
            Some(r) => {
                if r.shape() != image.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "rd_eval",
                        lhs: r.shape().to_vec(),
                        rhs: image.shape().to_vec(),
                    });
                }
                g.constant(r.clone().reshape(vec![1, c, h, w])?)
            }
            None => image_var,
        };
        let padded = self.pad_input(&mut g, image_var)?;
        let (_, yhat) = self.encode_latent(&mut g, &params, padded, mode)?;
        let rate_bits = self.rate_bits(&mut g, &params, yhat)?;
        let decoded = self.decoder_forward(&mut g, &params, yhat)?;
        let (_, _, ph, pw) = g.value(decoded).dims4("rd_eval")?;
        let flat = g.reshape(decoded, vec![IN_CHANNELS, ph, pw])?;
        let cropped = g.crop(flat, 0, 0, h, w)?;
        let recon = if matches!(mode, QuantizeMode::Round) {
            g.clamp01(cropped)?
        } else {
            cropped
        };
        let recon_batched = g.reshape(recon, vec![1, IN_CHANNELS, h, w])?;
        let distortion = g.mse(recon_batched, reference_var)?;
        let px = (h * w) as f32;
        let rate_bpp = g.mul_scalar(rate_bits, 1.0 / px)?;
        let weighted = g.mul_scalar(distortion, self.config.lambda)?;
        let rd = g.add(rate_bpp, weighted)?;

        // detached record; quality metrics always score the clamped image
        let recon_t = g.value(recon).clone();
        let clamped = if matches!(mode, QuantizeMode::Round) {
            recon_t.clone()
        } else {
            Tensor::new(
                recon_t.shape().to_vec(),
                recon_t.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>(),
            )?
        };
        let ref_img = reference.unwrap_or(image);
        // MS-SSIM needs at least one 11x11 analysis window; images smaller
        // than that (unit-test sizes only) record NaN
        let ms_ssim = metrics::ms_ssim(ref_img, &clamped).unwrap_or(f64::NAN);
        let record = RDRecord {
            rate_bpp: g.value(rate_bpp).item()? as f64,
            distortion: g.value(distortion).item()? as f64,
            rd_loss: g.value(rd).item()? as f64,
            psnr_db: metrics::psnr_db(ref_img, &clamped)?,
            ms_ssim,
        };
        Ok(RdEval {
            graph: g,
            image: image_var,
            params,
            rate_bits,
            distortion,
            rd,
            reconstruction: recon,
            record,
        })
    }

    /// Deterministic eval-mode quantization to integer symbols with the
    /// per-image range, clamped to the coder's representable span.
    pub fn quantize_latent(&self, image: &Tensor) -> TensorResult<LatentCode> {
        let (c, h, w) = image.dims3("quantize_latent")?;
        if c != IN_CHANNELS {
            return Err(TensorError::Invalid {
                op: "quantize_latent",
                msg: format!("expected {IN_CHANNELS} channels, got {c}"),
            });
        }
        let mut g = Graph::new();
        let params = self.insert_params(&mut g, false);
        let image_var = g.leaf(image.clone().reshape(vec![1, c, h, w])?, false);
        let padded = self.pad_input(&mut g, image_var)?;
        let y = self.encoder_forward(&mut g, &params, padded)?;
        let (_, cy, lh, lw) = g.value(y).dims4("quantize_latent")?;
        let values: Vec<i32> = g
            .value(y)
            .iter()
            .map(|v| (v.round() as i32).clamp(-SYMBOL_CLAMP, SYMBOL_CLAMP))
            .collect();
        let ymin = values.iter().copied().min().unwrap_or(0);
        let ymax = values.iter().copied().max().unwrap_or(0);
        Ok(LatentCode {
            channels: cy,
            h: lh,
            w: lw,
            values,
            ymin,
            ymax,
        })
    }

    /// Decodes an integer latent back to a `[3, H, W]` image, clamped and
    /// cropped to `orig` dims. Fully deterministic.
    pub fn decode_image(&self, latent: &LatentCode, orig: (usize, usize)) -> TensorResult<Tensor> {
        let (h, w) = orig;
        let (lh_want, lw_want) = self.config.latent_dims(h, w);
        if (latent.channels, latent.h, latent.w) != (self.config.cy, lh_want, lw_want) {
            return Err(TensorError::Invalid {
                op: "decode_image",
                msg: format!(
                    "latent {}x{}x{} inconsistent with {h}x{w} under this config",
                    latent.channels, latent.h, latent.w
                ),
            });
        }
        let mut g = Graph::new();
        let params = self.insert_params(&mut g, false);
        let data: Vec<f32> = latent.values.iter().map(|&v| v as f32).collect();
        let yhat = g.constant(Tensor::new(
            vec![1, latent.channels, latent.h, latent.w],
            data,
        )?);
        let decoded = self.decoder_forward(&mut g, &params, yhat)?;
        let (_, _, ph, pw) = g.value(decoded).dims4("decode_image")?;
        let flat = g.reshape(decoded, vec![IN_CHANNELS, ph, pw])?;
        let cropped = g.crop(flat, 0, 0, h, w)?;
        let clamped = g.clamp01(cropped)?;
        Ok(g.value(clamped).clone())
    }

    /// Entropy model table over `[ymin, ymax]`, shared by encode and decode.
    pub fn pmf_table(&self, ymin: i32, ymax: i32) -> Result<PmfTable, EntropyError> {
        PmfTable::from_logistic(self.mu.data(), self.log_scale.data(), ymin, ymax)
    }

    /// Full compression of a `[3, H, W]` image to a container bitstream.
    /// `transform_index` is stored verbatim (0 = plain encode).
    pub fn compress(&self, image: &Tensor, transform_index: u32) -> Result<Bitstream, CodecError> {
        let (_, h, w) = image.dims3("compress")?;
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(CodecError::DimsTooLarge { h, w });
        }
        let latent = self.quantize_latent(image)?;
        let table = self.pmf_table(latent.ymin, latent.ymax)?;
        let payload = entropy::encode_payload(
            &table,
            &latent.values,
            latent.channels,
            latent.h * latent.w,
        )?;
        Ok(Bitstream {
            version: BITSTREAM_VERSION,
            model_id: self.model_id(),
            orig_h: h as u16,
            orig_w: w as u16,
            latent_channels: latent.channels as u16,
            ymin: latent.ymin as i16,
            ymax: latent.ymax as i16,
            transform_index,
            payload,
        })
    }

    /// Inverse of [`Self::compress`] up to codec distortion: checks the model
    /// id, derives the latent extent from the header dims, decodes symbols,
    /// and reconstructs. Does not undo any recorded transform — that is the
    /// caller's job since it needs the pre-transform dims.
    pub fn decompress(&self, bs: &Bitstream) -> Result<Tensor, CodecError> {
        let want = self.model_id();
        if bs.model_id != want {
            return Err(CodecError::Entropy(EntropyError::ModelMismatch {
                stream: bs.model_id,
                model: want,
            }));
        }
        let (h, w) = (bs.orig_h as usize, bs.orig_w as usize);
        let (lh, lw) = self.config.latent_dims(h, w);
        let channels = bs.latent_channels as usize;
        if channels != self.config.cy {
            return Err(CodecError::Entropy(EntropyError::ChannelMismatch {
                table: self.config.cy,
                stream: channels,
            }));
        }
        let table = self.pmf_table(bs.ymin as i32, bs.ymax as i32)?;
        let values = entropy::decode_payload(&table, &bs.payload, channels, lh * lw)?;
        let latent = LatentCode {
            channels,
            h: lh,
            w: lw,
            values,
            ymin: bs.ymin as i32,
            ymax: bs.ymax as i32,
        };
        Ok(self.decode_image(&latent, (h, w))?)
    }

    // ── checkpoints ──────────────────────────────────────────────────────────

    /// Writes the versioned "RDSC" container: config block, then parameter
    /// tensors in declaration order as little-endian f32 with shape headers.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RDSC");
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.cmid as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.cy as u32).to_le_bytes());
        out.extend_from_slice(&(CodecConfig::DOWNSAMPLE as u32).to_le_bytes());
        out.extend_from_slice(&self.config.lambda.to_le_bytes());
        for t in self.params() {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CodecError> {
            if *pos + n > bytes.len() {
                return Err(CodecError::CheckpointFormat(format!(
                    "need {} bytes at offset {pos}, file has {}",
                    n,
                    bytes.len()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"RDSC" {
            return Err(CodecError::CheckpointMagic);
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CodecError::CheckpointVersion(version));
        }
        let read_u32 =
            |pos: &mut usize| -> Result<u32, CodecError> {
                Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
            };
        let cmid = read_u32(&mut pos)? as usize;
        let cy = read_u32(&mut pos)? as usize;
        let stride = read_u32(&mut pos)? as usize;
        if stride != CodecConfig::DOWNSAMPLE {
            return Err(CodecError::CheckpointFormat(format!(
                "downsampling factor {stride} unsupported"
            )));
        }
        let lambda = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let config = CodecConfig { cmid, cy, lambda };
        let mut template = Self::seeded(config, 0);
        for t in template.params_mut() {
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            if shape != t.shape() {
                return Err(CodecError::CheckpointFormat(format!(
                    "tensor shape {shape:?} does not match config-implied {:?}",
                    t.shape()
                )));
            }
            let len: usize = shape.iter().product();
            let raw = take(&mut pos, len * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if !data.iter().all(|v| v.is_finite()) {
                return Err(CodecError::CheckpointFormat(
                    "non-finite parameter value".into(),
                ));
            }
            *t = Tensor::new(shape, data)?;
        }
        if pos != bytes.len() {
            return Err(CodecError::CheckpointFormat(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(template)
    }
}

pub const CHECKPOINT_VERSION: u16 = 1;

// ── training ─────────────────────────────────────────────────────────────────

/// Adversarial augmentation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AdvMode {
    Off,
    /// Each batch is the union of clean images and one-step sign-gradient
    /// examples started from a uniform point in the eps-ball (step 1.25*eps),
    /// clipped to the ball and [0, 1].
    FgsmRandomInit { eps: f32 },
}

/// Input-transform augmentation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentMode {
    Off,
    /// With the given probability per example, train on a randomly transformed
    /// copy (dihedral flip, bilinear stretch, zero-pad shift) instead of the
    /// original. The selection encoder feeds the model exactly such inputs, so
    /// this teaches the entropy model their statistics — in particular that
    /// zero-padded borders are cheap to code.
    Transforms { prob: f32 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub adversarial: AdvMode,
    pub augment: AugmentMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            seed: 7,
            adversarial: AdvMode::Off,
            augment: AugmentMode::Off,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean rd loss per epoch, in batch order.
    pub epoch_rd: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(param_lens: &[usize], lr: f64) -> Self {
        Self {
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: [&mut Tensor; 10], grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (pi, p) in params.into_iter().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let g = &grads[pi];
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x = (*x as f64 - self.lr * mhat / (vhat.sqrt() + Self::EPS)) as f32;
            }
        }
    }
}

impl CodecModel {
    /// Rate-distortion training with the uniform-noise surrogate and Adam.
    /// Deterministic for a fixed seed: shuffling, quantizer noise, transform
    /// augmentation, and any adversarial starts all derive from per-step
    /// counters.
    pub fn train(
        &mut self,
        images: &[Tensor],
        cfg: &TrainConfig,
    ) -> Result<TrainReport, CodecError> {
        if images.is_empty() {
            return Err(CodecError::EmptyDataset);
        }
        let lens: Vec<usize> = self.params().iter().map(|t| t.len()).collect();
        let mut adam = Adam::new(&lens, cfg.lr as f64);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00c0_ffee);
        let mut report = TrainReport {
            epoch_rd: Vec::with_capacity(cfg.epochs),
        };
        let mut step = 0u64;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            shuffle_fisher_yates(&mut order, &mut shuffle_rng);
            let mut epoch_rd = 0.0f64;
            let mut epoch_n = 0usize;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.0; n]).collect();
                let mut batch_examples = 0usize;
                for &idx in batch {
                    step += 1;
                    let noise_seed = cfg.seed
                        .wrapping_mul(0x9e3779b97f4a7c15)
                        .wrapping_add(step);
                    let contribute = |img: &Tensor,
                                          grads: &mut Vec<Vec<f64>>|
                     -> Result<f64, CodecError> {
                        let mut eval = self.rd_eval(
                            img,
                            QuantizeMode::Noise { seed: noise_seed },
                            false,
                            true,
                            None,
                        )?;
                        eval.graph.backward(eval.rd).map_err(|e| {
                            CodecError::Diverged {
                                epoch,
                                step: step as usize,
                                what: e.to_string(),
                            }
                        })?;
                        for (pi, pv) in eval.params.all().into_iter().enumerate() {
                            if let Some(g) = eval.graph.grad(pv) {
                                for (acc, &gi) in grads[pi].iter_mut().zip(g) {
                                    *acc += gi as f64;
                                }
                            }
                        }
                        Ok(eval.record.rd_loss)
                    };
                    let augmented;
                    let example = match cfg.augment {
                        AugmentMode::Off => &images[idx],
                        AugmentMode::Transforms { prob } => {
                            let mut arng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x00a9_63b5);
                            if arng.random_range(0.0..1.0) < prob {
                                let desc = TransformDescriptor::sample(&mut arng, true);
                                augmented = desc.apply(&images[idx])?;
                                &augmented
                            } else {
                                &images[idx]
                            }
                        }
                    };
                    let rd = contribute(example, &mut grads)?;
                    if !rd.is_finite() {
                        return Err(CodecError::Diverged {
                            epoch,
                            step: step as usize,
                            what: format!("rd loss {rd}"),
                        });
                    }
                    epoch_rd += rd;
                    epoch_n += 1;
                    batch_examples += 1;
                    if let AdvMode::FgsmRandomInit { eps } = cfg.adversarial {
                        let adv = self.fgsm_example(&images[idx], eps, noise_seed ^ 0xfeed)?;
                        let rd = contribute(&adv, &mut grads)?;
                        epoch_rd += rd;
                        epoch_n += 1;
                        batch_examples += 1;
                    }
                }
                let inv = 1.0 / batch_examples as f64;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= inv;
                    }
                }
                adam.step(self.params_mut(), &grads);
                for t in self.params() {
                    if !t.all_finite() {
                        return Err(CodecError::Diverged {
                            epoch,
                            step: step as usize,
                            what: "non-finite parameter after optimizer step".into(),
                        });
                    }
                }
                // keep the logistic scale in its clamped-valid region
                for v in self.log_scale_mut_guard() {
                    *v = v.clamp(-13.0, 13.0);
                }
            }
            report.epoch_rd.push(epoch_rd / epoch_n as f64);
        }
        Ok(report)
    }

    fn log_scale_mut_guard(&mut self) -> &mut [f32] {
        self.log_scale.data_mut()
    }

    /// One-step FGSM with random initialization: start uniform in the
    /// eps-ball, ascend the straight-through rd loss by 1.25*eps along the
    /// gradient sign, clip to the ball and [0, 1].
    pub fn fgsm_example(&self, image: &Tensor, eps: f32, seed: u64) -> Result<Tensor, CodecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start: Vec<f32> = image
            .iter()
            .map(|v| (v + rng.random_range(-eps..eps)).clamp(0.0, 1.0))
            .collect();
        let start = Tensor::new(image.shape().to_vec(), start)?;
        let mut eval = self.rd_eval(&start, QuantizeMode::Round, true, false, Some(image))?;
        eval.graph.backward(eval.rd)?;
        let grad = eval
            .graph
            .grad(eval.image)
            .expect("image leaf was marked trainable");
        let alpha = 1.25 * eps;
        let adv: Vec<f32> = image
            .iter()
            .zip(start.iter().zip(grad))
            .map(|(x0, (xs, &g))| {
                let stepped = xs + alpha * sign(g);
                stepped.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0)
            })
            .collect();
        Ok(Tensor::new(image.shape().to_vec(), adv)?)
    }
}

#[inline]
pub(crate) fn sign(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn shuffle_fisher_yates(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // smooth-ish content: low-frequency ramps plus mild noise
        let mut data = Vec::with_capacity(IN_CHANNELS * h * w);
        for c in 0..IN_CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.35
                        + 0.3 * ((x as f32 / w as f32) + 0.7 * (y as f32 / h as f32))
                            * (1.0 + 0.2 * c as f32)
                        + rng.random_range(-0.03..0.03);
                    data.push((v * 0.6).clamp(0.0, 1.0));
                }
            }
        }
        Tensor::new(vec![IN_CHANNELS, h, w], data).unwrap()
    }

    fn small_config() -> CodecConfig {
        CodecConfig {
            cmid: 8,
            cy: 6,
            lambda: 100.0,
        }
    }

    #[test]
    fn geometry_round_trips_through_the_autoencoder() {
        let model = CodecModel::seeded(small_config(), 1);
        for &(h, w) in &[(16usize, 16usize), (20, 28), (17, 23), (5, 9)] {
            let img = test_image(h, w, 3);
            let eval = model
                .rd_eval(&img, QuantizeMode::Round, false, false, None)
                .unwrap();
            let r = eval.graph.value(eval.reconstruction);
            assert_eq!(r.shape(), &[IN_CHANNELS, h, w], "dims {h}x{w}");
            let (lh, lw) = model.config.latent_dims(h, w);
            assert_eq!((lh * 4 >= h, lw * 4 >= w), (true, true));
        }
    }

    #[test]
    fn latent_dims_follow_padding() {
        let cfg = small_config();
        assert_eq!(cfg.padded_dims(64, 64), (64, 64));
        assert_eq!(cfg.padded_dims(66, 70), (68, 72));
        assert_eq!(cfg.latent_dims(66, 70), (17, 18));
        assert_eq!(cfg.latent_dims(1, 1), (1, 1));
    }

    #[test]
    fn quantizer_modes_behave() {
        let model = CodecModel::seeded(small_config(), 2);
        let img = test_image(16, 16, 5);
        let mut g = Graph::new();
        let p = model.insert_params(&mut g, false);
        let x = g.constant(img.clone().reshape(vec![1, 3, 16, 16]).unwrap());
        let (y, yhat_round) = model
            .encode_latent(&mut g, &p, x, QuantizeMode::Round)
            .unwrap();
        for (&raw, &q) in g.value(y).data().iter().zip(g.value(yhat_round).data()) {
            assert_eq!(q, raw.round(), "round half away from zero");
        }
        let (_, yhat_noise) = model
            .encode_latent(&mut g, &p, x, QuantizeMode::Noise { seed: 11 })
            .unwrap();
        for (&raw, &n) in g.value(y).data().iter().zip(g.value(yhat_noise).data()) {
            assert!((n - raw).abs() <= 0.5, "noise stays within half a bin");
        }
        // same seed, same noise
        let (_, yhat_noise2) = model
            .encode_latent(&mut g, &p, x, QuantizeMode::Noise { seed: 11 })
            .unwrap();
        assert_eq!(g.value(yhat_noise).data(), g.value(yhat_noise2).data());
    }

    #[test]
    fn rd_record_is_internally_consistent() {
        let model = CodecModel::seeded(small_config(), 3);
        let img = test_image(24, 20, 7);
        let eval = model
            .rd_eval(&img, QuantizeMode::Round, false, false, None)
            .unwrap();
        let r = &eval.record;
        assert!(r.rate_bpp >= 0.0);
        assert!(r.distortion >= 0.0);
        assert!(
            (r.rd_loss - (r.rate_bpp + model.config.lambda as f64 * r.distortion)).abs() < 1e-5,
            "rd consistency: {r:?}"
        );
        assert!(r.psnr_db > 0.0 && r.ms_ssim > 0.0);
    }

    #[test]
    fn straight_through_image_gradient_is_finite_and_nonzero() {
        let model = CodecModel::seeded(small_config(), 4);
        let img = test_image(16, 16, 9);
        let mut eval = model
            .rd_eval(&img, QuantizeMode::Round, true, false, None)
            .unwrap();
        eval.graph.backward(eval.rd).unwrap();
        let g = eval.graph.grad(eval.image).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        let norm: f64 = g.iter().map(|&v| (v as f64).abs()).sum();
        assert!(norm > 0.0, "STE gradient must reach the image");
    }

    #[test]
    fn decode_image_crops_and_clamps() {
        let model = CodecModel::seeded(small_config(), 5);
        let img = test_image(66, 66, 11);
        let latent = model.quantize_latent(&img).unwrap();
        // padded to 68x68 -> latent 17x17
        assert_eq!((latent.h, latent.w), (17, 17));
        let out = model.decode_image(&latent, (66, 66)).unwrap();
        assert_eq!(out.shape(), &[3, 66, 66]);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        // deterministic
        let out2 = model.decode_image(&latent, (66, 66)).unwrap();
        assert_eq!(out.data(), out2.data());
        // inconsistent dims refused
        assert!(model.decode_image(&latent, (80, 80)).is_err());
    }

    #[test]
    fn compress_round_trip_and_rate_fidelity() {
        let model = CodecModel::seeded(small_config(), 6);
        let img = test_image(32, 24, 13);
        let bs = model.compress(&img, 0).unwrap();
        assert_eq!(bs.transform_index, 0);
        assert_eq!((bs.orig_h, bs.orig_w), (32, 24));

        // wire round trip is byte-exact
        let bytes = bs.to_bytes();
        let parsed = Bitstream::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, bs);

        // decompress reproduces decode_image of the quantized latent
        let recon = model.decompress(&bs).unwrap();
        let latent = model.quantize_latent(&img).unwrap();
        let direct = model.decode_image(&latent, (32, 24)).unwrap();
        assert_eq!(recon.data(), direct.data());

        // measured payload tracks the model rate estimate
        let eval = model
            .rd_eval(&img, QuantizeMode::Round, false, false, None)
            .unwrap();
        let model_bits = eval.record.rate_bpp * (32.0 * 24.0);
        let payload_bits = (bs.payload.len() * 8) as f64;
        let slack = 0.02 * model_bits + (32.0 * 8.0 + 64.0);
        assert!(
            (payload_bits - model_bits).abs() <= slack,
            "payload {payload_bits} vs model {model_bits}, slack {slack}"
        );

        // wrong model refuses to decode
        let other = CodecModel::seeded(small_config(), 7);
        assert!(matches!(
            other.decompress(&bs),
            Err(CodecError::Entropy(EntropyError::ModelMismatch { .. }))
        ));
    }

    #[test]
    fn model_id_tracks_every_parameter() {
        let model = CodecModel::seeded(small_config(), 8);
        let id = model.model_id();
        let mut poked = model.clone();
        poked.dec_b2.data_mut()[1] += 1e-4;
        assert_ne!(poked.model_id(), id);
        let mut poked = model.clone();
        poked.mu.data_mut()[0] = 0.5;
        assert_ne!(poked.model_id(), id);
        assert_eq!(model.clone().model_id(), id);
    }

    #[test]
    fn halving_channels_shrinks_the_model() {
        let full = CodecModel::seeded(
            CodecConfig {
                cmid: 16,
                cy: 24,
                lambda: 100.0,
            },
            1,
        );
        let half = CodecModel::seeded(
            CodecConfig {
                cmid: 8,
                cy: 12,
                lambda: 100.0,
            },
            1,
        );
        assert!(half.param_count() < full.param_count());
    }

    #[test]
    fn checkpoint_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rdsc");
        let model = CodecModel::seeded(small_config(), 9);
        model.save(&path).unwrap();
        let loaded = CodecModel::load(&path).unwrap();
        assert_eq!(loaded.model_id(), model.model_id());
        assert_eq!(loaded.config, model.config);

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.rdsc");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            CodecModel::load(&bad),
            Err(CodecError::CheckpointMagic)
        ));

        // truncated
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &orig[..orig.len() - 7]).unwrap();
        assert!(matches!(
            CodecModel::load(&bad),
            Err(CodecError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn one_epoch_improves_rd_majority_of_seeds() {
        // tiny setup: single image, a handful of steps
        let img = test_image(16, 16, 21);
        let mut wins = 0;
        for seed in 0..5u64 {
            let mut model = CodecModel::seeded(small_config(), 100 + seed);
            let before = model
                .rd_eval(&img, QuantizeMode::Round, false, false, None)
                .unwrap()
                .record
                .rd_loss;
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 1,
                lr: 1e-3,
                seed,
                adversarial: AdvMode::Off,
                augment: AugmentMode::Off,
            };
            // a single step is noisy; give the epoch a few passes over the image
            let images = vec![img.clone(); 8];
            model.train(&images, &cfg).unwrap();
            let after = model
                .rd_eval(&img, QuantizeMode::Round, false, false, None)
                .unwrap()
                .record
                .rd_loss;
            if after <= before {
                wins += 1;
            }
        }
        assert!(wins >= 3, "training should usually improve rd ({wins}/5)");
    }

    #[test]
    fn transform_augmented_training_is_deterministic_and_distinct() {
        let images: Vec<Tensor> = (0..3).map(|i| test_image(16, 16, 60 + i)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            seed: 5,
            adversarial: AdvMode::Off,
            augment: AugmentMode::Transforms { prob: 1.0 },
        };
        let mut a = CodecModel::seeded(small_config(), 51);
        a.train(&images, &cfg).unwrap();
        let mut b = CodecModel::seeded(small_config(), 51);
        b.train(&images, &cfg).unwrap();
        assert_eq!(a.model_id(), b.model_id(), "augmentation draws are seeded");

        let mut plain = CodecModel::seeded(small_config(), 51);
        plain
            .train(
                &images,
                &TrainConfig {
                    augment: AugmentMode::Off,
                    ..cfg
                },
            )
            .unwrap();
        assert_ne!(
            plain.model_id(),
            a.model_id(),
            "augmentation must change the training trajectory"
        );
    }

    #[test]
    fn fgsm_example_respects_ball_and_box() {
        let model = CodecModel::seeded(small_config(), 10);
        let img = test_image(16, 16, 23);
        let eps = 4.0 / 255.0;
        let adv = model.fgsm_example(&img, eps, 99).unwrap();
        for (x, a) in img.iter().zip(adv.iter()) {
            assert!((a - x).abs() <= eps + 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
        // deterministic under the seed
        let adv2 = model.fgsm_example(&img, eps, 99).unwrap();
        assert_eq!(adv.data(), adv2.data());
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let images: Vec<Tensor> = (0..4).map(|i| test_image(16, 16, 30 + i)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            seed: 5,
            adversarial: AdvMode::Off,
            augment: AugmentMode::Off,
        };
        let mut a = CodecModel::seeded(small_config(), 50);
        let ra = a.train(&images, &cfg).unwrap();
        let mut b = CodecModel::seeded(small_config(), 50);
        let rb = b.train(&images, &cfg).unwrap();
        assert_eq!(a.model_id(), b.model_id());
        assert_eq!(ra.epoch_rd, rb.epoch_rd);
    }
}
