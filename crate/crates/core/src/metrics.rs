//! Image-quality and rate metrics: PSNR, multi-scale SSIM, histograms, and
//! the per-run aggregate summary. Everything accumulates in f64 and is pure,
//! so results are identical across thread counts and platforms.

use serde::{Deserialize, Serialize};

use crate::codec::RDRecord;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Tables report lossless reconstructions as 99 dB instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean squared error over all elements, f64 accumulation.
pub fn mse(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(TensorError::Invalid {
            op: "mse",
            msg: "empty tensors".into(),
        });
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for [0,1] images: 10*log10(1/MSE),
/// monotone decreasing in MSE, capped at [`PSNR_CAP_DB`] (the cap also
/// stands in for the infinite PSNR of a perfect reconstruction).
pub fn psnr_db(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * e.log10()).min(PSNR_CAP_DB))
}

// ── multi-scale SSIM ─────────────────────────────────────────────────────────

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Number of dyadic scales available for an `h x w` image: halvings (ceil)
/// until a dimension drops below the 11-pixel window, at most 5.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let (mut h, mut w) = (h, w);
    let mut scales = 0;
    while scales < 5 && h >= WINDOW && w >= WINDOW {
        scales += 1;
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    scales
}

/// Valid-region separable Gaussian filter of an `h x w` f64 plane.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - (WINDOW - 1);
    let oh = h - (WINDOW - 1);
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * src[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// 2x2 average pooling with replicate padding for odd dims (ceil output).
fn downsample2(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        let y0 = 2 * y;
        let y1 = (2 * y + 1).min(h - 1);
        for x in 0..ow {
            let x0 = 2 * x;
            let x1 = (2 * x + 1).min(w - 1);
            out[y * ow + x] =
                0.25 * (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1]);
        }
    }
    (out, oh, ow)
}

/// Per-scale means of the contrast-structure term and, at the last scale, of
/// the full SSIM map, for one channel plane pair.
fn channel_ms_ssim(
    mut xa: Vec<f64>,
    mut xb: Vec<f64>,
    mut h: usize,
    mut w: usize,
    scales: usize,
    weights: &[f64],
    win: &[f64; WINDOW],
) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut score = 1.0f64;
    for scale in 0..scales {
        let n = h * w;
        let sq_a: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| a * b).collect();
        debug_assert_eq!(sq_a.len(), n);
        let ma = filter_valid(&xa, h, w, win);
        let mb = filter_valid(&xb, h, w, win);
        let maa = filter_valid(&sq_a, h, w, win);
        let mbb = filter_valid(&sq_b, h, w, win);
        let mab = filter_valid(&ab, h, w, win);
        let last = scale + 1 == scales;
        let mut acc = 0.0f64;
        for i in 0..ma.len() {
            let va = maa[i] - ma[i] * ma[i];
            let vb = mbb[i] - mb[i] * mb[i];
            let cab = mab[i] - ma[i] * mb[i];
            let cs = (2.0 * cab + c2) / (va + vb + c2);
            if last {
                let l = (2.0 * ma[i] * mb[i] + c1) / (ma[i] * ma[i] + mb[i] * mb[i] + c1);
                acc += l * cs;
            } else {
                acc += cs;
            }
        }
        // negative means (heavily anti-correlated structure) clamp to zero
        // so the weighted geometric mean stays real
        let mean = (acc / ma.len() as f64).max(0.0);
        score *= mean.powf(weights[scale]);
        if !last {
            let (da, oh, ow) = downsample2(&xa, h, w);
            let (db, _, _) = downsample2(&xb, h, w);
            xa = da;
            xb = db;
            h = oh;
            w = ow;
        }
    }
    score
}

/// Multi-scale SSIM of two `[C, H, W]` images in [0,1]. Uses the standard
/// five-scale weights; images too small for five scales use however many
/// dyadic scales fit (with the weight prefix renormalized to sum 1), and an
/// image smaller than the 11-pixel window errors out.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ms_ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (c, h, w) = a.dims3("ms_ssim")?;
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(TensorError::Invalid {
            op: "ms_ssim",
            msg: format!("{h}x{w} is smaller than the {WINDOW}-pixel window"),
        });
    }
    let mut weights = MS_WEIGHTS[..scales].to_vec();
    let sum: f64 = weights.iter().sum();
    for v in &mut weights {
        *v /= sum;
    }
    debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0f64;
    for ci in 0..c {
        let xa: Vec<f64> = a.data()[ci * plane..(ci + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let xb: Vec<f64> = b.data()[ci * plane..(ci + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        total += channel_ms_ssim(xa, xb, h, w, scales, &weights, &win);
    }
    Ok(total / c as f64)
}

// ── histograms and summaries ─────────────────────────────────────────────────

/// Uniform-bin histogram; out-of-range samples clamp into the end bins so
/// counts always sum to the sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize, lo: f64, hi: f64) -> TensorResult<Self> {
        if values.is_empty() || bins == 0 || !(hi > lo) {
            return Err(TensorError::Invalid {
                op: "histogram",
                msg: format!("{} values, {bins} bins, range [{lo}, {hi}]", values.len()),
            });
        }
        let mut counts = vec![0u64; bins];
        let scale = bins as f64 / (hi - lo);
        for &v in values {
            let idx = (((v - lo) * scale).floor() as i64).clamp(0, bins as i64 - 1) as usize;
            counts[idx] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    /// Bin edges, monotone, `bins + 1` entries.
    pub fn edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / bins as f64)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Aggregates over a set of per-image records; every aggregate is exactly
/// recomputable from the record list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: Vec<RDRecord>,
    pub mean_bpp: f64,
    pub median_bpp: f64,
    pub mean_psnr_db: f64,
    pub median_psnr_db: f64,
    pub mean_ms_ssim: f64,
    pub median_ms_ssim: f64,
    pub mean_rd_loss: f64,
    pub median_rd_loss: f64,
    pub bpp_histogram: Histogram,
    pub rd_histogram: Histogram,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalSummary {
    /// Builds the summary with `bins` histogram bins spanning the observed
    /// value ranges (padded a hair so the max lands inside the last bin).
    pub fn from_records(records: Vec<RDRecord>, bins: usize) -> TensorResult<Self> {
        if records.is_empty() {
            return Err(TensorError::Invalid {
                op: "eval_summary",
                msg: "no records".into(),
            });
        }
        let bpp: Vec<f64> = records.iter().map(|r| r.rate_bpp).collect();
        let psnr: Vec<f64> = records.iter().map(|r| r.psnr_db).collect();
        let ssim: Vec<f64> = records.iter().map(|r| r.ms_ssim).collect();
        let rd: Vec<f64> = records.iter().map(|r| r.rd_loss).collect();
        let span = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi + (hi - lo) * 1e-9)
            } else {
                (lo, lo + 1.0)
            }
        };
        let (blo, bhi) = span(&bpp);
        let (rlo, rhi) = span(&rd);
        Ok(Self {
            mean_bpp: mean(&bpp),
            median_bpp: median(&bpp),
            mean_psnr_db: mean(&psnr),
            median_psnr_db: median(&psnr),
            mean_ms_ssim: mean(&ssim),
            median_ms_ssim: median(&ssim),
            mean_rd_loss: mean(&rd),
            median_rd_loss: median(&rd),
            bpp_histogram: Histogram::build(&bpp, bins, blo, bhi)?,
            rd_histogram: Histogram::build(&rd, bins, rlo, rhi)?,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor_of(shape: &[usize], f: impl FnMut(usize) -> f32) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_matches_closed_forms() {
        let x = tensor_of(&[1, 8, 8], |i| (i as f32 * 0.123).fract() * 0.8);
        assert_eq!(psnr_db(&x, &x).unwrap(), PSNR_CAP_DB);

        // an exactly representable error of 0.125 -> MSE 0.015625 exactly
        let a = tensor_of(&[1, 8, 8], |_| 0.5);
        let b = tensor_of(&[1, 8, 8], |_| 0.625);
        let expect = -10.0 * 0.015625f64.log10();
        assert!((psnr_db(&a, &b).unwrap() - expect).abs() < 1e-12);

        // uniform error of 0.1 -> MSE 0.01 -> 20 dB (up to f32 storage error)
        let shifted = Tensor::new(
            x.shape().to_vec(),
            x.iter().map(|v| v + 0.1).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((psnr_db(&x, &shifted).unwrap() - 20.0).abs() < 1e-5);

        let shifted = Tensor::new(
            x.shape().to_vec(),
            x.iter().map(|v| v + 0.01).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((psnr_db(&x, &shifted).unwrap() - 40.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_is_monotone_in_mse() {
        let x = tensor_of(&[1, 6, 6], |_| 0.5);
        let mut last = f64::INFINITY;
        for &delta in &[0.01f32, 0.02, 0.05, 0.1, 0.3] {
            let y = Tensor::new(
                x.shape().to_vec(),
                x.iter().map(|v| v + delta).collect::<Vec<_>>(),
            )
            .unwrap();
            let p = psnr_db(&x, &y).unwrap();
            assert!(p < last, "psnr should fall as error grows");
            last = p;
        }
    }

    #[test]
    fn ms_ssim_of_identical_images_is_one() {
        let x = tensor_of(&[3, 32, 32], |i| ((i * 37) % 255) as f32 / 255.0);
        let v = ms_ssim(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ms_ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = tensor_of(&[3, 40, 40], |_| rng.random_range(0.0..1.0));
        let b = tensor_of(&[3, 40, 40], |_| rng.random_range(0.0..1.0));
        let ab = ms_ssim(&a, &b).unwrap();
        let ba = ms_ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn inverted_image_scores_poorly() {
        // values away from mid-gray, so inversion actually changes structure
        let x = tensor_of(&[1, 48, 48], |i| if (i / 7) % 2 == 0 { 0.9 } else { 0.15 });
        let inv = Tensor::new(
            x.shape().to_vec(),
            x.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
        )
        .unwrap();
        let v = ms_ssim(&x, &inv).unwrap();
        assert!(v < 0.5, "inverted checkerboard scored {v}");
    }

    #[test]
    fn scale_count_fallback() {
        assert_eq!(ms_ssim_scales(161, 161), 5);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(64, 256), 3);
        assert_eq!(ms_ssim_scales(11, 11), 1);
        assert_eq!(ms_ssim_scales(10, 300), 0);

        // small image still evaluates via the fallback
        let x = tensor_of(&[1, 64, 64], |i| ((i * 13) % 97) as f32 / 97.0);
        let noisy = Tensor::new(
            x.shape().to_vec(),
            x.iter()
                .enumerate()
                .map(|(i, v)| (v + if i % 3 == 0 { 0.04 } else { -0.02 }).clamp(0.0, 1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let v = ms_ssim(&x, &noisy).unwrap();
        assert!(v > 0.0 && v < 1.0);

        let tiny = tensor_of(&[1, 8, 8], |_| 0.5);
        assert!(ms_ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn histogram_basics() {
        let h = Histogram::build(&[0.42], 10, 0.0, 1.0).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[4], 1);

        let edges = h.edges();
        assert_eq!(edges.len(), 11);
        assert!(edges.windows(2).all(|e| e[1] > e[0]));

        // out-of-range values clamp into the end bins, preserving the total
        let h = Histogram::build(&[-5.0, 0.5, 99.0], 4, 0.0, 1.0).unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[3], 1);

        assert!(Histogram::build(&[], 4, 0.0, 1.0).is_err());
        assert!(Histogram::build(&[1.0], 0, 0.0, 1.0).is_err());
        assert!(Histogram::build(&[1.0], 4, 1.0, 1.0).is_err());
    }

    #[test]
    fn histogram_uniform_values_spread_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000usize;
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let h = Histogram::build(&values, 10, 0.0, 1.0).unwrap();
        assert_eq!(h.total(), n as u64);
        let p = 0.1;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in h.counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 5.0 * sigma, "bin {i} off by {dev:.0}");
        }
    }

    #[test]
    fn summary_aggregates_are_recomputable() {
        let records: Vec<RDRecord> = (0..7)
            .map(|i| {
                let bpp = 0.2 + 0.1 * i as f64;
                let d = 0.001 * (i + 1) as f64;
                RDRecord {
                    rate_bpp: bpp,
                    distortion: d,
                    rd_loss: bpp + 100.0 * d,
                    psnr_db: 30.0 - i as f64,
                    ms_ssim: 0.99 - 0.01 * i as f64,
                }
            })
            .collect();
        let s = EvalSummary::from_records(records.clone(), 8).unwrap();
        let bpp: Vec<f64> = records.iter().map(|r| r.rate_bpp).collect();
        assert!((s.mean_bpp - mean(&bpp)).abs() < 1e-9);
        assert!((s.median_bpp - 0.5).abs() < 1e-9);
        assert!((s.mean_rd_loss - mean(&records.iter().map(|r| r.rd_loss).collect::<Vec<_>>())).abs() < 1e-9);
        assert_eq!(s.bpp_histogram.total(), 7);
        assert_eq!(s.rd_histogram.total(), 7);
        assert_eq!(s.records.len(), 7);

        // median of an even-length list averages the middle pair
        let s6 = EvalSummary::from_records(records[..6].to_vec(), 4).unwrap();
        assert!((s6.median_bpp - 0.45).abs() < 1e-9);

        assert!(EvalSummary::from_records(vec![], 4).is_err());
    }
}
