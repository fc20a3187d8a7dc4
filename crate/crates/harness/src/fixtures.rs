//! Deterministic fixture corpus: 24 small RGB images (18 at 64x64, 6 at
//! 128x128) mixing smooth "natural-ish" composites, soft geometric scenes,
//! linear gradients, dark fields, and a little band-limited grain. The corpus
//! is committed under `fixtures/`; this module lets anyone regenerate it
//! bit-for-bit.
//!
//! Content is deliberately smooth and predictable. The toy codec only has two
//! conv layers, so on high-entropy content (white noise) its learned encoder
//! gain stays small relative to the quantization step and neither the attacks
//! nor the randomized defense have anything to bite on. Low-entropy content
//! pushes training toward a high-gain encoder with sharp priors, the regime
//! the experiments probe. Dark regions appear in several fixtures on purpose:
//! the shift transforms grow the canvas with zero padding, and the prior
//! should have seen near-black flats at training time so padded arms stay
//! cheap.

use std::f32::consts::TAU;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CORPUS_SIZE: usize = 24;
pub const SMALL_COUNT: usize = 18;
const SMALL: u32 = 64;
const LARGE: u32 = 128;
const CORPUS_SEED: u64 = 0x52dc_f1c5;

/// Content family of one fixture.
enum Kind {
    /// Sum of a few low-frequency gratings plus soft blobs; photo-like.
    Smooth,
    /// Dark backdrop with a few soft-edged shaded discs.
    Discs,
    /// Per-channel linear ramps.
    Gradient,
    /// Near-black field with one dim glow; teaches the prior about black.
    Dark,
    /// Smooth base with faint blurred grain, the noisiest family kept.
    Grain,
}

fn kind_for(index: usize) -> Kind {
    match index % 6 {
        3 => Kind::Discs,
        4 => Kind::Gradient,
        5 => {
            if index % 12 == 5 {
                Kind::Grain
            } else {
                Kind::Dark
            }
        }
        _ => Kind::Smooth,
    }
}

fn smooth_field(rng: &mut ChaCha8Rng, size: u32) -> Vec<f32> {
    let n = (size * size) as usize;
    let mut field = vec![0.0f32; n];
    let waves = 3 + rng.random_range(0..3);
    for _ in 0..waves {
        let fx = rng.random_range(0.2..1.4) / size as f32;
        let fy = rng.random_range(0.2..1.4) / size as f32;
        let phase = rng.random_range(0.0..TAU);
        let amp = rng.random_range(0.06..0.18);
        for y in 0..size {
            for x in 0..size {
                field[(y * size + x) as usize] +=
                    amp * (TAU * (fx * x as f32 + fy * y as f32) + phase).sin();
            }
        }
    }
    let blobs = rng.random_range(2..5);
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..size as f32);
        let cy = rng.random_range(0.0..size as f32);
        let sigma = rng.random_range(0.18..0.45) * size as f32;
        let amp = rng.random_range(-0.3..0.3);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                field[(y * size + x) as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    field
}

/// Radial falloff toward the corners; `floor` is the corner brightness.
fn vignette(size: u32, floor: f32) -> Vec<f32> {
    let c = (size as f32 - 1.0) / 2.0;
    let max_d2 = 2.0 * c * c;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32, (i / size) as f32);
            let d2 = (x - c).powi(2) + (y - c).powi(2);
            floor + (1.0 - floor) * (1.0 - d2 / max_d2).max(0.0)
        })
        .collect()
}

/// Blurred uniform noise: a cheap band-limited grain texture.
fn grain_field(rng: &mut ChaCha8Rng, size: u32, amp: f32) -> Vec<f32> {
    let n = (size * size) as usize;
    let raw: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    // Separable 5-tap binomial blur, clamped at the borders.
    let taps = [1.0f32, 4.0, 6.0, 4.0, 1.0];
    let norm: f32 = taps.iter().sum();
    let mut horiz = vec![0.0f32; n];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xi = (x + k as i64 - 2).clamp(0, size as i64 - 1);
                acc += t * raw[(y * size as i64 + xi) as usize];
            }
            horiz[(y * size as i64 + x) as usize] = acc / norm;
        }
    }
    let mut out = vec![0.0f32; n];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yi = (y + k as i64 - 2).clamp(0, size as i64 - 1);
                acc += t * horiz[(yi * size as i64 + x) as usize];
            }
            out[(y * size as i64 + x) as usize] = amp * acc / norm;
        }
    }
    out
}

/// Adds `count` shaded discs with soft (~1.5 px) edges to `field`.
fn add_discs(rng: &mut ChaCha8Rng, field: &mut [f32], size: u32, count: usize) {
    for _ in 0..count {
        let cx = rng.random_range(0.2..0.8) * size as f32;
        let cy = rng.random_range(0.2..0.8) * size as f32;
        let radius = rng.random_range(0.1..0.28) * size as f32;
        let level = rng.random_range(0.25..0.75);
        let shade = rng.random_range(-0.25..0.25) / radius;
        for y in 0..size {
            for x in 0..size {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                // Soft edge: 1 inside, 0 outside, linear over ~3 px.
                let cover = ((radius - d) / 3.0 + 0.5).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let v = level + shade * dy;
                    let cell = &mut field[(y * size + x) as usize];
                    *cell = *cell * (1.0 - cover) + v * cover;
                }
            }
        }
    }
}

/// Renders fixture `index` as an 8-bit RGB image.
pub fn render(index: usize) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let size = if index < SMALL_COUNT { SMALL } else { LARGE };
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED.wrapping_add(index as u64 * 7919));
    let n = (size * size) as usize;
    let (r, g, b): (Vec<f32>, Vec<f32>, Vec<f32>) = match kind_for(index) {
        Kind::Smooth | Kind::Grain => {
            let base = smooth_field(&mut rng, size);
            let grain = if matches!(kind_for(index), Kind::Grain) {
                grain_field(&mut rng, size, 0.25)
            } else {
                vec![0.0; n]
            };
            // Every other smooth fixture fades to near-black corners.
            let vig = if index % 4 == 0 {
                vignette(size, 0.04)
            } else {
                vec![1.0; n]
            };
            let mut chans = Vec::with_capacity(3);
            for _ in 0..3 {
                let tint = rng.random_range(-0.1..0.1);
                let gain = rng.random_range(0.8..1.2);
                let chan: Vec<f32> = (0..n)
                    .map(|i| ((0.5 + tint) + gain * base[i] + grain[i]) * vig[i])
                    .collect();
                chans.push(chan);
            }
            let b = chans.pop().unwrap();
            let g = chans.pop().unwrap();
            let r = chans.pop().unwrap();
            (r, g, b)
        }
        Kind::Discs => {
            let mut base: Vec<f32> = smooth_field(&mut rng, size)
                .into_iter()
                .map(|v| 0.12 + 0.4 * v)
                .collect();
            let count = rng.random_range(2..5);
            add_discs(&mut rng, &mut base, size, count);
            let mut chans = Vec::with_capacity(3);
            for _ in 0..3 {
                let tint = rng.random_range(-0.08..0.08);
                let chan: Vec<f32> = base.iter().map(|&v| v + tint * v).collect();
                chans.push(chan);
            }
            let b = chans.pop().unwrap();
            let g = chans.pop().unwrap();
            let r = chans.pop().unwrap();
            (r, g, b)
        }
        Kind::Gradient => {
            let mut chans = Vec::with_capacity(3);
            for _ in 0..3 {
                let gx = rng.random_range(-0.8..0.8) / size as f32;
                let gy = rng.random_range(-0.8..0.8) / size as f32;
                let off = rng.random_range(0.25..0.75);
                let chan: Vec<f32> = (0..n)
                    .map(|i| {
                        let (x, y) = ((i as u32 % size) as f32, (i as u32 / size) as f32);
                        off + gx * x + gy * y
                    })
                    .collect();
                chans.push(chan);
            }
            let b = chans.pop().unwrap();
            let g = chans.pop().unwrap();
            let r = chans.pop().unwrap();
            (r, g, b)
        }
        Kind::Dark => {
            let vig = vignette(size, 0.0);
            let cx = rng.random_range(0.3..0.7) * size as f32;
            let cy = rng.random_range(0.3..0.7) * size as f32;
            let sigma = rng.random_range(0.12..0.2) * size as f32;
            let mut chans = Vec::with_capacity(3);
            for _ in 0..3 {
                let floor = rng.random_range(0.01..0.05);
                let glow = rng.random_range(0.3..0.6);
                let chan: Vec<f32> = (0..n)
                    .map(|i| {
                        let (x, y) = ((i as u32 % size) as f32, (i as u32 / size) as f32);
                        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                        (floor + glow * (-d2 / (2.0 * sigma * sigma)).exp()) * vig[i]
                    })
                    .collect();
                chans.push(chan);
            }
            let b = chans.pop().unwrap();
            let g = chans.pop().unwrap();
            let r = chans.pop().unwrap();
            (r, g, b)
        }
    };
    ImageBuffer::from_fn(size, size, |x, y| {
        let i = (y * size + x) as usize;
        let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([to8(r[i]), to8(g[i]), to8(b[i])])
    })
}

pub fn fixture_name(index: usize) -> String {
    format!("fixture-{index:02}.png")
}

/// Writes the whole corpus into `dir`, returning the file paths in order.
pub fn write_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating fixture dir {}", dir.display()))?;
    let mut paths = Vec::with_capacity(CORPUS_SIZE);
    for i in 0..CORPUS_SIZE {
        let path = dir.join(fixture_name(i));
        render(i)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        paths.push(path);
    }
    Ok(paths)
}
