//! Invertible image transforms used by the randomized encoder.
//!
//! A [`TransformDescriptor`] composes, in this fixed order: a dihedral
//! element (pixel permutation, exact), a bilinear upsample by (sy, sx) added
//! pixels (pseudo-invertible), and a zero-pad of (ty, tx) pixels at the
//! top/left with a growing canvas (exact). Descriptors pack into a `u32`
//! index with 0 reserved for the identity, which is what the bitstream header
//! stores. The transforms with zero stretch invert bitwise; stretched ones
//! invert up to resampling error, which is the point: the decoder can always
//! undo enough of the transform to reconstruct the image.

use rand::Rng;

use crate::tensor::{
    bilinear_resize, dihedral_apply, dihedral_dims, Graph, Tensor, TensorError, TensorResult,
    Var, DIHEDRAL_INVERSE,
};

/// Count of stretch values per axis (0..=64 added pixels).
pub const STRETCH_RANGE: u32 = 65;
/// Count of shift values per axis (0..=64 added pixels).
pub const SHIFT_RANGE: u32 = 65;
/// Size of the full transform space: 8 dihedral elements times 65^4.
pub const TRANSFORM_SPACE: u32 = 8 * 65 * 65 * 65 * 65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransformDescriptor {
    /// Dihedral element in [0, 8): 0 identity, 1 rot90cw, 2 rot180,
    /// 3 rot270cw, 4 hflip, 5 vflip, 6 anti-transpose, 7 transpose.
    pub dihedral: u8,
    /// Extra columns added by the bilinear stretch, in [0, 65).
    pub stretch_x: u8,
    /// Extra rows added by the bilinear stretch, in [0, 65).
    pub stretch_y: u8,
    /// Zero columns padded on the left, in [0, 65).
    pub shift_x: u8,
    /// Zero rows padded on the top, in [0, 65).
    pub shift_y: u8,
}

impl TransformDescriptor {
    pub const IDENTITY: Self = Self {
        dihedral: 0,
        stretch_x: 0,
        stretch_y: 0,
        shift_x: 0,
        shift_y: 0,
    };

    pub fn new(dihedral: u8, stretch_x: u8, stretch_y: u8, shift_x: u8, shift_y: u8) -> TensorResult<Self> {
        if dihedral >= 8 || stretch_x >= 65 || stretch_y >= 65 || shift_x >= 65 || shift_y >= 65 {
            return Err(TensorError::Invalid {
                op: "transform",
                msg: format!(
                    "descriptor ({dihedral},{stretch_x},{stretch_y},{shift_x},{shift_y}) out of range"
                ),
            });
        }
        Ok(Self {
            dihedral,
            stretch_x,
            stretch_y,
            shift_x,
            shift_y,
        })
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Packs to the index stored in bitstream headers. Enumeration order is
    /// dihedral major, then stretch_y, stretch_x, shift_y, shift_x, so the
    /// all-zero descriptor is index 0.
    pub fn pack(&self) -> u32 {
        let mut idx = self.dihedral as u32;
        idx = idx * STRETCH_RANGE + self.stretch_y as u32;
        idx = idx * STRETCH_RANGE + self.stretch_x as u32;
        idx = idx * SHIFT_RANGE + self.shift_y as u32;
        idx * SHIFT_RANGE + self.shift_x as u32
    }

    pub fn unpack(index: u32) -> TensorResult<Self> {
        if index >= TRANSFORM_SPACE {
            return Err(TensorError::Invalid {
                op: "transform",
                msg: format!("packed index {index} out of range"),
            });
        }
        let shift_x = (index % SHIFT_RANGE) as u8;
        let rest = index / SHIFT_RANGE;
        let shift_y = (rest % SHIFT_RANGE) as u8;
        let rest = rest / SHIFT_RANGE;
        let stretch_x = (rest % STRETCH_RANGE) as u8;
        let rest = rest / STRETCH_RANGE;
        let stretch_y = (rest % STRETCH_RANGE) as u8;
        let dihedral = (rest / STRETCH_RANGE) as u8;
        Ok(Self {
            dihedral,
            stretch_x,
            stretch_y,
            shift_x,
            shift_y,
        })
    }

    /// Output dims for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (dh, dw) = dihedral_dims(self.dihedral, h, w);
        (
            dh + self.stretch_y as usize + self.shift_y as usize,
            dw + self.stretch_x as usize + self.shift_x as usize,
        )
    }

    /// Uniform draw over the transform space, optionally rejecting the
    /// identity (index 0). Deterministic under a seeded rng.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, exclude_identity: bool) -> Self {
        loop {
            let idx = rng.random_range(0..TRANSFORM_SPACE);
            if exclude_identity && idx == 0 {
                continue;
            }
            return Self::unpack(idx).expect("index sampled within range");
        }
    }

    /// Applies to a `[C, H, W]` tensor (values expected in [0, 1]).
    pub fn apply(&self, img: &Tensor) -> TensorResult<Tensor> {
        let (c, h, w) = img.dims3("transform_apply")?;
        let (dh, dw) = dihedral_dims(self.dihedral, h, w);
        let mut data = dihedral_apply(img.data(), c, h, w, self.dihedral);
        let (mut ch, mut cw) = (dh, dw);
        if self.stretch_x > 0 || self.stretch_y > 0 {
            let (nh, nw) = (dh + self.stretch_y as usize, dw + self.stretch_x as usize);
            data = bilinear_resize(&data, c, ch, cw, nh, nw);
            (ch, cw) = (nh, nw);
        }
        let (ty, tx) = (self.shift_y as usize, self.shift_x as usize);
        if tx > 0 || ty > 0 {
            let (nh, nw) = (ch + ty, cw + tx);
            let mut padded = vec![0.0f32; c * nh * nw];
            for ci in 0..c {
                for y in 0..ch {
                    let src = (ci * ch + y) * cw;
                    let dst = (ci * nh + y + ty) * nw + tx;
                    padded[dst..dst + cw].copy_from_slice(&data[src..src + cw]);
                }
            }
            data = padded;
            (ch, cw) = (nh, nw);
        }
        Tensor::new(vec![c, ch, cw], data)
    }

    /// Inverts a tensor produced by [`Self::apply`] on an `orig_h x orig_w`
    /// image: crop the shift padding (exact), resize back (pseudo-inverse),
    /// undo the dihedral (exact).
    pub fn invert(&self, img: &Tensor, orig_h: usize, orig_w: usize) -> TensorResult<Tensor> {
        let (c, h, w) = img.dims3("transform_invert")?;
        let (eh, ew) = self.output_dims(orig_h, orig_w);
        if (h, w) != (eh, ew) {
            return Err(TensorError::Invalid {
                op: "transform_invert",
                msg: format!("got {h}x{w}, descriptor implies {eh}x{ew}"),
            });
        }
        let (dh, dw) = dihedral_dims(self.dihedral, orig_h, orig_w);
        let (ty, tx) = (self.shift_y as usize, self.shift_x as usize);
        let (sh, sw) = (dh + self.stretch_y as usize, dw + self.stretch_x as usize);
        let mut data;
        if tx > 0 || ty > 0 {
            data = vec![0.0f32; c * sh * sw];
            for ci in 0..c {
                for y in 0..sh {
                    let src = (ci * h + y + ty) * w + tx;
                    let dst = (ci * sh + y) * sw;
                    data[dst..dst + sw].copy_from_slice(&img.data()[src..src + sw]);
                }
            }
        } else {
            data = img.data().to_vec();
        }
        if (sh, sw) != (dh, dw) {
            data = bilinear_resize(&data, c, sh, sw, dh, dw);
        }
        let out = dihedral_apply(&data, c, dh, dw, DIHEDRAL_INVERSE[self.dihedral as usize]);
        Tensor::new(vec![c, orig_h, orig_w], out)
    }

    /// Records the forward transform on the graph so gradients can flow
    /// through it (used by expectation-over-transform attacks).
    pub fn apply_graph(&self, g: &mut Graph, v: Var) -> TensorResult<Var> {
        let (_, h, w) = g.value(v).dims3("transform_apply")?;
        let (dh, dw) = dihedral_dims(self.dihedral, h, w);
        let mut cur = g.dihedral(v, self.dihedral)?;
        if self.stretch_x > 0 || self.stretch_y > 0 {
            cur = g.resize_bilinear(
                cur,
                dh + self.stretch_y as usize,
                dw + self.stretch_x as usize,
            )?;
        }
        if self.shift_x > 0 || self.shift_y > 0 {
            cur = g.pad_zero_top_left(cur, self.shift_y as usize, self.shift_x as usize)?;
        }
        Ok(cur)
    }

    /// Graph-recorded inverse (crop, resize back, inverse dihedral).
    pub fn invert_graph(
        &self,
        g: &mut Graph,
        v: Var,
        orig_h: usize,
        orig_w: usize,
    ) -> TensorResult<Var> {
        let (_, h, w) = g.value(v).dims3("transform_invert")?;
        let (eh, ew) = self.output_dims(orig_h, orig_w);
        if (h, w) != (eh, ew) {
            return Err(TensorError::Invalid {
                op: "transform_invert",
                msg: format!("got {h}x{w}, descriptor implies {eh}x{ew}"),
            });
        }
        let (dh, dw) = dihedral_dims(self.dihedral, orig_h, orig_w);
        let (sh, sw) = (dh + self.stretch_y as usize, dw + self.stretch_x as usize);
        let mut cur = v;
        if self.shift_x > 0 || self.shift_y > 0 {
            cur = g.crop(cur, self.shift_y as usize, self.shift_x as usize, sh, sw)?;
        }
        if (sh, sw) != (dh, dw) {
            cur = g.resize_bilinear(cur, dh, dw)?;
        }
        g.dihedral(cur, DIHEDRAL_INVERSE[self.dihedral as usize])
    }
}

/// Out-of-set transforms used only in robustness studies, never by the
/// randomized encoder itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudyTransform {
    /// Rotation about the image center, bilinear resampling, zero fill
    /// outside the source. Degrees in [-10, 10].
    RotateDegrees(f32),
    /// Zero padding on all four sides, 0..=32 pixels per side.
    ZeroPad(usize),
}

impl StudyTransform {
    pub fn validate(&self) -> TensorResult<()> {
        match *self {
            StudyTransform::RotateDegrees(d) if (-10.0..=10.0).contains(&d) => Ok(()),
            StudyTransform::ZeroPad(n) if n <= 32 => Ok(()),
            _ => Err(TensorError::Invalid {
                op: "study_transform",
                msg: format!("{self:?} outside the study parameter range"),
            }),
        }
    }

    pub fn apply(&self, img: &Tensor) -> TensorResult<Tensor> {
        match *self {
            StudyTransform::RotateDegrees(deg) => rotate_about_center(img, deg),
            StudyTransform::ZeroPad(n) => {
                let (c, h, w) = img.dims3("zero_pad")?;
                let (nh, nw) = (h + 2 * n, w + 2 * n);
                let mut out = vec![0.0f32; c * nh * nw];
                for ci in 0..c {
                    for y in 0..h {
                        let src = (ci * h + y) * w;
                        let dst = (ci * nh + y + n) * nw + n;
                        out[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
                    }
                }
                Tensor::new(vec![c, nh, nw], out)
            }
        }
    }

    pub fn invert(&self, img: &Tensor) -> TensorResult<Tensor> {
        match *self {
            StudyTransform::RotateDegrees(deg) => rotate_about_center(img, -deg),
            StudyTransform::ZeroPad(n) => {
                let (c, h, w) = img.dims3("zero_pad_invert")?;
                if h < 2 * n || w < 2 * n {
                    return Err(TensorError::Invalid {
                        op: "zero_pad_invert",
                        msg: format!("{h}x{w} too small to crop {n} per side"),
                    });
                }
                let (nh, nw) = (h - 2 * n, w - 2 * n);
                let mut out = vec![0.0f32; c * nh * nw];
                for ci in 0..c {
                    for y in 0..nh {
                        let src = (ci * h + y + n) * w + n;
                        let dst = (ci * nh + y) * nw;
                        out[dst..dst + nw].copy_from_slice(&img.data()[src..src + nw]);
                    }
                }
                Tensor::new(vec![c, nh, nw], out)
            }
        }
    }
}

/// Rotates `img` by `deg` degrees counterclockwise about its center with
/// bilinear resampling; samples falling outside the source read as zero.
/// Output dims equal input dims.
fn rotate_about_center(img: &Tensor, deg: f32) -> TensorResult<Tensor> {
    let (c, h, w) = img.dims3("rotate")?;
    if deg == 0.0 {
        return Ok(img.clone());
    }
    let theta = (deg as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    // Sample at zero when the 2x2 neighborhood leaves the source entirely;
    // partial neighborhoods blend with zero, matching the zero-fill contract.
    let fetch = |ci: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ci * h + y as usize) * w + x as usize] as f64
        }
    };
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                // inverse mapping: rotate the output coordinate by -theta
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v00 = fetch(ci, y0, x0);
                let v01 = fetch(ci, y0, x0 + 1);
                let v10 = fetch(ci, y0 + 1, x0);
                let v11 = fetch(ci, y0 + 1, x0 + 1);
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(ci * h + y) * w + x] = (top + fy * (bot - top)) as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w)
            .map(|i| (i as f32 * 0.619).fract())
            .collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn identity_packs_to_zero_and_back() {
        assert_eq!(TransformDescriptor::IDENTITY.pack(), 0);
        assert_eq!(
            TransformDescriptor::unpack(0).unwrap(),
            TransformDescriptor::IDENTITY
        );
        assert!(TransformDescriptor::unpack(0).unwrap().is_identity());
    }

    #[test]
    fn space_size_and_bounds() {
        assert_eq!(TRANSFORM_SPACE, 142_805_000);
        assert!(TRANSFORM_SPACE < (1 << 28));
        let max = TransformDescriptor::new(7, 64, 64, 64, 64).unwrap();
        assert_eq!(max.pack(), TRANSFORM_SPACE - 1);
        assert!(TransformDescriptor::unpack(TRANSFORM_SPACE).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        // corners of every field plus a seeded random sweep
        for d in 0..8 {
            for &s in &[0u8, 1, 64] {
                let desc = TransformDescriptor::new(d, s, 64 - s, s / 2, s).unwrap();
                assert_eq!(TransformDescriptor::unpack(desc.pack()).unwrap(), desc);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let idx = rng.random_range(0..TRANSFORM_SPACE);
            let desc = TransformDescriptor::unpack(idx).unwrap();
            assert_eq!(desc.pack(), idx);
        }
    }

    #[test]
    fn enumeration_order_is_d_sy_sx_ty_tx() {
        // index 1 bumps shift_x; the next axis strides by 65
        let i1 = TransformDescriptor::unpack(1).unwrap();
        assert_eq!((i1.shift_x, i1.shift_y), (1, 0));
        let i65 = TransformDescriptor::unpack(65).unwrap();
        assert_eq!((i65.shift_x, i65.shift_y), (0, 1));
        let sx = TransformDescriptor::unpack(65 * 65).unwrap();
        assert_eq!((sx.stretch_x, sx.shift_x, sx.shift_y), (1, 0, 0));
        let sy = TransformDescriptor::unpack(65 * 65 * 65).unwrap();
        assert_eq!(sy.stretch_y, 1);
        let d = TransformDescriptor::unpack(65 * 65 * 65 * 65).unwrap();
        assert_eq!(d.dihedral, 1);
    }

    #[test]
    fn apply_identity_is_bitwise() {
        let x = ramp(3, 10, 12);
        let y = TransformDescriptor::IDENTITY.apply(&x).unwrap();
        assert_eq!(x.data(), y.data());
        assert_eq!(x.shape(), y.shape());
    }

    #[test]
    fn shift_places_original_at_offset() {
        let x = ramp(1, 10, 10);
        let desc = TransformDescriptor::new(0, 0, 0, 3, 5).unwrap();
        let y = desc.apply(&x).unwrap();
        assert_eq!(y.shape(), &[1, 15, 13]);
        // top band and left band are zero
        for v in &y.data()[..5 * 13] {
            assert_eq!(*v, 0.0);
        }
        for r in 0..10 {
            let row = &y.data()[(5 + r) * 13..(5 + r) * 13 + 13];
            assert!(row[..3].iter().all(|&v| v == 0.0));
            assert_eq!(&row[3..], &x.data()[r * 10..(r + 1) * 10]);
        }
    }

    #[test]
    fn hflip_twice_is_identity() {
        let x = ramp(2, 6, 9);
        let flip = TransformDescriptor::new(4, 0, 0, 0, 0).unwrap();
        let once = flip.apply(&x).unwrap();
        assert_ne!(once.data(), x.data());
        let twice = flip.apply(&once).unwrap();
        assert_eq!(twice.data(), x.data());
    }

    #[test]
    fn exact_subfamily_inverts_bitwise() {
        // zero stretch: every dihedral + shift combination is lossless
        let x = ramp(3, 7, 11);
        for d in 0..8 {
            let desc = TransformDescriptor::new(d, 0, 0, 3, 7).unwrap();
            let y = desc.apply(&x).unwrap();
            let back = desc.invert(&y, 7, 11).unwrap();
            assert_eq!(back.shape(), x.shape(), "d={d}");
            assert_eq!(back.data(), x.data(), "d={d}");
        }
    }

    #[test]
    fn constant_image_inverts_bitwise_under_stretch() {
        let x = Tensor::full(vec![3, 12, 9], 0.37);
        let desc = TransformDescriptor::new(2, 16, 9, 4, 0).unwrap();
        let y = desc.apply(&x).unwrap();
        let back = desc.invert(&y, 12, 9).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn stretch_round_trip_is_close_but_not_exact() {
        let x = ramp(3, 16, 16);
        let desc = TransformDescriptor::new(5, 16, 16, 2, 3).unwrap();
        let y = desc.apply(&x).unwrap();
        assert_eq!(y.shape(), &[3, 16 + 16 + 3, 16 + 16 + 2]);
        let back = desc.invert(&y, 16, 16).unwrap();
        let mse: f64 = back
            .iter()
            .zip(x.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / x.len() as f64;
        assert!(mse.is_finite());
        assert!(mse < 0.05, "round trip should stay close, mse={mse}");
    }

    #[test]
    fn invert_rejects_inconsistent_dims() {
        let x = ramp(1, 8, 8);
        let desc = TransformDescriptor::new(0, 4, 4, 0, 0).unwrap();
        assert!(desc.invert(&x, 8, 8).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_respects_exclusion() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            assert_eq!(
                TransformDescriptor::sample(&mut a, true),
                TransformDescriptor::sample(&mut b, true)
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_ne!(TransformDescriptor::sample(&mut rng, true).pack(), 0);
        }
    }

    #[test]
    fn dihedral_frequencies_are_uniform() {
        // 1e5 draws; each dihedral count within 5 sigma of n/8
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0u32; 8];
        for _ in 0..n {
            counts[TransformDescriptor::sample(&mut rng, false).dihedral as usize] += 1;
        }
        let p = 1.0 / 8.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (d, &cnt) in counts.iter().enumerate() {
            let dev = (cnt as f64 - n as f64 * p).abs();
            assert!(dev <= 5.0 * sigma, "dihedral {d}: deviation {dev:.1} > 5 sigma");
        }
    }

    #[test]
    fn graph_path_matches_value_path() {
        let x = ramp(3, 9, 13);
        let desc = TransformDescriptor::new(3, 7, 5, 2, 6).unwrap();
        let by_value = desc.apply(&x).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let t = desc.apply_graph(&mut g, v).unwrap();
        assert_eq!(g.value(t).shape(), by_value.shape());
        assert_eq!(g.value(t).data(), by_value.data());

        let inv_value = desc.invert(&by_value, 9, 13).unwrap();
        let ti = desc.invert_graph(&mut g, t, 9, 13).unwrap();
        assert_eq!(g.value(ti).data(), inv_value.data());
    }

    #[test]
    fn zero_pad_study_round_trip_is_bitwise() {
        let x = ramp(3, 14, 10);
        let t = StudyTransform::ZeroPad(9);
        let y = t.apply(&x).unwrap();
        assert_eq!(y.shape(), &[3, 32, 28]);
        let back = t.invert(&y).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn rotate_zero_is_identity_and_rotation_round_trip_is_sane() {
        let x = ramp(1, 24, 24);
        let t0 = StudyTransform::RotateDegrees(0.0);
        assert_eq!(t0.apply(&x).unwrap().data(), x.data());

        let t = StudyTransform::RotateDegrees(10.0);
        let y = t.apply(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_ne!(y.data(), x.data());
        let back = t.invert(&y).unwrap();
        // interior pixels survive; zero-filled corners cost some fidelity
        let mse: f64 = back
            .iter()
            .zip(x.iter())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / x.len() as f64;
        assert!(mse.is_finite() && mse < 0.1, "mse={mse}");
        let psnr = -10.0 * mse.log10();
        assert!(psnr > 8.0, "psnr={psnr}");
    }

    #[test]
    fn study_parameter_validation() {
        assert!(StudyTransform::RotateDegrees(10.0).validate().is_ok());
        assert!(StudyTransform::RotateDegrees(-10.0).validate().is_ok());
        assert!(StudyTransform::RotateDegrees(10.5).validate().is_err());
        assert!(StudyTransform::ZeroPad(32).validate().is_ok());
        assert!(StudyTransform::ZeroPad(33).validate().is_err());
    }
}
