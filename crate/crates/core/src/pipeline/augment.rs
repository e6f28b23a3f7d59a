//! Per-patch augmentation: random resized crop, colour jitter, grayscale,
//! Gaussian blur and horizontal flip, applied in a fixed order with every
//! random draw taken from the caller's stream.

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::bilinear_matrix;
use crate::{Error, Result};

/// Where augmentation happens relative to the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum AugPosition {
    /// Whole image augmented first, then split.
    BeforeSplit,
    /// Crop on the whole image, split, then the remaining ops per patch.
    SplitDuringAug,
    /// Every patch augmented independently right after the split.
    AfterSplit,
}

impl AugPosition {
    pub const ALL: [AugPosition; 3] = [
        AugPosition::BeforeSplit,
        AugPosition::SplitDuringAug,
        AugPosition::AfterSplit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugPosition::BeforeSplit => "before_split",
            AugPosition::SplitDuringAug => "split_during_aug",
            AugPosition::AfterSplit => "after_split",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    RandomResizedCrop { scale: (f64, f64), ratio: (f64, f64) },
    ColorJitter {
        p: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale { p: f64 },
    GaussianBlur { p: f64, sigma: (f64, f64) },
    HorizontalFlip { p: f64 },
}

impl AugOp {
    pub fn is_crop(&self) -> bool {
        matches!(self, AugOp::RandomResizedCrop { .. })
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{what} probability {p} outside [0, 1]")))
            }
        };
        match *self {
            AugOp::RandomResizedCrop { scale, ratio } => {
                if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
                    return Err(Error::Invalid(format!("crop scale range {scale:?} must satisfy 0 < lo <= hi <= 1")));
                }
                if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
                    return Err(Error::Invalid(format!("crop aspect range {ratio:?} must satisfy 0 < lo <= hi")));
                }
                Ok(())
            }
            AugOp::ColorJitter {
                p,
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                prob(p, "colour jitter")?;
                if brightness < 0.0 || contrast < 0.0 || saturation < 0.0 || !(0.0..=0.5).contains(&hue) {
                    return Err(Error::Invalid("colour jitter strengths out of range".into()));
                }
                Ok(())
            }
            AugOp::Grayscale { p } => prob(p, "grayscale"),
            AugOp::GaussianBlur { p, sigma } => {
                prob(p, "blur")?;
                if !(sigma.0 > 0.0 && sigma.0 <= sigma.1) {
                    return Err(Error::Invalid(format!("blur sigma range {sigma:?} invalid")));
                }
                Ok(())
            }
            AugOp::HorizontalFlip { p } => prob(p, "flip"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub position: AugPosition,
    pub ops: Vec<AugOp>,
    pub output_side: usize,
}

impl AugPolicy {
    /// No random ops: patches are only resized to `output_side`.
    pub fn identity(position: AugPosition, output_side: usize) -> Self {
        AugPolicy {
            position,
            ops: Vec::new(),
            output_side,
        }
    }

    /// The MoCo v2 recipe: crop (scale 0.2–1), jitter 0.4/0.4/0.4/0.1 with p = 0.8,
    /// grayscale p = 0.2, blur σ ∈ [0.1, 2] with p = 0.5, flip p = 0.5.
    pub fn moco_v2(position: AugPosition, output_side: usize) -> Self {
        AugPolicy {
            position,
            ops: vec![
                AugOp::RandomResizedCrop {
                    scale: (0.2, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                },
                AugOp::ColorJitter {
                    p: 0.8,
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.1,
                },
                AugOp::Grayscale { p: 0.2 },
                AugOp::GaussianBlur {
                    p: 0.5,
                    sigma: (0.1, 2.0),
                },
                AugOp::HorizontalFlip { p: 0.5 },
            ],
            output_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_side == 0 {
            return Err(Error::Invalid("augmentation output side must be positive".into()));
        }
        self.ops.iter().try_for_each(AugOp::validate)
    }

    /// Splits the policy into the crop (if any) and the remaining ops.
    pub fn split_crop(&self) -> (Vec<AugOp>, Vec<AugOp>) {
        self.ops.iter().cloned().partition(AugOp::is_crop)
    }
}

/// Bilinear resize of an `h × w × 3` image with half-pixel centres.
pub fn resize_bilinear(img: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let rows = bilinear_matrix(h, out_h);
    let cols = bilinear_matrix(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane: Array2<f64> = img.slice(s![.., .., ch]).mapv(f64::from);
        let r = rows.dot(&plane).dot(&cols.t());
        out.slice_mut(s![.., .., ch]).assign(&r.mapv(|v| v as f32));
    }
    out
}

/// Samples a crop window `(top, left, height, width)` inside an `h × w` area.
fn sample_crop<R: Rng>(h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut R) -> Result<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    if scale.0 * area < 1.0 {
        return Err(Error::Invalid(format!(
            "crop scale lower bound {} yields less than one pixel on a {h}x{w} patch",
            scale.0
        )));
    }
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Ok((top, left, ch, cw));
        }
    }
    // fallback: central crop clamped to the aspect range
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        ((w as f64 / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, (h as f64 * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    Ok(((h - ch) / 2, (w - cw) / 2, ch, cw))
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale_in_place(img: &mut Array3<f32>) {
    for mut px in img.rows_mut() {
        let y = luma(px[0], px[1], px[2]);
        px.fill(y);
    }
}

fn blend_in_place(img: &mut Array3<f32>, other: &Array3<f32>, factor: f32) {
    ndarray::Zip::from(img).and(other).for_each(|a, &b| {
        *a = (factor * *a + (1.0 - factor) * b).clamp(0.0, 1.0);
    });
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter<R: Rng>(img: &mut Array3<f32>, strengths: [f64; 4], rng: &mut R) {
    let [brightness, contrast, saturation, hue] = strengths;
    let factor = |s: f64, rng: &mut R| rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
    let b = factor(brightness, rng);
    let c = factor(contrast, rng);
    let sat = factor(saturation, rng);
    let hshift = rng.random_range(-hue..=hue) as f32;
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => img.mapv_inplace(|v| (v * b).clamp(0.0, 1.0)),
            1 => {
                let n = (img.len() / 3) as f32;
                let mean = img.rows().into_iter().map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / n;
                img.mapv_inplace(|v| (c * v + (1.0 - c) * mean).clamp(0.0, 1.0));
            }
            2 => {
                let mut gray = img.clone();
                grayscale_in_place(&mut gray);
                blend_in_place(img, &gray, sat);
            }
            _ => {
                if hshift != 0.0 {
                    for mut px in img.rows_mut() {
                        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                        let (r, g, b) = hsv_to_rgb(h + hshift, s, v);
                        px[0] = r;
                        px[1] = g;
                        px[2] = b;
                    }
                }
            }
        }
    }
}

fn gaussian_blur(img: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, c) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - radius, w);
                    acc += wgt * img[[y, xx, ch]] as f64;
                }
                tmp[[y, x, ch]] = acc as f32;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (k, wgt) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - radius, h);
                    acc += wgt * tmp[[yy, x, ch]] as f64;
                }
                out[[y, x, ch]] = acc as f32;
            }
        }
    }
    out
}

/// Applies `ops` to `img`, producing an `out_side × out_side` image.
///
/// The first crop op crops and resizes to `out_side`; without one the whole
/// input is resized first. Crop windows always lie inside `img`.
pub fn apply_ops<R: Rng>(img: ArrayView3<'_, f32>, ops: &[AugOp], out_side: usize, rng: &mut R) -> Result<Array3<f32>> {
    let (h, w, _) = img.dim();
    let mut cur: Option<Array3<f32>> = None;
    for op in ops {
        match *op {
            AugOp::RandomResizedCrop { scale, ratio } => {
                let next = {
                    let src = match cur.as_ref() {
                        Some(c) => c.view(),
                        None => img.view(),
                    };
                    let (sh, sw, _) = src.dim();
                    let (top, left, ch, cw) = sample_crop(sh, sw, scale, ratio, rng)?;
                    resize_bilinear(src.slice(s![top..top + ch, left..left + cw, ..]), out_side, out_side)
                };
                cur = Some(next);
            }
            _ => {
                let mut work = match cur.take() {
                    Some(c) => c,
                    None => resize_bilinear(img, out_side, out_side),
                };
                match *op {
                    AugOp::ColorJitter {
                        p,
                        brightness,
                        contrast,
                        saturation,
                        hue,
                    } => {
                        if rng.random_bool(p) {
                            color_jitter(&mut work, [brightness, contrast, saturation, hue], rng);
                        }
                    }
                    AugOp::Grayscale { p } => {
                        if rng.random_bool(p) {
                            grayscale_in_place(&mut work);
                        }
                    }
                    AugOp::GaussianBlur { p, sigma } => {
                        if rng.random_bool(p) {
                            let sd = rng.random_range(sigma.0..=sigma.1);
                            work = gaussian_blur(&work, sd);
                        }
                    }
                    AugOp::HorizontalFlip { p } => {
                        if rng.random_bool(p) {
                            work.invert_axis(ndarray::Axis(1));
                            work = work.as_standard_layout().into_owned();
                        }
                    }
                    AugOp::RandomResizedCrop { .. } => unreachable!(),
                }
                cur = Some(work);
            }
        }
    }
    Ok(match cur {
        Some(c) if c.dim().0 == out_side && c.dim().1 == out_side => c,
        Some(c) => resize_bilinear(c.view(), out_side, out_side),
        None if (h, w) == (out_side, out_side) => img.to_owned(),
        None => resize_bilinear(img, out_side, out_side),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_image(side: usize, seed: u64) -> Array3<f32> {
        let mut r = rng::stream(seed, "img", &[]);
        Array3::from_shape_fn((side, side, 3), |_| r.random::<f32>())
    }

    /// Direct four-neighbour bilinear sampling, written independently of the
    /// separable matrix path.
    fn resize_oracle(img: &Array3<f32>, out: usize) -> Array3<f32> {
        let (h, w, c) = img.dim();
        let mut res = Array3::zeros((out, out, c));
        for y in 0..out {
            let sy = ((y as f64 + 0.5) * h as f64 / out as f64 - 0.5).max(0.0).min((h - 1) as f64);
            let y0 = sy as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..out {
                let sx = ((x as f64 + 0.5) * w as f64 / out as f64 - 0.5).max(0.0).min((w - 1) as f64);
                let x0 = sx as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                for ch in 0..c {
                    let p = |yy: usize, xx: usize| img[[yy, xx, ch]] as f64;
                    let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                        + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                    res[[y, x, ch]] = v as f32;
                }
            }
        }
        res
    }

    #[test]
    fn identity_policy_same_side_is_exact_copy() {
        let img = random_image(16, 1);
        let mut r = rng::stream(0, "aug", &[]);
        let out = apply_ops(img.view(), &[], 16, &mut r).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn identity_policy_matches_bilinear_oracle() {
        let img = random_image(146, 2);
        let mut r = rng::stream(0, "aug", &[]);
        let out = apply_ops(img.view(), &[], 112, &mut r).unwrap();
        let expect = resize_oracle(&img, 112);
        let max = out
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-5, "max deviation {max}");
    }

    #[test]
    fn full_policy_is_deterministic_and_in_range() {
        let img = random_image(21, 3);
        let policy = AugPolicy::moco_v2(AugPosition::AfterSplit, 16);
        let a = apply_ops(img.view(), &policy.ops, 16, &mut rng::stream(5, "aug", &[])).unwrap();
        let b = apply_ops(img.view(), &policy.ops, 16, &mut rng::stream(5, "aug", &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (16, 16, 3));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let img = random_image(4, 4);
        let ops = [AugOp::RandomResizedCrop {
            scale: (0.01, 0.02),
            ratio: (0.75, 1.33),
        }];
        let err = apply_ops(img.view(), &ops, 4, &mut rng::stream(0, "aug", &[]));
        assert!(err.is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for (r, g, b) in [(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_ops_are_rejected() {
        let mut p = AugPolicy::moco_v2(AugPosition::AfterSplit, 16);
        p.ops.push(AugOp::HorizontalFlip { p: 1.5 });
        assert!(p.validate().is_err());
    }
}
