//! Per-class texture and grayscale scores and the score-matching loss.
//!
//! Texture: Sobel gradients of the image are reduced per class mask to a
//! scalar score `sum_k (sum_i integral((gx * gy + eps) . mask_i))^alpha_k`,
//! where the integral is a pixel sum. A `magnitude_mode` switch replaces
//! the integrand with the gradient magnitude `sqrt(gx^2 + gy^2)`.
//!
//! Grayscale: at each dyadic scale the masked mean, population standard
//! deviation, maximum, and minimum are combined per class as
//! `(mu * sigma * max * min / |mask|)^beta_j` and summed over scales and
//! classes (masks are average-pooled and re-binarized at 0.5 per scale;
//! classes whose mask empties at a scale are skipped).
//!
//! The final class score linearly combines both parts; the score loss
//! between two images is the absolute difference of their class scores
//! and is differentiable with respect to either image.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

// ── Configuration ────────────────────────────────────────────────────

/// Weights and switches for the texture/grayscale scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GtcConfig {
    /// Additive floor inside the texture integrand (> 0).
    pub epsilon: Real,
    /// Texture exponents (one outer summand per entry).
    pub alpha: Vec<Real>,
    /// Grayscale exponents: one entry per scale, or a single entry
    /// shared by every scale.
    pub beta: Vec<Real>,
    /// Number of dyadic scales for the grayscale score (>= 1; scale 1 is
    /// the original resolution).
    pub n_scales: usize,
    /// Linear combination weights (texture, grayscale).
    pub combine: (Real, Real),
    /// Replace the `gx * gy + eps` integrand with `sqrt(gx^2 + gy^2)`.
    pub magnitude_mode: bool,
}

impl Default for GtcConfig {
    fn default() -> Self {
        GtcConfig {
            epsilon: 1e-6,
            alpha: vec![1.0, 2.0],
            beta: vec![1.0],
            n_scales: 2,
            combine: (1.0, 1.0),
            magnitude_mode: false,
        }
    }
}

impl GtcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "texture epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.alpha.is_empty() {
            return Err(Error::Config("texture weights must not be empty".into()));
        }
        if self.n_scales < 1 {
            return Err(Error::Config("grayscale scale count must be >= 1".into()));
        }
        if self.beta.len() != 1 && self.beta.len() != self.n_scales {
            return Err(Error::Config(format!(
                "grayscale weights must have one entry or one per scale ({}), got {}",
                self.n_scales,
                self.beta.len()
            )));
        }
        let finite = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain([&self.combine.0, &self.combine.1])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("score weights must be finite".into()));
        }
        Ok(())
    }

    fn beta_for_scale(&self, j: usize) -> Real {
        if self.beta.len() == 1 {
            self.beta[0]
        } else {
            self.beta[j]
        }
    }
}

// ── Sobel gradients ──────────────────────────────────────────────────

const SOBEL_X: [Real; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [Real; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Horizontal and vertical Sobel responses of an `[H, W]` image
/// (3x3 correlation over reflect-padded input; `H, W >= 3`).
pub fn sobel_gradients(img: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = img.shape();
    if s.len() != 2 || s[0] < 3 || s[1] < 3 {
        return Err(Error::Shape {
            op: "sobel_gradients",
            detail: format!("need an [H, W] image with H, W >= 3, got {s:?}"),
        });
    }
    let (h, w) = (s[0], s[1]);
    let padded = img.reshape(&[1, h, w])?.reflect_pad2d(1)?;
    let kx = Tensor::constant(SOBEL_X.to_vec(), vec![1, 1, 3, 3])?;
    let ky = Tensor::constant(SOBEL_Y.to_vec(), vec![1, 1, 3, 3])?;
    let gx = padded.conv2d(&kx, None, 1, 0, 1)?.reshape(&[h, w])?;
    let gy = padded.conv2d(&ky, None, 1, 0, 1)?.reshape(&[h, w])?;
    Ok((gx, gy))
}

// ── Mask handling ────────────────────────────────────────────────────

/// Validate a `[K, H, W]` one-hot mask stack against an image shape:
/// binary entries, per-pixel class sums <= 1, and at least one covered
/// pixel overall.
fn validate_masks(img: &Tensor, masks: &Tensor, op: &'static str) -> Result<()> {
    let is = img.shape();
    let ms = masks.shape();
    if is.len() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("expected an [H, W] image, got {is:?}"),
        });
    }
    if ms.len() != 3 || ms[1] != is[0] || ms[2] != is[1] || ms[0] == 0 {
        return Err(Error::Shape {
            op,
            detail: format!("expected [K, {}, {}] masks with K >= 1, got {ms:?}", is[0], is[1]),
        });
    }
    let (k, n) = (ms[0], is[0] * is[1]);
    let data = masks.data();
    for v in data {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Usage(format!(
                "class masks must be binary (0 or 1), found {v}"
            )));
        }
    }
    for px in 0..n {
        let s: Real = (0..k).map(|c| data[c * n + px]).sum();
        if s > 1.0 {
            return Err(Error::Usage(format!(
                "class masks must not overlap; pixel {px} is claimed {s} times"
            )));
        }
    }
    if data.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate(
            "every class mask is empty; scores are undefined".into(),
        ));
    }
    Ok(())
}

/// Average-pool a binary mask over 2x2 blocks (floor semantics) and
/// re-binarize at 0.5. Returns the pooled mask and its dimensions
/// (empty when either dimension floors to zero).
pub fn downsample_mask(mask: &[Real], h: usize, w: usize) -> (Vec<Real>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let s = mask[2 * y * w + 2 * x]
                + mask[2 * y * w + 2 * x + 1]
                + mask[(2 * y + 1) * w + 2 * x]
                + mask[(2 * y + 1) * w + 2 * x + 1];
            out[y * w2 + x] = if s / 4.0 >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    (out, h2, w2)
}

// ── Scores ───────────────────────────────────────────────────────────

/// Texture score as a differentiable scalar tensor.
pub fn texture_score_t(img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Tensor> {
    cfg.validate()?;
    validate_masks(img, masks, "texture_score")?;
    let (gx, gy) = sobel_gradients(img)?;
    let integrand = if cfg.magnitude_mode {
        // Gradient magnitude; its derivative is undefined where the
        // magnitude is exactly zero.
        gx.mul(&gx)?.add(&gy.mul(&gy)?)?.powf(0.5)
    } else {
        gx.mul(&gy)?.add_scalar(cfg.epsilon)
    };
    let (k, h, w) = (masks.shape()[0], img.shape()[0], img.shape()[1]);
    let n = h * w;
    let mut inner: Option<Tensor> = None;
    for c in 0..k {
        let mk = Tensor::constant(masks.data()[c * n..(c + 1) * n].to_vec(), vec![h, w])?;
        let term = integrand.mul(&mk)?.sum();
        inner = Some(match inner {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let inner = inner.expect("K >= 1 was validated");
    let mut score: Option<Tensor> = None;
    for &a in &cfg.alpha {
        let term = inner.powf(a);
        score = Some(match score {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(score.expect("alpha was validated non-empty"))
}

/// Grayscale score as a differentiable scalar tensor.
pub fn gray_score_t(img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Tensor> {
    cfg.validate()?;
    validate_masks(img, masks, "gray_score")?;
    let (k, mut h, mut w) = (masks.shape()[0], img.shape()[0], img.shape()[1]);
    let n0 = h * w;
    let mut cur = img.reshape(&[1, h, w])?;
    let mut cur_masks: Vec<Vec<Real>> = (0..k)
        .map(|c| masks.data()[c * n0..(c + 1) * n0].to_vec())
        .collect();
    let mut score: Option<Tensor> = None;
    for j in 0..cfg.n_scales {
        if j > 0 {
            if h / 2 == 0 || w / 2 == 0 {
                break;
            }
            cur = cur.avg_pool2d(2)?;
            for m in &mut cur_masks {
                let (pooled, _, _) = downsample_mask(m, h, w);
                *m = pooled;
            }
            h /= 2;
            w /= 2;
        }
        let beta = cfg.beta_for_scale(j);
        for m in &cur_masks {
            let mask_sum: Real = m.iter().sum();
            if mask_sum == 0.0 {
                continue; // class vanished at this scale
            }
            let mu = cur.masked_mean(m)?;
            let sigma = cur.masked_std(m)?;
            let mx = cur.masked_max(m)?;
            let mn = cur.masked_min(m)?;
            let term = mu
                .mul(&sigma)?
                .mul(&mx)?
                .mul(&mn)?
                .scale(1.0 / mask_sum)
                .powf(beta);
            score = Some(match score {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
    }
    match score {
        Some(s) => Ok(s),
        None => Err(Error::Degenerate(
            "every class mask is empty at every scale".into(),
        )),
    }
}

/// Combined class score as a differentiable scalar tensor:
/// `w_tex * texture + w_gray * grayscale`.
pub fn class_score_t(img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Tensor> {
    let (wt, wg) = cfg.combine;
    texture_score_t(img, masks, cfg)?
        .scale(wt)
        .add(&gray_score_t(img, masks, cfg)?.scale(wg))
}

/// Texture score as a plain number.
pub fn texture_score(img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Real> {
    Ok(texture_score_t(img, masks, cfg)?.value())
}

/// Grayscale score as a plain number.
pub fn gray_score(img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Real> {
    Ok(gray_score_t(img, masks, cfg)?.value())
}

/// Combined class score as a plain number.
pub fn class_score(img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Real> {
    Ok(class_score_t(img, masks, cfg)?.value())
}

/// Score-matching loss: `|class_score(real) - class_score(fake)|` as a
/// scalar tensor, differentiable with respect to either image (away from
/// the tie point where the scores coincide).
pub fn gtc_loss(real_img: &Tensor, fake_img: &Tensor, masks: &Tensor, cfg: &GtcConfig) -> Result<Tensor> {
    if real_img.shape() != fake_img.shape() {
        return Err(Error::Shape {
            op: "gtc_loss",
            detail: format!("{:?} vs {:?}", real_img.shape(), fake_img.shape()),
        });
    }
    let sr = class_score_t(real_img, masks, cfg)?;
    let sf = class_score_t(fake_img, masks, cfg)?;
    Ok(sr.sub(&sf)?.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::finite_diff_check;

    fn assert_close(a: Real, b: Real, tol: Real, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    fn full_mask(h: usize, w: usize) -> Tensor {
        Tensor::full(&[1, h, w], 1.0)
    }

    /// Left/right halves as two classes.
    fn half_masks(h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let class = usize::from(x >= w / 2);
                data[class * h * w + y * w + x] = 1.0;
            }
        }
        Tensor::constant(data, vec![2, h, w]).unwrap()
    }

    #[test]
    fn sobel_of_constant_image_is_zero() {
        let img = Tensor::full(&[5, 6], 3.25);
        let (gx, gy) = sobel_gradients(&img).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0));
        assert!(gy.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sobel_of_unit_ramp_is_eight_in_the_interior() {
        let (h, w) = (5usize, 7usize);
        let data: Vec<Real> = (0..h * w).map(|i| (i % w) as Real).collect();
        let img = Tensor::constant(data, vec![h, w]).unwrap();
        let (gx, gy) = sobel_gradients(&img).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert_eq!(gx.data()[y * w + x], 8.0, "interior x-response at ({y},{x})");
            }
        }
        assert!(gy.data().iter().all(|v| *v == 0.0), "ramp has no vertical slope");
    }

    #[test]
    fn sobel_transpose_swaps_gradient_directions() {
        let (h, w) = (6usize, 4usize);
        let data = rng::normal_vec(&mut rng::seeded(13), h * w);
        let img = Tensor::constant(data.clone(), vec![h, w]).unwrap();
        let mut tdata = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tdata[x * h + y] = data[y * w + x];
            }
        }
        let imgt = Tensor::constant(tdata, vec![w, h]).unwrap();
        let (gx, gy) = sobel_gradients(&img).unwrap();
        let (gxt, gyt) = sobel_gradients(&imgt).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_close(gxt.data()[x * h + y], gy.data()[y * w + x], 1e-12, "gx(T) = gy^T");
                assert_close(gyt.data()[x * h + y], gx.data()[y * w + x], 1e-12, "gy(T) = gx^T");
            }
        }
    }

    #[test]
    fn texture_of_constant_image_reduces_to_epsilon_mass() {
        // Zero gradients leave only eps * |mask| inside; with two unit
        // exponents the score is 2 * 16 * 1e-6.
        let cfg = GtcConfig {
            alpha: vec![1.0, 1.0],
            ..GtcConfig::default()
        };
        let img = Tensor::full(&[4, 4], 0.7);
        let s = texture_score(&img, &full_mask(4, 4), &cfg).unwrap();
        assert_close(s, 3.2e-5, 1e-18, "constant-image texture score");

        let zeroed = Tensor::full(&[4, 4], 123.0).scale(0.0);
        let s0 = texture_score(&zeroed, &full_mask(4, 4), &cfg).unwrap();
        assert_close(s0, 3.2e-5, 1e-18, "zero-scaled image matches the constant case");
    }

    #[test]
    fn texture_multi_class_epsilon_mass_with_mixed_exponents() {
        // Constant image, two partial classes (10 + 8 pixels), eps 1e-3,
        // alpha (1, 2): inner = eps * 18, score = inner + inner^2.
        let (h, w) = (6usize, 6usize);
        let mut data = vec![0.0; 2 * h * w];
        for i in 0..10 {
            data[i] = 1.0;
        }
        for i in 0..8 {
            data[h * w + 18 + i] = 1.0;
        }
        let masks = Tensor::constant(data, vec![2, h, w]).unwrap();
        let cfg = GtcConfig {
            epsilon: 1e-3,
            alpha: vec![1.0, 2.0],
            ..GtcConfig::default()
        };
        let img = Tensor::full(&[h, w], 0.5);
        let inner = 1e-3 * 18.0;
        let expect = inner + inner * inner;
        let s = texture_score(&img, &masks, &cfg).unwrap();
        assert_close(s, expect, 1e-15, "mixed-exponent epsilon mass");
    }

    #[test]
    fn checkerboard_beats_constant_in_magnitude_mode() {
        let (h, w) = (8usize, 8usize);
        let data: Vec<Real> = (0..h * w).map(|i| ((i / w + i % w) % 2) as Real).collect();
        let board = Tensor::constant(data, vec![h, w]).unwrap();
        let flat = Tensor::full(&[h, w], 0.5);
        let cfg = GtcConfig {
            magnitude_mode: true,
            ..GtcConfig::default()
        };
        let masks = half_masks(h, w);
        let sb = texture_score(&board, &masks, &cfg).unwrap();
        let sf = texture_score(&flat, &masks, &cfg).unwrap();
        assert!(sb > sf, "checkerboard {sb} must beat constant {sf}");
    }

    #[test]
    fn diagonal_stripes_beat_constant_in_product_mode() {
        // Wide diagonal stripes put energy into both gradient directions
        // with matching signs, so the signed product integrand grows.
        let (h, w) = (8usize, 8usize);
        let data: Vec<Real> = (0..h * w)
            .map(|i| (((i / w + i % w) / 2) % 2) as Real)
            .collect();
        let stripes = Tensor::constant(data, vec![h, w]).unwrap();
        let flat = Tensor::full(&[h, w], 0.5);
        let cfg = GtcConfig::default();
        let masks = half_masks(h, w);
        let ss = texture_score(&stripes, &masks, &cfg).unwrap();
        let sf = texture_score(&flat, &masks, &cfg).unwrap();
        assert!(ss > sf, "stripes {ss} must beat constant {sf}");
    }

    #[test]
    fn gray_two_by_two_matches_hand_statistics() {
        // Values 1..4, full mask, one scale, unit weight:
        // mean 2.5, population sigma sqrt(1.25), max 4, min 1, |mask| 4.
        let img = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let cfg = GtcConfig {
            n_scales: 1,
            beta: vec![1.0],
            ..GtcConfig::default()
        };
        let s = gray_score(&img, &full_mask(2, 2), &cfg).unwrap();
        assert_close(s, 2.795084971874737, 1e-12, "2x2 grayscale score");
    }

    #[test]
    fn gray_of_constant_image_is_zero() {
        // A dyadic constant sums exactly, so sigma and the score are
        // bit-exact zeros; a non-dyadic constant leaves only the
        // rounding residue of the mean.
        let img = Tensor::full(&[4, 4], 0.5);
        let s = gray_score(&img, &full_mask(4, 4), &GtcConfig::default()).unwrap();
        assert_eq!(s, 0.0, "zero variance must annihilate every term");
        let img = Tensor::full(&[4, 4], 0.6);
        let s = gray_score(&img, &full_mask(4, 4), &GtcConfig::default()).unwrap();
        assert!(s.abs() < 1e-12, "near-zero variance residue {s}");
    }

    #[test]
    fn gray_class_containing_zero_contributes_zero() {
        let mut data = vec![0.5; 9];
        data[4] = 0.0;
        data[0] = 0.9;
        let img = Tensor::constant(data, vec![3, 3]).unwrap();
        let cfg = GtcConfig {
            n_scales: 1,
            ..GtcConfig::default()
        };
        let s = gray_score(&img, &full_mask(3, 3), &cfg).unwrap();
        assert_eq!(s, 0.0, "a zero minimum must zero the class term");
    }

    #[test]
    fn gray_skips_classes_that_empty_out_at_coarser_scales() {
        // Class 1 owns a single pixel: pooled coverage 0.25 < 0.5 makes
        // it vanish at scale 2 and it must be skipped (its scale-1 term
        // is zero because a single pixel has zero deviation), leaving
        // exactly the score of class 0 alone.
        let (h, w) = (4usize, 4usize);
        let img = Tensor::constant(
            (0..h * w).map(|i| (i as Real) / 16.0).collect::<Vec<_>>(),
            vec![h, w],
        )
        .unwrap();
        let mut data = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 2..w {
                data[y * w + x] = 1.0;
            }
        }
        data[h * w] = 1.0; // class 1 = pixel (0, 0)
        let both = Tensor::constant(data.clone(), vec![2, h, w]).unwrap();
        let only0 = Tensor::constant(data[..h * w].to_vec(), vec![1, h, w]).unwrap();
        let cfg = GtcConfig {
            n_scales: 2,
            ..GtcConfig::default()
        };
        let s_both = gray_score(&img, &both, &cfg).unwrap();
        let s_only = gray_score(&img, &only0, &cfg).unwrap();
        assert_close(s_both, s_only, 1e-15, "vanishing class must drop out cleanly");
    }

    #[test]
    fn mask_downsampling_binarizes_at_one_half() {
        // Two set pixels in a 2x2 block average to exactly 0.5 -> 1;
        // one set pixel averages to 0.25 -> 0.
        let mask = vec![
            1.0, 1.0, /**/ 1.0, 0.0, //
            0.0, 0.0, /**/ 0.0, 0.0,
        ];
        let (pooled, h2, w2) = downsample_mask(&mask, 2, 4);
        assert_eq!((h2, w2), (1, 2));
        assert_eq!(pooled, vec![1.0, 0.0]);
    }

    #[test]
    fn class_score_combines_the_two_parts_linearly() {
        let (h, w) = (6usize, 6usize);
        let data: Vec<Real> = rng::normal_vec(&mut rng::seeded(3), h * w)
            .into_iter()
            .map(|v| 0.5 + 0.2 * v.tanh())
            .collect();
        let img = Tensor::constant(data, vec![h, w]).unwrap();
        let masks = half_masks(h, w);
        let tex_only = GtcConfig {
            combine: (1.0, 0.0),
            ..GtcConfig::default()
        };
        let t = texture_score(&img, &masks, &GtcConfig::default()).unwrap();
        assert_close(
            class_score(&img, &masks, &tex_only).unwrap(),
            t,
            1e-12,
            "texture-only combination",
        );
        let none = GtcConfig {
            combine: (0.0, 0.0),
            ..GtcConfig::default()
        };
        assert_eq!(class_score(&img, &masks, &none).unwrap(), 0.0);
        let g = gray_score(&img, &masks, &GtcConfig::default()).unwrap();
        let mixed = GtcConfig {
            combine: (0.5, 0.5),
            ..GtcConfig::default()
        };
        assert_close(
            class_score(&img, &masks, &mixed).unwrap(),
            0.5 * t + 0.5 * g,
            1e-12,
            "half/half combination",
        );
    }

    #[test]
    fn shuffling_class_order_leaves_scores_unchanged() {
        let (h, w) = (6usize, 6usize);
        let img = Tensor::constant(
            rng::normal_vec(&mut rng::seeded(5), h * w)
                .into_iter()
                .map(|v| 0.5 + 0.25 * v.tanh())
                .collect::<Vec<_>>(),
            vec![h, w],
        )
        .unwrap();
        // Three vertical bands.
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let class = x * 3 / w;
                data[class * h * w + y * w + x] = 1.0;
            }
        }
        let masks = Tensor::constant(data.clone(), vec![3, h, w]).unwrap();
        let mut shuffled = vec![0.0; 3 * h * w];
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
            shuffled[dst * h * w..(dst + 1) * h * w]
                .copy_from_slice(&data[src * h * w..(src + 1) * h * w]);
        }
        let masks_s = Tensor::constant(shuffled, vec![3, h, w]).unwrap();
        let cfg = GtcConfig::default();
        assert_close(
            texture_score(&img, &masks, &cfg).unwrap(),
            texture_score(&img, &masks_s, &cfg).unwrap(),
            1e-12,
            "texture class-order invariance",
        );
        assert_close(
            gray_score(&img, &masks, &cfg).unwrap(),
            gray_score(&img, &masks_s, &cfg).unwrap(),
            1e-12,
            "grayscale class-order invariance",
        );
    }

    #[test]
    fn score_loss_is_zero_for_identical_images_and_symmetric() {
        let (h, w) = (6usize, 6usize);
        let mut r = rng::seeded(6);
        let mk = |r: &mut rng::Prng| {
            Tensor::constant(
                rng::normal_vec(r, h * w)
                    .into_iter()
                    .map(|v| 0.5 + 0.2 * v.tanh())
                    .collect::<Vec<_>>(),
                vec![h, w],
            )
            .unwrap()
        };
        let a = mk(&mut r);
        let b = mk(&mut r);
        let masks = half_masks(h, w);
        let cfg = GtcConfig::default();
        assert_eq!(gtc_loss(&a, &a, &masks, &cfg).unwrap().value(), 0.0);
        let ab = gtc_loss(&a, &b, &masks, &cfg).unwrap().value();
        let ba = gtc_loss(&b, &a, &masks, &cfg).unwrap().value();
        assert_close(ab, ba, 1e-15, "loss symmetry");
        assert!(ab >= 0.0);
    }

    #[test]
    fn score_loss_equals_absolute_score_difference() {
        let (h, w) = (8usize, 8usize);
        let stripes = Tensor::constant(
            (0..h * w)
                .map(|i| (((i / w + i % w) / 2) % 2) as Real)
                .collect::<Vec<_>>(),
            vec![h, w],
        )
        .unwrap();
        let flat = Tensor::full(&[h, w], 0.5);
        let masks = half_masks(h, w);
        let cfg = GtcConfig::default();
        let expect =
            (class_score(&flat, &masks, &cfg).unwrap() - class_score(&stripes, &masks, &cfg).unwrap()).abs();
        let loss = gtc_loss(&flat, &stripes, &masks, &cfg).unwrap().value();
        assert_close(loss, expect, 1e-12, "loss vs score difference");
    }

    #[test]
    fn score_loss_gradient_matches_finite_differences() {
        let (h, w) = (6usize, 6usize);
        let mut r = rng::seeded(40);
        let real = Tensor::constant(
            rng::normal_vec(&mut r, h * w)
                .into_iter()
                .map(|v| 0.5 + 0.2 * v.tanh())
                .collect::<Vec<_>>(),
            vec![h, w],
        )
        .unwrap();
        let fake0: Vec<Real> = rng::normal_vec(&mut r, h * w)
            .into_iter()
            .map(|v| 0.5 + 0.2 * v.tanh())
            .collect();
        let masks = half_masks(h, w);
        let cfg = GtcConfig::default();
        let err = finite_diff_check(
            |fake| gtc_loss(&real, fake, &masks, &cfg),
            &fake0,
            &[h, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "score-loss gradient error {err}");
    }

    #[test]
    fn scores_reject_bad_masks_and_shapes() {
        let img = Tensor::full(&[4, 4], 0.5);
        let cfg = GtcConfig::default();
        let empty = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(
            texture_score(&img, &empty, &cfg),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            gray_score(&img, &empty, &cfg),
            Err(Error::Degenerate(_))
        ));
        let soft = Tensor::full(&[1, 4, 4], 0.5);
        assert!(matches!(texture_score(&img, &soft, &cfg), Err(Error::Usage(_))));
        let mut overlap = vec![1.0; 2 * 16];
        overlap[0] = 1.0;
        let ov = Tensor::constant(overlap, vec![2, 4, 4]).unwrap();
        assert!(matches!(texture_score(&img, &ov, &cfg), Err(Error::Usage(_))));
        let wrong = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(
            texture_score(&img, &wrong, &cfg),
            Err(Error::Shape { .. })
        ));
        let tiny = Tensor::full(&[2, 2], 0.5);
        assert!(matches!(
            sobel_gradients(&tiny),
            Err(Error::Shape { .. })
        ));
        let other = Tensor::full(&[5, 5], 0.5);
        assert!(matches!(
            gtc_loss(&img, &other, &empty, &cfg),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn texture_gradient_matches_finite_differences() {
        let (h, w) = (5usize, 5usize);
        let x0: Vec<Real> = rng::normal_vec(&mut rng::seeded(9), h * w)
            .into_iter()
            .map(|v| 0.5 + 0.3 * v.tanh())
            .collect();
        let masks = half_masks(h, w);
        let cfg = GtcConfig::default();
        let err = finite_diff_check(
            |img| texture_score_t(img, &masks, &cfg),
            &x0,
            &[h, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "texture gradient error {err}");
    }
}
