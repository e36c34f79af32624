//! Deterministic synthetic labeled volumes for desk-scale experiments.
//!
//! Each sample is a `[D, H, W]` grayscale field in [0, 1] plus an
//! integer label field: background 0 and `k - 1` ellipsoidal structures
//! whose centers and radii drift smoothly along z (so adjacent slices
//! overlap heavily). The grayscale rendition gives every class its own
//! base intensity and procedural texture, plus a mild smooth noise
//! field. Everything is a pure function of the seed.
//!
//! Also here: slice-consistent augmentation, one-hot mask expansion, and
//! the deterministic 70/15/15 dataset split.

use rand::Rng;

use crate::error::{Error, Result};
use crate::noise::make_noise_volume;
use crate::rng::{self};
use crate::tensor::{Real, Tensor};

const TAU: Real = std::f64::consts::TAU;

// ── Sample ───────────────────────────────────────────────────────────

/// One synthetic labeled volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub dims: (usize, usize, usize),
    pub k_classes: usize,
    pub seed: u64,
    /// Grayscale field in [0, 1], z-major.
    pub volume: Vec<Real>,
    /// Labels 0..k-1 (0 = background), z-major.
    pub mask: Vec<u8>,
}

impl PhantomSample {
    pub fn n_voxels(&self) -> usize {
        let (d, h, w) = self.dims;
        d * h * w
    }

    pub fn slice_volume(&self, z: usize) -> &[Real] {
        let (_, h, w) = self.dims;
        &self.volume[z * h * w..(z + 1) * h * w]
    }

    pub fn slice_mask(&self, z: usize) -> &[u8] {
        let (_, h, w) = self.dims;
        &self.mask[z * h * w..(z + 1) * h * w]
    }
}

/// Per-class smooth ellipsoid track plus texture parameters.
struct ClassParams {
    cx0: Real,
    cy0: Real,
    ax: Real,
    ay: Real,
    rx0: Real,
    ry0: Real,
    drx: Real,
    dry: Real,
    phase: [Real; 4],
    tex_freq: (Real, Real),
    tex_phase: Real,
    base: Real,
}

/// Generate a deterministic sample: `k - 1` smoothly drifting ellipsoids
/// over background, rendered with per-class intensity and texture.
pub fn generate_phantom(seed: u64, dims: (usize, usize, usize), k_classes: usize) -> Result<PhantomSample> {
    let (d, h, w) = dims;
    if k_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes (background + 1), got {k_classes}"
        )));
    }
    if k_classes > 256 {
        return Err(Error::Config("labels are stored as u8; k_classes must be <= 256".into()));
    }
    let n_shapes = k_classes - 1;
    if d < 4 || h < 16 || w < 16 || w < 4 * n_shapes {
        return Err(Error::Config(format!(
            "dims {d}x{h}x{w} too small to place {n_shapes} ellipsoids (need >= 4x16x16 and W >= {})",
            4 * n_shapes
        )));
    }

    let mut r = rng::seeded(rng::derive(seed, &[0x7068616e, 1]));
    let band = w as Real / n_shapes as Real;
    let classes: Vec<ClassParams> = (0..n_shapes)
        .map(|i| {
            let half = band / 2.0;
            ClassParams {
                cx0: band * (i as Real + 0.5),
                cy0: h as Real * r.gen_range(0.4..0.6),
                ax: (half * 0.18).min(1.0),
                ay: (h as Real / 10.0).min(1.5),
                rx0: half * 0.55,
                ry0: h as Real * r.gen_range(0.18..0.24),
                drx: half * 0.12,
                dry: h as Real * 0.03,
                phase: [
                    r.gen_range(0.0..TAU),
                    r.gen_range(0.0..TAU),
                    r.gen_range(0.0..TAU),
                    r.gen_range(0.0..TAU),
                ],
                tex_freq: (r.gen_range(0.4..1.4), r.gen_range(0.4..1.4)),
                tex_phase: r.gen_range(0.0..TAU),
                base: 0.2 + 0.65 * (i as Real + 1.0) / n_shapes as Real,
            }
        })
        .collect();

    // Labels: paint ellipses class by class; bands keep them disjoint.
    let mut mask = vec![0u8; d * h * w];
    for z in 0..d {
        let t = TAU * z as Real / d as Real;
        for (i, cp) in classes.iter().enumerate() {
            let cx = cp.cx0 + cp.ax * (t + cp.phase[0]).sin();
            let cy = cp.cy0 + cp.ay * (t + cp.phase[1]).sin();
            let rx = cp.rx0 + cp.drx * (t + cp.phase[2]).sin();
            let ry = cp.ry0 + cp.dry * (t + cp.phase[3]).sin();
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as Real - cx) / rx;
                    let dy = (y as Real - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        mask[(z * h + y) * w + x] = (i + 1) as u8;
                    }
                }
            }
        }
    }

    // Grayscale: base intensity + per-class sinusoidal texture + smooth noise.
    let field = make_noise_volume(dims, rng::derive(seed, &[0x7068616e, 2]), 1.5)?;
    let mut volume = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let label = mask[idx] as usize;
                let v = if label == 0 {
                    0.08 + 0.02 * ((0.7 * x as Real + 0.3 * y as Real).sin())
                } else {
                    let cp = &classes[label - 1];
                    let tex = (cp.tex_freq.0 * x as Real + cp.tex_freq.1 * y as Real
                        + cp.tex_phase)
                        .sin();
                    cp.base + 0.08 * tex
                };
                volume[idx] = (v + 0.02 * field.values()[idx]).clamp(0.0, 1.0);
            }
        }
    }

    Ok(PhantomSample {
        dims,
        k_classes,
        seed,
        volume,
        mask,
    })
}

// ── Augmentation ─────────────────────────────────────────────────────

/// Slice-plane transforms, applied identically to every slice of the
/// volume and its mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<AugmentOp> {
        match s {
            "rot90" => Ok(AugmentOp::Rot90),
            "rot180" => Ok(AugmentOp::Rot180),
            "rot270" => Ok(AugmentOp::Rot270),
            "flip_h" => Ok(AugmentOp::FlipH),
            "flip_v" => Ok(AugmentOp::FlipV),
            other => Err(Error::Usage(format!(
                "unknown augmentation '{other}' (expected rot90|rot180|rot270|flip_h|flip_v)"
            ))),
        }
    }
}

fn rot90_plane<T: Copy>(plane: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
    // (y, x) -> (x, h - 1 - y); output is [w, h].
    let mut out = vec![plane[0]; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + (h - 1 - y)] = plane[y * w + x];
        }
    }
    (out, w, h)
}

/// Apply one transform to an `[h, w]` plane; returns the new plane and
/// its dimensions (rotations by a quarter turn swap them).
pub fn augment_plane<T: Copy>(plane: &[T], h: usize, w: usize, op: AugmentOp) -> (Vec<T>, usize, usize) {
    match op {
        AugmentOp::Rot90 => rot90_plane(plane, h, w),
        AugmentOp::Rot180 => {
            let (p, h1, w1) = rot90_plane(plane, h, w);
            rot90_plane(&p, h1, w1)
        }
        AugmentOp::Rot270 => {
            let (p, h1, w1) = rot90_plane(plane, h, w);
            let (p, h2, w2) = rot90_plane(&p, h1, w1);
            rot90_plane(&p, h2, w2)
        }
        AugmentOp::FlipH => {
            let mut out = vec![plane[0]; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + (w - 1 - x)] = plane[y * w + x];
                }
            }
            (out, h, w)
        }
        AugmentOp::FlipV => {
            let mut out = vec![plane[0]; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[(h - 1 - y) * w + x] = plane[y * w + x];
                }
            }
            (out, h, w)
        }
    }
}

/// Transform volume and mask identically, slice by slice.
pub fn augment(sample: &PhantomSample, op: AugmentOp) -> PhantomSample {
    let (d, h, w) = sample.dims;
    let mut volume = Vec::with_capacity(sample.volume.len());
    let mut mask = Vec::with_capacity(sample.mask.len());
    let mut out_dims = (d, h, w);
    for z in 0..d {
        let (v, nh, nw) = augment_plane(sample.slice_volume(z), h, w, op);
        let (m, _, _) = augment_plane(sample.slice_mask(z), h, w, op);
        volume.extend(v);
        mask.extend(m);
        out_dims = (d, nh, nw);
    }
    PhantomSample {
        dims: out_dims,
        k_classes: sample.k_classes,
        seed: sample.seed,
        volume,
        mask,
    }
}

// ── One-hot expansion ────────────────────────────────────────────────

/// Expand an `[h, w]` label slice to a `[k, h, w]` one-hot tensor; the
/// channel sum is exactly 1 at every pixel.
pub fn one_hot(mask_slice: &[u8], k: usize, h: usize, w: usize) -> Result<Tensor> {
    if mask_slice.len() != h * w {
        return Err(Error::Shape {
            op: "one_hot",
            detail: format!("{} labels vs {h}x{w} slice", mask_slice.len()),
        });
    }
    let mut data = vec![0.0; k * h * w];
    for (i, &label) in mask_slice.iter().enumerate() {
        let l = label as usize;
        if l >= k {
            return Err(Error::Usage(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        data[l * h * w + i] = 1.0;
    }
    Tensor::constant(data, vec![k, h, w])
}

// ── Dataset split ────────────────────────────────────────────────────

/// Deterministic 70/15/15 split of `0..n` (sizes `round(0.7 n)`,
/// `round(0.15 n)`, remainder) after a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 7 {
        return Err(Error::Usage(format!(
            "need at least 7 samples for a 70/15/15 split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::seeded(rng::derive(seed, &[0x73706c69]));
    rng::shuffle(&mut r, &mut idx);
    let n_train = (0.70 * n as Real).round() as usize;
    let n_val = (0.15 * n as Real).round() as usize;
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let test = idx[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Deterministic 70/15/15 split of a sample list.
pub fn split_dataset<T: Clone>(samples: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (tr, va, te) = split_indices(samples.len(), seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect::<Vec<T>>();
    Ok((pick(&tr), pick(&va), pick(&te)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels_present(mask: &[u8]) -> BTreeSet<u8> {
        mask.iter().copied().collect()
    }

    #[test]
    fn same_seed_reproduces_the_sample_exactly() {
        let a = generate_phantom(5, (4, 16, 16), 3).unwrap();
        let b = generate_phantom(5, (4, 16, 16), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(6, (4, 16, 16), 3).unwrap();
        assert_ne!(a.volume, c.volume, "different seeds must differ");
    }

    #[test]
    fn every_class_is_present_and_volume_is_in_unit_range() {
        let s = generate_phantom(1, (4, 16, 16), 2).unwrap();
        assert_eq!(labels_present(&s.mask), BTreeSet::from([0, 1]), "k=2 labels");
        let s = generate_phantom(2, (6, 24, 32), 5).unwrap();
        assert_eq!(labels_present(&s.mask), BTreeSet::from([0, 1, 2, 3, 4]));
        assert!(s.volume.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn adjacent_slices_overlap_heavily() {
        let s = generate_phantom(9, (8, 32, 32), 3).unwrap();
        let (d, h, w) = s.dims;
        let mut ious = Vec::new();
        for z in 0..d - 1 {
            let a = s.slice_mask(z);
            let b = s.slice_mask(z + 1);
            for class in 1..s.k_classes as u8 {
                let mut inter = 0usize;
                let mut union = 0usize;
                for i in 0..h * w {
                    let ia = a[i] == class;
                    let ib = b[i] == class;
                    inter += usize::from(ia && ib);
                    union += usize::from(ia || ib);
                }
                if union > 0 {
                    ious.push(inter as Real / union as Real);
                }
            }
        }
        let mean = ious.iter().sum::<Real>() / ious.len() as Real;
        assert!(mean > 0.5, "mean adjacent-slice IoU {mean} too low");
    }

    #[test]
    fn generation_rejects_impossible_geometry() {
        assert!(matches!(generate_phantom(1, (4, 16, 16), 1), Err(Error::Config(_))));
        assert!(matches!(generate_phantom(1, (3, 16, 16), 3), Err(Error::Config(_))));
        assert!(matches!(generate_phantom(1, (4, 8, 16), 3), Err(Error::Config(_))));
        // W = 16 cannot hold 5 ellipsoid bands of width >= 4.
        assert!(matches!(generate_phantom(1, (4, 16, 16), 6), Err(Error::Config(_))));
    }

    #[test]
    fn augmentations_compose_to_the_identity() {
        let s = generate_phantom(3, (4, 16, 20), 3).unwrap();
        let ff = augment(&augment(&s, AugmentOp::FlipH), AugmentOp::FlipH);
        assert_eq!(ff, s, "horizontal flip must be an involution");
        let vv = augment(&augment(&s, AugmentOp::FlipV), AugmentOp::FlipV);
        assert_eq!(vv, s, "vertical flip must be an involution");
        let rr = augment(&augment(&s, AugmentOp::Rot180), AugmentOp::Rot180);
        assert_eq!(rr, s, "half turn twice is the identity");
        let mut r4 = s.clone();
        for _ in 0..4 {
            r4 = augment(&r4, AugmentOp::Rot90);
        }
        assert_eq!(r4, s, "four quarter turns are the identity");
        let r91 = augment(&augment(&s, AugmentOp::Rot90), AugmentOp::Rot270);
        assert_eq!(r91, s, "quarter turn plus three-quarter turn is the identity");
    }

    #[test]
    fn quarter_turns_swap_dimensions() {
        let s = generate_phantom(4, (4, 16, 20), 2).unwrap();
        let r = augment(&s, AugmentOp::Rot90);
        assert_eq!(r.dims, (4, 20, 16));
        let r2 = augment(&s, AugmentOp::Rot180);
        assert_eq!(r2.dims, (4, 16, 20));
    }

    #[test]
    fn per_slice_label_histograms_survive_every_op() {
        let s = generate_phantom(7, (4, 16, 20), 4).unwrap();
        let histogram = |m: &[u8]| {
            let mut h = [0usize; 8];
            for &l in m {
                h[l as usize] += 1;
            }
            h
        };
        for op in [
            AugmentOp::Rot90,
            AugmentOp::Rot180,
            AugmentOp::Rot270,
            AugmentOp::FlipH,
            AugmentOp::FlipV,
        ] {
            let a = augment(&s, op);
            for z in 0..s.dims.0 {
                assert_eq!(
                    histogram(s.slice_mask(z)),
                    histogram(a.slice_mask(z)),
                    "{op:?} must permute voxels only"
                );
            }
        }
    }

    #[test]
    fn one_hot_is_an_exact_partition() {
        let s = generate_phantom(8, (4, 16, 16), 3).unwrap();
        let (_, h, w) = s.dims;
        let oh = one_hot(s.slice_mask(0), 3, h, w).unwrap();
        assert_eq!(oh.shape(), &[3, h, w]);
        for px in 0..h * w {
            let sum: Real = (0..3).map(|c| oh.data()[c * h * w + px]).sum();
            assert_eq!(sum, 1.0, "channel sum at pixel {px}");
            let expect = s.slice_mask(0)[px] as usize;
            assert_eq!(oh.data()[expect * h * w + px], 1.0);
        }
        assert!(matches!(one_hot(&[3, 0], 3, 1, 2), Err(Error::Usage(_))));
        assert!(matches!(one_hot(&[0], 3, 1, 2), Err(Error::Shape { .. })));
    }

    #[test]
    fn one_hot_commutes_with_augmentation() {
        let s = generate_phantom(11, (4, 16, 20), 3).unwrap();
        let (_, h, w) = s.dims;
        for op in [AugmentOp::Rot90, AugmentOp::FlipH] {
            let a = augment(&s, op);
            let (_, ah, aw) = a.dims;
            let oh_after = one_hot(a.slice_mask(1), 3, ah, aw).unwrap();
            let oh_before = one_hot(s.slice_mask(1), 3, h, w).unwrap();
            // Transform each channel of the pre-expansion one-hot.
            for c in 0..3 {
                let channel = &oh_before.data()[c * h * w..(c + 1) * h * w];
                let (tc, th, tw) = augment_plane(channel, h, w, op);
                assert_eq!((th, tw), (ah, aw));
                assert_eq!(
                    &oh_after.data()[c * ah * aw..(c + 1) * ah * aw],
                    &tc[..],
                    "channel {c} under {op:?}"
                );
            }
        }
    }

    #[test]
    fn split_sizes_follow_the_rounding_rule() {
        for (n, expect) in [
            (20usize, (14usize, 3usize, 3usize)),
            (10, (7, 2, 1)),
            (8, (6, 1, 1)),
            (7, (5, 1, 1)),
        ] {
            let (tr, va, te) = split_indices(n, 1).unwrap();
            assert_eq!((tr.len(), va.len(), te.len()), expect, "n = {n}");
            let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "exhaustive and disjoint");
        }
        assert!(matches!(split_indices(6, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let a = split_indices(20, 42).unwrap();
        let b = split_indices(20, 42).unwrap();
        assert_eq!(a, b);
        let c = split_indices(20, 43).unwrap();
        assert_ne!(a, c, "different seeds should reshuffle");
        let items: Vec<String> = (0..9).map(|i| format!("s{i}")).collect();
        let (tr, va, te) = split_dataset(&items, 7).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 9);
        assert_eq!((tr.len(), va.len(), te.len()), (6, 1, 2));
    }
}
