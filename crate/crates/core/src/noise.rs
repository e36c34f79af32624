//! Smoothed 3-D noise volumes and residual noise injection.
//!
//! A volume of i.i.d. standard Gaussian noise is smoothed with a
//! separable Gaussian kernel so that nearby voxels — and therefore
//! nearby slices — stay correlated, then standardized back to zero mean
//! and unit variance. The volume is partitioned along the z axis so each
//! slice of a stack receives its own chunk, and a chunk enters a feature
//! map through a gated residual update whose gate is a small pointwise
//! network of the noise itself.

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::{reflect_index, Real, Tensor};

// ── Noise volume ─────────────────────────────────────────────────────

/// Deterministic smoothed Gaussian noise field over a `D x H x W` grid
/// (z-major layout), standardized to zero mean and unit variance when a
/// positive smoothing width is used.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVolume {
    d: usize,
    h: usize,
    w: usize,
    seed: u64,
    smooth_sigma: Real,
    data: Vec<Real>,
}

/// Build a noise volume: draw i.i.d. standard Gaussians, convolve with a
/// separable 3-D Gaussian of width `smooth_sigma` (kernel radius
/// `ceil(3 sigma)`, reflected boundaries), and standardize the result to
/// exact zero mean and unit variance. `smooth_sigma = 0` returns the raw
/// i.i.d. field unchanged.
pub fn make_noise_volume(
    dims: (usize, usize, usize),
    seed: u64,
    smooth_sigma: Real,
) -> Result<NoiseVolume> {
    let (d, h, w) = dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "noise volume dims must all be positive, got {d}x{h}x{w}"
        )));
    }
    if !(smooth_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise smoothing width must be non-negative, got {smooth_sigma}"
        )));
    }
    let mut r: Prng = rng::seeded(seed);
    let mut data = rng::normal_vec(&mut r, d * h * w);
    if smooth_sigma > 0.0 {
        let kernel = gaussian_kernel(smooth_sigma);
        data = smooth_axis(&data, (d, h, w), Axis::X, &kernel);
        data = smooth_axis(&data, (d, h, w), Axis::Y, &kernel);
        data = smooth_axis(&data, (d, h, w), Axis::Z, &kernel);
        standardize(&mut data)?;
    }
    Ok(NoiseVolume {
        d,
        h,
        w,
        seed,
        smooth_sigma,
        data,
    })
}

impl NoiseVolume {
    /// Assemble a volume from an existing field (e.g. slices reordered
    /// by a caller); `seed`/`smooth_sigma` are carried as provenance.
    pub fn from_parts(
        dims: (usize, usize, usize),
        seed: u64,
        smooth_sigma: Real,
        data: Vec<Real>,
    ) -> Result<NoiseVolume> {
        let (d, h, w) = dims;
        if data.len() != d * h * w {
            return Err(Error::Shape {
                op: "noise_from_parts",
                detail: format!("{} values vs dims {d}x{h}x{w}", data.len()),
            });
        }
        Ok(NoiseVolume {
            d,
            h,
            w,
            seed,
            smooth_sigma,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn smooth_sigma(&self) -> Real {
        self.smooth_sigma
    }

    /// Full field in z-major order.
    pub fn values(&self) -> &[Real] {
        &self.data
    }
}

/// Extract z-slice `slice_index` as an `[H, W]` tensor. Concatenating
/// the chunks for indices `0..D` reproduces the volume exactly.
pub fn chunk_noise(z3: &NoiseVolume, slice_index: usize) -> Result<Tensor> {
    if slice_index >= z3.d {
        return Err(Error::Usage(format!(
            "slice index {} out of range for depth {}",
            slice_index, z3.d
        )));
    }
    let n = z3.h * z3.w;
    let start = slice_index * n;
    Tensor::constant(z3.data[start..start + n].to_vec(), vec![z3.h, z3.w])
}

fn gaussian_kernel(sigma: Real) -> Vec<Real> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<Real> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as Real) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: Real = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

enum Axis {
    X,
    Y,
    Z,
}

fn smooth_axis(data: &[Real], dims: (usize, usize, usize), axis: Axis, kernel: &[Real]) -> Vec<Real> {
    let (d, h, w) = dims;
    let radius = (kernel.len() - 1) / 2;
    let (len, stride) = match axis {
        Axis::X => (w, 1),
        Axis::Y => (h, w),
        Axis::Z => (d, h * w),
    };
    let mut out = vec![0.0; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = match axis {
                    Axis::X => x,
                    Axis::Y => y,
                    Axis::Z => z,
                };
                let base = (z * h + y) * w + x - pos * stride;
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let q = reflect_index(pos as isize + t as isize - radius as isize, len);
                    acc += kv * data[base + q * stride];
                }
                out[(z * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn standardize(data: &mut [Real]) -> Result<()> {
    let n = data.len() as Real;
    let mean: Real = data.iter().sum::<Real>() / n;
    let var: Real = data.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    if var <= 0.0 {
        return Err(Error::Degenerate(
            "smoothed noise field is constant; cannot standardize".into(),
        ));
    }
    let inv = 1.0 / var.sqrt();
    for v in data.iter_mut() {
        *v = (*v - mean) * inv;
    }
    Ok(())
}

// ── Residual injection ───────────────────────────────────────────────

/// Parameters of the gated residual noise update: a pointwise two-layer
/// map of the noise (`1 -> C -> C` channels, ReLU between), an additive
/// gate bias shaped like one noise slice, a residual weight `alpha`, and
/// a residual scale.
#[derive(Debug, Clone)]
pub struct InjectionParams {
    pub c: usize,
    pub f1_w1: Tensor, // [C, 1, 1, 1]
    pub f1_b1: Tensor, // [C]
    pub f1_w2: Tensor, // [C, C, 1, 1]
    pub f1_b2: Tensor, // [C]
    pub w1: Tensor,    // [H, W], broadcast across channels
    pub alpha: Real,
    pub residual_scale: Real,
}

impl InjectionParams {
    pub fn zeros(c: usize, h: usize, w: usize, alpha: Real, residual_scale: Real) -> Result<Self> {
        Self::build(c, h, w, alpha, residual_scale, |n| vec![0.0; n])
    }

    pub fn random(
        rng: &mut Prng,
        std: Real,
        c: usize,
        h: usize,
        w: usize,
        alpha: Real,
        residual_scale: Real,
    ) -> Result<Self> {
        Self::build(c, h, w, alpha, residual_scale, |n| {
            rng::normal_vec(rng, n).into_iter().map(|v| v * std).collect()
        })
    }

    fn build(
        c: usize,
        h: usize,
        w: usize,
        alpha: Real,
        residual_scale: Real,
        mut fill: impl FnMut(usize) -> Vec<Real>,
    ) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("injection dimensions must be positive".into()));
        }
        Ok(InjectionParams {
            c,
            f1_w1: Tensor::param(fill(c), vec![c, 1, 1, 1])?,
            f1_b1: Tensor::param(fill(c), vec![c])?,
            f1_w2: Tensor::param(fill(c * c), vec![c, c, 1, 1])?,
            f1_b2: Tensor::param(fill(c), vec![c])?,
            w1: Tensor::param(fill(h * w), vec![h, w])?,
            alpha,
            residual_scale,
        })
    }

    /// Parameter tensors in declaration order (for gradient access).
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.f1_w1, &self.f1_b1, &self.f1_w2, &self.f1_b2, &self.w1]
    }
}

/// Gated residual noise update for a `[C, H, W]` feature map and an
/// `[H, W]` noise slice `z`:
///
/// `out = h + z * sigmoid(F1(z) + W1) + alpha * residual_scale * z`
///
/// with `z` broadcast across channels and `F1` the pointwise two-layer
/// map from [`InjectionParams`]. With zero parameters and `alpha = 0`
/// this reduces to `h + 0.5 * z` exactly; the gradient with respect to
/// `h` is the identity.
pub fn inject(h: &Tensor, z_slice: &Tensor, params: &InjectionParams) -> Result<Tensor> {
    let hs = h.shape();
    if hs.len() != 3 || hs[0] != params.c {
        return Err(Error::Shape {
            op: "inject",
            detail: format!("feature map {:?} vs configured channels {}", hs, params.c),
        });
    }
    let zs = z_slice.shape();
    if zs != [hs[1], hs[2]] {
        return Err(Error::Shape {
            op: "inject",
            detail: format!("noise slice {:?} vs feature map {:?}", zs, hs),
        });
    }
    if params.w1.shape() != [hs[1], hs[2]] {
        return Err(Error::Shape {
            op: "inject",
            detail: format!("gate bias {:?} vs feature map {:?}", params.w1.shape(), hs),
        });
    }
    let zc = z_slice.broadcast_hw(params.c)?;
    let z1 = z_slice.reshape(&[1, hs[1], hs[2]])?;
    let f1 = z1
        .conv2d(&params.f1_w1, Some(&params.f1_b1), 1, 0, 1)?
        .relu()
        .conv2d(&params.f1_w2, Some(&params.f1_b2), 1, 0, 1)?;
    let gate = f1.add(&params.w1.broadcast_hw(params.c)?)?.sigmoid();
    let update = zc.mul(&gate)?;
    let residual = zc.scale(params.alpha * params.residual_scale);
    h.add(&update)?.add(&residual)
}
