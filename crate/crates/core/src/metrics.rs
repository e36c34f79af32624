//! Image-quality metrics: peak signal-to-noise ratio, structural
//! similarity, and a lightweight learned-feature distance built on a
//! frozen, seeded random convolutional extractor.
//!
//! All three evaluators are pure functions of their inputs. The feature
//! distance is also available as a differentiable scalar tensor so it
//! can double as a training loss.

use crate::error::{Error, Result};
use crate::rng::{self};
use crate::tensor::{Real, Tensor};

/// Sentinel reported when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: Real = 99.0;

// ── PSNR ─────────────────────────────────────────────────────────────

/// Peak signal-to-noise ratio in decibels: `10 * log10(max^2 / MSE)`,
/// capped at [`PSNR_CAP_DB`] when the error is exactly zero.
pub fn psnr(real: &Tensor, fake: &Tensor, max_val: Real) -> Result<Real> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape {
            op: "psnr",
            detail: format!("{:?} vs {:?}", real.shape(), fake.shape()),
        });
    }
    if !(max_val > 0.0) {
        return Err(Error::Config(format!(
            "psnr dynamic range must be positive, got {max_val}"
        )));
    }
    let n = real.numel() as Real;
    let mse: Real = real
        .data()
        .iter()
        .zip(fake.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<Real>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

// ── SSIM ─────────────────────────────────────────────────────────────

/// Windowing scheme for the structural-similarity index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimWindow {
    /// 8x8 non-overlapping tiles; trailing partial tiles are included.
    NonOverlap8,
    /// Sliding 11x11 Gaussian window (sigma 1.5), valid positions only.
    Gaussian11,
}

/// Structural-similarity configuration. The stability constants are
/// `C1 = (0.01 * max_val)^2` and `C2 = (0.03 * max_val)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub max_val: Real,
    pub window: SsimWindow,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            max_val: 1.0,
            window: SsimWindow::NonOverlap8,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> Real {
        (0.01 * self.max_val) * (0.01 * self.max_val)
    }

    pub fn c2(&self) -> Real {
        (0.03 * self.max_val) * (0.03 * self.max_val)
    }
}

/// Mean structural similarity over windows, using population statistics
/// per window. Result lies in [-1, 1]; identical images score exactly 1.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Real> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("expected [H, W] images, got {s:?}"),
        });
    }
    if !(cfg.max_val > 0.0) {
        return Err(Error::Config(format!(
            "ssim dynamic range must be positive, got {}",
            cfg.max_val
        )));
    }
    let (h, w) = (s[0], s[1]);
    let min_side = match cfg.window {
        SsimWindow::NonOverlap8 => 8,
        SsimWindow::Gaussian11 => 11,
    };
    if h < min_side || w < min_side {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("{h}x{w} image is smaller than the {min_side}x{min_side} window"),
        });
    }
    let (xs, ys) = (x.data(), y.data());
    match cfg.window {
        SsimWindow::NonOverlap8 => {
            let mut acc = 0.0;
            let mut count = 0usize;
            let mut by = 0;
            while by < h {
                let bh = (h - by).min(8);
                let mut bx = 0;
                while bx < w {
                    let bw = (w - bx).min(8);
                    let idx: Vec<usize> = (0..bh)
                        .flat_map(|dy| (0..bw).map(move |dx| (by + dy) * w + bx + dx))
                        .collect();
                    acc += windowed_ssim_uniform(xs, ys, &idx, cfg);
                    count += 1;
                    bx += 8;
                }
                by += 8;
            }
            Ok(acc / count as Real)
        }
        SsimWindow::Gaussian11 => {
            let kernel = gaussian11_weights();
            let mut acc = 0.0;
            let mut count = 0usize;
            for oy in 0..=h - 11 {
                for ox in 0..=w - 11 {
                    acc += windowed_ssim_weighted(xs, ys, oy, ox, w, &kernel, cfg);
                    count += 1;
                }
            }
            Ok(acc / count as Real)
        }
    }
}

/// Per-window similarity with uniform weights over the given indices.
fn windowed_ssim_uniform(xs: &[Real], ys: &[Real], idx: &[usize], cfg: &SsimConfig) -> Real {
    let n = idx.len() as Real;
    let mx = idx.iter().map(|&i| xs[i]).sum::<Real>() / n;
    let my = idx.iter().map(|&i| ys[i]).sum::<Real>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for &i in idx {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ssim_formula(mx, my, vx, vy, cov, cfg)
}

/// Per-window similarity with Gaussian weights anchored at (oy, ox).
fn windowed_ssim_weighted(
    xs: &[Real],
    ys: &[Real],
    oy: usize,
    ox: usize,
    w: usize,
    kernel: &[Real],
    cfg: &SsimConfig,
) -> Real {
    let mut mx = 0.0;
    let mut my = 0.0;
    for dy in 0..11 {
        for dx in 0..11 {
            let kv = kernel[dy * 11 + dx];
            mx += kv * xs[(oy + dy) * w + ox + dx];
            my += kv * ys[(oy + dy) * w + ox + dx];
        }
    }
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for dy in 0..11 {
        for dx in 0..11 {
            let kv = kernel[dy * 11 + dx];
            let ax = xs[(oy + dy) * w + ox + dx] - mx;
            let ay = ys[(oy + dy) * w + ox + dx] - my;
            vx += kv * ax * ax;
            vy += kv * ay * ay;
            cov += kv * ax * ay;
        }
    }
    ssim_formula(mx, my, vx, vy, cov, cfg)
}

fn ssim_formula(mx: Real, my: Real, vx: Real, vy: Real, cov: Real, cfg: &SsimConfig) -> Real {
    let c1 = cfg.c1();
    let c2 = cfg.c2();
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Normalized 11x11 Gaussian window with sigma 1.5.
fn gaussian11_weights() -> Vec<Real> {
    let sigma = 1.5;
    let mut k = Vec::with_capacity(121);
    for y in -5i32..=5 {
        for x in -5i32..=5 {
            k.push((-((y * y + x * x) as Real) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: Real = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

// ── Learned-feature distance ─────────────────────────────────────────

/// Default seed for the frozen feature extractor.
pub const PERCEPTUAL_NET_SEED: u64 = 17;

/// Channel widths of the four pointwise layers.
const PERCEP_WIDTHS: [usize; 4] = [8, 12, 16, 16];

/// Frozen 4-layer pointwise convolutional feature extractor with seeded
/// random weights and per-layer channel weights. Weights are constants:
/// gradients flow through the compared images only.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    seed: u64,
    kernels: Vec<Tensor>,   // [C_out, C_in, 1, 1]
    biases: Vec<Tensor>,    // [C_out]
    pub layer_w: Vec<Tensor>, // [C_out] channel weights per layer
}

impl PerceptualNet {
    /// Build the extractor from a seed; the same seed always yields the
    /// same frozen weights.
    pub fn new(seed: u64) -> PerceptualNet {
        let mut r = rng::seeded(rng::derive(seed, &[0x70657263]));
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut layer_w = Vec::new();
        let mut cin = 1usize;
        for &cout in &PERCEP_WIDTHS {
            let scale = 1.0 / (cin as Real).sqrt();
            let kv: Vec<Real> = rng::normal_vec(&mut r, cout * cin)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            kernels.push(
                Tensor::constant(kv, vec![cout, cin, 1, 1]).expect("static kernel shape"),
            );
            biases.push(
                Tensor::constant(rng::normal_vec(&mut r, cout).into_iter().map(|v| 0.1 * v).collect(), vec![cout])
                    .expect("static bias shape"),
            );
            layer_w.push(
                Tensor::constant(rng::normal_vec(&mut r, cout), vec![cout])
                    .expect("static weight shape"),
            );
            cin = cout;
        }
        PerceptualNet {
            seed,
            kernels,
            biases,
            layer_w,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_layers(&self) -> usize {
        PERCEP_WIDTHS.len()
    }

    /// Post-activation feature maps of every layer for an `[H, W]` image.
    pub fn features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let s = img.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "perceptual_features",
                detail: format!("expected an [H, W] image, got {s:?}"),
            });
        }
        let mut cur = img.reshape(&[1, s[0], s[1]])?;
        let mut out = Vec::with_capacity(self.kernels.len());
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            cur = cur.conv2d(k, Some(b), 1, 0, 1)?.leaky_relu(0.2);
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Scale each spatial position's channel vector to unit length
/// (stabilized by a tiny epsilon inside the square root).
fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ones = Tensor::constant(vec![1.0; c], vec![1, c, 1, 1])?;
    let normsq = f.mul(f)?.conv2d(&ones, None, 1, 0, 1)?; // [1, H, W]
    let inv = normsq.add_scalar(1e-10).powf(-0.5).reshape(&[h, w])?.broadcast_hw(c)?;
    f.mul(&inv)
}

/// Feature distance as a differentiable scalar tensor:
/// `sum_l mean_{h,w} sum_c (w_l[c] * (fx_hat - fy_hat)[c,h,w])^2`
/// over unit-normalized channel features.
pub fn lpips_lite_t(x: &Tensor, y: &Tensor, net: &PerceptualNet) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op: "lpips_lite",
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let fx = net.features(x)?;
    let fy = net.features(y)?;
    let mut total: Option<Tensor> = None;
    for ((a, b), wl) in fx.iter().zip(&fy).zip(&net.layer_w) {
        let s = a.shape();
        let (h, w) = (s[1], s[2]);
        let na = unit_normalize(a)?;
        let nb = unit_normalize(b)?;
        let diff = na.sub(&nb)?;
        let weighted = diff.mul(&wl.expand_chw(h, w)?)?;
        let term = weighted.mul(&weighted)?.sum().scale(1.0 / (h * w) as Real);
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("net has at least one layer"))
}

/// Feature distance as a plain number.
pub fn lpips_lite(x: &Tensor, y: &Tensor, net: &PerceptualNet) -> Result<Real> {
    Ok(lpips_lite_t(x, y, net)?.value())
}

// ── Paired evaluation ────────────────────────────────────────────────

/// One pair's metric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub psnr_db: Real,
    pub ssim: Real,
    pub lpips: Real,
}

/// Per-pair metrics plus aggregate mean and population standard
/// deviation, with the dynamic range the values were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_pair: Vec<PairMetrics>,
    pub mean: PairMetrics,
    pub std: PairMetrics,
    pub max_val: Real,
}

/// Evaluate paired image sets: per-pair PSNR/SSIM/feature distance and
/// their aggregates.
pub fn evaluate_pairs(
    real_set: &[Tensor],
    fake_set: &[Tensor],
    net: &PerceptualNet,
    ssim_cfg: &SsimConfig,
) -> Result<MetricsReport> {
    if real_set.len() != fake_set.len() {
        return Err(Error::Usage(format!(
            "paired evaluation needs equal counts, got {} vs {}",
            real_set.len(),
            fake_set.len()
        )));
    }
    if real_set.is_empty() {
        return Err(Error::EmptyInput("no image pairs to evaluate".into()));
    }
    let mut per_pair = Vec::with_capacity(real_set.len());
    for (r, f) in real_set.iter().zip(fake_set) {
        per_pair.push(PairMetrics {
            psnr_db: psnr(r, f, ssim_cfg.max_val)?,
            ssim: ssim(r, f, ssim_cfg)?,
            lpips: lpips_lite(r, f, net)?,
        });
    }
    let n = per_pair.len() as Real;
    let mean_of = |pick: fn(&PairMetrics) -> Real| per_pair.iter().map(pick).sum::<Real>() / n;
    let mean = PairMetrics {
        psnr_db: mean_of(|p| p.psnr_db),
        ssim: mean_of(|p| p.ssim),
        lpips: mean_of(|p| p.lpips),
    };
    let std_of = |pick: fn(&PairMetrics) -> Real, mu: Real| {
        (per_pair.iter().map(|p| (pick(p) - mu) * (pick(p) - mu)).sum::<Real>() / n).sqrt()
    };
    let std = PairMetrics {
        psnr_db: std_of(|p| p.psnr_db, mean.psnr_db),
        ssim: std_of(|p| p.ssim, mean.ssim),
        lpips: std_of(|p| p.lpips, mean.lpips),
    };
    Ok(MetricsReport {
        per_pair,
        mean,
        std,
        max_val: ssim_cfg.max_val,
    })
}

impl MetricsReport {
    /// Tab-separated rendering: one `id psnr ssim lpips` row per pair,
    /// then `mean` and `std` footer rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tpsnr_db\tssim\tlpips\n");
        for (i, p) in self.per_pair.iter().enumerate() {
            out.push_str(&format!("{i}\t{:.6}\t{:.6}\t{:.6}\n", p.psnr_db, p.ssim, p.lpips));
        }
        out.push_str(&format!(
            "mean\t{:.6}\t{:.6}\t{:.6}\n",
            self.mean.psnr_db, self.mean.ssim, self.mean.lpips
        ));
        out.push_str(&format!(
            "std\t{:.6}\t{:.6}\t{:.6}\n",
            self.std.psnr_db, self.std.ssim, self.std.lpips
        ));
        out
    }
}
