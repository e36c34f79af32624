//! Slice-graph feature fusion.
//!
//! A volume's slices form a graph: one node per slice plus one global
//! node connected to every slice. Edge weights decay exponentially with
//! slice distance inside a cutoff radius. From the flattened adjacency
//! matrix a small network produces a per-feature gate in (0, 1) that
//! multiplicatively modulates slice features; a multi-scale dilated
//! convolution stack aggregates encoder/decoder features beforehand, and
//! one round of row-normalized neighbor mixing shares information across
//! slices afterward.

use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::{Real, Tensor};

/// Above this `C*H*W*n_hidden` product the gate-map weights switch from a
/// dense per-position matrix to per-channel weight sharing.
pub const DEFAULT_DENSE_BUDGET: usize = 1 << 20;

// ── Adjacency ────────────────────────────────────────────────────────

/// Symmetric slice-graph adjacency over `n_slices + 1` nodes (global
/// node last), unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    n_slices: usize,
    data: Vec<Real>, // row-major (n_slices + 1)^2
}

/// Build the slice-graph adjacency matrix.
///
/// Entry rules, with `n = n_slices` and node `n` the global node:
/// - `A[i][i] = 1` for every node;
/// - `A[i][j] = exp(-|i-j| / tau)` for slice nodes with
///   `1 <= |i-j| <= radius`, else `0`;
/// - `A[i][n] = A[n][i] = 1 / n` for every slice node `i`.
pub fn build_adjacency(n_slices: usize, radius: usize, tau: Real) -> Result<Adjacency> {
    if n_slices == 0 {
        return Err(Error::EmptyInput("adjacency over zero slices".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("adjacency tau must be positive, got {tau}")));
    }
    let n = n_slices + 1;
    let mut data = vec![0.0; n * n];
    for i in 0..n_slices {
        for j in 0..n_slices {
            let d = i.abs_diff(j);
            data[i * n + j] = if d == 0 {
                1.0
            } else if d <= radius {
                (-(d as Real) / tau).exp()
            } else {
                0.0
            };
        }
    }
    let g = n_slices;
    let gw = 1.0 / n_slices as Real;
    for i in 0..n_slices {
        data[i * n + g] = gw;
        data[g * n + i] = gw;
    }
    data[g * n + g] = 1.0;
    Ok(Adjacency { n_slices, data })
}

impl Adjacency {
    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    /// Node count including the global node.
    pub fn n_nodes(&self) -> usize {
        self.n_slices + 1
    }

    pub fn get(&self, i: usize, j: usize) -> Real {
        self.data[i * self.n_nodes() + j]
    }

    /// Row-major flattening (the gate network's input).
    pub fn flat(&self) -> &[Real] {
        &self.data
    }

    /// Rows scaled to sum to one (every row sum is positive: unit diagonal).
    pub fn row_normalized(&self) -> Vec<Real> {
        let n = self.n_nodes();
        let mut out = self.data.clone();
        for i in 0..n {
            let s: Real = out[i * n..(i + 1) * n].iter().sum();
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= s;
            }
        }
        out
    }
}

// ── Edge attention ───────────────────────────────────────────────────

/// Inner activation of the gate network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delta {
    Relu,
    Identity,
}

/// Gate-map weights: dense gives every `(c, y, x)` position its own row;
/// per-channel shares one row per channel across spatial positions.
#[derive(Debug, Clone)]
pub enum GateMap {
    Dense { w: Tensor, c: Tensor },
    PerChannel { w: Tensor, c: Tensor },
}

/// Parameters of the adjacency-driven feature gate
/// `sigmoid(W * delta(U * vec(A) + b) + c)`.
#[derive(Debug, Clone)]
pub struct SifParams {
    pub n_nodes: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub n_hidden: usize,
    pub u: Tensor,
    pub b: Tensor,
    pub map: GateMap,
    pub delta: Delta,
}

impl SifParams {
    /// All-zero parameters (gate = 0.5 everywhere).
    pub fn zeros(
        n_nodes: usize,
        c: usize,
        h: usize,
        w: usize,
        n_hidden: usize,
        delta: Delta,
        dense_budget: usize,
    ) -> Result<SifParams> {
        Self::build(n_nodes, c, h, w, n_hidden, delta, dense_budget, |n| vec![0.0; n])
    }

    /// Gaussian-initialized parameters with the given standard deviation.
    pub fn random(
        rng: &mut Prng,
        std: Real,
        n_nodes: usize,
        c: usize,
        h: usize,
        w: usize,
        n_hidden: usize,
        delta: Delta,
        dense_budget: usize,
    ) -> Result<SifParams> {
        // Pre-draw deterministically in declaration order.
        let n2 = n_nodes * n_nodes;
        let u = scaled(rng, n_hidden * n2, std);
        let b = scaled(rng, n_hidden, std);
        let dense = c * h * w * n_hidden <= dense_budget;
        let rows = if dense { c * h * w } else { c };
        let wv = scaled(rng, rows * n_hidden, std);
        let cv = scaled(rng, rows, std);
        let mut draws = vec![u, b, wv, cv].into_iter();
        Self::build(n_nodes, c, h, w, n_hidden, delta, dense_budget, move |_n| {
            draws.next().expect("four parameter tensors")
        })
    }

    fn build(
        n_nodes: usize,
        c: usize,
        h: usize,
        w: usize,
        n_hidden: usize,
        delta: Delta,
        dense_budget: usize,
        mut fill: impl FnMut(usize) -> Vec<Real>,
    ) -> Result<SifParams> {
        if n_nodes < 2 {
            return Err(Error::Config(
                "gate network needs at least one slice node plus the global node".into(),
            ));
        }
        if c == 0 || h == 0 || w == 0 || n_hidden == 0 {
            return Err(Error::Config("gate network dimensions must be positive".into()));
        }
        let n2 = n_nodes * n_nodes;
        let u = Tensor::param(fill(n_hidden * n2), vec![n_hidden, n2])?;
        let b = Tensor::param(fill(n_hidden), vec![n_hidden])?;
        let dense = c * h * w * n_hidden <= dense_budget;
        let rows = if dense { c * h * w } else { c };
        let wt = Tensor::param(fill(rows * n_hidden), vec![rows, n_hidden])?;
        let ct = Tensor::param(fill(rows), vec![rows])?;
        let map = if dense {
            GateMap::Dense { w: wt, c: ct }
        } else {
            GateMap::PerChannel { w: wt, c: ct }
        };
        Ok(SifParams {
            n_nodes,
            c,
            h,
            w,
            n_hidden,
            u,
            b,
            map,
            delta,
        })
    }

    /// Assemble from existing tensors (used by the model's parameter store).
    #[allow(clippy::too_many_arguments)]
    pub fn from_tensors(
        n_nodes: usize,
        c: usize,
        h: usize,
        w: usize,
        n_hidden: usize,
        delta: Delta,
        u: Tensor,
        b: Tensor,
        map: GateMap,
    ) -> SifParams {
        SifParams {
            n_nodes,
            c,
            h,
            w,
            n_hidden,
            u,
            b,
            map,
            delta,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.map, GateMap::Dense { .. })
    }

    /// Parameter tensors in declaration order (for gradient access).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let (w, c) = match &self.map {
            GateMap::Dense { w, c } => (w, c),
            GateMap::PerChannel { w, c } => (w, c),
        };
        vec![&self.u, &self.b, w, c]
    }
}

fn scaled(rng: &mut Prng, n: usize, std: Real) -> Vec<Real> {
    rng::normal_vec(rng, n).into_iter().map(|v| v * std).collect()
}

/// Per-feature gate in (0, 1) computed from the flattened adjacency:
/// `sigmoid(W * delta(U * vec(A) + b) + c)`, returned as `[C, H, W]`.
pub fn edge_attention(adj: &Adjacency, params: &SifParams) -> Result<Tensor> {
    let n2 = params.n_nodes * params.n_nodes;
    if adj.n_nodes() != params.n_nodes {
        return Err(Error::Shape {
            op: "edge_attention",
            detail: format!(
                "adjacency has {} nodes, parameters expect {}",
                adj.n_nodes(),
                params.n_nodes
            ),
        });
    }
    let vec_a = Tensor::constant(adj.flat().to_vec(), vec![n2])?;
    let hidden = vec_a.linear(&params.u, Some(&params.b))?;
    let hidden = match params.delta {
        Delta::Relu => hidden.relu(),
        Delta::Identity => hidden,
    };
    match &params.map {
        GateMap::Dense { w, c } => hidden
            .linear(w, Some(c))?
            .sigmoid()
            .reshape(&[params.c, params.h, params.w]),
        GateMap::PerChannel { w, c } => hidden
            .linear(w, Some(c))?
            .sigmoid()
            .expand_chw(params.h, params.w),
    }
}

/// Multiplicative modulation `x * attention` for `[C, H, W]` features.
pub fn sif_modulate(x: &Tensor, attention: &Tensor) -> Result<Tensor> {
    x.mul(attention)
}

// ── Multi-scale aggregation ──────────────────────────────────────────

/// One convolution's weights plus its fixed geometry.
#[derive(Debug, Clone)]
pub struct ConvW {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvW {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, Some(&self.b), self.stride, self.pad, self.dilation)
    }
}

/// Intermediate and output channel counts of the aggregation stack for
/// base width `c` (must be divisible by 8): widths grow
/// `c -> 3c/2 -> 7c/4 -> 15c/8` and project back to `c`.
pub fn msa_channel_plan(c: usize) -> Result<(usize, usize, usize, usize)> {
    if c == 0 || c % 8 != 0 {
        return Err(Error::Config(format!(
            "aggregation base width must be a positive multiple of 8, got {c}"
        )));
    }
    Ok((c + c / 2, c + c / 2 + c / 4, c + c / 2 + c / 4 + c / 8, c))
}

/// Dilated 3x3 aggregation weights. Branch `i` reads the running concat
/// and emits `c / 2^(i+1)` channels at dilation `2^(i+1)` with same
/// padding; a final 3x3 projects the `15c/8` concat back to `c`.
#[derive(Debug, Clone)]
pub struct MsaWeights {
    pub c: usize,
    pub d2: ConvW,
    pub d4: ConvW,
    pub d8: ConvW,
    pub out: ConvW,
}

impl MsaWeights {
    pub fn zeros(c: usize) -> Result<MsaWeights> {
        Self::build(c, |n| vec![0.0; n])
    }

    pub fn random(rng: &mut Prng, std: Real, c: usize) -> Result<MsaWeights> {
        Self::build(c, |n| scaled(rng, n, std))
    }

    fn build(c: usize, mut fill: impl FnMut(usize) -> Vec<Real>) -> Result<MsaWeights> {
        let (c1, c2, c3, cout) = msa_channel_plan(c)?;
        let conv = |fill: &mut dyn FnMut(usize) -> Vec<Real>,
                    cin: usize,
                    cout: usize,
                    dilation: usize|
         -> Result<ConvW> {
            Ok(ConvW {
                w: Tensor::param(fill(cout * cin * 9), vec![cout, cin, 3, 3])?,
                b: Tensor::param(fill(cout), vec![cout])?,
                stride: 1,
                pad: dilation, // same padding for 3x3: dilation * (3 - 1) / 2
                dilation,
            })
        };
        Ok(MsaWeights {
            c,
            d2: conv(&mut fill, c, c / 2, 2)?,
            d4: conv(&mut fill, c1, c / 4, 4)?,
            d8: conv(&mut fill, c2, c / 8, 8)?,
            out: conv(&mut fill, c3, cout, 1)?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.d2.w, &self.d2.b, &self.d4.w, &self.d4.b, &self.d8.w, &self.d8.b, &self.out.w,
            &self.out.b,
        ]
    }
}

/// Fuse encoder and decoder features (`x + y`), grow a concat chain of
/// dilated conv branches at rates 2, 4, 8, and project back to `c`
/// channels. Spatial dimensions are preserved.
pub fn multi_scale_aggregate(x_enc: &Tensor, y_dec: &Tensor, weights: &MsaWeights) -> Result<Tensor> {
    if x_enc.shape() != y_dec.shape() {
        return Err(Error::Shape {
            op: "multi_scale_aggregate",
            detail: format!("{:?} vs {:?}", x_enc.shape(), y_dec.shape()),
        });
    }
    if x_enc.shape().len() != 3 || x_enc.shape()[0] != weights.c {
        return Err(Error::Shape {
            op: "multi_scale_aggregate",
            detail: format!(
                "expected [{}, H, W] features, got {:?}",
                weights.c,
                x_enc.shape()
            ),
        });
    }
    let fused = x_enc.add(y_dec)?;
    let f1 = Tensor::concat_channels(&[&fused, &weights.d2.apply(&fused)?])?;
    let f2 = Tensor::concat_channels(&[&f1, &weights.d4.apply(&f1)?])?;
    let f3 = Tensor::concat_channels(&[&f2, &weights.d8.apply(&f2)?])?;
    weights.out.apply(&f3)
}

// ── Graph mixing and adjustment ──────────────────────────────────────

/// One round of row-normalized neighbor mixing across slices (the global
/// node's feature is the mean slice feature), followed by gate
/// modulation, ReLU, and a shared 1x1 conv doubling the channel count.
///
/// `fuse_out` must be a 1x1 conv mapping `C -> 2C`.
pub fn gnn_fuse_and_adjust(
    slice_feats: &[Tensor],
    adj: &Adjacency,
    params: &SifParams,
    fuse_out: &ConvW,
) -> Result<Vec<Tensor>> {
    if slice_feats.is_empty() {
        return Err(Error::EmptyInput("graph fusion over zero slices".into()));
    }
    if slice_feats.len() != adj.n_slices() {
        return Err(Error::Shape {
            op: "gnn_fuse_and_adjust",
            detail: format!(
                "{} slice features vs adjacency over {} slices",
                slice_feats.len(),
                adj.n_slices()
            ),
        });
    }
    let shape = slice_feats[0].shape().to_vec();
    for f in slice_feats {
        if f.shape() != shape {
            return Err(Error::Shape {
                op: "gnn_fuse_and_adjust",
                detail: "slice features must share one shape".into(),
            });
        }
    }
    if shape != [params.c, params.h, params.w] {
        return Err(Error::Shape {
            op: "gnn_fuse_and_adjust",
            detail: format!(
                "features {:?} vs gate dimensions [{}, {}, {}]",
                shape, params.c, params.h, params.w
            ),
        });
    }

    let n = adj.n_slices();
    let nn = adj.n_nodes();
    // Global node feature: uniform mean of slice features.
    let mut global = slice_feats[0].scale(1.0 / n as Real);
    for f in &slice_feats[1..] {
        global = global.add(&f.scale(1.0 / n as Real))?;
    }

    let norm = adj.row_normalized();
    let attention = edge_attention(adj, params)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &norm[i * nn..(i + 1) * nn];
        let mut mixed = slice_feats[0].scale(row[0]);
        for (j, f) in slice_feats.iter().enumerate().skip(1) {
            if row[j] != 0.0 {
                mixed = mixed.add(&f.scale(row[j]))?;
            }
        }
        mixed = mixed.add(&global.scale(row[n]))?;
        let modulated = sif_modulate(&mixed, &attention)?;
        out.push(fuse_out.apply(&modulated.relu())?);
    }
    Ok(out)
}

/// 1x1 conv weights mapping `c -> 2c` (the adjustment head).
pub fn fuse_out_zeros(c: usize) -> Result<ConvW> {
    Ok(ConvW {
        w: Tensor::param(vec![0.0; 2 * c * c], vec![2 * c, c, 1, 1])?,
        b: Tensor::param(vec![0.0; 2 * c], vec![2 * c])?,
        stride: 1,
        pad: 0,
        dilation: 1,
    })
}

pub fn fuse_out_random(rng: &mut Prng, std: Real, c: usize) -> Result<ConvW> {
    Ok(ConvW {
        w: Tensor::param(scaled(rng, 2 * c * c, std), vec![2 * c, c, 1, 1])?,
        b: Tensor::param(scaled(rng, 2 * c, std), vec![2 * c])?,
        stride: 1,
        pad: 0,
        dilation: 1,
    })
}
