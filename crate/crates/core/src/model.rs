//! Generator and discriminator assembly plus the composite training
//! losses.
//!
//! Parameters live in a [`ParamStore`] as plain named arrays; every
//! forward pass materializes fresh differentiable leaves from the store
//! (tensor node data is immutable by design), and the optimizer writes
//! updated arrays back to the store. The generator pipeline per slice:
//! mask encoder → optional per-slice noise injection → optional
//! slice-graph fusion (gate attention, neighbor mixing, dilated
//! aggregation) → mask-modulated decoder with two 2× upsamplings →
//! 1×1 projection → sigmoid.

use crate::error::{Error, Result};
use crate::fusion::{
    self, build_adjacency, gnn_fuse_and_adjust, multi_scale_aggregate, ConvW, Delta, GateMap,
    MsaWeights, SifParams,
};
use crate::metrics::PerceptualNet;
use crate::noise::{chunk_noise, inject, InjectionParams, NoiseVolume};
use crate::rng::{self};
use crate::tensor::{Real, Tensor};

/// Variance-floor epsilon of the decoder's per-channel normalization;
/// constant channels normalize to zero.
pub const SPADE_EPS: Real = 1e-5;

// ── Configurations ───────────────────────────────────────────────────

/// Structural hyperparameters of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Feature width `C` at the working (quarter) resolution; the dilated
    /// aggregation stack needs it divisible by 8.
    pub base_channels: usize,
    /// Mask-modulated decoder blocks (at least 3: quarter, half, full
    /// resolution; extras run at full resolution).
    pub n_spade_blocks: usize,
    /// Output image size; both sides must be at least 16 and divisible
    /// by 4 (the encoder downsamples twice).
    pub image_hw: (usize, usize),
    /// Slices per volume; fixes the slice-graph size.
    pub n_slices: usize,
    /// Mask classes (background included).
    pub k_classes: usize,
    /// Enable the slice-graph fusion stage.
    pub enable_sif: bool,
    /// Enable the per-slice noise injection stage.
    pub enable_noise: bool,
    /// Hidden width of the adjacency-driven gate network.
    pub sif_hidden: usize,
    /// Slice-graph neighborhood radius.
    pub adj_radius: usize,
    /// Slice-graph distance decay.
    pub adj_tau: Real,
    /// Direct residual mixing weight of injected noise.
    pub noise_alpha: Real,
    /// Extra scale on the direct residual noise path.
    pub noise_residual_scale: Real,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            n_spade_blocks: 3,
            image_hw: (32, 32),
            n_slices: 4,
            k_classes: 3,
            enable_sif: true,
            enable_noise: true,
            sif_hidden: 16,
            adj_radius: 2,
            adj_tau: 1.0,
            noise_alpha: 0.1,
            noise_residual_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if self.base_channels == 0 || self.base_channels % 8 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive multiple of 8, got {}",
                self.base_channels
            )));
        }
        if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be at least 16x16 and divisible by 4"
            )));
        }
        if self.k_classes < 2 {
            return Err(Error::Config(format!(
                "k_classes must be at least 2, got {}",
                self.k_classes
            )));
        }
        if self.n_slices == 0 {
            return Err(Error::Config("n_slices must be positive".into()));
        }
        if self.n_spade_blocks < 3 {
            return Err(Error::Config(format!(
                "n_spade_blocks must be at least 3, got {}",
                self.n_spade_blocks
            )));
        }
        if self.sif_hidden == 0 {
            return Err(Error::Config("sif_hidden must be positive".into()));
        }
        if self.adj_radius == 0 {
            return Err(Error::Config("adj_radius must be positive".into()));
        }
        if !(self.adj_tau > 0.0) {
            return Err(Error::Config(format!(
                "adj_tau must be positive, got {}",
                self.adj_tau
            )));
        }
        if !self.noise_alpha.is_finite() || !self.noise_residual_scale.is_finite() {
            return Err(Error::Config("noise mixing weights must be finite".into()));
        }
        Ok(())
    }

    /// Working resolution of the fusion/injection stage.
    pub fn quarter_hw(&self) -> (usize, usize) {
        (self.image_hw.0 / 4, self.image_hw.1 / 4)
    }
}

/// Weights and structure of the composite generator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_feat: Real,
    pub lambda_perceptual: Real,
    pub lambda_gtc: Real,
    pub n_discriminators: usize,
    /// Feature-producing conv layers per discriminator scale.
    pub n_disc_layers: usize,
    /// First-layer width of each discriminator scale.
    pub disc_width: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_feat: 10.0,
            lambda_perceptual: 5.0,
            lambda_gtc: 10.0,
            n_discriminators: 2,
            n_disc_layers: 3,
            disc_width: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_feat", self.lambda_feat),
            ("lambda_perceptual", self.lambda_perceptual),
            ("lambda_gtc", self.lambda_gtc),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.n_discriminators == 0 {
            return Err(Error::Config("n_discriminators must be at least 1".into()));
        }
        if self.n_disc_layers < 2 {
            return Err(Error::Config(format!(
                "n_disc_layers must be at least 2, got {}",
                self.n_disc_layers
            )));
        }
        if self.disc_width == 0 {
            return Err(Error::Config("disc_width must be positive".into()));
        }
        Ok(())
    }
}

// ── Parameter store ──────────────────────────────────────────────────

/// One named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

/// Ordered, named collection of trainable arrays. The order is the
/// contract between initialization, materialization, the optimizer, and
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<Real>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "param_store",
                detail: format!("'{name}': {} values vs shape {shape:?}", data.len()),
            });
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    /// Total scalar count across entries.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Replace one entry's values (shape is fixed).
    pub fn set_data(&mut self, idx: usize, data: Vec<Real>) -> Result<()> {
        let e = &mut self.entries[idx];
        if data.len() != e.data.len() {
            return Err(Error::Shape {
                op: "param_store",
                detail: format!(
                    "'{}': replacement has {} values, expected {}",
                    e.name,
                    data.len(),
                    e.data.len()
                ),
            });
        }
        e.data = data;
        Ok(())
    }

    /// Fresh differentiable leaves, one per entry, in store order.
    pub fn materialize(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|e| Tensor::param(e.data.clone(), e.shape.clone()))
            .collect()
    }
}

// ── Parameter layout ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Gaussian with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
    Zero,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_spec(specs: &mut Vec<Spec>, name: &str, cout: usize, cin: usize, k: usize) {
    specs.push(Spec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k],
        init: Init::Fan(cin * k * k),
    });
    specs.push(Spec {
        name: format!("{name}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

/// Rows of the gate map and whether it is dense, per the shared budget
/// rule of the fusion module.
fn gate_rows(c: usize, h: usize, w: usize, hidden: usize) -> (usize, bool) {
    let dense = c * h * w * hidden <= fusion::DEFAULT_DENSE_BUDGET;
    (if dense { c * h * w } else { c }, dense)
}

fn generator_layout(cfg: &GeneratorConfig) -> Vec<Spec> {
    let c = cfg.base_channels;
    let k = cfg.k_classes;
    let (h4, w4) = cfg.quarter_hw();
    let mut specs = Vec::new();

    conv_spec(&mut specs, "enc0", c / 2, k, 3);
    conv_spec(&mut specs, "enc1", c, c / 2, 3);
    conv_spec(&mut specs, "enc2", c, c, 3);

    if cfg.enable_noise {
        specs.push(Spec {
            name: "inj.f1_w1".into(),
            shape: vec![c, 1, 1, 1],
            init: Init::Fan(1),
        });
        specs.push(Spec {
            name: "inj.f1_b1".into(),
            shape: vec![c],
            init: Init::Zero,
        });
        specs.push(Spec {
            name: "inj.f1_w2".into(),
            shape: vec![c, c, 1, 1],
            init: Init::Fan(c),
        });
        specs.push(Spec {
            name: "inj.f1_b2".into(),
            shape: vec![c],
            init: Init::Zero,
        });
        specs.push(Spec {
            name: "inj.w1".into(),
            shape: vec![h4, w4],
            init: Init::Zero,
        });
    }

    if cfg.enable_sif {
        let nn = cfg.n_slices + 1;
        let (rows, _) = gate_rows(c, h4, w4, cfg.sif_hidden);
        specs.push(Spec {
            name: "sif.u".into(),
            shape: vec![cfg.sif_hidden, nn * nn],
            init: Init::Fan(nn * nn),
        });
        specs.push(Spec {
            name: "sif.b".into(),
            shape: vec![cfg.sif_hidden],
            init: Init::Zero,
        });
        specs.push(Spec {
            name: "sif.w".into(),
            shape: vec![rows, cfg.sif_hidden],
            init: Init::Fan(cfg.sif_hidden),
        });
        specs.push(Spec {
            name: "sif.c".into(),
            shape: vec![rows],
            init: Init::Zero,
        });
        let (c1, c2, c3, _) = fusion::msa_channel_plan(c).expect("validated width");
        conv_spec(&mut specs, "msa.d2", c / 2, c, 3);
        conv_spec(&mut specs, "msa.d4", c / 4, c1, 3);
        conv_spec(&mut specs, "msa.d8", c / 8, c2, 3);
        conv_spec(&mut specs, "msa.out", c, c3, 3);
        conv_spec(&mut specs, "fuse", 2 * c, c, 1);
        conv_spec(&mut specs, "stem", c, 2 * c, 1);
    }

    for i in 0..cfg.n_spade_blocks {
        conv_spec(&mut specs, &format!("spade{i}.gamma"), c, k, 3);
        conv_spec(&mut specs, &format!("spade{i}.beta"), c, k, 3);
        conv_spec(&mut specs, &format!("dec{i}"), c, c, 3);
    }
    conv_spec(&mut specs, "out", 1, c, 1);
    specs
}

fn init_store(specs: &[Spec], seed: u64) -> Result<ParamStore> {
    let mut r = rng::seeded(rng::derive(seed, &[0x6d6f646c]));
    let mut store = ParamStore::new();
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Fan(fan) => {
                let std = 1.0 / (fan as Real).sqrt();
                rng::normal_vec(&mut r, n).into_iter().map(|v| v * std).collect()
            }
            Init::Zero => vec![0.0; n],
        };
        store.push(&s.name, s.shape.clone(), data)?;
    }
    Ok(store)
}

fn check_store_layout(specs: &[Spec], store: &ParamStore, what: &str) -> Result<()> {
    if store.len() != specs.len() {
        return Err(Error::Config(format!(
            "{what}: store has {} entries, layout expects {}",
            store.len(),
            specs.len()
        )));
    }
    for (s, e) in specs.iter().zip(store.entries()) {
        if s.name != e.name || s.shape != e.shape {
            return Err(Error::Config(format!(
                "{what}: entry '{}' {:?} does not match layout '{}' {:?}",
                e.name, e.shape, s.name, s.shape
            )));
        }
    }
    Ok(())
}

// ── Mask-modulated normalization ─────────────────────────────────────

/// Modulation weights of one decoder block: two mask-driven convs
/// producing per-pixel scale and shift.
#[derive(Debug, Clone)]
pub struct SpadeParams {
    pub gamma: ConvW,
    pub beta: ConvW,
}

/// Normalize features per channel, then modulate with mask-derived
/// maps: `(1 + gamma(mask)) * norm(x) + beta(mask)`. With zero-weight
/// modulation nets the output is exactly the normalized features.
pub fn spade_block(x: &Tensor, mask: &Tensor, p: &SpadeParams) -> Result<Tensor> {
    let (xs, ms) = (x.shape(), mask.shape());
    if xs.len() != 3 || ms.len() != 3 || xs[1..] != ms[1..] {
        return Err(Error::Shape {
            op: "spade_block",
            detail: format!("features {xs:?} vs mask {ms:?}"),
        });
    }
    let normed = x.instance_norm(SPADE_EPS)?;
    let gamma = p.gamma.apply(mask)?;
    let beta = p.beta.apply(mask)?;
    normed.mul(&gamma.add_scalar(1.0))?.add(&beta)
}

/// Nearest-neighbor downsample of a `[K, H, W]` mask by an integer
/// factor (top-left sample of each cell); one-hot inputs stay one-hot.
pub fn downsample_mask_nearest(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "downsample_mask",
            detail: format!("expected [K, H, W], got {s:?}"),
        });
    }
    if factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(Error::Shape {
            op: "downsample_mask",
            detail: format!("factor {factor} does not divide {}x{}", s[1], s[2]),
        });
    }
    if factor == 1 {
        return Tensor::constant(mask.to_vec(), s.to_vec());
    }
    let (k, h, w) = (s[0], s[1] / factor, s[2] / factor);
    let mut out = vec![0.0; k * h * w];
    for ch in 0..k {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] =
                    mask.data()[(ch * s[1] + y * factor) * s[2] + x * factor];
            }
        }
    }
    Tensor::constant(out, vec![k, h, w])
}

// ── Generator ────────────────────────────────────────────────────────

/// Slice-graph fusion stage weights.
#[derive(Debug, Clone)]
pub struct SifStage {
    pub gate: SifParams,
    pub msa: MsaWeights,
    /// 1×1 adjustment head `C -> 2C` after graph mixing.
    pub fuse: ConvW,
    /// 1×1 reduction `2C -> C` feeding the aggregation stack.
    pub stem: ConvW,
}

/// Materialized generator weights (leaves aligned with the store).
pub struct GeneratorParams {
    pub leaves: Vec<Tensor>,
    pub enc: Vec<ConvW>,
    pub inject: Option<InjectionParams>,
    pub sif: Option<SifStage>,
    pub blocks: Vec<(SpadeParams, ConvW)>,
    pub out: ConvW,
}

/// The mask-to-image generator: configuration plus parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
}

struct Cursor<'a> {
    leaves: &'a [Tensor],
    specs: &'a [Spec],
    i: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, expect: &str) -> Result<Tensor> {
        let i = self.i;
        if i >= self.leaves.len() {
            return Err(Error::Config(format!(
                "parameter list exhausted before '{expect}'"
            )));
        }
        debug_assert_eq!(self.specs[i].name, expect, "layout order drifted");
        debug_assert_eq!(
            self.specs[i].shape.as_slice(),
            self.leaves[i].shape(),
            "leaf shape drifted from layout"
        );
        self.i += 1;
        Ok(self.leaves[i].clone())
    }

    fn conv(&mut self, name: &str, stride: usize, pad: usize, dilation: usize) -> Result<ConvW> {
        Ok(ConvW {
            w: self.next(&format!("{name}.w"))?,
            b: self.next(&format!("{name}.b"))?,
            stride,
            pad,
            dilation,
        })
    }
}

impl Generator {
    /// Validate the configuration and initialize a fresh parameter store.
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Generator> {
        cfg.validate()?;
        let store = init_store(&generator_layout(&cfg), seed)?;
        Ok(Generator { cfg, store })
    }

    /// Rebuild from a loaded store, verifying it matches the layout.
    pub fn from_store(cfg: GeneratorConfig, store: ParamStore) -> Result<Generator> {
        cfg.validate()?;
        check_store_layout(&generator_layout(&cfg), &store, "generator")?;
        Ok(Generator { cfg, store })
    }

    /// Structured weight views over an explicit leaf list (used by both
    /// the regular forward pass and gradient checks that substitute a
    /// single leaf).
    pub fn assemble(&self, leaves: Vec<Tensor>) -> Result<GeneratorParams> {
        let specs = generator_layout(&self.cfg);
        if leaves.len() != specs.len() {
            return Err(Error::Config(format!(
                "generator expects {} parameter tensors, got {}",
                specs.len(),
                leaves.len()
            )));
        }
        let cfg = &self.cfg;
        let c = cfg.base_channels;
        let (h4, w4) = cfg.quarter_hw();
        let mut cur = Cursor {
            leaves: &leaves,
            specs: &specs,
            i: 0,
        };

        let enc = vec![
            cur.conv("enc0", 1, 1, 1)?,
            cur.conv("enc1", 2, 1, 1)?,
            cur.conv("enc2", 2, 1, 1)?,
        ];

        let inject = if cfg.enable_noise {
            Some(InjectionParams {
                c,
                f1_w1: cur.next("inj.f1_w1")?,
                f1_b1: cur.next("inj.f1_b1")?,
                f1_w2: cur.next("inj.f1_w2")?,
                f1_b2: cur.next("inj.f1_b2")?,
                w1: cur.next("inj.w1")?,
                alpha: cfg.noise_alpha,
                residual_scale: cfg.noise_residual_scale,
            })
        } else {
            None
        };

        let sif = if cfg.enable_sif {
            let (_, dense) = gate_rows(c, h4, w4, cfg.sif_hidden);
            let u = cur.next("sif.u")?;
            let b = cur.next("sif.b")?;
            let w = cur.next("sif.w")?;
            let cv = cur.next("sif.c")?;
            let map = if dense {
                GateMap::Dense { w, c: cv }
            } else {
                GateMap::PerChannel { w, c: cv }
            };
            let gate = SifParams::from_tensors(
                cfg.n_slices + 1,
                c,
                h4,
                w4,
                cfg.sif_hidden,
                Delta::Relu,
                u,
                b,
                map,
            );
            let msa = MsaWeights {
                c,
                d2: cur.conv("msa.d2", 1, 2, 2)?,
                d4: cur.conv("msa.d4", 1, 4, 4)?,
                d8: cur.conv("msa.d8", 1, 8, 8)?,
                out: cur.conv("msa.out", 1, 1, 1)?,
            };
            let fuse = cur.conv("fuse", 1, 0, 1)?;
            let stem = cur.conv("stem", 1, 0, 1)?;
            Some(SifStage {
                gate,
                msa,
                fuse,
                stem,
            })
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(cfg.n_spade_blocks);
        for i in 0..cfg.n_spade_blocks {
            let gamma = cur.conv(&format!("spade{i}.gamma"), 1, 1, 1)?;
            let beta = cur.conv(&format!("spade{i}.beta"), 1, 1, 1)?;
            let dec = cur.conv(&format!("dec{i}"), 1, 1, 1)?;
            blocks.push((SpadeParams { gamma, beta }, dec));
        }
        let out = cur.conv("out", 1, 0, 1)?;
        debug_assert_eq!(cur.i, leaves.len(), "unused parameter tensors");

        Ok(GeneratorParams {
            leaves,
            enc,
            inject,
            sif,
            blocks,
            out,
        })
    }

    /// Materialize fresh leaves from the store and assemble views.
    pub fn params(&self) -> Result<GeneratorParams> {
        self.assemble(self.store.materialize()?)
    }

    /// Run the full pipeline on a stack of one-hot mask slices.
    ///
    /// `z3` must cover at least `masks.len()` slices at quarter
    /// resolution and is required exactly when noise injection is
    /// enabled. Returns one `[1, H, W]` image per slice, values in (0, 1).
    pub fn generate(
        &self,
        p: &GeneratorParams,
        masks: &[Tensor],
        z3: Option<&NoiseVolume>,
    ) -> Result<Vec<Tensor>> {
        let cfg = &self.cfg;
        let (hh, ww) = cfg.image_hw;
        let (h4, w4) = cfg.quarter_hw();
        if masks.is_empty() {
            return Err(Error::EmptyInput("generate needs at least one mask slice".into()));
        }
        for m in masks {
            if m.shape() != [cfg.k_classes, hh, ww] {
                return Err(Error::Shape {
                    op: "generate",
                    detail: format!(
                        "mask slice {:?} vs expected [{}, {hh}, {ww}]",
                        m.shape(),
                        cfg.k_classes
                    ),
                });
            }
        }
        if cfg.enable_sif && masks.len() != cfg.n_slices {
            return Err(Error::Shape {
                op: "generate",
                detail: format!(
                    "slice-graph fusion is sized for {} slices, got {}",
                    cfg.n_slices,
                    masks.len()
                ),
            });
        }
        let z3 = if cfg.enable_noise {
            let z = z3.ok_or_else(|| {
                Error::Usage("noise injection is enabled but no noise volume was given".into())
            })?;
            let (zd, zh, zw) = z.dims();
            if zd < masks.len() || zh != h4 || zw != w4 {
                return Err(Error::Shape {
                    op: "generate",
                    detail: format!(
                        "noise volume {zd}x{zh}x{zw} vs {} slices at {h4}x{w4}",
                        masks.len()
                    ),
                });
            }
            Some(z)
        } else {
            None
        };

        // Encoder: three convs, two of them strided, to quarter resolution.
        let mut feats = Vec::with_capacity(masks.len());
        for (i, m) in masks.iter().enumerate() {
            let mut x = m.clone();
            for conv in &p.enc {
                x = conv.apply(&x)?.leaky_relu(0.2);
            }
            if let (Some(z), Some(inj)) = (z3, &p.inject) {
                x = inject(&x, &chunk_noise(z, i)?, inj)?;
            }
            feats.push(x);
        }

        // Slice-graph fusion with an encoder skip into the aggregation.
        if let Some(sif) = &p.sif {
            let adj = build_adjacency(cfg.n_slices, cfg.adj_radius, cfg.adj_tau)?;
            let mixed = gnn_fuse_and_adjust(&feats, &adj, &sif.gate, &sif.fuse)?;
            let mut fused = Vec::with_capacity(feats.len());
            for (enc_i, mix_i) in feats.iter().zip(&mixed) {
                let reduced = sif.stem.apply(mix_i)?.leaky_relu(0.2);
                fused.push(multi_scale_aggregate(enc_i, &reduced, &sif.msa)?);
            }
            feats = fused;
        }

        // Mask-modulated decoder: quarter → half → full resolution.
        let mut outputs = Vec::with_capacity(feats.len());
        for (m, f) in masks.iter().zip(&feats) {
            let mut x = f.clone();
            let mut factor = 4usize;
            for (i, (sp, dec)) in p.blocks.iter().enumerate() {
                let mq = downsample_mask_nearest(m, factor)?;
                x = dec.apply(&spade_block(&x, &mq, sp)?.leaky_relu(0.2))?;
                if i < 2 {
                    x = x.upsample_nearest2x()?;
                    factor /= 2;
                }
            }
            outputs.push(p.out.apply(&x)?.sigmoid());
        }
        Ok(outputs)
    }
}

// ── Discriminator ────────────────────────────────────────────────────

/// One discriminator scale: feature convs plus a patch-logit head.
#[derive(Debug, Clone)]
pub struct DiscScale {
    pub layers: Vec<ConvW>,
    pub logit: ConvW,
}

/// Materialized discriminator weights.
pub struct DiscParams {
    pub leaves: Vec<Tensor>,
    pub scales: Vec<DiscScale>,
}

/// Per-scale output: patch logits plus every intermediate feature map.
pub struct ScaleOutput {
    pub logits: Tensor,
    pub feats: Vec<Tensor>,
}

/// Multi-scale conditional patch discriminator. Scale `s` sees the
/// image/mask pair average-pooled `s` times.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub in_channels: usize,
    pub n_scales: usize,
    pub n_layers: usize,
    pub width: usize,
    pub store: ParamStore,
}

fn discriminator_layout(
    in_channels: usize,
    n_scales: usize,
    n_layers: usize,
    width: usize,
) -> Vec<Spec> {
    let mut specs = Vec::new();
    for s in 0..n_scales {
        let mut cin = in_channels;
        for j in 0..n_layers {
            let cout = width << j.min(3);
            conv_spec(&mut specs, &format!("d{s}.l{j}"), cout, cin, 3);
            cin = cout;
        }
        conv_spec(&mut specs, &format!("d{s}.logit"), 1, cin, 3);
    }
    specs
}

impl Discriminator {
    pub fn new(
        in_channels: usize,
        n_scales: usize,
        n_layers: usize,
        width: usize,
        seed: u64,
    ) -> Result<Discriminator> {
        if in_channels < 2 {
            return Err(Error::Config(
                "discriminator input needs image plus at least one mask channel".into(),
            ));
        }
        if n_scales == 0 || n_layers < 2 || width == 0 {
            return Err(Error::Config(format!(
                "bad discriminator structure: {n_scales} scales, {n_layers} layers, width {width}"
            )));
        }
        let store = init_store(
            &discriminator_layout(in_channels, n_scales, n_layers, width),
            seed,
        )?;
        Ok(Discriminator {
            in_channels,
            n_scales,
            n_layers,
            width,
            store,
        })
    }

    pub fn from_store(
        in_channels: usize,
        n_scales: usize,
        n_layers: usize,
        width: usize,
        store: ParamStore,
    ) -> Result<Discriminator> {
        let mut d = Discriminator::new(in_channels, n_scales, n_layers, width, 0)?;
        check_store_layout(
            &discriminator_layout(in_channels, n_scales, n_layers, width),
            &store,
            "discriminator",
        )?;
        d.store = store;
        Ok(d)
    }

    pub fn assemble(&self, leaves: Vec<Tensor>) -> Result<DiscParams> {
        let specs = discriminator_layout(self.in_channels, self.n_scales, self.n_layers, self.width);
        if leaves.len() != specs.len() {
            return Err(Error::Config(format!(
                "discriminator expects {} parameter tensors, got {}",
                specs.len(),
                leaves.len()
            )));
        }
        let mut cur = Cursor {
            leaves: &leaves,
            specs: &specs,
            i: 0,
        };
        let mut scales = Vec::with_capacity(self.n_scales);
        for s in 0..self.n_scales {
            let mut layers = Vec::with_capacity(self.n_layers);
            for j in 0..self.n_layers {
                let stride = if j < 2 { 2 } else { 1 };
                layers.push(cur.conv(&format!("d{s}.l{j}"), stride, 1, 1)?);
            }
            let logit = cur.conv(&format!("d{s}.logit"), 1, 1, 1)?;
            scales.push(DiscScale { layers, logit });
        }
        Ok(DiscParams { leaves, scales })
    }

    pub fn params(&self) -> Result<DiscParams> {
        self.assemble(self.store.materialize()?)
    }

    /// Evaluate every scale on an image/mask pair.
    pub fn discriminate(
        &self,
        p: &DiscParams,
        img: &Tensor,
        mask: &Tensor,
    ) -> Result<Vec<ScaleOutput>> {
        let (is, ms) = (img.shape(), mask.shape());
        if is.len() != 3 || is[0] != 1 || ms.len() != 3 || is[1..] != ms[1..] {
            return Err(Error::Shape {
                op: "discriminate",
                detail: format!("image {is:?} vs mask {ms:?}"),
            });
        }
        if 1 + ms[0] != self.in_channels {
            return Err(Error::Shape {
                op: "discriminate",
                detail: format!(
                    "1 image + {} mask channels vs discriminator input {}",
                    ms[0], self.in_channels
                ),
            });
        }
        let (h, w) = (is[1], is[2]);
        let shift = self.n_scales - 1;
        if (h >> shift) < 8 || (w >> shift) < 8 {
            return Err(Error::Config(format!(
                "{h}x{w} image is smaller than the coarsest of {} scales (needs at least {}x{})",
                self.n_scales,
                8 << shift,
                8 << shift
            )));
        }

        let mut img_s = img.clone();
        let mut mask_s = mask.clone();
        let mut out = Vec::with_capacity(self.n_scales);
        for (s, scale) in self.scales_of(p).iter().enumerate() {
            if s > 0 {
                img_s = img_s.avg_pool2d(2)?;
                mask_s = mask_s.avg_pool2d(2)?;
            }
            let mut cur = Tensor::concat_channels(&[&img_s, &mask_s])?;
            let mut feats = Vec::with_capacity(self.n_layers);
            for conv in &scale.layers {
                cur = conv.apply(&cur)?.leaky_relu(0.2);
                feats.push(cur.clone());
            }
            let logits = scale.logit.apply(&cur)?;
            out.push(ScaleOutput { logits, feats });
        }
        Ok(out)
    }

    fn scales_of<'a>(&self, p: &'a DiscParams) -> &'a [DiscScale] {
        &p.scales
    }
}

// ── Losses ───────────────────────────────────────────────────────────

/// Hinge adversarial losses, summed across scales:
/// `loss_D = mean(relu(1 - real)) + mean(relu(1 + fake))` per scale and
/// `loss_G = -mean(fake)` per scale. Returns `(loss_G, loss_D)`.
pub fn gan_losses(real_logits: &[Tensor], fake_logits: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if real_logits.is_empty() || real_logits.len() != fake_logits.len() {
        return Err(Error::Shape {
            op: "gan_losses",
            detail: format!(
                "{} real vs {} fake logit maps",
                real_logits.len(),
                fake_logits.len()
            ),
        });
    }
    let mut loss_g: Option<Tensor> = None;
    let mut loss_d: Option<Tensor> = None;
    for (r, f) in real_logits.iter().zip(fake_logits) {
        if r.shape() != f.shape() {
            return Err(Error::Shape {
                op: "gan_losses",
                detail: format!("{:?} vs {:?}", r.shape(), f.shape()),
            });
        }
        let g_s = f.mean().scale(-1.0);
        let d_s = r
            .scale(-1.0)
            .add_scalar(1.0)
            .relu()
            .mean()
            .add(&f.add_scalar(1.0).relu().mean())?;
        loss_g = Some(match loss_g {
            Some(acc) => acc.add(&g_s)?,
            None => g_s,
        });
        loss_d = Some(match loss_d {
            Some(acc) => acc.add(&d_s)?,
            None => d_s,
        });
    }
    Ok((loss_g.expect("nonempty"), loss_d.expect("nonempty")))
}

/// Mean absolute difference between real and generated feature maps,
/// summed over every scale's first `L_i - 1` layers. The `1/N_D`
/// prefactor is applied by [`compose_generator_loss`].
pub fn feature_matching_loss(real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Tensor> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::Shape {
            op: "feature_matching",
            detail: format!("{} real vs {} fake scales", real.len(), fake.len()),
        });
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        if r.feats.len() != f.feats.len() || r.feats.len() < 2 {
            return Err(Error::Shape {
                op: "feature_matching",
                detail: format!("{} vs {} feature maps", r.feats.len(), f.feats.len()),
            });
        }
        for (rf, ff) in r.feats.iter().zip(&f.feats).take(r.feats.len() - 1) {
            if rf.shape() != ff.shape() {
                return Err(Error::Shape {
                    op: "feature_matching",
                    detail: format!("{:?} vs {:?}", rf.shape(), ff.shape()),
                });
            }
            let term = rf.sub(ff)?.abs().mean();
            total = Some(match total {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("nonempty"))
}

/// Layer-weighted mean squared feature distance under the fixed seeded
/// feature extractor; each layer's weight is the mean squared channel
/// weight of the net (a positive frozen scalar).
pub fn perceptual_loss(real: &Tensor, fake: &Tensor, net: &PerceptualNet) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape {
            op: "perceptual_loss",
            detail: format!("{:?} vs {:?}", real.shape(), fake.shape()),
        });
    }
    let fr = net.features(real)?;
    let ff = net.features(fake)?;
    let mut total: Option<Tensor> = None;
    for ((r, f), wl) in fr.iter().zip(&ff).zip(&net.layer_w) {
        let wbar = wl.data().iter().map(|v| v * v).sum::<Real>() / wl.numel() as Real;
        let term = r.sub(f)?.powf(2.0).mean().scale(wbar);
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("net has layers"))
}

/// Scalar pieces of the generator objective.
pub struct GenLossParts {
    pub adv: Tensor,
    pub feature_match: Tensor,
    pub perceptual: Tensor,
    pub gtc: Tensor,
}

/// Composite generator objective:
/// `adv + (lambda_feat / N_D) * feature_match + lambda_perceptual * perceptual + lambda_gtc * gtc`.
pub fn compose_generator_loss(parts: &GenLossParts, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    parts
        .adv
        .add(&parts
            .feature_match
            .scale(cfg.lambda_feat / cfg.n_discriminators as Real))?
        .add(&parts.perceptual.scale(cfg.lambda_perceptual))?
        .add(&parts.gtc.scale(cfg.lambda_gtc))
}
