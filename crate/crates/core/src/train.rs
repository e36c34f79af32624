//! Training loop: alternating discriminator/generator Adam steps with
//! per-step seed derivation (no hidden RNG state), dataset folder I/O,
//! checkpoint save/resume, and paired evaluation on held-out volumes.
//!
//! Every random draw is keyed by `(base seed, tags…)` through
//! [`rng::derive`], so a resumed run at step `k` replays exactly the
//! draws the uninterrupted run would have made at step `k`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{Checkpoint, Section, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, PerceptualNet, SsimConfig};
use crate::model::{
    compose_generator_loss, feature_matching_loss, gan_losses, perceptual_loss, Discriminator,
    GenLossParts, Generator, ScaleOutput,
};
use crate::noise::make_noise_volume;
use crate::optim::Adam;
use crate::phantom::{one_hot, split_indices, PhantomSample};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::texture::gtc_loss;
use crate::volume;

/// Derivation tags separating the trainer's independent RNG streams.
const TAG_BATCH: u64 = 0xBA7C8;
const TAG_DISC: u64 = 0xD15C;
const TAG_EVAL: u64 = 0xEAA1;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

// ── Step log ─────────────────────────────────────────────────────────

/// Scalar loss record for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_g: Real,
    pub adv: Real,
    pub feature_match: Real,
    pub perceptual: Real,
    pub gtc: Real,
    pub loss_d: Real,
}

impl StepLog {
    pub fn tsv_header() -> &'static str {
        "step\tloss_g\tadv\tfeature_match\tperceptual\tgtc\tloss_d"
    }

    pub fn to_tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step,
            self.loss_g,
            self.adv,
            self.feature_match,
            self.perceptual,
            self.gtc,
            self.loss_d
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.loss_g,
            self.adv,
            self.feature_match,
            self.perceptual,
            self.gtc,
            self.loss_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ── Dataset folder I/O ───────────────────────────────────────────────

/// Labeled volumes grouped into the three standard splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PhantomSample>,
    pub val: Vec<PhantomSample>,
    pub test: Vec<PhantomSample>,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Split `samples` 70/15/15 by `seed` and write them under
/// `dir/{train,val,test}/{vol,mask}/NNNN.amgv`, plus a `manifest.tsv`
/// mapping each sample index to its split.
pub fn write_dataset(dir: &Path, samples: &[PhantomSample], seed: u64) -> Result<()> {
    let (tr, va, te) = split_indices(samples.len(), seed)?;
    let mut split_of = vec![""; samples.len()];
    for (name, ids) in SPLIT_NAMES.iter().zip([&tr, &va, &te]) {
        let vol_dir = dir.join(name).join("vol");
        let mask_dir = dir.join(name).join("mask");
        ensure_dir(&vol_dir)?;
        ensure_dir(&mask_dir)?;
        for &i in ids.iter() {
            split_of[i] = name;
            let stem = format!("{i:04}.amgv");
            let s = &samples[i];
            volume::write_volume_f64(&vol_dir.join(&stem), s.dims, &s.volume)?;
            volume::write_volume_u8(&mask_dir.join(&stem), s.dims, &s.mask)?;
        }
    }
    let mut manifest = String::from("index\tsplit\n");
    for (i, name) in split_of.iter().enumerate() {
        manifest.push_str(&format!("{i:04}\t{name}\n"));
    }
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))
}

/// Sorted stems of `*.amgv` files directly inside `dir`.
fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".amgv") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<PhantomSample>> {
    let vol_dir = dir.join(name).join("vol");
    let mask_dir = dir.join(name).join("mask");
    let vol_stems = list_stems(&vol_dir)?;
    let mask_stems = list_stems(&mask_dir)?;
    let vols: BTreeSet<&String> = vol_stems.iter().collect();
    let masks: BTreeSet<&String> = mask_stems.iter().collect();
    let unpaired: Vec<String> = vols
        .symmetric_difference(&masks)
        .map(|s| s.to_string())
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Config(format!(
            "dataset split '{name}' has unpaired entries: {}",
            unpaired.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(vol_stems.len());
    for stem in &vol_stems {
        let file = format!("{stem}.amgv");
        let (vdims, volume) = volume::read_volume_f64(&vol_dir.join(&file))?;
        let (mdims, mask) = volume::read_volume_u8(&mask_dir.join(&file))?;
        if vdims != mdims {
            return Err(Error::Config(format!(
                "dataset split '{name}' entry '{stem}': volume dims {vdims:?} vs mask dims {mdims:?}"
            )));
        }
        out.push(PhantomSample {
            dims: vdims,
            k_classes: 0, // patched by load_dataset once the global class count is known
            seed: 0,
            volume,
            mask,
        });
    }
    Ok(out)
}

/// Read a dataset folder written by [`write_dataset`] (or any tool
/// producing the same layout). The class count is the maximum label
/// over all splits plus one and is stamped onto every sample.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train = load_split(dir, "train")?;
    let val = load_split(dir, "val")?;
    let test = load_split(dir, "test")?;
    if train.is_empty() {
        return Err(Error::EmptyInput(format!(
            "dataset at '{}' has no training volumes",
            dir.display()
        )));
    }
    let max_label = train
        .iter()
        .chain(&val)
        .chain(&test)
        .flat_map(|s| s.mask.iter())
        .copied()
        .max()
        .unwrap_or(0);
    let k = max_label as usize + 1;
    if k < 2 {
        return Err(Error::Config(
            "dataset masks contain fewer than two classes".into(),
        ));
    }
    let stamp = |mut v: Vec<PhantomSample>| {
        for s in &mut v {
            s.k_classes = k;
        }
        v
    };
    Ok(Dataset {
        train: stamp(train),
        val: stamp(val),
        test: stamp(test),
    })
}

// ── Trainer ──────────────────────────────────────────────────────────

/// One sample's slices lifted to tensors: per-slice one-hot masks
/// `[K, H, W]` and real grayscale slices `[1, H, W]`.
struct Prepared {
    masks: Vec<Tensor>,
    reals: Vec<Tensor>,
}

/// Generator/discriminator pair with their optimizers and the frozen
/// feature extractor used for the perceptual term and evaluation.
pub struct Trainer {
    pub cfg: RunConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub percep: PerceptualNet,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let gen = Generator::new(cfg.gen.clone(), cfg.seed_model)?;
        let disc = Discriminator::new(
            1 + cfg.gen.k_classes,
            cfg.loss.n_discriminators,
            cfg.loss.n_disc_layers,
            cfg.loss.disc_width,
            rng::derive(cfg.seed_model, &[TAG_DISC]),
        )?;
        let adam_g = Adam::new(cfg.adam.clone(), &gen.store)?;
        let adam_d = Adam::new(cfg.adam.clone(), &disc.store)?;
        let percep = PerceptualNet::new(metrics::PERCEPTUAL_NET_SEED);
        Ok(Trainer {
            cfg,
            gen,
            disc,
            adam_g,
            adam_d,
            percep,
            step: 0,
        })
    }

    /// Total optimizer steps for this run: `epochs` passes over the
    /// training set when `epochs > 0`, else the fixed `steps` count.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        if self.cfg.epochs > 0 {
            (self.cfg.epochs * n_train.div_ceil(self.cfg.batch)) as u64
        } else {
            self.cfg.steps as u64
        }
    }

    fn prepare(&self, sample: &PhantomSample) -> Result<Prepared> {
        let (d, h, w) = sample.dims;
        let (ch, cw) = self.cfg.gen.image_hw;
        let k = self.cfg.gen.k_classes;
        if (h, w) != (ch, cw) {
            return Err(Error::Config(format!(
                "sample slices are {h}x{w} but the model expects {ch}x{cw}"
            )));
        }
        if d != self.cfg.gen.n_slices {
            return Err(Error::Config(format!(
                "sample has {d} slices but the model expects {}",
                self.cfg.gen.n_slices
            )));
        }
        let mut masks = Vec::with_capacity(d);
        let mut reals = Vec::with_capacity(d);
        for z in 0..d {
            masks.push(one_hot(sample.slice_mask(z), k, h, w)?);
            reals.push(Tensor::constant(
                sample.slice_volume(z).to_vec(),
                vec![1, h, w],
            )?);
        }
        Ok(Prepared { masks, reals })
    }

    /// One alternating update: discriminator step on detached generator
    /// outputs, then generator step against the refreshed discriminator.
    pub fn train_step(&mut self, train: &[PhantomSample]) -> Result<StepLog> {
        if train.is_empty() {
            return Err(Error::EmptyInput("no training volumes".into()));
        }
        let s = self.step;
        let n = self.cfg.gen.n_slices;
        let (h, w) = self.cfg.gen.image_hw;
        let (h4, w4) = self.cfg.gen.quarter_hw();

        let mut batch_rng = rng::seeded(rng::derive(self.cfg.seed_data, &[TAG_BATCH, s]));
        let picks: Vec<usize> = (0..self.cfg.batch)
            .map(|_| batch_rng.gen_range(0..train.len()))
            .collect();

        // One generator forward per sample; the graph is reused by both
        // phases (detached for the discriminator, live for the generator).
        let gp = self.gen.params()?;
        let mut preps = Vec::with_capacity(picks.len());
        let mut fakes_all = Vec::with_capacity(picks.len());
        for (slot, &idx) in picks.iter().enumerate() {
            let prep = self.prepare(&train[idx])?;
            let z3 = if self.cfg.gen.enable_noise {
                Some(make_noise_volume(
                    (n, h4, w4),
                    rng::derive(self.cfg.seed_noise, &[s, slot as u64]),
                    self.cfg.noise_sigma,
                )?)
            } else {
                None
            };
            let fakes = self.gen.generate(&gp, &prep.masks, z3.as_ref())?;
            preps.push(prep);
            fakes_all.push(fakes);
        }
        let n_terms = (picks.len() * n) as Real;

        // Discriminator phase.
        let dp = self.disc.params()?;
        let mut d_acc: Option<Tensor> = None;
        for (prep, fakes) in preps.iter().zip(&fakes_all) {
            for z in 0..n {
                let real_outs = self.disc.discriminate(&dp, &prep.reals[z], &prep.masks[z])?;
                let fake_outs =
                    self.disc
                        .discriminate(&dp, &fakes[z].detach(), &prep.masks[z])?;
                let rl: Vec<Tensor> = real_outs.iter().map(|o| o.logits.clone()).collect();
                let fl: Vec<Tensor> = fake_outs.iter().map(|o| o.logits.clone()).collect();
                let (_, d_s) = gan_losses(&rl, &fl)?;
                d_acc = Some(match d_acc {
                    Some(acc) => acc.add(&d_s)?,
                    None => d_s,
                });
            }
        }
        let loss_d_t = d_acc.expect("nonempty batch").scale(1.0 / n_terms);
        let loss_d = loss_d_t.value();
        if !loss_d.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite discriminator loss {loss_d} at step {s}"
            )));
        }
        loss_d_t.backward()?;
        let d_grads: Vec<Option<Vec<Real>>> = dp.leaves.iter().map(Tensor::grad).collect();
        self.adam_d.apply(&mut self.disc.store, &d_grads)?;

        // Generator phase, against the updated discriminator.
        let dp2 = self.disc.params()?;
        let mut adv_acc: Option<Tensor> = None;
        let mut fm_acc: Option<Tensor> = None;
        let mut perc_acc: Option<Tensor> = None;
        let mut gtc_acc: Option<Tensor> = None;
        let push = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&t)?,
                None => t,
            });
            Ok(())
        };
        for (prep, fakes) in preps.iter().zip(&fakes_all) {
            for z in 0..n {
                let real_outs = self.disc.discriminate(&dp2, &prep.reals[z], &prep.masks[z])?;
                let real_det: Vec<ScaleOutput> = real_outs
                    .iter()
                    .map(|o| ScaleOutput {
                        logits: o.logits.detach(),
                        feats: o.feats.iter().map(Tensor::detach).collect(),
                    })
                    .collect();
                let fake_outs = self.disc.discriminate(&dp2, &fakes[z], &prep.masks[z])?;
                let rl: Vec<Tensor> = real_det.iter().map(|o| o.logits.clone()).collect();
                let fl: Vec<Tensor> = fake_outs.iter().map(|o| o.logits.clone()).collect();
                let (g_s, _) = gan_losses(&rl, &fl)?;
                push(&mut adv_acc, g_s)?;
                push(&mut fm_acc, feature_matching_loss(&real_det, &fake_outs)?)?;
                let real_hw = prep.reals[z].reshape(&[h, w])?;
                let fake_hw = fakes[z].reshape(&[h, w])?;
                push(
                    &mut perc_acc,
                    perceptual_loss(&real_hw, &fake_hw, &self.percep)?,
                )?;
                if self.cfg.enable_gtc {
                    push(
                        &mut gtc_acc,
                        gtc_loss(&real_hw, &fake_hw, &prep.masks[z], &self.cfg.gtc)?,
                    )?;
                }
            }
        }
        let inv = 1.0 / n_terms;
        let parts = GenLossParts {
            adv: adv_acc.expect("nonempty").scale(inv),
            feature_match: fm_acc.expect("nonempty").scale(inv),
            perceptual: perc_acc.expect("nonempty").scale(inv),
            gtc: match gtc_acc {
                Some(t) => t.scale(inv),
                None => Tensor::zeros(&[1]),
            },
        };
        let total = compose_generator_loss(&parts, &self.cfg.loss)?;
        let log = StepLog {
            step: s,
            loss_g: total.value(),
            adv: parts.adv.value(),
            feature_match: parts.feature_match.value(),
            perceptual: parts.perceptual.value(),
            gtc: parts.gtc.value(),
            loss_d,
        };
        if !log.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite generator loss {} at step {s}",
                log.loss_g
            )));
        }
        total.backward()?;
        let g_grads: Vec<Option<Vec<Real>>> = gp.leaves.iter().map(Tensor::grad).collect();
        self.adam_g.apply(&mut self.gen.store, &g_grads)?;

        self.step += 1;
        Ok(log)
    }

    /// Paired metrics on held-out samples: each slice is generated from
    /// its mask (noise keyed by sample index, independent of the training
    /// step) and compared against the real slice.
    pub fn evaluate(&self, samples: &[PhantomSample]) -> Result<MetricsReport> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("no volumes to evaluate".into()));
        }
        let gp = self.gen.params()?;
        let n = self.cfg.gen.n_slices;
        let (h, w) = self.cfg.gen.image_hw;
        let (h4, w4) = self.cfg.gen.quarter_hw();
        let mut reals = Vec::new();
        let mut fakes = Vec::new();
        for (i, sample) in samples.iter().enumerate() {
            let prep = self.prepare(sample)?;
            let z3 = if self.cfg.gen.enable_noise {
                Some(make_noise_volume(
                    (n, h4, w4),
                    rng::derive(self.cfg.seed_noise, &[TAG_EVAL, i as u64]),
                    self.cfg.noise_sigma,
                )?)
            } else {
                None
            };
            let outs = self.gen.generate(&gp, &prep.masks, z3.as_ref())?;
            for z in 0..n {
                reals.push(prep.reals[z].reshape(&[h, w])?);
                fakes.push(outs[z].reshape(&[h, w])?.detach());
            }
        }
        metrics::evaluate_pairs(&reals, &fakes, &self.percep, &SsimConfig::default())
    }

    /// Snapshot of everything a resumed run needs.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_text: self.cfg.to_text(),
            step: self.step,
            gen: Section {
                store: self.gen.store.clone(),
                adam_t: self.adam_g.t,
                m: self.adam_g.m.clone(),
                v: self.adam_g.v.clone(),
            },
            disc: Section {
                store: self.disc.store.clone(),
                adam_t: self.adam_d.t,
                m: self.adam_d.m.clone(),
                v: self.adam_d.v.clone(),
            },
        }
    }

    /// Rebuild a trainer from a checkpoint; continuing from here is
    /// bit-identical to never having stopped (64-bit precision).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Trainer> {
        let cfg = RunConfig::parse(&ckpt.config_text)?;
        let gen = Generator::from_store(cfg.gen.clone(), ckpt.gen.store.clone())?;
        let disc = Discriminator::from_store(
            1 + cfg.gen.k_classes,
            cfg.loss.n_discriminators,
            cfg.loss.n_disc_layers,
            cfg.loss.disc_width,
            ckpt.disc.store.clone(),
        )?;
        let adam_g = Adam::from_state(
            cfg.adam.clone(),
            &gen.store,
            ckpt.gen.adam_t,
            ckpt.gen.m.clone(),
            ckpt.gen.v.clone(),
        )?;
        let adam_d = Adam::from_state(
            cfg.adam.clone(),
            &disc.store,
            ckpt.disc.adam_t,
            ckpt.disc.m.clone(),
            ckpt.disc.v.clone(),
        )?;
        let percep = PerceptualNet::new(metrics::PERCEPTUAL_NET_SEED);
        Ok(Trainer {
            cfg,
            gen,
            disc,
            adam_g,
            adam_d,
            percep,
            step: ckpt.step,
        })
    }
}
