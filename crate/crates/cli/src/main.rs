//! Command-line front end: synthetic dataset generation, training,
//! mask-to-volume inference, paired evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use maskvol::checkpoint;
use maskvol::config::RunConfig;
use maskvol::error::{Error, Result};
use maskvol::gradcheck;
use maskvol::metrics::{self, PerceptualNet, SsimConfig};
use maskvol::model::Generator;
use maskvol::noise::make_noise_volume;
use maskvol::phantom::{generate_phantom, one_hot};
use maskvol::rng;
use maskvol::tensor::{self, Tensor};
use maskvol::train::{self, Trainer};
use maskvol::volume;

#[derive(Parser)]
#[command(
    name = "maskvol",
    version,
    about = "Mask-conditioned grayscale volume synthesis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled dataset, split 70/15/15
    Phantom {
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Number of volumes to generate (>= 7 so every split is non-empty)
        #[arg(long)]
        count: usize,
        /// Volume dimensions as depth,height,width
        #[arg(long, value_parser = parse_dims, default_value = "4,32,32")]
        dims: (usize, usize, usize),
        /// Number of label classes including background
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Base seed for geometry and the split shuffle
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train on a dataset directory, logging losses and checkpoints
    Train {
        /// Plain-text key=value run configuration
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (layout: {train,val,test}/{vol,mask}/NNNN.amgv)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for loss_log.tsv and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by a previous identical run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate grayscale volumes from mask volumes with a trained model
    Generate {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of mask volumes (*.amgv, 8-bit labels)
        #[arg(long)]
        masks: PathBuf,
        /// Output directory for volumes and per-slice PGM previews
        #[arg(long)]
        out: PathBuf,
        /// Seed for the per-volume noise fields
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Compare paired volume directories and write a metrics report
    Evaluate {
        /// Directory of reference volumes (*.amgv, f64)
        #[arg(long)]
        real: PathBuf,
        /// Directory of generated volumes paired by filename
        #[arg(long)]
        fake: PathBuf,
        /// Output TSV report path
        #[arg(long)]
        report: PathBuf,
    },
    /// Run finite-difference gradient checks
    Gradcheck {
        /// Suite to run: sif, noise, gtc, or model
        #[arg(long)]
        module: String,
        /// Seed for the check fixtures
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected depth,height,width, got '{s}'"));
    }
    let mut vals = [0usize; 3];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("invalid dimension '{part}'"))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric(_) | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Phantom {
            out,
            count,
            dims,
            classes,
            seed,
        } => cmd_phantom(&out, count, dims, classes, seed),
        Cmd::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, &data, &out, resume.as_deref()),
        Cmd::Generate {
            ckpt,
            masks,
            out,
            noise_seed,
        } => cmd_generate(&ckpt, &masks, &out, noise_seed),
        Cmd::Evaluate { real, fake, report } => cmd_evaluate(&real, &fake, &report),
        Cmd::Gradcheck { module, seed } => cmd_gradcheck(&module, seed),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

/// Sorted stems of `*.amgv` files directly inside `dir`.
fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".amgv") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

// ── phantom ──────────────────────────────────────────────────────────

fn cmd_phantom(
    out: &Path,
    count: usize,
    dims: (usize, usize, usize),
    classes: usize,
    seed: u64,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let samples = (0..count)
        .map(|i| generate_phantom(rng::derive(seed, &[0x7068, i as u64]), dims, classes))
        .collect::<Result<Vec<_>>>()?;
    train::write_dataset(out, &samples, seed)?;
    println!(
        "wrote {count} labeled volumes ({}x{}x{}, {classes} classes) under {}",
        dims.0,
        dims.1,
        dims.2,
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| io_err(config, e))?;
    let cfg = RunConfig::parse(&text)?;
    tensor::set_precision(cfg.precision);

    let ds = train::load_dataset(data)?;
    if ds.train[0].k_classes != cfg.gen.k_classes {
        return Err(Error::Config(format!(
            "dataset has {} label classes but the config expects {}",
            ds.train[0].k_classes, cfg.gen.k_classes
        )));
    }

    let mut trainer = match resume {
        Some(ckpt_path) => {
            let ckpt = checkpoint::read_checkpoint(ckpt_path)?;
            let embedded = RunConfig::parse(&ckpt.config_text)?;
            if embedded != cfg {
                return Err(Error::Config(
                    "checkpoint was written with a different configuration; \
                     pass the matching --config file"
                        .into(),
                ));
            }
            Trainer::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(cfg.clone())?,
    };

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let log_path = out.join("loss_log.tsv");
    let fresh_log = resume.is_none() || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if fresh_log {
        writeln!(log, "{}", train::StepLog::tsv_header()).map_err(|e| io_err(&log_path, e))?;
    }

    let total = trainer.total_steps(ds.train.len());
    println!(
        "training to step {total} on {} volumes ({} resumed)",
        ds.train.len(),
        if resume.is_some() {
            format!("from step {}", trainer.step)
        } else {
            "not".into()
        }
    );
    while trainer.step < total {
        let row = trainer.train_step(&ds.train)?;
        writeln!(log, "{}", row.to_tsv_row()).map_err(|e| io_err(&log_path, e))?;
        println!("{}", row.to_tsv_row());
        if trainer.step % cfg.checkpoint_every as u64 == 0 && trainer.step < total {
            let path = out.join(format!("ckpt_{:06}.amgc", trainer.step));
            checkpoint::write_checkpoint(&path, &trainer.to_checkpoint())?;
        }
    }
    let final_path = out.join("ckpt_final.amgc");
    checkpoint::write_checkpoint(&final_path, &trainer.to_checkpoint())?;

    if !ds.val.is_empty() {
        let report = trainer.evaluate(&ds.val)?;
        println!(
            "val mean: psnr {:.4} dB, ssim {:.6}, lpips {:.6}",
            report.mean.psnr_db, report.mean.ssim, report.mean.lpips
        );
    }
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

// ── generate ─────────────────────────────────────────────────────────

fn cmd_generate(ckpt_path: &Path, masks_dir: &Path, out: &Path, noise_seed: u64) -> Result<()> {
    let ckpt = checkpoint::read_checkpoint(ckpt_path)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    tensor::set_precision(cfg.precision);
    let gen = Generator::from_store(cfg.gen.clone(), ckpt.gen.store.clone())?;
    let gp = gen.params()?;

    let stems = list_stems(masks_dir)?;
    if stems.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no mask volumes (*.amgv) in {}",
            masks_dir.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let (ih, iw) = cfg.gen.image_hw;
    let k = cfg.gen.k_classes;
    for (idx, stem) in stems.iter().enumerate() {
        let path = masks_dir.join(format!("{stem}.amgv"));
        let ((d, h, w), labels) = volume::read_volume_u8(&path)?;
        if (h, w) != (ih, iw) || d != cfg.gen.n_slices {
            return Err(Error::Config(format!(
                "mask '{stem}' is {d}x{h}x{w} but the model expects {}x{ih}x{iw}",
                cfg.gen.n_slices
            )));
        }
        let max_label = labels.iter().copied().max().unwrap_or(0) as usize;
        if max_label >= k {
            return Err(Error::Config(format!(
                "mask '{stem}' uses class {max_label} but the model has {k} classes"
            )));
        }
        let masks = (0..d)
            .map(|z| one_hot(&labels[z * h * w..(z + 1) * h * w], k, h, w))
            .collect::<Result<Vec<_>>>()?;
        let z3 = if cfg.gen.enable_noise {
            Some(make_noise_volume(
                (d, h / 4, w / 4),
                rng::derive(noise_seed, &[idx as u64]),
                cfg.noise_sigma,
            )?)
        } else {
            None
        };
        let outs = gen.generate(&gp, &masks, z3.as_ref())?;
        let mut data = Vec::with_capacity(d * h * w);
        for (z, slice) in outs.iter().enumerate() {
            data.extend_from_slice(slice.data());
            volume::write_pgm(
                &out.join(format!("{stem}_z{z:03}.pgm")),
                h,
                w,
                slice.data(),
            )?;
        }
        volume::write_volume_f64(&out.join(format!("{stem}.amgv")), (d, h, w), &data)?;
    }
    println!(
        "generated {} volumes under {}",
        stems.len(),
        out.display()
    );
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

fn cmd_evaluate(real_dir: &Path, fake_dir: &Path, report_path: &Path) -> Result<()> {
    let real_stems = list_stems(real_dir)?;
    let fake_stems = list_stems(fake_dir)?;
    let reals: std::collections::BTreeSet<&String> = real_stems.iter().collect();
    let fakes: std::collections::BTreeSet<&String> = fake_stems.iter().collect();
    let mut unpaired: Vec<String> = Vec::new();
    for only_real in reals.difference(&fakes) {
        unpaired.push(format!("{only_real}.amgv (missing from {})", fake_dir.display()));
    }
    for only_fake in fakes.difference(&reals) {
        unpaired.push(format!("{only_fake}.amgv (missing from {})", real_dir.display()));
    }
    if !unpaired.is_empty() {
        return Err(Error::Config(format!(
            "unpaired volumes: {}",
            unpaired.join(", ")
        )));
    }
    if real_stems.is_empty() {
        return Err(Error::EmptyInput("no volume pairs to evaluate".into()));
    }

    let mut real_slices = Vec::new();
    let mut fake_slices = Vec::new();
    for stem in &real_stems {
        let file = format!("{stem}.amgv");
        let (rd, rv) = volume::read_volume_f64(&real_dir.join(&file))?;
        let (fd, fv) = volume::read_volume_f64(&fake_dir.join(&file))?;
        if rd != fd {
            return Err(Error::Config(format!(
                "pair '{stem}' has mismatched dims: {rd:?} vs {fd:?}"
            )));
        }
        let (d, h, w) = rd;
        for z in 0..d {
            let lo = z * h * w;
            let hi = lo + h * w;
            real_slices.push(Tensor::constant(rv[lo..hi].to_vec(), vec![h, w])?);
            fake_slices.push(Tensor::constant(fv[lo..hi].to_vec(), vec![h, w])?);
        }
    }

    let net = PerceptualNet::new(metrics::PERCEPTUAL_NET_SEED);
    let report = metrics::evaluate_pairs(&real_slices, &fake_slices, &net, &SsimConfig::default())?;
    fs::write(report_path, report.to_tsv()).map_err(|e| io_err(report_path, e))?;
    println!(
        "{} slice pairs: mean psnr {:.4} dB, ssim {:.6}, lpips {:.6} -> {}",
        report.per_pair.len(),
        report.mean.psnr_db,
        report.mean.ssim,
        report.mean.lpips,
        report_path.display()
    );
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

fn cmd_gradcheck(module: &str, seed: u64) -> Result<()> {
    let results = gradcheck::run_suite(module, seed)?;
    let mut first_fail: Option<&gradcheck::CheckResult> = None;
    for r in &results {
        println!(
            "{:<32} max_rel {:>10.3e}  threshold {:.0e}  {}",
            r.name,
            r.max_rel,
            r.threshold,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() && first_fail.is_none() {
            first_fail = Some(r);
        }
    }
    match first_fail {
        Some(r) => Err(Error::Numeric(format!(
            "gradient check failed: {} (max relative error {:.3e} >= {:.0e})",
            r.name, r.max_rel, r.threshold
        ))),
        None => {
            println!("all {} checks passed", results.len());
            Ok(())
        }
    }
}
