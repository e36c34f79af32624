//! End-to-end acceptance suite: ten numbered criteria covering gradient
//! integrity, metric oracles, gating and injection contracts, texture
//! statistics, aggregation geometry, training behavior, output
//! diversity, determinism, and on-disk format robustness.
//!
//! Each test prints exactly one `criterion NN: PASS/FAIL` line; every
//! numeric bound is pinned inline next to the check it guards.

use std::fs;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use maskvol::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use maskvol::config::RunConfig;
use maskvol::error::Error;
use maskvol::fusion::{
    build_adjacency, edge_attention, msa_channel_plan, multi_scale_aggregate, sif_modulate, Delta,
    MsaWeights, SifParams, DEFAULT_DENSE_BUDGET,
};
use maskvol::gradcheck;
use maskvol::metrics::{
    lpips_lite, psnr, ssim, PerceptualNet, SsimConfig, SsimWindow, PERCEPTUAL_NET_SEED,
};
use maskvol::noise::{inject, make_noise_volume, InjectionParams, NoiseVolume};
use maskvol::phantom::{generate_phantom, one_hot, split_dataset, PhantomSample};
use maskvol::rng;
use maskvol::tensor::{Real, Tensor};
use maskvol::texture::{gray_score, gtc_loss, texture_score, GtcConfig};
use maskvol::train::{StepLog, Trainer};
use maskvol::volume::{read_volume_f64, read_volume_u8, write_volume_f64, write_volume_u8};

// ── Reporting helpers ────────────────────────────────────────────────

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn finish(number: u32, failures: Vec<String>) {
    if failures.is_empty() {
        println!("criterion {number:02}: PASS");
    } else {
        println!("criterion {number:02}: FAIL - {}", failures.join("; "));
    }
    assert!(
        failures.is_empty(),
        "criterion {number:02} failed: {}",
        failures.join("; ")
    );
}

fn normal_tensor(rng: &mut rng::Prng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::constant(rng::normal_vec(rng, n), shape).unwrap()
}

// ── Criterion 1: analytic gradients match finite differences ─────────

#[test]
fn criterion_01_gradient_suites_pass_within_the_time_budget() {
    let mut failures = Vec::new();
    let t0 = Instant::now();
    for module in ["sif", "noise", "gtc", "model"] {
        let results = gradcheck::run_suite(module, 7).unwrap();
        check(&mut failures, !results.is_empty(), || {
            format!("{module}: empty suite")
        });
        for r in &results {
            check(&mut failures, r.passed(), || {
                format!(
                    "{module}/{}: max_rel {:.3e} >= {:.0e}",
                    r.name, r.max_rel, r.threshold
                )
            });
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 300.0, || {
        format!("gradient suites took {secs:.0}s, budget 300s")
    });
    finish(1, failures);
}

// ── Criterion 2: image-metric oracles ────────────────────────────────

#[test]
fn criterion_02_metric_oracles_hit_pinned_values() {
    let mut failures = Vec::new();

    // An image offset by exactly +1 everywhere has MSE 1, so the peak
    // ratio depends only on the dynamic range: 20*log10(255).
    let mut r = rng::seeded(0x5EED);
    let base: Vec<Real> = (0..256).map(|_| r.gen_range(0.0..254.0)).collect();
    let x = Tensor::constant(base.clone(), vec![16, 16]).unwrap();
    let y = Tensor::constant(base.iter().map(|v| v + 1.0).collect(), vec![16, 16]).unwrap();
    let got = psnr(&x, &y, 255.0).unwrap();
    let want = 48.130_803_608_679_1;
    check(&mut failures, (got - want).abs() <= 1e-3, || {
        format!("psnr(+1 offset) {got:.10} != {want} +- 1e-3")
    });

    // Constant pair (100, 50) at range 255: zero variances collapse the
    // structural factor to 1, leaving the luminance ratio.
    let a = Tensor::constant(vec![100.0; 256], vec![16, 16]).unwrap();
    let b = Tensor::constant(vec![50.0; 256], vec![16, 16]).unwrap();
    let cfg255 = SsimConfig {
        max_val: 255.0,
        window: SsimWindow::NonOverlap8,
    };
    let got = ssim(&a, &b, &cfg255).unwrap();
    let c1 = (0.01 * 255.0) * (0.01 * 255.0);
    let want = (2.0 * 100.0 * 50.0 + c1) / (100.0 * 100.0 + 50.0 * 50.0 + c1);
    check(&mut failures, (got - want).abs() <= 1e-5, || {
        format!("ssim(100,50) {got:.10} != {want:.10} +- 1e-5")
    });

    // Self-similarity is exact, not merely close.
    let img: Vec<Real> = (0..256).map(|_| r.gen_range(0.0..1.0)).collect();
    let z = Tensor::constant(img, vec![16, 16]).unwrap();
    let got = ssim(&z, &z, &SsimConfig::default()).unwrap();
    check(&mut failures, got == 1.0, || {
        format!("ssim(x,x) = {got:.17}, expected exactly 1.0")
    });
    let net = PerceptualNet::new(PERCEPTUAL_NET_SEED);
    let got = lpips_lite(&z, &z, &net).unwrap();
    check(&mut failures, got == 0.0, || {
        format!("feature distance d(x,x) = {got:.3e}, expected exactly 0.0")
    });

    finish(2, failures);
}

// ── Criterion 3: gate behavior of the slice-fusion attention ─────────

#[test]
fn criterion_03_attention_gate_is_half_at_zero_and_always_open() {
    let mut failures = Vec::new();
    let (n_nodes, c, h, w, n_hidden) = (4, 3, 2, 2, 4);
    let adj = build_adjacency(3, 1, 1.0).unwrap();

    // All-zero parameters leave the sigmoid at exactly 1/2, so the
    // modulated features are exactly half the input (multiplication by
    // 0.5 is lossless in binary floating point).
    let p0 = SifParams::zeros(n_nodes, c, h, w, n_hidden, Delta::Relu, DEFAULT_DENSE_BUDGET)
        .unwrap();
    let att = edge_attention(&adj, &p0).unwrap();
    check(&mut failures, att.data().iter().all(|&v| v == 0.5), || {
        "zero-parameter attention is not exactly 0.5 everywhere".into()
    });
    let mut r = rng::seeded(0x3A7E);
    let x = normal_tensor(&mut r, vec![c, h, w]);
    let y = sif_modulate(&x, &att).unwrap();
    let halved = x
        .data()
        .iter()
        .zip(y.data())
        .all(|(&xi, &yi)| yi == 0.5 * xi);
    check(&mut failures, halved, || {
        "modulation by the 0.5 gate is not exactly half the input".into()
    });

    // Randomly drawn gate parameters must keep every attention value
    // strictly inside (0, 1): the gate can attenuate but never zero out
    // or saturate a feature.
    for i in 0..100 {
        let p = SifParams::random(
            &mut r,
            0.5,
            n_nodes,
            c,
            h,
            w,
            n_hidden,
            Delta::Relu,
            DEFAULT_DENSE_BUDGET,
        )
        .unwrap();
        let att = edge_attention(&adj, &p).unwrap();
        let strict = att.data().iter().all(|&v| v > 0.0 && v < 1.0);
        check(&mut failures, strict, || {
            format!("draw {i}: attention left the open interval (0,1)")
        });
    }
    finish(3, failures);
}

// ── Criterion 4: noise injection identity and field smoothness ───────

fn z_lag_correlation(v: &NoiseVolume, lag: usize) -> Real {
    let (d, h, w) = v.dims();
    assert!(lag < d);
    let n = h * w;
    let vals = v.values();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for z in 0..d - lag {
        xs.extend_from_slice(&vals[z * n..(z + 1) * n]);
        ys.extend_from_slice(&vals[(z + lag) * n..(z + lag + 1) * n]);
    }
    let m = xs.len() as Real;
    let mx = xs.iter().sum::<Real>() / m;
    let my = ys.iter().sum::<Real>() / m;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in xs.iter().zip(&ys) {
        num += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    num / (vx.sqrt() * vy.sqrt())
}

#[test]
fn criterion_04_injection_identity_and_field_correlation() {
    let mut failures = Vec::new();

    // Zero parameters with the residual path off: the gate sits at 1/2,
    // so the output is exactly h + 0.5 z (z broadcast over channels).
    let (c, h, w) = (4, 6, 5);
    let p = InjectionParams::zeros(c, h, w, 0.0, 1.0).unwrap();
    let mut r = rng::seeded(0x1D0);
    let hmap = normal_tensor(&mut r, vec![c, h, w]);
    let z = normal_tensor(&mut r, vec![h, w]);
    let out = inject(&hmap, &z, &p).unwrap();
    let mut exact = true;
    for ch in 0..c {
        for i in 0..h * w {
            let want = hmap.data()[ch * h * w + i] + 0.5 * z.data()[i];
            if out.data()[ch * h * w + i] != want {
                exact = false;
            }
        }
    }
    check(&mut failures, exact, || {
        "zero-parameter injection is not exactly h + 0.5 z".into()
    });

    // A smoothed field must correlate strongly at lag 1 along z and
    // decay by lag 8 (kernel radius ceil(3*2) = 6 < 8).
    let vol = make_noise_volume((64, 64, 64), 0xC0FFEE, 2.0).unwrap();
    let lag1 = z_lag_correlation(&vol, 1);
    let lag8 = z_lag_correlation(&vol, 8);
    check(&mut failures, lag1 > 0.5, || {
        format!("lag-1 correlation {lag1:.4} <= 0.5")
    });
    check(&mut failures, lag8 < 0.1, || {
        format!("lag-8 correlation {lag8:.4} >= 0.1")
    });
    finish(4, failures);
}

// ── Criterion 5: texture and grayscale statistics ────────────────────

#[test]
fn criterion_05_texture_scores_match_closed_forms() {
    let mut failures = Vec::new();
    let cfg = GtcConfig::default();

    // Constant image: every gradient product is exactly zero, so the
    // region integral is epsilon * |region| and the score is the sum of
    // its powers. Only summation-order rounding separates the two sides.
    let (h, w) = (16, 16);
    let img = Tensor::constant(vec![0.3; h * w], vec![h, w]).unwrap();
    let mask = Tensor::constant(vec![1.0; h * w], vec![1, h, w]).unwrap();
    let got = texture_score(&img, &mask, &cfg).unwrap();
    let omega = (h * w) as Real;
    let want: Real = cfg
        .alpha
        .iter()
        .map(|&a| (cfg.epsilon * omega).powf(a))
        .sum();
    let rel = ((got - want) / want).abs();
    check(&mut failures, rel <= 1e-12, || {
        format!("constant-image texture score {got:.17e} vs {want:.17e} (rel {rel:.2e})")
    });

    // Hand-computed 2x2 grayscale statistic.
    let img = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let mask = Tensor::constant(vec![1.0; 4], vec![1, 2, 2]).unwrap();
    let gcfg = GtcConfig {
        n_scales: 1,
        beta: vec![1.0],
        ..GtcConfig::default()
    };
    let got = gray_score(&img, &mask, &gcfg).unwrap();
    let want = 2.795_085;
    check(&mut failures, (got - want).abs() <= 1e-5, || {
        format!("2x2 grayscale score {got:.12} != {want} +- 1e-5")
    });

    // Identical images: both score differences vanish exactly.
    let mut r = rng::seeded(0x6A6A);
    let vals: Vec<Real> = (0..h * w).map(|_| r.gen_range(0.15..0.85)).collect();
    let a = Tensor::constant(vals, vec![h, w]).unwrap();
    let half: Vec<Real> = (0..h * w)
        .map(|i| if (i / w + i % w) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    let other: Vec<Real> = half.iter().map(|v| 1.0 - v).collect();
    let masks =
        Tensor::constant([half, other].concat(), vec![2, h, w]).unwrap();
    let loss = gtc_loss(&a, &a, &masks, &cfg).unwrap();
    check(&mut failures, loss.data() == [0.0], || {
        format!("self texture loss {:?} != [0.0]", loss.data())
    });

    finish(5, failures);
}

// ── Criterion 6: aggregation widths and slice adjacency ──────────────

#[test]
fn criterion_06_aggregation_plan_and_adjacency_are_exact() {
    let mut failures = Vec::new();

    let plan = msa_channel_plan(8).unwrap();
    check(&mut failures, plan == (12, 14, 15, 8), || {
        format!("channel plan for width 8 is {plan:?}, expected (12, 14, 15, 8)")
    });

    // Spatial dimensions survive the dilated-branch stack.
    let mut r = rng::seeded(0x21);
    let wts = MsaWeights::random(&mut r, 0.3, 8).unwrap();
    let xe = normal_tensor(&mut r, vec![8, 5, 7]);
    let yd = normal_tensor(&mut r, vec![8, 5, 7]);
    let out = multi_scale_aggregate(&xe, &yd, &wts).unwrap();
    check(&mut failures, out.shape() == [8, 5, 7], || {
        format!("aggregate output shape {:?}, expected [8, 5, 7]", out.shape())
    });

    // Three slices, radius 1, tau 1: exp(-1) on the immediate
    // off-diagonals, zero beyond the radius, uniform 1/3 coupling to
    // the global node, unit diagonal.
    let adj = build_adjacency(3, 1, 1.0).unwrap();
    let e1 = (-1.0 as Real).exp();
    let g = 1.0 / 3.0;
    #[rustfmt::skip]
    let want = [
        1.0, e1, 0.0, g,
        e1, 1.0, e1, g,
        0.0, e1, 1.0, g,
        g, g, g, 1.0,
    ];
    check(&mut failures, adj.flat() == want, || {
        format!("adjacency {:?} != expected hand matrix", adj.flat())
    });

    finish(6, failures);
}

// ── Criteria 7 and 8: the training ladder ────────────────────────────

const LADDER_STEPS: usize = 200;
const LADDER_SECONDS_BUDGET: f64 = 1800.0;

struct LadderRun {
    name: &'static str,
    logs: Vec<StepLog>,
    seconds: f64,
}

struct Ladder {
    runs: Vec<LadderRun>,
    untrained_val_psnr: Real,
    trained_val_psnr: Real,
    /// Trained full-variant state; plain data so the ladder can be
    /// shared across test threads (live graphs are thread-local).
    full: Checkpoint,
    val: Vec<PhantomSample>,
}

fn ladder_cfg(enable_sif: bool, enable_noise: bool, enable_gtc: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gen.enable_sif = enable_sif;
    cfg.gen.enable_noise = enable_noise;
    cfg.enable_gtc = enable_gtc;
    cfg.steps = LADDER_STEPS;
    // The production default rate (2e-4) is sized for long runs; a
    // 200-step smoke run needs a faster rate to show measurable gains,
    // and averaging each update over two volumes steadies it.
    cfg.adam.lr = 0.01;
    cfg.batch = 2;
    cfg
}

fn ladder() -> &'static Ladder {
    static LADDER: OnceLock<Ladder> = OnceLock::new();
    LADDER.get_or_init(|| {
        let samples: Vec<PhantomSample> = (0..8)
            .map(|i| generate_phantom(rng::derive(0xACCE, &[i]), (4, 32, 32), 3).unwrap())
            .collect();
        let (train, val, _test) = split_dataset(&samples, 4242).unwrap();
        assert!(!train.is_empty() && !val.is_empty());

        let variants: [(&'static str, bool, bool, bool); 4] = [
            ("baseline", false, false, false),
            ("fusion", true, false, false),
            ("fusion+noise", true, true, false),
            ("full", true, true, true),
        ];
        let mut runs = Vec::new();
        let mut untrained_val_psnr = 0.0;
        let mut trained_val_psnr = 0.0;
        let mut full = None;
        for (name, s, n, g) in variants {
            let mut tr = Trainer::new(ladder_cfg(s, n, g)).unwrap();
            let is_full = s && n && g;
            if is_full {
                untrained_val_psnr = tr.evaluate(&val).unwrap().mean.psnr_db;
            }
            let t0 = Instant::now();
            let mut logs = Vec::with_capacity(LADDER_STEPS);
            for _ in 0..LADDER_STEPS {
                logs.push(tr.train_step(&train).unwrap());
            }
            let seconds = t0.elapsed().as_secs_f64();
            if is_full {
                trained_val_psnr = tr.evaluate(&val).unwrap().mean.psnr_db;
                full = Some(tr.to_checkpoint());
            }
            runs.push(LadderRun { name, logs, seconds });
        }
        Ladder {
            runs,
            untrained_val_psnr,
            trained_val_psnr,
            full: full.unwrap(),
            val,
        }
    })
}

#[test]
fn criterion_07_every_ablation_trains_and_the_full_model_gains_3db() {
    let lad = ladder();
    let mut failures = Vec::new();
    for run in &lad.runs {
        check(&mut failures, run.seconds < LADDER_SECONDS_BUDGET, || {
            format!("{}: {:.0}s over the {LADDER_SECONDS_BUDGET:.0}s budget", run.name, run.seconds)
        });
        check(
            &mut failures,
            run.logs.iter().all(StepLog::is_finite),
            || format!("{}: non-finite value in the loss log", run.name),
        );
        let early = run.logs[10].loss_g;
        let last = run.logs.last().unwrap().loss_g;
        check(&mut failures, last < early, || {
            format!("{}: final loss {last:.4} !< step-10 loss {early:.4}", run.name)
        });
        println!(
            "  ladder {:13} {:6.1}s  loss_g step10 {:.4} -> final {:.4}",
            run.name, run.seconds, early, last
        );
    }
    let gain = lad.trained_val_psnr - lad.untrained_val_psnr;
    println!(
        "  ladder full      val psnr {:.3} dB untrained -> {:.3} dB trained (gain {gain:.3})",
        lad.untrained_val_psnr, lad.trained_val_psnr
    );
    check(&mut failures, gain >= 3.0, || {
        format!(
            "val psnr gain {gain:.3} dB < 3 (untrained {:.3}, trained {:.3})",
            lad.untrained_val_psnr, lad.trained_val_psnr
        )
    });
    finish(7, failures);
}

#[test]
fn criterion_08_noise_varies_output_while_masks_set_class_intensity() {
    let lad = ladder();
    let tr = Trainer::from_checkpoint(&lad.full).unwrap();
    let mut failures = Vec::new();

    let sample = &lad.val[0];
    let (d, h, w) = sample.dims;
    let k = sample.k_classes;
    let masks: Vec<Tensor> = (0..d)
        .map(|z| one_hot(sample.slice_mask(z), k, h, w).unwrap())
        .collect();
    let gp = tr.gen.params().unwrap();
    let (h4, w4) = tr.cfg.gen.quarter_hw();
    let sigma = tr.cfg.noise_sigma;

    // Same masks, two different noise volumes: outputs must differ.
    let za = make_noise_volume((d, h4, w4), 0xA11CE, sigma).unwrap();
    let zb = make_noise_volume((d, h4, w4), 0xB0B, sigma).unwrap();
    let outs_a = tr.gen.generate(&gp, &masks, Some(&za)).unwrap();
    let outs_b = tr.gen.generate(&gp, &masks, Some(&zb)).unwrap();
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    for (a, b) in outs_a.iter().zip(&outs_b) {
        for (x, y) in a.data().iter().zip(b.data()) {
            abs_sum += (x - y).abs();
            count += 1;
        }
    }
    let mad = abs_sum / count as Real;
    println!("  noise-swap mean absolute difference: {mad:.6}");
    check(&mut failures, mad > 0.0, || {
        "two noise draws produced identical outputs".into()
    });

    // The trained generator must paint mask regions with distinct mean
    // intensities: the conditioning signal, not the noise, decides the
    // per-class gray level.
    let mut sums = vec![0.0 as Real; k];
    let mut counts = vec![0usize; k];
    for z in 0..d {
        let labels = sample.slice_mask(z);
        for (i, &lab) in labels.iter().enumerate() {
            sums[lab as usize] += outs_a[z].data()[i];
            counts[lab as usize] += 1;
        }
    }
    let means: Vec<Real> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as Real } else { Real::NAN })
        .collect();
    println!("  per-class mean generated intensity: {means:?}");
    let mut max_gap = 0.0 as Real;
    for i in 0..k {
        for j in i + 1..k {
            if counts[i] > 0 && counts[j] > 0 {
                max_gap = max_gap.max((means[i] - means[j]).abs());
            }
        }
    }
    check(&mut failures, max_gap > 0.02, || {
        format!("largest per-class intensity gap {max_gap:.4} <= 0.02")
    });

    finish(8, failures);
}

// ── Criterion 9: resume equivalence and run determinism ──────────────

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gen.base_channels = 8;
    cfg.gen.image_hw = (16, 16);
    cfg.gen.n_slices = 4;
    cfg.gen.k_classes = 2;
    cfg.gen.sif_hidden = 4;
    cfg.gen.adj_radius = 1;
    cfg.loss.disc_width = 8;
    cfg.steps = 3;
    cfg
}

fn small_samples() -> Vec<PhantomSample> {
    (0..4)
        .map(|i| generate_phantom(500 + i, (4, 16, 16), 2).unwrap())
        .collect()
}

fn store_bits(t: &Trainer) -> Vec<u64> {
    t.gen
        .store
        .entries()
        .iter()
        .chain(t.disc.store.entries())
        .flat_map(|e| e.data.iter().map(|v| v.to_bits()))
        .collect()
}

fn log_bits(l: &StepLog) -> [u64; 7] {
    [
        l.step,
        l.loss_g.to_bits(),
        l.adv.to_bits(),
        l.feature_match.to_bits(),
        l.perceptual.to_bits(),
        l.gtc.to_bits(),
        l.loss_d.to_bits(),
    ]
}

#[test]
fn criterion_09_resume_is_bit_exact_and_identical_seeds_replay() {
    let mut failures = Vec::new();
    let samples = small_samples();

    // Uninterrupted: three steps straight through.
    let mut straight = Trainer::new(small_cfg()).unwrap();
    let logs_straight: Vec<StepLog> = (0..3)
        .map(|_| straight.train_step(&samples).unwrap())
        .collect();

    // Interrupted: two steps, checkpoint to disk, reload, one more.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.amgc");
    let mut first = Trainer::new(small_cfg()).unwrap();
    let mut logs_resumed: Vec<StepLog> = (0..2)
        .map(|_| first.train_step(&samples).unwrap())
        .collect();
    write_checkpoint(&path, &first.to_checkpoint()).unwrap();
    drop(first);
    let ckpt = read_checkpoint(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    logs_resumed.push(resumed.train_step(&samples).unwrap());

    check(&mut failures, resumed.step == straight.step, || {
        format!("step counters differ: {} vs {}", resumed.step, straight.step)
    });
    let logs_equal = logs_straight
        .iter()
        .zip(&logs_resumed)
        .all(|(a, b)| log_bits(a) == log_bits(b));
    check(&mut failures, logs_equal, || {
        "interrupted run logged different loss values".into()
    });
    check(
        &mut failures,
        store_bits(&straight) == store_bits(&resumed),
        || "parameters after resume differ from the uninterrupted run".into(),
    );

    // Two independently built trainers with the same seeds: training
    // logs and evaluation reports are identical, text and bits.
    let run = |mut t: Trainer| -> (Vec<[u64; 7]>, String) {
        let logs = (0..2)
            .map(|_| log_bits(&t.train_step(&samples).unwrap()))
            .collect();
        (logs, t.evaluate(&samples).unwrap().to_tsv())
    };
    let (la, ra) = run(Trainer::new(small_cfg()).unwrap());
    let (lb, rb) = run(Trainer::new(small_cfg()).unwrap());
    check(&mut failures, la == lb, || {
        "identical seeds produced different training logs".into()
    });
    check(&mut failures, ra == rb, || {
        "identical seeds produced different evaluation reports".into()
    });

    finish(9, failures);
}

// ── Criterion 10: on-disk formats round-trip and reject corruption ───

#[test]
fn criterion_10_formats_round_trip_and_name_each_corruption() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();

    // Bit-exact f64 round trip, including awkward values.
    let vpath = dir.path().join("field.amgv");
    let vals = vec![
        0.1 + 0.2,
        1.0 / 3.0,
        -0.0,
        7e-12,
        1e300,
        -std::f64::consts::PI,
    ];
    write_volume_f64(&vpath, (1, 2, 3), &vals).unwrap();
    let (dims, back) = read_volume_f64(&vpath).unwrap();
    let bits_equal = dims == (1, 2, 3)
        && vals.len() == back.len()
        && vals
            .iter()
            .zip(&back)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    check(&mut failures, bits_equal, || {
        "f64 volume round trip is not bit-exact".into()
    });

    // u8 round trip.
    let mpath = dir.path().join("labels.amgv");
    let labels: Vec<u8> = (0..24u32).map(|i| (i * 11 % 256) as u8).collect();
    write_volume_u8(&mpath, (2, 3, 4), &labels).unwrap();
    let (mdims, mback) = read_volume_u8(&mpath).unwrap();
    check(&mut failures, mdims == (2, 3, 4) && mback == labels, || {
        "u8 volume round trip changed the payload".into()
    });

    // Each corruption gets its own error, naming the problem.
    let original = fs::read(&vpath).unwrap();

    let bad_magic = dir.path().join("bad_magic.amgv");
    let mut bytes = original.clone();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&bad_magic, &bytes).unwrap();
    check(
        &mut failures,
        matches!(read_volume_f64(&bad_magic), Err(Error::BadMagic { .. })),
        || "wrong magic was not reported as a magic error".into(),
    );

    let bad_version = dir.path().join("bad_version.amgv");
    let mut bytes = original.clone();
    bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
    fs::write(&bad_version, &bytes).unwrap();
    check(
        &mut failures,
        matches!(read_volume_f64(&bad_version), Err(Error::Version { found: 9, .. })),
        || "wrong version was not reported as a version error".into(),
    );

    let truncated = dir.path().join("truncated.amgv");
    fs::write(&truncated, &original[..original.len() - 3]).unwrap();
    check(
        &mut failures,
        matches!(read_volume_f64(&truncated), Err(Error::Truncated { .. })),
        || "short payload was not reported as truncation".into(),
    );

    check(
        &mut failures,
        matches!(read_volume_u8(&vpath), Err(Error::DtypeMismatch { .. })),
        || "reading f64 data as u8 was not reported as a dtype mismatch".into(),
    );

    // Checkpoint: full state round-trips by value; the same corruption
    // classes are distinguished.
    let mut tr = Trainer::new(small_cfg()).unwrap();
    tr.train_step(&small_samples()).unwrap();
    let ckpt = tr.to_checkpoint();
    let cpath = dir.path().join("state.amgc");
    write_checkpoint(&cpath, &ckpt).unwrap();
    let back = read_checkpoint(&cpath).unwrap();
    check(&mut failures, back == ckpt, || {
        "checkpoint round trip changed the state".into()
    });

    let cbytes = fs::read(&cpath).unwrap();
    let cbad = dir.path().join("bad.amgc");
    let mut bytes = cbytes.clone();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(&cbad, &bytes).unwrap();
    check(
        &mut failures,
        matches!(read_checkpoint(&cbad), Err(Error::BadMagic { .. })),
        || "checkpoint magic corruption was not a magic error".into(),
    );
    fs::write(&cbad, &cbytes[..cbytes.len() - 5]).unwrap();
    check(
        &mut failures,
        matches!(read_checkpoint(&cbad), Err(Error::Truncated { .. })),
        || "checkpoint truncation was not a truncation error".into(),
    );
    let mut bytes = cbytes.clone();
    bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
    fs::write(&cbad, &bytes).unwrap();
    check(
        &mut failures,
        matches!(read_checkpoint(&cbad), Err(Error::Version { found: 9, .. })),
        || "checkpoint version corruption was not a version error".into(),
    );

    finish(10, failures);
}
