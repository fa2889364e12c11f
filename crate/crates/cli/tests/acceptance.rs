//! Acceptance suite: one PASS/FAIL line per criterion, then a single assertion.
//!
//! Run with `cargo test -p auscult-cli --test acceptance -- --nocapture` to see
//! the lines. The synthetic domain-gap experiment (criterion 6) trains 25 fold
//! models on the default corpus and dominates the runtime.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use auscult::datasets::{
    stratified_kfold, synth_generate, BinaryLabel, ClassCounts, ExperimentSetup, Manifest, SetupSplits,
    SynthesisSpec,
};
use auscult::features::FeatureConfig;
use auscult::metrics::{compute_metrics, confusion, Confusion, MetricsReport};
use auscult::model::{
    cross_entropy, frequency_stats, mix_with_plan, mixstyle_apply, plan_mixing, BatchFeatures, ForwardOptions,
    MixPlan, MixStyleConfig, ModelConfig, Transformer, Weights,
};
use auscult::signal::{lowpass_filter, resample, AudioRecording, DeviceDomain, RawLabel, ResamplerConfig, Site};
use auscult::training::{load_domain, train_fold, ExperimentConfig, Sample, TrainConfig};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use BinaryLabel::{Abnormal, Normal};
use DeviceDomain::{Smartphone, Stethoscope};

const BIN: &str = env!("CARGO_BIN_EXE_auscult");

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, b: usize, grid: (usize, usize), d: usize) -> Vec<Array2<f64>> {
    (0..b)
        .map(|_| {
            let scale = rng.random_range(0.5..3.0);
            let shift = rng.random_range(-2.0..2.0);
            Array2::from_shape_simple_fn((1 + grid.0 * grid.1, d), || shift + scale * rng.random_range(-1.0..1.0))
        })
        .collect()
}

/// Independent statistics oracle: plain loops over the frequency rows.
fn oracle_stats(x: &Array2<f64>, grid: (usize, usize), eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = grid;
    let d = x.ncols();
    let (mut mean, mut std) = (vec![0.0; cols * d], vec![0.0; cols * d]);
    for c in 0..cols {
        for k in 0..d {
            let vals: Vec<f64> = (0..rows).map(|r| x[(1 + r * cols + c, k)]).collect();
            let m = vals.iter().sum::<f64>() / rows as f64;
            let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / rows as f64;
            mean[c * d + k] = m;
            std[c * d + k] = (v + eps).sqrt();
        }
    }
    (mean, std)
}

fn criterion_1_mixstyle_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = (4, 5);
    let d = 8;
    let eps = 1e-6;
    let labels = vec![Abnormal, Abnormal, Normal, Normal];
    let domains = vec![Smartphone, Stethoscope, Stethoscope, Smartphone];
    let x = random_tokens(&mut rng, 4, grid, d);

    // lambda = 1 keeps each item's own statistics.
    let keep = MixPlan {
        entries: vec![Some((1, 1.0)), Some((0, 1.0)), Some((3, 1.0)), Some((2, 1.0))],
    };
    let y = mix_with_plan(&x, grid, &keep, eps);
    let err = x.iter().zip(&y).flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max);
    check(err < 1e-6, format!("lambda=1 max deviation {err:.2e}"))?;

    // lambda = 0 transplants the partner's statistics. The output is
    // s_p * (x - m_x) / sqrt(var_x + eps) + m_p, so its recomputed mean is m_p and
    // its plain std is s_p * sqrt(var_x / (var_x + eps)).
    let swap = MixPlan {
        entries: vec![Some((1, 0.0)), Some((0, 0.0)), Some((3, 0.0)), Some((2, 0.0))],
    };
    let y = mix_with_plan(&x, grid, &swap, eps);
    let mut swap_err = 0.0f64;
    for (i, entry) in swap.entries.iter().enumerate() {
        let (j, _) = entry.unwrap();
        let (m_out, s_out) = oracle_stats(&y[i], grid, 0.0);
        let (m_p, s_p) = oracle_stats(&x[j], grid, eps);
        let (_, sd_x) = oracle_stats(&x[i], grid, 0.0);
        let (_, s_x) = oracle_stats(&x[i], grid, eps);
        for k in 0..m_out.len() {
            let expected_sd = s_p[k] * sd_x[k] / s_x[k];
            swap_err = swap_err.max((m_out[k] - m_p[k]).abs()).max((s_out[k] - expected_sd).abs());
        }
        check(y[i].row(0) == x[i].row(0), "class token changed by mixing")?;
    }
    check(swap_err < 1e-5, format!("lambda=0 statistics error {swap_err:.2e}"))?;
    // The library's own statistics agree with the oracle.
    let st = frequency_stats(&x[0], grid, eps);
    let (m0, s0) = oracle_stats(&x[0], grid, eps);
    let lib_err = st
        .mean
        .iter()
        .zip(&m0)
        .chain(st.std.iter().zip(&s0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(lib_err < 1e-12, format!("frequency_stats disagrees with oracle by {lib_err:.2e}"))?;

    // Eval mode is bitwise identity, for the operator and for the whole network.
    let cfg = MixStyleConfig {
        p: 1.0,
        ..MixStyleConfig::default()
    };
    let feats = BatchFeatures {
        tokens: x.clone(),
        labels: labels.clone(),
        domains: domains.clone(),
        grid,
    };
    check(mixstyle_apply(&feats, &cfg, &mut rng, false) == feats, "eval-mode MixStyle changed features")?;
    let mc = |mixstyle| ModelConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        patch_dim: 6,
        grid,
        mixstyle,
        ..ModelConfig::default()
    };
    let with = Transformer::<f64>::new(mc(MixStyleConfig {
        p: 1.0,
        insertion_depths: vec![0, 1],
        ..MixStyleConfig::default()
    }))
    .map_err(|e| e.to_string())?;
    let without = Transformer::<f64>::from_weights(mc(MixStyleConfig::disabled()), with.weights.clone())
        .map_err(|e| e.to_string())?;
    let patches: Vec<Array2<f64>> = (0..4)
        .map(|_| Array2::from_shape_simple_fn((20, 6), || rng.random_range(-1.0..1.0)))
        .collect();
    let pv: Vec<ArrayView2<'_, f64>> = patches.iter().map(|p| p.view()).collect();
    let a = with.forward(&pv, &labels, &domains, &ForwardOptions::eval()).map_err(|e| e.to_string())?;
    let b = without.forward(&pv, &labels, &domains, &ForwardOptions::eval()).map_err(|e| e.to_string())?;
    check(
        a.logits.iter().flatten().map(|v| v.to_bits()).eq(b.logits.iter().flatten().map(|v| v.to_bits())),
        "eval forward differs with MixStyle configured",
    )?;

    // Pairing constraint over random batches.
    let mut mixed = 0usize;
    for t in 0..500 {
        let n = rng.random_range(2..=32);
        let l: Vec<BinaryLabel> = (0..n).map(|_| if rng.random_bool(0.4) { Abnormal } else { Normal }).collect();
        let dm: Vec<DeviceDomain> = (0..n).map(|_| if rng.random_bool(0.3) { Smartphone } else { Stethoscope }).collect();
        let plan = plan_mixing(&l, &dm, 0.1, &mut rng);
        for (i, e) in plan.entries.iter().enumerate() {
            let has_partner = (0..n).any(|j| l[j] == l[i] && dm[j] != dm[i]);
            match *e {
                Some((j, lam)) => {
                    mixed += 1;
                    check(l[j] == l[i] && dm[j] != dm[i], format!("batch {t}: item {i} paired with {j}"))?;
                    check((0.0..=1.0).contains(&lam), format!("batch {t}: lambda {lam}"))?;
                }
                None => check(!has_partner, format!("batch {t}: item {i} left unmixed despite a valid partner"))?,
            }
        }
    }

    // A single-device batch has no valid partner anywhere.
    let single = BatchFeatures {
        tokens: x.clone(),
        labels: labels.clone(),
        domains: vec![Smartphone; 4],
        grid,
    };
    for _ in 0..20 {
        check(mixstyle_apply(&single, &cfg, &mut rng, true) == single, "single-device batch was modified")?;
    }
    check(plan_mixing(&labels, &[Stethoscope; 4], 0.1, &mut rng).mixed_count() == 0, "single-device plan mixes")?;

    Ok(format!(
        "lambda=1 err {err:.1e}, lambda=0 stats err {swap_err:.1e}, 500 batches / {mixed} pairings valid"
    ))
}

fn bump(w: &mut Weights<f64>, mut idx: usize, delta: f64) {
    for mut t in w.tensors_mut() {
        if idx < t.len() {
            *t.iter_mut().nth(idx).expect("in range") += delta;
            return;
        }
        idx -= t.len();
    }
}

fn criterion_2_gradients() -> Outcome {
    let cfg = ModelConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        patch_dim: 6,
        grid: (2, 3),
        mixstyle: MixStyleConfig {
            p: 1.0,
            insertion_depths: vec![0, 1],
            ..MixStyleConfig::default()
        },
        init_std: 0.4,
        seed: 3,
        ..ModelConfig::default()
    };
    let model = Transformer::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patches: Vec<Array2<f64>> = (0..4)
        .map(|_| Array2::from_shape_simple_fn((6, 6), || rng.random_range(-1.5..1.5)))
        .collect();
    let pv: Vec<ArrayView2<'_, f64>> = patches.iter().map(|p| p.view()).collect();
    let labels = [Abnormal, Abnormal, Normal, Normal];
    let domains = [Smartphone, Stethoscope, Stethoscope, Smartphone];
    let opts = ForwardOptions {
        frozen_plans: vec![
            (0, MixPlan { entries: vec![Some((1, 0.35)), Some((0, 0.7)), Some((3, 0.5)), Some((2, 0.15))] }),
            (1, MixPlan { entries: vec![None, Some((0, 0.4)), Some((3, 0.9)), None] }),
        ],
        ..ForwardOptions::train(0, 5)
    };
    let (_, grad, out) = model.loss_and_grad(&pv, &labels, &domains, None, &opts).map_err(|e| e.to_string())?;
    check(out.mix_events == 2, format!("expected 2 mixing events, saw {}", out.mix_events))?;
    let analytic = grad.to_flat();
    let loss_at = |w: &Weights<f64>| {
        let m = Transformer::from_weights(cfg.clone(), w.clone()).expect("same shapes");
        let o = m.forward(&pv, &labels, &domains, &opts).expect("forward");
        cross_entropy(&o.logits, &labels, None).0
    };
    let h = 1e-5;
    let mut w = model.weights.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        bump(&mut w, k, h);
        let up = loss_at(&w);
        bump(&mut w, k, -2.0 * h);
        let down = loss_at(&w);
        bump(&mut w, k, h);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    Ok(format!("{} parameters, max relative error {worst:.2e} (< 1e-4)", analytic.len()))
}

fn criterion_3_metrics() -> Outcome {
    let hand = Confusion {
        tp: 2,
        tn: 1,
        fp: 1,
        fn_: 1,
    };
    let m = compute_metrics(&hand).map_err(|e| e.to_string())?;
    let r2 = |v: f64| format!("{v:.2}");
    check(
        r2(m.se) == "66.67" && r2(m.sp) == "50.00" && r2(m.score) == "58.33" && format!("{:.3}", m.f1) == "0.667",
        format!("hand case gave {m:?}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let p_abn = rng.random_range(0.0..1.0);
        let p_hit = rng.random_range(0.0..1.0);
        let labels: Vec<BinaryLabel> = (0..n).map(|_| if rng.random_bool(p_abn) { Abnormal } else { Normal }).collect();
        let preds: Vec<BinaryLabel> = labels
            .iter()
            .map(|&l| if rng.random_bool(p_hit) { l } else { l.flipped() })
            .collect();
        let got = compute_metrics(&confusion(&labels, &preds).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            match (labels[i] == Abnormal, preds[i] == Abnormal) {
                (true, true) => tp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
            }
        }
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let se = 100.0 * div(tp, tp + fn_);
        let sp = 100.0 * div(tn, tn + fp);
        let f1 = div(2.0 * tp, 2.0 * tp + fp + fn_);
        for (a, b) in [(got.se, se), (got.sp, sp), (got.score, (se + sp) / 2.0), (got.f1, f1)] {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-9, format!("max deviation from recount {worst:.2e}"))?;
    Ok(format!("hand case exact; 1000 random sets, max deviation {worst:.1e}"))
}

fn criterion_4_splits() -> Outcome {
    let (n_normal, n_abnormal, k) = (888usize, 410usize, 5usize);
    let mut labels = vec![Normal; n_normal];
    labels.extend(vec![Abnormal; n_abnormal]);
    // Interleave so class membership is not a contiguous index range.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let split = stratified_kfold(&labels, k, 42).map_err(|e| e.to_string())?;
    check(split.folds.len() == k, "wrong fold count")?;
    let mut owner = vec![0usize; labels.len()];
    for (f, (train, test)) in split.folds.iter().enumerate() {
        for &i in test {
            owner[i] += 1;
        }
        check(train.len() + test.len() == labels.len(), format!("fold {f} is not a partition"))?;
        check(train.iter().all(|i| test.binary_search(i).is_err()), format!("fold {f} overlaps"))?;
        for (class, total) in [(Normal, n_normal), (Abnormal, n_abnormal)] {
            let c = test.iter().filter(|&&i| labels[i] == class).count() as f64;
            let ideal = total as f64 / k as f64;
            check((c - ideal).abs() <= 1.0, format!("fold {f} has {c} {class}, ideal {ideal}"))?;
        }
    }
    check(owner.iter().all(|&c| c == 1), "some id is not in exactly one test fold")?;
    check(stratified_kfold(&labels, k, 42).map_err(|e| e.to_string())? == split, "same seed, different split")?;
    check(stratified_kfold(&labels, k, 43).map_err(|e| e.to_string())? != split, "seed has no effect")?;
    let sizes: Vec<usize> = split.folds.iter().map(|(_, t)| t.len()).collect();
    Ok(format!("888/410 over 5 folds, test sizes {sizes:?}, deterministic"))
}

fn sine(freq: f64, rate: u32, seconds: f64) -> AudioRecording {
    let n = (seconds * rate as f64) as usize;
    let x = (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect();
    AudioRecording::new(x, rate, Smartphone)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn criterion_5_dsp() -> Outcome {
    // Spectral-peak oracle on a whole number of cycles away from the edges.
    let out = resample(&sine(100.0, 48_000, 1.0), 4000, &ResamplerConfig::default()).map_err(|e| e.to_string())?;
    check(out.samples.len().abs_diff(4000) <= 1, format!("{} output samples", out.samples.len()))?;
    let mid = &out.samples[400..3600];
    let n = mid.len();
    let dft = |bin: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in mid.iter().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * (bin * t) as f64 / n as f64;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        2.0 * (re * re + im * im).sqrt() / n as f64
    };
    let mags: Vec<f64> = (0..n / 2).map(dft).collect();
    let peak = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).expect("bins");
    let bin_hz = 4000.0 / n as f64;
    let peak_hz = peak as f64 * bin_hz;
    let amp_err = (mags[peak] - 1.0).abs();
    check((peak_hz - 100.0).abs() <= bin_hz, format!("peak at {peak_hz} Hz"))?;
    check(amp_err < 0.01, format!("amplitude error {:.3}%", 100.0 * amp_err))?;

    // Stopband attenuation by RMS ratio.
    let tone = sine(3000.0, 48_000, 1.0);
    let filtered = lowpass_filter(&tone, 1800.0).map_err(|e| e.to_string())?;
    let core = 4800..43_200;
    let atten_db = 20.0 * (rms(&tone.samples[core.clone()]) / rms(&filtered.samples[core])).log10();
    check(atten_db >= 24.0, format!("3 kHz attenuated only {atten_db:.1} dB"))?;

    // Zero phase: a centered impulse stays centered and symmetric.
    let len = 4001;
    let c = len / 2;
    let mut imp = vec![0.0; len];
    imp[c] = 1.0;
    let y = lowpass_filter(&AudioRecording::new(imp, 48_000, Smartphone), 1800.0).map_err(|e| e.to_string())?.samples;
    let argmax = (0..len).max_by(|&a, &b| y[a].total_cmp(&y[b])).expect("samples");
    let asym = (1..500).map(|k| (y[c - k] - y[c + k]).abs()).fold(0.0, f64::max) / y[c];
    check(argmax == c, format!("impulse peak moved from {c} to {argmax}"))?;
    check(asym < 1e-6, format!("impulse response asymmetry {asym:.2e}"))?;
    let dc = lowpass_filter(&AudioRecording::new(vec![0.5; 8000], 48_000, Smartphone), 1800.0)
        .map_err(|e| e.to_string())?;
    let dc_err = rms(&dc.samples.iter().map(|v| v - 0.5).collect::<Vec<_>>());
    check(dc_err < 1e-6, format!("DC changed by {dc_err:.2e} RMS"))?;
    Ok(format!(
        "100 Hz peak at {peak_hz:.2} Hz, amplitude err {:.3}%; 3 kHz -{atten_db:.1} dB; impulse centered, asymmetry {asym:.1e}",
        100.0 * amp_err
    ))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawn {BIN}: {e}"))?;
    if !out.status.success() {
        return Err(format!("`auscult {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_report(dir: &Path, setup: ExperimentSetup) -> Result<MetricsReport, String> {
    let path = dir.join(format!("setup{}", setup.number())).join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    MetricsReport::from_json(&text).map_err(|e| e.to_string())
}

/// `synth → split → run --setup N (all five) → report` through the binary.
fn cli_pipeline(root: &Path, synth_spec: Option<&Path>, config: &Path, out: &str) -> Result<Vec<MetricsReport>, String> {
    let data = root.join("data");
    if !data.join("stethoscope.tsv").exists() {
        let mut args = vec!["synth", "--out", data.to_str().expect("utf-8 path")];
        if let Some(s) = synth_spec {
            args.extend(["--spec", s.to_str().expect("utf-8 path")]);
        }
        run_cli(&args)?;
    }
    let out = root.join(out);
    let (steth, phone) = (data.join("stethoscope.tsv"), data.join("smartphone.tsv"));
    let cache = root.join("features");
    for setup in ExperimentSetup::ALL {
        run_cli(&[
            "run",
            "--setup",
            &setup.number().to_string(),
            "--manifest-steth",
            steth.to_str().expect("utf-8 path"),
            "--manifest-phone",
            phone.to_str().expect("utf-8 path"),
            "--config",
            config.to_str().expect("utf-8 path"),
            "--out",
            out.to_str().expect("utf-8 path"),
            "--cache",
            cache.to_str().expect("utf-8 path"),
        ])?;
    }
    run_cli(&["report", "--out", out.to_str().expect("utf-8 path")])?;
    ExperimentSetup::ALL.iter().map(|&s| read_report(&out, s)).collect()
}

fn criterion_6_domain_gap(root: &Path) -> Outcome {
    let config = workspace_root().join("configs/compact.toml");
    let reports = cli_pipeline(root, None, &config, "run")?;
    let score = |s: usize| reports[s - 1].score.mean;
    let summary = (1..=5).map(|s| format!("S{s} {:.2}", score(s))).collect::<Vec<_>>().join(", ");
    let drop = score(4) - score(5);
    let mut failures = Vec::new();
    if drop < 5.0 {
        failures.push(format!("Setup 4 - Setup 5 = {drop:.2} < 5"));
    }
    if score(3) < score(1) {
        failures.push(format!("Setup 3 {:.2} < Setup 1 {:.2}", score(3), score(1)));
    }
    if score(3) < score(2) - 1.0 {
        failures.push(format!("Setup 3 {:.2} < Setup 2 {:.2} - 1", score(3), score(2)));
    }
    if failures.is_empty() {
        Ok(format!("{summary}; drop {drop:.2}"))
    } else {
        Err(format!("{summary}; {}", failures.join("; ")))
    }
}

fn criterion_7_cli(root: &Path) -> Outcome {
    // Small corpus and model so the pipeline can be run twice.
    let spec = root.join("synth.toml");
    std::fs::write(
        &spec,
        "seed = 5\n[stethoscope]\nnormal = 60\ncrackle = 20\nwheeze = 20\nboth = 20\n\
         [smartphone]\nnormal = 30\ncrackle = 10\nwheeze = 10\nboth = 10\n",
    )
    .map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::compact();
    cfg.model.embed_dim = 16;
    cfg.model.num_layers = 2;
    cfg.model.num_heads = 2;
    cfg.model.mixstyle.insertion_depths = vec![0, 1];
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    let config = root.join("small.toml");
    std::fs::write(&config, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;

    let (a, b) = (root.join("a"), root.join("b"));
    let first = cli_pipeline(&a, Some(&spec), &config, "run")?;
    let second = cli_pipeline(&b, Some(&spec), &config, "run")?;

    // Split from the `split` command matches the one `run` used.
    let phone_manifest = a.join("data/smartphone.tsv");
    let split_json = root.join("phone-split.json");
    run_cli(&[
        "split",
        "--manifest",
        phone_manifest.to_str().expect("utf-8 path"),
        "--folds",
        &cfg.folds.to_string(),
        "--seed",
        &cfg.split_seed.to_string(),
        "--out",
        split_json.to_str().expect("utf-8 path"),
    ])?;
    let from_split: Value = serde_json::from_str(&std::fs::read_to_string(&split_json).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let used: SetupSplits =
        serde_json::from_str(&std::fs::read_to_string(a.join("run/splits.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    check(
        serde_json::to_value(used.smartphone.as_ref().ok_or("no phone split")?).map_err(|e| e.to_string())?
            == from_split["split"],
        "`split` and `run` disagree on the phone folds",
    )?;

    // Tables in the report layout, plus the machine-readable files.
    let table = std::fs::read_to_string(a.join("run/report.txt")).map_err(|e| e.to_string())?;
    check(
        table.lines().next().is_some_and(|h| {
            h.split('|').map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>()
                == ["Method", "SP (%)", "SE (%)", "Score (%)", "F1 Score"]
        }),
        format!("unexpected table header in\n{table}"),
    )?;
    for s in ExperimentSetup::ALL {
        check(table.contains(s.title()), format!("table lacks `{}`", s.title()))?;
    }
    let all: Vec<MetricsReport> =
        serde_json::from_str(&std::fs::read_to_string(a.join("run/report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    check(all.len() == 5, "combined report.json does not hold five setups")?;

    let mut worst = 0.0f64;
    for (a, b) in first.iter().zip(&second) {
        check(a.folds.len() == 5, "expected five folds")?;
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            worst = worst.max((fa.metrics.score - fb.metrics.score).abs());
        }
        worst = worst.max((a.score.mean - b.score.mean).abs());
    }
    check(worst <= 1e-6, format!("rerun Scores differ by {worst:.2e}"))?;
    Ok(format!("5 setups x 2 runs, header and titles match, rerun Score diff {worst:.1e}"))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(addr: &str, method: &str, path: &str, body: &[u8], content_type: &str) -> Result<(u16, Vec<u8>), String> {
    let mut s = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    s.set_read_timeout(Some(Duration::from_secs(300))).map_err(|e| e.to_string())?;
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    s.write_all(head.as_bytes()).and_then(|_| s.write_all(body)).map_err(|e| e.to_string())?;
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).map_err(|e| e.to_string())?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or("malformed response")?;
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status: u16 = head.split_whitespace().nth(1).and_then(|c| c.parse().ok()).ok_or("no status")?;
    let mut body = raw[split + 4..].to_vec();
    if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        body = dechunk(&body)?;
    }
    Ok((status, body))
}

fn dechunk(mut b: &[u8]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    loop {
        let eol = b.windows(2).position(|w| w == b"\r\n").ok_or("bad chunk")?;
        let size = usize::from_str_radix(String::from_utf8_lossy(&b[..eol]).trim(), 16).map_err(|e| e.to_string())?;
        if size == 0 {
            return Ok(out);
        }
        out.extend_from_slice(&b[eol + 2..eol + 2 + size]);
        b = &b[eol + 4 + size..];
    }
}

fn json_call(addr: &str, method: &str, path: &str, body: &[u8], ct: &str) -> Result<(u16, Value), String> {
    let (s, b) = http(addr, method, path, body, ct)?;
    Ok((s, serde_json::from_slice(&b).unwrap_or(Value::Null)))
}

fn criterion_8_service(root: &Path) -> Outcome {
    let none = ClassCounts::default();
    // A phone-domain screening model trained on normal and wheeze clips.
    let train_spec = SynthesisSpec::default().with_counts(
        none,
        ClassCounts {
            normal: 48,
            wheeze: 48,
            ..none
        },
    );
    let corpus = synth_generate(&train_spec, root.join("train")).map_err(|e| e.to_string())?;
    let ecfg = ExperimentConfig {
        features: FeatureConfig::compact(),
        ..ExperimentConfig::default()
    };
    let data = load_domain(&corpus.smartphone, &ecfg, None).map_err(|e| e.to_string())?;
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let model = ModelConfig {
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mixstyle: MixStyleConfig::disabled(),
        ..ModelConfig::for_features(&ecfg.features, ecfg.clip_samples()).map_err(|e| e.to_string())?
    };
    let tc = TrainConfig {
        epochs: 15,
        batch_size: 16,
        learning_rate: 3e-3,
        warmup_epochs: 1,
        validation_fraction: 0.0,
        ..TrainConfig::default()
    };
    let outcome = train_fold(&samples, &ecfg.features, &model, &tc).map_err(|e| e.to_string())?;
    let ckpt = root.join("screen.ckpt");
    outcome.checkpoint.save(&ckpt).map_err(|e| e.to_string())?;

    // Ten-second session recordings from an unseen seed.
    let mut session_spec = SynthesisSpec::default().with_counts(
        none,
        ClassCounts {
            normal: 4,
            wheeze: 4,
            ..none
        },
    );
    session_spec.seed = 2024;
    session_spec.clip_s = 10.0;
    let sessions = synth_generate(&session_spec, root.join("sessions")).map_err(|e| e.to_string())?;
    let m = &sessions.smartphone;
    let files = |label: RawLabel| -> Vec<Vec<u8>> {
        m.entries.iter().filter(|e| e.raw_label == label).map(|e| std::fs::read(m.resolve(e)).expect("wav")).collect()
    };
    let (normal, wheeze) = (files(RawLabel::Normal), files(RawLabel::Wheeze));

    let port = TcpListener::bind("127.0.0.1:0").and_then(|l| l.local_addr()).map_err(|e| e.to_string())?.port();
    let addr = format!("127.0.0.1:{port}");
    let store = root.join("store");
    let svc_cfg = root.join("service.toml");
    std::fs::write(&svc_cfg, format!("bind = \"{addr}\"\nthreshold = 0.5\n")).map_err(|e| e.to_string())?;
    let _server = Server(
        Command::new(BIN)
            .args(["serve", "--config", svc_cfg.to_str().expect("utf-8 path")])
            .env("AUSCULT_CHECKPOINT", &ckpt)
            .env("AUSCULT_STORAGE_DIR", &store)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?,
    );
    let t0 = Instant::now();
    while json_call(&addr, "GET", "/health", b"", "text/plain").is_err() {
        check(t0.elapsed() < Duration::from_secs(30), "service did not come up")?;
        std::thread::sleep(Duration::from_millis(100));
    }
    let (_, health) = json_call(&addr, "GET", "/health", b"", "text/plain")?;
    check(health["model_loaded"] == true, "service started without its model")?;

    let run_session = |files: &[Vec<u8>]| -> Result<(String, Value), String> {
        let (s, v) = json_call(&addr, "POST", "/sessions", br#"{"symptoms":["cough","fever"]}"#, "application/json")?;
        check(s == 201, format!("create returned {s}"))?;
        let id = v["session_id"].as_str().ok_or("no session id")?.to_string();
        for (site, bytes) in Site::RECORDING_ORDER.iter().zip(files) {
            let (s, v) = json_call(&addr, "POST", &format!("/sessions/{id}/recordings?site={site}"), bytes, "audio/wav")?;
            check(s == 200, format!("upload returned {s}: {v}"))?;
        }
        let (s, v) = json_call(&addr, "POST", &format!("/sessions/{id}/assess"), b"", "text/plain")?;
        check(s == 200, format!("assess returned {s}: {v}"))?;
        Ok((id, v))
    };
    let (nid, n) = run_session(&normal)?;
    let (wid, w) = run_session(&wheeze)?;

    let site_ps = |v: &Value| -> Result<Vec<f64>, String> {
        Site::RECORDING_ORDER
            .iter()
            .map(|s| v["sites"][s.as_str()]["p_abnormal"].as_f64().ok_or_else(|| format!("no p for {s}")))
            .collect()
    };
    let (pn, pw) = (site_ps(&n)?, site_ps(&w)?);
    check(pn.iter().chain(&pw).all(|p| (0.0..=1.0).contains(p)), "probability outside [0, 1]")?;
    for v in [&n, &w] {
        let verdict = v["overall_verdict"].as_str().unwrap_or("");
        let rec = v["recommendation"].as_str().unwrap_or("");
        check(
            matches!((verdict, rec), ("normal", "no_action") | ("abnormal", "consult_physician")),
            format!("verdict {verdict} with recommendation {rec}"),
        )?;
    }
    let max = |p: &[f64]| p.iter().copied().fold(0.0, f64::max);
    check(max(&pw) > max(&pn), format!("wheeze p {pw:?} not above normal p {pn:?}"))?;

    // Idempotent re-assess returns the stored document unchanged.
    let (_, again) = json_call(&addr, "POST", &format!("/sessions/{wid}/assess"), b"", "text/plain")?;
    check(again == w, "re-assess changed the result")?;

    // Exported manifest loads through the dataset loader.
    let (s, text) = http(&addr, "GET", "/export/manifest", b"", "text/plain")?;
    check(s == 200, format!("export returned {s}"))?;
    let path = root.join("export.tsv");
    std::fs::write(&path, &text).map_err(|e| e.to_string())?;
    let exported = Manifest::load(&path).map_err(|e| e.to_string())?;
    check(exported.len() == 8, format!("{} exported rows, expected 8", exported.len()))?;
    check(
        exported.entries.iter().all(|e| e.device_domain == Smartphone && !e.verified && e.provisional_label.is_some()),
        "export rows are not unverified smartphone rows",
    )?;
    check(
        exported.entries.iter().filter(|e| e.patient_id == nid).count() == 4,
        "normal session rows missing from export",
    )?;
    let loaded = load_domain(&exported, &ecfg, None).map_err(|e| e.to_string())?;
    check(loaded.samples.len() == 8, "loader dropped exported rows")?;
    Ok(format!(
        "max site p: wheeze {:.3} > normal {:.3}; re-assess identical; 8 rows re-loaded",
        max(&pw),
        max(&pn)
    ))
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t0.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {n}. {name} ({secs:.1} s): {detail}");
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = |name: &str| {
        let d = tmp.path().join(name);
        std::fs::create_dir_all(&d).expect("mkdir");
        d
    };
    let results = [
        run_criterion(1, "MixStyle algebra", criterion_1_mixstyle_algebra),
        run_criterion(2, "gradient correctness", criterion_2_gradients),
        run_criterion(3, "metrics oracle equivalence", criterion_3_metrics),
        run_criterion(4, "split properties", criterion_4_splits),
        run_criterion(5, "DSP suite", criterion_5_dsp),
        run_criterion(6, "synthetic domain-gap experiment", || criterion_6_domain_gap(&dir("c6"))),
        run_criterion(7, "end-to-end CLI", || criterion_7_cli(&dir("c7"))),
        run_criterion(8, "service round trip", || criterion_8_service(&dir("c8"))),
    ];
    let failed: Vec<usize> = (1..=8).filter(|&i| !results[i - 1]).collect();
    println!("acceptance: {}/8 passed", 8 - failed.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
