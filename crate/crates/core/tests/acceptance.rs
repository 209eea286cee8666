//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use medc::autograd::Graph;
use medc::data::{
    compute_label_stats, decode_dataset, encode_dataset, generate_synthetic, read_feature_file, write_feature_file,
    CountSpec, Dataset, LabelStats, SyntheticConfig,
};
use medc::evaluation::{ablate, average_precision, Variant};
use medc::losses::LossConfig;
use medc::model::{reparameterize, MedcModel, ModelConfig, Noise};
use medc::rng::stream;
use medc::sampling::{sample_batch, sampler_for, ExpertKind, SamplerKind};
use medc::training::{TrainConfig, Trainer};
use medc::{MedcError, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn medc_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_medc"))
}

fn run_ok(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    for seed in 0..10u64 {
        let out = run_ok(medc_bin().args(["gradcheck", "--seed", &seed.to_string()]))?;
        let line = out.lines().next().unwrap_or_default();
        let err: f64 = line
            .split_whitespace()
            .find_map(|w| w.strip_prefix("max_rel_err="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("seed {seed}: unexpected output {line:?}"))?;
        skipped += line
            .split_whitespace()
            .find_map(|w| w.strip_prefix("kink_skipped="))
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        check(line.starts_with("PASS") && err < 1e-4, format!("seed {seed}: {line}"))?;
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("10 seeds, max_rel_err={worst:.2e}, {skipped} kink-straddling entries skipped, {secs:.1}s"))
}

fn single_label(counts: &[usize]) -> Vec<Vec<usize>> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(vec![c], n))
        .collect()
}

fn class_frequencies(kind: SamplerKind, counts: &[usize], draws: usize, seed: u64) -> Result<Vec<f64>, MedcError> {
    let labels = single_label(counts);
    let stats = LabelStats::from_counts(counts.to_vec(), 1000, 1)?;
    let spec = sampler_for(kind, &stats, &labels)?;
    let mut rng = stream(seed, "acceptance.sampler", &[]);
    let idx = sample_batch(&spec, draws, &mut rng)?;
    let mut freq = vec![0.0; counts.len()];
    for i in idx {
        freq[labels[i][0]] += 1.0 / draws as f64;
    }
    Ok(freq)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; v.len()];
    for i in 0..v.len() {
        r[i] = v.iter().filter(|&&x| x < v[i]).count() as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn sampler_fidelity() -> Outcome {
    let n = 100_000;
    let freq = class_frequencies(SamplerKind::Uniform, &[500, 100, 10], n, 1).map_err(|e| e.to_string())?;
    let p = 1.0 / 3.0;
    let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    for (c, f) in freq.iter().enumerate() {
        check((f - p).abs() <= bound, format!("uniform class {c}: {f:.5} vs 1/3 ± {bound:.5}"))?;
    }
    let counts = [400usize, 150, 60, 25, 8];
    let inv = class_frequencies(SamplerKind::Inverse, &counts, n, 2).map_err(|e| e.to_string())?;
    let counts_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let rho = spearman(&counts_f, &inv);
    check((rho + 1.0).abs() < 1e-12, format!("inverse spearman {rho}, freqs {inv:.4?}"))?;
    Ok(format!("uniform {freq:.4?} within ±{bound:.4}; inverse spearman={rho}"))
}

fn reparameterization_statistics() -> Outcome {
    let n = 100_000;
    let mut g = Graph::new();
    let mu = g.constant(Tensor::zeros(&[n, 1]));
    let sigma = g.constant(Tensor::full(&[n, 1], 1.0));
    let mut rng = stream(3, "acceptance.eps", &[]);
    let (z, _) = reparameterize(&mut g, mu, sigma, Noise::Sample(&mut rng)).map_err(|e| e.to_string())?;
    let v = g.value(z).data();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    check(mean.abs() <= 0.0095, format!("mean {mean}"))?;
    check((0.99..=1.01).contains(&std), format!("std {std}"))?;
    Ok(format!("mean={mean:.5} std={std:.5}"))
}

fn variance_calibration() -> Outcome {
    let err = |e: MedcError| e.to_string();
    let syn = generate_synthetic(&SyntheticConfig {
        num_classes: 2,
        feature_dim: 4,
        frames: 4,
        counts: CountSpec::Explicit(vec![8, 8]),
        test_per_class: 0,
        class_sep: 4.0,
        noise: 0.5,
        temporal_jitter: 0.3,
        seed: 4,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    let data = syn.train;
    let gamma = vec![0.9, 0.1];
    let model_cfg = ModelConfig {
        trunk_dim: 8,
        hidden_dim: 8,
        embed_dim: 4,
        ..ModelConfig::default()
    };
    let model = MedcModel::new(model_cfg.clone(), 4, 2, &[(ExpertKind::LongTailed, gamma.clone())], 4).map_err(err)?;
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: data.len(),
        active_experts: vec![ExpertKind::LongTailed],
        losses: LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 1.0,
            ..LossConfig::default()
        },
        model: model_cfg,
        ..TrainConfig::default()
    };
    let stats = compute_label_stats(&data.records, 2, 100, 10).map_err(err)?;
    let mut trainer = Trainer::with_model(cfg, &data, stats, 4, model).map_err(err)?;
    let variance_path = [".phi_var.", ".f_q.", ".f_k.", ".f_v."];
    trainer.freeze_except(|name| variance_path.iter().any(|p| name.contains(p)));
    let frozen_before: Vec<_> = trainer
        .model
        .params
        .iter()
        .filter(|p| !variance_path.iter().any(|v| p.name.contains(v)))
        .map(|p| p.tensor.clone())
        .collect();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut noise = vec![stream(4, "acceptance.calibration", &[])];
    for _ in 0..500 {
        trainer.step(&data, std::slice::from_ref(&all), &mut noise).map_err(err)?;
    }
    let frozen_after: Vec<_> = trainer
        .model
        .params
        .iter()
        .filter(|p| !variance_path.iter().any(|v| p.name.contains(v)))
        .map(|p| p.tensor.clone())
        .collect();
    check(frozen_before == frozen_after, "frozen parameters moved".into())?;
    let mut per_class = [0.0f64; 2];
    let mut n = [0usize; 2];
    for r in &data.records {
        let e = trainer.model.embed(&r.features, ExpertKind::LongTailed).map_err(err)?;
        let c = r.positives()[0];
        per_class[c] += e.sigma.data().iter().map(|s| s * s).sum::<f64>() / e.sigma.len() as f64;
        n[c] += 1;
    }
    let means: Vec<f64> = per_class.iter().zip(n).map(|(s, k)| s / k as f64).collect();
    for c in 0..2 {
        check(
            (means[c] - gamma[c]).abs() <= 0.05,
            format!("class {c}: mean sigma^2 {:.4} vs target {}", means[c], gamma[c]),
        )?;
    }
    Ok(format!("mean sigma^2 = [{:.4}, {:.4}] vs targets [0.9, 0.1] after 500 steps", means[0], means[1]))
}

/// AP from the precision/recall curve: at every cutoff k of the ranked
/// list, add precision@k times the recall gained at k.
fn pr_curve_ap(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let p = pos.iter().filter(|&&b| b).count();
    if p == 0 {
        return None;
    }
    let n = scores.len();
    let mut ranked: Vec<usize> = Vec::with_capacity(n);
    let mut left: Vec<usize> = (0..n).collect();
    while !left.is_empty() {
        // pick the highest score, earliest index on ties
        let mut best = 0;
        for j in 1..left.len() {
            if scores[left[j]] > scores[left[best]] {
                best = j;
            }
        }
        ranked.push(left.remove(best));
    }
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for k in 1..=n {
        let tp = ranked[..k].iter().filter(|&&i| pos[i]).count() as f64;
        let recall = tp / p as f64;
        ap += (tp / k as f64) * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(ap)
}

fn ap_oracle_equivalence() -> Outcome {
    let mut rng = stream(5, "acceptance.ap", &[]);
    let mut compared = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if !pos.iter().any(|&b| b) {
            pos[rng.random_range(0..n)] = true;
        }
        let a = average_precision(&scores, &pos).ok_or("AP undefined with a positive")?;
        let b = pr_curve_ap(&scores, &pos).expect("oracle has a positive");
        check((a - b).abs() <= 1e-12, format!("trial {trial}: {a} vs {b} for {scores:?} {pos:?}"))?;
        compared += 1;
    }
    let hand = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    check((hand - 0.833_333_333_3).abs() <= 1e-9, format!("hand case {hand}"))?;
    Ok(format!("{compared} random instances agree to 1e-12; hand case {hand:.10}"))
}

fn synthetic_trend() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let variants: Vec<Variant> = ["E1", "E2", "E3", "MEDC"].iter().map(|s| Variant::parse(s).unwrap()).collect();
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let results: Vec<Result<Vec<(f64, f64)>, MedcError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let (cfg, variants) = (&cfg, &variants);
                scope.spawn(move || {
                    let syn = generate_synthetic(&SyntheticConfig {
                        class_sep: 5.0,
                        seed: 1000 + seed,
                        ..SyntheticConfig::default()
                    })?;
                    let stats = compute_label_stats(&syn.train.records, 20, 50, 10)?;
                    let rows = ablate(cfg, variants, &syn.train, &syn.test, &stats, &[seed])?;
                    Ok(rows
                        .iter()
                        .map(|r| (r.means[0].unwrap_or(f64::NAN), r.means[3].unwrap_or(f64::NAN)))
                        .collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut tail_wins = 0;
    let mut overall_wins = 0;
    let mut single_tail = Vec::new();
    let mut lines = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        let rows = r.map_err(|e| e.to_string())?;
        let (overall, tail): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let medc_tail = tail[3];
        tail_wins += (medc_tail >= tail[0] && medc_tail >= tail[1] && medc_tail >= tail[2]) as usize;
        overall_wins += (overall[3] >= overall[0]) as usize;
        single_tail.extend_from_slice(&tail[..3]);
        lines.push(format!(
            "      seed {seed}: tail E1/E2/E3/MEDC = {:.3}/{:.3}/{:.3}/{:.3}, overall E1/MEDC = {:.3}/{:.3}",
            tail[0], tail[1], tail[2], tail[3], overall[0], overall[3]
        ));
    }
    let mean_single = single_tail.iter().sum::<f64>() / single_tail.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    println!("{}", lines.join("\n"));
    check((0.3..=0.7).contains(&mean_single), format!("mean single-expert tail mAP {mean_single:.3} outside [0.3, 0.7]"))?;
    check(tail_wins >= 4, format!("MEDC tail mAP >= every single expert in {tail_wins}/5 seeds"))?;
    check(overall_wins >= 4, format!("MEDC overall mAP >= E1 in {overall_wins}/5 seeds"))?;
    check(secs < 900.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "tail wins {tail_wins}/5, overall wins {overall_wins}/5, mean single-expert tail mAP {mean_single:.3}, {secs:.0}s"
    ))
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

const SMALL_RUN: &str = r#"{
  "seed": 3,
  "data": {"num_classes": 20, "feature_dim": 32, "frames": 8, "class_sep": 5.0, "test_per_class": 10},
  "train": {"learning_rate": 0.005, "epochs": 2, "batch_size": 32},
  "eval": {"head_threshold": 50, "medium_threshold": 10}
}"#;

fn ablation_shape() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), "run.json", SMALL_RUN);
    let data = dir.path().join("train.medc");
    run_ok(medc_bin().arg("gen-data").arg("--config").arg(&cfg).arg("--out").arg(&data))?;
    let out = dir.path().join("ablation");
    run_ok(
        medc_bin()
            .arg("ablate")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .args(["--experts", "E1,E2,E3,E1+E2,E1+E3,E2+E3,MEDC", "--no-temporal-attention", "--seeds", "1"])
            .arg("--out")
            .arg(&out),
    )?;
    let csv = fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    check(header.len() == 7, format!("header {header:?}"))?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    check(rows.len() == 8, format!("{} rows", rows.len()))?;
    for r in &rows {
        check(
            r.len() == 7 && r[1..].iter().all(|v| v.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x))),
            format!("row {r:?}"),
        )?;
    }
    check(out.join("manifest.json").exists(), "no manifest".into())?;
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    Ok(format!("8 rows x 6 metrics: {}", names.join(" ")))
}

fn train_and_eval(dir: &Path, cfg: &Path, data: &Path, tag: &str) -> Result<Vec<u8>, String> {
    let run = dir.join(tag);
    run_ok(medc_bin().arg("train").arg("--config").arg(cfg).arg("--data").arg(data).arg("--out").arg(&run))?;
    let eval = run.join("eval");
    let test = data.with_file_name("train.test.medc");
    run_ok(
        medc_bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(run.join("checkpoint.json"))
            .arg("--data")
            .arg(&test)
            .arg("--out")
            .arg(&eval),
    )?;
    let mut bytes = fs::read(eval.join("metrics.csv")).map_err(|e| e.to_string())?;
    bytes.extend(fs::read(eval.join("per_class_ap.csv")).map_err(|e| e.to_string())?);
    Ok(bytes)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), "run.json", SMALL_RUN);
    let data = dir.path().join("train.medc");
    run_ok(medc_bin().arg("gen-data").arg("--config").arg(&cfg).arg("--out").arg(&data))?;
    let a = train_and_eval(dir.path(), &cfg, &data, "a")?;
    let b = train_and_eval(dir.path(), &cfg, &data, "b")?;
    check(a == b, "metrics CSVs differ between identical runs".into())?;
    Ok(format!("metrics.csv + per_class_ap.csv identical ({} bytes)", a.len()))
}

fn file_round_trip() -> Outcome {
    let err = |e: MedcError| e.to_string();
    let syn = generate_synthetic(&SyntheticConfig {
        counts: CountSpec::Explicit(vec![50; 20]),
        test_per_class: 0,
        multilabel_prob: 0.2,
        seed: 9,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    let ds: Dataset = syn.train;
    check(ds.len() == 1000, format!("{} records", ds.len()))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("d.medc");
    write_feature_file(&path, &ds).map_err(err)?;
    let back = read_feature_file(&path).map_err(err)?;
    check(back == ds, "round trip changed the dataset".into())?;

    let bytes = encode_dataset(&ds).map_err(err)?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let e1 = decode_dataset(&bad_magic).expect_err("bad magic accepted");
    check(matches!(e1, MedcError::Parse { offset: 0, .. }), format!("bad magic: {e1}"))?;
    let truncated = &bytes[..bytes.len() - 7];
    let e2 = decode_dataset(truncated).expect_err("truncated file accepted");
    check(matches!(e2, MedcError::Parse { .. }), format!("truncated: {e2}"))?;
    let cut = dir.path().join("cut.medc");
    fs::write(&cut, truncated).map_err(|e| e.to_string())?;
    let out = medc_bin()
        .args(["eval", "--checkpoint", "missing.json", "--data"])
        .arg(&cut)
        .arg("--out")
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.code() == Some(1), format!("CLI exit {:?}", out.status.code()))?;
    Ok(format!("1000 records exact ({} bytes); \"{e1}\"; \"{e2}\"", bytes.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 sampler fidelity", sampler_fidelity),
        ("3 reparameterization statistics", reparameterization_statistics),
        ("4 variance calibration", variance_calibration),
        ("5 AP oracle equivalence", ap_oracle_equivalence),
        ("6 synthetic long-tailed trend", synthetic_trend),
        ("7 ablation harness shape", ablation_shape),
        ("8 determinism", determinism),
        ("9 file-format round trip", file_round_trip),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
