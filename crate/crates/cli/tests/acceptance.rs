//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 10 and 14 share one reference workspace, built through the
//! `nsti` binary (corpus seed 17, model seed 1, adaptation seeds 101..=103).
//! Set `NSTI_ACCEPTANCE_WORKSPACE` to keep it (and its run cache) between
//! invocations; otherwise a temporary directory is used. The process exits
//! non-zero on a failed criterion only when `NSTI_ACCEPTANCE_STRICT` is set.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nsti::adapt::{self, AdaptConfig, Setting};
use nsti::corpus::{normalize, read_split, splits, Recording};
use nsti::ctc::{ctc_loss, LogProbLattice};
use nsti::diffcore::{Graph, Tensor};
use nsti::harness::experiments::{run_experiment, ExperimentOptions, ExperimentReport, TimingRow, Workspace};
use nsti::harness::report::{emit, Format};
use nsti::harness::wer;
use nsti::model::{Mode, ModelConfig, SUBSAMPLE};
use nsti::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nsti")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "nsti {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// ---------------------------------------------------------------------------
// 1. CTC against path enumeration

fn enumerate_probability(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = probs[0].len();
    let blank = classes - 1;
    let paths = classes.pow(probs.len() as u32);
    let mut total = 0.0;
    for code in 0..paths {
        let mut c = code;
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        let mut p = 1.0;
        for row in probs {
            let k = c % classes;
            c /= classes;
            p *= row[k];
            if k != prev && k != blank {
                collapsed.push(k);
            }
            prev = k;
        }
        if collapsed == labels {
            total += p;
        }
    }
    total
}

fn ctc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (mut checked, mut worst_p, mut worst_row) = (0, 0.0f64, 0.0f64);
    while checked < 1200 {
        let frames = r.random_range(1..=5);
        let vocab = r.random_range(1..=3);
        let len = r.random_range(0..=3);
        let labels: Vec<usize> = (0..len).map(|_| r.random_range(0..vocab)).collect();
        let probs: Vec<Vec<f64>> = (0..frames)
            .map(|_| {
                let raw: Vec<f64> = (0..=vocab).map(|_| r.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let lattice = LogProbLattice::from_probs(&probs, 1).expect("valid lattice");
        let Ok(out) = ctc_loss(&lattice, &labels) else {
            continue;
        };
        let brute = enumerate_probability(&probs, &labels);
        worst_p = worst_p.max(((-out.loss).exp() - brute).abs());
        for t in 0..frames {
            worst_row = worst_row.max(out.grad_logits.row(t).iter().sum::<f64>().abs());
        }
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_p <= 1e-9 && worst_row <= 1e-9 && secs < 120.0,
        format!("{checked} lattices, max |p - brute| {worst_p:.2e}, max row sum {worst_row:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. Whole-model gradients against central differences

fn model_loss_and_grads(model: &Checkpoint, x: &Tensor<f64>, labels: &[usize]) -> (f64, Vec<Tensor<f64>>) {
    let g = Graph::new();
    let params = model.bind(&g, true);
    let xv = g.constant(x.clone());
    let out = model
        .build(&g, &params, xv, Mode::TrainFrozenStats, model.limits())
        .unwrap();
    let lattice = LogProbLattice::new(g.value(out.log_probs).clone(), SUBSAMPLE).unwrap();
    let ctc = ctc_loss(&lattice, labels).unwrap();
    let root = g
        .external_scalar(out.logits, ctc.loss, ctc.grad_logits.into_data())
        .unwrap();
    let mut grads = g.backward(root).unwrap();
    let tensors = params.iter().map(|&v| grads.take(v).expect("trainable")).collect();
    (ctc.loss, tensors)
}

fn model_loss(model: &Checkpoint, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    ctc_loss(&model.forward(x).unwrap(), labels).unwrap().loss
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let mut model = Checkpoint::init(ModelConfig::default()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(vec![16, 32], (0..16 * 32).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
    let labels = [2, 5];
    let (_, analytic) = model_loss_and_grads(&model, &x, &labels);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let names = model.names().to_vec();
    for (p, name) in names.iter().enumerate() {
        let n = model.params()[p].len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params()[p].data()[i];
            model.params_mut()[p].data_mut()[i] = orig + h;
            let up = model_loss(&model, &x, &labels);
            model.params_mut()[p].data_mut()[i] = orig - h;
            let down = model_loss(&model, &x, &labels);
            model.params_mut()[p].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic[p].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        if rel > worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 120.0,
        format!(
            "{} parameters in {} tensors, worst relative error {worst:.2e} ({worst_name}), {secs:.1}s",
            model.parameter_count(),
            names.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Running statistics survive adaptation

fn stats_bits(c: &Checkpoint) -> Vec<u64> {
    c.stats()
        .iter()
        .flat_map(|s| s.mean.iter().chain(&s.var))
        .map(|v| v.to_bits())
        .collect()
}

fn frozen_stats(ws: &Workspace) -> Outcome {
    let base = ws.base().unwrap();
    let before = stats_bits(&base);
    let rec = ws.split(splits::TARGET_TEST).unwrap()[0].truncated(480).unwrap();
    let mut changed = Vec::new();
    for setting in ["shuffled", "ordered", "online", "awmc"] {
        let mut c = AdaptConfig::new(Setting::parse(setting).unwrap(), base.config().bins);
        c.epochs = if c.setting.single_pass() { 1 } else { 2 };
        c.lr = 1e-3;
        let adapted = adapt::run(&base, &rec, &c).unwrap();
        let params_moved = adapted.checkpoint.params() != base.params();
        if stats_bits(&adapted.checkpoint) != before || !params_moved {
            changed.push(setting);
        }
    }
    let base_intact = stats_bits(&base) == before;
    outcome(
        changed.is_empty() && base_intact,
        if changed.is_empty() {
            "statistics bit-identical after shuffled, ordered, online and awmc runs (parameters did move)".into()
        } else {
            format!("statistics changed or parameters frozen in {changed:?}")
        },
    )
}

// ---------------------------------------------------------------------------
// Reference workspace

struct Reference {
    ws: Workspace,
    _tmp: Option<tempfile::TempDir>,
    pipeline: Result<(f64, Duration, ExperimentReport, usize), String>,
}

fn reference_root() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("NSTI_ACCEPTANCE_WORKSPACE") {
        Some(p) => (PathBuf::from(p), None),
        None => {
            let tmp = tempfile::tempdir().expect("temp dir");
            (tmp.path().to_path_buf(), Some(tmp))
        }
    }
}

/// gen-corpus, train-base and settings_table through the binary, timed.
fn build_reference(root: &Path) -> Result<(f64, Duration, ExperimentReport, usize), String> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let config = config.to_str().unwrap();
    let corpus = root.join("corpus");
    let ckpt = root.join("base.ckpt");
    let t0 = Instant::now();
    run_cli(&["--config", config, "gen-corpus", "--out", corpus.to_str().unwrap()])?;
    let log = run_cli(&[
        "--config",
        config,
        "train-base",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ])?;
    let log: serde_json::Value = serde_json::from_str(&log).map_err(|e| e.to_string())?;
    let dev = log["best_dev"]["wer"].as_f64().ok_or("train log has no best_dev")?;
    run_cli(&[
        "--config",
        config,
        "experiment",
        "settings_table",
        "--workspace",
        root.to_str().unwrap(),
        "--emit",
        "json,csv",
    ])?;
    let elapsed = t0.elapsed();
    let reports = root.join("reports");
    let text = std::fs::read_to_string(reports.join("settings_table.json")).map_err(|e| e.to_string())?;
    let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| format!("invalid JSON: {e}"))?;
    let csv = std::fs::read_to_string(reports.join("settings_table.csv")).map_err(|e| e.to_string())?;
    let csv_rows = csv.lines().count() - 1;
    Ok((dev, elapsed, report, csv_rows))
}

fn options() -> ExperimentOptions {
    ExperimentOptions::default()
}

fn experiment(ws: &Workspace, name: &str) -> Result<ExperimentReport, String> {
    let mut report = run_experiment(name, ws, &options()).map_err(|e| e.to_string())?;
    emit(
        &mut report,
        &ws.reports_dir(),
        &[Format::Json, Format::Csv, Format::Svg],
    )
    .map_err(|e| e.to_string())?;
    Ok(report)
}

fn test_wer(report: &ExperimentReport, condition: &str, split: &str) -> f64 {
    report.row(condition, split).map_or(f64::NAN, |r| r.mean_wer)
}

fn processing_seconds(rows: &[TimingRow], condition: &str, split: &str) -> Option<f64> {
    rows.iter()
        .find(|t| t.condition == condition && t.split == split)
        .map(|t| t.total_rtf * t.audio_seconds)
}

fn core_gain(ws: &Workspace, table: &ExperimentReport) -> Outcome {
    let split = splits::TARGET_TEST;
    let werr = table
        .summary_value(&format!("werr.shuffled.{split}"))
        .unwrap_or(f64::NAN);
    // Timings are not part of the stored report; re-read them from the sidecar.
    let timing: Vec<TimingRow> = std::fs::read_to_string(ws.reports_dir().join("settings_table.timing.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    let secs = processing_seconds(&timing, "shuffled", split);
    outcome(
        werr >= 0.10 && secs.is_some_and(|s| s < 600.0),
        format!(
            "unadapted {:.4} -> shuffled {:.4}, mean WERR {:.1}%, adaptation time {}",
            test_wer(table, "unadapted", split),
            test_wer(table, "shuffled", split),
            100.0 * werr,
            secs.map_or("unknown".into(), |s| format!("{s:.0}s"))
        ),
    )
}

fn first_epoch(ws: &Workspace) -> Outcome {
    match experiment(ws, "epoch_curve") {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let share = r.summary_value("first_epoch_share").unwrap_or(f64::NAN);
            let wer = &r.series[0].y;
            outcome(
                share >= 0.5,
                format!(
                    "WER by epoch [{}], first-epoch share {:.1}%",
                    wer.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(", "),
                    100.0 * share
                ),
            )
        }
    }
}

fn settings_order(table: &ExperimentReport) -> Outcome {
    let s = splits::TARGET_TEST;
    let [sh, or, on, un] = ["shuffled", "ordered", "online", "unadapted"].map(|c| test_wer(table, c, s));
    outcome(
        sh <= or && or <= on && on <= un && sh < un,
        format!("shuffled {sh:.4}, ordered {or:.4}, online {on:.4}, unadapted {un:.4}"),
    )
}

fn transform_ablation(ws: &Workspace) -> Outcome {
    match experiment(ws, "transform_table") {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let s = splits::NOISY_TEST;
            let del = r
                .summary_value(&format!("deletion_rate.unadapted.{s}"))
                .unwrap_or(f64::NAN);
            let row = |c: &str| {
                r.row(c, s)
                    .map_or((f64::NAN, f64::NAN), |x| (x.mean_wer, x.mean_blank_ratio))
            };
            let (un, _) = row("unadapted");
            let (sa, sa_blank) = row("specaugment");
            let (id, id_blank) = row("identity");
            outcome(
                del > 0.5 && id_blank > sa_blank && id > sa && sa < un,
                format!(
                    "unadapted deletion rate {:.1}%; WER unadapted {un:.4}, specaugment {sa:.4}, identity {id:.4}; blank ratio specaugment {sa_blank:.3}, identity {id_blank:.3}",
                    100.0 * del
                ),
            )
        }
    }
}

fn duration_sweep(ws: &Workspace) -> Outcome {
    match experiment(ws, "duration_sweep") {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let get = |k: &str| {
                (
                    r.summary_value(&format!("werr.{k}")).unwrap_or(f64::NAN),
                    r.summary_value(&format!("werr_stdev.{k}")).unwrap_or(0.0),
                )
            };
            let points: Vec<(&str, (f64, f64))> = ["1x", "4x", "16x", "full"].iter().map(|&k| (k, get(k))).collect();
            let small = points[0].1 .0 < 0.01;
            let monotone = points
                .windows(2)
                .all(|w| w[1].1 .0 + w[0].1 .1.max(w[1].1 .1) >= w[0].1 .0);
            outcome(
                small && monotone,
                format!(
                    "WERR {}",
                    points
                        .iter()
                        .map(|(k, (m, s))| format!("{k} {:.1}% (sd {:.1})", 100.0 * m, 100.0 * s))
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            )
        }
    }
}

fn cross_recording(ws: &Workspace) -> Outcome {
    match experiment(ws, "cross_recording") {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let frac = r.summary_value("worse_than_self_fraction").unwrap_or(f64::NAN);
            let pairs = r.summary_value("pairs").unwrap_or(0.0);
            let e1 = r.summary_value("werr.cross_epoch_1").unwrap_or(f64::NAN);
            let e5 = r
                .summary_value(&format!("werr.cross_epoch_{}", options().epochs))
                .unwrap_or(f64::NAN);
            outcome(
                frac >= 0.8,
                format!(
                    "{:.0}% of {pairs} pairs worse than self-adapted; cross WERR after epoch 1 {:.1}%, after epoch {} {:.1}%",
                    100.0 * frac,
                    100.0 * e1,
                    options().epochs,
                    100.0 * e5
                ),
            )
        }
    }
}

fn nst_vs_nsti(ws: &Workspace) -> Outcome {
    match experiment(ws, "nst_vs_nsti") {
        Err(e) => outcome(false, e),
        Ok(r) => {
            let s = splits::TARGET_TEST;
            let (nst, nsti, both, un) = (
                test_wer(&r, "nst", s),
                test_wer(&r, "nsti", s),
                test_wer(&r, "nst_then_nsti", s),
                test_wer(&r, "unadapted", s),
            );
            outcome(
                nsti <= nst,
                format!(
                    "(soft) NSTI {nsti:.4} vs best-dev NST {nst:.4}; NST then NSTI {both:.4}; unadapted {un:.4}; adaptation set holds {:.0}x the frames of a test recording",
                    r.summary_value("data_ratio").unwrap_or(f64::NAN)
                ),
            )
        }
    }
}

// ---------------------------------------------------------------------------
// 11. Determinism of `adapt`

fn determinism(ws: &Workspace) -> Outcome {
    let rec = ws.corpus_dir().join(splits::TARGET_TEST).join("rec_0000.bin");
    let ckpt = ws.checkpoint_path();
    let run = |workers: &str| {
        run_cli(&[
            "adapt",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--recording",
            rec.to_str().unwrap(),
            "--setting",
            "shuffled",
            "--transform",
            "specaugment",
            "--seed",
            "101",
            "--workers",
            workers,
        ])
    };
    match (run("1"), run("1"), run("4")) {
        (Ok(a), Ok(b), Ok(c)) => outcome(
            a == b && a == c && !a.is_empty(),
            format!(
                "{} bytes; two runs {}, pool sizes 1 and 4 {}",
                a.len(),
                if a == b { "identical" } else { "differ" },
                if a == c { "identical" } else { "differ" }
            ),
        ),
        (a, b, c) => outcome(false, format!("{:?}", [a.err(), b.err(), c.err()])),
    }
}

// ---------------------------------------------------------------------------
// 12. WER against exhaustive edit scripts

/// Every complete edit script, as (cost, substitutions, insertions, deletions).
fn scripts(r: &[usize], h: &[usize], acc: (usize, usize, usize, usize), out: &mut Vec<(usize, usize, usize, usize)>) {
    let (c, s, i, d) = acc;
    match (r.split_first(), h.split_first()) {
        (None, None) => out.push(acc),
        (Some((_, rt)), None) => scripts(rt, h, (c + 1, s, i, d + 1), out),
        (None, Some((_, ht))) => scripts(r, ht, (c + 1, s, i + 1, d), out),
        (Some((a, rt)), Some((b, ht))) => {
            if a == b {
                scripts(rt, ht, acc, out);
            } else {
                scripts(rt, ht, (c + 1, s + 1, i, d), out);
            }
            scripts(rt, h, (c + 1, s, i, d + 1), out);
            scripts(r, ht, (c + 1, s, i + 1, d), out);
        }
    }
}

fn all_sequences(max_len: usize, symbols: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<usize>| {
                (0..symbols).map(move |k| {
                    let mut n = s.clone();
                    n.push(k);
                    n
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn wer_oracle() -> Outcome {
    let seqs = all_sequences(4, 3);
    let mut mismatches = 0;
    let mut pairs = 0;
    for r in &seqs {
        for h in &seqs {
            let mut all = Vec::new();
            scripts(r, h, (0, 0, 0, 0), &mut all);
            let best = all.iter().map(|a| a.0).min().unwrap();
            // Ties prefer substitutions, then deletions, then insertions.
            let pick = all
                .iter()
                .filter(|a| a.0 == best)
                .max_by_key(|a| (a.1, a.3, std::cmp::Reverse(a.2)))
                .unwrap();
            let w = wer(r, h);
            let expected_wer = best as f64 / r.len().max(1) as f64;
            if (w.substitutions, w.insertions, w.deletions) != (pick.1, pick.2, pick.3) || w.wer != expected_wer {
                mismatches += 1;
            }
            pairs += 1;
        }
    }
    outcome(mismatches == 0, format!("{pairs} pairs, {mismatches} mismatches"))
}

// ---------------------------------------------------------------------------
// 13. Stitching

fn stitching(ws: &Workspace) -> Outcome {
    let base = ws.base().unwrap();
    let rec: Recording = read_split(&ws.corpus_dir(), splits::TARGET_TEST).unwrap().remove(0);
    let x = normalize(&rec.spectrogram);
    let mut constant = base.clone();
    let names = constant.names().to_vec();
    for (p, name) in names.iter().enumerate() {
        if name == "out.w" {
            constant.params_mut()[p].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if name == "out.b" {
            for (k, v) in constant.params_mut()[p].data_mut().iter_mut().enumerate() {
                *v = 0.3 * k as f64 - 1.0;
            }
        }
    }
    let (w, s) = (nsti::windowing::DEFAULT_WINDOW, nsti::windowing::DEFAULT_STRIDE);
    let flat = adapt::transcribe_lattice(&constant, &x, w, s).unwrap();
    let first = flat.row(0).to_vec();
    let exact = (0..flat.frames()).all(|t| flat.row(t).iter().zip(&first).all(|(a, b)| a.to_bits() == b.to_bits()));
    let real = adapt::transcribe_lattice(&base, &x, w, s).unwrap();
    let worst = (0..real.frames())
        .map(|t| (real.row(t).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        exact && worst <= 1e-12,
        format!(
            "constant model stitched to {} identical rows: {exact}; max |row sum - 1| {worst:.1e} over {} frames",
            flat.frames(),
            real.frames()
        ),
    )
}

// ---------------------------------------------------------------------------

fn pipeline(reference: &Reference) -> Outcome {
    match &reference.pipeline {
        Err(e) => outcome(false, e.clone()),
        Ok((dev, elapsed, report, csv_rows)) => {
            let expected: usize = report.rows.iter().map(|r| r.recordings.len()).sum();
            let shape = report.rows.len() == 12 && *csv_rows == expected;
            outcome(
                *dev <= 0.10 && elapsed.as_secs_f64() < 1800.0 && shape,
                format!(
                    "source-dev error {:.2}%, gen-corpus + train-base + settings_table in {:.0}s, {} rows, {csv_rows} CSV lines",
                    100.0 * dev,
                    elapsed.as_secs_f64(),
                    report.rows.len()
                ),
            )
        }
    }
}

fn main() {
    let (root, tmp) = reference_root();
    std::fs::create_dir_all(&root).expect("workspace dir");
    let ws = Workspace::new(&root);
    let reference = Reference {
        pipeline: build_reference(&root),
        ws,
        _tmp: tmp,
    };
    let ws = &reference.ws;
    let table = reference.pipeline.as_ref().map(|p| p.2.clone());
    let needs_table = |f: &dyn Fn(&ExperimentReport) -> Outcome| match &table {
        Ok(t) => f(t),
        Err(e) => outcome(false, format!("no reference workspace: {e}")),
    };
    let ready = table.is_ok();
    let guarded = |f: &dyn Fn() -> Outcome| {
        if ready {
            f()
        } else {
            outcome(false, "no reference workspace")
        }
    };

    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "CTC oracle", ctc_oracle()),
        (2, "gradient integrity", gradient_integrity()),
        (3, "frozen statistics", guarded(&|| frozen_stats(ws))),
        (4, "core NSTI gain", needs_table(&|t| core_gain(ws, t))),
        (5, "first-epoch majority", guarded(&|| first_epoch(ws))),
        (6, "settings ordering", needs_table(&settings_order)),
        (7, "transform ablation", guarded(&|| transform_ablation(ws))),
        (8, "duration sweep", guarded(&|| duration_sweep(ws))),
        (9, "cross-recording transfer", guarded(&|| cross_recording(ws))),
        (10, "NST vs NSTI", guarded(&|| nst_vs_nsti(ws))),
        (11, "determinism", guarded(&|| determinism(ws))),
        (12, "WER oracle", wer_oracle()),
        (13, "stitching", guarded(&|| stitching(ws))),
        (14, "end-to-end pipeline", pipeline(&reference)),
    ];
    let mut failed = 0;
    for (n, name, o) in &results {
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {:<4} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 && std::env::var_os("NSTI_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
