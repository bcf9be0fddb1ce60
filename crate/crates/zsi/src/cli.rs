//! Command-line front end: dataset splitting, evaluation, gradient
//! checking, and the synthetic transfer experiment.
//!
//! Exit codes are a stable contract for CI: 0 success, 1 validation
//! failure (bad metrics, failed checks, thresholds not met), 2 for I/O
//! and parse errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::annotations::{
    build_test_set, build_training_set, load_split, parse_dataset, serialize_dataset,
    AnnotationError, ClassSplit, Dataset,
};
use crate::metrics::{
    evaluate_with, parse_predictions, EvalOptions, EvalReport, EvalSetting, MetricSet,
};
use crate::semheads::{run_gradient_check, GradCheckConfig, TrainConfig};
use crate::synthlab::{
    default_train_config, run_transfer_experiment_with_table, EmbeddingKind, SyntheticScenario,
    Thresholds,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

/// Environment variable naming the directory that relative data paths
/// are resolved against when they do not exist relative to the CWD.
pub const DATA_DIR_ENV: &str = "ZSI_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "zsi", version, about = "Zero-shot instance segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition a COCO-style annotation file into seen-train / test sets.
    Split(SplitArgs),
    /// Score predictions against ground truth under a zero-shot setting.
    Eval(EvalArgs),
    /// Finite-difference check of the analytic gradients, per block.
    Gradcheck(GradcheckArgs),
    /// Run the desk-scale seen-to-unseen transfer experiment.
    Toytrain(ToytrainArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// COCO-format annotation JSON.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Built-in split name (48/17 or 65/15) or a path to a split JSON.
    #[arg(long, default_value = "48/17")]
    pub split: String,
    /// Directory receiving train.json and test.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth annotation JSON (typically the test split).
    #[arg(long)]
    pub annotations: PathBuf,
    /// COCO-results-style prediction JSON array.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "48/17")]
    pub split: String,
    /// zsd | zsi | gzsd | gzsi
    #[arg(long)]
    pub setting: String,
    /// Comma-separated recall IoU thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.5, 0.6])]
    pub iou_thresholds: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    /// Write the full-precision JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 6)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Test hook: corrupt the named block's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct ToytrainArgs {
    /// Scenario JSON; the shipped default is used when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Replace the scenario's embeddings with one-hot vectors.
    #[arg(long)]
    pub one_hot: bool,
    /// Word-vector text file (word2vec format) supplying the class table;
    /// tokens must be named seen0.., unseen0.. and background.
    #[arg(long, conflicts_with = "one_hot")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolve a path against the CWD first, then against `$ZSI_DATA_DIR`.
pub fn resolve_path(p: &Path) -> PathBuf {
    if p.exists() || p.is_absolute() {
        return p.to_path_buf();
    }
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        let candidate = Path::new(&dir).join(p);
        if candidate.exists() {
            return candidate;
        }
    }
    p.to_path_buf()
}

fn read_file(p: &Path) -> Result<Vec<u8>, (i32, String)> {
    let p = resolve_path(p);
    std::fs::read(&p).map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", p.display())))
}

fn load_split_arg(name: &str) -> Result<ClassSplit, (i32, String)> {
    let resolved;
    let arg = if name == "48/17" || name == "65/15" {
        name
    } else {
        resolved = resolve_path(Path::new(name));
        resolved.to_str().unwrap_or(name)
    };
    load_split(arg).map_err(map_ann_err)
}

fn map_ann_err(e: AnnotationError) -> (i32, String) {
    let code = match &e {
        AnnotationError::Io(_) | AnnotationError::Parse { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    };
    (code, e.to_string())
}

/// Run a parsed command, writing human output to `out`; returns the
/// process exit code.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> i32 {
    let result = match cli.command {
        Command::Split(a) => cmd_split(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Toytrain(a) => cmd_toytrain(&a, out),
    };
    match result {
        Ok(code) => code,
        Err((code, msg)) => {
            let _ = writeln!(out, "error: {msg}");
            code
        }
    }
}

type CmdResult = Result<i32, (i32, String)>;

fn class_counts(d: &Dataset) -> Vec<(String, usize)> {
    let mut counts: std::collections::BTreeMap<&str, usize> =
        d.categories.iter().map(|c| (c.name.as_str(), 0)).collect();
    let by_id: std::collections::BTreeMap<u64, &str> =
        d.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    for a in &d.annotations {
        if let Some(name) = by_id.get(&a.category_id) {
            *counts.get_mut(name).unwrap() += 1;
        }
    }
    counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn cmd_split(a: &SplitArgs, out: &mut dyn std::io::Write) -> CmdResult {
    let raw = read_file(&a.annotations)?;
    let dataset = parse_dataset(&raw).map_err(map_ann_err)?;
    let split = load_split_arg(&a.split)?;
    let train = build_training_set(&dataset, &split);
    let test = build_test_set(&dataset, &split);
    std::fs::create_dir_all(&a.out)
        .map_err(|e| (EXIT_IO, format!("cannot create {}: {e}", a.out.display())))?;
    let write = |name: &str, d: &Dataset| -> Result<(), (i32, String)> {
        let path = a.out.join(name);
        std::fs::write(&path, serialize_dataset(d))
            .map_err(|e| (EXIT_IO, format!("cannot write {}: {e}", path.display())))
    };
    write("train.json", &train)?;
    write("test.json", &test)?;
    if dataset.annotations.is_empty() {
        let _ = writeln!(out, "warning: annotation file contains no instances");
    }
    let _ = writeln!(
        out,
        "train: {} images, {} instances | test: {} images, {} instances",
        train.images.len(),
        train.annotations.len(),
        test.images.len(),
        test.annotations.len()
    );
    for (set, d) in [("train", &train), ("test", &test)] {
        for (name, n) in class_counts(d) {
            let _ = writeln!(out, "  {set:<5} {name:<20} {n}");
        }
    }
    Ok(EXIT_OK)
}

fn print_metric_row(out: &mut dyn std::io::Write, label: &str, m: &MetricSet) {
    let recalls: Vec<String> =
        m.recall_at_k.iter().map(|(t, r)| format!("R@{t:.1}={:.4}", r * 100.0)).collect();
    let _ = writeln!(out, "  {label:<8} {} mAP50={:.4}", recalls.join("  "), m.map50 * 100.0);
}

fn print_report(out: &mut dyn std::io::Write, report: &EvalReport) {
    let _ = writeln!(out, "setting: {}  (top-{})", report.setting, report.top_k);
    print_metric_row(out, "overall", &report.overall);
    if let Some(seen) = &report.seen {
        print_metric_row(out, "seen", seen);
    }
    if let Some(unseen) = &report.unseen {
        print_metric_row(out, "unseen", unseen);
    }
    if let Some(hm) = &report.harmonic_mean {
        let recalls: Vec<String> =
            hm.recall_at_k.iter().map(|(t, r)| format!("R@{t:.1}={:.4}", r * 100.0)).collect();
        let _ = writeln!(out, "  {:<8} {} mAP50={:.4}", "HM", recalls.join("  "), hm.map50 * 100.0);
    }
    for note in &report.notes {
        let _ = writeln!(out, "  note: {note}");
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), (i32, String)> {
    let json = serde_json::to_vec_pretty(value).expect("report serializes");
    std::fs::write(path, json)
        .map_err(|e| (EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> CmdResult {
    let setting = EvalSetting::from_name(&a.setting)
        .ok_or_else(|| (EXIT_VALIDATION, format!("unknown setting {:?}", a.setting)))?;
    let gt_raw = read_file(&a.annotations)?;
    let gt = parse_dataset(&gt_raw).map_err(map_ann_err)?;
    let pred_raw = read_file(&a.predictions)?;
    let preds = parse_predictions(&pred_raw)
        .map_err(|e| (EXIT_IO, format!("cannot parse predictions: {e}")))?;
    let split = load_split_arg(&a.split)?;
    let opts = EvalOptions {
        top_k: a.top_k,
        iou_thresholds: a.iou_thresholds.clone(),
        map_iou: crate::metrics::MAP_IOU,
    };
    let report = evaluate_with(&gt, &preds, &split, setting, &opts)
        .map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
    print_report(out, &report);
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn std::io::Write) -> CmdResult {
    let cfg = GradCheckConfig {
        seed: a.seed,
        batch: a.batch,
        visual_dim: a.visual_dim,
        embed_dim: a.embed_dim,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let report = run_gradient_check(&cfg, a.corrupt.as_deref())
        .map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
    let _ = writeln!(out, "{:<22} {:>12}  result", "block", "rel err");
    for b in &report.blocks {
        let status = if b.pass { "pass" } else { "FAIL" };
        let _ = writeln!(out, "{:<22} {:>12.4e}  {status}", b.name, b.rel_err);
    }
    Ok(if report.all_pass { EXIT_OK } else { EXIT_VALIDATION })
}

pub fn cmd_toytrain(a: &ToytrainArgs, out: &mut dyn std::io::Write) -> CmdResult {
    let mut scenario = match &a.scenario {
        Some(path) => {
            let raw = read_file(path)?;
            let text = String::from_utf8_lossy(&raw);
            SyntheticScenario::from_json(&text).map_err(|e| (EXIT_IO, e.to_string()))?
        }
        None => SyntheticScenario::default_scenario(),
    };
    if a.one_hot {
        scenario.embedding_kind = EmbeddingKind::OneHot;
    }
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let mut cfg: TrainConfig = default_train_config();
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    let table = match &a.embeddings {
        Some(path) => {
            let seen: Vec<String> = (0..scenario.n_seen).map(|i| format!("seen{i}")).collect();
            let unseen: Vec<String> =
                (0..scenario.n_unseen).map(|i| format!("unseen{i}")).collect();
            let table = crate::semheads::load_embeddings(
                &resolve_path(path),
                &seen,
                &unseen,
                "background",
                Some(scenario.effective_embed_dim()),
            )
            .map_err(|e| (EXIT_IO, e.to_string()))?;
            Some(table)
        }
        None => None,
    };
    let report = run_transfer_experiment_with_table(&scenario, &cfg, table)
        .map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
    let _ = writeln!(
        out,
        "seen top-1: {:.4}  unseen top-1: {:.4}  (chance {:.4})",
        report.seen_top1, report.unseen_top1, report.chance_unseen
    );
    for (name, acc) in &report.per_class {
        let _ = writeln!(out, "  {name:<12} {acc:.4}");
    }
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    // Threshold gate only applies when training actually ran.
    if a.steps == Some(0) {
        return Ok(EXIT_OK);
    }
    let t = Thresholds::shipped();
    let pass = match scenario.embedding_kind {
        EmbeddingKind::Structured => {
            report.seen_top1 >= t.seen_min_accuracy
                && report.unseen_top1 >= t.structured_unseen_min_accuracy
        }
        // One-hot embeddings are expected NOT to transfer.
        EmbeddingKind::OneHot => {
            report.unseen_top1 <= t.onehot_chance_multiplier * report.chance_unseen
        }
    };
    let _ = writeln!(out, "thresholds: {}", if pass { "pass" } else { "FAIL" });
    Ok(if pass { EXIT_OK } else { EXIT_VALIDATION })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn eval_defaults() {
        let cli = parse(&[
            "zsi", "eval", "--annotations", "gt.json", "--predictions", "p.json", "--setting",
            "zsd",
        ]);
        match cli.command {
            Command::Eval(a) => {
                assert_eq!(a.top_k, 100);
                assert_eq!(a.iou_thresholds, vec![0.4, 0.5, 0.6]);
                assert_eq!(a.split, "48/17");
            }
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn unknown_setting_is_validation_error() {
        let cli = parse(&[
            "zsi", "eval", "--annotations", "x", "--predictions", "y", "--setting", "bogus",
        ]);
        let mut buf = Vec::new();
        assert_eq!(run(cli, &mut buf), EXIT_VALIDATION);
        assert!(String::from_utf8_lossy(&buf).contains("unknown setting"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let cli = parse(&[
            "zsi",
            "eval",
            "--annotations",
            "/nonexistent/gt.json",
            "--predictions",
            "y",
            "--setting",
            "zsd",
        ]);
        let mut buf = Vec::new();
        assert_eq!(run(cli, &mut buf), EXIT_IO);
    }

    #[test]
    fn gradcheck_runs_clean_by_default() {
        let cli = parse(&["zsi", "gradcheck"]);
        let mut buf = Vec::new();
        assert_eq!(run(cli, &mut buf), EXIT_OK);
        let text = String::from_utf8_lossy(&buf);
        assert!(text.contains("detector.encode_w"));
        assert!(!text.contains("FAIL"));
    }

    #[test]
    fn gradcheck_corruption_fails_named_block() {
        let cli = parse(&["zsi", "gradcheck", "--corrupt", "mask.decode_b"]);
        let mut buf = Vec::new();
        assert_eq!(run(cli, &mut buf), EXIT_VALIDATION);
        let text = String::from_utf8_lossy(&buf);
        let fail_lines: Vec<&str> = text.lines().filter(|l| l.contains("FAIL")).collect();
        assert_eq!(fail_lines.len(), 1);
        assert!(fail_lines[0].contains("mask.decode_b"));
    }
}
