//! `metaroute` command line. Exit codes: 0 success, 1 invalid input or
//! configuration, 2 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::complexity::compare_bottlenecks;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::harness::config::RunConfig;
use crate::harness::sweep::run_sweep;
use crate::harness::{run_probe, train_cls_model, train_seg_model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metaroute", version, about = "Metadata-routed attention and FiLM experiments on synthetic MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the segmentation model on phantoms and save a checkpoint.
    TrainSeg(Common),
    /// Train the FiLM classifier on metadata-dependent slices.
    TrainCls(Common),
    /// Evaluate all 15 missing-modality scenarios.
    Sweep(Common),
    /// Parameter and FLOP comparison of the two bottleneck designs.
    Complexity(Common),
    /// Finite-difference checks of every differentiable op.
    Gradcheck(Common),
    /// Metadata permutation test and FiLM scale statistics.
    ProbePermutation(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

fn train_seg(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let (model, losses) = train_seg_model(cfg, None)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.9}");
    }
    write(&cfg.out, "seg_losses.csv", &csv)?;
    model.save(cfg.out.join("seg_model.ckpt"))?;
    let _ = writeln!(
        out,
        "trained {} steps: loss {:.4} -> {:.4}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_cls(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let (model, run) = train_cls_model(cfg)?;
    checkpoint::save(&model.store, cfg.out.join("cls_model.ckpt"))?;
    write(&cfg.out, "cls_metrics.json", &json(&run))?;
    let _ = writeln!(
        out,
        "train accuracy {:.4}, eval accuracy {:.4}",
        run.train_accuracy, run.eval_accuracy
    );
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let (report, models) = run_sweep(cfg)?;
    write(&cfg.out, "scenarios.csv", &report.to_csv())?;
    write(&cfg.out, "scenarios.json", &report.to_json())?;
    if cfg.sweep.checkpoint.is_none() && models.len() == 1 {
        models[0].save(cfg.out.join("seg_model.ckpt"))?;
    }
    for r in &report.scenarios {
        let tag: String = ["FLAIR", "T1c", "T1", "T2"]
            .iter()
            .zip(r.availability())
            .filter(|(_, a)| *a)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+");
        let _ = writeln!(out, "{tag:<18} dice {:.4}", r.mean_dice);
        eprintln!("{tag:<18} evaluated in {:.2}s", r.wall_time_s);
    }
    let _ = writeln!(out, "{:<18} dice {:.4}", "average", report.average_dice);
    Ok(())
}

fn complexity(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let report = compare_bottlenecks(&cfg.complexity.baseline, &cfg.complexity.ours)?;
    let cmp_csv = report.comparison_csv().expect("comparison report");
    write(&cfg.out, "complexity.csv", &report.to_csv())?;
    write(&cfg.out, "complexity_comparison.csv", &cmp_csv)?;
    write(&cfg.out, "complexity.txt", &report.to_text())?;
    let cmp = report.comparison.as_ref().expect("comparison report");
    let _ = writeln!(out, "params: {} -> {} ({:.1}% reduction)", cmp.baseline_params, report.total_params, cmp.params_reduction_pct);
    let _ = writeln!(out, "flops:  {} -> {} ({:.1}% reduction)", cmp.baseline_flops, report.total_flops, cmp.flops_reduction_pct);
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let seeds: Vec<u64> = (0..cfg.gradcheck.n_seeds).map(|i| cfg.seed + i).collect();
    let results = gradcheck::suite(&seeds)?;
    write(&cfg.out, "gradcheck.json", &json(&results))?;
    let mut failed = Vec::new();
    for r in &results {
        let _ = writeln!(
            out,
            "{:<15} seed {:<4} max rel err {:.3e} {}",
            r.name,
            r.seed,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(format!("{}@{}", r.name, r.seed));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NumericInstability {
            op: "gradcheck".into(),
            detail: format!("failed: {}", failed.join(", ")),
        })
    }
}

fn probe(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    let (_, report) = run_probe(cfg)?;
    write(&cfg.out, "probe.json", &json(&report))?;
    let _ = writeln!(
        out,
        "accuracy {:.4}, delta {:.4}, {:.0}% interval [{:.4}, {:.4}]",
        report.accuracy,
        report.delta_accuracy,
        report.confidence * 100.0,
        report.delta_ci.0,
        report.delta_ci.1
    );
    for (i, g) in report.mean_abs_gamma.iter().enumerate() {
        let _ = writeln!(out, "film stage {i}: mean |gamma| {g:.4}");
    }
    Ok(())
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    let (common, task): (&Common, fn(&RunConfig, &mut Vec<u8>) -> Result<()>) = match &cli.command {
        Command::TrainSeg(c) => (c, |cfg, o| train_seg(cfg, o)),
        Command::TrainCls(c) => (c, |cfg, o| train_cls(cfg, o)),
        Command::Sweep(c) => (c, |cfg, o| sweep(cfg, o)),
        Command::Complexity(c) => (c, |cfg, o| complexity(cfg, o)),
        Command::Gradcheck(c) => (c, |cfg, o| run_gradcheck(cfg, o)),
        Command::ProbePermutation(c) => (c, |cfg, o| probe(cfg, o)),
    };
    let mut buf = Vec::new();
    let result = load_config(common).and_then(|cfg| {
        std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
        task(&cfg, &mut buf)
    });
    let _ = out.write_all(&buf);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_INVALID
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("metaroute").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_prints_usage() {
        let (code, _, err) = run_args(&["frobnicate"]);
        assert_eq!(code, EXIT_INVALID);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn invalid_key_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[complexity.ours]\nn_tokenz = 4\n").unwrap();
        let (code, _, err) = run_args(&["complexity", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, EXIT_INVALID);
        assert!(err.contains("n_tokenz"), "{err}");
    }

    #[test]
    fn complexity_writes_csv_and_prints_reductions() {
        let dir = tempfile::tempdir().unwrap();
        let (code, out, _) = run_args(&["complexity", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("% reduction"), "{out}");
        let csv = std::fs::read_to_string(dir.path().join("complexity_comparison.csv")).unwrap();
        assert!(csv.starts_with("layer,kind,baseline_params"));
    }

    #[test]
    fn missing_config_file_is_invalid() {
        let (code, _, err) = run_args(&["sweep", "--config", "/nonexistent/run.toml"]);
        assert_eq!(code, EXIT_INVALID);
        assert!(err.contains("/nonexistent/run.toml"), "{err}");
    }
}
