//! Subcommand drivers: experiment runs, the five-way ablation comparison,
//! and margin sweeps. All artifacts land under the configured output
//! directory with a manifest; a `.partial` marker flags interrupted runs.
//!
//! Independent (method, seed) runs execute on a worker pool sized by
//! `jobs`; results are collected in run order and written by the calling
//! thread, so outputs are byte-identical regardless of worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::alcycle::{run_cycle, Method, RunState};
use crate::config::ExperimentConfig;
use crate::datagen::OpenSetTask;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, fmt_sig6, write_aggregate_csv, write_csv, write_dat, AggregateRow, CycleReport,
    PlotMetric,
};
use crate::seeding::derive_run_seed;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Write into a non-empty output directory.
    pub force: bool,
    /// Worker threads for independent runs.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { force: false, jobs: 1 }
    }
}

impl RunOptions {
    fn validate(&self) -> Result<()> {
        if self.jobs < 1 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Creates the output directory, refusing to touch a non-empty one unless
/// forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to write anyway)",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

const PARTIAL_MARKER: &str = ".partial";

/// Runs `body` bracketed by the `.partial` marker: written before any
/// artifact, removed only on success.
fn with_partial_marker(out: &Path, body: impl FnOnce() -> Result<Vec<String>>) -> Result<()> {
    let marker = out.join(PARTIAL_MARKER);
    fs::write(&marker, "run in progress or failed; outputs may be incomplete\n")
        .map_err(|e| Error::io(&marker, e))?;
    let artifacts = body()?;
    log::info!("wrote {} artifacts under {}", artifacts.len(), out.display());
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(())
}

struct RunOutput {
    method: Method,
    seed: u64,
    reports: Vec<CycleReport>,
}

/// One full run: per-run streams derived from the master seed, the method
/// name, and the seed entry, so adding a method never perturbs another
/// method's draws. The seed entry itself is what reports display.
fn execute_run(cfg: &ExperimentConfig, task: &OpenSetTask, method: Method, seed: u64) -> Result<RunOutput> {
    let al = cfg.al_config(method);
    let stream = derive_run_seed(cfg.al.seed, method.as_str(), seed);
    let mut state = RunState::new(task, &al, stream, seed)?;
    let mut reports = Vec::new();
    for _ in 0..al.cycles {
        let report = run_cycle(&mut state, task, &al)?;
        let stop = report.truncated;
        reports.push(report);
        if stop {
            break;
        }
    }
    Ok(RunOutput { method, seed, reports })
}

fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {}", e)))
}

/// Executes methods x seeds and returns outputs in that order.
fn execute_all(
    cfg: &ExperimentConfig,
    task: &OpenSetTask,
    methods: &[Method],
    opts: &RunOptions,
) -> Result<Vec<RunOutput>> {
    let runs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = worker_pool(opts.jobs)?;
    pool.install(|| {
        runs.par_iter()
            .map(|&(m, s)| execute_run(cfg, task, m, s))
            .collect()
    })
}

fn run_csv_name(method: Method, seed: u64) -> String {
    format!("runs/{}_seed_{}.csv", method.as_str(), seed)
}

/// Writes per-run CSVs, the aggregate CSV, and per-metric plot files;
/// returns the relative artifact paths.
fn write_run_artifacts(out: &Path, outputs: &[RunOutput]) -> Result<(Vec<String>, Vec<AggregateRow>)> {
    let mut artifacts = Vec::new();
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    for o in outputs {
        let rel = run_csv_name(o.method, o.seed);
        write_csv(&o.reports, &out.join(&rel))?;
        artifacts.push(rel);
    }

    let all_reports: Vec<CycleReport> = outputs.iter().flat_map(|o| o.reports.iter().cloned()).collect();
    let rows = aggregate(&all_reports);
    write_aggregate_csv(&rows, &out.join("aggregate.csv"))?;
    artifacts.push("aggregate.csv".into());

    let dat_dir = out.join("dat");
    fs::create_dir_all(&dat_dir).map_err(|e| Error::io(&dat_dir, e))?;
    for metric in PlotMetric::ALL {
        let rel = format!("dat/{}.dat", metric.file_stem());
        write_dat(&rows, metric, &out.join(&rel))?;
        artifacts.push(rel);
    }
    Ok((artifacts, rows))
}

fn write_manifest(out: &Path, artifacts: &[String], cfg: &ExperimentConfig) -> Result<()> {
    let mut text = String::from("# artifacts\n");
    for a in artifacts {
        text.push_str(a);
        text.push('\n');
    }
    text.push_str("\n# resolved config\n");
    let snapshot = toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config snapshot: {}", e)))?;
    text.push_str(&snapshot);
    let path = out.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// The aggregate row of each method's last cycle, in method-name order.
fn final_cycle_rows(rows: &[AggregateRow]) -> Vec<&AggregateRow> {
    let mut finals: Vec<&AggregateRow> = Vec::new();
    for row in rows {
        match finals.last() {
            Some(last) if last.method == row.method => *finals.last_mut().unwrap() = row,
            _ => finals.push(row),
        }
    }
    finals
}

fn print_method_summaries(rows: &[AggregateRow]) {
    for row in final_cycle_rows(rows) {
        println!(
            "{}: final accuracy {} (sd {}), cumulative precision {} (sd {}) over {} seed(s) at cycle {}",
            row.method.as_str(),
            fmt_sig6(row.test_accuracy.mean),
            fmt_sig6(row.test_accuracy.sd),
            fmt_sig6(row.query_precision_cumulative.mean),
            fmt_sig6(row.query_precision_cumulative.sd),
            row.n_seeds,
            row.cycle,
        );
    }
}

/// Runs every configured (method, seed) pair and writes the full artifact
/// set.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    cfg.validate()?;
    opts.validate()?;
    let methods = cfg.parsed_methods()?;
    let out = PathBuf::from(&cfg.out_dir);
    prepare_out_dir(&out, opts.force)?;
    with_partial_marker(&out, || {
        let task = cfg.build_task()?;
        let outputs = execute_all(cfg, &task, &methods, opts)?;
        let (mut artifacts, rows) = write_run_artifacts(&out, &outputs)?;
        write_manifest(&out, &artifacts, cfg)?;
        artifacts.push("manifest.txt".into());
        print_method_summaries(&rows);
        Ok(artifacts)
    })
}

const ABLATION_CSV_HEADER: &str = "method,final_cycle,n_seeds,test_accuracy_mean,test_accuracy_sd,query_precision_cumulative_mean,query_precision_cumulative_sd,energy_auroc_mean,energy_auroc_sd";

fn write_ablation_table(out: &Path, rows: &[AggregateRow]) -> Result<()> {
    let finals = final_cycle_rows(rows);
    let mut text = String::from(ABLATION_CSV_HEADER);
    text.push('\n');
    println!("method          accuracy            cum. precision      auroc");
    for row in finals {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            row.method.as_str(),
            row.cycle,
            row.n_seeds,
            fmt_sig6(row.test_accuracy.mean),
            fmt_sig6(row.test_accuracy.sd),
            fmt_sig6(row.query_precision_cumulative.mean),
            fmt_sig6(row.query_precision_cumulative.sd),
            fmt_sig6(row.energy_auroc.mean),
            fmt_sig6(row.energy_auroc.sd),
        );
        println!(
            "{:<15} {:>8} (sd {:>8}) {:>8} (sd {:>8}) {:>8}",
            row.method.as_str(),
            fmt_sig6(row.test_accuracy.mean),
            fmt_sig6(row.test_accuracy.sd),
            fmt_sig6(row.query_precision_cumulative.mean),
            fmt_sig6(row.query_precision_cumulative.sd),
            fmt_sig6(row.energy_auroc.mean),
        );
    }
    let path = out.join("ablation.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs all five methods on one task and emits the final-cycle comparison
/// table alongside the usual run artifacts. The configured method list is
/// ignored.
pub fn cmd_ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    cfg.validate()?;
    opts.validate()?;
    let mut methods = Method::ALL.to_vec();
    methods.sort_by_key(|m| m.as_str());
    // The manifest snapshot reflects what actually ran.
    let mut resolved = cfg.clone();
    resolved.methods = methods.iter().map(|m| m.as_str().to_string()).collect();
    let out = PathBuf::from(&cfg.out_dir);
    prepare_out_dir(&out, opts.force)?;
    with_partial_marker(&out, || {
        let task = resolved.build_task()?;
        let outputs = execute_all(&resolved, &task, &methods, opts)?;
        let (mut artifacts, rows) = write_run_artifacts(&out, &outputs)?;
        write_ablation_table(&out, &rows)?;
        artifacts.push("ablation.csv".into());
        write_manifest(&out, &artifacts, &resolved)?;
        artifacts.push("manifest.txt".into());
        Ok(artifacts)
    })
}

/// Final-cycle means of one sweep cell.
struct SweepCell {
    accuracy: f64,
    auroc: f64,
    precision: f64,
}

fn sweep_matrix(
    name: &str,
    delta_k: &[f64],
    delta_u: &[f64],
    cells: &[Option<SweepCell>],
    pick: impl Fn(&SweepCell) -> f64,
) -> String {
    let mut text = format!("# {}: rows delta_k, columns delta_u\n", name);
    text.push_str("# delta_k\\delta_u");
    for du in delta_u {
        let _ = write!(text, " {}", fmt_sig6(*du));
    }
    text.push('\n');
    for (i, dk) in delta_k.iter().enumerate() {
        let _ = write!(text, "{}", fmt_sig6(*dk));
        for j in 0..delta_u.len() {
            match &cells[i * delta_u.len() + j] {
                Some(cell) => {
                    let _ = write!(text, " {}", fmt_sig6(pick(cell)));
                }
                None => text.push_str(" nan"),
            }
        }
        text.push('\n');
    }
    text
}

/// Runs the full pipeline per margin grid point (skipping degenerate
/// points where delta_k >= delta_u) and writes final accuracy, AUROC, and
/// cumulative precision matrices.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    cfg.validate()?;
    opts.validate()?;
    let sweep = cfg.sweep.as_ref().ok_or_else(|| {
        Error::Config("sweep requires a [sweep] section with delta_k and delta_u grids".into())
    })?;
    let out = PathBuf::from(&cfg.out_dir);
    prepare_out_dir(&out, opts.force)?;
    let delta_k = sweep.delta_k.clone();
    let delta_u = sweep.delta_u.clone();
    with_partial_marker(&out, || {
        let task = cfg.build_task()?;
        let points: Vec<(f64, f64)> = delta_k
            .iter()
            .flat_map(|&dk| delta_u.iter().map(move |&du| (dk, du)))
            .collect();
        let pool = worker_pool(opts.jobs)?;
        let cells: Vec<Option<SweepCell>> = pool.install(|| {
            points
                .par_iter()
                .map(|&(dk, du)| -> Result<Option<SweepCell>> {
                    if dk >= du {
                        log::warn!(
                            "sweep point delta_k={} delta_u={} skipped: margins must satisfy delta_k < delta_u",
                            dk,
                            du
                        );
                        return Ok(None);
                    }
                    let mut point_cfg = cfg.clone();
                    point_cfg.margins.delta_k = dk;
                    point_cfg.margins.delta_u = du;
                    let mut reports = Vec::new();
                    for output in cfg
                        .seeds
                        .iter()
                        .map(|&s| execute_run(&point_cfg, &task, Method::Ebosal, s))
                    {
                        reports.extend(output?.reports);
                    }
                    let rows = aggregate(&reports);
                    let last = rows.last().expect("at least one cycle row");
                    Ok(Some(SweepCell {
                        accuracy: last.test_accuracy.mean,
                        auroc: last.energy_auroc.mean,
                        precision: last.query_precision_cumulative.mean,
                    }))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut artifacts = Vec::new();
        for (name, pick) in [
            ("sweep_accuracy.dat", (|c: &SweepCell| c.accuracy) as fn(&SweepCell) -> f64),
            ("sweep_auroc.dat", |c: &SweepCell| c.auroc),
            ("sweep_precision.dat", |c: &SweepCell| c.precision),
        ] {
            let stem = name.trim_end_matches(".dat");
            let text = sweep_matrix(stem, &delta_k, &delta_u, &cells, pick);
            let path = out.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            artifacts.push(name.to_string());
        }
        write_manifest(&out, &artifacts, cfg)?;
        artifacts.push("manifest.txt".into());
        for (idx, &(dk, du)) in points.iter().enumerate() {
            match &cells[idx] {
                Some(c) => println!(
                    "delta_k={} delta_u={}: accuracy {}, auroc {}, cum. precision {}",
                    fmt_sig6(dk),
                    fmt_sig6(du),
                    fmt_sig6(c.accuracy),
                    fmt_sig6(c.auroc),
                    fmt_sig6(c.precision)
                ),
                None => println!("delta_k={} delta_u={}: skipped (delta_k >= delta_u)", fmt_sig6(dk), fmt_sig6(du)),
            }
        }
        Ok(artifacts)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Overrides, TaskConfig, TaskKind};

    fn tiny_config(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = out.to_string_lossy().into_owned();
        cfg.seeds = vec![0, 1];
        cfg.methods = vec!["ebosal".into(), "random".into()];
        cfg.task = TaskConfig {
            classes: 4,
            dim: 3,
            train_per_class: 8,
            test_per_class: 3,
            mismatch_ratio: 0.5,
            init_fraction: 0.25,
            ..TaskConfig::default()
        };
        cfg.al.cycles = 2;
        cfg.al.budget = 4;
        cfg.model.hidden = vec![6];
        cfg.model.epochs_per_cycle = 2;
        cfg.model.batch_size = 4;
        cfg
    }

    #[test]
    fn refuses_non_empty_out_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("existing.txt"), "x").unwrap();
        let cfg = tiny_config(dir.path());
        let err = cmd_run(&cfg, &RunOptions::default()).unwrap_err().to_string();
        assert!(err.contains("--force"), "{}", err);

        cmd_run(&cfg, &RunOptions { force: true, jobs: 1 }).unwrap();
        assert!(dir.path().join("aggregate.csv").exists());
    }

    #[test]
    fn run_writes_expected_artifacts_and_clears_marker() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("results");
        let cfg = tiny_config(&out);
        cmd_run(&cfg, &RunOptions::default()).unwrap();
        for rel in [
            "runs/ebosal_seed_0.csv",
            "runs/ebosal_seed_1.csv",
            "runs/random_seed_0.csv",
            "runs/random_seed_1.csv",
            "aggregate.csv",
            "dat/test_accuracy.dat",
            "dat/query_precision_cumulative.dat",
            "dat/energy_auroc.dat",
            "manifest.txt",
        ] {
            assert!(out.join(rel).exists(), "missing {}", rel);
        }
        assert!(!out.join(PARTIAL_MARKER).exists());
        let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains("runs/ebosal_seed_0.csv"));
        assert!(manifest.contains("[task]"));
    }

    #[test]
    fn failed_run_retains_partial_marker() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("results");
        let mut cfg = tiny_config(&out);
        cfg.task.kind = TaskKind::Csv;
        cfg.task.csv_path = Some(dir.path().join("missing.csv").to_string_lossy().into_owned());
        assert!(cmd_run(&cfg, &RunOptions::default()).is_err());
        assert!(out.join(PARTIAL_MARKER).exists());
    }

    #[test]
    fn jobs_zero_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("r"));
        let err = cmd_run(&cfg, &RunOptions { force: false, jobs: 0 })
            .unwrap_err()
            .to_string();
        assert!(err.contains("--jobs"), "{}", err);
    }

    #[test]
    fn parallel_run_matches_serial_run_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let out1 = dir.path().join("serial");
        let out2 = dir.path().join("parallel");
        cmd_run(&tiny_config(&out1), &RunOptions::default()).unwrap();
        cmd_run(&tiny_config(&out2), &RunOptions { force: false, jobs: 4 }).unwrap();
        // Same config modulo out_dir; compare everything but the manifest
        // (whose snapshot embeds the differing out_dir).
        for rel in ["runs/ebosal_seed_0.csv", "aggregate.csv", "dat/test_accuracy.dat"] {
            let a = std::fs::read(out1.join(rel)).unwrap();
            let b = std::fs::read(out2.join(rel)).unwrap();
            assert_eq!(a, b, "{} differs between serial and parallel", rel);
        }
    }

    #[test]
    fn sweep_requires_grid_and_marks_degenerate_cells() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sweep");
        let mut cfg = tiny_config(&out);
        cfg.methods = vec!["ebosal".into()];
        let err = cmd_sweep(&cfg, &RunOptions::default()).unwrap_err().to_string();
        assert!(err.contains("sweep"), "{}", err);

        cfg.sweep = Some(crate::config::SweepSpec {
            delta_k: vec![-6.0, -0.5],
            delta_u: vec![-1.0],
        });
        cmd_sweep(&cfg, &RunOptions::default()).unwrap();
        let acc = std::fs::read_to_string(out.join("sweep_accuracy.dat")).unwrap();
        let lines: Vec<&str> = acc.lines().collect();
        assert!(lines[1].starts_with("# delta_k\\delta_u -1.00000"));
        assert!(lines[2].starts_with("-6.00000 ") && !lines[2].contains("nan"), "{}", lines[2]);
        // delta_k = -0.5 >= delta_u = -1 is degenerate.
        assert_eq!(lines[3], "-0.500000 nan");
        assert!(out.join("sweep_auroc.dat").exists());
        assert!(out.join("sweep_precision.dat").exists());
        assert!(!out.join(PARTIAL_MARKER).exists());
    }

    #[test]
    fn ablate_emits_five_method_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ablate");
        let mut cfg = tiny_config(&out);
        cfg.seeds = vec![0];
        cmd_ablate(&cfg, &RunOptions::default()).unwrap();
        let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 6, "header + 5 methods:\n{}", table);
        let order: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(order, vec!["ebosal", "entropy", "no_ekus", "no_ess", "random"]);
    }

    #[test]
    fn override_plumbing_reaches_runner() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let ov = Overrides {
            seed: Some(3),
            method: Some("random".into()),
            out: Some(out.to_string_lossy().into_owned()),
        };
        let mut cfg = crate::config::parse_config(None, &ov).unwrap();
        cfg.task = tiny_config(&out).task;
        cfg.al.cycles = 1;
        cfg.al.budget = 2;
        cfg.model.hidden = vec![4];
        cfg.model.epochs_per_cycle = 1;
        cfg.model.batch_size = 4;
        cmd_run(&cfg, &RunOptions::default()).unwrap();
        assert!(out.join("runs/random_seed_3.csv").exists());
    }
}
