//! Per-cycle and aggregate evaluation, CSV emission, and plot data files.
//!
//! Reports are written with a fixed column order and floats at 6
//! significant digits, lines terminated by a single newline, so identical
//! runs emit byte-identical files. Aggregation groups by (method, cycle);
//! NaN values (an AUROC with one class absent, or metrics of a truncated
//! cycle) are excluded from their group mean, and for AUROC the exclusion
//! count is reported in its own column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::alcycle::Method;
use crate::datagen::OpenSetTask;
use crate::error::{Error, Result};
use crate::model::DualEbm;

/// One row of experiment output.
#[derive(Debug, Clone)]
pub struct CycleReport {
    pub cycle: usize,
    pub seed: u64,
    pub method: Method,
    pub labeled_size: usize,
    pub spent_budget: usize,
    pub test_accuracy: f64,
    pub query_precision_cycle: f64,
    pub query_precision_cumulative: f64,
    pub energy_auroc: f64,
    pub mean_e_known: f64,
    pub mean_e_unknown: f64,
    pub fallback_engaged: bool,
    /// Set when the pool ran dry before the full budget could be spent.
    pub truncated: bool,
}

/// Known-class test accuracy of the classifier head; argmax ties resolve
/// to the lowest class index.
pub fn accuracy(model: &DualEbm, task: &OpenSetTask) -> Result<f64> {
    if task.test().is_empty() {
        return Err(Error::Contract("accuracy over an empty test set".into()));
    }
    let logits = model.ess_logits(&task.test_features()?)?;
    let (n, c) = logits.dims2()?;
    let data = logits.data();
    let mut correct = 0usize;
    for (i, s) in task.test().iter().enumerate() {
        let row = &data[i * c..(i + 1) * c];
        let mut arg = 0usize;
        for j in 1..c {
            if row[j] > row[arg] {
                arg = j;
            }
        }
        let truth = task
            .known_index(s.true_class())
            .ok_or_else(|| Error::Contract(format!("test sample {} has unknown class", s.pool_id)))?;
        if arg == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Probability that a random unknown-class sample scores above a random
/// known-class sample, ties counting one half (rank-sum form). NaN when
/// either group is empty.
pub fn auroc(unknown_scores: &[f64], known_scores: &[f64]) -> f64 {
    let (np, nn) = (unknown_scores.len(), known_scores.len());
    if np == 0 || nn == 0 {
        return f64::NAN;
    }
    // (score, is_unknown), sorted ascending; average ranks across ties.
    let mut all: Vec<(f64, bool)> = unknown_scores
        .iter()
        .map(|&s| (s, true))
        .chain(known_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0.total_cmp(&all[i].0).is_eq() {
            j += 1;
        }
        // Ranks are 1-based: positions i..j share the average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (np * (np + 1)) as f64 / 2.0;
    u / (np as f64 * nn as f64)
}

/// Formats a float with 6 significant digits; plain notation for moderate
/// magnitudes, scientific otherwise.
pub fn fmt_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..6).contains(&mag) {
        format!("{:.5e}", v)
    } else {
        let decimals = (5 - mag).max(0) as usize;
        format!("{:.*}", decimals, v)
    }
}

const REPORT_HEADER: &str = "cycle,seed,method,labeled_size,spent_budget,test_accuracy,query_precision_cycle,query_precision_cumulative,energy_auroc,mean_e_known,mean_e_unknown,fallback_engaged,truncated";

fn report_row(r: &CycleReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.cycle,
        r.seed,
        r.method.as_str(),
        r.labeled_size,
        r.spent_budget,
        fmt_sig6(r.test_accuracy),
        fmt_sig6(r.query_precision_cycle),
        fmt_sig6(r.query_precision_cumulative),
        fmt_sig6(r.energy_auroc),
        fmt_sig6(r.mean_e_known),
        fmt_sig6(r.mean_e_unknown),
        r.fallback_engaged,
        r.truncated,
    )
}

/// Writes reports as CSV: fixed column order, one header line, `\n`
/// terminators throughout.
pub fn write_csv(reports: &[CycleReport], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (reports.len() + 1));
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&report_row(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean and sample standard deviation (n-1 denominator, 0 when n = 1),
/// computed over the non-NaN values of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(values: &[f64]) -> MeanSd {
    let clean: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if clean.is_empty() {
        return MeanSd {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let n = clean.len() as f64;
    let mean = clean.iter().sum::<f64>() / n;
    let sd = if clean.len() == 1 {
        0.0
    } else {
        (clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanSd { mean, sd }
}

/// Per-(method, cycle) aggregate of the float metrics.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub method: Method,
    pub cycle: usize,
    pub n_seeds: usize,
    pub test_accuracy: MeanSd,
    pub query_precision_cycle: MeanSd,
    pub query_precision_cumulative: MeanSd,
    pub energy_auroc: MeanSd,
    /// Reports whose AUROC was NaN (one class absent) and therefore left
    /// out of the AUROC aggregate.
    pub auroc_dropped: usize,
    pub mean_e_known: MeanSd,
    pub mean_e_unknown: MeanSd,
}

/// Groups reports by (method, cycle), ordered by method name then cycle.
pub fn aggregate(reports: &[CycleReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(&'static str, usize), Vec<&CycleReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.method.as_str(), r.cycle)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((_, cycle), rows)| {
            let pick = |f: fn(&CycleReport) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
            let auroc_vals = pick(|r| r.energy_auroc);
            AggregateRow {
                method: rows[0].method,
                cycle,
                n_seeds: rows.len(),
                test_accuracy: mean_sd(&pick(|r| r.test_accuracy)),
                query_precision_cycle: mean_sd(&pick(|r| r.query_precision_cycle)),
                query_precision_cumulative: mean_sd(&pick(|r| r.query_precision_cumulative)),
                energy_auroc: mean_sd(&auroc_vals),
                auroc_dropped: auroc_vals.iter().filter(|v| v.is_nan()).count(),
                mean_e_known: mean_sd(&pick(|r| r.mean_e_known)),
                mean_e_unknown: mean_sd(&pick(|r| r.mean_e_unknown)),
            }
        })
        .collect()
}

const AGGREGATE_HEADER: &str = "method,cycle,n_seeds,test_accuracy_mean,test_accuracy_sd,query_precision_cycle_mean,query_precision_cycle_sd,query_precision_cumulative_mean,query_precision_cumulative_sd,energy_auroc_mean,energy_auroc_sd,auroc_dropped,mean_e_known_mean,mean_e_known_sd,mean_e_unknown_mean,mean_e_unknown_sd";

/// Writes aggregate rows as CSV in the same formatting regime as
/// [`write_csv`].
pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method.as_str(),
            r.cycle,
            r.n_seeds,
            fmt_sig6(r.test_accuracy.mean),
            fmt_sig6(r.test_accuracy.sd),
            fmt_sig6(r.query_precision_cycle.mean),
            fmt_sig6(r.query_precision_cycle.sd),
            fmt_sig6(r.query_precision_cumulative.mean),
            fmt_sig6(r.query_precision_cumulative.sd),
            fmt_sig6(r.energy_auroc.mean),
            fmt_sig6(r.energy_auroc.sd),
            r.auroc_dropped,
            fmt_sig6(r.mean_e_known.mean),
            fmt_sig6(r.mean_e_known.sd),
            fmt_sig6(r.mean_e_unknown.mean),
            fmt_sig6(r.mean_e_unknown.sd),
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Metrics with a companion plot data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMetric {
    TestAccuracy,
    QueryPrecisionCumulative,
    EnergyAuroc,
}

impl PlotMetric {
    pub const ALL: [PlotMetric; 3] = [
        PlotMetric::TestAccuracy,
        PlotMetric::QueryPrecisionCumulative,
        PlotMetric::EnergyAuroc,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            PlotMetric::TestAccuracy => "test_accuracy",
            PlotMetric::QueryPrecisionCumulative => "query_precision_cumulative",
            PlotMetric::EnergyAuroc => "energy_auroc",
        }
    }

    fn pick(self, row: &AggregateRow) -> MeanSd {
        match self {
            PlotMetric::TestAccuracy => row.test_accuracy,
            PlotMetric::QueryPrecisionCumulative => row.query_precision_cumulative,
            PlotMetric::EnergyAuroc => row.energy_auroc,
        }
    }
}

/// Writes one metric as whitespace-separated plot data: a comment header,
/// then one line per cycle with mean and sd columns per method. Cycles a
/// method never reached (early truncation) read as nan.
pub fn write_dat(rows: &[AggregateRow], metric: PlotMetric, path: &Path) -> Result<()> {
    let mut methods: Vec<&'static str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut cycles: Vec<usize> = rows.iter().map(|r| r.cycle).collect();
    cycles.sort_unstable();
    cycles.dedup();

    let cell: BTreeMap<(&str, usize), MeanSd> = rows
        .iter()
        .map(|r| ((r.method.as_str(), r.cycle), metric.pick(r)))
        .collect();

    let mut out = String::new();
    out.push_str("# cycle");
    for m in &methods {
        let _ = write!(out, " {}_mean {}_sd", m, m);
    }
    out.push('\n');
    for &c in &cycles {
        let _ = write!(out, "{}", c);
        for m in &methods {
            match cell.get(&(*m, c)) {
                Some(ms) => {
                    let _ = write!(out, " {} {}", fmt_sig6(ms.mean), fmt_sig6(ms.sd));
                }
                None => out.push_str(" nan nan"),
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
