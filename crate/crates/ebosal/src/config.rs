//! Experiment configuration: a nested TOML document with CLI overrides.
//!
//! Every section rejects unknown keys so typos fail loudly, and every
//! field has a default so a minimal (even empty) file is a complete
//! configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alcycle::{AlConfig, DukRefresh, Method, NlScope};
use crate::datagen::{
    import_samples, make_task, make_task_from_samples, GaussianMixtureSpec, GeneratorSpec,
    OpenSetTask, RingClustersSpec,
};
use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::model::InitScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Gaussian,
    Rings,
    Csv,
}

/// Task section. The struct is flat (kind plus every generator knob) so
/// unknown-key rejection stays exact; knobs irrelevant to the chosen kind
/// are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub classes: u32,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Gaussian kind: class centers are drawn uniformly in
    /// [-center_box, center_box]^dim.
    pub center_box: f64,
    pub class_std: f64,
    /// Gaussian kind: modes per class; more than one gives classes
    /// internal structure a handful of labels cannot cover.
    pub subclusters: usize,
    /// Gaussian kind: std of mode-center offsets around the class center.
    pub subcluster_spread: f64,
    /// Rings kind: radius spacing between consecutive class rings.
    pub radius_step: f64,
    pub noise_std: f64,
    /// Csv kind: file to import.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    /// Csv kind: per-class fraction held out for testing.
    pub test_fraction: f64,
    pub mismatch_ratio: f64,
    /// Task generation / class split seed (not the run seed).
    pub seed: u64,
    pub init_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Gaussian,
            classes: 20,
            dim: 8,
            train_per_class: 130,
            test_per_class: 50,
            center_box: 3.0,
            class_std: 1.0,
            subclusters: 3,
            subcluster_spread: 2.0,
            radius_step: 4.0,
            noise_std: 0.5,
            csv_path: None,
            test_fraction: 0.2,
            mismatch_ratio: 0.3,
            seed: 11,
            init_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlSettings {
    pub cycles: usize,
    pub budget: usize,
    pub rho: f64,
    pub beta: f64,
    /// Master seed; per-run streams are derived from it together with the
    /// method name and the seed-list entry.
    pub seed: u64,
    pub share_backbone: bool,
    pub warm_start: bool,
    pub duk_refresh: DukRefresh,
    pub nl_scope: NlScope,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter_threshold: Option<f64>,
    pub use_invalid_as_unknown: bool,
    pub auto_margins: bool,
    /// Likely-known cut percentile in auto-margin mode; deeper than the
    /// delta_k percentile so filter leakage stays below the budget.
    pub auto_filter_percentile: f64,
    /// Global L2 gradient cap per optimizer step; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AlSettings {
    fn default() -> Self {
        AlSettings {
            cycles: 5,
            budget: 30,
            rho: 0.05,
            beta: 0.1,
            seed: 42,
            share_backbone: false,
            warm_start: false,
            duk_refresh: DukRefresh::PerEpoch,
            nl_scope: NlScope::PseudoPlusPool,
            filter_threshold: None,
            use_invalid_as_unknown: false,
            auto_margins: true,
            auto_filter_percentile: 30.0,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelHyper {
    pub hidden: Vec<usize>,
    pub epochs_per_cycle: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            hidden: vec![64, 64],
            epochs_per_cycle: 60,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            init: InitScheme::default(),
        }
    }
}

/// Margin grid for the sweep subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub delta_k: Vec<f64>,
    pub delta_u: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: String,
    /// One independent run per entry (and per method).
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    pub task: TaskConfig,
    pub al: AlSettings,
    pub margins: MarginConfig,
    pub model: ModelHyper,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: "results".into(),
            seeds: vec![0, 1, 2],
            methods: vec!["ebosal".into()],
            task: TaskConfig::default(),
            al: AlSettings::default(),
            margins: MarginConfig::default(),
            model: ModelHyper::default(),
            sweep: None,
        }
    }
}

/// Command-line values that beat file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the whole seed list.
    pub seed: Option<u64>,
    /// Replaces the whole method list.
    pub method: Option<String>,
    pub out: Option<String>,
}

/// Loads the config file (defaults when absent) and applies overrides.
/// The result is validated.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?
        }
    };
    if let Some(s) = overrides.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &overrides.method {
        cfg.methods = vec![m.clone()];
    }
    if let Some(o) = &overrides.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config(
                "seeds must be unique (they name per-run output files)".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        self.parsed_methods()?;
        self.validate_task()?;
        if self.model.epochs_per_cycle < 1 {
            return Err(Error::Config("model.epochs_per_cycle must be at least 1".into()));
        }
        if !(self.al.grad_clip.is_finite() && self.al.grad_clip >= 0.0) {
            return Err(Error::Config(format!(
                "al.grad_clip must be non-negative (0 disables), got {}",
                self.al.grad_clip
            )));
        }
        // Margin, optimizer, and al-section checks ride on the runtime
        // config assembly.
        self.al_config(Method::Ebosal).validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.delta_k.is_empty() || sweep.delta_u.is_empty() {
                return Err(Error::Config("sweep.delta_k and sweep.delta_u must be non-empty".into()));
            }
            if sweep.delta_k.iter().chain(&sweep.delta_u).any(|v| !v.is_finite()) {
                return Err(Error::Config("sweep grid values must be finite".into()));
            }
        }
        Ok(())
    }

    fn validate_task(&self) -> Result<()> {
        let t = &self.task;
        if t.classes < 2 {
            return Err(Error::Config(format!("task.classes must be at least 2, got {}", t.classes)));
        }
        if t.dim < 1 {
            return Err(Error::Config("task.dim must be at least 1".into()));
        }
        if !(t.mismatch_ratio > 0.0 && t.mismatch_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "task.mismatch_ratio must be in (0, 1], got {}",
                t.mismatch_ratio
            )));
        }
        match t.kind {
            TaskKind::Csv => {
                if t.csv_path.is_none() {
                    return Err(Error::Config("task.csv_path is required when task.kind = \"csv\"".into()));
                }
                if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "task.test_fraction must be in (0, 1), got {}",
                        t.test_fraction
                    )));
                }
            }
            TaskKind::Gaussian | TaskKind::Rings => {
                if t.train_per_class < 1 || t.test_per_class < 1 {
                    return Err(Error::Config(
                        "task.train_per_class and task.test_per_class must be at least 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    /// Builds (or imports) the task this config describes.
    pub fn build_task(&self) -> Result<OpenSetTask> {
        let t = &self.task;
        match t.kind {
            TaskKind::Gaussian => make_task(
                &GeneratorSpec::GaussianMixture(GaussianMixtureSpec {
                    classes: t.classes as usize,
                    dim: t.dim,
                    train_per_class: t.train_per_class,
                    test_per_class: t.test_per_class,
                    center_box: t.center_box,
                    class_std: t.class_std,
                    subclusters: t.subclusters,
                    subcluster_spread: t.subcluster_spread,
                }),
                t.mismatch_ratio,
                t.seed,
            ),
            TaskKind::Rings => make_task(
                &GeneratorSpec::RingClusters(RingClustersSpec {
                    classes: t.classes as usize,
                    dim: t.dim,
                    train_per_class: t.train_per_class,
                    test_per_class: t.test_per_class,
                    radius_step: t.radius_step,
                    noise_std: t.noise_std,
                }),
                t.mismatch_ratio,
                t.seed,
            ),
            TaskKind::Csv => {
                let path = t.csv_path.as_ref().expect("validated");
                let (dim, rows) = import_samples(Path::new(path))?;
                make_task_from_samples(dim, rows, t.mismatch_ratio, t.test_fraction, t.seed)
            }
        }
    }

    /// Assembles the runtime config for one method.
    pub fn al_config(&self, method: Method) -> AlConfig {
        AlConfig {
            cycles: self.al.cycles,
            budget: self.al.budget,
            init_fraction: self.task.init_fraction,
            rho: self.al.rho,
            beta: self.al.beta,
            margins: self.margins,
            hidden: self.model.hidden.clone(),
            epochs_per_cycle: self.model.epochs_per_cycle,
            batch_size: self.model.batch_size,
            lr: self.model.lr,
            momentum: self.model.momentum,
            weight_decay: self.model.weight_decay,
            init: self.model.init,
            method,
            share_backbone: self.al.share_backbone,
            warm_start: self.al.warm_start,
            duk_refresh: self.al.duk_refresh,
            nl_scope: self.al.nl_scope,
            filter_threshold: self.al.filter_threshold,
            use_invalid_as_unknown: self.al.use_invalid_as_unknown,
            auto_margins: self.al.auto_margins,
            auto_filter_percentile: self.al.auto_filter_percentile,
            grad_clip: (self.al.grad_clip > 0.0).then_some(self.al.grad_clip),
        }
    }
}
