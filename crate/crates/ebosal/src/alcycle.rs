//! The active-learning engine: per-cycle separator and scorer training,
//! pool filtering, uncertainty-energy scoring, selection, oracle call, and
//! pool update, plus the random/entropy baselines and ablation variants.
//!
//! One run is strictly sequential (each cycle depends on the pool state it
//! inherits); independent (seed, config) runs own their model, pool, and
//! RNG streams and may execute in parallel.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Sgd, SgdConfig, Tape, Tensor};
use crate::datagen::{balanced_batches, init_pool, OpenSetTask, OracleOutcome, PoolState, SampleId};
use crate::error::{Error, Result};
use crate::losses::{ekus_loss, ess_loss, MarginConfig};
use crate::metrics::{accuracy, aggregate, auroc, AggregateRow, CycleReport};
use crate::model::{free_energy_node, DualEbm, InitScheme};
use crate::seeding::derive_seed;

/// Selection strategies. `Ebosal` is the full pipeline; `NoEkus` and
/// `NoEss` each disable one stage; `Random` and `Entropy` are the
/// reference baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ebosal,
    Random,
    Entropy,
    NoEkus,
    NoEss,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ebosal,
        Method::Random,
        Method::Entropy,
        Method::NoEkus,
        Method::NoEss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ebosal => "ebosal",
            Method::Random => "random",
            Method::Entropy => "entropy",
            Method::NoEkus => "no_ekus",
            Method::NoEss => "no_ess",
        }
    }

    /// Whether this method trains the known/unknown separator.
    fn trains_separator(self) -> bool {
        matches!(self, Method::Ebosal | Method::NoEss)
    }

    /// Whether selection restricts candidates to the likely-known filter
    /// output.
    fn filters(self) -> bool {
        matches!(self, Method::Ebosal | Method::NoEss)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{}' (expected one of ebosal, random, entropy, no_ekus, no_ess)",
                    s
                ))
            })
    }
}

/// How often the pseudo-unknown set is re-selected during separator
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DukRefresh {
    /// Re-rank pool energies before every epoch (progressive refinement).
    PerEpoch,
    /// Select once at the start of the cycle.
    PerCycle,
}

/// Which samples the complementary-label term sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlScope {
    /// Only the pseudo-unknown half of each batch.
    PseudoHalf,
    /// The pseudo-unknown half plus an equal-size uniform draw from the
    /// rest of the unlabeled pool.
    PseudoPlusPool,
}

/// Calibration point: after this many completed warmup epochs, margin
/// auto-calibration (when enabled) re-derives delta_k/delta_u from pool
/// energy percentiles.
const AUTO_MARGIN_WARMUP_EPOCHS: usize = 5;
const AUTO_MARGIN_LOW_PCT: f64 = 30.0;
const AUTO_MARGIN_HIGH_PCT: f64 = 70.0;

/// Everything one active-learning run needs besides the task itself.
#[derive(Debug, Clone)]
pub struct AlConfig {
    /// Number of acquisition cycles.
    pub cycles: usize,
    /// Oracle calls per cycle.
    pub budget: usize,
    /// Fraction of known-class training samples labeled before cycle 0.
    pub init_fraction: f64,
    /// Pseudo-unknown fraction of the unlabeled pool.
    pub rho: f64,
    /// Weight of the scorer energy in the selection score.
    pub beta: f64,
    pub margins: MarginConfig,
    pub hidden: Vec<usize>,
    pub epochs_per_cycle: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
    pub method: Method,
    pub share_backbone: bool,
    /// Keep parameters across cycles instead of reinitializing.
    pub warm_start: bool,
    pub duk_refresh: DukRefresh,
    pub nl_scope: NlScope,
    /// Separate likely-known filter threshold; defaults to the active
    /// delta_k when unset.
    pub filter_threshold: Option<f64>,
    /// Feed queried-unknown (invalid) samples back into separator
    /// training as true unknowns.
    pub use_invalid_as_unknown: bool,
    /// Re-derive delta_k/delta_u from pool energy percentiles after a
    /// short warmup each cycle.
    pub auto_margins: bool,
    /// Pool-energy percentile used as the likely-known cut when
    /// auto_margins is on. Deliberately deeper than the delta_k
    /// percentile: scoring prefers high energies, so every unknown that
    /// leaks past the filter goes to the front of the queue, and the cut
    /// has to keep the leak smaller than the budget.
    pub auto_filter_percentile: f64,
    /// Global L2 cap on each batch gradient before the optimizer step.
    /// The contrastive and hinge terms are unbounded, so a runaway batch
    /// can otherwise blow up the weights at any learning rate.
    pub grad_clip: Option<f64>,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            cycles: 5,
            budget: 30,
            init_fraction: 0.05,
            rho: 0.05,
            beta: 0.1,
            margins: MarginConfig::default(),
            hidden: vec![64, 64],
            epochs_per_cycle: 60,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            init: InitScheme::default(),
            method: Method::Ebosal,
            share_backbone: false,
            warm_start: false,
            duk_refresh: DukRefresh::PerEpoch,
            nl_scope: NlScope::PseudoPlusPool,
            filter_threshold: None,
            use_invalid_as_unknown: false,
            auto_margins: true,
            auto_filter_percentile: 30.0,
            grad_clip: Some(5.0),
        }
    }
}

impl AlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles < 1 {
            return Err(Error::Config("al.cycles must be at least 1".into()));
        }
        if self.budget < 1 {
            return Err(Error::Config("al.budget must be at least 1".into()));
        }
        if !(self.init_fraction > 0.0 && self.init_fraction < 1.0) {
            return Err(Error::Config(format!(
                "task.init_fraction must be in (0, 1), got {}",
                self.init_fraction
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("al.rho must be in (0, 1), got {}", self.rho)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "al.beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        if let Some(t) = self.filter_threshold {
            if t.is_nan() {
                return Err(Error::Config("al.filter_threshold must not be NaN".into()));
            }
        }
        if !(self.auto_filter_percentile > 0.0 && self.auto_filter_percentile < 100.0) {
            return Err(Error::Config(format!(
                "al.auto_filter_percentile must be in (0, 100), got {}",
                self.auto_filter_percentile
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "al.grad_clip must be positive when set, got {}",
                    c
                )));
            }
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("model.hidden widths must be at least 1".into()));
        }
        self.margins.validate()?;
        self.sgd_config().validate()?;
        Ok(())
    }

    fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mutable state of one active-learning run.
pub struct RunState {
    pub pool: PoolState,
    pub model: DualEbm,
    pub history: Vec<CycleReport>,
    /// Margins in force this cycle; auto-calibration may move
    /// delta_k/delta_u away from the configured values.
    active_margins: MarginConfig,
    data_rng: ChaCha8Rng,
    init_rng: ChaCha8Rng,
    nl_rng: ChaCha8Rng,
    display_seed: u64,
    cycle: usize,
    separator_trained_this_cycle: bool,
}

impl RunState {
    /// `stream_seed` drives every random choice in the run; `display_seed`
    /// is what reports carry (the two coincide for library callers, while
    /// the CLI derives per-run streams and displays the seed-list entry).
    pub fn new(task: &OpenSetTask, cfg: &AlConfig, stream_seed: u64, display_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pool = init_pool(task, cfg.init_fraction, derive_seed(stream_seed, "pool"))?;
        let model = DualEbm::new(
            task.dim(),
            task.num_known(),
            &cfg.hidden,
            cfg.share_backbone,
            cfg.init,
            derive_seed(stream_seed, "model"),
        )?;
        Ok(RunState {
            pool,
            model,
            history: Vec::new(),
            active_margins: cfg.margins,
            data_rng: ChaCha8Rng::seed_from_u64(derive_seed(stream_seed, "data")),
            init_rng: ChaCha8Rng::seed_from_u64(derive_seed(stream_seed, "init")),
            nl_rng: ChaCha8Rng::seed_from_u64(derive_seed(stream_seed, "nl")),
            display_seed,
            cycle: 0,
            separator_trained_this_cycle: false,
        })
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn active_margins(&self) -> &MarginConfig {
        &self.active_margins
    }
}

/// Free energies of the current unlabeled pool under the separator head,
/// keyed by sample id. Empty pool gives an empty map.
fn pool_energies(state: &RunState, task: &OpenSetTask) -> Result<BTreeMap<SampleId, f64>> {
    let ids = state.pool.unlabeled_ids();
    if ids.is_empty() {
        return Ok(BTreeMap::new());
    }
    let e = state.model.ekus_free_energy(&task.train_features(&ids)?)?;
    Ok(ids.into_iter().zip(e).collect())
}

/// One optimizer step with the batch gradient capped at `clip` in global
/// L2 norm. Direction is preserved; only the magnitude is scaled down.
fn step_clipped(
    opt: &mut Sgd,
    params: &mut [Tensor],
    grads: &[(usize, &Tensor)],
    clip: Option<f64>,
) -> Result<()> {
    if let Some(max_norm) = clip {
        let sq: f64 = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            let owned = grads
                .iter()
                .map(|&(p, g)| {
                    let data = g.data().iter().map(|v| v * scale).collect();
                    Ok((p, Tensor::new(g.shape().to_vec(), data)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(usize, &Tensor)> = owned.iter().map(|(p, t)| (*p, t)).collect();
            return opt.step(params, &refs);
        }
    }
    opt.step(params, grads)
}

/// Re-selects the pseudo-unknown set from current pool energies and hands
/// the energies back for margin calibration.
fn refresh_pseudo(
    state: &mut RunState,
    task: &OpenSetTask,
    rho: f64,
) -> Result<BTreeMap<SampleId, f64>> {
    let energies = pool_energies(state, task)?;
    state.pool.set_pseudo_unknown(&energies, rho)?;
    Ok(energies)
}

/// Nearest-rank percentile of an ascending-sorted non-empty slice.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Moves delta_k/delta_u to the 30th/70th percentiles of the given pool
/// energies, so the margins track the energy scale as it moves during
/// training. Skipped (with a warning) when the percentiles do not leave a
/// positive margin gap.
fn calibrate_margins(state: &mut RunState, energies: &BTreeMap<SampleId, f64>) {
    if energies.len() < 2 {
        log::warn!("margin auto-calibration skipped: pool has {} samples", energies.len());
        return;
    }
    let mut sorted: Vec<f64> = energies.values().copied().collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let dk = percentile(&sorted, AUTO_MARGIN_LOW_PCT);
    let du = percentile(&sorted, AUTO_MARGIN_HIGH_PCT);
    if dk < du {
        state.active_margins.delta_k = dk;
        state.active_margins.delta_u = du;
        log::debug!("auto-calibrated margins: delta_k={:.4}, delta_u={:.4}", dk, du);
    } else {
        log::warn!(
            "margin auto-calibration skipped: percentiles {:.4}/{:.4} leave no gap",
            dk,
            du
        );
    }
}

fn draw_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Trains the known/unknown separator on balanced labeled/pseudo-unknown
/// batches. A warmup pass selects the pseudo-unknown set before the first
/// epoch; with per-epoch refresh it is re-selected from current energies
/// before every later epoch. With zero epochs the model is untouched but
/// the pseudo-unknown set is still populated.
pub fn train_ekus(state: &mut RunState, task: &OpenSetTask, cfg: &AlConfig) -> Result<()> {
    if state.pool.labeled().is_empty() {
        return Err(Error::Contract("separator training requires labeled samples".into()));
    }
    state.active_margins = cfg.margins;
    let mut energies = refresh_pseudo(state, task, cfg.rho)?;
    let mut opt = Sgd::new(cfg.sgd_config())?;
    let classes = task.num_known();

    for epoch in 0..cfg.epochs_per_cycle {
        if epoch > 0 && cfg.duk_refresh == DukRefresh::PerEpoch {
            energies = refresh_pseudo(state, task, cfg.rho)?;
        }
        if cfg.auto_margins && epoch >= AUTO_MARGIN_WARMUP_EPOCHS {
            calibrate_margins(state, &energies);
        }

        let labeled = state.pool.labeled_ids();
        let mut unknown_side: Vec<SampleId> = state.pool.pseudo_unknown().iter().copied().collect();
        if cfg.use_invalid_as_unknown {
            unknown_side.extend(state.pool.invalid().iter().copied());
            unknown_side.sort_unstable();
        }
        // Complementary-label draws outside the pseudo-unknown set come
        // from the rest of the pool.
        let nl_rest: Vec<SampleId> = state
            .pool
            .unlabeled()
            .difference(state.pool.pseudo_unknown())
            .copied()
            .collect();

        let batch_seed = state.data_rng.random::<u64>();
        let (batches, batch_fallback) = balanced_batches(&labeled, &unknown_side, cfg.batch_size, batch_seed)?;
        if batch_fallback {
            log::debug!("epoch {}: no pseudo-unknowns, labeled-only separator batches", epoch);
        }

        for batch in &batches {
            let mut tape = Tape::new();
            let graph = state.model.bind_ekus(&mut tape);
            let xk = tape.leaf(task.train_features(&batch.labeled)?);
            let lk = graph.logits(&mut tape, xk)?;
            let ek = free_energy_node(&mut tape, lk)?;

            let mut e_pseudo = None;
            let mut nl_built: Option<(NodeId, Vec<usize>)> = None;
            if !batch.pseudo.is_empty() {
                let xp = tape.leaf(task.train_features(&batch.pseudo)?);
                let lp = graph.logits(&mut tape, xp)?;
                e_pseudo = Some(free_energy_node(&mut tape, lp)?);

                if state.active_margins.gamma != 0.0 {
                    let (probs, labels) = match cfg.nl_scope {
                        NlScope::PseudoHalf => {
                            let probs = tape.softmax_rows(lp)?;
                            (probs, draw_labels(&mut state.nl_rng, batch.pseudo.len(), classes))
                        }
                        NlScope::PseudoPlusPool => {
                            let mut ids = batch.pseudo.clone();
                            if !nl_rest.is_empty() {
                                for _ in 0..batch.pseudo.len() {
                                    ids.push(nl_rest[state.nl_rng.random_range(0..nl_rest.len())]);
                                }
                            }
                            let xn = tape.leaf(task.train_features(&ids)?);
                            let ln = graph.logits(&mut tape, xn)?;
                            let probs = tape.softmax_rows(ln)?;
                            (probs, draw_labels(&mut state.nl_rng, ids.len(), classes))
                        }
                    };
                    nl_built = Some((probs, labels));
                }
            }

            let nl_arg = nl_built.as_ref().map(|(p, l)| (*p, l.as_slice()));
            let terms = ekus_loss(&mut tape, Some(ek), e_pseudo, nl_arg, &state.active_margins)?;
            tape.backward(terms.total)?;
            let grads: Vec<(usize, &Tensor)> = graph
                .trainable()
                .iter()
                .map(|&(p, n)| (p, tape.grad(n)))
                .collect();
            step_clipped(&mut opt, state.model.params_mut(), &grads, cfg.grad_clip)?;
        }
    }
    state.separator_trained_this_cycle = true;
    Ok(())
}

/// Trains the scorer (classifier + energy head) on the labeled set. When
/// the separator trained a shared backbone this cycle, the backbone stays
/// frozen here; otherwise the scorer trains it.
pub fn train_ess(state: &mut RunState, task: &OpenSetTask, cfg: &AlConfig) -> Result<()> {
    let labeled = state.pool.labeled_ids();
    if labeled.is_empty() {
        return Err(Error::Contract("scorer training requires labeled samples".into()));
    }
    let freeze = state.separator_trained_this_cycle && cfg.share_backbone;
    // The scorer ablation keeps the plain classifier (for entropy ranking
    // and accuracy) but drops the energy regularizer.
    let alpha = if cfg.method == Method::NoEss {
        0.0
    } else {
        state.active_margins.alpha
    };
    let mut opt = Sgd::new(cfg.sgd_config())?;

    for _epoch in 0..cfg.epochs_per_cycle {
        let mut order = labeled.clone();
        let epoch_seed = state.data_rng.random::<u64>();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        for chunk in order.chunks(cfg.batch_size) {
            let targets = chunk
                .iter()
                .map(|&id| {
                    let c = task.train_sample(id)?.true_class();
                    task.known_index(c)
                        .ok_or_else(|| Error::Contract(format!("labeled sample {} has unknown class", id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let graph = state.model.bind_ess(&mut tape, freeze);
            let x = tape.leaf(task.train_features(chunk)?);
            let (logits, energy) = graph.forward(&mut tape, x)?;
            let loss = ess_loss(
                &mut tape,
                logits,
                &targets,
                energy,
                alpha,
                state.active_margins.delta_s,
            )?;
            tape.backward(loss)?;
            let grads: Vec<(usize, &Tensor)> = graph
                .trainable()
                .iter()
                .map(|&(p, n)| (p, tape.grad(n)))
                .collect();
            step_clipped(&mut opt, state.model.params_mut(), &grads, cfg.grad_clip)?;
        }
    }
    Ok(())
}

/// Keeps pool samples whose separator energy is below `delta_k`. When
/// fewer than `budget` qualify and other pool samples remain, the result
/// is padded with the lowest-energy remainder up to `budget` and the
/// fallback flag is set. Returns ascending sample ids.
pub fn filter_likely_known(
    energies: &BTreeMap<SampleId, f64>,
    delta_k: f64,
    budget: usize,
) -> (Vec<SampleId>, bool) {
    let mut kept: Vec<SampleId> = energies
        .iter()
        .filter(|&(_, &e)| e < delta_k)
        .map(|(&id, _)| id)
        .collect();
    if kept.len() >= budget || kept.len() == energies.len() {
        return (kept, false);
    }
    let mut rest: Vec<(SampleId, f64)> = energies
        .iter()
        .filter(|&(_, &e)| !(e < delta_k))
        .map(|(&id, &e)| (id, e))
        .collect();
    rest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let need = (budget - kept.len()).min(rest.len());
    kept.extend(rest[..need].iter().map(|&(id, _)| id));
    kept.sort_unstable();
    (kept, true)
}

/// Selection score: predictive entropy plus `beta` times the scorer
/// energy, per candidate sample.
pub fn score_samples(
    model: &DualEbm,
    task: &OpenSetTask,
    ids: &[SampleId],
    beta: f64,
) -> Result<BTreeMap<SampleId, f64>> {
    if ids.is_empty() {
        return Ok(BTreeMap::new());
    }
    let x = task.train_features(ids)?;
    let u = crate::model::entropy(&model.ess_logits(&x)?)?;
    let e = model.ess_energy(&x)?;
    Ok(ids
        .iter()
        .zip(u.iter().zip(e.iter()))
        .map(|(&id, (&u, &e))| (id, u + beta * e))
        .collect())
}

/// The `b` highest-scoring ids (all of them when fewer are available),
/// ties broken by ascending sample id.
pub fn select_top_b(scores: &BTreeMap<SampleId, f64>, b: usize) -> Vec<SampleId> {
    let mut ranked: Vec<(SampleId, f64)> = scores.iter().map(|(&id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(b);
    ranked.into_iter().map(|(id, _)| id).collect()
}

/// Inner record of one cycle, exposing what the report summarizes.
pub struct CycleTrace {
    pub report: CycleReport,
    /// Candidate set handed to scoring (the filter output for filtering
    /// methods, the whole pool otherwise). Ascending ids.
    pub candidates: Vec<SampleId>,
    /// Queried ids, ascending.
    pub selected: Vec<SampleId>,
    /// Separator pool energies snapshotted before the oracle call.
    pub pool_energies: BTreeMap<SampleId, f64>,
    pub scores: BTreeMap<SampleId, f64>,
}

/// Runs one acquisition cycle and appends its report to the history.
pub fn run_cycle(state: &mut RunState, task: &OpenSetTask, cfg: &AlConfig) -> Result<CycleReport> {
    Ok(run_cycle_traced(state, task, cfg)?.report)
}

/// [`run_cycle`] variant returning intermediate selection state.
pub fn run_cycle_traced(state: &mut RunState, task: &OpenSetTask, cfg: &AlConfig) -> Result<CycleTrace> {
    let cycle = state.cycle;
    // Fresh training each cycle unless warm-starting past cycle 0; the
    // reinit seed is drawn either way to keep the stream aligned.
    let reinit_seed = state.init_rng.random::<u64>();
    if !(cfg.warm_start && cycle > 0) {
        state.model.reinit(reinit_seed);
    }
    state.active_margins = cfg.margins;
    state.separator_trained_this_cycle = false;

    if cfg.method.trains_separator() {
        train_ekus(state, task, cfg)?;
    }
    train_ess(state, task, cfg)?;

    // Pool metrics are snapshotted before the oracle mutates the pool.
    let energies = pool_energies(state, task)?;
    let mut known_e = Vec::new();
    let mut unknown_e = Vec::new();
    for (&id, &e) in &energies {
        if task.is_known_class(task.train_sample(id)?.true_class()) {
            known_e.push(e);
        } else {
            unknown_e.push(e);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let energy_auroc = auroc(&unknown_e, &known_e);
    let mean_e_known = mean(&known_e);
    let mean_e_unknown = mean(&unknown_e);

    let (candidates, fallback) = if cfg.method.filters() {
        // The energy scale keeps moving through ESS training, so auto mode
        // re-reads the margins from the energies the cut will be applied to
        // and cuts deeper than delta_k (see auto_filter_percentile).
        if cfg.auto_margins {
            calibrate_margins(state, &energies);
        }
        let threshold = cfg.filter_threshold.unwrap_or_else(|| {
            if cfg.auto_margins && energies.len() >= 2 {
                let mut sorted: Vec<f64> = energies.values().copied().collect();
                sorted.sort_by(|a, b| a.total_cmp(b));
                percentile(&sorted, cfg.auto_filter_percentile)
            } else {
                state.active_margins.delta_k
            }
        });
        filter_likely_known(&energies, threshold, cfg.budget)
    } else {
        (state.pool.unlabeled_ids(), false)
    };

    let (scores, selected) = match cfg.method {
        Method::Random => {
            let mut ids = state.pool.unlabeled_ids();
            let draw_seed = state.data_rng.random::<u64>();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(draw_seed));
            ids.truncate(cfg.budget);
            (BTreeMap::new(), ids)
        }
        Method::Entropy | Method::NoEss => {
            let s = score_samples(&state.model, task, &candidates, 0.0)?;
            let sel = select_top_b(&s, cfg.budget);
            (s, sel)
        }
        Method::Ebosal | Method::NoEkus => {
            let s = score_samples(&state.model, task, &candidates, cfg.beta)?;
            let sel = select_top_b(&s, cfg.budget);
            (s, sel)
        }
    };
    let truncated = selected.len() < cfg.budget;

    let outcomes = state.pool.oracle_label(task, &selected)?;
    let hits = outcomes
        .iter()
        .filter(|(_, o)| matches!(o, OracleOutcome::Known(_)))
        .count();
    let query_precision_cycle = if outcomes.is_empty() {
        f64::NAN
    } else {
        hits as f64 / outcomes.len() as f64
    };

    let report = CycleReport {
        cycle,
        seed: state.display_seed,
        method: cfg.method,
        labeled_size: state.pool.labeled().len(),
        spent_budget: state.pool.spent_budget(),
        test_accuracy: accuracy(&state.model, task)?,
        query_precision_cycle,
        query_precision_cumulative: state.pool.query_precision_cumulative(),
        energy_auroc,
        mean_e_known,
        mean_e_unknown,
        fallback_engaged: fallback,
        truncated,
    };
    state.history.push(report.clone());
    state.cycle += 1;

    let mut selected_sorted = selected;
    selected_sorted.sort_unstable();
    Ok(CycleTrace {
        report,
        candidates,
        selected: selected_sorted,
        pool_energies: energies,
        scores,
    })
}

/// One run's queried ids for one cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub seed: u64,
    pub cycle: usize,
    /// Ascending sample ids.
    pub ids: Vec<SampleId>,
}

pub struct ExperimentResult {
    /// Per-seed, per-cycle reports in (seed-list, cycle) order.
    pub reports: Vec<CycleReport>,
    /// Per-(method, cycle) means and deviations across seeds.
    pub aggregates: Vec<AggregateRow>,
    pub queries: Vec<QueryRecord>,
}

/// Runs the configured number of cycles once per seed. A run stops after
/// a truncated cycle (pool exhausted). Seed entries act as run seeds
/// directly.
pub fn run_experiment(task: &OpenSetTask, cfg: &AlConfig, seeds: &[u64]) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut reports = Vec::new();
    let mut queries = Vec::new();
    for &seed in seeds {
        let mut state = RunState::new(task, cfg, seed, seed)?;
        for _ in 0..cfg.cycles {
            let trace = run_cycle_traced(&mut state, task, cfg)?;
            queries.push(QueryRecord {
                seed,
                cycle: trace.report.cycle,
                ids: trace.selected.clone(),
            });
            let stop = trace.report.truncated;
            reports.push(trace.report);
            if stop {
                break;
            }
        }
    }
    let aggregates = aggregate(&reports);
    Ok(ExperimentResult {
        reports,
        aggregates,
        queries,
    })
}
