//! Pool bookkeeping: seed labels, the label oracle, pseudo-unknown
//! selection, and balanced mini-batch construction.
//!
//! Invariants maintained at all times:
//! - labeled, unlabeled and invalid ids are pairwise disjoint and together
//!   cover exactly the training samples touched so far;
//! - the pseudo-unknown set is a subset of the unlabeled pool;
//! - spent budget equals (labels gained since init) + (invalid queries).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::task::{ClassId, OpenSetTask, SampleId};

/// What the oracle said about one queried sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOutcome {
    /// Sample belongs to a known class; its label was added to the pool.
    Known(ClassId),
    /// Sample belongs to an unknown class; the query budget is spent and
    /// the sample is discarded from the pool.
    Unknown,
}

#[derive(Debug, Clone)]
pub struct PoolState {
    labeled: BTreeMap<SampleId, ClassId>,
    unlabeled: BTreeSet<SampleId>,
    invalid: BTreeSet<SampleId>,
    pseudo_unknown: BTreeSet<SampleId>,
    spent_budget: usize,
    initial_labeled: usize,
}

/// Seeds the pool: a fraction of the known-class training samples starts
/// labeled, everything else (including all unknown-class samples) starts
/// unlabeled.
pub fn init_pool(task: &OpenSetTask, init_fraction: f64, seed: u64) -> Result<PoolState> {
    if !(init_fraction > 0.0 && init_fraction < 1.0) {
        return Err(Error::Config(format!(
            "task.init_fraction must be in (0, 1), got {}",
            init_fraction
        )));
    }
    let mut known_ids: Vec<SampleId> = task
        .train()
        .iter()
        .filter(|s| task.is_known_class(s.true_class()))
        .map(|s| s.pool_id)
        .collect();
    let k = ((init_fraction * known_ids.len() as f64).round() as usize).min(known_ids.len());
    if k == 0 {
        return Err(Error::Config(format!(
            "task.init_fraction {} selects zero seed labels from {} known-class samples",
            init_fraction,
            known_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    known_ids.shuffle(&mut rng);
    let labeled: BTreeMap<SampleId, ClassId> = known_ids[..k]
        .iter()
        .map(|&id| (id, task.train_sample(id).expect("id from task").true_class()))
        .collect();
    let unlabeled: BTreeSet<SampleId> = task
        .train()
        .iter()
        .map(|s| s.pool_id)
        .filter(|id| !labeled.contains_key(id))
        .collect();
    Ok(PoolState {
        initial_labeled: labeled.len(),
        labeled,
        unlabeled,
        invalid: BTreeSet::new(),
        pseudo_unknown: BTreeSet::new(),
        spent_budget: 0,
    })
}

impl PoolState {
    pub fn labeled(&self) -> &BTreeMap<SampleId, ClassId> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    pub fn invalid(&self) -> &BTreeSet<SampleId> {
        &self.invalid
    }

    pub fn pseudo_unknown(&self) -> &BTreeSet<SampleId> {
        &self.pseudo_unknown
    }

    pub fn spent_budget(&self) -> usize {
        self.spent_budget
    }

    pub fn initial_labeled(&self) -> usize {
        self.initial_labeled
    }

    /// Labeled ids in ascending order.
    pub fn labeled_ids(&self) -> Vec<SampleId> {
        self.labeled.keys().copied().collect()
    }

    /// Unlabeled ids in ascending order.
    pub fn unlabeled_ids(&self) -> Vec<SampleId> {
        self.unlabeled.iter().copied().collect()
    }

    /// Fraction of all queries so far that returned a usable label; NaN
    /// before the first query.
    pub fn query_precision_cumulative(&self) -> f64 {
        if self.spent_budget == 0 {
            return f64::NAN;
        }
        (self.labeled.len() - self.initial_labeled) as f64 / self.spent_budget as f64
    }

    /// Queries the oracle for the given unlabeled ids, in order. Knowns
    /// move to the labeled set; unknowns are discarded into the invalid
    /// set. Every query costs one unit of budget either way.
    ///
    /// The whole batch is validated before any mutation, so a bad id leaves
    /// the pool untouched.
    pub fn oracle_label(
        &mut self,
        task: &OpenSetTask,
        ids: &[SampleId],
    ) -> Result<Vec<(SampleId, OracleOutcome)>> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::Contract(format!(
                    "sample {} queried twice in one batch",
                    id
                )));
            }
            if !self.unlabeled.contains(&id) {
                let where_ = if self.labeled.contains_key(&id) {
                    "already labeled"
                } else if self.invalid.contains(&id) {
                    "already discarded as unknown"
                } else {
                    "not a pool sample"
                };
                return Err(Error::Contract(format!(
                    "cannot query sample {}: {}",
                    id, where_
                )));
            }
            task.train_sample(id)?;
        }

        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            self.unlabeled.remove(&id);
            self.pseudo_unknown.remove(&id);
            let class = task.train_sample(id).expect("validated above").true_class();
            let outcome = if task.is_known_class(class) {
                self.labeled.insert(id, class);
                OracleOutcome::Known(class)
            } else {
                self.invalid.insert(id);
                OracleOutcome::Unknown
            };
            self.spent_budget += 1;
            out.push((id, outcome));
        }
        Ok(out)
    }

    /// Replaces the pseudo-unknown set with the ceil(rho * |pool|) highest
    /// energy unlabeled samples. `energies` must cover the unlabeled pool
    /// exactly. Ties break toward the lower id.
    pub fn set_pseudo_unknown(
        &mut self,
        energies: &BTreeMap<SampleId, f64>,
        rho: f64,
    ) -> Result<usize> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!(
                "al.rho must be in (0, 1), got {}",
                rho
            )));
        }
        for id in &self.unlabeled {
            if !energies.contains_key(id) {
                return Err(Error::Contract(format!(
                    "no energy provided for unlabeled sample {}",
                    id
                )));
            }
        }
        if energies.len() != self.unlabeled.len() {
            let extra = energies
                .keys()
                .find(|id| !self.unlabeled.contains(id))
                .expect("length mismatch implies an extra key");
            return Err(Error::Contract(format!(
                "energy provided for sample {} which is not unlabeled",
                extra
            )));
        }

        let n = self.unlabeled.len();
        if n == 0 {
            self.pseudo_unknown.clear();
            return Ok(0);
        }
        // The epsilon guards against float fuzz pushing an exact product
        // like 0.4 * 5 just above its integer value.
        let k = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        let mut ranked: Vec<(SampleId, f64)> =
            energies.iter().map(|(&id, &e)| (id, e)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        self.pseudo_unknown = ranked[..k].iter().map(|(id, _)| *id).collect();
        Ok(k)
    }

    /// Verifies every structural invariant; used by fuzz tests.
    pub fn check_invariants(&self, task: &OpenSetTask) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(msg));
        for id in self.labeled.keys() {
            if self.unlabeled.contains(id) || self.invalid.contains(id) {
                return fail(format!("sample {} is in more than one partition", id));
            }
        }
        for id in &self.unlabeled {
            if self.invalid.contains(id) {
                return fail(format!("sample {} is both unlabeled and invalid", id));
            }
        }
        let total = self.labeled.len() + self.unlabeled.len() + self.invalid.len();
        if total != task.train().len() {
            return fail(format!(
                "partitions cover {} samples, task has {}",
                total,
                task.train().len()
            ));
        }
        for id in &self.pseudo_unknown {
            if !self.unlabeled.contains(id) {
                return fail(format!(
                    "pseudo-unknown sample {} is not in the unlabeled pool",
                    id
                ));
            }
        }
        let gained = self.labeled.len() - self.initial_labeled;
        if self.spent_budget != gained + self.invalid.len() {
            return fail(format!(
                "budget {} does not equal gained labels {} + invalid {}",
                self.spent_budget,
                gained,
                self.invalid.len()
            ));
        }
        for (&id, &class) in &self.labeled {
            if task.train_sample(id)?.true_class() != class {
                return fail(format!("sample {} carries a wrong label", id));
            }
        }
        Ok(())
    }
}

/// One balanced mini-batch for separator training.
#[derive(Debug, Clone)]
pub struct EkusBatch {
    pub labeled: Vec<SampleId>,
    pub pseudo: Vec<SampleId>,
}

/// Builds one epoch of balanced batches over explicit id lists.
///
/// Each batch holds `batch_size / 2` labeled and `batch_size / 2` unknown
/// side ids. The larger side is shuffled and chunked so each of its ids
/// appears at least once; its final short chunk, and every batch of the
/// smaller side, are filled by drawing with replacement. With an empty
/// unknown side this degrades to labeled-only half-batches and the second
/// element of the result is true.
pub fn balanced_batches(
    labeled: &[SampleId],
    unknowns: &[SampleId],
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<EkusBatch>, bool)> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "model.batch_size must be even and at least 2, got {}",
            batch_size
        )));
    }
    if labeled.is_empty() {
        return Err(Error::Contract("balanced batches need labeled samples".into()));
    }
    let half = batch_size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if unknowns.is_empty() {
        let mut ids = labeled.to_vec();
        ids.shuffle(&mut rng);
        let mut batches: Vec<EkusBatch> = ids
            .chunks(half)
            .map(|c| EkusBatch {
                labeled: c.to_vec(),
                pseudo: Vec::new(),
            })
            .collect();
        if let Some(last) = batches.last_mut() {
            while last.labeled.len() < half {
                last.labeled.push(labeled[rng.random_range(0..labeled.len())]);
            }
        }
        return Ok((batches, true));
    }

    // The side with more ids is chunked (full coverage per epoch); the
    // other side is oversampled with replacement.
    let labeled_is_chunked = labeled.len() >= unknowns.len();
    let (chunk_src, draw_src) = if labeled_is_chunked {
        (labeled, unknowns)
    } else {
        (unknowns, labeled)
    };
    let mut chunked = chunk_src.to_vec();
    chunked.shuffle(&mut rng);
    let n_batches = chunked.len().div_ceil(half);
    let mut batches = Vec::with_capacity(n_batches);
    for i in 0..n_batches {
        let lo = i * half;
        let hi = ((i + 1) * half).min(chunked.len());
        let mut chunk: Vec<SampleId> = chunked[lo..hi].to_vec();
        while chunk.len() < half {
            chunk.push(chunk_src[rng.random_range(0..chunk_src.len())]);
        }
        let drawn: Vec<SampleId> = (0..half)
            .map(|_| draw_src[rng.random_range(0..draw_src.len())])
            .collect();
        let (labeled_ids, pseudo_ids) = if labeled_is_chunked {
            (chunk, drawn)
        } else {
            (drawn, chunk)
        };
        batches.push(EkusBatch {
            labeled: labeled_ids,
            pseudo: pseudo_ids,
        });
    }
    Ok((batches, false))
}

/// Balanced batches of the pool's labeled set against its pseudo-unknown
/// set (ids taken in ascending order before shuffling).
pub fn balanced_ekus_batches(
    pool: &PoolState,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<EkusBatch>, bool)> {
    let labeled = pool.labeled_ids();
    let pseudo: Vec<SampleId> = pool.pseudo_unknown.iter().copied().collect();
    balanced_batches(&labeled, &pseudo, batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::task::{make_task, GaussianMixtureSpec, GeneratorSpec};

    fn spec(classes: usize, per_class: usize) -> GeneratorSpec {
        GeneratorSpec::GaussianMixture(GaussianMixtureSpec {
            classes,
            dim: 2,
            train_per_class: per_class,
            test_per_class: 2,
            center_box: 3.0,
            class_std: 0.5,
                subclusters: 1,
                subcluster_spread: 0.0,
        })
    }

    fn small_task() -> OpenSetTask {
        make_task(&spec(4, 5), 0.5, 3).unwrap()
    }

    #[test]
    fn init_pool_counts_and_partition() {
        let task = small_task();
        // 2 known classes * 5 samples, 40% -> 4 seed labels.
        let pool = init_pool(&task, 0.4, 1).unwrap();
        assert_eq!(pool.labeled().len(), 4);
        assert_eq!(pool.unlabeled().len(), 16);
        assert_eq!(pool.spent_budget(), 0);
        assert!(pool.query_precision_cumulative().is_nan());
        pool.check_invariants(&task).unwrap();
        for (&id, &c) in pool.labeled() {
            assert!(task.is_known_class(c));
            assert_eq!(task.train_sample(id).unwrap().true_class(), c);
        }
    }

    #[test]
    fn init_pool_rejects_degenerate_fractions() {
        let task = small_task();
        assert!(init_pool(&task, 0.0, 1).is_err());
        assert!(init_pool(&task, 1.0, 1).is_err());
        assert!(init_pool(&task, 0.01, 1).is_err()); // rounds to zero labels
    }

    #[test]
    fn init_pool_is_deterministic() {
        let task = small_task();
        let a = init_pool(&task, 0.4, 7).unwrap();
        let b = init_pool(&task, 0.4, 7).unwrap();
        assert_eq!(a.labeled_ids(), b.labeled_ids());
        let c = init_pool(&task, 0.4, 8).unwrap();
        assert_ne!(a.labeled_ids(), c.labeled_ids());
    }

    #[test]
    fn oracle_moves_knowns_and_unknowns() {
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        let known_id = *pool
            .unlabeled()
            .iter()
            .find(|&&id| task.is_known_class(task.train_sample(id).unwrap().true_class()))
            .unwrap();
        let unknown_id = *pool
            .unlabeled()
            .iter()
            .find(|&&id| !task.is_known_class(task.train_sample(id).unwrap().true_class()))
            .unwrap();
        let out = pool.oracle_label(&task, &[known_id, unknown_id]).unwrap();
        assert!(matches!(out[0].1, OracleOutcome::Known(_)));
        assert_eq!(out[1].1, OracleOutcome::Unknown);
        assert_eq!(pool.spent_budget(), 2);
        assert_eq!(pool.labeled().len(), 5);
        assert_eq!(pool.invalid().len(), 1);
        assert!((pool.query_precision_cumulative() - 0.5).abs() < 1e-15);
        pool.check_invariants(&task).unwrap();
    }

    #[test]
    fn oracle_rejects_bad_ids_without_mutation() {
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        let labeled_id = pool.labeled_ids()[0];
        let good_id = *pool.unlabeled().iter().next().unwrap();
        let before = pool.clone();
        assert!(pool.oracle_label(&task, &[good_id, labeled_id]).is_err());
        assert!(pool.oracle_label(&task, &[good_id, good_id]).is_err());
        assert!(pool.oracle_label(&task, &[9999]).is_err());
        assert_eq!(pool.labeled().len(), before.labeled().len());
        assert_eq!(pool.unlabeled().len(), before.unlabeled().len());
        assert_eq!(pool.spent_budget(), 0);
    }

    #[test]
    fn pseudo_unknown_picks_top_energy() {
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        // Energies equal to the id value: the highest ids win.
        let energies: BTreeMap<SampleId, f64> = pool
            .unlabeled()
            .iter()
            .map(|&id| (id, id as f64))
            .collect();
        let k = pool.set_pseudo_unknown(&energies, 0.25).unwrap();
        assert_eq!(k, 4);
        let expect: Vec<SampleId> = {
            let mut ids = pool.unlabeled_ids();
            ids.sort_unstable_by(|a, b| b.cmp(a));
            let mut top: Vec<SampleId> = ids.into_iter().take(4).collect();
            top.sort_unstable();
            top
        };
        let got: Vec<SampleId> = pool.pseudo_unknown().iter().copied().collect();
        assert_eq!(got, expect);
        pool.check_invariants(&task).unwrap();
    }

    #[test]
    fn pseudo_unknown_tie_breaks_toward_low_ids() {
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        let energies: BTreeMap<SampleId, f64> =
            pool.unlabeled().iter().map(|&id| (id, 1.0)).collect();
        pool.set_pseudo_unknown(&energies, 0.2).unwrap();
        let expect: Vec<SampleId> = pool.unlabeled_ids().into_iter().take(4).collect();
        let got: Vec<SampleId> = pool.pseudo_unknown().iter().copied().collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn pseudo_unknown_ceil_does_not_inflate_exact_products() {
        // 16 unlabeled samples, rho = 0.25: exactly 4, never 5.
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        assert_eq!(pool.unlabeled().len(), 16);
        let energies: BTreeMap<SampleId, f64> =
            pool.unlabeled().iter().map(|&id| (id, 0.0)).collect();
        assert_eq!(pool.set_pseudo_unknown(&energies, 0.25).unwrap(), 4);
        // Fractional products round up.
        assert_eq!(pool.set_pseudo_unknown(&energies, 0.26).unwrap(), 5);
        // At least one sample is always selected.
        assert_eq!(pool.set_pseudo_unknown(&energies, 0.001).unwrap(), 1);
    }

    #[test]
    fn pseudo_unknown_requires_exact_energy_cover() {
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        let mut energies: BTreeMap<SampleId, f64> =
            pool.unlabeled().iter().map(|&id| (id, 0.0)).collect();
        let some = *energies.keys().next().unwrap();
        energies.remove(&some);
        assert!(pool.set_pseudo_unknown(&energies, 0.25).is_err());
        energies.insert(some, 0.0);
        energies.insert(99_999, 0.0);
        assert!(pool.set_pseudo_unknown(&energies, 0.25).is_err());
    }

    #[test]
    fn queried_ids_leave_pseudo_unknown() {
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        let energies: BTreeMap<SampleId, f64> =
            pool.unlabeled().iter().map(|&id| (id, id as f64)).collect();
        pool.set_pseudo_unknown(&energies, 0.5).unwrap();
        let victim = *pool.pseudo_unknown().iter().next().unwrap();
        pool.oracle_label(&task, &[victim]).unwrap();
        assert!(!pool.pseudo_unknown().contains(&victim));
        pool.check_invariants(&task).unwrap();
    }

    #[test]
    fn balanced_batches_cover_and_pad() {
        let labeled: Vec<SampleId> = (0..100).collect();
        let unknowns: Vec<SampleId> = (100..110).collect();
        let (batches, skipped) = balanced_batches(&labeled, &unknowns, 32, 5).unwrap();
        assert!(!skipped);
        // ceil(100 / 16) = 7 batches, each 16 + 16.
        assert_eq!(batches.len(), 7);
        for b in &batches {
            assert_eq!(b.labeled.len(), 16);
            assert_eq!(b.pseudo.len(), 16);
            assert!(b.pseudo.iter().all(|id| unknowns.contains(id)));
        }
        // Every labeled id appears at least once.
        let mut seen: BTreeSet<SampleId> = BTreeSet::new();
        for b in &batches {
            seen.extend(b.labeled.iter().copied());
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn balanced_batches_chunk_the_larger_side() {
        // More pseudo-unknowns than labels: the pseudo side gets chunked.
        let labeled: Vec<SampleId> = (0..4).collect();
        let unknowns: Vec<SampleId> = (10..40).collect();
        let (batches, _) = balanced_batches(&labeled, &unknowns, 8, 5).unwrap();
        assert_eq!(batches.len(), 30usize.div_ceil(4));
        let mut seen: BTreeSet<SampleId> = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.labeled.len(), 4);
            assert_eq!(b.pseudo.len(), 4);
            seen.extend(b.pseudo.iter().copied());
        }
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn balanced_batches_fall_back_without_unknowns() {
        let labeled: Vec<SampleId> = (0..10).collect();
        let (batches, skipped) = balanced_batches(&labeled, &[], 8, 5).unwrap();
        assert!(skipped);
        assert_eq!(batches.len(), 3);
        for b in &batches {
            assert_eq!(b.labeled.len(), 4);
            assert!(b.pseudo.is_empty());
        }
    }

    #[test]
    fn balanced_batches_validate_inputs() {
        let labeled: Vec<SampleId> = (0..4).collect();
        assert!(balanced_batches(&labeled, &[], 7, 1).is_err());
        assert!(balanced_batches(&labeled, &[], 0, 1).is_err());
        assert!(balanced_batches(&[], &[1], 8, 1).is_err());
    }

    #[test]
    fn balanced_batches_are_deterministic() {
        let labeled: Vec<SampleId> = (0..50).collect();
        let unknowns: Vec<SampleId> = (50..60).collect();
        let (a, _) = balanced_batches(&labeled, &unknowns, 16, 9).unwrap();
        let (b, _) = balanced_batches(&labeled, &unknowns, 16, 9).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.labeled, y.labeled);
            assert_eq!(x.pseudo, y.pseudo);
        }
        let (c, _) = balanced_batches(&labeled, &unknowns, 16, 10).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.labeled != y.labeled));
    }
}
