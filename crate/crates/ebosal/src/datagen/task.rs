//! Open-set task construction.
//!
//! A task holds every sample up front; nothing is generated lazily, so two
//! constructions from the same spec and seed are identical bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type ClassId = u32;
pub type SampleId = u32;

/// One sample. The true class is ground truth for the label oracle and for
/// evaluation; selection code must never read it directly.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pool_id: SampleId,
    pub features: Vec<f64>,
    true_class: ClassId,
}

impl Sample {
    pub fn true_class(&self) -> ClassId {
        self.true_class
    }
}

/// Per-class Gaussian mixture: each class is a uniform mixture of
/// `subclusters` isotropic modes around a class center drawn from a box.
/// One mode (`subclusters = 1`) gives a plain blob per class; several modes
/// give classes internal structure that a handful of labels cannot cover.
#[derive(Debug, Clone)]
pub struct GaussianMixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Class centers are uniform in [-center_box, center_box]^dim.
    pub center_box: f64,
    pub class_std: f64,
    /// Gaussian modes per class.
    pub subclusters: usize,
    /// Std of the mode-center offsets around the class center; unused for
    /// a single mode.
    pub subcluster_spread: f64,
}

/// Concentric noisy rings in the first two dimensions, one radius per
/// class; remaining dimensions are pure noise.
#[derive(Debug, Clone)]
pub struct RingClustersSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Class c sits at radius radius_step * (c + 1).
    pub radius_step: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone)]
pub enum GeneratorSpec {
    GaussianMixture(GaussianMixtureSpec),
    RingClusters(RingClustersSpec),
}

impl GeneratorSpec {
    fn shape(&self) -> (usize, usize, usize, usize) {
        match self {
            GeneratorSpec::GaussianMixture(s) => {
                (s.classes, s.dim, s.train_per_class, s.test_per_class)
            }
            GeneratorSpec::RingClusters(s) => {
                (s.classes, s.dim, s.train_per_class, s.test_per_class)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (classes, dim, train, test) = self.shape();
        if classes < 2 {
            return Err(Error::Config(format!(
                "task.classes must be at least 2, got {}",
                classes
            )));
        }
        if dim == 0 {
            return Err(Error::Config("task.dim must be at least 1".into()));
        }
        if train == 0 || test == 0 {
            return Err(Error::Config(
                "task.train_per_class and task.test_per_class must be at least 1".into(),
            ));
        }
        match self {
            GeneratorSpec::GaussianMixture(s) => {
                if !(s.center_box.is_finite() && s.center_box > 0.0)
                    || !(s.class_std.is_finite() && s.class_std > 0.0)
                {
                    return Err(Error::Config(
                        "task.center_box and task.class_std must be positive".into(),
                    ));
                }
                if s.subclusters == 0 {
                    return Err(Error::Config("task.subclusters must be at least 1".into()));
                }
                if s.subclusters > 1 && !(s.subcluster_spread.is_finite() && s.subcluster_spread > 0.0)
                {
                    return Err(Error::Config(
                        "task.subcluster_spread must be positive with multiple subclusters".into(),
                    ));
                }
            }
            GeneratorSpec::RingClusters(s) => {
                if s.dim < 2 {
                    return Err(Error::Config("ring tasks need task.dim of at least 2".into()));
                }
                if !(s.radius_step.is_finite() && s.radius_step > 0.0)
                    || !(s.noise_std.is_finite() && s.noise_std > 0.0)
                {
                    return Err(Error::Config(
                        "task.radius_step and task.noise_std must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A fixed open-set task: features, class split, and held-out test set.
#[derive(Debug, Clone)]
pub struct OpenSetTask {
    dim: usize,
    known_classes: Vec<ClassId>,
    unknown_classes: Vec<ClassId>,
    mismatch_ratio: f64,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

impl OpenSetTask {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ascending ids of classes the model may learn.
    pub fn known_classes(&self) -> &[ClassId] {
        &self.known_classes
    }

    pub fn unknown_classes(&self) -> &[ClassId] {
        &self.unknown_classes
    }

    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    pub fn mismatch_ratio(&self) -> f64 {
        self.mismatch_ratio
    }

    pub fn train(&self) -> &[Sample] {
        &self.train
    }

    /// Held-out samples; known classes only.
    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn is_known_class(&self, c: ClassId) -> bool {
        self.known_classes.binary_search(&c).is_ok()
    }

    /// Index of a known class among the sorted known classes; this is the
    /// logit column the model assigns to it.
    pub fn known_index(&self, c: ClassId) -> Option<usize> {
        self.known_classes.binary_search(&c).ok()
    }

    pub fn train_sample(&self, id: SampleId) -> Result<&Sample> {
        self.train
            .get(id as usize)
            .ok_or_else(|| Error::Index(format!("no training sample with id {}", id)))
    }

    /// Feature matrix `[ids.len(), dim]` for training samples.
    pub fn train_features(&self, ids: &[SampleId]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(&self.train_sample(id)?.features);
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }

    /// Feature matrix of the whole test set.
    pub fn test_features(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.test.len() * self.dim);
        for s in &self.test {
            data.extend_from_slice(&s.features);
        }
        Tensor::new(vec![self.test.len(), self.dim], data)
    }
}

/// Splits `classes` class ids into known/unknown. The known count is
/// round(ratio * classes); rounding is half-away-from-zero.
fn split_classes(classes: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "task.mismatch_ratio must be in (0, 1], got {}",
            ratio
        )));
    }
    let n_known = (ratio * classes as f64).round() as usize;
    let n_known = n_known.min(classes);
    if n_known < 2 {
        return Err(Error::Config(format!(
            "task.mismatch_ratio {} keeps only {} of {} classes; at least 2 known classes are required",
            ratio, n_known, classes
        )));
    }
    let mut ids: Vec<ClassId> = (0..classes as ClassId).collect();
    ids.shuffle(rng);
    let mut known: Vec<ClassId> = ids[..n_known].to_vec();
    let mut unknown: Vec<ClassId> = ids[n_known..].to_vec();
    known.sort_unstable();
    unknown.sort_unstable();
    Ok((known, unknown))
}

/// Builds a task from a generator spec. Unknown classes appear only in the
/// training pool; the test set covers known classes alone.
pub fn make_task(spec: &GeneratorSpec, mismatch_ratio: f64, seed: u64) -> Result<OpenSetTask> {
    spec.validate()?;
    let (classes, dim, train_per_class, test_per_class) = spec.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (known, unknown) = split_classes(classes, mismatch_ratio, &mut rng)?;

    // Per-class centers (and mode offsets) for the Gaussian case are drawn
    // up front, in class order, so the draw sequence is independent of the
    // known/unknown split size. Single-mode classes skip the offset draws
    // entirely, keeping their stream identical to the plain-blob generator.
    let (centers, offsets): (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) = match spec {
        GeneratorSpec::GaussianMixture(s) => {
            let mut centers = Vec::with_capacity(classes);
            let mut offsets = Vec::with_capacity(classes);
            for _ in 0..classes {
                centers.push(
                    (0..dim)
                        .map(|_| rng.random_range(-s.center_box..s.center_box))
                        .collect::<Vec<f64>>(),
                );
                let modes = if s.subclusters > 1 {
                    (0..s.subclusters)
                        .map(|_| {
                            (0..dim)
                                .map(|_| {
                                    s.subcluster_spread * rng.sample::<f64, _>(StandardNormal)
                                })
                                .collect()
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                offsets.push(modes);
            }
            (centers, offsets)
        }
        GeneratorSpec::RingClusters(_) => (Vec::new(), Vec::new()),
    };

    let draw = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        match spec {
            GeneratorSpec::GaussianMixture(s) => {
                let modes = &offsets[class];
                let mode: &[f64] = if s.subclusters > 1 {
                    &modes[rng.random_range(0..s.subclusters)]
                } else {
                    &[]
                };
                (0..dim)
                    .map(|j| {
                        centers[class][j]
                            + mode.get(j).copied().unwrap_or(0.0)
                            + s.class_std * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            }
            GeneratorSpec::RingClusters(s) => {
                let r = s.radius_step * (class as f64 + 1.0);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let mut v: Vec<f64> = (0..dim)
                    .map(|_| s.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                v[0] += r * theta.cos();
                v[1] += r * theta.sin();
                v
            }
        }
    };

    let mut train = Vec::with_capacity(classes * train_per_class);
    for class in 0..classes {
        for _ in 0..train_per_class {
            let features = draw(class, &mut rng);
            train.push(Sample {
                pool_id: train.len() as SampleId,
                features,
                true_class: class as ClassId,
            });
        }
    }
    let mut test = Vec::with_capacity(known.len() * test_per_class);
    for &class in &known {
        for _ in 0..test_per_class {
            let features = draw(class as usize, &mut rng);
            test.push(Sample {
                pool_id: (train.len() + test.len()) as SampleId,
                features,
                true_class: class,
            });
        }
    }

    Ok(OpenSetTask {
        dim,
        known_classes: known,
        unknown_classes: unknown,
        mismatch_ratio,
        train,
        test,
    })
}

/// Builds a task from externally supplied rows (for CSV import). Known
/// classes give `test_fraction` of their rows to the test split; unknown
/// classes keep everything in the training pool.
pub fn make_task_from_samples(
    dim: usize,
    rows: Vec<(Vec<f64>, ClassId)>,
    mismatch_ratio: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<OpenSetTask> {
    if dim == 0 {
        return Err(Error::Config("task.dim must be at least 1".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "task.test_fraction must be in (0, 1), got {}",
            test_fraction
        )));
    }
    for (i, (f, _)) in rows.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::Dim(format!(
                "row {} has {} features, expected {}",
                i,
                f.len(),
                dim
            )));
        }
    }
    let mut class_ids: Vec<ClassId> = rows.iter().map(|(_, c)| *c).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(Error::Config(format!(
            "imported data holds {} distinct classes; at least 2 are required",
            class_ids.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Work on positions within the sorted distinct-class list, then map back.
    let n_classes = class_ids.len();
    let (known_pos, _) = split_classes(n_classes, mismatch_ratio, &mut rng)?;
    let known: Vec<ClassId> = known_pos.iter().map(|&p| class_ids[p as usize]).collect();
    let unknown: Vec<ClassId> = class_ids
        .iter()
        .copied()
        .filter(|c| known.binary_search(c).is_err())
        .collect();

    // Pick test rows per known class.
    let mut test_rows: Vec<usize> = Vec::new();
    for &c in &known {
        let mut members: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, (_, rc))| *rc == c)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "class {} has only {} rows; known classes need at least 2 to split off a test sample",
                c,
                members.len()
            )));
        }
        let k = ((test_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        members.shuffle(&mut rng);
        test_rows.extend(members.into_iter().take(k));
    }
    let test_set: std::collections::BTreeSet<usize> = test_rows.into_iter().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, (features, class)) in rows.iter().enumerate() {
        if test_set.contains(&i) {
            continue;
        }
        train.push(Sample {
            pool_id: train.len() as SampleId,
            features: features.clone(),
            true_class: *class,
        });
    }
    for &i in &test_set {
        let (features, class) = &rows[i];
        test.push(Sample {
            pool_id: (train.len() + test.len()) as SampleId,
            features: features.clone(),
            true_class: *class,
        });
    }
    // Unknown classes must still be represented in the pool.
    for &c in &unknown {
        if !train.iter().any(|s| s.true_class == c) {
            return Err(Error::Config(format!(
                "class {} lost all rows during the split",
                c
            )));
        }
    }

    Ok(OpenSetTask {
        dim,
        known_classes: known,
        unknown_classes: unknown,
        mismatch_ratio,
        train,
        test,
    })
}
