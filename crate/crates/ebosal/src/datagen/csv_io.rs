//! CSV import/export of task data.
//!
//! Schema: `feat_0,...,feat_{d-1},class_id[,split]`. Export writes one row
//! per sample with the split column (`labeled`, `unlabeled`, `invalid`, or
//! `test`); import accepts files with or without the split column and
//! ignores it, since pool membership is decided by the importer's own
//! seeding.

use std::path::Path;

use crate::error::{Error, Result};

use super::pool::PoolState;
use super::task::{ClassId, OpenSetTask};

/// Writes every sample of a task, with current pool membership, to CSV.
pub fn export_splits(task: &OpenSetTask, pool: &PoolState, path: &Path) -> Result<()> {
    let covered = pool.labeled().len() + pool.unlabeled().len() + pool.invalid().len();
    if covered != task.train().len() {
        return Err(Error::Contract(format!(
            "pool covers {} samples, task has {}",
            covered,
            task.train().len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut header: Vec<String> = (0..task.dim()).map(|j| format!("feat_{}", j)).collect();
    header.push("class_id".into());
    header.push("split".into());
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;

    let mut row: Vec<String> = Vec::with_capacity(task.dim() + 2);
    for s in task.train() {
        row.clear();
        row.extend(s.features.iter().map(|v| v.to_string()));
        row.push(s.true_class().to_string());
        let split = if pool.labeled().contains_key(&s.pool_id) {
            "labeled"
        } else if pool.invalid().contains(&s.pool_id) {
            "invalid"
        } else {
            "unlabeled"
        };
        row.push(split.into());
        w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    for s in task.test() {
        row.clear();
        row.extend(s.features.iter().map(|v| v.to_string()));
        row.push(s.true_class().to_string());
        row.push("test".into());
        w.write_record(&row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `(dim, rows)` from a CSV in the schema above. The split column,
/// when present, is ignored.
pub fn import_samples(path: &Path) -> Result<(usize, Vec<(Vec<f64>, ClassId)>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    let headers = r
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?
        .clone();

    let mut dim = 0;
    for (i, h) in headers.iter().enumerate() {
        let expect = format!("feat_{}", i);
        if h == expect {
            dim = i + 1;
        } else {
            break;
        }
    }
    if dim == 0 {
        return Err(Error::Parse(format!(
            "{}: first column must be feat_0, got '{}'",
            path.display(),
            headers.get(0).unwrap_or("")
        )));
    }
    match headers.get(dim) {
        Some("class_id") => {}
        other => {
            return Err(Error::Parse(format!(
                "{}: column {} must be class_id, got '{}'",
                path.display(),
                dim,
                other.unwrap_or("")
            )))
        }
    }
    let extras = headers.len() - dim - 1;
    if extras > 1 || (extras == 1 && headers.get(dim + 1) != Some("split")) {
        return Err(Error::Parse(format!(
            "{}: unexpected trailing columns after class_id",
            path.display()
        )));
    }

    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                line + 2,
                rec.len(),
                headers.len()
            )));
        }
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let v: f64 = rec[j].parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {} column feat_{}: '{}' is not a float",
                    path.display(),
                    line + 2,
                    j,
                    &rec[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{}: row {} column feat_{}",
                    path.display(),
                    line + 2,
                    j
                )));
            }
            features.push(v);
        }
        let class: ClassId = rec[dim].parse().map_err(|_| {
            Error::Parse(format!(
                "{}: row {} class_id: '{}' is not a class id",
                path.display(),
                line + 2,
                &rec[dim]
            ))
        })?;
        rows.push((features, class));
    }
    Ok((dim, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::pool::init_pool;
    use crate::datagen::task::{
        make_task, make_task_from_samples, GaussianMixtureSpec, GeneratorSpec,
    };

    fn small_task() -> OpenSetTask {
        make_task(
            &GeneratorSpec::GaussianMixture(GaussianMixtureSpec {
                classes: 4,
                dim: 3,
                train_per_class: 5,
                test_per_class: 2,
                center_box: 2.0,
                class_std: 0.5,
                subclusters: 1,
                subcluster_spread: 0.0,
            }),
            0.5,
            3,
        )
        .unwrap()
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let task = small_task();
        let mut pool = init_pool(&task, 0.4, 1).unwrap();
        let victim = *pool.unlabeled().iter().next().unwrap();
        pool.oracle_label(&task, &[victim]).unwrap();
        export_splits(&task, &pool, &path).unwrap();

        let (dim, rows) = import_samples(&path).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(rows.len(), task.train().len() + task.test().len());
        // Features survive the round trip exactly.
        for (row, s) in rows.iter().zip(task.train().iter()) {
            assert_eq!(row.0, s.features);
            assert_eq!(row.1, s.true_class());
        }

        // And the rows feed straight back into task construction.
        let rebuilt = make_task_from_samples(dim, rows, 0.5, 0.25, 7).unwrap();
        assert_eq!(rebuilt.dim(), 3);
        assert_eq!(rebuilt.num_known(), 2);
    }

    #[test]
    fn import_rejects_malformed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y,class_id\n1,2,0\n").unwrap();
        let err = import_samples(&path).unwrap_err().to_string();
        assert!(err.contains("feat_0"), "message was: {}", err);

        std::fs::write(&path, "feat_0,feat_1,label\n1,2,0\n").unwrap();
        let err = import_samples(&path).unwrap_err().to_string();
        assert!(err.contains("class_id"), "message was: {}", err);
    }

    #[test]
    fn import_rejects_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "feat_0,class_id\nabc,0\n").unwrap();
        assert!(import_samples(&path).is_err());
        std::fs::write(&path, "feat_0,class_id\n1.5,zebra\n").unwrap();
        assert!(import_samples(&path).is_err());
        std::fs::write(&path, "feat_0,class_id\nNaN,0\n").unwrap();
        assert!(matches!(
            import_samples(&path),
            Err(Error::NonFinite(_))
        ));
    }
}
