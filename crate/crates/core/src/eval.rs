//! Continual-learning metrics over the accuracy matrix, plus embedding
//! exports for separability analysis.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::reweight_prompts;
use crate::model::{score_candidates, BindMode, ModelParams};
use crate::synthdata::{Sample, TaskStream};
use crate::Tape;

/// Lower-triangular T x T matrix: `a[t][j]` is the accuracy on task j's test
/// split after finishing training on task t (tasks indexed by training
/// order). Row t has exactly t + 1 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.rows.len() + 1);
        self.rows.push(row);
    }

    /// Every row t must hold exactly t + 1 entries in [0, 1].
    pub fn validate(&self) -> Result<()> {
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::IncompleteMatrix { row: t, got: row.len(), expected: t + 1 });
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::BadConfig(format!("accuracy outside [0,1] in row {t}")));
            }
        }
        Ok(())
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Final metrics derived from a complete accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_acc: f64,
    pub avg_fog: f64,
    /// Last-row accuracies, one per task in training order.
    pub per_task_final: Vec<f64>,
    /// Forgetting per non-final task (tasks 0..T-2 in training order).
    pub per_task_forgetting: Vec<f64>,
}

/// Fraction of test samples whose scored choice equals the gold index.
pub fn evaluate_task(params: &ModelParams, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut correct = 0usize;
    for sample in split {
        let (choice, _) = score_candidates(params, sample)?;
        if choice == sample.gold_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Mean of the last row: average accuracy over all tasks after the final task.
pub fn avg_final_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.validate()?;
    let last = matrix.rows.last().ok_or(Error::IncompleteMatrix { row: 0, got: 0, expected: 1 })?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Average forgetting: for each non-final task, the best accuracy it ever had
/// at earlier checkpoints minus its final accuracy, averaged. Negative
/// per-task values (backward transfer) are not clamped; a single task gives 0.
pub fn avg_forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    avg_forgetting_with(matrix, false)
}

/// `include_last` additionally averages in the final task's (always-zero)
/// forgetting term, dividing by T instead of T - 1.
pub fn avg_forgetting_with(matrix: &AccuracyMatrix, include_last: bool) -> Result<f64> {
    matrix.validate()?;
    let t_total = matrix.num_tasks();
    if t_total == 0 {
        return Err(Error::IncompleteMatrix { row: 0, got: 0, expected: 1 });
    }
    if t_total == 1 {
        return Ok(0.0);
    }
    let terms = forgetting_terms(matrix);
    let (sum, count) = if include_last {
        (terms.iter().sum::<f64>(), t_total) // last task's term is 0
    } else {
        (terms.iter().sum::<f64>(), t_total - 1)
    };
    Ok(sum / count as f64)
}

/// Per-task forgetting terms for tasks 0..T-2:
/// max over checkpoints t in {j..T-2} of a[t][j], minus a[T-1][j].
fn forgetting_terms(matrix: &AccuracyMatrix) -> Vec<f64> {
    let t_total = matrix.num_tasks();
    let last = &matrix.rows[t_total - 1];
    (0..t_total - 1)
        .map(|j| {
            let best = (j..t_total - 1)
                .map(|t| matrix.rows[t][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect()
}

pub fn metrics_report(matrix: &AccuracyMatrix) -> Result<MetricsReport> {
    let avg_acc = avg_final_accuracy(matrix)?;
    let avg_fog = avg_forgetting(matrix)?;
    let per_task_forgetting =
        if matrix.num_tasks() > 1 { forgetting_terms(matrix) } else { Vec::new() };
    Ok(MetricsReport {
        avg_acc,
        avg_fog,
        per_task_final: matrix.rows.last().cloned().unwrap_or_default(),
        per_task_forgetting,
    })
}

/// The question-reweighted prompt vector for one sample, as plain values.
pub fn weighted_prompt(params: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, BindMode::Inference);
    let p = reweight_prompts(&mut tape, &bound, &sample.question)?;
    Ok(tape.value(p).values().to_vec())
}

/// Export task type embeddings (one row per allocated task) and weighted
/// prompts (one row per test sample of every allocated task, in training
/// order) as CSV with columns kind, task_id, f0..f{D-1}. Returns the number
/// of data rows written.
pub fn export_embeddings(
    params: &ModelParams,
    stream: &TaskStream,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let allocated = params.learnable.task_embeddings.allocated;
    if allocated == 0 {
        return Err(Error::BadConfig("no task embeddings allocated".into()));
    }
    let d = params.config.model_dim;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write!(out, "kind,task_id")?;
    for j in 0..d {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;
    let mut rows = 0usize;
    for t in 0..allocated {
        write!(out, "task_embedding,{t}")?;
        for v in params.learnable.task_embeddings.matrix.row(t) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
        rows += 1;
    }
    for (position, task) in stream.ordered().enumerate().take(allocated) {
        for sample in &task.test {
            let p = weighted_prompt(params, sample)?;
            write!(out, "weighted_prompt,{position}")?;
            for v in &p {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters contribute 0, as do points where both cohesion and separation
/// are 0 (identical points).
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::BadConfig(format!(
            "{} points vs {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::SingleLabel);
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == own {
                a += dist(&points[i], &points[j]);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &other in &distinct {
            if other == own {
                continue;
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..n {
                if labels[j] == other {
                    sum += dist(&points[i], &points[j]);
                    count += 1;
                }
            }
            b = b.min(sum / count as f64);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::synthdata::{default_specs, generate_task_stream};
    use rand::Rng;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        AccuracyMatrix { rows: rows.iter().map(|r| r.to_vec()).collect() }
    }

    #[test]
    fn avg_acc_examples() {
        let m = matrix(&[&[0.5], &[0.5, 0.7]]);
        assert!((avg_final_accuracy(&m).unwrap() - 0.6).abs() < 1e-12);

        let c = matrix(&[&[0.3], &[0.3, 0.3], &[0.3, 0.3, 0.3]]);
        assert!((avg_final_accuracy(&c).unwrap() - 0.3).abs() < 1e-12);

        let m4 = matrix(&[
            &[0.9],
            &[0.9, 0.9],
            &[0.9, 0.9, 0.9],
            &[0.62, 0.58, 0.66, 0.54],
        ]);
        // direct mean oracle
        let expected = (0.62 + 0.58 + 0.66 + 0.54) / 4.0;
        assert!((avg_final_accuracy(&m4).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.60).abs() < 1e-12);
    }

    #[test]
    fn avg_fog_examples() {
        let c = matrix(&[&[0.4], &[0.4, 0.4], &[0.4, 0.4, 0.4]]);
        assert_eq!(avg_forgetting(&c).unwrap(), 0.0);

        let two = matrix(&[&[0.8], &[0.6, 0.7]]);
        let expected2 = 0.8 - 0.6;
        assert!((avg_forgetting(&two).unwrap() - expected2).abs() < 1e-12);

        let three = matrix(&[&[0.9], &[0.7, 0.8], &[0.6, 0.9, 0.7]]);
        // ((max(0.9, 0.7) - 0.6) + (0.8 - 0.9)) / 2
        let expected3 = ((0.9 - 0.6) + (0.8 - 0.9)) / 2.0;
        assert!((avg_forgetting(&three).unwrap() - expected3).abs() < 1e-12);
        assert!((expected3 - 0.1).abs() < 1e-12);

        let single = matrix(&[&[0.5]]);
        assert_eq!(avg_forgetting(&single).unwrap(), 0.0);
    }

    #[test]
    fn include_last_flag_rescales() {
        let three = matrix(&[&[0.9], &[0.7, 0.8], &[0.6, 0.9, 0.7]]);
        let without = avg_forgetting_with(&three, false).unwrap();
        let with = avg_forgetting_with(&three, true).unwrap();
        assert!((with - without * 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        let bad = matrix(&[&[0.5], &[0.5]]);
        assert!(matches!(avg_final_accuracy(&bad), Err(Error::IncompleteMatrix { .. })));
        assert!(matches!(avg_forgetting(&bad), Err(Error::IncompleteMatrix { .. })));
    }

    #[test]
    fn monotone_columns_give_nonpositive_forgetting() {
        let mut rng = crate::rng::stream(0, "monotone-fog");
        for _ in 0..25 {
            let t = rng.gen_range(2..6);
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for r in 0..t {
                let mut row = vec![0.0; r + 1];
                for (j, item) in row.iter_mut().enumerate() {
                    let below = if r > j { rows[r - 1][j] } else { 0.0 };
                    *item = below + rng.gen_range(0.0..(1.0 - below).max(1e-9)) * 0.5;
                }
                rows.push(row);
            }
            let m = AccuracyMatrix { rows };
            assert!(avg_forgetting(&m).unwrap() <= 0.0);
        }
    }

    #[test]
    fn metric_invariances_under_task_relabeling() {
        let mut rng = crate::rng::stream(1, "relabel");
        for _ in 0..25 {
            let t = rng.gen_range(2..6);
            let rows: Vec<Vec<f64>> =
                (0..t).map(|r| (0..=r).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let m = AccuracyMatrix { rows };
            // avg final accuracy depends only on the multiset of last-row entries
            let mut shuffled = m.clone();
            use rand::seq::SliceRandom;
            shuffled.rows.last_mut().unwrap().shuffle(&mut rng);
            assert!(
                (avg_final_accuracy(&m).unwrap() - avg_final_accuracy(&shuffled).unwrap()).abs()
                    < 1e-12
            );
            // avg forgetting depends only on the multiset of per-task terms
            let mut terms = forgetting_terms(&m);
            terms.shuffle(&mut rng);
            let mean = terms.iter().sum::<f64>() / terms.len() as f64;
            assert!((avg_forgetting(&m).unwrap() - mean).abs() < 1e-12);
        }
    }

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig { model_dim: 16, num_layers: 2, prompt_layers: 2, ..ModelConfig::default() };
        build_model(&cfg, 0).unwrap().0
    }

    #[test]
    fn always_first_choice_on_identical_candidates() {
        let params = tiny_params();
        let mut specs = default_specs();
        for s in &mut specs {
            s.train_size = 1;
            s.test_size = 4;
        }
        let stream = generate_task_stream(&specs, &[0, 1, 2, 3], 0).unwrap();
        let split: Vec<Sample> = stream.tasks[0]
            .test
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.candidates = vec![vec![5]; 5];
                s.gold_index = 0;
                s
            })
            .collect();
        assert_eq!(evaluate_task(&params, &split).unwrap(), 1.0);
    }

    #[test]
    fn random_equivalent_model_is_near_chance() {
        // identical candidates make the model's choice (index 0) carry no
        // information; accuracy is the fraction of gold_index == 0 draws,
        // binomially distributed around 1/5 over 64 samples
        let params = tiny_params();
        let mut specs = default_specs();
        specs.truncate(1);
        specs[0].train_size = 0;
        specs[0].test_size = 64;
        let stream = generate_task_stream(&specs, &[0], 3).unwrap();
        let split: Vec<Sample> = stream.tasks[0]
            .test
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.candidates = vec![vec![7]; 5];
                s
            })
            .collect();
        let acc = evaluate_task(&params, &split).unwrap();
        let zeros = split.iter().filter(|s| s.gold_index == 0).count();
        assert_eq!(acc, zeros as f64 / 64.0);
        assert!((acc - 0.2).abs() < 0.17, "outside binomial range: {acc}");
    }

    #[test]
    fn duplicating_samples_leaves_accuracy_unchanged() {
        let params = tiny_params();
        let mut specs = default_specs();
        specs.truncate(1);
        specs[0].train_size = 0;
        specs[0].test_size = 8;
        let stream = generate_task_stream(&specs, &[0], 1).unwrap();
        let split = stream.tasks[0].test.clone();
        let mut doubled = split.clone();
        doubled.extend(split.iter().cloned());
        assert_eq!(
            evaluate_task(&params, &split).unwrap(),
            evaluate_task(&params, &doubled).unwrap()
        );
    }

    #[test]
    fn empty_split_errors() {
        let params = tiny_params();
        assert!(matches!(evaluate_task(&params, &[]), Err(Error::EmptySplit)));
    }

    #[test]
    fn export_counts_header_and_determinism() {
        let mut params = tiny_params();
        params.learnable.task_embeddings.allocated = 4;
        let mut specs = default_specs();
        for s in &mut specs {
            s.train_size = 1;
            s.test_size = 3;
        }
        let stream = generate_task_stream(&specs, &[0, 1, 2, 3], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let rows = export_embeddings(&params, &stream, &path).unwrap();
        assert_eq!(rows, 4 + 4 * 3);
        let contents = std::fs::read_to_string(&path).unwrap();
        let header = contents.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 2 + params.config.model_dim);
        assert_eq!(contents.lines().count(), 1 + rows);
        // re-export without training: byte-identical
        let path2 = dir.path().join("emb2.csv");
        export_embeddings(&params, &stream, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn export_requires_allocation() {
        let params = tiny_params();
        let mut specs = default_specs();
        specs.truncate(1);
        specs[0].train_size = 1;
        specs[0].test_size = 1;
        let stream = generate_task_stream(&specs, &[0], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(export_embeddings(&params, &stream, dir.path().join("x.csv")).is_err());
    }

    #[test]
    fn silhouette_two_tight_far_pairs() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![10.0, 0.0],
            vec![10.0, 0.1],
        ];
        let labels = vec![0, 0, 1, 1];
        let s = silhouette(&points, &labels).unwrap();
        // direct formula oracle on the 4 hand points
        let cross = (10.0f64.powi(2) + 0.1f64.powi(2)).sqrt();
        let b = (10.0 + cross) / 2.0;
        let expected = (b - 0.1) / b;
        assert!((s - expected).abs() < 1e-12);
        assert!(s > 0.9);
    }

    #[test]
    fn silhouette_degenerate_identical_points_is_zero() {
        let points = vec![vec![1.0, 2.0]; 4];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(silhouette(&points, &labels).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_label_permutation_invariant() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.5, 0.2],
            vec![4.0, 4.0],
            vec![4.5, 3.8],
            vec![-3.0, 1.0],
        ];
        let labels = vec![0, 0, 1, 1, 2];
        let relabeled: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
        let a = silhouette(&points, &labels).unwrap();
        let b = silhouette(&points, &relabeled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn silhouette_single_label_errors() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(matches!(silhouette(&points, &[3, 3]), Err(Error::SingleLabel)));
    }

    #[test]
    fn silhouette_singletons_contribute_zero() {
        // two singletons only: every point contributes 0
        let points = vec![vec![0.0], vec![5.0]];
        assert_eq!(silhouette(&points, &[0, 1]).unwrap(), 0.0);
    }
}
