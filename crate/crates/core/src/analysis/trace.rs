use std::collections::BTreeMap;

use rayon::prelude::*;

use super::cartography::CartographyRecord;
use super::stats::mean;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::params::{linear_interpolate, make_alpha_grid, ParamVector};
use crate::table::Table;

/// Per-point transition sets derived from a `[point][sample]` correctness matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transitions {
    /// `sets[j]`: samples correct at `j-1` and wrong at `j` that never left before.
    /// `sets[0]` is empty.
    pub sets: Vec<Vec<usize>>,
    /// Samples flipping back (wrong → correct) after having been counted.
    pub reversals: usize,
    /// All wrong → correct flips, counted or not.
    pub reverse_flips: usize,
}

/// Newly "lost" samples per point: correct at `j−1`, wrong at `j`.
///
/// A sample enters at most one set; later losses of the same sample are not
/// counted again, and its flips back to correct after entering are tallied in
/// `reversals`. Pass the negated matrix to get newly learned sets.
pub fn transition_sets(correct: &[Vec<bool>]) -> Result<Transitions> {
    let Some(first) = correct.first() else {
        return Ok(Transitions::default());
    };
    let n = first.len();
    if correct.iter().any(|row| row.len() != n) {
        return Err(Error::structure("correctness rows have different lengths"));
    }
    let mut out = Transitions {
        sets: vec![Vec::new()],
        ..Transitions::default()
    };
    let mut entered = vec![false; n];
    for j in 1..correct.len() {
        let (prev, cur) = (&correct[j - 1], &correct[j]);
        let mut set = Vec::new();
        for i in 0..n {
            if prev[i] && !cur[i] && !entered[i] {
                entered[i] = true;
                set.push(i);
            } else if !prev[i] && cur[i] {
                out.reverse_flips += 1;
                if entered[i] {
                    out.reversals += 1;
                }
            }
        }
        out.sets.push(set);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub j: usize,
    pub alpha: f64,
    /// F_j: source samples newly forgotten at this point.
    pub forgotten: Vec<usize>,
    /// M_j: target samples newly memorized at this point.
    pub memorized: Vec<usize>,
    pub mean_confidence_forgotten: Option<f64>,
    pub mean_variability_forgotten: Option<f64>,
    pub mean_confidence_memorized: Option<f64>,
    pub mean_variability_memorized: Option<f64>,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathKnowledgeTrace {
    pub points: Vec<TracePoint>,
    /// Source samples correct at φ_0.
    pub source_correct_at_start: usize,
    /// Source samples that flipped back to correct (any wrong → correct flip).
    pub source_rememorized: usize,
    /// Target samples that flipped from correct to wrong.
    pub target_reforgotten: usize,
    pub metadata: BTreeMap<String, String>,
}

impl PathKnowledgeTrace {
    pub fn confidence_series_forgotten(&self) -> (Vec<f64>, Vec<f64>) {
        self.series(|p| p.mean_confidence_forgotten)
    }

    pub fn confidence_series_memorized(&self) -> (Vec<f64>, Vec<f64>) {
        self.series(|p| p.mean_confidence_memorized)
    }

    /// `(j, value)` pairs for j ≥ 1 where the statistic is present.
    fn series(&self, f: impl Fn(&TracePoint) -> Option<f64>) -> (Vec<f64>, Vec<f64>) {
        self.points
            .iter()
            .skip(1)
            .filter_map(|p| f(p).map(|v| (p.j as f64, v)))
            .unzip()
    }

    pub fn to_table(&self, name: &str) -> Table {
        let mut t = Table::new(
            name,
            &[
                "j",
                "alpha",
                "forgotten_count",
                "memorized_count",
                "mean_confidence_forgotten",
                "mean_variability_forgotten",
                "mean_confidence_memorized",
                "mean_variability_memorized",
                "source_accuracy",
                "target_accuracy",
            ],
        );
        t.metadata = self.metadata.clone();
        t.metadata.insert(
            "source_rememorized".into(),
            self.source_rememorized.to_string(),
        );
        t.metadata.insert(
            "target_reforgotten".into(),
            self.target_reforgotten.to_string(),
        );
        for p in &self.points {
            t.push(vec![
                p.j.into(),
                p.alpha.into(),
                p.forgotten.len().into(),
                p.memorized.len().into(),
                p.mean_confidence_forgotten.into(),
                p.mean_variability_forgotten.into(),
                p.mean_confidence_memorized.into(),
                p.mean_variability_memorized.into(),
                p.source_accuracy.into(),
                p.target_accuracy.into(),
            ]);
        }
        t
    }
}

fn summarize(set: &[usize], carto: &CartographyRecord) -> (Option<f64>, Option<f64>) {
    let conf: Vec<f64> = set
        .iter()
        .map(|&i| carto.per_sample[i].confidence)
        .collect();
    let var: Vec<f64> = set
        .iter()
        .map(|&i| carto.per_sample[i].variability)
        .collect();
    (mean(&conf), mean(&var))
}

/// Walks φ_j = a + (j / (n_points − 1))·(b − a) and records which source
/// samples are newly forgotten and which target samples are newly memorized.
#[allow(clippy::too_many_arguments)]
pub fn knowledge_trace(
    model: &Classifier,
    a: &ParamVector,
    b: &ParamVector,
    source: &Dataset,
    target: &Dataset,
    n_points: usize,
    carto_source: &CartographyRecord,
    carto_target: &CartographyRecord,
) -> Result<PathKnowledgeTrace> {
    if n_points < 2 {
        return Err(Error::domain("a knowledge trace needs at least 2 points"));
    }
    if carto_source.len() != source.len() || carto_target.len() != target.len() {
        return Err(Error::structure(format!(
            "cartography records ({}, {}) do not align with datasets ({}, {})",
            carto_source.len(),
            carto_target.len(),
            source.len(),
            target.len()
        )));
    }
    let alphas = make_alpha_grid(n_points - 2);
    let evals: Vec<(Vec<bool>, Vec<bool>)> = alphas
        .par_iter()
        .map(|&alpha| {
            let p = linear_interpolate(a, b, alpha)?;
            let s = model.forward_loss(&p, &source.samples)?;
            let t = model.forward_loss(&p, &target.samples)?;
            Ok((s.correct, t.correct))
        })
        .collect::<Result<_>>()?;
    let (src, tgt): (Vec<Vec<bool>>, Vec<Vec<bool>>) = evals.into_iter().unzip();
    let forgotten = transition_sets(&src)?;
    let negated: Vec<Vec<bool>> = tgt.iter().map(|r| r.iter().map(|c| !c).collect()).collect();
    let memorized = transition_sets(&negated)?;

    let accuracy =
        |row: &[bool]| row.iter().filter(|&&c| c).count() as f64 / row.len().max(1) as f64;
    let points = alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let f = forgotten.sets[j].clone();
            let m = memorized.sets[j].clone();
            let (cf, vf) = summarize(&f, carto_source);
            let (cm, vm) = summarize(&m, carto_target);
            TracePoint {
                j,
                alpha,
                forgotten: f,
                memorized: m,
                mean_confidence_forgotten: cf,
                mean_variability_forgotten: vf,
                mean_confidence_memorized: cm,
                mean_variability_memorized: vm,
                source_accuracy: accuracy(&src[j]),
                target_accuracy: accuracy(&tgt[j]),
            }
        })
        .collect();

    let mut metadata = BTreeMap::new();
    metadata.insert("source_dataset".into(), source.name.clone());
    metadata.insert("target_dataset".into(), target.name.clone());
    Ok(PathKnowledgeTrace {
        points,
        source_correct_at_start: src[0].iter().filter(|&&c| c).count(),
        source_rememorized: forgotten.reverse_flips,
        target_reforgotten: memorized.reverse_flips,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_correctness_matrix() {
        let t = true;
        let f = false;
        let m = vec![vec![t, t, f], vec![t, f, f], vec![f, f, f]];
        let tr = transition_sets(&m).unwrap();
        assert_eq!(tr.sets, vec![vec![], vec![1], vec![0]]);
        assert_eq!(tr.reversals, 0);
        assert_eq!(tr.reverse_flips, 0);
    }

    #[test]
    fn a_sample_enters_at_most_once() {
        let m = vec![
            vec![true, true],
            vec![false, true],
            vec![true, true],
            vec![false, false],
        ];
        let tr = transition_sets(&m).unwrap();
        assert_eq!(tr.sets, vec![vec![], vec![0], vec![], vec![1]]);
        assert_eq!(tr.reversals, 1);
        assert_eq!(tr.reverse_flips, 1);
    }

    #[test]
    fn ragged_matrix_is_structural() {
        assert!(transition_sets(&[vec![true], vec![true, false]]).is_err());
    }
}
