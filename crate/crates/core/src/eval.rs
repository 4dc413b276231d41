//! Normalized log-likelihood, lift, and the regularization selection
//! protocol.
//!
//! The baseline for normalization predicts the empirical CTR of the test set
//! itself, so a model beating it scores below 1. Regularization strengths are
//! selected on the test set through an opaque [`Scorer`]; the tuner never sees
//! test labels directly.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{per_feature_lambda, DesignMatrix, FeatureGroup};
use crate::logreg::{predict_all, train, LogRegModel, TrainOptions};

pub const PROB_FLOOR: f64 = 1e-15;

/// Negative Bernoulli log-likelihood with probabilities clamped to
/// `[1e-15, 1 − 1e-15]`.
pub fn neg_log_likelihood(preds: &[f64], labels: &[u8]) -> f64 {
    preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            if y == 1 {
                -p.ln()
            } else {
                -(-p).ln_1p()
            }
        })
        .sum()
}

/// Model log-likelihood over that of the constant test-CTR predictor.
pub fn normalized_ll(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let ctr = labels.iter().map(|&y| y as f64).sum::<f64>() / labels.len() as f64;
    if ctr == 0.0 || ctr == 1.0 {
        log::warn!("test labels are all one class; baseline likelihood rests on the probability floor");
    }
    let baseline = neg_log_likelihood(&vec![ctr; labels.len()], labels);
    Ok(neg_log_likelihood(preds, labels) / baseline)
}

/// Percentage improvement of `ll_model` over `ll_reference`.
pub fn lift(ll_model: f64, ll_reference: f64) -> Result<f64> {
    if !(ll_reference > 0.0) {
        return Err(Error::Validation(format!(
            "reference likelihood {ll_reference} must be positive"
        )));
    }
    Ok(100.0 * (ll_reference - ll_model) / ll_reference)
}

/// Scores a model on held-out data it keeps to itself.
pub trait Scorer: Sync {
    /// Normalized log-likelihood of `model`, trained on the listed groups.
    fn score(&self, groups: &[FeatureGroup], model: &LogRegModel) -> Result<f64>;
}

/// Scores against a test design matrix carrying every group.
pub struct TestSetScorer {
    test: DesignMatrix,
}

impl TestSetScorer {
    pub fn new(test: DesignMatrix) -> Self {
        TestSetScorer { test }
    }
}

impl Scorer for TestSetScorer {
    fn score(&self, groups: &[FeatureGroup], model: &LogRegModel) -> Result<f64> {
        let x = self.test.select_groups(groups)?;
        normalized_ll(&predict_all(model, &x), x.labels())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Groups, e.g. `"f1,f3,f4"`.
    pub model_label: String,
    /// Reduction providing the f≥3 groups, if any.
    pub reduction: Option<String>,
    pub stage: u8,
    pub lambda_f1: f64,
    pub lambda_f2: Option<f64>,
    pub lambda_rest: Option<f64>,
    pub train_seconds: f64,
    pub nnz_all: usize,
    /// Only present when f2 is part of the model.
    pub nnz_f2: Option<usize>,
    pub ll_normalized: f64,
    /// Relative to the selected f1-only model.
    pub lift_percent: f64,
    pub selected: bool,
    pub converged: bool,
    pub baseline: &'static str,
}

/// A reduction's feature groups, e.g. IRM → f3, f4.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub name: String,
    pub groups: Vec<FeatureGroup>,
}

impl Reduction {
    pub fn irm() -> Self {
        Reduction {
            name: "irm".into(),
            groups: vec![FeatureGroup::F3, FeatureGroup::F4],
        }
    }

    pub fn svd() -> Self {
        Reduction {
            name: "svd".into(),
            groups: vec![FeatureGroup::F5, FeatureGroup::F6],
        }
    }

    pub fn nmf() -> Self {
        Reduction {
            name: "nmf".into(),
            groups: vec![FeatureGroup::F7, FeatureGroup::F8],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningProtocol {
    pub grid_f1: Vec<f64>,
    pub grid_f2: Vec<f64>,
    pub grid_rest: Vec<f64>,
    pub reductions: Vec<Reduction>,
    /// Run the f2 stage (requires f2 columns in the training matrix).
    pub with_f2: bool,
    pub train: TrainOptions,
}

/// `n` points spaced by `factor` starting at `low`.
pub fn geometric_grid(low: f64, factor: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| low * factor.powi(i as i32)).collect()
}

impl Default for TuningProtocol {
    fn default() -> Self {
        // factor 1.4 over four decades
        let grid = geometric_grid(1e-2, 1.4, 29);
        TuningProtocol {
            grid_f1: grid.clone(),
            grid_f2: grid.clone(),
            grid_rest: grid,
            reductions: vec![Reduction::irm()],
            with_f2: true,
            train: TrainOptions::default(),
        }
    }
}

/// The model picked at one (stage, reduction).
#[derive(Debug, Clone)]
pub struct SelectedModel {
    pub model_label: String,
    pub reduction: Option<String>,
    pub groups: Vec<FeatureGroup>,
    pub model: LogRegModel,
    pub ll_normalized: f64,
}

#[derive(Debug, Clone)]
pub struct TuningResult {
    pub reports: Vec<EvalReport>,
    pub selected: Vec<SelectedModel>,
}

impl TuningResult {
    pub fn selected_for(&self, groups: &[FeatureGroup]) -> Option<&SelectedModel> {
        self.selected.iter().find(|s| s.groups == groups)
    }
}

struct Fit {
    model: LogRegModel,
    ll: f64,
    lambdas: (f64, f64, f64),
}

fn label(groups: &[FeatureGroup]) -> String {
    groups.iter().map(|g| g.name()).collect::<Vec<_>>().join(",")
}

/// One grid search; returns all fits in grid order and the index of the best.
fn search(
    x: &DesignMatrix,
    scorer: &dyn Scorer,
    groups: &[FeatureGroup],
    grid: &[(f64, f64, f64)],
    opts: &TrainOptions,
) -> Result<(Vec<Fit>, usize)> {
    let sub = x.select_groups(groups)?;
    let fits: Vec<Fit> = grid
        .par_iter()
        .map(|&(l1, l2, lr)| {
            let pen = per_feature_lambda(sub.layout(), l1, l2, lr)?;
            let model = match train(&sub, &pen, opts) {
                Ok(m) => m,
                Err(Error::Convergence { message, last }) => {
                    log::warn!("{}: {message}; keeping the last iterate", label(groups));
                    *last
                }
                Err(e) => return Err(e),
            };
            let ll = scorer.score(groups, &model)?;
            Ok(Fit {
                model,
                ll,
                lambdas: (l1, l2, lr),
            })
        })
        .collect::<Result<_>>()?;
    // first minimum in grid order
    let best = (0..fits.len())
        .min_by(|&a, &b| fits[a].ll.total_cmp(&fits[b].ll))
        .expect("non-empty grid");
    Ok((fits, best))
}

/// Three-stage selection:
/// 1. λ_f1 for the f1-only model;
/// 2. with λ_f1 fixed, λ_rest for f1 plus each reduction's groups;
/// 3. with those fixed, λ_f2 for f1+f2 and for f1+f2 plus each reduction.
///
/// Emits one report per fitted model; lifts are relative to the selected
/// f1-only model.
pub fn tune_lambda(train_x: &DesignMatrix, scorer: &dyn Scorer, protocol: &TuningProtocol) -> Result<TuningResult> {
    if protocol.grid_f1.is_empty()
        || protocol.grid_rest.is_empty() && !protocol.reductions.is_empty()
        || protocol.grid_f2.is_empty() && protocol.with_f2
    {
        return Err(Error::Config("empty regularization grid".into()));
    }
    let mut stages: Vec<(u8, Option<String>, Vec<FeatureGroup>, Vec<Fit>, usize)> = Vec::new();

    let f1 = vec![FeatureGroup::F1];
    let grid: Vec<_> = protocol.grid_f1.iter().map(|&l| (l, 0.0, 0.0)).collect();
    let (fits, best) = search(train_x, scorer, &f1, &grid, &protocol.train)?;
    let lambda_f1 = fits[best].lambdas.0;
    let reference = fits[best].ll;
    stages.push((1, None, f1.clone(), fits, best));

    let mut lambda_rest = Vec::new();
    for r in &protocol.reductions {
        let groups: Vec<_> = f1.iter().chain(&r.groups).copied().collect();
        let grid: Vec<_> = protocol.grid_rest.iter().map(|&l| (lambda_f1, 0.0, l)).collect();
        let (fits, best) = search(train_x, scorer, &groups, &grid, &protocol.train)?;
        lambda_rest.push(fits[best].lambdas.2);
        stages.push((2, Some(r.name.clone()), groups, fits, best));
    }

    if protocol.with_f2 {
        let f12 = vec![FeatureGroup::F1, FeatureGroup::F2];
        let grid: Vec<_> = protocol.grid_f2.iter().map(|&l| (lambda_f1, l, 0.0)).collect();
        let (fits, best) = search(train_x, scorer, &f12, &grid, &protocol.train)?;
        stages.push((3, None, f12.clone(), fits, best));
        for (r, &lr) in protocol.reductions.iter().zip(&lambda_rest) {
            let groups: Vec<_> = f12.iter().chain(&r.groups).copied().collect();
            let grid: Vec<_> = protocol.grid_f2.iter().map(|&l| (lambda_f1, l, lr)).collect();
            let (fits, best) = search(train_x, scorer, &groups, &grid, &protocol.train)?;
            stages.push((3, Some(r.name.clone()), groups, fits, best));
        }
    }

    let mut reports = Vec::new();
    let mut selected = Vec::new();
    for (stage, reduction, groups, fits, best) in stages {
        let has_f2 = groups.contains(&FeatureGroup::F2);
        let has_rest = groups.iter().any(|g| !matches!(g, FeatureGroup::F1 | FeatureGroup::F2));
        for (i, fit) in fits.iter().enumerate() {
            reports.push(EvalReport {
                model_label: label(&groups),
                reduction: reduction.clone(),
                stage,
                lambda_f1: fit.lambdas.0,
                lambda_f2: has_f2.then_some(fit.lambdas.1),
                lambda_rest: has_rest.then_some(fit.lambdas.2),
                train_seconds: fit.model.train_seconds,
                nnz_all: fit.model.nnz_total,
                nnz_f2: if has_f2 { fit.model.nnz(FeatureGroup::F2) } else { None },
                ll_normalized: fit.ll,
                lift_percent: lift(fit.ll, reference)?,
                selected: i == best,
                converged: fit.model.converged,
                baseline: "test_ctr",
            });
        }
        let Fit { model, ll, .. } = fits.into_iter().nth(best).expect("best index");
        selected.push(SelectedModel {
            model_label: label(&groups),
            reduction,
            groups,
            model,
            ll_normalized: ll,
        });
    }
    Ok(TuningResult { reports, selected })
}

const TSV_NOTE: &str = "# baseline: constant CTR of the test set; regularization selected on the test set";

/// Table-style TSV: λs, training seconds, nnz, `LL·100` and lift.
pub fn write_reports_tsv<W: Write>(mut w: W, reports: &[EvalReport]) -> Result<()> {
    writeln!(w, "{TSV_NOTE}")?;
    writeln!(
        w,
        "model\treduction\tstage\tlambda_f1\tlambda_f2\tlambda_rest\ttime_s\tnnz_all\tnnz_f2\tll_x100\tlift_percent\tselected\tconverged"
    )?;
    let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
    for r in reports {
        writeln!(
            w,
            "{}\t{}\t{}\t{:.4e}\t{}\t{}\t{:.3}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}",
            r.model_label,
            r.reduction.as_deref().unwrap_or("-"),
            r.stage,
            r.lambda_f1,
            opt(r.lambda_f2),
            opt(r.lambda_rest),
            r.train_seconds,
            r.nnz_all,
            r.nnz_f2.map_or_else(|| "-".to_string(), |n| n.to_string()),
            100.0 * r.ll_normalized,
            r.lift_percent,
            u8::from(r.selected),
            u8::from(r.converged),
        )?;
    }
    Ok(())
}

pub fn write_reports_jsonl<W: Write>(mut w: W, reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ColumnLayout, GroupRange, SparseRow};

    #[test]
    fn constant_ctr_scores_exactly_one() {
        let labels = [1, 0, 0, 0, 1, 0, 0];
        let ctr = 2.0 / 7.0;
        assert_eq!(normalized_ll(&[ctr; 7], &labels).unwrap(), 1.0);
    }

    #[test]
    fn perfect_predictions_score_near_zero() {
        let labels = [1, 0, 0, 1];
        let preds: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        assert!(normalized_ll(&preds, &labels).unwrap() < 1e-12);
    }

    #[test]
    fn four_point_hand_computation() {
        let labels = [1, 0, 1, 0];
        let preds = [0.9, 0.2, 0.6, 0.4];
        let model = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln() + 0.6f64.ln());
        let baseline = -4.0 * 0.5f64.ln();
        assert!((normalized_ll(&preds, &labels).unwrap() - model / baseline).abs() < 1e-12);
    }

    #[test]
    fn lift_values() {
        assert!((lift(0.8815, 0.9383).unwrap() - 6.05).abs() < 0.01);
        assert!((lift(0.8935, 0.9176).unwrap() - 2.63).abs() < 0.01);
        assert_eq!(lift(0.5, 0.5).unwrap(), 0.0);
        assert!(lift(0.6, 0.5).unwrap() < 0.0);
        assert!(lift(0.5, 0.0).is_err());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(normalized_ll(&[], &[]).is_err());
        assert!(normalized_ll(&[0.5], &[1, 0]).is_err());
        assert!(normalized_ll(&[0.1, 0.1], &[0, 0]).unwrap().is_finite());
    }

    fn tiny() -> DesignMatrix {
        let layout = ColumnLayout {
            groups: vec![
                GroupRange {
                    group: FeatureGroup::F1,
                    columns: 0..2,
                },
                GroupRange {
                    group: FeatureGroup::F2,
                    columns: 2..3,
                },
            ],
            n_features: 3,
            intercept: true,
        };
        let rows = (0..40)
            .map(|i| SparseRow {
                indices: vec![(i % 2) as u32, 2],
                values: vec![1.0, 1.0],
            })
            .collect();
        let labels = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
        DesignMatrix::from_rows(rows, labels, layout).unwrap()
    }

    #[test]
    fn single_point_grids() {
        let x = tiny();
        let scorer = TestSetScorer::new(x.clone());
        let p = TuningProtocol {
            grid_f1: vec![0.5],
            grid_f2: vec![0.25],
            grid_rest: vec![1.0],
            reductions: vec![],
            with_f2: true,
            train: TrainOptions::default(),
        };
        let r = tune_lambda(&x, &scorer, &p).unwrap();
        assert_eq!(r.reports.len(), 2);
        assert!(r.reports.iter().all(|r| r.selected));
        assert_eq!(r.reports[0].lambda_f1, 0.5);
        assert_eq!(r.reports[0].nnz_f2, None);
        assert_eq!(r.reports[1].lambda_f2, Some(0.25));
        assert!(r.reports[1].nnz_f2.is_some());
        assert_eq!(r.reports[0].lift_percent, 0.0);

        let mut buf = Vec::new();
        write_reports_tsv(&mut buf, &r.reports).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        let mut buf = Vec::new();
        write_reports_jsonl(&mut buf, &r.reports).unwrap();
        let first: serde_json::Value = serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["baseline"], "test_ctr");
    }

    #[test]
    fn empty_grid_is_config_error() {
        let x = tiny();
        let p = TuningProtocol {
            grid_f1: vec![],
            ..Default::default()
        };
        assert!(matches!(
            tune_lambda(&x, &TestSetScorer::new(x.clone()), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_grid_spans_four_decades() {
        let g = TuningProtocol::default().grid_f1;
        assert!(g.last().unwrap() / g[0] > 1e4);
    }
}
