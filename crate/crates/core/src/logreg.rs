//! L1-penalized logistic regression trained with OWL-QN, plus the exact and
//! product-form predictors.
//!
//! The objective is
//! `Σ_n [log(1 + e^{z_n}) − y_n z_n] + Σ_i λ_i |ω_i|` with
//! `z_n = x_nᵀω + ω₀`. The intercept is never penalized.
//!
//! For binary rows the prediction factorizes:
//! `P = cΠ / (1 + cΠ)` with `c = e^{ω₀}` and `Π` the product of `e^{ω_i}`
//! over active columns, so a [`WeightTable`] of pre-exponentiated weights
//! needs only multiplications at request time.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{DesignMatrix, FeatureGroup, SparseRow};

pub const DEFAULT_MEMORY: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_GRAD_TOL: f64 = 1e-9;
pub const MAX_BACKTRACKS: usize = 50;
const ARMIJO: f64 = 1e-4;
const ROW_CHUNK: usize = 1024;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    /// One weight per feature column; exact zeros where L1 pruned.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub fit_intercept: bool,
    /// Per-column λ, intercept column (if any) last and zero.
    pub penalty: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    pub train_seconds: f64,
    pub nnz_total: usize,
    pub nnz_by_group: Vec<(FeatureGroup, usize)>,
}

impl LogRegModel {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn nnz(&self, g: FeatureGroup) -> Option<usize> {
        self.nnz_by_group.iter().find(|(h, _)| *h == g).map(|p| p.1)
    }

    /// Non-zero weights as `(column, weight)`.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().copied().enumerate().filter(|(_, w)| *w != 0.0)
    }

    /// `"col weight"` lines for non-zeros after a header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        writeln!(w, "dimension {}", self.dimension())?;
        writeln!(w, "intercept {}", self.intercept)?;
        writeln!(w, "fit_intercept {}", u8::from(self.fit_intercept))?;
        writeln!(w, "objective {}", self.final_objective)?;
        writeln!(w, "converged {}", u8::from(self.converged))?;
        writeln!(w, "iterations {}", self.iterations)?;
        writeln!(w, "train_seconds {}", self.train_seconds)?;
        for (g, n) in &self.nnz_by_group {
            writeln!(w, "nnz {g} {n}")?;
        }
        // run-length penalty
        let mut i = 0;
        while i < self.penalty.len() {
            let mut j = i;
            while j < self.penalty.len() && self.penalty[j] == self.penalty[i] {
                j += 1;
            }
            writeln!(w, "penalty {i} {j} {}", self.penalty[i])?;
            i = j;
        }
        writeln!(w, "weights")?;
        for (c, x) in self.nonzeros() {
            writeln!(w, "{c} {x}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LogRegModel> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut m = LogRegModel {
            weights: Vec::new(),
            intercept: 0.0,
            fit_intercept: true,
            penalty: Vec::new(),
            converged: false,
            iterations: 0,
            final_objective: f64::NAN,
            train_seconds: 0.0,
            nnz_total: 0,
            nnz_by_group: Vec::new(),
        };
        let mut dim = None;
        let mut in_weights = false;
        for line in BufReader::new(f).lines() {
            let line = line?;
            let bad = || Error::load(path, format!("bad line {line:?}"));
            let t: Vec<&str> = line.split_whitespace().collect();
            if in_weights {
                let [c, x] = t.as_slice() else { return Err(bad()) };
                let c: usize = c.parse().map_err(|_| bad())?;
                let x: f64 = x.parse().map_err(|_| bad())?;
                let d = dim.ok_or_else(bad)?;
                if c >= d {
                    return Err(Error::load(path, format!("column {c} outside dimension {d}")));
                }
                m.weights[c] = x;
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            match t.as_slice() {
                ["dimension", d] => {
                    let d: usize = d.parse().map_err(|_| bad())?;
                    dim = Some(d);
                    m.weights = vec![0.0; d];
                }
                ["intercept", x] => m.intercept = num(x)?,
                ["fit_intercept", b] => m.fit_intercept = *b == "1",
                ["objective", x] => m.final_objective = num(x)?,
                ["converged", b] => m.converged = *b == "1",
                ["iterations", n] => m.iterations = n.parse().map_err(|_| bad())?,
                ["train_seconds", x] => m.train_seconds = num(x)?,
                ["nnz", g, n] => m.nnz_by_group.push((g.parse()?, n.parse().map_err(|_| bad())?)),
                ["penalty", a, b, x] => {
                    let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                    if a != m.penalty.len() || b < a {
                        return Err(bad());
                    }
                    let x = num(x)?;
                    m.penalty.extend(std::iter::repeat_n(x, b - a));
                }
                ["weights"] => in_weights = true,
                [] => {}
                _ => return Err(bad()),
            }
        }
        if dim.is_none() {
            return Err(Error::load(path, "missing dimension"));
        }
        m.nnz_total = m.nonzeros().count();
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub grad0: f64,
}

/// The design matrix in both layouts plus labels as floats.
struct Problem<'a> {
    x: &'a DesignMatrix,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    col_vals: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(x: &'a DesignMatrix) -> Self {
        let (col_ptr, row_idx, col_vals) = x.to_csc();
        Problem {
            x,
            col_ptr,
            row_idx,
            col_vals,
            y: x.labels().iter().map(|&l| l as f64).collect(),
        }
    }

    fn eval(&self, w: &[f64], w0: f64) -> Result<LossGrad> {
        let n = self.x.n_rows();
        let mut resid = vec![0.0; n];
        let chunk_loss: Vec<f64> = resid
            .par_chunks_mut(ROW_CHUNK)
            .enumerate()
            .map(|(ci, r)| {
                let mut loss = 0.0;
                for (k, rk) in r.iter_mut().enumerate() {
                    let i = ci * ROW_CHUNK + k;
                    let (idx, val) = self.x.row(i);
                    let z = w0 + idx.iter().zip(val).map(|(&c, &v)| w[c as usize] * v).sum::<f64>();
                    loss += softplus(z) - self.y[i] * z;
                    *rk = sigmoid(z) - self.y[i];
                }
                loss
            })
            .collect();
        let loss: f64 = chunk_loss.iter().sum();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let grad = (0..self.x.n_features())
            .into_par_iter()
            .map(|j| {
                (self.col_ptr[j]..self.col_ptr[j + 1])
                    .map(|k| self.col_vals[k] * resid[self.row_idx[k] as usize])
                    .sum()
            })
            .collect();
        let grad0 = resid
            .par_chunks(ROW_CHUNK)
            .map(|c| c.iter().sum::<f64>())
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        Ok(LossGrad { loss, grad, grad0 })
    }
}

/// Negative Bernoulli log-likelihood and its gradient `Xᵀ(p − y)`.
pub fn loss_grad(x: &DesignMatrix, w: &[f64], w0: f64) -> Result<LossGrad> {
    if w.len() != x.n_features() {
        return Err(Error::Dimension(format!(
            "{} weights for {} feature columns",
            w.len(),
            x.n_features()
        )));
    }
    Problem::new(x).eval(w, w0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// L-BFGS history length.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the relative objective change drops below this.
    pub tol: f64,
    /// Stop when the pseudo-gradient max-norm drops below this.
    pub grad_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            memory: DEFAULT_MEMORY,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            grad_tol: DEFAULT_GRAD_TOL,
        }
    }
}

/// Passed to the observer after every accepted step. Coordinates include the
/// intercept as the last entry.
#[derive(Debug)]
pub struct IterInfo<'a> {
    pub iteration: usize,
    pub objective: f64,
    pub previous_objective: f64,
    pub previous: &'a [f64],
    pub current: &'a [f64],
}

pub fn train_owlqn(x: &DesignMatrix, penalty: &[f64], memory: usize, max_iter: usize, tol: f64) -> Result<LogRegModel> {
    let opts = TrainOptions {
        memory,
        max_iter,
        tol,
        ..Default::default()
    };
    train(x, penalty, &opts)
}

pub fn train(x: &DesignMatrix, penalty: &[f64], opts: &TrainOptions) -> Result<LogRegModel> {
    train_observed(x, penalty, opts, |_| {})
}

fn validate(x: &DesignMatrix, penalty: &[f64], opts: &TrainOptions) -> Result<()> {
    if penalty.len() != x.n_cols() {
        return Err(Error::Dimension(format!(
            "penalty has {} entries for {} columns",
            penalty.len(),
            x.n_cols()
        )));
    }
    if let Some(l) = penalty.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Validation(format!("penalty {l} must be non-negative")));
    }
    if let Some(c) = x.layout().intercept_col() {
        if penalty[c] != 0.0 {
            return Err(Error::Validation("the intercept must not be penalized".into()));
        }
    }
    if opts.memory == 0 || !(opts.tol >= 0.0) || !(opts.grad_tol >= 0.0) {
        return Err(Error::Validation(
            "memory must be positive and tolerances non-negative".into(),
        ));
    }
    if x.n_rows() == 0 {
        return Err(Error::Validation("no training rows".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l1(theta: &[f64], lam: &[f64]) -> f64 {
    theta.iter().zip(lam).map(|(t, l)| l * t.abs()).sum()
}

fn pseudo_gradient(theta: &[f64], g: &[f64], lam: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(g)
        .zip(lam)
        .map(|((&t, &g), &l)| {
            if t > 0.0 {
                g + l
            } else if t < 0.0 {
                g - l
            } else if g + l < 0.0 {
                g + l
            } else if g - l > 0.0 {
                g - l
            } else {
                0.0
            }
        })
        .collect()
}

/// `−H·v` by the L-BFGS two-loop recursion, `H` from `(s, y, 1/sᵀy)` pairs.
fn two_loop(v: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = v.iter().map(|x| -x).collect();
    let mut alpha = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alpha.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alpha.iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += si * (a - b));
    }
    q
}

fn group_nnz(x: &DesignMatrix, w: &[f64]) -> Vec<(FeatureGroup, usize)> {
    x.layout()
        .groups
        .iter()
        .map(|r| (r.group, w[r.columns.clone()].iter().filter(|&&v| v != 0.0).count()))
        .collect()
}

/// OWL-QN with a per-step observer.
pub fn train_observed(
    x: &DesignMatrix,
    penalty: &[f64],
    opts: &TrainOptions,
    mut observer: impl FnMut(&IterInfo),
) -> Result<LogRegModel> {
    validate(x, penalty, opts)?;
    let start = Instant::now();
    let p = x.n_features();
    let fit_intercept = x.has_intercept();
    let problem = Problem::new(x);
    let mut lam = penalty[..p].to_vec();
    lam.push(0.0);

    let eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let lg = problem.eval(&theta[..p], theta[p])?;
        let mut g = lg.grad;
        g.push(if fit_intercept { lg.grad0 } else { 0.0 });
        Ok((lg.loss, g))
    };
    let model_at = |theta: &[f64], objective: f64, iterations: usize, converged: bool| {
        let weights = theta[..p].to_vec();
        let nnz_by_group = group_nnz(x, &weights);
        LogRegModel {
            nnz_total: nnz_by_group.iter().map(|g| g.1).sum(),
            nnz_by_group,
            weights,
            intercept: theta[p],
            fit_intercept,
            penalty: penalty.to_vec(),
            converged,
            iterations,
            final_objective: objective,
            train_seconds: start.elapsed().as_secs_f64(),
        }
    };

    let mut theta = vec![0.0; p + 1];
    let (f, mut g) = eval(&theta)?;
    let mut obj = f + l1(&theta, &lam);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        let pg = pseudo_gradient(&theta, &g, &lam);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.grad_tol {
            converged = true;
            break;
        }
        let mut d = two_loop(&pg, &mem);
        for (di, pgi) in d.iter_mut().zip(&pg) {
            if *di * pgi >= 0.0 {
                *di = 0.0;
            }
        }
        if dot(&d, &pg) >= 0.0 {
            mem.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let orthant: Vec<f64> = theta
            .iter()
            .zip(&pg)
            .map(|(&t, &q)| {
                if t != 0.0 {
                    t.signum()
                } else if q != 0.0 {
                    -q.signum()
                } else {
                    0.0
                }
            })
            .collect();
        let mut alpha = if mem.is_empty() { 1.0 / dot(&d, &d).sqrt() } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&d)
                .zip(&orthant)
                .map(|((&t, &di), &o)| {
                    let v = t + alpha * di;
                    if v * o > 0.0 {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            let (fc, gc) = eval(&cand)?;
            let oc = fc + l1(&cand, &lam);
            let decrease: f64 = pg
                .iter()
                .zip(cand.iter().zip(&theta))
                .map(|(q, (c, t))| q * (c - t))
                .sum();
            if oc <= obj + ARMIJO * decrease {
                accepted = Some((cand, oc, gc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, new_obj, new_g)) = accepted else {
            if !mem.is_empty() {
                // retry once along the steepest pseudo-gradient direction
                mem.clear();
                continue;
            }
            return Err(Error::Convergence {
                message: format!(
                    "line search failed after {MAX_BACKTRACKS} backtracks at iteration {}",
                    iter + 1
                ),
                last: Box::new(model_at(&theta, obj, iter, false)),
            });
        };
        iter += 1;
        observer(&IterInfo {
            iteration: iter,
            objective: new_obj,
            previous_objective: obj,
            previous: &theta,
            current: &cand,
        });
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let rel = (obj - new_obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        theta = cand;
        g = new_g;
        obj = new_obj;
        if rel < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("OWL-QN stopped at max_iter={} before converging", opts.max_iter);
    }
    Ok(model_at(&theta, obj, iter, converged))
}

/// Largest violation of the L1 optimality conditions at the model's weights:
/// `|g_i| ≤ λ_i` where `ω_i = 0`, `g_i + λ_i sign(ω_i) = 0` elsewhere, and
/// `g₀ = 0` for a fitted intercept.
pub fn kkt_violation(model: &LogRegModel, x: &DesignMatrix) -> Result<f64> {
    let lg = loss_grad(x, &model.weights, model.intercept)?;
    let mut worst: f64 = if model.fit_intercept { lg.grad0.abs() } else { 0.0 };
    for (i, (&w, &g)) in model.weights.iter().zip(&lg.grad).enumerate() {
        let l = model.penalty[i];
        let v = if w == 0.0 {
            (g.abs() - l).max(0.0)
        } else {
            (g + l * w.signum()).abs()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// `σ(xᵀω + ω₀)`. Columns beyond the model dimension count as zero weight.
pub fn predict_proba(model: &LogRegModel, row: &SparseRow) -> f64 {
    predict_indices(model, &row.indices, &row.values)
}

pub fn predict_indices(model: &LogRegModel, indices: &[u32], values: &[f64]) -> f64 {
    let z = model.intercept
        + indices
            .iter()
            .zip(values)
            .map(|(&c, &v)| model.weights.get(c as usize).copied().unwrap_or(0.0) * v)
            .sum::<f64>();
    sigmoid(z)
}

/// Predictions for every row of `x`.
pub fn predict_all(model: &LogRegModel, x: &DesignMatrix) -> Vec<f64> {
    (0..x.n_rows())
        .into_par_iter()
        .map(|i| {
            let (idx, val) = x.row(i);
            predict_indices(model, idx, val)
        })
        .collect()
}

/// `e^{ω}` for every non-zero weight, plus `e^{ω₀}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    entries: HashMap<u32, f64>,
    pub intercept_exp: f64,
    /// Model dimension the columns refer to.
    pub dimension: usize,
}

impl WeightTable {
    pub fn new(entries: HashMap<u32, f64>, intercept_exp: f64, dimension: usize) -> Result<Self> {
        if !(intercept_exp > 0.0 && intercept_exp.is_finite()) {
            return Err(Error::Validation(format!(
                "intercept factor {intercept_exp} must be positive"
            )));
        }
        for (&c, &v) in &entries {
            if c as usize >= dimension {
                return Err(Error::Dimension(format!("column {c} outside dimension {dimension}")));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("factor {v} for column {c} must be positive")));
            }
        }
        Ok(WeightTable {
            entries,
            intercept_exp,
            dimension,
        })
    }

    pub fn get(&self, col: u32) -> Option<f64> {
        self.entries.get(&col).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `"col exp_weight"` lines sorted by column, after `dimension` and
    /// `intercept_exp` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        writeln!(w, "dimension {}", self.dimension)?;
        writeln!(w, "intercept_exp {}", self.intercept_exp)?;
        let mut cols: Vec<_> = self.entries.iter().collect();
        cols.sort_unstable_by_key(|e| *e.0);
        for (c, v) in cols {
            writeln!(w, "{c} {v}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WeightTable> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut dimension = None;
        let mut intercept = None;
        let mut entries = HashMap::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            let bad = || Error::load(path, format!("bad line {line:?}"));
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["dimension", d] => dimension = Some(d.parse::<usize>().map_err(|_| bad())?),
                ["intercept_exp", v] => intercept = Some(v.parse::<f64>().map_err(|_| bad())?),
                [c, v] => {
                    let c: u32 = c.parse().map_err(|_| bad())?;
                    if entries.insert(c, v.parse::<f64>().map_err(|_| bad())?).is_some() {
                        return Err(Error::load(path, format!("column {c} listed twice")));
                    }
                }
                [] => {}
                _ => return Err(bad()),
            }
        }
        let dimension = dimension.ok_or_else(|| Error::load(path, "missing dimension"))?;
        let intercept = intercept.ok_or_else(|| Error::load(path, "missing intercept_exp"))?;
        WeightTable::new(entries, intercept, dimension).map_err(|e| Error::load(path, e.to_string()))
    }
}

pub fn export_weight_table(model: &LogRegModel) -> WeightTable {
    WeightTable {
        entries: model.nonzeros().map(|(c, w)| (c as u32, w.exp())).collect(),
        intercept_exp: model.intercept.exp(),
        dimension: model.dimension(),
    }
}

fn has_duplicates(active: &[u32]) -> bool {
    if active.len() <= 16 {
        active.iter().enumerate().any(|(i, a)| active[..i].contains(a))
    } else {
        let mut seen = HashSet::with_capacity(active.len());
        !active.iter().all(|a| seen.insert(*a))
    }
}

/// Product-form prediction for a binary row given by its active columns.
pub fn fast_predict(table: &WeightTable, active: &[u32]) -> Result<f64> {
    if has_duplicates(active) {
        return Err(Error::Validation("duplicate active column".into()));
    }
    Ok(fast_predict_unchecked(table, active))
}

/// [`fast_predict`] for callers that guarantee distinct columns.
pub fn fast_predict_unchecked(table: &WeightTable, active: &[u32]) -> f64 {
    let mut prod = table.intercept_exp;
    for c in active {
        if let Some(v) = table.entries.get(c) {
            prod *= v;
        }
    }
    if prod.is_infinite() {
        1.0
    } else {
        prod / (1.0 + prod)
    }
}
