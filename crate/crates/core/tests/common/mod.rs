//! Reference implementations used as test oracles. They share no code with
//! the library beyond the data types.

#![allow(dead_code, clippy::needless_range_loop)]

use std::io::Write;

use cograph::features::{ColumnLayout, FeatureGroup, GroupRange, SparseRow};
use cograph::DesignMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Prints one criterion outcome straight to stdout so it shows up in the
/// test log even with output capture on.
pub fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion:>2} [{status}] {name}: {detail}");
    let _ = out.flush();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense rows plus labels drawn from a logistic model.
pub struct Instance {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Instance {
    pub fn random(n: usize, p: usize, density: f64, seed: u64) -> Self {
        let mut r = rng(seed);
        let w: Vec<f64> = (0..p).map(|_| r.random_range(-1.5..1.5)).collect();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..p)
                .map(|_| {
                    if r.random::<f64>() < density {
                        r.random_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = 0.2 + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            y.push(if r.random::<f64>() < 1.0 / (1.0 + (-z).exp()) {
                1.0
            } else {
                0.0
            });
            x.push(row);
        }
        Instance { x, y }
    }

    pub fn design(&self) -> DesignMatrix {
        let p = self.x[0].len();
        let layout = ColumnLayout {
            groups: vec![GroupRange {
                group: FeatureGroup::F1,
                columns: 0..p,
            }],
            n_features: p,
            intercept: true,
        };
        let rows = self
            .x
            .iter()
            .map(|row| {
                let mut s = SparseRow::default();
                for (j, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        s.indices.push(j as u32);
                        s.values.push(v);
                    }
                }
                s
            })
            .collect();
        DesignMatrix::from_rows(rows, self.y.iter().map(|&v| v as u8).collect(), layout).unwrap()
    }

    fn margin(&self, i: usize, w: &[f64], w0: f64) -> f64 {
        w0 + self.x[i].iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Smooth loss, written out with plain logs.
    pub fn loss(&self, w: &[f64], w0: f64) -> f64 {
        (0..self.y.len())
            .map(|i| {
                let z = self.margin(i, w, w0);
                let p = 1.0 / (1.0 + (-z).exp());
                -(self.y[i] * p.ln() + (1.0 - self.y[i]) * (1.0 - p).ln())
            })
            .sum()
    }

    pub fn objective(&self, w: &[f64], w0: f64, lam: &[f64]) -> f64 {
        self.loss(w, w0) + w.iter().zip(lam).map(|(a, l)| l * a.abs()).sum::<f64>()
    }

    /// Full gradient of the smooth loss; last entry is the intercept.
    fn gradient(&self, w: &[f64], w0: f64) -> Vec<f64> {
        let p = w.len();
        let mut g = vec![0.0; p + 1];
        for i in 0..self.y.len() {
            let r = 1.0 / (1.0 + (-self.margin(i, w, w0)).exp()) - self.y[i];
            for j in 0..p {
                g[j] += self.x[i][j] * r;
            }
            g[p] += r;
        }
        g
    }

    /// Largest violation of the L1 optimality conditions.
    pub fn kkt(&self, w: &[f64], w0: f64, lam: &[f64]) -> f64 {
        let g = self.gradient(w, w0);
        let p = w.len();
        let mut worst = g[p].abs();
        for j in 0..p {
            let v = if w[j] != 0.0 {
                (g[j] + lam[j] * w[j].signum()).abs()
            } else {
                (g[j].abs() - lam[j]).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// FISTA with backtracking and adaptive restart, run until the
    /// optimality residual is at round-off level.
    pub fn proximal_gradient(&self, lam: &[f64]) -> (Vec<f64>, f64) {
        let p = self.x[0].len();
        let soft = |v: f64, t: f64| v.signum() * (v.abs() - t).max(0.0);
        let mut x = vec![0.0; p + 1];
        let mut y = x.clone();
        let mut tk: f64 = 1.0;
        let mut step: f64 = 1.0;
        let f = |v: &[f64]| self.loss(&v[..p], v[p]);
        let obj = |v: &[f64]| self.objective(&v[..p], v[p], lam);
        for _ in 0..100_000 {
            let g = self.gradient(&y[..p], y[p]);
            let fy = f(&y);
            let next = loop {
                let cand: Vec<f64> = (0..=p)
                    .map(|j| {
                        if j == p {
                            y[j] - step * g[j]
                        } else {
                            soft(y[j] - step * g[j], step * lam[j])
                        }
                    })
                    .collect();
                let d: Vec<f64> = cand.iter().zip(&y).map(|(a, b)| a - b).collect();
                let quad = fy
                    + d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
                    + d.iter().map(|a| a * a).sum::<f64>() / (2.0 * step);
                if f(&cand) <= quad + 1e-12 * fy.abs() {
                    break cand;
                }
                step *= 0.5;
            };
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
            if obj(&next) > obj(&x) {
                // restart momentum
                tk = 1.0;
                y = x.clone();
                step *= 0.5;
                continue;
            }
            y = (0..=p)
                .map(|j| next[j] + (tk - 1.0) / t_next * (next[j] - x[j]))
                .collect();
            x = next;
            tk = t_next;
            step *= 1.1;
            if self.kkt(&x[..p], x[p], lam) < 1e-9 {
                break;
            }
        }
        (x[..p].to_vec(), x[p])
    }

    /// Unpenalized maximum likelihood by dense Newton iterations.
    pub fn newton(&self) -> (Vec<f64>, f64) {
        let n = self.y.len();
        let p = self.x[0].len();
        let a = DMatrix::from_fn(n, p + 1, |i, j| if j == p { 1.0 } else { self.x[i][j] });
        let mut theta = DVector::zeros(p + 1);
        for _ in 0..100 {
            let z = &a * &theta;
            let s = z.map(|v| 1.0 / (1.0 + (-v).exp()));
            let r = DVector::from_fn(n, |i, _| s[i] - self.y[i]);
            let g = a.transpose() * r;
            let wdiag = s.map(|v| v * (1.0 - v));
            let h = a.transpose() * DMatrix::from_diagonal(&wdiag) * &a;
            let step = h.lu().solve(&g).expect("non-singular Hessian");
            theta -= &step;
            if step.amax() < 1e-14 {
                break;
            }
        }
        (theta.rows(0, p).iter().copied().collect(), theta[p])
    }
}

/// Dense 0/1 matrix of a graph.
pub fn dense(g: &cograph::BipartiteGraph) -> DMatrix<f64> {
    DMatrix::from_fn(g.n_users(), g.n_urls(), |i, j| if g.has_edge(i, j) { 1.0 } else { 0.0 })
}
