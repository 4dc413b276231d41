//! Infinite Relational Model co-clustering of the bipartite graph.
//!
//! Blocked (uncollapsed) Gibbs sampler under a truncated stick-breaking
//! prior. Given the link probabilities `η` and stick weights `μ`, every node
//! of one mode is reassigned independently, which is what makes the
//! per-node step parallel. All randomness comes from counter-based streams
//! keyed by `(seed, sweep, step, index)` so results do not depend on the
//! number of worker threads.
//!
//! Absent edges are observed zeros: the likelihood covers all `M·N` pairs,
//! evaluated through per-block link and pair counts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::rng;

const STEP_ASSIGN_USER: u8 = 1;
const STEP_ASSIGN_URL: u8 = 2;
const STEP_ETA: u8 = 3;
const STEP_STICKS_USER: u8 = 4;
const STEP_STICKS_URL: u8 = 5;
const STEP_INIT_USER: u8 = 6;
const STEP_INIT_URL: u8 = 7;

/// Largest `f64` below one.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrmHyperParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta_pos: f64,
    pub beta_neg: f64,
    /// Truncation level for users.
    pub k1_max: usize,
    /// Truncation level for URLs.
    pub k2_max: usize,
}

impl Default for IrmHyperParams {
    fn default() -> Self {
        IrmHyperParams {
            alpha1: 1.0,
            alpha2: 1.0,
            beta_pos: 1.0,
            beta_neg: 1.0,
            k1_max: 500,
            k2_max: 500,
        }
    }
}

impl IrmHyperParams {
    pub fn with_truncation(k_max: usize) -> Self {
        IrmHyperParams {
            k1_max: k_max,
            k2_max: k_max,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta_pos", self.beta_pos),
            ("beta_neg", self.beta_neg),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::Validation(format!("{name}={x} must be positive")));
            }
        }
        if self.k1_max < 2 || self.k2_max < 2 {
            return Err(Error::Validation(format!(
                "truncation levels must be at least 2 (got {}, {})",
                self.k1_max, self.k2_max
            )));
        }
        if self.k1_max.saturating_mul(self.k2_max) >= 1 << 32 {
            return Err(Error::Validation("k1_max * k2_max must stay below 2^32".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    User,
    Url,
}

/// Stick-breaking weights of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Sticks {
    /// Break fractions `v_k`; the last one is always 1.
    pub v: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_mu: Vec<f64>,
}

impl Sticks {
    fn from_breaks(v: Vec<f64>) -> Self {
        let k = v.len();
        let mut mu = Vec::with_capacity(k);
        let mut log_mu = Vec::with_capacity(k);
        let (mut rest, mut log_rest) = (1.0, 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if i + 1 == k {
                mu.push(rest);
                log_mu.push(log_rest);
            } else {
                mu.push(vi * rest);
                log_mu.push(vi.ln() + log_rest);
                rest *= 1.0 - vi;
                log_rest += (-vi).ln_1p();
            }
        }
        Sticks { v, mu, log_mu }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrmState {
    /// User cluster per user.
    pub z1: Vec<usize>,
    /// URL cluster per URL.
    pub z2: Vec<usize>,
    /// `k1_max × k2_max` link probabilities, row-major.
    pub eta: Vec<f64>,
    pub sticks1: Sticks,
    pub sticks2: Sticks,
    pub hyper: IrmHyperParams,
    pub seed: u64,
    /// Sweeps completed; also the sweep key of the random streams.
    pub iteration: u64,
}

impl IrmState {
    pub fn eta(&self, k: usize, l: usize) -> f64 {
        self.eta[k * self.hyper.k2_max + l]
    }

    pub fn mu1(&self) -> &[f64] {
        &self.sticks1.mu
    }

    pub fn mu2(&self) -> &[f64] {
        &self.sticks2.mu
    }

    pub fn occupancy(&self, mode: Mode) -> Vec<usize> {
        let (z, k) = match mode {
            Mode::User => (&self.z1, self.hyper.k1_max),
            Mode::Url => (&self.z2, self.hyper.k2_max),
        };
        let mut n = vec![0usize; k];
        z.iter().for_each(|&c| n[c] += 1);
        n
    }

    pub fn clusters_used(&self, mode: Mode) -> usize {
        self.occupancy(mode).iter().filter(|&&c| c > 0).count()
    }
}

/// Per-block sufficient statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCounts {
    pub k1: usize,
    pub k2: usize,
    /// Links between user cluster `k` and URL cluster `l` at `k * k2 + l`.
    pub npos: Vec<u64>,
    /// Pairs `|k|·|l|` at `k * k2 + l`.
    pub ntot: Vec<u64>,
}

impl BlockCounts {
    pub fn pos(&self, k: usize, l: usize) -> u64 {
        self.npos[k * self.k2 + l]
    }

    pub fn tot(&self, k: usize, l: usize) -> u64 {
        self.ntot[k * self.k2 + l]
    }
}

pub fn block_counts(g: &BipartiteGraph, z1: &[usize], z2: &[usize], k1: usize, k2: usize) -> BlockCounts {
    let mut npos = vec![0u64; k1 * k2];
    for (m, n) in g.edges() {
        npos[z1[m] * k2 + z2[n]] += 1;
    }
    let mut s1 = vec![0u64; k1];
    let mut s2 = vec![0u64; k2];
    z1.iter().for_each(|&c| s1[c] += 1);
    z2.iter().for_each(|&c| s2[c] += 1);
    let ntot = (0..k1 * k2).map(|i| s1[i / k2] * s2[i % k2]).collect();
    BlockCounts { k1, k2, npos, ntot }
}

fn state_counts(state: &IrmState, g: &BipartiteGraph) -> BlockCounts {
    block_counts(g, &state.z1, &state.z2, state.hyper.k1_max, state.hyper.k2_max)
}

fn beta_draw(rng: &mut ChaCha8Rng, a: f64, b: f64) -> Result<f64> {
    let d = Beta::new(a, b).map_err(|e| Error::Numeric(format!("Beta({a}, {b}): {e}")))?;
    let x: f64 = d.sample(rng);
    if x.is_nan() {
        return Err(Error::Numeric(format!("Beta({a}, {b}) produced NaN")));
    }
    Ok(x.clamp(f64::MIN_POSITIVE, ONE_BELOW))
}

/// Index drawn with probability proportional to `exp(logp)`.
fn categorical(logp: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || logp.iter().any(|x| x.is_nan()) {
        return None;
    }
    let mut total = 0.0;
    let weights: Vec<f64> = logp
        .iter()
        .map(|&x| {
            let w = (x - max).exp();
            total += w;
            w
        })
        .collect();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    // rounding left u just above the last positive weight
    weights.iter().rposition(|&w| w > 0.0)
}

/// `log μ` for the first `k` stick-breaking weights with `v ~ Beta(1, α)`,
/// renormalized to sum to one.
fn log_truncated_gem(k: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut logs = Vec::with_capacity(k);
    let mut rest = 0.0;
    for _ in 0..k {
        // v = 1 - U^(1/α), so log(1 - v) = ln U / α
        let log_keep = (1.0 - rng.random::<f64>()).ln() / alpha;
        logs.push(rest + (-log_keep.exp_m1()).ln());
        rest += log_keep;
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logs.into_iter().map(|x| x - lse).collect()
}

/// Initial state.
///
/// Cluster proportions are the renormalized first `K` stick-breaking
/// weights and assignments are drawn from them. With `α = 1` that occupies
/// roughly `log2(n)` slots. `η` is then drawn blockwise
/// from its Beta conditional given those assignments (the prior for empty
/// blocks), and the stick weights likewise.
pub fn irm_init(g: &BipartiteGraph, hyper: IrmHyperParams, seed: u64) -> Result<IrmState> {
    hyper.validate()?;
    let draw_mode = |n: usize, k: usize, alpha: f64, step: u8| -> Result<Vec<usize>> {
        let mut rng = rng::stream(seed, 0, step, 0);
        let log_mu = log_truncated_gem(k, alpha, &mut rng);
        (0..n)
            .map(|_| {
                categorical(&log_mu, &mut rng).ok_or_else(|| Error::Numeric("degenerate initial proportions".into()))
            })
            .collect()
    };
    let z1 = draw_mode(g.n_users(), hyper.k1_max, hyper.alpha1, STEP_INIT_USER)?;
    let z2 = draw_mode(g.n_urls(), hyper.k2_max, hyper.alpha2, STEP_INIT_URL)?;
    let placeholder = Sticks::from_breaks(vec![0.5; 2]);
    let mut state = IrmState {
        z1,
        z2,
        eta: vec![0.5; hyper.k1_max * hyper.k2_max],
        sticks1: placeholder.clone(),
        sticks2: placeholder,
        hyper,
        seed,
        iteration: 0,
    };
    sample_eta(&mut state, g)?;
    sample_sticks(&mut state, Mode::User)?;
    sample_sticks(&mut state, Mode::Url)?;
    Ok(state)
}

/// `η_kl ~ Beta(β⁺ + N⁺_kl, β⁻ + N_kl − N⁺_kl)` for every block, in parallel.
pub fn sample_eta(state: &mut IrmState, g: &BipartiteGraph) -> Result<()> {
    let counts = state_counts(state, g);
    let (seed, sweep, h) = (state.seed, state.iteration, state.hyper);
    state.eta = (0..counts.npos.len())
        .into_par_iter()
        .map(|b| {
            let (pos, tot) = (counts.npos[b] as f64, counts.ntot[b] as f64);
            let mut rng = rng::stream(seed, sweep, STEP_ETA, b as u64);
            beta_draw(&mut rng, h.beta_pos + pos, h.beta_neg + tot - pos)
        })
        .collect::<Result<_>>()?;
    Ok(())
}

/// Truncated stick-breaking update for one mode:
/// `v_k ~ Beta(1 + n_k, α + Σ_{j>k} n_j)` for `k < K − 1`, `v_{K−1} = 1`.
pub fn sample_sticks(state: &mut IrmState, mode: Mode) -> Result<()> {
    let occ = state.occupancy(mode);
    let (alpha, step) = match mode {
        Mode::User => (state.hyper.alpha1, STEP_STICKS_USER),
        Mode::Url => (state.hyper.alpha2, STEP_STICKS_URL),
    };
    let k = occ.len();
    let mut tail: u64 = occ.iter().map(|&c| c as u64).sum();
    let mut rng = rng::stream(state.seed, state.iteration, step, 0);
    let mut v = Vec::with_capacity(k);
    for (i, &n) in occ.iter().enumerate() {
        tail -= n as u64;
        if i + 1 == k {
            v.push(1.0);
        } else {
            v.push(beta_draw(&mut rng, 1.0 + n as f64, alpha + tail as f64)?);
        }
    }
    let sticks = Sticks::from_breaks(v);
    match mode {
        Mode::User => state.sticks1 = sticks,
        Mode::Url => state.sticks2 = sticks,
    }
    Ok(())
}

/// Precomputed per-cluster terms for reassigning one mode.
struct AssignTables {
    /// Candidate clusters of the mode being sampled.
    k: usize,
    /// Clusters of the other mode.
    other_k: usize,
    /// `log μ_k + Σ_l n_l log(1 − η_kl)`.
    base: Vec<f64>,
    /// `log η_kl − log(1 − η_kl)`, indexed `[k * other_k + l]`.
    logit: Vec<f64>,
}

fn assign_tables(state: &IrmState, mode: Mode) -> AssignTables {
    let (k1, k2) = (state.hyper.k1_max, state.hyper.k2_max);
    let (k, other_k, log_mu, other_occ) = match mode {
        Mode::User => (k1, k2, &state.sticks1.log_mu, state.occupancy(Mode::Url)),
        Mode::Url => (k2, k1, &state.sticks2.log_mu, state.occupancy(Mode::User)),
    };
    // eta oriented as [candidate][other]
    let eta_at = |c: usize, o: usize| match mode {
        Mode::User => state.eta[c * k2 + o],
        Mode::Url => state.eta[o * k2 + c],
    };
    let mut base = vec![0.0; k];
    let mut logit = vec![0.0; k * other_k];
    for c in 0..k {
        let mut b = log_mu[c];
        for o in 0..other_k {
            let e = eta_at(c, o);
            let l1 = (-e).ln_1p();
            b += other_occ[o] as f64 * l1;
            logit[c * other_k + o] = e.ln() - l1;
        }
        base[c] = b;
    }
    AssignTables {
        k,
        other_k,
        base,
        logit,
    }
}

fn node_log_probs(t: &AssignTables, links: &[u32], other_z: &[usize]) -> Vec<f64> {
    let mut clusters: Vec<usize> = links.iter().map(|&j| other_z[j as usize]).collect();
    clusters.sort_unstable();
    let mut logp = t.base.clone();
    let mut i = 0;
    while i < clusters.len() {
        let o = clusters[i];
        let mut r = 0usize;
        while i < clusters.len() && clusters[i] == o {
            r += 1;
            i += 1;
        }
        let r = r as f64;
        for (c, lp) in logp.iter_mut().enumerate() {
            *lp += r * t.logit[c * t.other_k + o];
        }
    }
    debug_assert_eq!(logp.len(), t.k);
    logp
}

/// Unnormalized log conditional `log p(z_node = k | η, μ, rest)` for every
/// cluster `k`:
/// `log μ_k + Σ_l [r_l log η_kl + (n_l − r_l) log(1 − η_kl)]`.
pub fn assignment_log_probs(state: &IrmState, g: &BipartiteGraph, mode: Mode, node: usize) -> Vec<f64> {
    let t = assign_tables(state, mode);
    match mode {
        Mode::User => node_log_probs(&t, g.user_row(node), &state.z2),
        Mode::Url => node_log_probs(&t, g.url_col(node), &state.z1),
    }
}

/// Reassigns every node of `mode` independently given `η` and `μ`.
pub fn sample_assignments(state: &mut IrmState, g: &BipartiteGraph, mode: Mode) -> Result<()> {
    let t = assign_tables(state, mode);
    let (seed, sweep) = (state.seed, state.iteration);
    let (n, step) = match mode {
        Mode::User => (g.n_users(), STEP_ASSIGN_USER),
        Mode::Url => (g.n_urls(), STEP_ASSIGN_URL),
    };
    let (z1, z2) = (&state.z1, &state.z2);
    let z: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|node| {
            let logp = match mode {
                Mode::User => node_log_probs(&t, g.user_row(node), z2),
                Mode::Url => node_log_probs(&t, g.url_col(node), z1),
            };
            let mut rng = rng::stream(seed, sweep, step, node as u64);
            categorical(&logp, &mut rng)
                .ok_or_else(|| Error::Numeric(format!("non-finite log-probability for {mode:?} node {node}")))
        })
        .collect::<Result<_>>()?;
    match mode {
        Mode::User => state.z1 = z,
        Mode::Url => state.z2 = z,
    }
    Ok(())
}

/// Terms of the joint log density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorTerms {
    /// Stick-breaking prior on the break fractions of both modes.
    pub sticks: f64,
    /// `Σ log μ_{z}` over all nodes of both modes.
    pub assignments: f64,
    /// Beta prior on `η`.
    pub eta_prior: f64,
    /// Bernoulli likelihood over all `M·N` pairs.
    pub likelihood: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.sticks + self.assignments + self.eta_prior + self.likelihood
    }
}

pub fn log_posterior_terms(state: &IrmState, g: &BipartiteGraph) -> LogPosteriorTerms {
    let h = &state.hyper;
    let counts = state_counts(state, g);
    let stick_prior = |s: &Sticks, alpha: f64| -> f64 {
        // Beta(1, α) density is α (1 − v)^(α − 1)
        s.v[..s.v.len() - 1]
            .iter()
            .map(|&v| alpha.ln() + (alpha - 1.0) * (-v).ln_1p())
            .sum()
    };
    let assign = |occ: Vec<usize>, s: &Sticks| -> f64 {
        occ.iter()
            .zip(&s.log_mu)
            .filter(|(&n, _)| n > 0)
            .map(|(&n, &lm)| n as f64 * lm)
            .sum()
    };
    let lnb = ln_beta(h.beta_pos, h.beta_neg);
    let mut eta_prior = 0.0;
    let mut likelihood = 0.0;
    for (b, &e) in state.eta.iter().enumerate() {
        let (le, l1) = (e.ln(), (-e).ln_1p());
        eta_prior += (h.beta_pos - 1.0) * le + (h.beta_neg - 1.0) * l1 - lnb;
        let pos = counts.npos[b] as f64;
        let neg = (counts.ntot[b] - counts.npos[b]) as f64;
        likelihood += pos * le + neg * l1;
    }
    LogPosteriorTerms {
        sticks: stick_prior(&state.sticks1, h.alpha1) + stick_prior(&state.sticks2, h.alpha2),
        assignments: assign(state.occupancy(Mode::User), &state.sticks1)
            + assign(state.occupancy(Mode::Url), &state.sticks2),
        eta_prior,
        likelihood,
    }
}

/// `log p(v¹) + log p(z¹|μ¹) + log p(v²) + log p(z²|μ²) + log p(η) + log p(X|z, η)`.
pub fn joint_log_posterior(state: &IrmState, g: &BipartiteGraph) -> Result<f64> {
    let lp = log_posterior_terms(state, g).total();
    if !lp.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite joint log posterior at sweep {}",
            state.iteration
        )));
    }
    Ok(lp)
}

/// One full sweep: users, URLs, `η`, then both stick vectors.
pub fn irm_sweep(state: &mut IrmState, g: &BipartiteGraph) -> Result<f64> {
    state.iteration += 1;
    sample_assignments(state, g, Mode::User)?;
    sample_assignments(state, g, Mode::Url)?;
    sample_eta(state, g)?;
    sample_sticks(state, Mode::User)?;
    sample_sticks(state, Mode::Url)?;
    joint_log_posterior(state, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrmResult {
    /// State with the highest joint log posterior over all sweeps.
    pub best_state: IrmState,
    pub best_sweep: u64,
    pub k1_used: usize,
    pub k2_used: usize,
    /// Joint log posterior after each sweep.
    pub log_posterior_trace: Vec<f64>,
    pub initial_log_posterior: f64,
    /// Nodes in the last (truncation) cluster of each mode in the best state.
    pub top_stick_occupancy: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrmRunOptions {
    pub n_sweeps: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub workers: Option<usize>,
}

pub fn irm_run(g: &BipartiteGraph, hyper: IrmHyperParams, n_sweeps: usize, seed: u64) -> Result<IrmResult> {
    irm_run_with(
        g,
        hyper,
        IrmRunOptions {
            n_sweeps,
            seed,
            workers: None,
        },
    )
}

pub fn irm_run_with(g: &BipartiteGraph, hyper: IrmHyperParams, opts: IrmRunOptions) -> Result<IrmResult> {
    if opts.n_sweeps == 0 {
        return Err(Error::Validation("n_sweeps must be at least 1".into()));
    }
    if opts.n_sweeps >= 1 << 24 {
        return Err(Error::Validation("n_sweeps must stay below 2^24".into()));
    }
    match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run(g, hyper, opts)),
        None => run(g, hyper, opts),
    }
}

fn run(g: &BipartiteGraph, hyper: IrmHyperParams, opts: IrmRunOptions) -> Result<IrmResult> {
    let mut state = irm_init(g, hyper, opts.seed)?;
    let initial = joint_log_posterior(&state, g)?;
    let mut trace = Vec::with_capacity(opts.n_sweeps);
    let mut best: Option<(f64, IrmState)> = None;
    for sweep in 1..=opts.n_sweeps {
        let lp = irm_sweep(&mut state, g).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("sweep {sweep}: {m}")),
            other => other,
        })?;
        trace.push(lp);
        if best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, state.clone()));
        }
        log::debug!(
            "irm sweep {sweep}: log posterior {lp:.6e}, clusters {}x{}",
            state.clusters_used(Mode::User),
            state.clusters_used(Mode::Url)
        );
    }
    let (_, best_state) = best.expect("at least one sweep");
    let occ1 = best_state.occupancy(Mode::User);
    let occ2 = best_state.occupancy(Mode::Url);
    Ok(IrmResult {
        best_sweep: best_state.iteration,
        k1_used: occ1.iter().filter(|&&c| c > 0).count(),
        k2_used: occ2.iter().filter(|&&c| c > 0).count(),
        top_stick_occupancy: (*occ1.last().unwrap_or(&0), *occ2.last().unwrap_or(&0)),
        best_state,
        log_posterior_trace: trace,
        initial_log_posterior: initial,
    })
}

/// Cluster labels compacted to `0..k_used` in ascending order of the raw
/// cluster index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignments {
    pub user: Vec<usize>,
    pub url: Vec<usize>,
    pub n_user_clusters: usize,
    pub n_url_clusters: usize,
}

fn compact(z: &[usize]) -> (Vec<usize>, usize) {
    let k = z.iter().copied().max().map_or(0, |m| m + 1);
    let mut used = vec![false; k];
    z.iter().for_each(|&c| used[c] = true);
    let mut label = vec![usize::MAX; k];
    let mut next = 0;
    for (c, &u) in used.iter().enumerate() {
        if u {
            label[c] = next;
            next += 1;
        }
    }
    (z.iter().map(|&c| label[c]).collect(), next)
}

impl ClusterAssignments {
    pub fn from_raw(z1: &[usize], z2: &[usize]) -> Self {
        let (user, n_user_clusters) = compact(z1);
        let (url, n_url_clusters) = compact(z2);
        ClusterAssignments {
            user,
            url,
            n_user_clusters,
            n_url_clusters,
        }
    }
}

impl IrmResult {
    pub fn cluster_assignments(&self) -> ClusterAssignments {
        ClusterAssignments::from_raw(&self.best_state.z1, &self.best_state.z2)
    }

    /// `user_clusters.txt` and `url_clusters.txt` (`node_idx cluster_idx`,
    /// compacted labels, header with `k_used` and the best log posterior) and
    /// `trace.txt` with one log posterior per line.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let best = self
            .log_posterior_trace
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let ca = self.cluster_assignments();
        for (name, z, used, kmax, top) in [
            (
                "user_clusters.txt",
                &ca.user,
                ca.n_user_clusters,
                self.best_state.hyper.k1_max,
                self.top_stick_occupancy.0,
            ),
            (
                "url_clusters.txt",
                &ca.url,
                ca.n_url_clusters,
                self.best_state.hyper.k2_max,
                self.top_stick_occupancy.1,
            ),
        ] {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
            writeln!(
                w,
                "# k_used={used} best_log_posterior={best:e} best_sweep={} k_max={kmax} top_stick_occupancy={top}",
                self.best_sweep
            )?;
            for (i, c) in z.iter().enumerate() {
                writeln!(w, "{i} {c}")?;
            }
            w.flush()?;
        }
        let path = dir.join("trace.txt");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
        for lp in &self.log_posterior_trace {
            writeln!(w, "{lp:e}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads the assignment files written by [`IrmResult::save`].
pub fn load_assignments(dir: &Path) -> Result<ClusterAssignments> {
    let read = |name: &str| -> Result<(Vec<usize>, usize)> {
        let path = dir.join(name);
        let f = File::open(&path).map_err(|e| Error::file(&path, e))?;
        let mut z = Vec::new();
        let mut k_used = None;
        for line in BufReader::new(f).lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                k_used = rest
                    .split_whitespace()
                    .find_map(|kv| kv.strip_prefix("k_used="))
                    .and_then(|v| v.parse::<usize>().ok());
                continue;
            }
            let parsed = line
                .split_once(' ')
                .and_then(|(i, c)| i.parse::<usize>().ok().zip(c.parse::<usize>().ok()));
            match parsed {
                Some((i, c)) if i == z.len() => z.push(c),
                _ => return Err(Error::load(&path, format!("bad line {line:?}"))),
            }
        }
        let k = k_used.ok_or_else(|| Error::load(&path, "missing k_used header"))?;
        if z.iter().any(|&c| c >= k) {
            return Err(Error::load(&path, "cluster index beyond k_used"));
        }
        Ok((z, k))
    };
    let (user, n_user_clusters) = read("user_clusters.txt")?;
    let (url, n_url_clusters) = read("url_clusters.txt")?;
    Ok(ClusterAssignments {
        user,
        url,
        n_user_clusters,
        n_url_clusters,
    })
}

/// Normalized mutual information `I(a; b) / sqrt(H(a) H(b))`; two
/// single-cluster partitions score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let (ca, ka) = compact(a);
    let (cb, kb) = compact(b);
    let mut joint = vec![0f64; ka * kb];
    let mut pa = vec![0f64; ka];
    let mut pb = vec![0f64; kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        joint[x * kb + y] += 1.0;
        pa[x] += 1.0;
        pb[y] += 1.0;
    }
    let entropy = |p: &[f64]| -> f64 { p.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0.0 {
                mi += (c / n) * ((c * n) / (pa[x] * pb[y])).ln();
            }
        }
    }
    (mi / (ha * hb).sqrt()).min(1.0)
}
