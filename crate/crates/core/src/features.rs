//! Sparse design matrices built from the predictor groups f1–f8.
//!
//! | group | source |
//! |---|---|
//! | f1 | one-of-K over (banner, URL) pairs |
//! | f2 | URLs the user visited in the training window |
//! | f3, f4 | IRM user / URL cluster, one-of-K |
//! | f5, f6 | SVD user / URL singular-vector rows |
//! | f7, f8 | NMF user / URL loadings |
//!
//! Columns follow the groups in spec order, each group in vocabulary
//! insertion order. The intercept is the last column when enabled; rows do not
//! store it since its value is always 1.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::ingest::LabeledObservation;
use crate::irm::ClusterAssignments;
use crate::nmf::NmfFactors;
use crate::svd::SvdFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    F1,
    F2,
    F3,
    F4,
    F5,
    F6,
    F7,
    F8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    CrossBannerUrl,
    UrlsVisited,
    IrmUserCluster,
    IrmUrlCluster,
    SvdUser,
    SvdUrl,
    NmfUser,
    NmfUrl,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 8] = [
        FeatureGroup::F1,
        FeatureGroup::F2,
        FeatureGroup::F3,
        FeatureGroup::F4,
        FeatureGroup::F5,
        FeatureGroup::F6,
        FeatureGroup::F7,
        FeatureGroup::F8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::F1 => "f1",
            FeatureGroup::F2 => "f2",
            FeatureGroup::F3 => "f3",
            FeatureGroup::F4 => "f4",
            FeatureGroup::F5 => "f5",
            FeatureGroup::F6 => "f6",
            FeatureGroup::F7 => "f7",
            FeatureGroup::F8 => "f8",
        }
    }

    pub fn source(self) -> FeatureSource {
        match self {
            FeatureGroup::F1 => FeatureSource::CrossBannerUrl,
            FeatureGroup::F2 => FeatureSource::UrlsVisited,
            FeatureGroup::F3 => FeatureSource::IrmUserCluster,
            FeatureGroup::F4 => FeatureSource::IrmUrlCluster,
            FeatureGroup::F5 => FeatureSource::SvdUser,
            FeatureGroup::F6 => FeatureSource::SvdUrl,
            FeatureGroup::F7 => FeatureSource::NmfUser,
            FeatureGroup::F8 => FeatureSource::NmfUrl,
        }
    }

    /// Binary groups (everything except the SVD/NMF loadings).
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            FeatureGroup::F1 | FeatureGroup::F2 | FeatureGroup::F3 | FeatureGroup::F4
        )
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureGroup::ALL
            .into_iter()
            .find(|g| g.name() == s.trim())
            .ok_or_else(|| Error::Validation(format!("unknown feature group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    groups: Vec<FeatureGroup>,
    pub include_intercept: bool,
}

impl FeatureSpec {
    pub fn new(groups: Vec<FeatureGroup>, include_intercept: bool) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = groups.iter().find(|g| !seen.insert(**g)) {
            return Err(Error::Validation(format!("feature group {dup} listed twice")));
        }
        Ok(FeatureSpec {
            groups,
            include_intercept,
        })
    }

    /// Comma-separated group names, e.g. `"f1,f3,f4"`, with an intercept.
    pub fn parse(s: &str) -> Result<Self> {
        let groups = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(FeatureGroup::from_str)
            .collect::<Result<_>>()?;
        FeatureSpec::new(groups, true)
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn contains(&self, g: FeatureGroup) -> bool {
        self.groups.contains(&g)
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.groups.iter().map(|g| g.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupRange {
    pub group: FeatureGroup,
    pub columns: Range<usize>,
}

impl GroupRange {
    pub fn dimensionality(&self) -> usize {
        self.columns.len()
    }
}

/// Column layout shared by vocabularies and design matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnLayout {
    pub groups: Vec<GroupRange>,
    /// Columns excluding the intercept.
    pub n_features: usize,
    pub intercept: bool,
}

impl ColumnLayout {
    fn from_dims(dims: &[(FeatureGroup, usize)], intercept: bool) -> Self {
        let mut start = 0;
        let groups = dims
            .iter()
            .map(|&(group, d)| {
                let r = GroupRange {
                    group,
                    columns: start..start + d,
                };
                start += d;
                r
            })
            .collect();
        ColumnLayout {
            groups,
            n_features: start,
            intercept,
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_features + usize::from(self.intercept)
    }

    pub fn intercept_col(&self) -> Option<usize> {
        self.intercept.then_some(self.n_features)
    }

    pub fn range(&self, g: FeatureGroup) -> Option<Range<usize>> {
        self.groups.iter().find(|r| r.group == g).map(|r| r.columns.clone())
    }

    pub fn group_of(&self, col: usize) -> Option<FeatureGroup> {
        self.groups.iter().find(|r| r.columns.contains(&col)).map(|r| r.group)
    }
}

/// Per-column L1 strengths: each group's λ, 0 for the intercept column.
pub fn per_feature_lambda(layout: &ColumnLayout, lambda_f1: f64, lambda_f2: f64, lambda_rest: f64) -> Result<Vec<f64>> {
    for (name, l) in [
        ("lambda_f1", lambda_f1),
        ("lambda_f2", lambda_f2),
        ("lambda_rest", lambda_rest),
    ] {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Validation(format!("{name}={l} must be non-negative")));
        }
    }
    let mut out = vec![0.0; layout.n_cols()];
    for r in &layout.groups {
        let l = match r.group {
            FeatureGroup::F1 => lambda_f1,
            FeatureGroup::F2 => lambda_f2,
            _ => lambda_rest,
        };
        out[r.columns.clone()].iter_mut().for_each(|x| *x = l);
    }
    Ok(out)
}

/// URLs each user viewed in the training window, sorted and deduplicated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserHistory {
    urls: HashMap<String, Vec<String>>,
}

impl UserHistory {
    pub fn from_observations(train: &[LabeledObservation]) -> Self {
        let mut urls: HashMap<String, Vec<String>> = HashMap::new();
        for o in train {
            urls.entry(o.user_id.clone()).or_default().push(o.url.clone());
        }
        for v in urls.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        UserHistory { urls }
    }

    pub fn get(&self, user: &str) -> &[String] {
        self.urls.get(user).map_or(&[], |v| v.as_slice())
    }

    pub fn n_users(&self) -> usize {
        self.urls.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.urls.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Reduction outputs available to the encoder. Cluster and loading rows are
/// looked up through the dictionaries of the graph they were computed on.
#[derive(Debug, Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub graph: Option<&'a BipartiteGraph>,
    pub irm: Option<&'a ClusterAssignments>,
    pub svd: Option<&'a SvdFactors>,
    pub nmf: Option<&'a NmfFactors>,
}

/// Ordered key → column-offset dictionary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab<K: std::hash::Hash + Eq> {
    index: HashMap<K, u32>,
    keys: Vec<K>,
}

impl<K: std::hash::Hash + Eq + Clone> Vocab<K> {
    fn insert(&mut self, k: &K) {
        if !self.index.contains_key(k) {
            self.index.insert(k.clone(), self.keys.len() as u32);
            self.keys.push(k.clone());
        }
    }

    pub fn get(&self, k: &K) -> Option<u32> {
        self.index.get(k).copied()
    }

    pub fn keys(&self) -> &[K] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub f1: Vocab<(String, String)>,
    pub f2: Vocab<String>,
    pub layout: ColumnLayout,
}

fn need<'a, T>(x: Option<&'a T>, what: &str, group: FeatureGroup) -> Result<&'a T> {
    x.ok_or_else(|| Error::Config(format!("feature group {group} needs the {what} artifact")))
}

/// Builds all vocabularies from training observations only.
pub fn build_vocab(train: &[LabeledObservation], artifacts: &Artifacts, spec: &FeatureSpec) -> Result<Vocabularies> {
    let mut f1 = Vocab::default();
    let mut f2 = Vocab::default();
    for o in train {
        f1.insert(&(o.banner_id.clone(), o.url.clone()));
        f2.insert(&o.url);
    }
    let mut dims = Vec::with_capacity(spec.groups().len());
    for &g in spec.groups() {
        let d = match g.source() {
            FeatureSource::CrossBannerUrl => f1.len(),
            FeatureSource::UrlsVisited => f2.len(),
            FeatureSource::IrmUserCluster | FeatureSource::IrmUrlCluster => {
                need(artifacts.graph, "graph", g)?;
                let irm = need(artifacts.irm, "IRM", g)?;
                if g == FeatureGroup::F3 {
                    irm.n_user_clusters
                } else {
                    irm.n_url_clusters
                }
            }
            FeatureSource::SvdUser | FeatureSource::SvdUrl => {
                need(artifacts.graph, "graph", g)?;
                need(artifacts.svd, "SVD", g)?.k
            }
            FeatureSource::NmfUser | FeatureSource::NmfUrl => {
                need(artifacts.graph, "graph", g)?;
                need(artifacts.nmf, "NMF", g)?.k
            }
        };
        dims.push((g, d));
    }
    check_artifact_shapes(artifacts)?;
    Ok(Vocabularies {
        f1,
        f2,
        layout: ColumnLayout::from_dims(&dims, spec.include_intercept),
    })
}

fn check_artifact_shapes(a: &Artifacts) -> Result<()> {
    let Some(g) = a.graph else { return Ok(()) };
    let (m, n) = (g.n_users(), g.n_urls());
    let bad = |what: &str| Err(Error::Dimension(format!("{what} does not match the {m}x{n} graph")));
    if let Some(irm) = a.irm {
        if irm.user.len() != m || irm.url.len() != n {
            return bad("IRM assignments");
        }
    }
    if let Some(s) = a.svd {
        if s.u.nrows() != m || s.v.nrows() != n {
            return bad("SVD factors");
        }
    }
    if let Some(f) = a.nmf {
        if f.w.nrows() != m || f.h.ncols() != n {
            return bad("NMF factors");
        }
    }
    Ok(())
}

/// Sparse row with strictly increasing column indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    fn push(&mut self, col: usize, value: f64) {
        self.indices.push(col as u32);
        self.values.push(value);
    }
}

/// Encodes one observation. Unknown users, URLs and keys contribute nothing.
pub fn encode_row(
    obs: &LabeledObservation,
    history: &UserHistory,
    vocab: &Vocabularies,
    artifacts: &Artifacts,
) -> SparseRow {
    let mut row = SparseRow::default();
    let user_idx = artifacts.graph.and_then(|g| g.users().get(&obs.user_id));
    let url_idx = artifacts.graph.and_then(|g| g.urls().get(&obs.url));
    for r in &vocab.layout.groups {
        let base = r.columns.start;
        match r.group.source() {
            FeatureSource::CrossBannerUrl => {
                if let Some(c) = vocab.f1.get(&(obs.banner_id.clone(), obs.url.clone())) {
                    row.push(base + c as usize, 1.0);
                }
            }
            FeatureSource::UrlsVisited => {
                let mut cols: Vec<usize> = history
                    .get(&obs.user_id)
                    .iter()
                    .filter_map(|u| vocab.f2.get(u))
                    .map(|c| base + c as usize)
                    .collect();
                cols.sort_unstable();
                cols.into_iter().for_each(|c| row.push(c, 1.0));
            }
            FeatureSource::IrmUserCluster => {
                if let (Some(m), Some(irm)) = (user_idx, artifacts.irm) {
                    row.push(base + irm.user[m], 1.0);
                }
            }
            FeatureSource::IrmUrlCluster => {
                if let (Some(n), Some(irm)) = (url_idx, artifacts.irm) {
                    row.push(base + irm.url[n], 1.0);
                }
            }
            FeatureSource::SvdUser => {
                if let (Some(m), Some(s)) = (user_idx, artifacts.svd) {
                    for c in 0..s.k {
                        let v = s.u[(m, c)];
                        if v != 0.0 {
                            row.push(base + c, v);
                        }
                    }
                }
            }
            FeatureSource::SvdUrl => {
                if let (Some(n), Some(s)) = (url_idx, artifacts.svd) {
                    for c in 0..s.k {
                        let v = s.v[(n, c)];
                        if v != 0.0 {
                            row.push(base + c, v);
                        }
                    }
                }
            }
            FeatureSource::NmfUser => {
                if let (Some(m), Some(f)) = (user_idx, artifacts.nmf) {
                    let t = f.user_thresholds();
                    for c in 0..f.k {
                        let v = f.w[(m, c)];
                        if v > t[c] {
                            row.push(base + c, v);
                        }
                    }
                }
            }
            FeatureSource::NmfUrl => {
                if let (Some(n), Some(f)) = (url_idx, artifacts.nmf) {
                    let t = f.url_thresholds();
                    for c in 0..f.k {
                        let v = f.h[(c, n)];
                        if v > t[c] {
                            row.push(base + c, v);
                        }
                    }
                }
            }
        }
    }
    row
}

/// CSR design matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    labels: Vec<u8>,
    layout: ColumnLayout,
}

impl DesignMatrix {
    pub fn from_rows(rows: Vec<SparseRow>, labels: Vec<u8>, layout: ColumnLayout) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Validation(format!("label {l} is not binary")));
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(|r| r.nnz()).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (i, r) in rows.into_iter().enumerate() {
            if r.indices.len() != r.values.len() {
                return Err(Error::Dimension(format!(
                    "row {i}: indices and values differ in length"
                )));
            }
            if r.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("row {i}: column indices not increasing")));
            }
            if let Some(&c) = r.indices.last() {
                if c as usize >= layout.n_features {
                    return Err(Error::Dimension(format!(
                        "row {i}: column {c} outside {} feature columns",
                        layout.n_features
                    )));
                }
            }
            col_idx.extend(r.indices);
            values.extend(r.values);
            row_ptr.push(col_idx.len());
        }
        Ok(DesignMatrix {
            row_ptr,
            col_idx,
            values,
            labels,
            layout,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Columns including the intercept.
    pub fn n_cols(&self) -> usize {
        self.layout.n_cols()
    }

    pub fn n_features(&self) -> usize {
        self.layout.n_features
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn has_intercept(&self) -> bool {
        self.layout.intercept
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn sparse_row(&self, i: usize) -> SparseRow {
        let (idx, val) = self.row(i);
        SparseRow {
            indices: idx.to_vec(),
            values: val.to_vec(),
        }
    }

    pub fn ctr(&self) -> f64 {
        self.labels.iter().map(|&l| l as f64).sum::<f64>() / self.n_rows().max(1) as f64
    }

    /// Column-major copy of the feature part: `(col_ptr, row_idx, values)`.
    pub fn to_csc(&self) -> (Vec<usize>, Vec<u32>, Vec<f64>) {
        let p = self.n_features();
        let mut counts = vec![0usize; p + 1];
        self.col_idx.iter().for_each(|&c| counts[c as usize + 1] += 1);
        for j in 0..p {
            counts[j + 1] += counts[j];
        }
        let col_ptr = counts.clone();
        let mut next = counts;
        let mut rows = vec![0u32; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            for (&c, &v) in idx.iter().zip(val) {
                let slot = next[c as usize];
                rows[slot] = i as u32;
                vals[slot] = v;
                next[c as usize] += 1;
            }
        }
        (col_ptr, rows, vals)
    }

    /// Keeps only the listed groups, in the given order, renumbering columns.
    pub fn select_groups(&self, groups: &[FeatureGroup]) -> Result<DesignMatrix> {
        let mut dims = Vec::with_capacity(groups.len());
        let mut remap = vec![u32::MAX; self.n_features()];
        let mut next = 0u32;
        for &g in groups {
            let r = self
                .layout
                .range(g)
                .ok_or_else(|| Error::Config(format!("design matrix has no group {g}")))?;
            dims.push((g, r.len()));
            for c in r {
                remap[c] = next;
                next += 1;
            }
        }
        let layout = ColumnLayout::from_dims(&dims, self.layout.intercept);
        let rows = (0..self.n_rows())
            .map(|i| {
                let (idx, val) = self.row(i);
                let mut pairs: Vec<(u32, f64)> = idx
                    .iter()
                    .zip(val)
                    .filter(|(&c, _)| remap[c as usize] != u32::MAX)
                    .map(|(&c, &v)| (remap[c as usize], v))
                    .collect();
                pairs.sort_unstable_by_key(|p| p.0);
                SparseRow {
                    indices: pairs.iter().map(|p| p.0).collect(),
                    values: pairs.iter().map(|p| p.1).collect(),
                }
            })
            .collect();
        DesignMatrix::from_rows(rows, self.labels.clone(), layout)
    }

    /// `label idx:val …` lines plus a `<path>.groups` manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        for i in 0..self.n_rows() {
            write!(w, "{}", self.labels[i])?;
            let (idx, val) = self.row(i);
            for (c, v) in idx.iter().zip(val) {
                write!(w, " {c}:{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        let mpath = manifest_path(path);
        let mut m = BufWriter::new(File::create(&mpath).map_err(|e| Error::file(&mpath, e))?);
        writeln!(m, "n_features {}", self.layout.n_features)?;
        writeln!(m, "intercept {}", u8::from(self.layout.intercept))?;
        for r in &self.layout.groups {
            writeln!(m, "group {} {} {}", r.group, r.columns.start, r.columns.end)?;
        }
        m.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DesignMatrix> {
        let mpath = manifest_path(path);
        let layout = read_layout(&mpath)?;
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let bad = || Error::load(path, format!("line {}: malformed row", lineno + 1));
            let mut tok = line.split_whitespace();
            let label: u8 = tok.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
            let mut row = SparseRow::default();
            for t in tok {
                let (c, v) = t.split_once(':').ok_or_else(bad)?;
                row.indices.push(c.parse().map_err(|_| bad())?);
                row.values.push(v.parse().map_err(|_| bad())?);
            }
            labels.push(label);
            rows.push(row);
        }
        DesignMatrix::from_rows(rows, labels, layout).map_err(|e| Error::load(path, e.to_string()))
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".groups");
    s.into()
}

fn read_layout(path: &Path) -> Result<ColumnLayout> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut n_features = None;
    let mut intercept = None;
    let mut dims = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["n_features", n] => n_features = n.parse::<usize>().ok(),
            ["intercept", b] => intercept = Some(*b == "1"),
            ["group", g, s, e] => {
                let (s, e): (usize, usize) = (
                    s.parse().map_err(|_| Error::load(path, "bad group start"))?,
                    e.parse().map_err(|_| Error::load(path, "bad group end"))?,
                );
                let start = dims.iter().map(|d: &(FeatureGroup, usize)| d.1).sum::<usize>();
                if s != start || e < s {
                    return Err(Error::load(path, "group ranges do not partition the columns"));
                }
                dims.push((g.parse()?, e - s));
            }
            [] => {}
            _ => return Err(Error::load(path, format!("unrecognized line {line:?}"))),
        }
    }
    let layout = ColumnLayout::from_dims(&dims, intercept.ok_or_else(|| Error::load(path, "missing intercept"))?);
    if Some(layout.n_features) != n_features {
        return Err(Error::load(path, "n_features disagrees with group ranges"));
    }
    Ok(layout)
}

/// Vocabularies plus the artifacts they index; encodes observation sets.
#[derive(Debug, Clone)]
pub struct FeatureEncoder<'a> {
    pub vocab: Vocabularies,
    pub artifacts: Artifacts<'a>,
    pub history: UserHistory,
}

impl<'a> FeatureEncoder<'a> {
    /// Vocabularies and user histories both come from `train`.
    pub fn fit(train: &[LabeledObservation], artifacts: Artifacts<'a>, spec: &FeatureSpec) -> Result<Self> {
        Ok(FeatureEncoder {
            vocab: build_vocab(train, &artifacts, spec)?,
            artifacts,
            history: UserHistory::from_observations(train),
        })
    }

    pub fn encode(&self, obs: &LabeledObservation) -> SparseRow {
        encode_row(obs, &self.history, &self.vocab, &self.artifacts)
    }

    pub fn design_matrix(&self, obs: &[LabeledObservation]) -> Result<DesignMatrix> {
        let rows: Vec<SparseRow> = obs.par_iter().map(|o| self.encode(o)).collect();
        let labels = obs.iter().map(|o| o.label).collect();
        DesignMatrix::from_rows(rows, labels, self.vocab.layout.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::IdDict;

    fn obs(u: &str, b: &str, url: &str, label: u8) -> LabeledObservation {
        LabeledObservation {
            user_id: u.into(),
            banner_id: b.into(),
            url: url.into(),
            label,
        }
    }

    fn train() -> Vec<LabeledObservation> {
        vec![
            obs("alice", "b1", "url_a", 0),
            obs("alice", "b2", "url_b", 1),
            obs("bob", "b1", "url_a", 0),
            obs("bob", "b1", "url_c", 0),
        ]
    }

    fn graph() -> BipartiteGraph {
        let users = IdDict::from_ids(vec!["alice".into(), "bob".into()]).unwrap();
        let urls = IdDict::from_ids(vec!["url_a".into(), "url_b".into(), "url_c".into()]).unwrap();
        BipartiteGraph::from_edges(users, urls, &[(0, 0), (0, 1), (1, 0), (1, 2)]).unwrap()
    }

    fn clusters() -> ClusterAssignments {
        ClusterAssignments {
            user: vec![0, 7],
            url: vec![1, 0, 1],
            n_user_clusters: 8,
            n_url_clusters: 2,
        }
    }

    #[test]
    fn f1_counts_distinct_pairs() {
        let spec = FeatureSpec::parse("f1").unwrap();
        let v = build_vocab(&train(), &Artifacts::default(), &spec).unwrap();
        assert_eq!(v.layout.range(FeatureGroup::F1), Some(0..3));
        assert_eq!(v.layout.n_cols(), 4);
        assert_eq!(v.layout.intercept_col(), Some(3));
    }

    #[test]
    fn group_sizes_follow_artifacts() {
        let (g, c) = (graph(), clusters());
        let a = Artifacts {
            graph: Some(&g),
            irm: Some(&c),
            ..Default::default()
        };
        let spec = FeatureSpec::parse("f1,f3,f4").unwrap();
        let v = build_vocab(&train(), &a, &spec).unwrap();
        assert_eq!(v.layout.range(FeatureGroup::F3), Some(3..11));
        assert_eq!(v.layout.range(FeatureGroup::F4), Some(11..13));
    }

    #[test]
    fn missing_artifact_is_a_config_error() {
        let spec = FeatureSpec::parse("f1,f5").unwrap();
        let err = build_vocab(&train(), &Artifacts::default(), &spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicate_groups_rejected() {
        assert!(FeatureSpec::parse("f1,f3,f1").is_err());
        assert!(FeatureSpec::parse("f9").is_err());
    }

    #[test]
    fn cluster_features_are_one_of_k() {
        let (g, c) = (graph(), clusters());
        let a = Artifacts {
            graph: Some(&g),
            irm: Some(&c),
            ..Default::default()
        };
        let spec = FeatureSpec::parse("f3").unwrap();
        let enc = FeatureEncoder::fit(&train(), a, &spec).unwrap();
        let row = enc.encode(&obs("bob", "b1", "url_a", 0));
        assert_eq!(row.indices, vec![7]);
        assert!(enc.encode(&obs("carol", "b1", "url_a", 0)).indices.is_empty());
    }

    #[test]
    fn history_sets_one_column_per_visited_url() {
        let spec = FeatureSpec::parse("f2").unwrap();
        let enc = FeatureEncoder::fit(&train(), Artifacts::default(), &spec).unwrap();
        let row = enc.encode(&obs("alice", "b9", "url_z", 0));
        assert_eq!(row.indices, vec![0, 1]);
        assert!(row.is_binary());
    }

    #[test]
    fn one_of_k_row_nnz_counts_known_groups() {
        let (g, c) = (graph(), clusters());
        let a = Artifacts {
            graph: Some(&g),
            irm: Some(&c),
            ..Default::default()
        };
        let spec = FeatureSpec::parse("f1,f3,f4").unwrap();
        let enc = FeatureEncoder::fit(&train(), a, &spec).unwrap();
        assert_eq!(enc.encode(&obs("alice", "b1", "url_a", 0)).nnz(), 3);
        assert_eq!(enc.encode(&obs("alice", "b7", "url_a", 0)).nnz(), 2);
        assert_eq!(enc.encode(&obs("zed", "b7", "url_q", 0)).nnz(), 0);
    }

    #[test]
    fn encoding_test_rows_never_grows_vocab() {
        let spec = FeatureSpec::parse("f1,f2").unwrap();
        let enc = FeatureEncoder::fit(&train(), Artifacts::default(), &spec).unwrap();
        let before = enc.vocab.clone();
        let test = vec![obs("new", "b5", "url_new", 1), obs("alice", "b1", "url_q", 0)];
        let x = enc.design_matrix(&test).unwrap();
        assert_eq!(enc.vocab, before);
        assert_eq!(x.n_features(), before.layout.n_features);
        assert_eq!(enc.design_matrix(&test).unwrap(), x);
    }

    #[test]
    fn lambda_vector_by_group() {
        let (g, c) = (graph(), clusters());
        let a = Artifacts {
            graph: Some(&g),
            irm: Some(&c),
            ..Default::default()
        };
        let spec = FeatureSpec::parse("f1,f3,f4").unwrap();
        let v = build_vocab(&train(), &a, &spec).unwrap();
        let pen = per_feature_lambda(&v.layout, 0.8, 5.0, 7e-4).unwrap();
        assert!(pen[0..3].iter().all(|&l| l == 0.8));
        assert!(pen[3..13].iter().all(|&l| l == 7e-4));
        assert_eq!(pen[13], 0.0);
        let same = per_feature_lambda(&v.layout, 2.0, 2.0, 2.0).unwrap();
        assert!(same[..13].iter().all(|&l| l == 2.0));
        assert!(per_feature_lambda(&v.layout, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn select_groups_renumbers() {
        let (g, c) = (graph(), clusters());
        let a = Artifacts {
            graph: Some(&g),
            irm: Some(&c),
            ..Default::default()
        };
        let spec = FeatureSpec::parse("f1,f2,f3,f4").unwrap();
        let enc = FeatureEncoder::fit(&train(), a, &spec).unwrap();
        let x = enc.design_matrix(&train()).unwrap();
        let sub = x.select_groups(&[FeatureGroup::F1, FeatureGroup::F4]).unwrap();
        assert_eq!(sub.n_features(), 5);
        // alice/url_a: f1 col 0, url cluster 1 → 3 + 1
        assert_eq!(sub.row(0).0, &[0, 4]);
        let direct = FeatureEncoder::fit(&train(), a, &FeatureSpec::parse("f1,f4").unwrap())
            .unwrap()
            .design_matrix(&train())
            .unwrap();
        assert_eq!(sub, direct);
    }

    #[test]
    fn file_round_trip() {
        let layout = ColumnLayout::from_dims(&[(FeatureGroup::F1, 3), (FeatureGroup::F5, 2)], true);
        let rows = vec![
            SparseRow {
                indices: vec![0, 3, 4],
                values: vec![1.0, -0.1234567890123, 1e-300],
            },
            SparseRow::default(),
        ];
        let x = DesignMatrix::from_rows(rows, vec![1, 0], layout).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.svm");
        x.save(&p).unwrap();
        assert_eq!(DesignMatrix::load(&p).unwrap(), x);
    }

    #[test]
    fn rejects_out_of_range_columns() {
        let layout = ColumnLayout::from_dims(&[(FeatureGroup::F1, 2)], true);
        let row = SparseRow {
            indices: vec![2],
            values: vec![1.0],
        };
        assert!(DesignMatrix::from_rows(vec![row], vec![0], layout).is_err());
    }

    #[test]
    fn csc_matches_rows() {
        let layout = ColumnLayout::from_dims(&[(FeatureGroup::F1, 3)], false);
        let rows = vec![
            SparseRow {
                indices: vec![0, 2],
                values: vec![1.0, 2.0],
            },
            SparseRow {
                indices: vec![2],
                values: vec![3.0],
            },
        ];
        let x = DesignMatrix::from_rows(rows, vec![0, 1], layout).unwrap();
        let (p, r, v) = x.to_csc();
        assert_eq!(p, vec![0, 1, 1, 3]);
        assert_eq!(r, vec![0, 0, 1]);
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
    }
}
