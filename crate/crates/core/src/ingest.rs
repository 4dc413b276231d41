//! Transaction logs: parsing, URL normalization, day splits, click/impression
//! joins and a synthetic generator with planted co-cluster structure.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    View,
    Click,
}

impl Event {
    pub fn as_str(self) -> &'static str {
        match self {
            Event::View => "view",
            Event::Click => "click",
        }
    }
}

impl FromStr for Event {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "view" => Ok(Event::View),
            "click" => Ok(Event::Click),
            other => Err(Error::Format(format!("unknown event {other:?}"))),
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One logged ad serve or click.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    pub user_id: String,
    pub banner_id: String,
    /// Query string already stripped.
    pub url: String,
    pub event: Event,
}

impl Transaction {
    /// UTC calendar day of the transaction.
    pub fn day(&self) -> Result<NaiveDate> {
        day_of(self.timestamp)
    }
}

pub fn day_of(timestamp_ms: i64) -> Result<NaiveDate> {
    DateTime::from_timestamp_millis(timestamp_ms)
        .map(|dt| dt.date_naive())
        .ok_or_else(|| Error::Validation(format!("timestamp {timestamp_ms} out of range")))
}

/// An impression with its click label (1 = clicked).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledObservation {
    pub user_id: String,
    pub banner_id: String,
    pub url: String,
    pub label: u8,
}

/// Ground truth behind a synthetic log.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedStructure {
    pub true_user_cluster: HashMap<String, usize>,
    pub true_url_cluster: HashMap<String, usize>,
    /// `k_user × k_url` edge probabilities.
    pub true_block_density: Vec<Vec<f64>>,
    /// `k_user × k_url` click probabilities.
    pub true_block_ctr: Vec<Vec<f64>>,
}

/// Drops everything from the first `?` on.
pub fn strip_query_string(url: &str) -> &str {
    match url.find('?') {
        Some(pos) => &url[..pos],
        None => url,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub transactions: Vec<Transaction>,
    pub malformed: usize,
}

fn parse_line(line: &str) -> Option<Transaction> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return None;
    }
    let timestamp = fields[0].trim().parse::<i64>().ok()?;
    let user_id = fields[1];
    let banner_id = fields[2];
    let url = strip_query_string(fields[3]);
    let event = fields[4].parse::<Event>().ok()?;
    if user_id.is_empty() || banner_id.is_empty() || url.is_empty() {
        return None;
    }
    DateTime::from_timestamp_millis(timestamp)?;
    Some(Transaction {
        timestamp,
        user_id: user_id.to_owned(),
        banner_id: banner_id.to_owned(),
        url: url.to_owned(),
        event,
    })
}

/// Parses a TSV log (`timestamp, user_id, banner_id, url, event`).
///
/// Malformed lines are skipped and counted. Blank lines are ignored. If more
/// than half of the non-blank lines are malformed the input is rejected as
/// the wrong kind of file.
pub fn parse_transactions<R: BufRead>(reader: R) -> Result<ParsedLog> {
    let mut out = ParsedLog::default();
    let mut total = 0usize;
    for line in reader.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line) {
            Some(t) => out.transactions.push(t),
            None => out.malformed += 1,
        }
    }
    if out.malformed * 2 > total {
        return Err(Error::Format(format!(
            "{} of {} lines malformed; not a transaction log",
            out.malformed, total
        )));
    }
    Ok(out)
}

pub fn write_transactions<W: Write>(mut w: W, log: &[Transaction]) -> Result<()> {
    for t in log {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            t.timestamp, t.user_id, t.banner_id, t.url, t.event
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct DaySplit {
    pub train: Vec<Transaction>,
    pub test: Vec<Transaction>,
}

/// Train on every day before `test_day`, test on `test_day`.
///
/// Anything dated after `test_day` is rejected, since it would leak the
/// future into the training window.
pub fn split_by_day(log: Vec<Transaction>, test_day: NaiveDate) -> Result<DaySplit> {
    let mut split = DaySplit::default();
    for t in log {
        let day = t.day()?;
        if day > test_day {
            return Err(Error::Validation(format!(
                "transaction at {} is dated {day}, after test day {test_day}",
                t.timestamp
            )));
        }
        if day == test_day {
            split.test.push(t);
        } else {
            split.train.push(t);
        }
    }
    Ok(split)
}

/// Latest calendar day present in the log.
pub fn last_day(log: &[Transaction]) -> Result<Option<NaiveDate>> {
    let mut best: Option<NaiveDate> = None;
    for t in log {
        let d = t.day()?;
        best = Some(best.map_or(d, |b| b.max(d)));
    }
    Ok(best)
}

/// Joins clicks to impressions.
///
/// Every view becomes one observation. A click labels one not yet labelled
/// view with the same `(user_id, banner_id, url)` on the same day, earliest
/// view first; clicks without a matching view are dropped.
pub fn label_observations(log: &[Transaction]) -> Result<Vec<LabeledObservation>> {
    let mut clicks: HashMap<(&str, &str, &str, NaiveDate), usize> = HashMap::new();
    for t in log.iter().filter(|t| t.event == Event::Click) {
        *clicks.entry((&t.user_id, &t.banner_id, &t.url, t.day()?)).or_default() += 1;
    }
    let mut views: Vec<(usize, &Transaction)> =
        log.iter().enumerate().filter(|(_, t)| t.event == Event::View).collect();
    // stable: log order breaks timestamp ties
    views.sort_by_key(|(i, t)| (t.timestamp, *i));
    let mut labels = vec![0u8; views.len()];
    for (slot, (_, t)) in views.iter().enumerate() {
        if let Some(n) = clicks.get_mut(&(t.user_id.as_str(), t.banner_id.as_str(), t.url.as_str(), t.day()?)) {
            if *n > 0 {
                *n -= 1;
                labels[slot] = 1;
            }
        }
    }
    // back to log order
    let mut out: Vec<(usize, LabeledObservation)> = views
        .iter()
        .zip(labels)
        .map(|((i, t), label)| {
            (
                *i,
                LabeledObservation {
                    user_id: t.user_id.clone(),
                    banner_id: t.banner_id.clone(),
                    url: t.url.clone(),
                    label,
                },
            )
        })
        .collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, o)| o).collect())
}

pub fn write_observations<W: Write>(mut w: W, obs: &[LabeledObservation]) -> Result<()> {
    for o in obs {
        writeln!(w, "{}\t{}\t{}\t{}", o.user_id, o.banner_id, o.url, o.label)?;
    }
    Ok(())
}

pub fn read_observations<R: BufRead>(reader: R) -> Result<Vec<LabeledObservation>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let label = match (f.len(), f.get(3).copied()) {
            (4, Some("0")) => 0,
            (4, Some("1")) => 1,
            _ => {
                return Err(Error::Format(format!(
                    "observation line {}: expected user, banner, url, label",
                    lineno + 1
                )))
            }
        };
        out.push(LabeledObservation {
            user_id: f[0].to_owned(),
            banner_id: f[1].to_owned(),
            url: f[2].to_owned(),
            label,
        });
    }
    Ok(out)
}

/// Parameters of the synthetic log generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_urls: usize,
    pub k_user: usize,
    pub k_url: usize,
    /// Edge probability inside diagonal blocks (`user cluster == url cluster`).
    pub density_in: f64,
    /// Edge probability everywhere else.
    pub density_out: f64,
    /// `k_user × k_url` click probabilities.
    pub ctr_by_block: Vec<Vec<f64>>,
    /// Impressions sampled on top of the one view logged per edge.
    pub n_impressions: usize,
    pub n_banners: usize,
    /// Days covered by the log; the last one is the natural test day.
    pub n_days: usize,
    pub start_day: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 1000,
            n_urls: 200,
            k_user: 2,
            k_url: 2,
            density_in: 0.2,
            density_out: 0.02,
            ctr_by_block: vec![vec![0.05, 0.01], vec![0.005, 0.03]],
            n_impressions: 10_000,
            n_banners: 10,
            n_days: 7,
            start_day: NaiveDate::from_ymd_opt(2013, 6, 1).expect("valid date"),
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.k_user == 0 || self.k_url == 0 {
            return bad("cluster counts must be at least 1".into());
        }
        if self.k_user > self.n_users || self.k_url > self.n_urls {
            return bad(format!(
                "k_user={} k_url={} exceed n_users={} n_urls={}",
                self.k_user, self.k_url, self.n_users, self.n_urls
            ));
        }
        for (name, p) in [("density_in", self.density_in), ("density_out", self.density_out)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} is not a probability"));
            }
        }
        if self.ctr_by_block.len() != self.k_user || self.ctr_by_block.iter().any(|r| r.len() != self.k_url) {
            return bad(format!("ctr_by_block must be {}x{}", self.k_user, self.k_url));
        }
        if self.ctr_by_block.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("ctr_by_block entries must be probabilities".into());
        }
        if self.n_banners == 0 {
            return bad("n_banners must be at least 1".into());
        }
        if self.n_days < 2 {
            return bad("n_days must be at least 2 (train days plus a test day)".into());
        }
        Ok(())
    }

    pub fn test_day(&self) -> NaiveDate {
        self.start_day + chrono::Days::new(self.n_days as u64 - 1)
    }

    /// Applies `key=value` settings. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "n_users" => self.n_users = num(key, value)?,
            "n_urls" => self.n_urls = num(key, value)?,
            "k_user" => self.k_user = num(key, value)?,
            "k_url" => self.k_url = num(key, value)?,
            "density_in" => self.density_in = num(key, value)?,
            "density_out" => self.density_out = num(key, value)?,
            "n_impressions" => self.n_impressions = num(key, value)?,
            "n_banners" => self.n_banners = num(key, value)?,
            "n_days" => self.n_days = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "start_day" => {
                self.start_day = NaiveDate::parse_from_str(value.trim(), "%Y-%m-%d")
                    .map_err(|e| Error::Config(format!("start_day: {e}")))?
            }
            "ctr" => self.ctr_by_block = parse_matrix(value)?,
            _ => return Err(Error::Config(format!("unknown synthetic key {key:?}"))),
        }
        Ok(())
    }
}

/// Parses `"a,b;c,d"` into rows.
pub fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad matrix entry {v:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn format_matrix(m: &[Vec<f64>]) -> String {
    m.iter()
        .map(|r| r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// Block CTRs spread geometrically between `min` and `max`, assigned to
/// blocks in a seeded random order so that no single mode explains them.
pub fn ctr_spread(k_user: usize, k_url: usize, min: f64, max: f64, seed: u64) -> Vec<Vec<f64>> {
    let n = k_user * k_url;
    let mut levels: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                min
            } else {
                min * (max / min).powf(i as f64 / (n - 1) as f64)
            }
        })
        .collect();
    levels.shuffle(&mut rng::seeded(seed ^ 0x00C7_5EED));
    levels.chunks(k_url).map(|c| c.to_vec()).collect()
}

fn assign_clusters(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    for _ in 0..64 {
        let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut seen = vec![false; k];
        z.iter().for_each(|&c| seen[c] = true);
        if seen.iter().all(|&s| s) {
            return z;
        }
    }
    // k close to n: seed every cluster with one distinct member
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut z: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    for (c, &i) in order.iter().take(k).enumerate() {
        z[i] = c;
    }
    z
}

/// Indices in `0..n` kept with probability `p`, via geometric skips.
fn bernoulli_subset(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if p <= 0.0 || n == 0 {
        return Vec::new();
    }
    if p >= 1.0 {
        return (0..n).collect();
    }
    let log_q = (-p).ln_1p();
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let skip = (u.ln() / log_q).floor();
        if skip >= (n - i) as f64 {
            break;
        }
        i += skip as usize;
        out.push(i);
        i += 1;
        if i >= n {
            break;
        }
    }
    out
}

pub fn synthetic_user_id(i: usize) -> String {
    format!("u{i}")
}

pub fn synthetic_url(i: usize) -> String {
    format!("http://site{i}.example.com/index")
}

/// Generates a log with planted user and URL clusters.
///
/// Users and URLs are assigned uniformly to clusters (never leaving one
/// empty). Edges are drawn with `density_in` inside diagonal blocks and
/// `density_out` elsewhere. Every edge is logged once as a view on a random
/// training day so the training graph contains it; then `n_impressions`
/// impressions are drawn uniformly over edges on uniformly random days. Each
/// view is clicked with its block's CTR. Output is sorted by timestamp and
/// depends only on the config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<Transaction>, PlantedStructure)> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let zu = assign_clusters(cfg.n_users, cfg.k_user, &mut rng);
    let zv = assign_clusters(cfg.n_urls, cfg.k_url, &mut rng);

    let mut urls_by_cluster = vec![Vec::new(); cfg.k_url];
    for (n, &c) in zv.iter().enumerate() {
        urls_by_cluster[c].push(n);
    }
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for (m, &cu) in zu.iter().enumerate() {
        let mut row: Vec<usize> = Vec::new();
        for (cv, members) in urls_by_cluster.iter().enumerate() {
            let p = if cu == cv { cfg.density_in } else { cfg.density_out };
            row.extend(
                bernoulli_subset(members.len(), p, &mut rng)
                    .into_iter()
                    .map(|i| members[i]),
            );
        }
        row.sort_unstable();
        edges.extend(row.into_iter().map(|n| (m as u32, n as u32)));
    }
    if edges.is_empty() && cfg.n_impressions > 0 {
        return Err(Error::Validation(
            "synthetic graph has no edges to place impressions on".into(),
        ));
    }

    let start_ms = cfg
        .start_day
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp_millis();
    let banners: Vec<String> = (0..cfg.n_banners).map(|b| format!("b{b}")).collect();
    let user_ids: Vec<String> = (0..cfg.n_users).map(synthetic_user_id).collect();
    let urls: Vec<String> = (0..cfg.n_urls).map(synthetic_url).collect();

    let mut log: Vec<(i64, usize, Transaction)> = Vec::new();
    let emit = |rng: &mut ChaCha8Rng, log: &mut Vec<(i64, usize, Transaction)>, m: usize, n: usize, day: usize| {
        let ts = start_ms + day as i64 * MS_PER_DAY + rng.random_range(0..23 * 3_600_000);
        let banner = &banners[rng.random_range(0..banners.len())];
        let ctr = cfg.ctr_by_block[zu[m]][zv[n]];
        let clicked = rng.random::<f64>() < ctr;
        let seq = log.len();
        log.push((
            ts,
            seq,
            Transaction {
                timestamp: ts,
                user_id: user_ids[m].clone(),
                banner_id: banner.clone(),
                url: urls[n].clone(),
                event: Event::View,
            },
        ));
        if clicked {
            let click_ts = ts + rng.random_range(1_000..60_000);
            let seq = log.len();
            log.push((
                click_ts,
                seq,
                Transaction {
                    timestamp: click_ts,
                    user_id: user_ids[m].clone(),
                    banner_id: banner.clone(),
                    url: urls[n].clone(),
                    event: Event::Click,
                },
            ));
        }
    };
    for &(m, n) in &edges {
        let day = rng.random_range(0..cfg.n_days - 1);
        emit(&mut rng, &mut log, m as usize, n as usize, day);
    }
    for _ in 0..cfg.n_impressions {
        let (m, n) = edges[rng.random_range(0..edges.len())];
        let day = rng.random_range(0..cfg.n_days);
        emit(&mut rng, &mut log, m as usize, n as usize, day);
    }
    log.sort_by_key(|(ts, seq, _)| (*ts, *seq));

    let density = (0..cfg.k_user)
        .map(|i| {
            (0..cfg.k_url)
                .map(|j| if i == j { cfg.density_in } else { cfg.density_out })
                .collect()
        })
        .collect();
    let planted = PlantedStructure {
        true_user_cluster: user_ids.iter().cloned().zip(zu.iter().copied()).collect(),
        true_url_cluster: urls.iter().cloned().zip(zv.iter().copied()).collect(),
        true_block_density: density,
        true_block_ctr: cfg.ctr_by_block.clone(),
    };
    Ok((log.into_iter().map(|(_, _, t)| t).collect(), planted))
}

/// Writes the planted clusters as `kind \t id \t cluster` lines sorted by id.
pub fn write_planted<W: Write>(mut w: W, p: &PlantedStructure) -> Result<()> {
    writeln!(w, "# density {}", format_matrix(&p.true_block_density))?;
    writeln!(w, "# ctr {}", format_matrix(&p.true_block_ctr))?;
    let mut users: Vec<_> = p.true_user_cluster.iter().collect();
    users.sort();
    for (id, c) in users {
        writeln!(w, "user\t{id}\t{c}")?;
    }
    let mut urls: Vec<_> = p.true_url_cluster.iter().collect();
    urls.sort();
    for (id, c) in urls {
        writeln!(w, "url\t{id}\t{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tx(ts: i64, user: &str, banner: &str, url: &str, event: Event) -> Transaction {
        Transaction {
            timestamp: ts,
            user_id: user.into(),
            banner_id: banner.into(),
            url: url.into(),
            event,
        }
    }

    #[test]
    fn strips_query_strings() {
        assert_eq!(strip_query_string("http://a.com/p?x=1&y=2"), "http://a.com/p");
        assert_eq!(strip_query_string("http://a.com/p"), "http://a.com/p");
        assert_eq!(strip_query_string("http://a.com/p??"), "http://a.com/p");
        assert_eq!(strip_query_string(""), "");
    }

    proptest! {
        #[test]
        fn strip_is_idempotent(s in ".*") {
            let once = strip_query_string(&s);
            prop_assert_eq!(strip_query_string(once), once);
        }
    }

    #[test]
    fn parses_a_view_line() {
        let log = parse_transactions("1370044800000\tu1\tb1\thttp://a.com/p?q=1\tview\n".as_bytes()).unwrap();
        assert_eq!(log.transactions.len(), 1);
        assert_eq!(log.malformed, 0);
        assert_eq!(log.transactions[0].event, Event::View);
        assert_eq!(log.transactions[0].url, "http://a.com/p");
    }

    #[test]
    fn short_lines_are_skipped_and_counted() {
        let text = "1\tu\tb\thttp://x\tview\n1\tu\tb\tview\n";
        let log = parse_transactions(text.as_bytes()).unwrap();
        assert_eq!(log.transactions.len(), 1);
        assert_eq!(log.malformed, 1);
    }

    #[test]
    fn mostly_malformed_file_is_rejected() {
        let mut text = String::new();
        for i in 0..4 {
            text.push_str(&format!("{i}\tu\tb\thttp://x\tclick\n"));
        }
        for _ in 0..6 {
            text.push_str("garbage line\n");
        }
        assert!(matches!(parse_transactions(text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn splits_by_day() {
        let d = |k: i64| 1_370_044_800_000 + k * MS_PER_DAY + 5;
        let log = vec![
            tx(d(0), "u", "b", "x", Event::View),
            tx(d(1), "u", "b", "x", Event::View),
            tx(d(2), "u", "b", "x", Event::View),
        ];
        let test_day = day_of(d(2)).unwrap();
        let split = split_by_day(log.clone(), test_day).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.test, vec![log[2].clone()]);

        let same: Vec<_> = (0..3).map(|i| tx(d(2) + i, "u", "b", "x", Event::View)).collect();
        let split = split_by_day(same, test_day).unwrap();
        assert!(split.train.is_empty());
        assert_eq!(split.test.len(), 3);

        let late = vec![tx(d(3), "u", "b", "x", Event::View)];
        assert!(matches!(split_by_day(late, test_day), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn split_partitions_input(days in proptest::collection::vec(0i64..5, 0..40)) {
            let log: Vec<_> = days
                .iter()
                .map(|&k| tx(1_370_044_800_000 + k * MS_PER_DAY, "u", "b", "x", Event::View))
                .collect();
            let test_day = day_of(1_370_044_800_000 + 4 * MS_PER_DAY).unwrap();
            let n = log.len();
            let split = split_by_day(log, test_day).unwrap();
            prop_assert_eq!(split.train.len() + split.test.len(), n);
        }
    }

    #[test]
    fn clicks_label_matching_same_day_views() {
        let base = 1_370_044_800_000;
        let log = vec![
            tx(base, "u1", "b1", "x", Event::View),
            tx(base + 10, "u1", "b1", "x", Event::View),
            tx(base + 20, "u1", "b1", "x", Event::Click),
            tx(base + 30, "u2", "b1", "x", Event::View),
            // next day: does not match u2's view
            tx(base + MS_PER_DAY, "u2", "b1", "x", Event::Click),
        ];
        let obs = label_observations(&log).unwrap();
        let labels: Vec<u8> = obs.iter().map(|o| o.label).collect();
        assert_eq!(labels, vec![1, 0, 0]);
    }

    #[test]
    fn degenerate_densities_give_block_diagonal_edges() {
        let cfg = SyntheticConfig {
            n_users: 20,
            n_urls: 10,
            density_in: 1.0,
            density_out: 0.0,
            n_impressions: 0,
            ..SyntheticConfig::default()
        };
        let (log, planted) = generate_synthetic(&cfg).unwrap();
        let mut pairs = std::collections::HashSet::new();
        for t in &log {
            pairs.insert((t.user_id.clone(), t.url.clone()));
        }
        let mut expected = 0;
        for (u, cu) in &planted.true_user_cluster {
            for (v, cv) in &planted.true_url_cluster {
                let present = pairs.contains(&(u.clone(), v.clone()));
                assert_eq!(present, cu == cv, "{u} {v}");
                expected += usize::from(cu == cv);
            }
        }
        assert_eq!(pairs.len(), expected);
    }

    #[test]
    fn zero_ctr_means_no_clicks() {
        let cfg = SyntheticConfig {
            ctr_by_block: vec![vec![0.0; 2]; 2],
            ..SyntheticConfig::default()
        };
        let (log, _) = generate_synthetic(&cfg).unwrap();
        assert!(!log.is_empty());
        assert!(log.iter().all(|t| t.event == Event::View));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SyntheticConfig {
            n_users: 100,
            seed: 99,
            ..SyntheticConfig::default()
        };
        let render = || {
            let (log, planted) = generate_synthetic(&cfg).unwrap();
            let mut buf = Vec::new();
            write_transactions(&mut buf, &log).unwrap();
            write_planted(&mut buf, &planted).unwrap();
            buf
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn no_planted_cluster_is_empty() {
        let cfg = SyntheticConfig {
            n_users: 6,
            n_urls: 5,
            k_user: 6,
            k_url: 5,
            ctr_by_block: vec![vec![0.01; 5]; 6],
            ..SyntheticConfig::default()
        };
        let (_, planted) = generate_synthetic(&cfg).unwrap();
        let mut users: Vec<usize> = planted.true_user_cluster.values().copied().collect();
        users.sort();
        assert_eq!(users, (0..6).collect::<Vec<_>>());
        let mut urls: Vec<usize> = planted.true_url_cluster.values().copied().collect();
        urls.sort();
        assert_eq!(urls, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_log_round_trips_through_parser() {
        let (log, _) = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_transactions(&mut buf, &log).unwrap();
        let parsed = parse_transactions(buf.as_slice()).unwrap();
        assert_eq!(parsed.malformed, 0);
        assert_eq!(parsed.transactions, log);
    }

    #[test]
    fn config_keys_apply() {
        let mut cfg = SyntheticConfig::default();
        cfg.apply("ctr", "0.1,0.2;0.3,0.4").unwrap();
        cfg.apply("n_users", "50").unwrap();
        assert_eq!(cfg.ctr_by_block, vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
        assert_eq!(cfg.n_users, 50);
        assert!(cfg.apply("bogus", "1").is_err());
    }
}
