//! Cosine scoring of verification trials, EER and minDCF.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::Network;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::training::Utterance;

/// The `eval` section of the run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < p_target < 1 and positive costs, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetMetrics {
    pub eer: f64,
    pub threshold_at_eer: f64,
    pub min_dcf: f64,
}

/// Cosine similarity of two embeddings.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("embedding lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
    let nb = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("zero-norm embedding".into()));
    }
    // sqrt of the product keeps score(a, a) exactly 1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// One operating point: accept iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every unique score plus the reject-all point (`+∞`),
/// ordered by increasing threshold. Runs in O(N log N).
pub fn operating_points(scores: &[f64], targets: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != targets.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("trial score".into()));
    }
    let n_t = targets.iter().filter(|&&t| t).count();
    let n_n = targets.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least one target and one nontarget trial, got {n_t} and {n_n}"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    // counts of trials strictly below the current threshold
    let (mut t_below, mut n_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        points.push(OperatingPoint {
            threshold: thr,
            p_miss: t_below as f64 / n_t as f64,
            p_fa: (n_n - n_below) as f64 / n_n as f64,
        });
        while i < order.len() && scores[order[i]] == thr {
            if targets[order[i]] {
                t_below += 1;
            } else {
                n_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate with linear interpolation between adjacent operating
/// points, and the (interpolated) threshold where it occurs.
pub fn compute_eer(scores: &[f64], targets: &[bool]) -> Result<(f64, f64)> {
    let pts = operating_points(scores, targets)?;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.p_fa - a.p_miss;
        let db = b.p_fa - b.p_miss;
        if da == 0.0 {
            return Ok((a.p_miss, a.threshold));
        }
        if da > 0.0 && db <= 0.0 {
            let alpha = da / (da - db);
            let eer = a.p_miss + alpha * (b.p_miss - a.p_miss);
            let thr = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return Ok((eer, thr));
        }
    }
    // unreachable: the last point has p_fa - p_miss = -1
    let last = pts[pts.len() - 1];
    Ok((last.p_miss, last.threshold))
}

/// Normalized detection cost at one operating point.
pub fn normalized_dcf(p: &OperatingPoint, cfg: &EvalConfig) -> f64 {
    let cost = cfg.c_miss * cfg.p_target * p.p_miss + cfg.c_fa * (1.0 - cfg.p_target) * p.p_fa;
    cost / (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target))
}

/// Minimum normalized detection cost over all operating points.
pub fn compute_min_dcf(scores: &[f64], targets: &[bool], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let pts = operating_points(scores, targets)?;
    Ok(pts.iter().map(|p| normalized_dcf(p, cfg)).fold(f64::INFINITY, f64::min))
}

pub fn det_metrics(scores: &[f64], targets: &[bool], cfg: &EvalConfig) -> Result<DetMetrics> {
    let (eer, threshold_at_eer) = compute_eer(scores, targets)?;
    Ok(DetMetrics {
        eer,
        threshold_at_eer,
        min_dcf: compute_min_dcf(scores, targets, cfg)?,
    })
}

fn parse_label(s: &str) -> Option<bool> {
    match s {
        "target" => Some(true),
        "nontarget" => Some(false),
        _ => None,
    }
}

fn label(target: bool) -> &'static str {
    if target {
        "target"
    } else {
        "nontarget"
    }
}

/// Parses `enroll test target|nontarget` lines; blank and `#` lines are skipped.
pub fn parse_trials(text: &str, origin: &Path) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| Error::format(origin, format!("line {}: {why}", i + 1));
        if f.len() != 3 {
            return Err(bad("expected `enroll test target|nontarget`"));
        }
        out.push(Trial {
            enroll: f[0].into(),
            test: f[1].into(),
            target: parse_label(f[2]).ok_or_else(|| bad("label must be target or nontarget"))?,
        });
    }
    Ok(out)
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    parse_trials(&std::fs::read_to_string(path)?, path)
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        writeln!(s, "{} {} {}", t.enroll, t.test, label(t.target)).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Score file: each trial line with the score appended.
pub fn write_scores(path: impl AsRef<Path>, trials: &[Trial], scores: &[f64]) -> Result<()> {
    if trials.len() != scores.len() {
        return Err(Error::shape("trials and scores differ in length"));
    }
    let mut s = String::new();
    for (t, sc) in trials.iter().zip(scores) {
        writeln!(s, "{} {} {} {sc:.8}", t.enroll, t.test, label(t.target)).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<(Vec<Trial>, Vec<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let (mut trials, mut scores) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `enroll test label score`", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        trials.push(Trial {
            enroll: f[0].into(),
            test: f[1].into(),
            target: parse_label(f[2]).ok_or_else(bad)?,
        });
        scores.push(f[3].parse().map_err(|_| bad())?);
    }
    Ok((trials, scores))
}

/// All unordered pairs `(i < j)` of `(utterance, speaker)` items.
pub fn all_pairs_trials(items: &[(String, String)]) -> Vec<Trial> {
    let mut out = Vec::new();
    for (i, (ua, sa)) in items.iter().enumerate() {
        for (ub, sb) in &items[i + 1..] {
            out.push(Trial {
                enroll: ua.clone(),
                test: ub.clone(),
                target: sa == sb,
            });
        }
    }
    out
}

pub type EmbeddingTable = BTreeMap<String, Vec<f32>>;

/// Embedding file: `utt v1 v2 ...`, one utterance per line. Values use the
/// shortest representation that parses back to the same f32.
pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let mut s = String::new();
    for (id, v) in table {
        s.push_str(id);
        for x in v {
            write!(s, " {x}").expect("string write");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut table = EmbeddingTable::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let mut f = line.split_whitespace();
        let Some(id) = f.next() else { continue };
        let v = f
            .map(str::parse::<f32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if v.is_empty() || dim.is_some_and(|d| d != v.len()) {
            return Err(Error::format(path, format!("line {}: bad embedding length {}", i + 1, v.len())));
        }
        dim = Some(v.len());
        if table.insert(id.to_string(), v).is_some() {
            return Err(Error::format(path, format!("duplicate utterance `{id}`")));
        }
    }
    Ok(table)
}

/// Embedding of one utterance (BN in infer mode). An odd trailing frame is dropped.
pub fn embed_utterance(network: &Network, store: &mut ParamStore<f32>, u: &Utterance) -> Result<Vec<f32>> {
    let t = u.frames() & !1;
    if t == 0 {
        return Err(Error::InvalidInput(format!("utterance `{}` has no frames", u.id)));
    }
    let x = u.features.slice_time(0, t)?;
    Ok(network.embed_batch(store, x)?.into_vec())
}

/// Embeds every utterance, spreading them over `threads` workers. Each
/// utterance is processed independently, so the result does not depend on
/// the thread count.
pub fn embed_utterances(
    network: &Network,
    store: &ParamStore<f32>,
    utts: &[Utterance],
    threads: usize,
) -> Result<EmbeddingTable> {
    let threads = threads.clamp(1, utts.len().max(1));
    let per = utts.len().div_ceil(threads).max(1);
    let results: Vec<Result<EmbeddingTable>> = std::thread::scope(|scope| {
        let handles: Vec<_> = utts
            .chunks(per)
            .map(|part| {
                let mut local = store.clone();
                scope.spawn(move || {
                    part.iter()
                        .map(|u| Ok((u.id.clone(), embed_utterance(network, &mut local, u)?)))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("embedding worker panicked"))
            .collect()
    });
    let mut table = EmbeddingTable::new();
    for r in results {
        table.extend(r?);
    }
    Ok(table)
}

pub fn score_trials(table: &EmbeddingTable, trials: &[Trial]) -> Result<Vec<f64>> {
    let get = |id: &str| table.get(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
    trials
        .iter()
        .map(|t| cosine_score(get(&t.enroll)?, get(&t.test)?))
        .collect()
}

/// Embeds, scores and summarizes a trial list.
pub fn evaluate(
    network: &Network,
    store: &ParamStore<f32>,
    utts: &[Utterance],
    trials: &[Trial],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<(DetMetrics, Vec<f64>)> {
    let needed: std::collections::BTreeSet<&str> =
        trials.iter().flat_map(|t| [t.enroll.as_str(), t.test.as_str()]).collect();
    if let Some(m) = needed.iter().find(|id| !utts.iter().any(|u| u.id == **id)) {
        return Err(Error::MissingUtterance(m.to_string()));
    }
    let used: Vec<Utterance> = utts.iter().filter(|u| needed.contains(u.id.as_str())).cloned().collect();
    let table = embed_utterances(network, store, &used, threads)?;
    let scores = score_trials(&table, trials)?;
    let targets: Vec<bool> = trials.iter().map(|t| t.target).collect();
    Ok((det_metrics(&scores, &targets, cfg)?, scores))
}
