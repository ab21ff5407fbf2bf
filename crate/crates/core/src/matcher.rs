//! Path and component similarity between a query CFG and a target CFG.
//!
//! Blocks are compared through a precomputed SEBB relation (semantically
//! equivalent basic blocks). A query path scores the longest common
//! subsequence it shares with any bounded walk in the target, divided by its
//! length; a component scores the length-weighted mean over its linearly
//! independent paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BasicBlock, Cfg};
use crate::encoder::{similarity, BlockEncoder};
use crate::error::{Error, Result};
use crate::lsh::{LshIndex, QueryMode};

/// Node ordinals, consecutive ones joined by an edge.
pub type Path = Vec<usize>;

/// Linearly independent paths from the entry. See [`paths_from`].
pub fn linearly_independent_paths(g: &Cfg, coverage: f64) -> Vec<Path> {
    paths_from(g, g.entry(), coverage)
}

/// Maximal paths from `root` in depth-first order (children ascending),
/// keeping each one that adds a node not on any earlier kept path, until the
/// kept paths cover `coverage` of the nodes reachable from `root`.
///
/// A path may follow an edge into a node it already contains (a loop) at most
/// once per such edge, so every loop is unrolled once.
pub fn paths_from(g: &Cfg, root: usize, coverage: f64) -> Vec<Path> {
    let reachable = g.reachable_from(root).len();
    let target = (coverage.clamp(0.0, 1.0) * reachable as f64).ceil() as usize;
    let mut covered = vec![false; g.len()];
    let mut n_covered = 0;
    let mut out = Vec::new();
    let mut path = vec![root];
    let mut on_path = vec![0usize; g.len()];
    on_path[root] = 1;
    let mut used_loop_edges: Vec<(usize, usize)> = Vec::new();
    // Each frame: next successor position to try at this depth.
    let mut next = vec![0usize];
    let mut extended = vec![false];
    while let Some(&pos) = next.last() {
        if n_covered >= target.max(1) {
            break;
        }
        let v = *path.last().expect("path tracks frames");
        let succ = g.successors(v);
        let mut advanced = false;
        let mut p = pos;
        while p < succ.len() {
            let w = succ[p];
            p += 1;
            let is_loop = on_path[w] > 0;
            if is_loop && used_loop_edges.contains(&(v, w)) {
                continue;
            }
            *next.last_mut().expect("frame") = p;
            *extended.last_mut().expect("frame") = true;
            if is_loop {
                used_loop_edges.push((v, w));
            }
            path.push(w);
            on_path[w] += 1;
            next.push(0);
            extended.push(false);
            advanced = true;
            break;
        }
        if advanced {
            continue;
        }
        // Every successor tried: a leaf of the search is a maximal path.
        if !extended.pop().expect("frame") && path.iter().any(|&u| !covered[u]) {
            for &u in &path {
                if !covered[u] {
                    covered[u] = true;
                    n_covered += 1;
                }
            }
            out.push(path.clone());
        }
        next.pop();
        let w = path.pop().expect("frame");
        on_path[w] -= 1;
        if let Some(&u) = path.last() {
            if on_path[w] > 0 {
                let k = used_loop_edges.iter().rposition(|&e| e == (u, w)).expect("loop edge recorded");
                used_loop_edges.remove(k);
            }
        }
    }
    out
}

/// Which (query node, target node) pairs count as equivalent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SebbMatrix {
    query_len: usize,
    target_len: usize,
    m: Vec<bool>,
}

impl SebbMatrix {
    pub fn from_fn(query_len: usize, target_len: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Vec::with_capacity(query_len * target_len);
        for q in 0..query_len {
            for t in 0..target_len {
                m.push(f(q, t));
            }
        }
        SebbMatrix {
            query_len,
            target_len,
            m,
        }
    }

    /// Equal instruction text.
    pub fn by_text(query: &[BasicBlock], target: &[BasicBlock]) -> Self {
        SebbMatrix::from_fn(query.len(), target.len(), |q, t| query[q].instrs == target[t].instrs)
    }

    /// Embedding similarity at least `theta`.
    pub fn by_embeddings(query: &[Vec<f64>], target: &[Vec<f64>], theta: f64) -> Result<Self> {
        let mut m = Vec::with_capacity(query.len() * target.len());
        for q in query {
            for t in target {
                m.push(similarity(q, t)? >= theta);
            }
        }
        Ok(SebbMatrix {
            query_len: query.len(),
            target_len: target.len(),
            m,
        })
    }

    pub fn get(&self, q: usize, t: usize) -> bool {
        self.m[q * self.target_len + t]
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }
}

/// Whether `b` is a semantically equivalent block of `a` under the encoder.
pub fn sebb(a: &BasicBlock, b: &BasicBlock, enc: &BlockEncoder, theta: f64) -> Result<bool> {
    let (ea, eb) = (enc.embed(a)?, enc.embed(b)?);
    Ok(similarity(&ea.vector, &eb.vector)? >= theta)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcsOptions {
    /// Occurrences allowed per target node within one walk.
    pub node_visit_limit: usize,
    /// Walks start only here; `None` allows any node.
    pub starts: Option<Vec<usize>>,
    /// Search nodes expanded before giving up exactness.
    pub max_expansions: Option<u64>,
}

impl Default for LcsOptions {
    fn default() -> Self {
        LcsOptions {
            node_visit_limit: 2,
            starts: None,
            max_expansions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LcsResult {
    pub length: usize,
    /// A target walk attaining `length`. Empty when `length` is 0.
    pub witness: Path,
    /// False when the expansion cap cut the search short.
    pub exhaustive: bool,
}

/// Longest common SEBB subsequence of the query path `q` (query ordinals) and
/// any walk in `t` visiting each node at most `node_visit_limit` times.
///
/// Depth-first search over walks, carrying one LCS row per step. Branches are
/// tried most promising first, equal promise in ascending ordinal order, and
/// pruned once their upper bound cannot beat the best walk found so far.
pub fn lcs_path_vs_graph(q: &[usize], sebb: &SebbMatrix, t: &Cfg, opts: &LcsOptions) -> Result<LcsResult> {
    if q.is_empty() {
        return Err(Error::EmptyPath);
    }
    if sebb.target_len() != t.len() || q.iter().any(|&v| v >= sebb.query_len()) {
        return Err(Error::DimMismatch {
            expected: t.len(),
            actual: sebb.target_len(),
        });
    }
    let m = q.len();
    let n = t.len();
    let limit = opts.node_visit_limit.max(1);
    let hit = |j: usize, v: usize| sebb.get(q[j], v);
    let Bounds { from, after } = bounds(q, sebb, t, limit);
    let after_at = |v: usize, j: usize| after[v * (m + 1) + j];
    // How far a walk entering `w` could get from the current row.
    let promise = |row: &[usize], w: usize| (0..=m).map(|j| row[j] + from[w * (m + 1) + j]).max().unwrap_or(0);

    let starts: Vec<usize> = match &opts.starts {
        Some(s) => {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            if let Some(&bad) = s.iter().find(|&&v| v >= n) {
                return Err(Error::InvalidGraph(format!("start node {bad} out of range")));
            }
            s
        }
        None => (0..n).filter(|&v| (0..m).any(|j| hit(j, v))).collect(),
    };
    let zero = vec![0; m + 1];
    let mut starts = starts;
    starts.sort_by_key(|&s| (std::cmp::Reverse(promise(&zero, s)), s));
    let ceiling = starts.first().map_or(0, |&s| promise(&zero, s));
    let mut best = LcsResult {
        length: 0,
        witness: Vec::new(),
        exhaustive: true,
    };
    let mut expansions = 0u64;
    let mut visits = vec![0usize; n];
    let mut walk: Vec<usize> = Vec::new();
    // rows[d] is the LCS row after walk[..=d]; row[j] = LCS(q[..j], walk).
    let mut rows: Vec<Vec<usize>> = Vec::new();
    // Per step: untried successors, most promising last.
    let mut next: Vec<Vec<usize>> = Vec::new();

    let push = |v: usize, rows: &mut Vec<Vec<usize>>| {
        let prev = rows.last().cloned().unwrap_or_else(|| vec![0; m + 1]);
        let mut row = vec![0; m + 1];
        for j in 1..=m {
            row[j] = row[j - 1].max(prev[j]).max(if hit(j - 1, v) { prev[j - 1] + 1 } else { 0 });
        }
        rows.push(row);
    };

    let order = |row: &[usize], v: usize| {
        let mut succ = t.successors(v).to_vec();
        succ.sort_by_key(|&w| (promise(row, w), std::cmp::Reverse(w)));
        succ
    };

    'starts: for &s in &starts {
        if promise(&zero, s) <= best.length {
            break;
        }
        walk.push(s);
        visits[s] += 1;
        push(s, &mut rows);
        next.push(order(rows.last().expect("row"), s));
        while let Some(&v) = walk.last() {
            let row = rows.last().expect("row per step");
            if row[m] > best.length {
                best.length = row[m];
                best.witness = walk.clone();
                if best.length >= ceiling {
                    break 'starts;
                }
            }
            let bound = (0..=m).map(|j| row[j] + after_at(v, j)).max().unwrap_or(0);
            let frame = next.last_mut().expect("frame per step");
            let mut chosen = None;
            if bound > best.length {
                while let Some(w) = frame.pop() {
                    if visits[w] < limit {
                        chosen = Some(w);
                        break;
                    }
                }
            }
            match chosen {
                Some(w) => {
                    expansions += 1;
                    if opts.max_expansions.is_some_and(|cap| expansions > cap) {
                        best.exhaustive = false;
                        log::warn!("LCS search stopped after {} expansions", expansions - 1);
                        break 'starts;
                    }
                    walk.push(w);
                    visits[w] += 1;
                    push(w, &mut rows);
                    next.push(order(rows.last().expect("row"), w));
                }
                None => {
                    let v = walk.pop().expect("nonempty walk");
                    visits[v] -= 1;
                    rows.pop();
                    next.pop();
                }
            }
        }
        walk.clear();
        rows.clear();
        next.clear();
        visits.fill(0);
    }
    Ok(best)
}

struct Bounds {
    /// `from[v][j]`: upper bound on the LCS of `q[j..]` against walks starting at `v`.
    from: Vec<usize>,
    /// `after[v][j]`: the same for walks that continue past `v`, excluding `v`.
    after: Vec<usize>,
}

/// Two upper bounds, combined by taking the smaller. The first drops the
/// visit limit and is solved as a fixpoint, since cycles make it recursive.
/// The second lets every reachable node match at most `limit` query blocks.
fn bounds(q: &[usize], sebb: &SebbMatrix, t: &Cfg, limit: usize) -> Bounds {
    let m = q.len();
    let n = t.len();
    let w = m + 1;
    // cnt[v][j]: query positions at or after j that v can match, capped.
    let mut cnt = vec![0usize; n * w];
    for v in 0..n {
        for j in (0..m).rev() {
            cnt[v * w + j] = cnt[v * w + j + 1] + sebb.get(q[j], v) as usize;
        }
        for j in 0..=m {
            cnt[v * w + j] = cnt[v * w + j].min(limit);
        }
    }
    // cap[v][j]: sum of cnt over nodes reachable from v by at least one edge.
    let mut cap = vec![0usize; n * w];
    let mut seen = vec![usize::MAX; n];
    let mut stack = Vec::new();
    for v in 0..n {
        stack.extend_from_slice(t.successors(v));
        while let Some(x) = stack.pop() {
            if seen[x] == v {
                continue;
            }
            seen[x] = v;
            for j in 0..=m {
                cap[v * w + j] += cnt[x * w + j];
            }
            stack.extend(t.successors(x).iter().filter(|&&y| seen[y] != v));
        }
    }

    let mut from = vec![0usize; n * w];
    let mut after = vec![0usize; n * w];
    loop {
        let mut changed = false;
        for v in 0..n {
            for j in 0..=m {
                let a = t.successors(v).iter().map(|&x| from[x * w + j]).max().unwrap_or(0);
                after[v * w + j] = a.min(cap[v * w + j]).min(m - j);
            }
            for j in (0..m).rev() {
                let skip_q = from[v * w + j + 1];
                let skip_v = after[v * w + j];
                let take = if sebb.get(q[j], v) { 1 + after[v * w + j + 1] } else { 0 };
                let val = skip_q.max(skip_v).max(take).min(cnt[v * w + j] + cap[v * w + j]);
                if val > from[v * w + j] {
                    from[v * w + j] = val;
                    changed = true;
                }
            }
        }
        if !changed {
            return Bounds { from, after };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    /// `lcs / |q|`, in `[0, 1]`.
    pub score: f64,
    pub lcs: usize,
    pub witness: Path,
    pub exhaustive: bool,
}

pub fn path_score(q: &[usize], sebb: &SebbMatrix, t: &Cfg, opts: &LcsOptions) -> Result<PathScore> {
    let r = lcs_path_vs_graph(q, sebb, t, opts)?;
    Ok(PathScore {
        score: r.length as f64 / q.len() as f64,
        lcs: r.length,
        witness: r.witness,
        exhaustive: r.exhaustive,
    })
}

/// Length-weighted mean of `(path length, score)` pairs; 0 when empty.
pub fn weighted_score(parts: &[(usize, f64)]) -> f64 {
    let total: usize = parts.iter().map(|p| p.0).sum();
    if total == 0 {
        return 0.0;
    }
    parts.iter().map(|&(l, s)| l as f64 * s).sum::<f64>() / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartCandidates {
    /// Query ordinal of the starting block.
    pub query_block: usize,
    /// Matching target blocks with their similarity, best first.
    pub targets: Vec<(usize, f64)>,
}

/// Query blocks are tried in ordinal order; the first with at least one
/// store hit at `theta` becomes the starting block.
pub fn find_start_candidates(
    query_embeddings: &[Vec<f64>],
    store: &LshIndex<usize>,
    theta: f64,
    mode: QueryMode,
    max_blocks_tried: Option<usize>,
) -> Result<Option<StartCandidates>> {
    let tries = max_blocks_tried.unwrap_or(usize::MAX);
    for (i, e) in query_embeddings.iter().enumerate().take(tries) {
        let hits = store.query(e, theta, mode)?;
        if !hits.is_empty() {
            return Ok(Some(StartCandidates {
                query_block: i,
                targets: hits,
            }));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub theta: f64,
    pub coverage: f64,
    pub mode: QueryMode,
    pub max_blocks_tried: Option<usize>,
    pub node_visit_limit: usize,
    /// Per query path. Searches cut short report `exhaustive: false`.
    pub max_expansions: Option<u64>,
    /// Score paths on the rayon pool.
    pub parallel: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            theta: 0.5,
            coverage: 0.8,
            mode: QueryMode::Approx,
            max_blocks_tried: None,
            node_visit_limit: 2,
            max_expansions: Some(1_000_000),
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub query_path: Path,
    #[serde(flatten)]
    pub score: PathScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub score: f64,
    pub start: Option<StartCandidates>,
    pub paths: Vec<PathReport>,
}

/// Score query paths rooted at the start block against walks beginning at
/// its target candidates.
pub fn score_from_start(
    q: &Cfg,
    t: &Cfg,
    sebb: &SebbMatrix,
    start: Option<StartCandidates>,
    opts: &MatchOptions,
) -> Result<ComponentReport> {
    let Some(start) = start else {
        return Ok(ComponentReport {
            score: 0.0,
            start: None,
            paths: Vec::new(),
        });
    };
    let paths = paths_from(q, start.query_block, opts.coverage);
    let lcs = LcsOptions {
        node_visit_limit: opts.node_visit_limit,
        starts: Some(start.targets.iter().map(|&(v, _)| v).collect()),
        max_expansions: opts.max_expansions,
    };
    let score_one = |p: &Path| path_score(p, sebb, t, &lcs);
    let scores: Vec<PathScore> = if opts.parallel {
        paths.par_iter().map(score_one).collect::<Result<_>>()?
    } else {
        paths.iter().map(score_one).collect::<Result<_>>()?
    };
    let parts: Vec<(usize, f64)> = paths.iter().zip(&scores).map(|(p, s)| (p.len(), s.score)).collect();
    Ok(ComponentReport {
        score: weighted_score(&parts),
        start: Some(start),
        paths: paths
            .into_iter()
            .zip(scores)
            .map(|(query_path, score)| PathReport { query_path, score })
            .collect(),
    })
}

/// Whether the target contains the query component, as a score in `[0, 1]`.
/// `store` indexes the target's block embeddings by node ordinal.
pub fn component_score(
    q: &Cfg,
    t: &Cfg,
    store: &LshIndex<usize>,
    enc: &BlockEncoder,
    opts: &MatchOptions,
) -> Result<ComponentReport> {
    let q_nodes: Vec<&BasicBlock> = q.nodes().iter().collect();
    let t_nodes: Vec<&BasicBlock> = t.nodes().iter().collect();
    let qe: Vec<Vec<f64>> = enc.embed_all(&q_nodes)?.into_iter().map(|e| e.vector).collect();
    let te: Vec<Vec<f64>> = enc.embed_all(&t_nodes)?.into_iter().map(|e| e.vector).collect();
    let sebb = SebbMatrix::by_embeddings(&qe, &te, opts.theta)?;
    let start = find_start_candidates(&qe, store, opts.theta, opts.mode, opts.max_blocks_tried)?;
    score_from_start(q, t, &sebb, start, opts)
}
