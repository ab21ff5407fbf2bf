//! Control-flow graphs of basic blocks.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{block_from_record, record_from_block, Arch, BasicBlock, BlockRecord, Normalization, OptLevel};
use crate::error::{Error, Result};

/// The CFG file format: `edges` index into `nodes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfgRecord {
    pub arch: Arch,
    pub opt: OptLevel,
    pub entry: usize,
    pub nodes: Vec<BlockRecord>,
    pub edges: Vec<[usize; 2]>,
}

/// A directed graph of blocks in which every node is reachable from `entry`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cfg {
    pub arch: Arch,
    pub opt: OptLevel,
    entry: usize,
    nodes: Vec<BasicBlock>,
    /// Sorted, deduplicated successor lists.
    succ: Vec<Vec<usize>>,
}

impl Cfg {
    pub fn new(entry: usize, nodes: Vec<BasicBlock>, edges: &[[usize; 2]]) -> Result<Self> {
        let first = nodes.first().ok_or_else(|| Error::InvalidGraph("no nodes".into()))?;
        let (arch, opt) = (first.arch, first.opt);
        if nodes.iter().any(|b| b.arch != arch || b.opt != opt) {
            return Err(Error::InvalidGraph("nodes disagree on arch or opt level".into()));
        }
        let n = nodes.len();
        if entry >= n {
            return Err(Error::InvalidGraph(format!("entry {entry} out of range for {n} nodes")));
        }
        let mut succ = vec![Vec::new(); n];
        for &[a, b] in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!("edge {a}->{b} out of range for {n} nodes")));
            }
            succ[a].push(b);
        }
        for s in &mut succ {
            s.sort_unstable();
            s.dedup();
        }
        let mut seen = vec![false; n];
        let mut stack = vec![entry];
        seen[entry] = true;
        while let Some(v) = stack.pop() {
            for &w in &succ[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if let Some(u) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidGraph(format!("node {u} unreachable from entry {entry}")));
        }
        Ok(Cfg {
            arch,
            opt,
            entry,
            nodes,
            succ,
        })
    }

    pub fn from_record(rec: &CfgRecord, mode: Normalization) -> Result<Self> {
        let nodes = rec
            .nodes
            .iter()
            .map(|r| block_from_record(r, rec.arch, rec.opt, mode).map_err(Error::InvalidGraph))
            .collect::<Result<Vec<_>>>()?;
        Cfg::new(rec.entry, nodes, &rec.edges)
    }

    pub fn from_json(text: &str, mode: Normalization) -> Result<Self> {
        let rec: CfgRecord = serde_json::from_str(text)?;
        Cfg::from_record(&rec, mode)
    }

    pub fn to_record(&self) -> CfgRecord {
        CfgRecord {
            arch: self.arch,
            opt: self.opt,
            entry: self.entry,
            nodes: self.nodes.iter().map(record_from_block).collect(),
            edges: self.edges().map(|(a, b)| [a, b]).collect(),
        }
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer(w, &self.to_record())?;
        Ok(())
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: usize) -> &BasicBlock {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[BasicBlock] {
        &self.nodes
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        &self.succ[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.succ[a].binary_search(&b).is_ok()
    }

    /// Edges in ascending `(from, to)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.succ
            .iter()
            .enumerate()
            .flat_map(|(a, s)| s.iter().map(move |&b| (a, b)))
    }

    /// Nodes in reverse postorder of a DFS from `start` visiting children in
    /// ascending order.
    pub fn reachable_from(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            out.push(v);
            stack.extend(self.succ[v].iter().rev().filter(|&&w| !seen[w]));
        }
        out
    }
}

pub fn parse_cfg(path: impl AsRef<Path>) -> Result<Cfg> {
    Cfg::from_json(&std::fs::read_to_string(path)?, Normalization::Normalized)
}
