//! Random-hyperplane LSH over block embeddings.
//!
//! Each of `tables` hash tables signs the embedding against `bits` Gaussian
//! hyperplanes. Candidates colliding in any table are re-scored with
//! `exp(-‖q - e‖₁)`, the same similarity the encoder is trained on.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoder::similarity;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LshConfig {
    pub tables: usize,
    /// Hyperplanes per table, at most 64. Zero puts everything in one bucket.
    pub bits: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            tables: 8,
            bits: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Score only items colliding with the query in some table.
    Approx,
    /// Score every item.
    Exact,
}

#[derive(Clone, Debug)]
pub struct LshIndex<R> {
    config: LshConfig,
    dim: usize,
    /// `tables · bits · dim` hyperplane normals.
    planes: Vec<f64>,
    items: Vec<(R, Vec<f64>)>,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile<R> {
    tables: usize,
    bits: usize,
    seed: u64,
    dim: usize,
    items: Vec<Item<R>>,
}

#[derive(Serialize, Deserialize)]
struct Item<R> {
    #[serde(rename = "ref")]
    block: R,
    embedding: Vec<f64>,
}

impl<R: Clone> LshIndex<R> {
    /// Index `items`; `dim` is required so an empty index still checks queries.
    pub fn build(items: Vec<(R, Vec<f64>)>, dim: usize, config: LshConfig) -> Result<Self> {
        if config.tables == 0 || config.bits > 64 || dim == 0 {
            return Err(Error::BadConfig(format!(
                "need tables >= 1, bits <= 64 and dim >= 1, got {config:?} with dim {dim}"
            )));
        }
        for (_, e) in &items {
            if e.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: e.len(),
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let planes: Vec<f64> = (0..config.tables * config.bits * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut idx = LshIndex {
            config,
            dim,
            planes,
            items: Vec::new(),
            buckets: vec![HashMap::new(); config.tables],
        };
        for (i, (_, e)) in items.iter().enumerate() {
            for t in 0..config.tables {
                let sig = idx.signature(t, e);
                idx.buckets[t].entry(sig).or_default().push(i);
            }
        }
        idx.items = items;
        Ok(idx)
    }

    pub fn config(&self) -> LshConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[(R, Vec<f64>)] {
        &self.items
    }

    /// Signature of `e` in table `t`: bit `j` is set when `e` lies on the
    /// non-negative side of hyperplane `j`.
    pub fn signature(&self, t: usize, e: &[f64]) -> u64 {
        let (k, d) = (self.config.bits, self.dim);
        let mut sig = 0u64;
        for j in 0..k {
            let p = &self.planes[(t * k + j) * d..(t * k + j + 1) * d];
            if p.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
                sig |= 1 << j;
            }
        }
        sig
    }

    /// Items colliding with `q` in at least one table, ascending.
    pub fn candidates(&self, q: &[f64]) -> Result<Vec<usize>> {
        self.check(q)?;
        let mut out = BTreeSet::new();
        for t in 0..self.config.tables {
            if let Some(b) = self.buckets[t].get(&self.signature(t, q)) {
                out.extend(b.iter().copied());
            }
        }
        Ok(out.into_iter().collect())
    }

    fn check(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        Ok(())
    }

    /// Items with similarity at least `theta`, best first; ties keep
    /// insertion order.
    pub fn query(&self, q: &[f64], theta: f64, mode: QueryMode) -> Result<Vec<(R, f64)>> {
        Ok(self
            .query_indices(q, theta, mode)?
            .into_iter()
            .map(|(i, s)| (self.items[i].0.clone(), s))
            .collect())
    }

    /// Like [`query`](Self::query) but returning item positions.
    pub fn query_indices(&self, q: &[f64], theta: f64, mode: QueryMode) -> Result<Vec<(usize, f64)>> {
        self.check(q)?;
        let pool: Vec<usize> = match mode {
            QueryMode::Approx => self.candidates(q)?,
            QueryMode::Exact => (0..self.items.len()).collect(),
        };
        let mut hits = Vec::new();
        for i in pool {
            let s = similarity(q, &self.items[i].1)?;
            if s >= theta {
                hits.push((i, s));
            }
        }
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(hits)
    }
}

impl<R: Clone + Serialize + DeserializeOwned> LshIndex<R> {
    /// JSON header plus items; hyperplanes are regenerated from the seed on load.
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        let file = IndexFile {
            tables: self.config.tables,
            bits: self.config.bits,
            seed: self.config.seed,
            dim: self.dim,
            items: self
                .items
                .iter()
                .map(|(r, e)| Item {
                    block: r.clone(),
                    embedding: e.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(w, &file)?;
        Ok(())
    }

    pub fn read_json(r: impl Read) -> Result<Self> {
        let f: IndexFile<R> = serde_json::from_reader(r)?;
        let config = LshConfig {
            tables: f.tables,
            bits: f.bits,
            seed: f.seed,
        };
        LshIndex::build(f.items.into_iter().map(|i| (i.block, i.embedding)).collect(), f.dim, config)
    }
}
