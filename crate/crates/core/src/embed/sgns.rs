//! Skip-gram with negative sampling over block-level instruction streams.
//!
//! Each basic block is one sentence. Context windows are clipped at block
//! boundaries, so a corpus of single-instruction blocks yields no training
//! pairs at all.

use std::cell::Cell;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingMatrix;
use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgnsConfig {
    pub dim: usize,
    /// Context radius on each side of the center instruction.
    pub window: usize,
    pub negatives: usize,
    /// Frequent-token down-sampling rate; 0 disables it.
    pub subsample: f64,
    pub min_count: u64,
    pub epochs: usize,
    /// Starting learning rate, decayed linearly to `min_lr`.
    pub lr: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// 1 is the deterministic reference mode. More workers share the weights
    /// without locks and are not reproducible.
    pub workers: usize,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 100,
            window: 2,
            negatives: 5,
            subsample: 1e-5,
            min_count: 0,
            epochs: 100,
            lr: 0.025,
            min_lr: 1e-4,
            seed: 0,
            workers: 1,
        }
    }
}

impl SgnsConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.into()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        if self.negatives == 0 {
            return bad("negatives must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.min_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.subsample >= 0.0) {
            return bad("subsample must be non-negative");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SgnsReport {
    /// (center, context) pairs trained, summed over epochs.
    pub pairs: u64,
    /// Mean negative-sampling loss per pair, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Keep probability of a token under word2vec-style down-sampling.
pub fn keep_probability(count: u64, total: u64, subsample: f64) -> f64 {
    if subsample <= 0.0 || count == 0 {
        return 1.0;
    }
    let threshold = subsample * total as f64;
    let c = count as f64;
    (((c / threshold).sqrt() + 1.0) * threshold / c).min(1.0)
}

pub fn train_sgns(corpus: &Corpus, cfg: &SgnsConfig) -> Result<EmbeddingMatrix> {
    train_sgns_with_report(corpus, cfg).map(|(m, _)| m)
}

pub fn train_sgns_with_report(
    corpus: &Corpus,
    cfg: &SgnsConfig,
) -> Result<(EmbeddingMatrix, SgnsReport)> {
    cfg.validate()?;
    let arch = corpus.arch()?;
    let vocab = Vocabulary::from_corpus(corpus)?.with_min_count(cfg.min_count);
    if vocab.is_empty() {
        return Err(Error::ZeroVocabulary);
    }
    let sentences: Vec<Vec<u32>> = corpus
        .blocks()
        .map(|b| {
            b.instrs
                .iter()
                .filter_map(|i| vocab.index_of(i.as_str()).map(|x| x as u32))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;
    let v = vocab.len();
    let half = 0.5 / dim as f32;
    let mut center: Vec<f32> = (0..v * dim).map(|_| rng.random_range(-half..half)).collect();
    let mut context = vec![0.0f32; v * dim];

    let job = Job {
        cfg,
        sentences: &sentences,
        keep: vocab
            .counts()
            .iter()
            .map(|&c| keep_probability(c, vocab.total(), cfg.subsample))
            .collect(),
        negative_cdf: unigram_cdf(vocab.counts()),
        total_words: (sentences.iter().map(Vec::len).sum::<usize>() * cfg.epochs) as u64,
        processed: AtomicU64::new(0),
    };

    let mut report = SgnsReport::default();
    if cfg.workers == 1 {
        let c = Cell::from_mut(center.as_mut_slice()).as_slice_of_cells();
        let x = Cell::from_mut(context.as_mut_slice()).as_slice_of_cells();
        for _ in 0..cfg.epochs {
            let stats = job.run(0..sentences.len(), c, x, &mut rng);
            report.pairs += stats.pairs;
            report.epoch_loss.push(stats.mean_loss());
        }
    } else {
        let c: Vec<AtomicU32> = center.iter().map(|x| AtomicU32::new(x.to_bits())).collect();
        let x: Vec<AtomicU32> = context.iter().map(|x| AtomicU32::new(x.to_bits())).collect();
        for epoch in 0..cfg.epochs {
            let chunk = sentences.len().div_ceil(cfg.workers).max(1);
            let stats: Vec<EpochStats> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..cfg.workers)
                    .map(|w| {
                        let (job, c, x) = (&job, &c[..], &x[..]);
                        let start = (w * chunk).min(sentences.len());
                        let end = ((w + 1) * chunk).min(sentences.len());
                        let mut wrng = ChaCha8Rng::seed_from_u64(
                            cfg.seed ^ ((epoch as u64) << 32 | w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        );
                        s.spawn(move || job.run(start..end, c, x, &mut wrng))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            let total = stats.into_iter().fold(EpochStats::default(), |a, b| EpochStats {
                pairs: a.pairs + b.pairs,
                loss: a.loss + b.loss,
            });
            report.pairs += total.pairs;
            report.epoch_loss.push(total.mean_loss());
        }
        center = c.into_iter().map(|a| f32::from_bits(a.into_inner())).collect();
    }

    let m = EmbeddingMatrix::new(arch, dim, vocab.tokens().to_vec(), center)?;
    Ok((m, report))
}

fn unigram_cdf(counts: &[u64]) -> Vec<f64> {
    let mut acc = 0.0;
    counts
        .iter()
        .map(|&c| {
            acc += (c as f64).powf(0.75);
            acc
        })
        .collect()
}

/// Shared weight storage: plain cells for the single worker, relaxed atomics
/// for the lock-free parallel mode.
trait Weights {
    fn get(&self, i: usize) -> f32;
    fn set(&self, i: usize, v: f32);
}

impl Weights for [Cell<f32>] {
    #[inline]
    fn get(&self, i: usize) -> f32 {
        self[i].get()
    }
    #[inline]
    fn set(&self, i: usize, v: f32) {
        self[i].set(v)
    }
}

impl Weights for [AtomicU32] {
    #[inline]
    fn get(&self, i: usize) -> f32 {
        f32::from_bits(self[i].load(Ordering::Relaxed))
    }
    #[inline]
    fn set(&self, i: usize, v: f32) {
        self[i].store(v.to_bits(), Ordering::Relaxed)
    }
}

#[derive(Default)]
struct EpochStats {
    pairs: u64,
    loss: f64,
}

impl EpochStats {
    fn mean_loss(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.loss / self.pairs as f64
        }
    }
}

struct Job<'a> {
    cfg: &'a SgnsConfig,
    sentences: &'a [Vec<u32>],
    keep: Vec<f64>,
    negative_cdf: Vec<f64>,
    total_words: u64,
    processed: AtomicU64,
}

impl Job<'_> {
    fn learning_rate(&self) -> f32 {
        let done = self.processed.load(Ordering::Relaxed) as f64;
        let progress = (done / self.total_words.max(1) as f64).min(1.0);
        (self.cfg.lr + (self.cfg.min_lr - self.cfg.lr) * progress) as f32
    }

    fn sample_negative(&self, rng: &mut impl Rng) -> usize {
        let total = *self.negative_cdf.last().expect("vocabulary is non-empty");
        let r = rng.random::<f64>() * total;
        self.negative_cdf
            .partition_point(|&c| c <= r)
            .min(self.negative_cdf.len() - 1)
    }

    fn run<W: Weights + ?Sized>(
        &self,
        range: std::ops::Range<usize>,
        center: &W,
        context: &W,
        rng: &mut impl Rng,
    ) -> EpochStats {
        let dim = self.cfg.dim;
        let mut stats = EpochStats::default();
        let mut grad = vec![0.0f32; dim];
        let mut kept = Vec::new();
        for sentence in &self.sentences[range] {
            let lr = self.learning_rate();
            self.processed.fetch_add(sentence.len() as u64, Ordering::Relaxed);
            kept.clear();
            if self.cfg.subsample > 0.0 {
                kept.extend(
                    sentence
                        .iter()
                        .copied()
                        .filter(|&w| self.keep[w as usize] >= rng.random::<f64>()),
                );
            } else {
                kept.extend_from_slice(sentence);
            }
            for (pos, &word) in kept.iter().enumerate() {
                let lo = pos.saturating_sub(self.cfg.window);
                let hi = (pos + self.cfg.window + 1).min(kept.len());
                for (cpos, &ctx) in kept.iter().enumerate().take(hi).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    let w0 = word as usize * dim;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    stats.pairs += 1;
                    for n in 0..=self.cfg.negatives {
                        let (target, label) = if n == 0 {
                            (ctx as usize, 1.0f32)
                        } else {
                            let t = self.sample_negative(rng);
                            if t == ctx as usize {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let t0 = target * dim;
                        let mut f = 0.0f32;
                        for k in 0..dim {
                            f += center.get(w0 + k) * context.get(t0 + k);
                        }
                        let p = sigmoid(f);
                        let likelihood = if label > 0.5 { p } else { 1.0 - p };
                        stats.loss -= (likelihood as f64).max(1e-12).ln();
                        let g = (label - p) * lr;
                        for k in 0..dim {
                            let cv = context.get(t0 + k);
                            grad[k] += g * cv;
                            context.set(t0 + k, cv + g * center.get(w0 + k));
                        }
                    }
                    for (k, g) in grad.iter().enumerate() {
                        center.set(w0 + k, center.get(w0 + k) + g);
                    }
                }
            }
        }
        stats
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
