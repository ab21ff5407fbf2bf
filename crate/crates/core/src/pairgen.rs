//! Labeled cross-architecture block pairs and block-disjoint splits.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{block_from_record, Arch, BasicBlock, BlockKey, Corpus, Instruction, Normalization, OptLevel};
use crate::error::{Error, Result};

/// Two blocks from different architectures and whether they are equivalent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPair {
    pub a: BasicBlock,
    pub b: BasicBlock,
    pub similar: bool,
}

impl BlockPair {
    pub fn label(&self) -> f64 {
        if self.similar {
            1.0
        } else {
            0.0
        }
    }
}

/// Multiset Jaccard similarity of token n-grams. A stream shorter than `n`
/// counts as a single gram.
///
/// ```
/// use xasm::corpus::{Arch, BasicBlock, Instruction, OptLevel};
/// let block = |s: &str| BasicBlock {
///     id: 0,
///     arch: Arch::X86_64,
///     opt: OptLevel::O2,
///     instrs: s.chars().map(|c| Instruction::new(c.to_string())).collect(),
/// };
/// let s = xasm::pairgen::ngram_similarity(&block("ABCDE"), &block("ABCDX"), 4).unwrap();
/// assert!((s - 1.0 / 3.0).abs() < 1e-12);
/// ```
pub fn ngram_similarity(a: &BasicBlock, b: &BasicBlock, n: usize) -> Result<f64> {
    if a.arch != b.arch {
        return Err(Error::ArchMismatch);
    }
    if a.opt != b.opt {
        return Err(Error::OptMismatch);
    }
    if n == 0 {
        return Err(Error::BadConfig("n-gram length must be positive".into()));
    }
    Ok(ngram_jaccard(&a.instrs, &b.instrs, n))
}

fn grams(s: &[Instruction], n: usize) -> HashMap<&[Instruction], usize> {
    let mut m = HashMap::new();
    if s.len() < n {
        *m.entry(s).or_insert(0) += 1;
    } else {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn ngram_jaccard(a: &[Instruction], b: &[Instruction], n: usize) -> f64 {
    let ga = grams(a, n);
    let gb = grams(b, n);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (g, &ca) in &ga {
        let cb = gb.get(g).copied().unwrap_or(0);
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    union += gb.iter().filter(|(g, _)| !ga.contains_key(*g)).map(|(_, c)| c).sum::<usize>();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One pair per ID shared between `cx` and `cy`, deduplicated by text.
/// Blocks of the same architecture are never paired.
pub fn gen_similar_pairs(cx: &Corpus, cy: &Corpus) -> Vec<BlockPair> {
    let mut by_id: HashMap<u64, Vec<&BasicBlock>> = HashMap::new();
    for b in cy.blocks() {
        by_id.entry(b.id).or_default().push(b);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for a in cx.blocks() {
        for &b in by_id.get(&a.id).map(Vec::as_slice).unwrap_or(&[]) {
            if a.arch != b.arch && seen.insert((a.text(), b.text())) {
                out.push(BlockPair {
                    a: a.clone(),
                    b: b.clone(),
                    similar: true,
                });
            }
        }
    }
    out
}

/// Deterministic assignment of provenance IDs to train/val/test.
///
/// Blocks sharing an ID always land in the same group, so similar pairs
/// never straddle a split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(fractions: [f64; 3], seed: u64) -> Result<Self> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f) || !f.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions(fractions));
        }
        Ok(SplitPlan { fractions, seed })
    }

    /// 0 = train, 1 = val, 2 = test.
    pub fn group_of(&self, id: u64) -> usize {
        let u = (splitmix64(self.seed ^ splitmix64(id)) >> 11) as f64 / (1u64 << 53) as f64;
        let mut acc = 0.0;
        for (g, f) in self.fractions.iter().enumerate() {
            acc += f;
            if u < acc {
                return g;
            }
        }
        // Rounding left u above the last cumulative sum: use the last nonempty group.
        self.fractions.iter().rposition(|&f| f > 0.0).unwrap_or(0)
    }

    pub fn group_of_key(&self, key: &BlockKey) -> usize {
        self.group_of(key.id)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarConfig {
    /// n-gram length.
    pub n: usize,
    /// Candidates must score strictly below this against the anchor.
    pub theta: f64,
    pub seed: u64,
    /// Target number of pairs; `None` tries one pair per anchor.
    pub count: Option<usize>,
    /// Random draws allowed per requested pair before giving up.
    pub attempts_per_pair: usize,
    /// When set, both endpoints of every pair fall in the same split group.
    pub split: Option<SplitPlan>,
}

impl Default for DissimilarConfig {
    fn default() -> Self {
        DissimilarConfig {
            n: 4,
            theta: 0.5,
            seed: 0,
            count: None,
            attempts_per_pair: 50,
            split: None,
        }
    }
}

/// Pairs `<B1^Y, B2^X, 0>` where `B1^X` shares its ID with `B1^Y` and scores
/// below `theta` against `B2^X` within architecture X.
pub fn gen_dissimilar_pairs(cx: &Corpus, cy: &Corpus, cfg: &DissimilarConfig) -> Result<Vec<BlockPair>> {
    if cfg.n == 0 {
        return Err(Error::BadConfig("n-gram length must be positive".into()));
    }
    let xs: Vec<&BasicBlock> = cx.blocks().collect();
    let mut ys_by_id: HashMap<u64, Vec<&BasicBlock>> = HashMap::new();
    for b in cy.blocks() {
        ys_by_id.entry(b.id).or_default().push(b);
    }
    let anchors: Vec<(&BasicBlock, &BasicBlock)> = xs
        .iter()
        .flat_map(|&x| {
            ys_by_id
                .get(&x.id)
                .into_iter()
                .flatten()
                .filter(move |y| y.arch != x.arch)
                .map(move |&y| (x, y))
        })
        .collect();
    if anchors.is_empty() || xs.len() < 2 {
        return Ok(Vec::new());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut try_anchor = |anchor: (&BasicBlock, &BasicBlock), rng: &mut ChaCha8Rng, out: &mut Vec<BlockPair>| {
        let (b1x, b1y) = anchor;
        let b2x = xs[rng.random_range(0..xs.len())];
        if b2x.id == b1x.id || b2x.opt != b1x.opt || b2x.arch != b1x.arch {
            return false;
        }
        if let Some(plan) = &cfg.split {
            if plan.group_of(b1y.id) != plan.group_of(b2x.id) {
                return false;
            }
        }
        if ngram_jaccard(&b1x.instrs, &b2x.instrs, cfg.n) >= cfg.theta {
            return false;
        }
        if !seen.insert((b1y.text(), b2x.text())) {
            return false;
        }
        out.push(BlockPair {
            a: b1y.clone(),
            b: b2x.clone(),
            similar: false,
        });
        true
    };

    match cfg.count {
        Some(count) => {
            let budget = count.saturating_mul(cfg.attempts_per_pair.max(1));
            let mut tries = 0;
            while out.len() < count && tries < budget {
                let anchor = anchors[rng.random_range(0..anchors.len())];
                try_anchor(anchor, &mut rng, &mut out);
                tries += 1;
            }
        }
        None => {
            let mut order = anchors.clone();
            order.shuffle(&mut rng);
            for anchor in order {
                for _ in 0..cfg.attempts_per_pair.max(1) {
                    if try_anchor(anchor, &mut rng, &mut out) {
                        break;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub train: Vec<BlockPair>,
    pub val: Vec<BlockPair>,
    pub test: Vec<BlockPair>,
    pub fractions: [f64; 3],
    /// Pairs whose endpoints fell in different groups.
    pub dropped: usize,
}

impl SplitSet {
    pub fn parts(&self) -> [&[BlockPair]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Partition blocks into three groups by provenance ID, then keep each pair
/// in the group holding both of its blocks.
pub fn split_dataset(pairs: Vec<BlockPair>, fractions: [f64; 3], seed: u64) -> Result<SplitSet> {
    let plan = SplitPlan::new(fractions, seed)?;
    let mut parts: [Vec<BlockPair>; 3] = Default::default();
    let mut dropped = 0;
    for p in pairs {
        let ga = plan.group_of_key(&p.a.key());
        if ga == plan.group_of_key(&p.b.key()) {
            parts[ga].push(p);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::info!("split dropped {dropped} pairs straddling groups");
    }
    let [train, val, test] = parts;
    Ok(SplitSet {
        train,
        val,
        test,
        fractions,
        dropped,
    })
}

#[derive(Serialize, Deserialize)]
struct TaggedBlock {
    id: u64,
    arch: Arch,
    opt: OptLevel,
    instrs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    a: TaggedBlock,
    b: TaggedBlock,
    label: u8,
}

fn tag(b: &BasicBlock) -> TaggedBlock {
    TaggedBlock {
        id: b.id,
        arch: b.arch,
        opt: b.opt,
        instrs: b.instrs.iter().map(|i| i.as_str().to_owned()).collect(),
    }
}

pub fn write_pairs(pairs: &[BlockPair], mut w: impl Write) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            a: tag(&p.a),
            b: tag(&p.b),
            label: p.similar as u8,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs(reader: impl BufRead) -> Result<Vec<BlockPair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedRecord { line: i + 1, reason };
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let block = |t: &TaggedBlock| {
            let r = crate::corpus::BlockRecord {
                id: t.id,
                instrs: t.instrs.clone(),
            };
            block_from_record(&r, t.arch, t.opt, Normalization::Normalized).map_err(bad)
        };
        let similar = match rec.label {
            0 => false,
            1 => true,
            l => return Err(bad(format!("label {l} is not 0 or 1"))),
        };
        let (a, b) = (block(&rec.a)?, block(&rec.b)?);
        if a.arch == b.arch {
            return Err(bad("both blocks have the same architecture".into()));
        }
        out.push(BlockPair { a, b, similar });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Function;

    fn block(id: u64, arch: Arch, s: &str) -> BasicBlock {
        BasicBlock {
            id,
            arch,
            opt: OptLevel::O2,
            instrs: s.chars().map(|c| Instruction::new(c.to_string())).collect(),
        }
    }

    fn corpus(arch: Arch, blocks: Vec<BasicBlock>) -> Corpus {
        Corpus {
            functions: vec![Function {
                name: "f".into(),
                arch,
                opt: OptLevel::O2,
                blocks,
            }],
        }
    }

    const X: Arch = Arch::X86_64;
    const A: Arch = Arch::Arm;

    #[test]
    fn ngram_examples() {
        let s = |a, b, n| ngram_similarity(&block(0, X, a), &block(1, X, b), n).unwrap();
        assert_eq!(s("ABCDE", "ABCDE", 4), 1.0);
        assert_eq!(s("ABCDE", "VWXYZ", 4), 0.0);
        assert!((s("ABCDE", "ABCDX", 4) - 1.0 / 3.0).abs() < 1e-15);
        // Short streams are a single gram.
        assert_eq!(s("AB", "AB", 4), 1.0);
        assert_eq!(s("AB", "ABC", 4), 0.0);
        // Multiset: AAAAA has two AAAA grams; AAAA has one.
        assert_eq!(s("AAAAA", "AAAA", 4), 0.5);
    }

    #[test]
    fn ngram_rejects_mixed_tags() {
        assert!(matches!(ngram_similarity(&block(0, X, "AB"), &block(0, A, "AB"), 4), Err(Error::ArchMismatch)));
        let mut o3 = block(0, X, "AB");
        o3.opt = OptLevel::O3;
        assert!(matches!(ngram_similarity(&block(0, X, "AB"), &o3, 4), Err(Error::OptMismatch)));
    }

    #[test]
    fn similar_pairs() {
        let cx = corpus(X, vec![block(1, X, "AB"), block(2, X, "CD")]);
        let cy = corpus(A, vec![block(2, A, "PQ"), block(3, A, "RS")]);
        let p = gen_similar_pairs(&cx, &cy);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].a.id, p[0].b.id, p[0].similar), (2, 2, true));
        let cy = corpus(A, vec![block(7, A, "PQ")]);
        assert!(gen_similar_pairs(&cx, &cy).is_empty());
    }

    #[test]
    fn similar_pairs_dedup_text() {
        let cx = corpus(X, vec![block(1, X, "AB"), block(2, X, "AB")]);
        let cy = corpus(A, vec![block(1, A, "PQ"), block(2, A, "PQ")]);
        assert_eq!(gen_similar_pairs(&cx, &cy).len(), 1);
    }

    #[test]
    fn dissimilar_empty_when_everything_similar() {
        let cx = corpus(X, (0..6).map(|i| block(i, X, "ABCDE")).collect());
        let cy = corpus(A, (0..6).map(|i| block(i, A, "PQRST")).collect());
        let cfg = DissimilarConfig { count: Some(10), ..Default::default() };
        assert!(gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap().is_empty());
    }

    fn fixture(n: u64, seed: u64) -> (Corpus, Corpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut word = |len: usize| -> String { (0..len).map(|_| (b'A' + rng.random_range(0..6u8)) as char).collect() };
        let xs: Vec<BasicBlock> = (0..n).map(|i| block(i, X, &word(3 + i as usize % 6))).collect();
        let ys: Vec<BasicBlock> = xs.iter().map(|b| block(b.id, A, &b.text().replace("; ", "").chars().map(|c| (c as u8 + 10) as char).collect::<String>())).collect();
        (corpus(X, xs), corpus(A, ys))
    }

    #[test]
    fn dissimilar_postcondition_replays() {
        let (cx, cy) = fixture(60, 1);
        let cfg = DissimilarConfig { seed: 9, ..Default::default() };
        let pairs = gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap();
        assert!(!pairs.is_empty());
        for p in &pairs {
            assert!(!p.similar);
            assert_eq!((p.a.arch, p.b.arch), (A, X));
            let b1x = cx.blocks().find(|b| b.id == p.a.id).unwrap();
            assert!(ngram_similarity(b1x, &p.b, 4).unwrap() < 0.5);
        }
        assert_eq!(pairs, gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap());
    }

    #[test]
    fn balanced_mode_matches_similar_count() {
        let (cx, cy) = fixture(80, 2);
        let similar = gen_similar_pairs(&cx, &cy);
        let cfg = DissimilarConfig { count: Some(similar.len()), seed: 3, ..Default::default() };
        let dis = gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap();
        assert!(dis.len().abs_diff(similar.len()) <= 1, "{} vs {}", dis.len(), similar.len());
    }

    #[test]
    fn split_examples() {
        let (cx, cy) = fixture(50, 4);
        let pairs = gen_similar_pairs(&cx, &cy);
        let s = split_dataset(pairs.clone(), [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(s.dropped, 0);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), pairs.len());

        let one = vec![pairs[0].clone()];
        let s = split_dataset(one, [1.0, 0.0, 0.0], 5).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 0, 0));

        assert!(matches!(split_dataset(vec![], [0.5, 0.1, 0.1], 0), Err(Error::BadFractions(_))));
        assert!(matches!(split_dataset(vec![], [1.2, -0.1, -0.1], 0), Err(Error::BadFractions(_))));
    }

    fn assert_disjoint(s: &SplitSet) {
        let keys: Vec<HashSet<BlockKey>> = s
            .parts()
            .iter()
            .map(|ps| ps.iter().flat_map(|p| [p.a.key(), p.b.key()]).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(keys[i].is_disjoint(&keys[j]), "groups {i} and {j} share blocks");
            }
        }
    }

    #[test]
    fn hundred_pair_fixture_is_disjoint() {
        let (cx, cy) = fixture(70, 5);
        let mut pairs = gen_similar_pairs(&cx, &cy);
        let cfg = DissimilarConfig { count: Some(100 - pairs.len()), seed: 1, ..Default::default() };
        pairs.extend(gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap());
        assert_eq!(pairs.len(), 100);
        let s = split_dataset(pairs, [0.8, 0.1, 0.1], 11).unwrap();
        assert_disjoint(&s);
    }

    #[test]
    fn split_aware_generation_drops_nothing() {
        let (cx, cy) = fixture(200, 6);
        let plan = SplitPlan::new([0.8, 0.1, 0.1], 2).unwrap();
        let similar = gen_similar_pairs(&cx, &cy);
        let cfg = DissimilarConfig { count: Some(similar.len()), split: Some(plan), ..Default::default() };
        let mut pairs = similar.clone();
        pairs.extend(gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap());
        let s = split_dataset(pairs, plan.fractions, plan.seed).unwrap();
        assert_eq!(s.dropped, 0);
        assert_disjoint(&s);
        let ratio = |ps: &[BlockPair]| ps.iter().filter(|p| p.similar).count() as f64 / ps.len() as f64;
        assert!((ratio(&s.train) - 0.5).abs() <= 0.05);
    }

    #[test]
    fn pair_file_round_trip() {
        let (cx, cy) = fixture(10, 7);
        let mut pairs = gen_similar_pairs(&cx, &cy);
        pairs.extend(gen_dissimilar_pairs(&cx, &cy, &DissimilarConfig::default()).unwrap());
        let mut buf = Vec::new();
        write_pairs(&pairs, &mut buf).unwrap();
        let back = read_pairs(buf.as_slice()).unwrap();
        assert_eq!(back, pairs);
        let bad = br#"{"a":{"id":1,"arch":"x86_64","opt":"O1","instrs":["NOP"]},"b":{"id":1,"arch":"arm","opt":"O1","instrs":["NOP"]},"label":2}"#;
        assert!(matches!(read_pairs(&bad[..]), Err(Error::MalformedRecord { line: 1, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stream() -> impl Strategy<Value = String> {
            "[A-D]{1,9}"
        }

        proptest! {
            #[test]
            fn ngram_symmetric_and_bounded(a in stream(), b in stream(), n in 1usize..5) {
                let (ba, bb) = (block(0, X, &a), block(1, X, &b));
                let s1 = ngram_similarity(&ba, &bb, n).unwrap();
                let s2 = ngram_similarity(&bb, &ba, n).unwrap();
                prop_assert_eq!(s1, s2);
                prop_assert!((0.0..=1.0).contains(&s1));
                let same_multiset = grams(&ba.instrs, n) == grams(&bb.instrs, n);
                prop_assert_eq!(s1 == 1.0, same_multiset);
            }

            #[test]
            fn split_disjoint_for_all_seeds(corpus_seed in any::<u64>(), split_seed in any::<u64>(), n in 5u64..60) {
                let (cx, cy) = fixture(n, corpus_seed);
                let mut pairs = gen_similar_pairs(&cx, &cy);
                let cfg = DissimilarConfig { seed: corpus_seed, ..Default::default() };
                pairs.extend(gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap());
                let total = pairs.len();
                let s = split_dataset(pairs, [0.8, 0.1, 0.1], split_seed).unwrap();
                assert_disjoint(&s);
                prop_assert_eq!(s.train.len() + s.val.len() + s.test.len() + s.dropped, total);
            }

            #[test]
            fn dissimilar_witness_below_theta(seed in any::<u64>(), theta in 0.1f64..0.9) {
                let (cx, cy) = fixture(30, seed);
                let cfg = DissimilarConfig { seed, theta, ..Default::default() };
                for p in gen_dissimilar_pairs(&cx, &cy, &cfg).unwrap() {
                    let b1x = cx.blocks().find(|b| b.id == p.a.id).unwrap();
                    prop_assert!(ngram_similarity(b1x, &p.b, 4).unwrap() < theta);
                }
            }
        }
    }
}
