use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xasm::corpus::{oov_rate, parse_corpus, vocab_growth, Arch, Cfg, Corpus, Normalization, OptLevel, Vocabulary};
use xasm::embed::{train_sgns_with_report, EmbeddingMatrix, SgnsConfig};
use xasm::encoder::{
    gradient_check, init_params, read_params, similarity, train, write_params, BlockEncoder, CellUpdate, EncoderConfig,
    PairInput, Sequence,
};
use xasm::eval::{roc_auc, size_partition_eval, write_curve_csv, BucketAuc, BucketBounds, SizedScore};
use xasm::lsh::{LshConfig, LshIndex, QueryMode};
use xasm::matcher::{component_score, MatchOptions};
use xasm::pairgen::{gen_dissimilar_pairs, gen_similar_pairs, read_pairs, split_dataset, write_pairs, DissimilarConfig, SplitPlan};
use xasm::synth::{Generator, SynthConfig};

use crate::manifest::{beside, RunManifest};
use crate::{Cli, Command, SynthCommand, UsageError};

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let flags = serde_json::to_value(&cli.command)?;
    let name = argv
        .iter()
        .skip(1)
        .find(|a| !a.starts_with('-') && a.parse::<f64>().is_err())
        .cloned()
        .unwrap_or_default();
    let mut m = RunManifest::new(&name, argv, flags, cli.seed, cli.jobs);
    let (seed, jobs) = (cli.seed, cli.jobs);
    match &cli.command {
        Command::Normalize(a) => {
            m.input(&a.input)?;
            m.stage("normalize");
            let raw = Corpus::from_reader(open(&a.input)?, Normalization::Raw)?;
            let c = select(raw, a.arch, a.opt).normalized()?;
            write_with(&a.output, |w| Ok(c.write_jsonl(w)?))?;
            m.output(&a.output);
            m.write(&beside(&a.output))?;
        }
        Command::Vocab(a) => {
            m.input(&a.input)?;
            let raw = select(Corpus::from_reader(open(&a.input)?, Normalization::Raw)?, a.arch, a.opt);
            let (train_raw, held_raw) = match &a.heldout {
                Some(p) => {
                    m.input(p)?;
                    (raw, select(Corpus::from_reader(open(p)?, Normalization::Raw)?, a.arch, a.opt))
                }
                None => halves(raw),
            };
            m.stage("vocab");
            let report = VocabReport {
                raw: vocab_side(&train_raw, &held_raw, a.parts)?,
                normalized: vocab_side(&train_raw.normalized()?, &held_raw.normalized()?, a.parts)?,
            };
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match &a.output {
                Some(p) => {
                    fs::write(p, text)?;
                    m.output(p);
                    m.write(&beside(p))?;
                }
                None => print!("{text}"),
            }
        }
        Command::TrainEmbed(a) => {
            m.input(&a.input)?;
            let c = select(parse_corpus(&a.input)?, a.arch, a.opt);
            let cfg = SgnsConfig {
                dim: a.dims_instr,
                window: a.window,
                negatives: a.negatives,
                subsample: a.subsample,
                min_count: a.min_count,
                epochs: a.epochs,
                lr: a.lr,
                seed,
                workers: jobs,
                ..Default::default()
            };
            m.stage("sgns");
            let (emb, report) = train_sgns_with_report(&c, &cfg)?;
            log::info!("{} tokens, final loss {:?}", emb.vocab_len(), report.epoch_loss.last());
            write_with(&a.output, |w| Ok(emb.write_store(w)?))?;
            m.output(&a.output);
            if let Some(t) = &a.tsv {
                write_with(t, |w| Ok(emb.write_tsv(w)?))?;
                m.output(t);
            }
            m.write(&beside(&a.output))?;
        }
        Command::Pairs(a) => {
            m.input(&a.x86)?;
            m.input(&a.arm)?;
            let cx = select(parse_corpus(&a.x86)?, Some(Arch::X86_64), a.opt);
            let ca = select(parse_corpus(&a.arm)?, Some(Arch::Arm), a.opt);
            let plan = SplitPlan::new(a.split, seed)?;
            m.stage("similar");
            let mut pairs = gen_similar_pairs(&cx, &ca);
            if let Some(n) = a.similar {
                pairs.truncate(n);
            }
            m.stage("dissimilar");
            let cfg = DissimilarConfig {
                n: a.ngram,
                theta: a.theta_dissim,
                seed,
                count: Some(a.dissimilar.unwrap_or(pairs.len())),
                attempts_per_pair: a.attempts,
                split: Some(plan),
            };
            let dissimilar = gen_dissimilar_pairs(&cx, &ca, &cfg)?;
            log::info!("{} similar, {} dissimilar", pairs.len(), dissimilar.len());
            pairs.extend(dissimilar);
            let split = split_dataset(pairs, plan.fractions, plan.seed)?;
            fs::create_dir_all(&a.out_dir)?;
            for (name, part) in ["train", "val", "test"].iter().zip(split.parts()) {
                let p = a.out_dir.join(format!("{name}.jsonl"));
                write_with(&p, |w| Ok(write_pairs(part, w)?))?;
                m.output(&p);
            }
            m.write(&a.out_dir.join("manifest.json"))?;
        }
        Command::TrainEncoder(a) => {
            for p in [&a.train, &a.val, &a.emb_x86, &a.emb_arm] {
                m.input(p)?;
            }
            let x86 = load_embeddings(&a.emb_x86, Arch::X86_64)?;
            let arm = load_embeddings(&a.emb_arm, Arch::Arm)?;
            let cfg = EncoderConfig {
                layers: a.layers,
                input_dim: x86.dim(),
                hidden_dim: a.dims_block,
                cell: a.cell,
                update: if a.candidate_only { CellUpdate::CandidateOnly } else { CellUpdate::Standard },
                lr: a.lr,
                epochs: a.epochs,
                patience: a.patience,
                seed,
            };
            let enc = BlockEncoder::new(init_params(&cfg)?, x86, arm)?;
            let tr = enc.pair_inputs(&read_pairs(open(&a.train)?)?)?;
            let va = enc.pair_inputs(&read_pairs(open(&a.val)?)?)?;
            m.stage("train");
            let out = train(&tr, &va, &cfg)?;
            write_with(&a.output, |w| Ok(write_params(&out.best, w)?))?;
            m.output(&a.output);
            let hist = a.history.clone().unwrap_or_else(|| suffixed(&a.output, ".history.csv"));
            write_with(&hist, |w| {
                writeln!(w, "epoch,train_loss,val_loss,val_auc")?;
                for h in &out.history {
                    writeln!(w, "{},{},{},{}", h.epoch, h.train_loss, h.val_loss, h.val_auc)?;
                }
                Ok(())
            })?;
            m.output(&hist);
            log::info!("best epoch {}", out.best_epoch);
            m.write(&beside(&a.output))?;
        }
        Command::Embed(a) => {
            m.input(&a.input)?;
            let enc = load_model(&a.model, &mut m)?;
            let c = parse_corpus(&a.input)?;
            m.stage("embed");
            let refs: Vec<(BlockRef, &xasm::corpus::BasicBlock)> = c
                .functions
                .iter()
                .flat_map(|f| f.blocks.iter().map(move |b| (BlockRef::new(&f.name, b), b)))
                .collect();
            let blocks: Vec<_> = refs.iter().map(|(_, b)| *b).collect();
            let embs = enc.embed_all(&blocks)?;
            write_with(&a.output, |w| {
                for ((r, _), e) in refs.iter().zip(embs) {
                    let line = EmbeddingLine { block: r.clone(), vector: e.vector };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n")?;
                }
                Ok(())
            })?;
            m.output(&a.output);
            m.write(&beside(&a.output))?;
        }
        Command::Index(a) => {
            m.input(&a.input)?;
            let mut items = Vec::new();
            for (i, line) in open(&a.input)?.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: EmbeddingLine = serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?;
                items.push((e.block, e.vector));
            }
            let Some(dim) = items.first().map(|(_, v)| v.len()) else {
                bail!("{}: no embeddings", a.input.display());
            };
            m.stage("index");
            let cfg = LshConfig { tables: a.tables, bits: a.bits, seed };
            let idx = LshIndex::build(items, dim, cfg)?;
            write_with(&a.output, |w| Ok(idx.write_json(w)?))?;
            m.output(&a.output);
            m.write(&beside(&a.output))?;
        }
        Command::QueryBlock(a) => {
            m.input(&a.index)?;
            m.input(&a.query)?;
            let enc = load_model(&a.model, &mut m)?;
            let idx: LshIndex<BlockRef> = LshIndex::read_json(open(&a.index)?)?;
            let q = parse_corpus(&a.query)?;
            let mode = if a.exact_scan { QueryMode::Exact } else { QueryMode::Approx };
            m.stage("query");
            write_with(&a.output, |w| {
                for f in &q.functions {
                    for b in &f.blocks {
                        let e = enc.embed(b)?;
                        let mut hits = idx.query(&e.vector, a.theta_sebb, mode)?;
                        if let Some(k) = a.top {
                            hits.truncate(k);
                        }
                        let line = QueryLine {
                            query: BlockRef::new(&f.name, b),
                            matches: hits.into_iter().map(|(block, similarity)| Match { block, similarity }).collect(),
                        };
                        serde_json::to_writer(&mut *w, &line)?;
                        w.write_all(b"\n")?;
                    }
                }
                Ok(())
            })?;
            m.output(&a.output);
            m.write(&beside(&a.output))?;
        }
        Command::QueryComponent(a) => {
            m.input(&a.query)?;
            m.input(&a.target)?;
            let enc = load_model(&a.model, &mut m)?;
            let q = Cfg::from_json(&fs::read_to_string(&a.query)?, Normalization::Normalized)?;
            let t = Cfg::from_json(&fs::read_to_string(&a.target)?, Normalization::Normalized)?;
            if !(0.0..=1.0).contains(&a.coverage) || a.coverage == 0.0 {
                return Err(UsageError("--coverage must be in (0, 1]".into()).into());
            }
            m.stage("index");
            let t_nodes: Vec<_> = t.nodes().iter().collect();
            let items: Vec<(usize, Vec<f64>)> =
                enc.embed_all(&t_nodes)?.into_iter().map(|e| e.vector).enumerate().collect();
            let store = LshIndex::build(items, enc.params.shape.hidden_dim, LshConfig { tables: a.tables, bits: a.bits, seed })?;
            m.stage("match");
            let opts = MatchOptions {
                theta: a.theta_sebb,
                coverage: a.coverage,
                mode: if a.exact_scan { QueryMode::Exact } else { QueryMode::Approx },
                max_blocks_tried: a.max_blocks_tried,
                node_visit_limit: a.node_visit_limit,
                max_expansions: (a.max_expansions > 0).then_some(a.max_expansions),
                parallel: jobs > 1,
            };
            let report = component_score(&q, &t, &store, &enc, &opts)?;
            println!("score {}", report.score);
            write_with(&a.output, |w| {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                Ok(w.write_all(b"\n")?)
            })?;
            m.output(&a.output);
            m.write(&beside(&a.output))?;
        }
        Command::Eval(a) => {
            let bounds = BucketBounds { small_max: a.small_max, large_min: a.large_min };
            let items = match (&a.scores, &a.pairs) {
                (Some(s), _) => {
                    m.input(s)?;
                    read_scores(s)?
                }
                (None, Some(p)) => {
                    m.input(p)?;
                    let model = crate::ModelArgs {
                        params: a.params.clone().expect("required by clap"),
                        emb_x86: a.emb_x86.clone().expect("required by clap"),
                        emb_arm: a.emb_arm.clone().expect("required by clap"),
                    };
                    let enc = load_model(&model, &mut m)?;
                    let pairs = read_pairs(open(p)?)?;
                    m.stage("score");
                    pairs
                        .iter()
                        .map(|p| {
                            let (ea, eb) = (enc.embed(&p.a)?, enc.embed(&p.b)?);
                            Ok(SizedScore {
                                score: similarity(&ea.vector, &eb.vector)?,
                                label: p.similar,
                                len_a: p.a.len(),
                                len_b: p.b.len(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            m.stage("roc");
            let plain: Vec<(f64, bool)> = items.iter().map(|s| (s.score, s.label)).collect();
            let roc = roc_auc(&plain)?;
            let buckets = if items.iter().any(|s| s.len_a > 0) { size_partition_eval(&items, bounds) } else { Vec::new() };
            println!("auc {}", roc.auc);
            for b in &buckets {
                println!("auc[{:?}] {} ({} pairs)", b.bucket, b.auc, b.pairs);
            }
            if let Some(c) = &a.curve {
                write_with(c, |w| Ok(write_curve_csv(&roc.curve, w)?))?;
                m.output(c);
            }
            if let Some(o) = &a.output {
                let report = EvalReport { auc: roc.auc, pairs: items.len(), buckets };
                fs::write(o, serde_json::to_string_pretty(&report)? + "\n")?;
                m.output(o);
            }
            if let Some(first) = m.outputs.first().cloned() {
                m.write(&beside(&first))?;
            }
        }
        Command::Gradcheck(a) => {
            let cfg = EncoderConfig {
                layers: a.layers,
                input_dim: a.dims_instr,
                hidden_dim: a.dims_block,
                cell: a.cell,
                update: if a.candidate_only { CellUpdate::CandidateOnly } else { CellUpdate::Standard },
                seed,
                ..Default::default()
            };
            if a.max_len == 0 || !(a.eps > 0.0) {
                return Err(UsageError("--max-len and --eps must be positive".into()).into());
            }
            let params = init_params(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = |rng: &mut ChaCha8Rng| {
                let n = rng.random_range(1..=a.max_len);
                Sequence::new(a.dims_instr, (0..n * a.dims_instr).map(|_| rng.random_range(-1.0..1.0)).collect())
            };
            let mut worst = 0.0f64;
            for i in 0..a.pairs {
                let pair = PairInput {
                    a: seq(&mut rng)?,
                    arch_a: Arch::X86_64,
                    b: seq(&mut rng)?,
                    arch_b: Arch::Arm,
                    label: (i % 2) as f64,
                };
                worst = worst.max(gradient_check(&params, &pair, a.eps)?);
            }
            println!("max_rel_error {worst:e}");
            if !(worst < a.tolerance) {
                bail!("gradient check failed: {worst:e} >= {:e}", a.tolerance);
            }
        }
        Command::Synth(SynthCommand::Corpus(a)) => {
            let mut g = Generator::new(seed, SynthConfig::default());
            m.stage("generate");
            let [x86, arm] = g.corpus(a.functions, a.blocks, a.opt);
            fs::create_dir_all(&a.out_dir)?;
            for (recs, arch) in [(x86, Arch::X86_64), (arm, Arch::Arm)] {
                let p = a.out_dir.join(format!("{arch}.jsonl"));
                write_with(&p, |w| {
                    for r in &recs {
                        serde_json::to_writer(&mut *w, r)?;
                        w.write_all(b"\n")?;
                    }
                    Ok(())
                })?;
                m.output(&p);
            }
            m.write(&a.out_dir.join("manifest.json"))?;
        }
        Command::Synth(SynthCommand::Plant(a)) => {
            if a.component == 0 || a.host < a.component + 3 {
                return Err(UsageError("--component must be positive and --host at least --component + 3".into()).into());
            }
            let mut g = Generator::new(seed, SynthConfig::default());
            m.stage("generate");
            let comp = g.program(a.component);
            let host = g.program(a.host - a.component - 1);
            let junk = g.block();
            let (planted, entry) = g.plant(&host, &comp, junk);
            let unrelated: Vec<_> = (0..a.unrelated).map(|_| g.program(a.host)).collect();
            fs::create_dir_all(&a.out_dir)?;
            let mut cfgs = vec![
                ("query".to_string(), g.render_cfg_scrambled(&comp, a.query_arch, a.opt)),
                ("target".to_string(), g.render_cfg(&planted, a.target_arch, a.opt)),
            ];
            for (i, u) in unrelated.iter().enumerate() {
                cfgs.push((format!("unrelated-{i}"), g.render_cfg(u, a.target_arch, a.opt)));
            }
            for (name, rec) in &cfgs {
                let p = a.out_dir.join(format!("{name}.json"));
                write_with(&p, |w| {
                    serde_json::to_writer(&mut *w, rec)?;
                    Ok(w.write_all(b"\n")?)
                })?;
                m.output(&p);
            }
            let truth = a.out_dir.join("truth.json");
            fs::write(&truth, format!("{{\"component_entry\":{entry}}}\n"))?;
            m.output(&truth);
            m.write(&a.out_dir.join("manifest.json"))?;
        }
    }
    Ok(())
}

/// Identifies a block in embedding, index and query files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockRef {
    #[serde(rename = "fn")]
    function: String,
    id: u64,
    arch: Arch,
    opt: OptLevel,
}

impl BlockRef {
    fn new(function: &str, b: &xasm::corpus::BasicBlock) -> Self {
        BlockRef {
            function: function.to_string(),
            id: b.id,
            arch: b.arch,
            opt: b.opt,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    #[serde(flatten)]
    block: BlockRef,
    vector: Vec<f64>,
}

#[derive(Serialize)]
struct Match {
    #[serde(flatten)]
    block: BlockRef,
    similarity: f64,
}

#[derive(Serialize)]
struct QueryLine {
    query: BlockRef,
    matches: Vec<Match>,
}

#[derive(Serialize)]
struct VocabSide {
    vocab: usize,
    heldout_oov_rate: f64,
    /// (fraction of the corpus, distinct tokens)
    growth: Vec<(f64, usize)>,
}

#[derive(Serialize)]
struct VocabReport {
    raw: VocabSide,
    normalized: VocabSide,
}

#[derive(Serialize)]
struct EvalReport {
    auc: f64,
    pairs: usize,
    buckets: Vec<BucketAuc>,
}

fn vocab_side(train: &Corpus, heldout: &Corpus, parts: usize) -> Result<VocabSide> {
    let v = Vocabulary::from_corpus(train)?;
    Ok(VocabSide {
        vocab: v.len(),
        heldout_oov_rate: oov_rate(&v, heldout)?,
        growth: vocab_growth(train, parts)?,
    })
}

fn halves(c: Corpus) -> (Corpus, Corpus) {
    let mut functions = c.functions;
    let rest = functions.split_off(functions.len() / 2);
    (Corpus { functions }, Corpus { functions: rest })
}

fn select(c: Corpus, arch: Option<Arch>, opt: Option<OptLevel>) -> Corpus {
    Corpus {
        functions: c
            .functions
            .into_iter()
            .filter(|f| arch.is_none_or(|a| f.arch == a) && opt.is_none_or(|o| f.opt == o))
            .collect(),
    }
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
}

fn write_with(p: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_embeddings(p: &Path, arch: Arch) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::read_store(open(p)?, arch).with_context(|| format!("reading {}", p.display()))
}

fn load_model(a: &crate::ModelArgs, m: &mut RunManifest) -> Result<BlockEncoder> {
    for p in [&a.params, &a.emb_x86, &a.emb_arm] {
        m.input(p)?;
    }
    let params = read_params(open(&a.params)?).with_context(|| format!("reading {}", a.params.display()))?;
    Ok(BlockEncoder::new(params, load_embeddings(&a.emb_x86, Arch::X86_64)?, load_embeddings(&a.emb_arm, Arch::Arm)?)?)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize) -> Option<T> {
    rec.get(k)?.parse().ok()
}

/// `score,label[,len_a,len_b]` rows; a leading header row is skipped.
fn read_scores(p: &Path) -> Result<Vec<SizedScore>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open(p)?);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let bad = || anyhow::anyhow!("{}:{}: expected score,label[,len_a,len_b]", p.display(), i + 1);
        let label = match rec.get(1) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            _ => return Err(bad()),
        };
        let (len_a, len_b) = match rec.len() {
            2 => (0, 0),
            4 => (field(&rec, 2).ok_or_else(bad)?, field(&rec, 3).ok_or_else(bad)?),
            _ => return Err(bad()),
        };
        out.push(SizedScore { score: field(&rec, 0).ok_or_else(bad)?, label, len_a, len_b });
    }
    Ok(out)
}
