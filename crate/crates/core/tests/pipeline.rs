use std::fs::File;
use std::io::BufReader;

use xasm::corpus::{parse_cfg, parse_corpus, Arch, Cfg, Corpus, Normalization, OptLevel};
use xasm::embed::{train_sgns, EmbeddingMatrix, SgnsConfig};
use xasm::encoder::{init_params, read_params, train, write_params, BlockEncoder, EncoderConfig};
use xasm::lsh::{LshConfig, LshIndex, QueryMode};
use xasm::matcher::{component_score, MatchOptions};
use xasm::pairgen::{gen_dissimilar_pairs, gen_similar_pairs, split_dataset, DissimilarConfig, SplitPlan};
use xasm::synth::{Generator, SynthConfig};

fn corpora(seed: u64, functions: usize) -> (Corpus, Corpus) {
    let mut g = Generator::new(seed, SynthConfig::default());
    let [x, a] = g.corpus(functions, 5, OptLevel::O2);
    (
        Corpus::from_records(x, Normalization::Normalized).unwrap(),
        Corpus::from_records(a, Normalization::Normalized).unwrap(),
    )
}

#[test]
fn corpus_file_round_trip() {
    let (cx, _) = corpora(1, 10);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x86.jsonl");
    cx.write_jsonl(File::create(&p).unwrap()).unwrap();
    assert_eq!(parse_corpus(&p).unwrap(), cx);
}

#[test]
fn cfg_file_round_trip() {
    let mut g = Generator::new(2, SynthConfig::default());
    let prog = g.program(12);
    let cfg = Cfg::from_record(&g.render_cfg(&prog, Arch::Arm, OptLevel::O2), Normalization::Normalized).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    cfg.write_json(File::create(&p).unwrap()).unwrap();
    assert_eq!(parse_cfg(&p).unwrap(), cfg);
}

#[test]
fn embedding_store_and_params_round_trip() {
    let (cx, _) = corpora(3, 10);
    let emb = train_sgns(&cx, &SgnsConfig { dim: 6, epochs: 2, ..Default::default() }).unwrap();
    let params = init_params(&EncoderConfig { input_dim: 6, hidden_dim: 4, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pe, pp) = (dir.path().join("emb.json"), dir.path().join("params.json"));
    emb.write_store(File::create(&pe).unwrap()).unwrap();
    write_params(&params, File::create(&pp).unwrap()).unwrap();
    let emb2 = EmbeddingMatrix::read_store(BufReader::new(File::open(&pe).unwrap()), Arch::X86_64).unwrap();
    assert_eq!(emb2, emb);
    // Parameters are stored as f32: one save loses precision, a second is lossless.
    let back = read_params(File::open(&pp).unwrap()).unwrap();
    assert_eq!(back.shape, params.shape);
    assert!(back.values().zip(params.values()).all(|(a, b)| a == &(*b as f32 as f64)));
    let mut again = Vec::new();
    write_params(&back, &mut again).unwrap();
    assert_eq!(again, std::fs::read(&pp).unwrap());
}

#[test]
fn lsh_store_reloads_with_same_answers() {
    let items: Vec<(String, Vec<f64>)> = (0..50)
        .map(|i| (format!("b{i}"), (0..8).map(|d| ((i * 8 + d) as f64 * 0.7).sin() * 0.1).collect()))
        .collect();
    let q = items[7].1.clone();
    let idx = LshIndex::build(items, 8, LshConfig { tables: 4, bits: 6, seed: 9 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("idx.json");
    idx.write_json(File::create(&p).unwrap()).unwrap();
    let back: LshIndex<String> = LshIndex::read_json(File::open(&p).unwrap()).unwrap();
    for mode in [QueryMode::Approx, QueryMode::Exact] {
        assert_eq!(back.query(&q, 0.5, mode).unwrap(), idx.query(&q, 0.5, mode).unwrap());
    }
}

#[test]
fn small_pipeline_end_to_end() {
    let (cx, ca) = corpora(4, 60);
    let sg = SgnsConfig { dim: 12, epochs: 5, subsample: 1e-3, ..Default::default() };
    let (ex, ea) = (train_sgns(&cx, &sg).unwrap(), train_sgns(&ca, &sg).unwrap());

    let plan = SplitPlan::new([0.8, 0.1, 0.1], 4).unwrap();
    let mut pairs = gen_similar_pairs(&cx, &ca);
    let n = pairs.len();
    let dis = DissimilarConfig { count: Some(n), split: Some(plan), seed: 4, ..Default::default() };
    pairs.extend(gen_dissimilar_pairs(&cx, &ca, &dis).unwrap());
    let split = split_dataset(pairs, plan.fractions, plan.seed).unwrap();
    assert_eq!(split.dropped, 0);

    let cfg = EncoderConfig { input_dim: 12, hidden_dim: 8, epochs: 3, seed: 4, ..Default::default() };
    let enc = BlockEncoder::new(init_params(&cfg).unwrap(), ex.clone(), ea.clone()).unwrap();
    let out = train(&enc.pair_inputs(&split.train).unwrap(), &enc.pair_inputs(&split.val).unwrap(), &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.best.is_finite());
    assert!(out.history.iter().all(|h| (0.0..=1.0).contains(&h.val_auc)));

    let enc = BlockEncoder::new(out.best, ex, ea).unwrap();
    let mut g = Generator::new(40, SynthConfig::default());
    let prog = g.program(15);
    let t = Cfg::from_record(&g.render_cfg(&prog, Arch::X86_64, OptLevel::O2), Normalization::Normalized).unwrap();
    let items = t.nodes().iter().enumerate().map(|(i, b)| (i, enc.embed(b).unwrap().vector)).collect();
    let store = LshIndex::build(items, 8, LshConfig::default()).unwrap();
    let opts = MatchOptions { mode: QueryMode::Exact, ..Default::default() };
    let report = component_score(&t, &t, &store, &enc, &opts).unwrap();
    assert_eq!(report.score, 1.0);
    assert!(report.paths.iter().all(|p| p.score.exhaustive));
}
