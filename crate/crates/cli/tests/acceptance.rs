//! Acceptance run: one PASS or FAIL line per criterion.
//!
//! Criteria 4, 5, 7 and 10 drive the `xasm` binary end to end; the rest call
//! the library directly. Exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xasm::corpus::{normalize_instruction, Arch, BasicBlock, Cfg, Corpus, Instruction, Normalization, OptLevel};
use xasm::encoder::{gradient_check, init_params, CellKind, EncoderConfig, PairInput, Sequence};
use xasm::eval::roc_auc;
use xasm::lsh::{LshConfig, LshIndex, QueryMode};
use xasm::matcher::{lcs_path_vs_graph, LcsOptions, SebbMatrix};
use xasm::synth::{Generator, SynthConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, took: Duration, o: &Outcome) -> bool {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {verdict} {name}: {} [{:.1}s]", o.detail, took.as_secs_f64());
    o.pass
}

fn xasm(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_xasm"))
        .args(args)
        .output()
        .expect("spawn xasm");
    assert!(
        out.status.success(),
        "xasm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// 1

fn normalization() -> Outcome {
    let cases = [
        ("MOVL %ESI, $.L.STR.31", "MOVL ESI,<STR>"),
        ("MOVL %EDX, $3", "MOVL EDX,0"),
        ("MOVQ %RDI, %RAX", "MOVQ RDI,RAX"),
        ("CALLQ STRNCMP", "CALLQ FOO"),
        ("TESTL %EAX, %EAX", "TESTL EAX,EAX"),
        ("JE .LBB0_5", "JE <TAG>"),
    ];
    let mut wrong = Vec::new();
    for (raw, want) in cases {
        match normalize_instruction(raw, Arch::X86_64) {
            Ok(got) if got.as_str() == want => {}
            other => wrong.push(format!("{raw:?} -> {other:?}")),
        }
    }
    Outcome {
        pass: wrong.is_empty(),
        detail: if wrong.is_empty() { "6/6 lines".into() } else { wrong.join("; ") },
    }
}

// 2

fn oov_reduction() -> Outcome {
    let mut g = Generator::new(7, SynthConfig::default());
    let [x86, _] = g.corpus(1500, 10, OptLevel::O2);
    let half = x86.len() / 2;
    let train = Corpus::from_records(x86[..half].to_vec(), Normalization::Raw).unwrap();
    let held = Corpus::from_records(x86[half..].to_vec(), Normalization::Raw).unwrap();
    let instrs = train.num_instructions() + held.num_instructions();
    let side = |tr: &Corpus, he: &Corpus| {
        let v = xasm::corpus::build_vocabulary(tr).unwrap();
        (v.len(), xasm::corpus::oov_rate(&v, he).unwrap())
    };
    let (v_raw, oov_raw) = side(&train, &held);
    let (v_norm, oov_norm) = side(&train.normalized().unwrap(), &held.normalized().unwrap());
    Outcome {
        pass: instrs >= 50_000 && oov_norm < oov_raw && v_norm < v_raw,
        detail: format!("{instrs} instrs, V {v_raw} -> {v_norm}, OOV {oov_raw:.4} -> {oov_norm:.4}"),
    }
}

// 3

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cell in [CellKind::Lstm, CellKind::Gru, CellKind::Rnn] {
        for layers in [1, 2] {
            let cfg = EncoderConfig {
                cell,
                layers,
                input_dim: 8,
                hidden_dim: 6,
                ..Default::default()
            };
            let p = init_params(&cfg).unwrap();
            for i in 0..3 {
                let seq = |rng: &mut ChaCha8Rng| {
                    let n = rng.random_range(1..=5);
                    Sequence::new(8, (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
                };
                let pair = PairInput {
                    a: seq(&mut rng),
                    arch_a: Arch::X86_64,
                    b: seq(&mut rng),
                    arch_b: Arch::Arm,
                    label: (i % 2) as f64,
                };
                worst = worst.max(gradient_check(&p, &pair, 1e-5).unwrap());
            }
        }
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("max relative error {worst:.2e} over 3 cells x 2 depths"),
    }
}

// 4, 5, 7, 10: pipeline through the binary.

struct Run {
    dir: PathBuf,
}

impl Run {
    /// Synthetic corpus, instruction embeddings and pairs for `seed`.
    fn prepare(root: &Path, name: &str, seed: u64) -> Run {
        let dir = root.join(name);
        let seed = seed.to_string();
        let d = |f: &str| dir.join(f);
        let base = ["--seed", &seed, "--jobs", "1"];
        let run = |rest: &[&str]| xasm(&[&base[..], rest].concat());
        run(&["synth", "corpus", "--out-dir", s(&d("corpus"))]);
        for arch in ["x86_64", "arm"] {
            let input = d(&format!("corpus/{arch}.jsonl"));
            let output = d(&format!("emb-{arch}.json"));
            run(&["train-embed", "--input", s(&input), "--output", s(&output), "--subsample", "1e-3"]);
        }
        run(&[
            "pairs",
            "--x86",
            s(&d("corpus/x86_64.jsonl")),
            "--arm",
            s(&d("corpus/arm.jsonl")),
            "--out-dir",
            s(&d("pairs")),
            "--similar",
            "2000",
            "--dissimilar",
            "2000",
        ]);
        Run { dir }
    }

    /// Train for 20 epochs; returns validation AUC per epoch.
    fn train(&self, seed: u64, cell: &str) -> Vec<f64> {
        let d = |f: &str| self.dir.join(f);
        let model = d(&format!("model-{cell}.json"));
        xasm(&[
            "--seed",
            &seed.to_string(),
            "--jobs",
            "1",
            "train-encoder",
            "--train",
            s(&d("pairs/train.jsonl")),
            "--val",
            s(&d("pairs/val.jsonl")),
            "--emb-x86",
            s(&d("emb-x86_64.json")),
            "--emb-arm",
            s(&d("emb-arm.json")),
            "--cell",
            cell,
            "--epochs",
            "20",
            "--output",
            s(&model),
        ]);
        let hist = fs::read_to_string(d(&format!("model-{cell}.json.history.csv"))).unwrap();
        hist.lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect()
    }

    /// Plant a component and score it against the planted and unrelated targets.
    fn containment(&self, seed: u64) -> Vec<f64> {
        let d = |f: &str| self.dir.join(f);
        let plant = d("plant");
        let seed = seed.to_string();
        xasm(&["--seed", &seed, "--jobs", "1", "synth", "plant", "--out-dir", s(&plant)]);
        ["target", "unrelated-0", "unrelated-1", "unrelated-2"]
            .iter()
            .map(|t| {
                let out = xasm(&[
                    "--seed",
                    &seed,
                    "--jobs",
                    "1",
                    "query-component",
                    "--params",
                    s(&d("model-lstm.json")),
                    "--emb-x86",
                    s(&d("emb-x86_64.json")),
                    "--emb-arm",
                    s(&d("emb-arm.json")),
                    "--query",
                    s(&plant.join("query.json")),
                    "--target",
                    s(&plant.join(format!("{t}.json"))),
                    "--exact-scan",
                    "--output",
                    s(&d(&format!("report-{t}.json"))),
                ]);
                out.trim().strip_prefix("score ").expect("score line").parse().unwrap()
            })
            .collect()
    }

    /// Primary outputs, manifests excluded since they carry timings.
    fn primary_outputs(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![self.dir.clone()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                if p.is_dir() {
                    stack.push(p);
                } else if !name.ends_with("manifest.json") {
                    out.push(p.strip_prefix(&self.dir).unwrap().to_path_buf());
                }
            }
        }
        out.sort();
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 6

fn brute_force_lcs(q: &[usize], sebb: &SebbMatrix, t: &Cfg, limit: usize) -> usize {
    let lcs = |w: &[usize]| {
        let mut row = vec![0usize; q.len() + 1];
        for &v in w {
            let prev = row.clone();
            for j in 1..=q.len() {
                row[j] = row[j - 1].max(prev[j]).max(if sebb.get(q[j - 1], v) { prev[j - 1] + 1 } else { 0 });
            }
        }
        row[q.len()]
    };
    let mut best = 0;
    for s in 0..t.len() {
        let mut stack = vec![vec![s]];
        while let Some(w) = stack.pop() {
            best = best.max(lcs(&w));
            for &v in t.successors(*w.last().unwrap()) {
                if w.iter().filter(|&&x| x == v).count() < limit {
                    let mut w2 = w.clone();
                    w2.push(v);
                    stack.push(w2);
                }
            }
        }
    }
    best
}

fn block(label: char) -> BasicBlock {
    BasicBlock {
        id: 0,
        arch: Arch::Arm,
        opt: OptLevel::O2,
        instrs: vec![Instruction::new(label.to_string())],
    }
}

fn lcs_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agree = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let mut edges = Vec::new();
        for i in 1..n {
            edges.push([rng.random_range(0..i), i]);
        }
        for _ in 0..rng.random_range(0..=n) {
            edges.push([rng.random_range(0..n), rng.random_range(0..n)]);
        }
        let label = |rng: &mut ChaCha8Rng| (b'A' + rng.random_range(0..3u8)) as char;
        let nodes: Vec<BasicBlock> = (0..n).map(|_| block(label(&mut rng))).collect();
        let t = Cfg::new(0, nodes, &edges).unwrap();
        let query: Vec<BasicBlock> = (0..rng.random_range(1..=5)).map(|_| block(label(&mut rng))).collect();
        let q: Vec<usize> = (0..query.len()).collect();
        let sebb = SebbMatrix::by_text(&query, t.nodes());
        let got = lcs_path_vs_graph(&q, &sebb, &t, &LcsOptions::default()).unwrap();
        if got.exhaustive && got.length == brute_force_lcs(&q, &sebb, &t, 2) {
            agree += 1;
        }
    }
    Outcome {
        pass: agree == 200,
        detail: format!("{agree}/200 graphs agree with brute force"),
    }
}

// 8

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let mut items: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.random_range(0..12) as f64 / 11.0, rng.random_bool(0.5)))
            .collect();
        items[0].1 = true;
        items[1].1 = false;
        let (mut wins, mut total) = (0.0, 0.0);
        for &(sp, yp) in &items {
            for &(sn, yn) in &items {
                if yp && !yn {
                    total += 1.0;
                    wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
                }
            }
        }
        worst = worst.max((roc_auc(&items).unwrap().auc - wins / total).abs());
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("max deviation {worst:.1e} over 1000 sets"),
    }
}

// 9

fn lsh_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut subset, mut found) = (0, 0);
    for store in 0..100u64 {
        let dim = 16;
        let vec = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-0.2..0.2)).collect::<Vec<f64>>();
        let items: Vec<(usize, Vec<f64>)> = (0..200).map(|i| (i, vec(&mut rng))).collect();
        let planted = rng.random_range(0..items.len());
        let dup = items[planted].1.clone();
        let idx = LshIndex::build(items, dim, LshConfig { seed: store, ..Default::default() }).unwrap();
        let theta = rng.random_range(0.05..0.6);
        let mut ok = true;
        for q in (0..5).map(|_| vec(&mut rng)).chain([dup.clone()]) {
            let exact = idx.query_indices(&q, theta, QueryMode::Exact).unwrap();
            let approx = idx.query_indices(&q, theta, QueryMode::Approx).unwrap();
            ok &= approx.iter().all(|a| exact.contains(a));
        }
        subset += ok as usize;
        let exact = idx.query(&dup, theta, QueryMode::Exact).unwrap();
        found += exact.iter().any(|&(r, _)| r == planted) as usize;
    }
    Outcome {
        pass: subset == 100 && found == 100,
        detail: format!("approx within exact on {subset}/100 stores, duplicate found in {found}/100"),
    }
}

fn main() {
    let mut passed = 0;
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome, limit: Option<Duration>| {
        let t = Instant::now();
        let mut o = f();
        let took = t.elapsed();
        if let Some(limit) = limit {
            if took > limit {
                o.pass = false;
                o.detail += &format!(", over the {}s budget", limit.as_secs());
            }
        }
        passed += report(n, name, took, &o) as usize;
    };
    let secs = |s: u64| Some(Duration::from_secs(s));

    check(1, "normalization", &mut normalization, secs(1));
    check(2, "oov reduction", &mut oov_reduction, secs(30));
    check(3, "gradient check", &mut gradients, secs(120));
    check(6, "lcs oracle", &mut lcs_oracle, secs(60));
    check(8, "auc oracle", &mut auc_oracle, secs(10));
    check(9, "lsh soundness", &mut lsh_soundness, secs(30));

    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let runs: Vec<Run> = SEEDS.iter().map(|&seed| Run::prepare(root, &format!("seed{seed}"), seed)).collect();

    let mut lstm = Vec::new();
    check(
        4,
        "separability",
        &mut || {
            lstm = SEEDS.iter().zip(&runs).map(|(&seed, r)| r.train(seed, "lstm")).collect();
            let best: Vec<f64> = lstm.iter().map(|h| h.iter().cloned().fold(0.0, f64::max)).collect();
            Outcome {
                pass: mean(&best) >= 0.95,
                detail: format!("best val AUC within 20 epochs {best:.4?}, mean {:.4}", mean(&best)),
            }
        },
        secs(30 * 60),
    );

    check(
        5,
        "cell ordering",
        &mut || {
            let at20 = |cell: &str| -> f64 {
                let v: Vec<f64> = if cell == "lstm" {
                    lstm.iter().map(|h| h[19]).collect()
                } else {
                    SEEDS.iter().zip(&runs).map(|(&seed, r)| r.train(seed, cell)[19]).collect()
                };
                mean(&v)
            };
            let (l, g, r) = (at20("lstm"), at20("gru"), at20("rnn"));
            Outcome {
                pass: l >= r && g >= r,
                detail: format!("epoch-20 val AUC lstm {l:.4}, gru {g:.4}, rnn {r:.4}"),
            }
        },
        None,
    );

    check(
        7,
        "containment",
        &mut || {
            let scores = runs[0].containment(0);
            Outcome {
                pass: scores[0] >= 0.8 && scores[1..].iter().all(|&u| u <= 0.1),
                detail: format!("planted {:.3}, unrelated {:.3?}", scores[0], &scores[1..]),
            }
        },
        secs(60),
    );

    check(
        10,
        "determinism",
        &mut || {
            let again = Run::prepare(root, "again", 0);
            again.train(0, "lstm");
            again.containment(0);
            // The repeat trains only the LSTM, so compare what it produced.
            let files = again.primary_outputs();
            let differing: Vec<String> = files
                .iter()
                .filter(|f| fs::read(runs[0].dir.join(f)).ok() != fs::read(again.dir.join(f)).ok())
                .map(|f| f.display().to_string())
                .collect();
            let compared = files.len();
            Outcome {
                pass: differing.is_empty(),
                detail: if differing.is_empty() {
                    format!("{compared} files byte-identical")
                } else {
                    format!("differ: {}", differing.join(", "))
                },
            }
        },
        None,
    );

    println!("{passed}/10 criteria passed");
    if passed < 10 {
        std::process::exit(1);
    }
}
