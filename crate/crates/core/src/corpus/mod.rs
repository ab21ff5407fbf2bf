//! Annotated assembly corpora: block-level instruction streams grouped by
//! function, tagged with architecture and optimization level.
//!
//! The on-disk format is JSON lines, one function per line:
//!
//! ```text
//! {"fn": "main", "arch": "x86_64", "opt": "O2", "blocks": [{"id": 7, "instrs": ["push %rbp", ...]}, ...]}
//! ```
//!
//! Block `id`s are provenance IDs: blocks compiled from the same IR block share
//! an ID across architectures.

mod cfg;
mod normalize;
mod vocab;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cfg::{parse_cfg, Cfg, CfgRecord};
pub use normalize::{normalize_instruction, FUNC_PLACEHOLDER, STR_PLACEHOLDER, TAG_PLACEHOLDER};
pub use vocab::{oov_rate, vocab_growth, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "x86_64")]
    X86_64,
    #[serde(rename = "arm")]
    Arm,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::X86_64, Arch::Arm];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::X86_64 => "x86_64",
            Arch::Arm => "arm",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x86_64" | "x86-64" | "x86" | "amd64" => Ok(Arch::X86_64),
            "arm" | "arm32" | "armv7" => Ok(Arch::Arm),
            other => Err(Error::BadConfig(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O1,
    O2,
    O3,
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OptLevel::O1 => "O1",
            OptLevel::O2 => "O2",
            OptLevel::O3 => "O3",
        };
        f.write_str(s)
    }
}

impl FromStr for OptLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "O1" => Ok(OptLevel::O1),
            "O2" => Ok(OptLevel::O2),
            "O3" => Ok(OptLevel::O3),
            other => Err(Error::BadConfig(format!("unknown optimization level `{other}`"))),
        }
    }
}

/// One instruction token, the "word" unit of all embedding work.
///
/// Produced by [`normalize_instruction`] for normalized corpora; a raw corpus
/// loaded with [`Normalization::Raw`] stores the trimmed source line instead.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instruction(String);

impl Instruction {
    pub fn new(s: impl Into<String>) -> Self {
        Instruction(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A basic block's instruction stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: u64,
    pub arch: Arch,
    pub opt: OptLevel,
    pub instrs: Vec<Instruction>,
}

impl BasicBlock {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Identity used for split disjointness: provenance ID plus build tags.
    pub fn key(&self) -> BlockKey {
        BlockKey {
            id: self.id,
            arch: self.arch,
            opt: self.opt,
        }
    }

    /// The instructions joined with `; `, used for text-level deduplication.
    pub fn text(&self) -> String {
        self.instrs
            .iter()
            .map(Instruction::as_str)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub id: u64,
    pub arch: Arch,
    pub opt: OptLevel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub arch: Arch,
    pub opt: OptLevel,
    pub blocks: Vec<BasicBlock>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub functions: Vec<Function>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    Normalized,
    /// Keep each instruction as its trimmed source text.
    Raw,
}

/// One block as it appears in corpus and CFG files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub id: u64,
    pub instrs: Vec<String>,
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecord {
    #[serde(rename = "fn")]
    pub name: String,
    pub arch: Arch,
    pub opt: OptLevel,
    pub blocks: Vec<BlockRecord>,
}

pub(crate) fn block_from_record(
    rec: &BlockRecord,
    arch: Arch,
    opt: OptLevel,
    mode: Normalization,
) -> std::result::Result<BasicBlock, String> {
    if rec.instrs.is_empty() {
        return Err(format!("block {} has no instructions", rec.id));
    }
    let instrs = rec
        .instrs
        .iter()
        .map(|raw| match mode {
            Normalization::Normalized => {
                normalize_instruction(raw, arch).map_err(|e| format!("block {}: {e}", rec.id))
            }
            Normalization::Raw => {
                let t = raw.trim();
                if t.is_empty() {
                    Err(format!("block {}: empty instruction", rec.id))
                } else {
                    Ok(Instruction::new(t))
                }
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(BasicBlock {
        id: rec.id,
        arch,
        opt,
        instrs,
    })
}

pub(crate) fn record_from_block(b: &BasicBlock) -> BlockRecord {
    BlockRecord {
        id: b.id,
        instrs: b.instrs.iter().map(|i| i.as_str().to_owned()).collect(),
    }
}

fn function_from_record(rec: FunctionRecord, line_no: usize, mode: Normalization) -> Result<Function> {
    let mut seen = std::collections::HashSet::new();
    let mut blocks = Vec::with_capacity(rec.blocks.len());
    for b in &rec.blocks {
        if !seen.insert(b.id) {
            return Err(Error::DuplicateBlockOrdinal {
                line: line_no,
                function: rec.name.clone(),
                id: b.id,
            });
        }
        let block = block_from_record(b, rec.arch, rec.opt, mode).map_err(|reason| Error::MalformedRecord {
            line: line_no,
            reason,
        })?;
        blocks.push(block);
    }
    Ok(Function {
        name: rec.name,
        arch: rec.arch,
        opt: rec.opt,
        blocks,
    })
}

impl Corpus {
    pub fn from_reader(reader: impl BufRead, mode: Normalization) -> Result<Self> {
        let mut functions = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| Error::MalformedRecord {
                line: line_no,
                reason,
            };
            let rec: FunctionRecord =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            functions.push(function_from_record(rec, line_no, mode)?);
        }
        Ok(Corpus { functions })
    }

    /// Build from in-memory records; errors report the 1-based record index as the line.
    pub fn from_records(records: Vec<FunctionRecord>, mode: Normalization) -> Result<Self> {
        let functions = records
            .into_iter()
            .enumerate()
            .map(|(i, rec)| function_from_record(rec, i + 1, mode))
            .collect::<Result<_>>()?;
        Ok(Corpus { functions })
    }

    pub fn from_jsonl(text: &str, mode: Normalization) -> Result<Self> {
        Self::from_reader(text.as_bytes(), mode)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for f in &self.functions {
            let rec = FunctionRecord {
                name: f.name.clone(),
                arch: f.arch,
                opt: f.opt,
                blocks: f.blocks.iter().map(record_from_block).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BasicBlock> {
        self.functions.iter().flat_map(|f| f.blocks.iter())
    }

    pub fn num_blocks(&self) -> usize {
        self.functions.iter().map(|f| f.blocks.len()).sum()
    }

    pub fn num_instructions(&self) -> usize {
        self.blocks().map(BasicBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_instructions() == 0
    }

    /// The single architecture of this corpus, or an error if it is empty or mixed.
    pub fn arch(&self) -> Result<Arch> {
        let mut it = self.functions.iter().map(|f| f.arch);
        let first = it.next().ok_or(Error::EmptyCorpus)?;
        match it.find(|a| *a != first) {
            Some(other) => Err(Error::MixedArchitectures(first, other)),
            None => Ok(first),
        }
    }

    /// Functions of one architecture.
    pub fn filter_arch(&self, arch: Arch) -> Corpus {
        Corpus {
            functions: self
                .functions
                .iter()
                .filter(|f| f.arch == arch)
                .cloned()
                .collect(),
        }
    }

    /// Re-normalize every instruction (used to turn a raw corpus into a normalized one).
    pub fn normalized(&self) -> Result<Corpus> {
        let functions = self
            .functions
            .iter()
            .map(|f| {
                let blocks = f
                    .blocks
                    .iter()
                    .map(|b| {
                        let instrs = b
                            .instrs
                            .iter()
                            .map(|i| normalize_instruction(i.as_str(), b.arch))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(BasicBlock { instrs, ..b.clone() })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Function { blocks, ..f.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { functions })
    }
}

/// Load and normalize a JSON-lines corpus file.
pub fn parse_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    Corpus::from_reader(std::io::BufReader::new(file), Normalization::Normalized)
}

/// Count distinct tokens in a corpus.
pub fn build_vocabulary(corpus: &Corpus) -> Result<Vocabulary> {
    Vocabulary::from_corpus(corpus)
}
