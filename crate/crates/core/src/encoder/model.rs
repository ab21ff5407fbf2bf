//! Encoder bundled with the per-architecture instruction embeddings.

use rayon::prelude::*;

use super::{encode_block, BlockEmbedding, EncoderParams, PairInput, Sequence};
use crate::corpus::{Arch, BasicBlock};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::pairgen::BlockPair;

/// Maps basic blocks of either architecture to block embeddings.
#[derive(Clone, Debug)]
pub struct BlockEncoder {
    pub params: EncoderParams,
    x86: EmbeddingMatrix,
    arm: EmbeddingMatrix,
}

impl BlockEncoder {
    pub fn new(params: EncoderParams, x86: EmbeddingMatrix, arm: EmbeddingMatrix) -> Result<Self> {
        for (m, arch) in [(&x86, Arch::X86_64), (&arm, Arch::Arm)] {
            if m.arch() != arch {
                return Err(Error::ArchMismatch);
            }
            if m.dim() != params.shape.input_dim {
                return Err(Error::DimMismatch {
                    expected: params.shape.input_dim,
                    actual: m.dim(),
                });
            }
        }
        Ok(BlockEncoder { params, x86, arm })
    }

    pub fn embeddings(&self, arch: Arch) -> &EmbeddingMatrix {
        match arch {
            Arch::X86_64 => &self.x86,
            Arch::Arm => &self.arm,
        }
    }

    /// Instruction embeddings of the block; unknown instructions are zero.
    pub fn sequence(&self, b: &BasicBlock) -> Result<Sequence> {
        let m = self.embeddings(b.arch);
        let data: Vec<f64> = b
            .instrs
            .iter()
            .flat_map(|i| m.lookup(i))
            .map(f64::from)
            .collect();
        Sequence::new(m.dim(), data)
    }

    pub fn embed(&self, b: &BasicBlock) -> Result<BlockEmbedding> {
        encode_block(&self.params, b.arch, &self.sequence(b)?)
    }

    /// Embeddings of many blocks, in input order.
    pub fn embed_all(&self, blocks: &[&BasicBlock]) -> Result<Vec<BlockEmbedding>> {
        blocks.par_iter().map(|b| self.embed(b)).collect()
    }

    pub fn pair_input(&self, p: &BlockPair) -> Result<PairInput> {
        Ok(PairInput {
            a: self.sequence(&p.a)?,
            arch_a: p.a.arch,
            b: self.sequence(&p.b)?,
            arch_b: p.b.arch,
            label: p.label(),
        })
    }

    pub fn pair_inputs(&self, pairs: &[BlockPair]) -> Result<Vec<PairInput>> {
        pairs.iter().map(|p| self.pair_input(p)).collect()
    }
}
