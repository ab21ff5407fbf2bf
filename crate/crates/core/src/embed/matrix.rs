use std::collections::HashMap;
use std::io::{Read, Write};

use crate::corpus::{Arch, Instruction};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XASM";
const VERSION: u32 = 1;

/// Instruction embeddings for one architecture: `dim x V`, column `i` is the
/// vector of vocabulary token `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    arch: Arch,
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(arch: Arch, dim: usize, tokens: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadConfig("embedding dimension must be positive".into()));
        }
        if data.len() != dim * tokens.len() {
            return Err(Error::DimMismatch {
                expected: dim * tokens.len(),
                actual: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite embedding entry".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        Ok(EmbeddingMatrix {
            arch,
            dim,
            tokens,
            index,
            data,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn column(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Embedding of `t`; out-of-vocabulary tokens map to the zero vector.
    pub fn lookup(&self, t: &Instruction) -> Vec<f32> {
        match self.index_of(t.as_str()) {
            Some(i) => self.column(i).to_vec(),
            None => vec![0.0; self.dim],
        }
    }

    /// The `k` tokens closest to `token` by cosine similarity, excluding itself.
    ///
    /// Sorted by descending similarity; ties keep vocabulary order.
    pub fn nearest_tokens(&self, token: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let q = self
            .index_of(token)
            .ok_or_else(|| Error::UnknownToken(token.to_owned()))?;
        if k >= self.vocab_len() {
            return Err(Error::BadConfig(format!(
                "k = {k} must be smaller than the vocabulary size {}",
                self.vocab_len()
            )));
        }
        let qv = self.column(q);
        let mut scored: Vec<(usize, f64)> = (0..self.vocab_len())
            .filter(|&i| i != q)
            .map(|i| (i, cosine(qv, self.column(i))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.tokens[i].clone(), s))
            .collect())
    }

    /// Binary store: `XASM`, version, dim, V, then per token
    /// `(u16 length, UTF-8 bytes, dim x f32)`, all little-endian.
    pub fn write_store(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.tokens.len() as u32).to_le_bytes())?;
        for (i, t) in self.tokens.iter().enumerate() {
            let len = u16::try_from(t.len())
                .map_err(|_| Error::Format(format!("token longer than 65535 bytes: `{t}`")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(t.as_bytes())?;
            for x in self.column(i) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_store(mut r: impl Read, arch: Arch) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an embedding store (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let v = read_u32(&mut r)? as usize;
        let mut tokens = Vec::with_capacity(v);
        let mut data = Vec::with_capacity(v * dim);
        for _ in 0..v {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut bytes)?;
            tokens.push(
                String::from_utf8(bytes).map_err(|e| Error::Format(format!("token: {e}")))?,
            );
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b));
            }
        }
        EmbeddingMatrix::new(arch, dim, tokens, data)
    }

    /// `token\tv1\t...\tvd` per line, for external projection tools.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            w.write_all(t.as_bytes())?;
            for x in self.column(i) {
                write!(w, "\t{x}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EmbeddingMatrix {
        let tokens = ["A", "B", "C", "D"].map(String::from).to_vec();
        #[rustfmt::skip]
        let data = vec![
            1.0, 0.0,
            0.9, 0.1,
            -1.0, 0.2,
            1.0, 0.0,
        ];
        EmbeddingMatrix::new(Arch::X86_64, 2, tokens, data).unwrap()
    }

    #[test]
    fn lookup_in_vocab_and_oov() {
        let m = toy();
        assert_eq!(m.lookup(&Instruction::new("B")), vec![0.9, 0.1]);
        assert_eq!(m.lookup(&Instruction::new("ZZZ")), vec![0.0, 0.0]);
        assert_eq!(m.lookup(&Instruction::new("B")), m.lookup(&Instruction::new("B")));
    }

    #[test]
    fn nearest_prefers_duplicate_column() {
        let m = toy();
        let n = m.nearest_tokens("A", 2).unwrap();
        assert_eq!(n[0].0, "D");
        assert!((n[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(n[1].0, "B");
    }

    #[test]
    fn nearest_on_two_tokens() {
        let m = EmbeddingMatrix::new(Arch::Arm, 1, vec!["x".into(), "y".into()], vec![1.0, -2.0]).unwrap();
        let n = m.nearest_tokens("x", 1).unwrap();
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].0, "y");
    }

    #[test]
    fn nearest_errors() {
        let m = toy();
        assert!(matches!(m.nearest_tokens("nope", 1), Err(Error::UnknownToken(_))));
        assert!(m.nearest_tokens("A", 4).is_err());
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        // Oracle: score every other column independently and sort.
        let m = toy();
        for q in ["A", "B", "C", "D"] {
            let qi = m.index_of(q).unwrap();
            let mut oracle: Vec<(usize, f64)> = Vec::new();
            for i in 0..4 {
                if i == qi {
                    continue;
                }
                let (a, b) = (m.column(qi), m.column(i));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                oracle.push((i, dot / (na * nb)));
            }
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got = m.nearest_tokens(q, 3).unwrap();
            for ((tok, s), (i, o)) in got.iter().zip(&oracle) {
                assert_eq!(tok, &m.tokens()[*i]);
                assert!((s - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_round_trip_and_layout() {
        let m = toy();
        let mut buf = Vec::new();
        m.write_store(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"XASM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 4);
        assert_eq!(u16::from_le_bytes(buf[16..18].try_into().unwrap()), 1);
        assert_eq!(buf[18], b'A');
        assert_eq!(buf.len(), 16 + 4 * (2 + 1 + 8));
        let back = EmbeddingMatrix::read_store(&buf[..], Arch::X86_64).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            EmbeddingMatrix::read_store(&b"NOPE\0\0\0\0"[..], Arch::Arm),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn tsv_export() {
        let mut out = Vec::new();
        toy().write_tsv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "A\t1\t0");
        assert_eq!(text.lines().count(), 4);
    }
}
