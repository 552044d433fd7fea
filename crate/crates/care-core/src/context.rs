//! Task-metadata context: a frozen embedding provider feeding a trainable
//! two-layer projection (the context encoder).
//!
//! The provider is either a deterministic hashed bag-of-words or a table of
//! externally produced vectors loaded from a file. It never receives
//! gradients; the projection network is the only trainable path from
//! metadata to the agent.

use std::collections::BTreeMap;
use std::io::BufRead;

use crate::error::{CoreError, Result};
use crate::nets::{Mlp, MlpSpec};
use crate::params::Leased;
use crate::rng::{fnv1a64, mix64, SeededPrng};
use crate::tensor::{Graph, Tensor, Var};

pub const HASH_TABLE_SIZE: u64 = 65_536;
pub const DEFAULT_EMBED_DIM: usize = 768;

/// Frozen text-to-vector provider. Immutable after construction.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    Hashed { dim: usize, seed: u64 },
    File { dim: usize, table: BTreeMap<String, Vec<f64>> },
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        EmbeddingProvider::Hashed { dim, seed }
    }

    /// Load a JSONL file with one record per line:
    /// `{"task": string, "vector": [D floats]}`.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut table = BTreeMap::new();
        let mut dim = None;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(serde::Deserialize)]
            struct Record {
                task: String,
                vector: Vec<f64>,
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| {
                CoreError::Config(format!(
                    "{}:{}: bad embedding record: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            match dim {
                None => dim = Some(rec.vector.len()),
                Some(d) if d != rec.vector.len() => {
                    return Err(CoreError::Config(format!(
                        "{}:{}: vector dim {} differs from {}",
                        path.display(),
                        lineno + 1,
                        rec.vector.len(),
                        d
                    )))
                }
                _ => {}
            }
            table.insert(rec.task, rec.vector);
        }
        let dim = dim.ok_or_else(|| {
            CoreError::Config(format!("{}: no embedding records", path.display()))
        })?;
        Ok(EmbeddingProvider::File { dim, table })
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hashed { dim, .. } => *dim,
            EmbeddingProvider::File { dim, .. } => *dim,
        }
    }

    /// Embed a metadata string. The returned tensor never requires grad.
    ///
    /// Hashed mode: lowercase, split on non-alphanumeric runs, hash each
    /// token (FNV-1a 64 mod table size), average the per-slot vectors of
    /// seeded standard normals scaled by 1/sqrt(D).
    ///
    /// File mode: exact lookup by the full metadata string.
    pub fn embed(&self, text: &str) -> Result<Tensor> {
        let out = match self {
            EmbeddingProvider::Hashed { dim, seed } => {
                let tokens = tokenize(text);
                if tokens.is_empty() {
                    return Err(CoreError::Domain {
                        op: "embed_metadata",
                        detail: format!("no tokens in {text:?}"),
                    });
                }
                let scale = 1.0 / (*dim as f64).sqrt();
                let mut acc = vec![0.0; *dim];
                for tok in &tokens {
                    let slot = fnv1a64(tok.as_bytes()) % HASH_TABLE_SIZE;
                    let mut rng = SeededPrng::new(mix64(seed ^ mix64(slot)));
                    for a in acc.iter_mut() {
                        *a += rng.normal() * scale;
                    }
                }
                let n = tokens.len() as f64;
                for a in acc.iter_mut() {
                    *a /= n;
                }
                Tensor::vector(acc)
            }
            EmbeddingProvider::File { table, .. } => {
                let v = table.get(text).ok_or_else(|| CoreError::MissingEmbedding {
                    task: text.to_string(),
                    available: table.keys().cloned().collect(),
                })?;
                Tensor::vector(v.clone())
            }
        };
        debug_assert!(!out.requires_grad);
        Ok(out)
    }
}

/// Trainable projection from frozen embeddings to the context vector:
/// two feedforward layers, ReLU between them.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub net: Mlp,
}

impl ContextEncoder {
    pub fn init(embed_dim: usize, hidden: usize, out_dim: usize, seed: u64, lr: f64) -> Self {
        ContextEncoder {
            net: Mlp::init(
                "context",
                &MlpSpec::new(embed_dim, vec![hidden], out_dim, seed),
                lr,
            ),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn lease(&self, g: &mut Graph, trainable: bool) -> Leased {
        self.net.lease(g, trainable)
    }

    /// Project a (N,D) matrix of embeddings to (N,C) context vectors,
    /// recorded on the graph so the parameters receive gradients downstream.
    pub fn encode(&self, g: &mut Graph, leased: &Leased, embeddings: Var) -> Result<Var> {
        self.net.forward(g, leased, embeddings)
    }
}

/// Cosine similarity. Near-zero norms (< 1e-12) define the result as 0;
/// the second return flags that case.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine_similarity dims {} vs {}", a.len(), b.len());
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), false)
}
