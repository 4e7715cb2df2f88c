//! Per-class stored feature embeddings replacing raw-data replay, plus the
//! weight-imprinting initializer for classifier expansion.
//!
//! Stored embeddings are frozen once a task is finalized; later training
//! never rewrites earlier tasks' representatives.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::LabeledEmbedding;
use crate::nn::ClassId;

/// Stored representatives for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRepresentatives {
    pub class_id: ClassId,
    pub task_index: usize,
    pub embeddings: Vec<Vec<f64>>,
}

/// Map from class to its frozen representatives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    classes: BTreeMap<ClassId, ClassRepresentatives>,
}

/// Normalized mean of normalized shot embeddings; the imprinted weight row
/// for a new class.
pub fn imprint(shots: &[Vec<f64>]) -> Result<Vec<f64>> {
    if shots.is_empty() {
        return Err(Error::InvalidInput("imprint needs at least one shot embedding".into()));
    }
    let d = shots[0].len();
    let mut mean = vec![0.0; d];
    for shot in shots {
        if shot.len() != d {
            return Err(Error::InvalidInput("shot embeddings have mixed dimensions".into()));
        }
        let n = shot.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(Error::DegenerateImprint { norm: n });
        }
        for (m, x) in mean.iter_mut().zip(shot) {
            *m += x / n;
        }
    }
    for m in mean.iter_mut() {
        *m /= shots.len() as f64;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateImprint { norm });
    }
    for m in mean.iter_mut() {
        *m /= norm;
    }
    Ok(mean)
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn get(&self, class_id: ClassId) -> Option<&ClassRepresentatives> {
        self.classes.get(&class_id)
    }

    /// Stores up to `capacity` embeddings for one class, subsampling uniformly
    /// without replacement when more are available. Embeddings are stored
    /// verbatim (callers pass unit-norm vectors); the class must not have been
    /// finalized before.
    pub fn collect(
        &mut self,
        class_id: ClassId,
        task_index: usize,
        embeddings: Vec<Vec<f64>>,
        capacity: usize,
        seed: u64,
    ) -> Result<()> {
        if self.classes.contains_key(&class_id) {
            return Err(Error::StreamIntegrity(format!(
                "representatives for class {class_id} already finalized"
            )));
        }
        let mut kept = embeddings;
        if kept.len() > capacity {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9e3779b97f4a7c15));
            kept.shuffle(&mut rng);
            kept.truncate(capacity);
        }
        self.classes.insert(class_id, ClassRepresentatives { class_id, task_index, embeddings: kept });
        Ok(())
    }

    /// Class-balanced sample of stored old embeddings: up to `count_per_class`
    /// (capped by availability) from every stored class. Empty store yields an
    /// empty batch (first incremental task).
    pub fn sample_balanced(&self, count_per_class: usize, seed: u64) -> Vec<LabeledEmbedding<f64>> {
        let mut out = Vec::new();
        for (&class_id, reps) in &self.classes {
            let mut idx: Vec<usize> = (0..reps.embeddings.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0xd1b54a32d192ed03));
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(count_per_class) {
                out.push(LabeledEmbedding { label: class_id, embedding: reps.embeddings[i].clone() });
            }
        }
        out
    }

    /// Persists the store as a flat text table:
    /// one `class_id task_index f0 f1 ... f(d-1)` row per embedding.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "embeddingstore 1")?;
        for reps in self.classes.values() {
            for e in &reps.embeddings {
                write!(f, "{} {}", reps.class_id, reps.task_index)?;
                for v in e {
                    write!(f, " {v:?}")?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let reader = BufReader::new(f);
        let mut store = EmbeddingStore::new();
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or(Error::Parse { line: 1, detail: "empty file".into() })?;
        if header?.trim() != "embeddingstore 1" {
            return Err(Error::Parse { line: 1, detail: "bad header".into() });
        }
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let class_id: ClassId = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { line: lineno, detail: "missing class id".into() })?;
            let task_index: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { line: lineno, detail: "missing task index".into() })?;
            let emb: Vec<f64> = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: lineno, detail: e.to_string() })?;
            if emb.is_empty() {
                return Err(Error::Parse { line: lineno, detail: "row has no embedding values".into() });
            }
            store
                .classes
                .entry(class_id)
                .or_insert_with(|| ClassRepresentatives { class_id, task_index, embeddings: Vec::new() })
                .embeddings
                .push(emb);
        }
        Ok(store)
    }
}
