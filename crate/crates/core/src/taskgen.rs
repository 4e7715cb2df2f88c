//! Deterministic generation and persistence of the base phase and the
//! sequential k-shot incremental tasks.
//!
//! Classes are Gaussian blobs: means sampled on the unit sphere, per-class
//! standard deviation `spread`. The optional hard-confusion mode places each
//! novel mean at a fixed small angle from a random base mean so that the
//! inter-task separation loss has real work to do.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ClassId;

/// One labeled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: ClassId,
}

/// How novel classes are grouped into incremental tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "group_size")]
pub enum Protocol {
    PerClass,
    PerGroup(usize),
}

/// One incremental task: its classes, the k-shot train set, the held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalTask {
    pub classes: Vec<ClassId>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// The base phase plus the ordered incremental tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub d_in: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub base_classes: Vec<ClassId>,
    pub base_train: Vec<Example>,
    pub base_test: Vec<Example>,
    pub tasks: Vec<IncrementalTask>,
}

/// Generator parameters for [`make_blob_stream`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobStreamParams {
    pub n_base: usize,
    pub n_novel: usize,
    pub k: usize,
    pub d_in: usize,
    pub spread: f64,
    pub protocol: Protocol,
    #[serde(default)]
    pub hard_confusion: bool,
    pub seed: u64,
}

pub const BASE_TRAIN_PER_CLASS: usize = 200;
pub const TEST_PER_CLASS: usize = 50;
/// Angle (radians) between a hard-confusion novel mean and its base anchor.
const CONFUSION_ANGLE: f64 = 0.35;

fn unit_gaussian_dir(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn sample_around(mean: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Fully reproducible blob stream: base task with abundant data, then
/// sequential k-shot tasks over disjoint novel classes.
pub fn make_blob_stream(params: &BlobStreamParams) -> Result<TaskStream> {
    if params.d_in < 2 {
        return Err(Error::InvalidConfig("d_in must be >= 2".into()));
    }
    if params.n_base < 1 || params.n_novel < 1 || params.k < 1 {
        return Err(Error::InvalidConfig("n_base, n_novel and k must be >= 1".into()));
    }
    if let Protocol::PerGroup(g) = params.protocol {
        if g < 1 {
            return Err(Error::InvalidConfig("group size must be >= 1".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let d = params.d_in;

    let base_means: Vec<Vec<f64>> = (0..params.n_base).map(|_| unit_gaussian_dir(d, &mut rng)).collect();
    let novel_means: Vec<Vec<f64>> = (0..params.n_novel)
        .map(|_| {
            if params.hard_confusion {
                // Fixed small angle from a random base mean.
                let anchor = &base_means[rng.gen_range(0..base_means.len())];
                let u = unit_gaussian_dir(d, &mut rng);
                let dot: f64 = u.iter().zip(anchor).map(|(a, b)| a * b).sum();
                let mut orth: Vec<f64> = u.iter().zip(anchor).map(|(a, b)| a - dot * b).collect();
                let n = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in orth.iter_mut() {
                    *x /= n;
                }
                anchor
                    .iter()
                    .zip(&orth)
                    .map(|(a, o)| CONFUSION_ANGLE.cos() * a + CONFUSION_ANGLE.sin() * o)
                    .collect()
            } else {
                unit_gaussian_dir(d, &mut rng)
            }
        })
        .collect();

    let base_classes: Vec<ClassId> = (0..params.n_base as ClassId).collect();
    let mut base_train = Vec::new();
    let mut base_test = Vec::new();
    for (c, mean) in base_means.iter().enumerate() {
        for _ in 0..BASE_TRAIN_PER_CLASS {
            base_train.push(Example { features: sample_around(mean, params.spread, &mut rng), label: c as ClassId });
        }
        for _ in 0..TEST_PER_CLASS {
            base_test.push(Example { features: sample_around(mean, params.spread, &mut rng), label: c as ClassId });
        }
    }

    let group_size = match params.protocol {
        Protocol::PerClass => 1,
        Protocol::PerGroup(g) => g,
    };
    let mut tasks = Vec::new();
    let novel_ids: Vec<ClassId> =
        (params.n_base as ClassId..(params.n_base + params.n_novel) as ClassId).collect();
    for chunk in novel_ids.chunks(group_size) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &cid in chunk {
            let mean = &novel_means[cid as usize - params.n_base];
            for _ in 0..params.k {
                train.push(Example { features: sample_around(mean, params.spread, &mut rng), label: cid });
            }
            for _ in 0..TEST_PER_CLASS {
                test.push(Example { features: sample_around(mean, params.spread, &mut rng), label: cid });
            }
        }
        tasks.push(IncrementalTask { classes: chunk.to_vec(), train, test });
    }

    let stream = TaskStream {
        d_in: d,
        seed: params.seed,
        protocol: params.protocol,
        base_classes,
        base_train,
        base_test,
        tasks,
    };
    stream.check_integrity()?;
    Ok(stream)
}

impl TaskStream {
    /// All classes known after task `n` (0 = base only).
    pub fn classes_through(&self, n: usize) -> Vec<ClassId> {
        let mut out = self.base_classes.clone();
        for task in self.tasks.iter().take(n) {
            out.extend_from_slice(&task.classes);
        }
        out
    }

    pub fn check_integrity(&self) -> Result<()> {
        let mut seen: std::collections::BTreeSet<ClassId> = self.base_classes.iter().copied().collect();
        if seen.len() != self.base_classes.len() {
            return Err(Error::StreamIntegrity("duplicate base class".into()));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::StreamIntegrity(format!("class {c} reappears in task {}", i + 1)));
                }
            }
            for ex in task.train.iter().chain(&task.test) {
                if !task.classes.contains(&ex.label) {
                    return Err(Error::StreamIntegrity(format!(
                        "task {} contains example with foreign label {}",
                        i + 1,
                        ex.label
                    )));
                }
                if ex.features.len() != self.d_in || ex.features.iter().any(|f| !f.is_finite()) {
                    return Err(Error::StreamIntegrity("malformed example features".into()));
                }
            }
        }
        Ok(())
    }

    /// Persists the stream as a flat text table, one example per row:
    /// `<split> <task_index> <label> <f0> ... <f(d-1)>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "blobstream 1")?;
        writeln!(f, "d_in {}", self.d_in)?;
        writeln!(f, "seed {}", self.seed)?;
        match self.protocol {
            Protocol::PerClass => writeln!(f, "protocol per_class")?,
            Protocol::PerGroup(g) => writeln!(f, "protocol per_group {g}")?,
        }
        let write_rows = |f: &mut std::fs::File, split: &str, task: usize, rows: &[Example]| -> Result<()> {
            for ex in rows {
                write!(f, "{split} {task} {}", ex.label)?;
                for v in &ex.features {
                    write!(f, " {v:?}")?;
                }
                writeln!(f)?;
            }
            Ok(())
        };
        write_rows(&mut f, "base-train", 0, &self.base_train)?;
        write_rows(&mut f, "base-test", 0, &self.base_test)?;
        for (i, task) in self.tasks.iter().enumerate() {
            write_rows(&mut f, "train", i + 1, &task.train)?;
            write_rows(&mut f, "test", i + 1, &task.test)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let reader = BufReader::new(f);
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

        let mut expect = |key: &str| -> Result<(usize, String)> {
            let (lineno, line) = lines
                .next()
                .ok_or(Error::Parse { line: 0, detail: format!("missing `{key}` header") })?;
            let line = line?;
            Ok((lineno, line))
        };
        let (l1, header) = expect("header")?;
        if header.trim() != "blobstream 1" {
            return Err(Error::Parse { line: l1, detail: "bad header".into() });
        }
        let (l2, d_line) = expect("d_in")?;
        let d_in: usize = d_line
            .strip_prefix("d_in ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or(Error::Parse { line: l2, detail: "bad d_in".into() })?;
        let (l3, s_line) = expect("seed")?;
        let seed: u64 = s_line
            .strip_prefix("seed ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or(Error::Parse { line: l3, detail: "bad seed".into() })?;
        let (l4, p_line) = expect("protocol")?;
        let protocol = match p_line.trim() {
            "protocol per_class" => Protocol::PerClass,
            other => {
                let g = other
                    .strip_prefix("protocol per_group ")
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or(Error::Parse { line: l4, detail: "bad protocol".into() })?;
                Protocol::PerGroup(g)
            }
        };

        let mut base_train = Vec::new();
        let mut base_test = Vec::new();
        let mut tasks: Vec<IncrementalTask> = Vec::new();
        for (lineno, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let split = parts
                .next()
                .ok_or(Error::Parse { line: lineno, detail: "missing split tag".into() })?
                .to_string();
            let task_index: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { line: lineno, detail: "missing task index".into() })?;
            let label: ClassId = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(Error::Parse { line: lineno, detail: "missing label".into() })?;
            let features: Vec<f64> = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: lineno, detail: e.to_string() })?;
            if features.len() != d_in {
                return Err(Error::Parse {
                    line: lineno,
                    detail: format!("expected {d_in} features, got {}", features.len()),
                });
            }
            let ex = Example { features, label };
            match split.as_str() {
                "base-train" => base_train.push(ex),
                "base-test" => base_test.push(ex),
                "train" | "test" => {
                    if task_index == 0 {
                        return Err(Error::Parse { line: lineno, detail: "task rows need index >= 1".into() });
                    }
                    while tasks.len() < task_index {
                        tasks.push(IncrementalTask { classes: Vec::new(), train: Vec::new(), test: Vec::new() });
                    }
                    let task = &mut tasks[task_index - 1];
                    if !task.classes.contains(&ex.label) {
                        task.classes.push(ex.label);
                        task.classes.sort_unstable();
                    }
                    if split == "train" {
                        task.train.push(ex);
                    } else {
                        task.test.push(ex);
                    }
                }
                other => {
                    return Err(Error::Parse { line: lineno, detail: format!("unknown split `{other}`") })
                }
            }
        }
        let mut base_classes: Vec<ClassId> = base_train.iter().map(|e| e.label).collect();
        base_classes.sort_unstable();
        base_classes.dedup();
        let stream = TaskStream { d_in, seed, protocol, base_classes, base_train, base_test, tasks };
        stream.check_integrity()?;
        Ok(stream)
    }
}
