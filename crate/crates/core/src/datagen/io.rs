//! Dataset directories: a TOML manifest plus one JSON record per example.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{test_size, Example, GenConfig, MultiTaskDataset, TaskSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    vocab_size: usize,
    image_dim: usize,
    max_text_len: usize,
    test_fraction: f64,
    split_seed: u64,
    #[serde(default)]
    tasks: Vec<TaskSpec>,
    generation: Option<GenConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task_id: usize,
    split: Split,
    label: usize,
    text_tokens: Vec<usize>,
    image_embeddings: Vec<Vec<f64>>,
}

/// Write `ds` under `dir`. Records go out task by task, train before test,
/// each side in stored order.
pub fn export(ds: &MultiTaskDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        vocab_size: ds.vocab_size,
        image_dim: ds.image_dim,
        max_text_len: ds.max_text_len,
        test_fraction: ds.test_fraction,
        split_seed: ds.split_seed,
        tasks: ds.tasks.clone(),
        generation: ds.generation.clone(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Dataset(format!("cannot encode manifest: {e}")))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    let epath = dir.join(EXAMPLES_FILE);
    let file = File::create(&epath).map_err(|e| Error::io(&epath, e))?;
    let mut out = BufWriter::new(file);
    for t in 0..ds.num_tasks() {
        for (split, exs) in [(Split::Train, &ds.train[t]), (Split::Test, &ds.test[t])] {
            for ex in exs {
                let rec = Record {
                    task_id: ex.task_id,
                    split,
                    label: ex.label,
                    text_tokens: ex.text_tokens.clone(),
                    image_embeddings: ex.image_embeddings.clone(),
                };
                serde_json::to_writer(&mut out, &rec)
                    .map_err(|e| Error::io(&epath, e.into()))?;
                out.write_all(b"\n").map_err(|e| Error::io(&epath, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(&epath, e))
}

fn ingest_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Load and validate a dataset directory. Line 0 in an error means a check
/// over the whole file rather than one record.
pub fn ingest(dir: &Path) -> Result<MultiTaskDataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(&text, s.start));
        ingest_err(&mpath, line, e.message().to_string())
    })?;
    if m.version != FORMAT_VERSION {
        return Err(ingest_err(&mpath, 0, format!("unsupported version {}", m.version)));
    }
    if m.tasks.is_empty() {
        return Err(ingest_err(&mpath, 0, "manifest lists no tasks"));
    }
    if !(m.test_fraction > 0.0 && m.test_fraction < 1.0) {
        return Err(ingest_err(&mpath, 0, format!("test_fraction {} outside (0, 1)", m.test_fraction)));
    }
    for (i, t) in m.tasks.iter().enumerate() {
        if t.task_id != i {
            return Err(ingest_err(&mpath, 0, format!("task ids not dense: entry {i} has id {}", t.task_id)));
        }
        if t.num_classes < 2 || t.num_examples < t.num_classes {
            return Err(ingest_err(
                &mpath,
                0,
                format!("task {i}: {} examples for {} classes", t.num_examples, t.num_classes),
            ));
        }
    }

    let k = m.tasks.len();
    let mut ds = MultiTaskDataset {
        tasks: m.tasks,
        train: vec![Vec::new(); k],
        test: vec![Vec::new(); k],
        vocab_size: m.vocab_size,
        image_dim: m.image_dim,
        max_text_len: m.max_text_len,
        test_fraction: m.test_fraction,
        split_seed: m.split_seed,
        generation: m.generation,
    };

    let epath: PathBuf = dir.join(EXAMPLES_FILE);
    let file = File::open(&epath).map_err(|e| Error::io(&epath, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(&epath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| ingest_err(&epath, lineno, format!("malformed record: {e}")))?;
        let Some(task) = ds.tasks.get(rec.task_id) else {
            return Err(ingest_err(&epath, lineno, format!("unknown task_id {}", rec.task_id)));
        };
        let ex = Example {
            task_id: rec.task_id,
            label: rec.label,
            text_tokens: rec.text_tokens,
            image_embeddings: rec.image_embeddings,
        };
        ds.check_example(&ex, task)
            .map_err(|e| ingest_err(&epath, lineno, strip_prefix(e)))?;
        match rec.split {
            Split::Train => ds.train[rec.task_id].push(ex),
            Split::Test => ds.test[rec.task_id].push(ex),
        }
    }

    for t in &ds.tasks {
        let (tr, te) = (ds.train[t.task_id].len(), ds.test[t.task_id].len());
        if tr + te != t.num_examples {
            return Err(ingest_err(
                &epath,
                0,
                format!("task {} declares {} examples, found {}", t.task_id, t.num_examples, tr + te),
            ));
        }
        let want = test_size(t.num_examples, ds.test_fraction);
        if te != want {
            return Err(ingest_err(
                &epath,
                0,
                format!("task {} has {te} test examples, expected {want}", t.task_id),
            ));
        }
    }
    Ok(ds)
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Dataset(m) => m,
        other => other.to_string(),
    }
}
