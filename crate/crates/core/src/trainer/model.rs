//! The multi-task model: one shared backbone and one head per task.

use serde::{Deserialize, Serialize};

use crate::backbone::{assemble, Backbone, BackboneConfig, InputSequence};
use crate::datagen::{Example, MultiTaskDataset};
use crate::dypa::{allocate, score_tasks, ComplexityScore, DypaConfig};
use crate::error::{Error, Result};
use crate::evalsuite::Classifier;
use crate::heads::{Head, HeadAllocation, HeadConfig, HeadKind};
use crate::ndcore::{ParamStore, Tape, Var};

pub const HEAD_PREFIX: &str = "head.";
const PREDICT_CHUNK: usize = 64;

/// Head shape used when quartile allocation is off or not applicable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub d_t: usize,
    pub attn_heads: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            kind: HeadKind::Attention,
            d_t: 16,
            attn_heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadSpec,
    /// Quartile head widths; `None` gives every task `head`.
    pub dypa: Option<DypaConfig>,
    /// Freeze embedding tables along with the encoder.
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadSpec::default(),
            dypa: None,
            freeze_embeddings: false,
        }
    }
}

impl ModelConfig {
    fn fixed_head(&self, num_classes: usize) -> HeadConfig {
        let d_b = self.backbone.hidden;
        match self.head.kind {
            HeadKind::Fc => HeadConfig::fc(d_b, num_classes),
            HeadKind::Attention => HeadConfig::attention(d_b, self.head.d_t, self.head.attn_heads, num_classes),
        }
    }

    /// Head per task for `ds`. Quartile allocation needs four tasks; with
    /// fewer it falls back to the fixed head and returns no scores.
    pub fn allocate(&self, ds: &MultiTaskDataset) -> Result<(HeadAllocation, Option<Vec<ComplexityScore>>)> {
        let classes = ds.class_counts();
        if let Some(dypa) = &self.dypa {
            if ds.num_tasks() >= 4 {
                let scores = score_tasks(&ds.task_stats(), dypa.source)?;
                let alloc = allocate(&scores, &classes, dypa, self.backbone.hidden)?;
                return Ok((alloc, Some(scores)));
            }
        }
        let heads = classes.iter().map(|&c| self.fixed_head(c)).collect();
        Ok((HeadAllocation { heads }, None))
    }

    pub fn check_dataset(&self, ds: &MultiTaskDataset) -> Result<()> {
        let b = &self.backbone;
        if b.vocab_size != ds.vocab_size || b.image_dim != ds.image_dim {
            return Err(Error::Config(format!(
                "backbone expects vocab {} and image width {}, dataset has {} and {}",
                b.vocab_size, b.image_dim, ds.vocab_size, ds.image_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MtlModel {
    pub config: ModelConfig,
    pub allocation: HeadAllocation,
    pub backbone: Backbone,
    pub heads: Vec<Head>,
    pub store: ParamStore,
}

impl MtlModel {
    pub fn new(config: ModelConfig, allocation: HeadAllocation, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, config.backbone, seed)?;
        let heads = allocation
            .heads
            .iter()
            .enumerate()
            .map(|(t, h)| {
                if h.d_backbone != config.backbone.hidden {
                    return Err(Error::Config(format!(
                        "head {t} built for width {}, backbone is {}",
                        h.d_backbone, config.backbone.hidden
                    )));
                }
                Head::register(&mut store, &format!("{HEAD_PREFIX}{t}"), *h, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            allocation,
            backbone,
            heads,
            store,
        })
    }

    /// Allocate heads for `ds` and build a fresh model.
    pub fn for_dataset(config: &ModelConfig, ds: &MultiTaskDataset, seed: u64) -> Result<Self> {
        config.check_dataset(ds)?;
        let (alloc, _) = config.allocate(ds)?;
        Self::new(config.clone(), alloc, seed)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.backbone
            .set_frozen(&mut self.store, frozen, self.config.freeze_embeddings);
    }

    /// Scalars registered under task heads.
    pub fn task_specific_scalars(&self) -> usize {
        self.store.scalar_count(HEAD_PREFIX)
    }

    pub fn assemble(&self, examples: &[Example]) -> Result<Vec<InputSequence>> {
        examples.iter().map(|e| assemble(e, &self.config.backbone)).collect()
    }

    /// Logits `[batch, C_task]` recorded on `tape`.
    pub fn logits(&self, tape: &mut Tape, task: usize, batch: &[InputSequence]) -> Result<Var> {
        let head = self.heads.get(task).ok_or_else(|| {
            Error::Evaluation(format!("no head for task {task}"))
        })?;
        let (x, layout) = self.backbone.forward(tape, batch)?;
        head.forward(tape, x, &layout)
    }

    pub fn predict_sequences(&self, task: usize, seqs: &[InputSequence]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new(&self.store);
            let logits = self.logits(&mut tape, task, chunk)?;
            let t = tape.value(logits);
            for r in 0..t.rows() {
                let row = t.row(r);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                out.push(best);
            }
        }
        Ok(out)
    }
}

impl Classifier for MtlModel {
    fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn predict(&self, task_id: usize, examples: &[Example]) -> Result<Vec<usize>> {
        let seqs = self.assemble(examples)?;
        self.predict_sequences(task_id, &seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};
    use crate::dypa::allocation_param_total;

    fn dataset(k: usize) -> MultiTaskDataset {
        generate(&GenConfig {
            num_tasks: k,
            vocab_size: 64,
            latent_dim: 8,
            image_dim: 6,
            size_median: 30.0,
            classes_max: 8,
            tokens_per_example: 6,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn config(dypa: bool) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                layers: 1,
                hidden: 16,
                heads: 2,
                ff: 16,
                vocab_size: 64,
                max_len: 12,
                max_images: 2,
                image_dim: 6,
            },
            head: HeadSpec { kind: HeadKind::Attention, d_t: 8, attn_heads: 2 },
            dypa: dypa.then(|| DypaConfig { base_dt: 2, growth: 2, attn_heads: 2, ..Default::default() }),
            freeze_embeddings: false,
        }
    }

    #[test]
    fn allocation_total_matches_registered_scalars() {
        let ds = dataset(9);
        for dypa in [false, true] {
            let cfg = config(dypa);
            let (alloc, scores) = cfg.allocate(&ds).unwrap();
            assert_eq!(scores.is_some(), dypa);
            let model = MtlModel::new(cfg, alloc.clone(), 1).unwrap();
            assert_eq!(model.task_specific_scalars(), allocation_param_total(&alloc));
        }
    }

    #[test]
    fn few_tasks_fall_back_to_fixed_heads() {
        let ds = dataset(3);
        let (alloc, scores) = config(true).allocate(&ds).unwrap();
        assert!(scores.is_none());
        assert!(alloc.heads.iter().all(|h| h.d_t == 8));
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let ds = dataset(2);
        let mut cfg = config(false);
        cfg.backbone.vocab_size = 65;
        assert!(matches!(MtlModel::for_dataset(&cfg, &ds, 0), Err(Error::Config(_))));
    }

    #[test]
    fn predictions_in_range_and_chunk_independent() {
        let ds = dataset(2);
        let model = MtlModel::for_dataset(&config(false), &ds, 3).unwrap();
        let exs = &ds.train[0];
        let all = model.predict(0, exs).unwrap();
        let one_by_one: Vec<usize> = exs.iter().map(|e| model.predict(0, std::slice::from_ref(e)).unwrap()[0]).collect();
        assert_eq!(all, one_by_one);
        assert!(all.iter().all(|&p| p < ds.tasks[0].num_classes));
        assert!(model.predict(5, exs).is_err());
    }
}
