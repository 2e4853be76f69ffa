//! Input assembly and the shared pre-norm transformer encoder.
//!
//! A sequence is `[START] text [SEP] images [SEP]`, or `[START] text [SEP]`
//! when there are no images. Text positions count up from the start token;
//! every image shares a single position id. Token type 0 marks text and
//! specials before the first separator, type 1 marks images and the
//! trailing separator.

use serde::{Deserialize, Serialize};

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::ndcore::{
    init_normal, self_attention, AttentionParams, BatchLayout, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub max_images: usize,
    pub image_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ff: 128,
            vocab_size: 512,
            max_len: 32,
            max_images: 4,
            image_dim: 32,
        }
    }
}

pub const TOKEN_TYPES: usize = 2;

impl BackboneConfig {
    pub fn start_id(&self) -> usize {
        self.vocab_size
    }

    pub fn sep_id(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.ff == 0 || self.vocab_size == 0 || self.image_dim == 0 {
            return fail("ff, vocab_size and image_dim must be positive".into());
        }
        // START, SEP, at least one text token, and a closing SEP after images.
        let needed = 3 + self.max_images + usize::from(self.max_images > 0);
        if self.max_len < needed {
            return fail(format!(
                "max_len {} cannot hold {} images plus specials ({needed})",
                self.max_len, self.max_images
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Word table row: a text token or a special id.
    Token(usize),
    /// Index into the sequence's image list.
    Image(usize),
}

/// One example laid out for the encoder, before embedding lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub slots: Vec<Slot>,
    pub token_types: Vec<usize>,
    pub positions: Vec<usize>,
    pub images: Vec<Vec<f64>>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Lay out `ex` under the truncation policy: images beyond `max_images`
/// are dropped first, then text is cut from the right to fit `max_len`.
pub fn assemble(ex: &Example, cfg: &BackboneConfig) -> Result<InputSequence> {
    if let Some(&t) = ex.text_tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Dataset(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(v) = ex.image_embeddings.iter().find(|v| v.len() != cfg.image_dim) {
        return Err(Error::Dimension(format!(
            "image embedding width {} differs from {}",
            v.len(),
            cfg.image_dim
        )));
    }
    let m = ex.image_embeddings.len().min(cfg.max_images);
    let specials = 2 + usize::from(m > 0);
    let room = cfg.max_len.checked_sub(specials + m).ok_or_else(|| {
        Error::Dimension(format!("{m} images overflow max_len {}", cfg.max_len))
    })?;
    let n = ex.text_tokens.len().min(room);

    let len = specials + m + n;
    let mut seq = InputSequence {
        slots: Vec::with_capacity(len),
        token_types: Vec::with_capacity(len),
        positions: Vec::with_capacity(len),
        images: ex.image_embeddings[..m].to_vec(),
    };
    let mut push = |slot, ty, pos| {
        seq.slots.push(slot);
        seq.token_types.push(ty);
        seq.positions.push(pos);
    };
    push(Slot::Token(cfg.start_id()), 0, 0);
    for (i, &t) in ex.text_tokens[..n].iter().enumerate() {
        push(Slot::Token(t), 0, i + 1);
    }
    push(Slot::Token(cfg.sep_id()), 0, n + 1);
    if m > 0 {
        for k in 0..m {
            push(Slot::Image(k), 1, n + 2);
        }
        push(Slot::Token(cfg.sep_id()), 1, n + 3);
    }
    Ok(seq)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: (ParamId, ParamId),
    pub attn: AttentionParams,
    pub ln2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

/// Handles for the shared encoder and its embeddings.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub word: ParamId,
    pub token_type: ParamId,
    pub position: ParamId,
    pub img_proj: (ParamId, ParamId),
    pub layers: Vec<EncoderLayer>,
    /// Present only when there is at least one layer.
    pub final_ln: Option<(ParamId, ParamId)>,
}

pub const EMBED_PREFIX: &str = "embed.";
pub const IMAGE_PROJ_PREFIX: &str = "embed.img_proj.";
pub const ENCODER_PREFIX: &str = "backbone.";

fn layer_norm_params(store: &mut ParamStore, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add(format!("{prefix}.gamma"), Tensor::full(&[d], 1.0))?,
        store.add(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
    ))
}

impl Backbone {
    pub fn register(store: &mut ParamStore, cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let emb_std = 1.0 / (d as f64).sqrt();
        let normal = |store: &mut ParamStore, name: &str, shape: &[usize], std: f64| {
            store.add(name, init_normal(seed, name, shape, std))
        };
        let word = normal(store, "embed.word", &[cfg.vocab_size + 3, d], emb_std)?;
        let token_type = normal(store, "embed.type", &[TOKEN_TYPES, d], emb_std)?;
        let position = normal(store, "embed.pos", &[cfg.max_len, d], emb_std)?;
        let img_w = normal(
            store,
            "embed.img_proj.w",
            &[cfg.image_dim, d],
            1.0 / (cfg.image_dim as f64).sqrt(),
        )?;
        let img_b = store.add("embed.img_proj.b", Tensor::zeros(&[d]))?;

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("backbone.layer{l}");
            let ln1 = layer_norm_params(store, &format!("{p}.ln1"), d)?;
            let attn = AttentionParams::register(store, &format!("{p}.attn"), d, cfg.heads, seed)?;
            let ln2 = layer_norm_params(store, &format!("{p}.ln2"), d)?;
            let w1 = normal(store, &format!("{p}.ff1.w"), &[d, cfg.ff], 1.0 / (d as f64).sqrt())?;
            let b1 = store.add(format!("{p}.ff1.b"), Tensor::zeros(&[cfg.ff]))?;
            let w2 = normal(store, &format!("{p}.ff2.w"), &[cfg.ff, d], 1.0 / (cfg.ff as f64).sqrt())?;
            let b2 = store.add(format!("{p}.ff2.b"), Tensor::zeros(&[d]))?;
            layers.push(EncoderLayer {
                ln1,
                attn,
                ln2,
                ff1: (w1, b1),
                ff2: (w2, b2),
            });
        }
        let final_ln = if cfg.layers > 0 {
            Some(layer_norm_params(store, "backbone.final_ln", d)?)
        } else {
            None
        };
        Ok(Self {
            config: cfg,
            word,
            token_type,
            position,
            img_proj: (img_w, img_b),
            layers,
            final_ln,
        })
    }

    /// Encoder layers and final norm.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.ln1.0, l.ln1.1]);
            ids.extend(l.attn.ids());
            ids.extend([l.ln2.0, l.ln2.1, l.ff1.0, l.ff1.1, l.ff2.0, l.ff2.1]);
        }
        if let Some((g, b)) = self.final_ln {
            ids.extend([g, b]);
        }
        ids
    }

    /// Word, type and position tables (not the image projection).
    pub fn embedding_ids(&self) -> Vec<ParamId> {
        vec![self.word, self.token_type, self.position]
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embedding_ids();
        ids.extend([self.img_proj.0, self.img_proj.1]);
        ids.extend(self.encoder_ids());
        ids
    }

    /// Freeze or unfreeze the encoder layers, and the embedding tables too
    /// when `include_embeddings`. Heads and the image projection are never
    /// touched.
    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool, include_embeddings: bool) {
        store.set_trainable(&self.encoder_ids(), !frozen);
        if include_embeddings {
            store.set_trainable(&self.embedding_ids(), !frozen);
        }
    }

    /// Embed a batch of sequences, padded to the longest one.
    pub fn embed(&self, tape: &mut Tape, batch: &[InputSequence]) -> Result<(Var, BatchLayout)> {
        let seq = batch.iter().map(InputSequence::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        let rows = batch.len() * seq;
        let (mut word_ids, mut word_rows) = (Vec::new(), Vec::new());
        let (mut images, mut image_rows) = (Vec::new(), Vec::new());
        let mut types = vec![0usize; rows];
        let mut positions = vec![0usize; rows];
        let mut valid = vec![false; rows];
        for (b, s) in batch.iter().enumerate() {
            for i in 0..seq {
                let r = b * seq + i;
                if i >= s.len() {
                    word_ids.push(self.config.pad_id());
                    word_rows.push(r);
                    continue;
                }
                valid[r] = true;
                types[r] = s.token_types[i];
                if s.positions[i] >= self.config.max_len {
                    return Err(Error::Dimension(format!(
                        "position {} beyond max_len {}",
                        s.positions[i], self.config.max_len
                    )));
                }
                positions[r] = s.positions[i];
                match s.slots[i] {
                    Slot::Token(id) => {
                        word_ids.push(id);
                        word_rows.push(r);
                    }
                    Slot::Image(k) => {
                        images.push(s.images[k].clone());
                        image_rows.push(r);
                    }
                }
            }
        }
        let table = tape.param(self.word);
        let words = tape.gather(table, &word_ids)?;
        let mut sources = vec![(words, word_rows)];
        if !images.is_empty() {
            let raw = tape.constant(Tensor::from_rows(&images)?);
            let (w, b) = (tape.param(self.img_proj.0), tape.param(self.img_proj.1));
            let projected = tape.linear(raw, w, b)?;
            sources.push((projected, image_rows));
        }
        let base = tape.place_rows(rows, &sources)?;
        let type_table = tape.param(self.token_type);
        let type_rows = tape.gather(type_table, &types)?;
        let pos_table = tape.param(self.position);
        let pos_rows = tape.gather(pos_table, &positions)?;
        let x = tape.add(base, type_rows)?;
        let x = tape.add(x, pos_rows)?;
        Ok((x, BatchLayout::new(batch.len(), seq, valid)?))
    }

    /// Run the encoder layers over embedded rows.
    pub fn encode(&self, tape: &mut Tape, x: Var, layout: &BatchLayout) -> Result<Var> {
        self.encode_traced(tape, x, layout, &mut Vec::new())
    }

    /// As [`Backbone::encode`], also collecting every layer-norm output.
    pub fn encode_traced(
        &self,
        tape: &mut Tape,
        mut x: Var,
        layout: &BatchLayout,
        norms: &mut Vec<Var>,
    ) -> Result<Var> {
        for l in &self.layers {
            let (g1, b1) = (tape.param(l.ln1.0), tape.param(l.ln1.1));
            let h = tape.layer_norm(x, g1, b1)?;
            norms.push(h);
            let a = self_attention(tape, h, &l.attn, layout)?;
            x = tape.add(x, a)?;
            let (g2, b2) = (tape.param(l.ln2.0), tape.param(l.ln2.1));
            let h = tape.layer_norm(x, g2, b2)?;
            norms.push(h);
            let (w1, c1) = (tape.param(l.ff1.0), tape.param(l.ff1.1));
            let (w2, c2) = (tape.param(l.ff2.0), tape.param(l.ff2.1));
            let f = tape.linear(h, w1, c1)?;
            let f = tape.gelu(f);
            let f = tape.linear(f, w2, c2)?;
            x = tape.add(x, f)?;
        }
        if let Some((g, b)) = self.final_ln {
            let (g, b) = (tape.param(g), tape.param(b));
            x = tape.layer_norm(x, g, b)?;
            norms.push(x);
        }
        Ok(x)
    }

    /// Embed then encode.
    pub fn forward(&self, tape: &mut Tape, batch: &[InputSequence]) -> Result<(Var, BatchLayout)> {
        let (x, layout) = self.embed(tape, batch)?;
        Ok((self.encode(tape, x, &layout)?, layout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{Head, HeadConfig};
    use crate::ndcore::gradcheck::{check_gradients, random_tensor};
    use crate::ndcore::{AdamW, AdamWConfig, Gradients};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ff: 24,
            vocab_size: 20,
            max_len: 12,
            max_images: 2,
            image_dim: 5,
        }
    }

    fn example(tokens: &[usize], images: usize, seed: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Example {
            task_id: 0,
            label: 0,
            text_tokens: tokens.to_vec(),
            image_embeddings: (0..images)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    fn embedded(store: &ParamStore, bb: &Backbone, seqs: &[InputSequence]) -> Tensor {
        let mut tape = Tape::new(store);
        let (x, _) = bb.embed(&mut tape, seqs).unwrap();
        tape.value(x).clone()
    }

    fn encoded(store: &ParamStore, bb: &Backbone, seqs: &[InputSequence]) -> Tensor {
        let mut tape = Tape::new(store);
        let (x, _) = bb.forward(&mut tape, seqs).unwrap();
        tape.value(x).clone()
    }

    #[test]
    fn text_only_layout() {
        let c = cfg();
        let s = assemble(&example(&[3, 4, 5], 0, 0), &c).unwrap();
        assert_eq!(
            s.slots,
            vec![Slot::Token(20), Slot::Token(3), Slot::Token(4), Slot::Token(5), Slot::Token(21)]
        );
        assert_eq!(s.token_types, vec![0; 5]);
        assert_eq!(s.positions, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn image_layout_shares_position() {
        let c = cfg();
        let s = assemble(&example(&[3, 4], 2, 0), &c).unwrap();
        assert_eq!(
            s.slots,
            vec![
                Slot::Token(20),
                Slot::Token(3),
                Slot::Token(4),
                Slot::Token(21),
                Slot::Image(0),
                Slot::Image(1),
                Slot::Token(21)
            ]
        );
        assert_eq!(s.token_types, vec![0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(s.positions, vec![0, 1, 2, 3, 4, 4, 5]);
    }

    #[test]
    fn images_get_identical_position_vectors() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 1).unwrap();
        let mut ex = example(&[1, 2], 2, 3);
        ex.image_embeddings[1] = ex.image_embeddings[0].clone();
        let s = assemble(&ex, &bb.config).unwrap();
        let e = embedded(&store, &bb, &[s]);
        assert_eq!(e.row(4), e.row(5));
        assert!(e.row(4).iter().zip(e.row(3)).any(|(a, b)| a != b));
    }

    #[test]
    fn truncation_policy() {
        let c = cfg();
        let long: Vec<usize> = (0..30).map(|i| i % 20).collect();
        let s = assemble(&example(&long, 5, 0), &c).unwrap();
        assert_eq!(s.len(), c.max_len);
        assert_eq!(s.images.len(), 2);
        let text: Vec<usize> = s
            .slots
            .iter()
            .filter_map(|sl| match sl {
                Slot::Token(t) if *t < 20 => Some(*t),
                _ => None,
            })
            .collect();
        assert_eq!(text, long[..c.max_len - 5].to_vec());
        assert!(s.positions.iter().all(|&p| p < c.max_len));
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = cfg();
        assert!(assemble(&example(&[25], 0, 0), &c).is_err());
        let mut ex = example(&[1], 1, 0);
        ex.image_embeddings[0].push(0.0);
        assert!(assemble(&ex, &c).is_err());
        assert!(BackboneConfig { max_len: 5, ..c }.validate().is_err());
        assert!(BackboneConfig { heads: 3, ..c }.validate().is_err());
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, BackboneConfig { layers: 0, ..cfg() }, 2).unwrap();
        assert!(bb.final_ln.is_none());
        let seqs = [assemble(&example(&[1, 2, 3], 1, 4), &bb.config).unwrap()];
        assert_eq!(embedded(&store, &bb, &seqs), encoded(&store, &bb, &seqs));
    }

    #[test]
    fn padding_content_never_leaks() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 5).unwrap();
        let short = assemble(&example(&[1, 2], 0, 1), &bb.config).unwrap();
        let long = assemble(&example(&[3, 4, 5, 6, 7, 8], 2, 2), &bb.config).unwrap();
        let alone = encoded(&store, &bb, std::slice::from_ref(&short));
        let batched = encoded(&store, &bb, &[short.clone(), long]);
        for r in 0..short.len() {
            for (a, b) in alone.row(r).iter().zip(batched.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Changing the PAD embedding row leaves valid outputs unchanged.
        let pad = bb.config.pad_id();
        let before = encoded(&store, &bb, &[short.clone(), assemble(&example(&[9; 6], 2, 2), &bb.config).unwrap()]);
        let table = &mut store.get_mut(bb.word).value;
        let d = bb.config.hidden;
        table.data_mut()[pad * d..(pad + 1) * d].iter_mut().for_each(|x| *x = 7.5);
        let after = encoded(&store, &bb, &[short.clone(), assemble(&example(&[9; 6], 2, 2), &bb.config).unwrap()]);
        for r in 0..short.len() {
            for (a, b) in before.row(r).iter().zip(after.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_order_permutes_outputs() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 6).unwrap();
        let head = Head::register(&mut store, "head.0", HeadConfig::attention(16, 8, 2, 3), 6).unwrap();
        let ex = example(&[1, 2, 3], 2, 7);
        let mut swapped = ex.clone();
        swapped.image_embeddings.swap(0, 1);
        let run = |ex: &Example| {
            let mut tape = Tape::new(&store);
            let seq = assemble(ex, &bb.config).unwrap();
            let (x, layout) = bb.forward(&mut tape, &[seq]).unwrap();
            let logits = head.forward(&mut tape, x, &layout).unwrap();
            (tape.value(x).clone(), tape.value(logits).clone())
        };
        let (xa, la) = run(&ex);
        let (xb, lb) = run(&swapped);
        assert!(la.max_abs_diff(&lb) < 1e-9);
        // Image rows are 5 and 6 after START, 3 text tokens and SEP.
        for (a, b) in [(5, 6), (6, 5), (0, 0), (7, 7)] {
            for (u, v) in xa.row(a).iter().zip(xb.row(b)) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_outputs_are_standardized() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 8).unwrap();
        let seqs = [
            assemble(&example(&[1, 2, 3, 4], 2, 1), &bb.config).unwrap(),
            assemble(&example(&[5], 1, 2), &bb.config).unwrap(),
        ];
        let mut tape = Tape::new(&store);
        let (x, layout) = bb.embed(&mut tape, &seqs).unwrap();
        let mut norms = Vec::new();
        bb.encode_traced(&mut tape, x, &layout, &mut norms).unwrap();
        assert_eq!(norms.len(), 2 * 2 + 1);
        // Fresh gamma=1, beta=0 so outputs equal the pre-affine normalization.
        for v in norms {
            let t = tape.value(v);
            for r in (0..t.rows()).filter(|&r| layout.valid[r]) {
                let row = t.row(r);
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
                assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
            }
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 9).unwrap();
        let head = Head::register(&mut store, "head.0", HeadConfig::attention(16, 8, 2, 3), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // Perturb norms and biases away from their exact init values.
        for id in bb.all_ids().into_iter().chain(head.param_ids()) {
            let t = &mut store.get_mut(id).value;
            let shape = t.shape().to_vec();
            let noise = random_tensor(&mut rng, &shape, 0.1);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
        let seqs = vec![
            assemble(&example(&[1, 2, 3], 1, 11), &bb.config).unwrap(),
            assemble(&example(&[4, 5], 2, 12), &bb.config).unwrap(),
        ];
        let report = check_gradients(&mut store, 1e-6, |tape| {
            let (x, layout) = bb.forward(tape, &seqs)?;
            let logits = head.forward(tape, x, &layout)?;
            tape.softmax_xent(logits, &[2, 0])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        assert_eq!(report.checked_scalars, store.scalar_count(""));
    }

    fn nonzero_grads(store: &ParamStore) -> Gradients {
        let mut g = Gradients::with_len(store.len());
        for (id, p) in store.iter() {
            g.set(id, vec![0.3; p.value.len()]);
        }
        g
    }

    #[test]
    fn freezing_blocks_only_encoder_updates() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 3).unwrap();
        let head = Head::register(&mut store, "head.0", HeadConfig::fc(16, 3), 3).unwrap();
        let before = store.clone();
        bb.set_frozen(&mut store, true, false);
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = nonzero_grads(&store);
        opt.step(&mut store, &g, 0.1).unwrap();
        for id in bb.encoder_ids() {
            assert_eq!(store.value(id).data(), before.value(id).data());
        }
        for id in head.param_ids().into_iter().chain([bb.img_proj.0, bb.word]) {
            assert_ne!(store.value(id).data(), before.value(id).data());
        }
        bb.set_frozen(&mut store, false, false);
        let frozen_state = store.clone();
        let g = nonzero_grads(&store);
        opt.step(&mut store, &g, 0.1).unwrap();
        for id in bb.encoder_ids() {
            assert_ne!(store.value(id).data(), frozen_state.value(id).data());
        }
        bb.set_frozen(&mut store, true, true);
        assert!(!store.get(bb.word).trainable);
        assert!(store.get(bb.img_proj.0).trainable);
    }

    #[test]
    fn backbone_shared_across_heads() {
        let mut store = ParamStore::new();
        let bb = Backbone::register(&mut store, cfg(), 3).unwrap();
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        let h0 = Head::register(&mut store, "head.0", HeadConfig::fc(16, 3), 3).unwrap();
        let h1 = Head::register(&mut store, "head.1", HeadConfig::attention(16, 8, 2, 5), 3).unwrap();
        let seq = [assemble(&example(&[1, 2], 0, 1), &bb.config).unwrap()];
        let mut used = Vec::new();
        for h in [&h0, &h1] {
            let mut tape = Tape::new(&store);
            let (x, layout) = bb.forward(&mut tape, &seq).unwrap();
            let l = h.forward(&mut tape, x, &layout).unwrap();
            let loss = tape.softmax_xent(l, &[1]).unwrap();
            let g = tape.backward(loss).unwrap();
            let ids: Vec<ParamId> = bb.all_ids().into_iter().filter(|&id| g.get(id).is_some()).collect();
            used.push(ids);
        }
        assert_eq!(used[0], used[1]);
        assert_eq!(store.iter().take(names.len()).map(|(_, p)| p.name.clone()).collect::<Vec<_>>(), names);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn encoder_output_finite(
            tokens in prop::collection::vec(0usize..20, 0..15),
            images in 0usize..4,
            seed in 0u64..1000,
        ) {
            let mut store = ParamStore::new();
            let bb = Backbone::register(&mut store, cfg(), seed).unwrap();
            let seq = assemble(&example(&tokens, images, seed), &bb.config).unwrap();
            prop_assert!(seq.len() <= bb.config.max_len);
            let text: Vec<usize> = seq.positions.iter().zip(&seq.token_types)
                .filter(|(_, &t)| t == 0).map(|(&p, _)| p).collect();
            prop_assert!(text.windows(2).all(|w| w[1] == w[0] + 1));
            prop_assert!(encoded(&store, &bb, &[seq]).is_finite());
        }
    }
}
