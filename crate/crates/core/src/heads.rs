//! Task-specific classification heads.
//!
//! Two kinds read the backbone's output tokens:
//!
//! - `fc`: mean-pool, `d_b -> d_b` fully-connected layer with ReLU, linear
//!   classifier to `C` logits.
//! - `attention`: project tokens to `d_t`, one multi-head self-attention
//!   layer at `d_t`, mean-pool, linear classifier. No positional signal is
//!   added inside the head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{self_attention, AttentionParams, BatchLayout, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Fc,
    Attention,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Fc => "fc",
            HeadKind::Attention => "attention",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(Self::Fc),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }
}

/// Largest allowed `d_t / d_b`. Quartile ladders may exceed the backbone
/// width (a 1024-wide head on a 768-wide backbone).
pub const MAX_WIDTH_RATIO: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub d_backbone: usize,
    /// Inner width of an attention head; ignored for `fc`.
    pub d_t: usize,
    pub attn_heads: usize,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn fc(d_backbone: usize, num_classes: usize) -> Self {
        Self {
            kind: HeadKind::Fc,
            d_backbone,
            d_t: d_backbone,
            attn_heads: 1,
            num_classes,
        }
    }

    pub fn attention(d_backbone: usize, d_t: usize, attn_heads: usize, num_classes: usize) -> Self {
        Self {
            kind: HeadKind::Attention,
            d_backbone,
            d_t,
            attn_heads,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.d_backbone == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        if self.kind == HeadKind::Attention {
            if self.d_t == 0 || self.d_t > MAX_WIDTH_RATIO * self.d_backbone {
                return Err(Error::Config(format!(
                    "head width d_t={} outside (0, {}]",
                    self.d_t,
                    MAX_WIDTH_RATIO * self.d_backbone
                )));
            }
            if self.attn_heads == 0 || self.d_t % self.attn_heads != 0 {
                return Err(Error::Config(format!(
                    "head width d_t={} not divisible by {} attention heads",
                    self.d_t, self.attn_heads
                )));
            }
        }
        Ok(())
    }
}

/// Scalars (weights and biases) held by a head with this config.
pub fn param_count(cfg: &HeadConfig) -> usize {
    let (db, c) = (cfg.d_backbone, cfg.num_classes);
    match cfg.kind {
        HeadKind::Fc => db * db + db + db * c + c,
        HeadKind::Attention => {
            let dt = cfg.d_t;
            (db * dt + dt) + 4 * (dt * dt + dt) + (dt * c + c)
        }
    }
}

/// Head kind and width for every task, indexed by task id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadAllocation {
    pub heads: Vec<HeadConfig>,
}

impl HeadAllocation {
    /// The same head shape for every task, sized to each task's classes.
    pub fn uniform(template: &HeadConfig, class_counts: &[usize]) -> Self {
        Self {
            heads: class_counts
                .iter()
                .map(|&c| HeadConfig {
                    num_classes: c,
                    ..*template
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.heads.iter().map(param_count).sum()
    }
}

#[derive(Clone, Debug)]
pub struct FcHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttnHead {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub attn: AttentionParams,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

#[derive(Clone, Debug)]
pub enum HeadParams {
    Fc(FcHead),
    Attention(AttnHead),
}

/// A registered head: its config plus parameter handles under `prefix`.
#[derive(Clone, Debug)]
pub struct Head {
    pub config: HeadConfig,
    pub prefix: String,
    pub params: HeadParams,
}

impl Head {
    /// Register a head's parameters under `prefix`. Weights are
    /// `N(0, 1/fan_in)`, biases zero.
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (db, c) = (cfg.d_backbone, cfg.num_classes);
        let weight = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| {
            let full = format!("{prefix}.{name}");
            let t = crate::ndcore::init_normal(seed, &full, &[rows, cols], 1.0 / (rows as f64).sqrt());
            store.add(full, t)
        };
        let bias = |store: &mut ParamStore, name: &str, n: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::zeros(&[n]))
        };
        let params = match cfg.kind {
            HeadKind::Fc => HeadParams::Fc(FcHead {
                w1: weight(store, "fc.w", db, db)?,
                b1: bias(store, "fc.b", db)?,
                w2: weight(store, "cls.w", db, c)?,
                b2: bias(store, "cls.b", c)?,
            }),
            HeadKind::Attention => {
                let dt = cfg.d_t;
                let proj_w = weight(store, "proj.w", db, dt)?;
                let proj_b = bias(store, "proj.b", dt)?;
                let attn = AttentionParams::register(
                    store,
                    &format!("{prefix}.attn"),
                    dt,
                    cfg.attn_heads,
                    seed,
                )?;
                HeadParams::Attention(AttnHead {
                    proj_w,
                    proj_b,
                    attn,
                    cls_w: weight(store, "cls.w", dt, c)?,
                    cls_b: bias(store, "cls.b", c)?,
                })
            }
        };
        Ok(Self {
            config: cfg,
            prefix: prefix.to_string(),
            params,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            HeadParams::Fc(h) => vec![h.w1, h.b1, h.w2, h.b2],
            HeadParams::Attention(h) => {
                let mut ids = vec![h.proj_w, h.proj_b];
                ids.extend(h.attn.ids());
                ids.extend([h.cls_w, h.cls_b]);
                ids
            }
        }
    }

    /// Scalars actually registered in `store` for this head.
    pub fn registered_scalars(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Logits `[batch, C]` from backbone tokens `[batch*seq, d_b]`.
    pub fn forward(&self, tape: &mut Tape, tokens: Var, layout: &BatchLayout) -> Result<Var> {
        let width = tape.value(tokens).cols();
        if width != self.config.d_backbone {
            return Err(Error::Dimension(format!(
                "head `{}` expects width {}, got {width}",
                self.prefix, self.config.d_backbone
            )));
        }
        match &self.params {
            HeadParams::Fc(h) => fc_head_forward(tape, tokens, layout, h),
            HeadParams::Attention(h) => attn_head_forward(tape, tokens, layout, h),
        }
    }
}

pub fn fc_head_forward(tape: &mut Tape, tokens: Var, layout: &BatchLayout, h: &FcHead) -> Result<Var> {
    let pooled = tape.masked_mean(tokens, layout)?;
    let (w1, b1, w2, b2) = (tape.param(h.w1), tape.param(h.b1), tape.param(h.w2), tape.param(h.b2));
    let hidden = tape.linear(pooled, w1, b1)?;
    let hidden = tape.relu(hidden);
    tape.linear(hidden, w2, b2)
}

pub fn attn_head_forward(
    tape: &mut Tape,
    tokens: Var,
    layout: &BatchLayout,
    h: &AttnHead,
) -> Result<Var> {
    let (pw, pb) = (tape.param(h.proj_w), tape.param(h.proj_b));
    let low = tape.linear(tokens, pw, pb)?;
    let mixed = self_attention(tape, low, &h.attn, layout)?;
    let pooled = tape.masked_mean(mixed, layout)?;
    let (cw, cb) = (tape.param(h.cls_w), tape.param(h.cls_b));
    tape.linear(pooled, cw, cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::gradcheck::{check_gradients, random_tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(store: &ParamStore, head: &Head, x: &Tensor, layout: &BatchLayout) -> Tensor {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let out = head.forward(&mut tape, xv, layout).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn full_scale_counts() {
        let fc = param_count(&HeadConfig::fc(768, 10));
        assert_eq!(fc, 598_282);
        assert_eq!(100 * fc, 59_828_200);
        let attn = param_count(&HeadConfig::attention(768, 64, 2, 10));
        assert_eq!(attn, 49_216 + 16_640 + 650);
        assert_eq!(attn, 66_506);
        assert!((fc as f64 / attn as f64 - 9.0).abs() < 0.01);
        let wide = param_count(&HeadConfig::attention(768, 768, 4, 10));
        assert!(wide > fc);
    }

    #[test]
    fn reduction_holds_across_class_counts() {
        for c in 5..=100 {
            let fc = param_count(&HeadConfig::fc(768, c)) as f64;
            let at = param_count(&HeadConfig::attention(768, 64, 2, c)) as f64;
            assert!(fc / at >= 8.0, "C={c}: {}", fc / at);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(HeadConfig::attention(16, 6, 4, 3).validate().is_err());
        assert!(HeadConfig::attention(16, 8, 2, 1).validate().is_err());
        assert!(HeadConfig::attention(16, 64, 2, 3).validate().is_err());
        assert!(HeadConfig::attention(16, 32, 2, 3).validate().is_ok());
    }

    #[test]
    fn zero_fc_weights_give_zero_logits() {
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, "h", HeadConfig::fc(6, 3), 1).unwrap();
        for id in head.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[4, 6], 3.0);
        let out = logits(&store, &head, &x, &BatchLayout::dense(4));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_fc_pooling_is_identity() {
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, "h", HeadConfig::fc(5, 3), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[1, 5], 1.0);
        let out = logits(&store, &head, &x, &BatchLayout::dense(1));
        let HeadParams::Fc(h) = &head.params else { unreachable!() };
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let (w1, b1, w2, b2) = (tape.param(h.w1), tape.param(h.b1), tape.param(h.w2), tape.param(h.b2));
        let hid = tape.linear(xv, w1, b1).unwrap();
        let hid = tape.relu(hid);
        let direct = tape.linear(hid, w2, b2).unwrap();
        assert!(out.max_abs_diff(tape.value(direct)) < 1e-12);
    }

    #[test]
    fn single_token_attention_head() {
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, "h", HeadConfig::attention(6, 4, 2, 3), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[1, 6], 1.0);
        let out = logits(&store, &head, &x, &BatchLayout::dense(1));
        let HeadParams::Attention(h) = &head.params else { unreachable!() };
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x);
        let ids = [h.proj_w, h.proj_b, h.attn.wv, h.attn.bv, h.attn.wo, h.attn.bo, h.cls_w, h.cls_b];
        let v: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let low = tape.linear(xv, v[0], v[1]).unwrap();
        let val = tape.linear(low, v[2], v[3]).unwrap();
        let o = tape.linear(val, v[4], v[5]).unwrap();
        let direct = tape.linear(o, v[6], v[7]).unwrap();
        assert!(out.max_abs_diff(tape.value(direct)) < 1e-12);
    }

    #[test]
    fn attention_head_is_permutation_invariant() {
        let mut store = ParamStore::new();
        let head = Head::register(&mut store, "h", HeadConfig::attention(8, 4, 2, 5), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, &[5, 8], 1.0);
        let perm = [3usize, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let a = logits(&store, &head, &x, &BatchLayout::dense(5));
        let b = logits(&store, &head, &xp, &BatchLayout::dense(5));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn registered_scalars_match_formula() {
        for cfg in [
            HeadConfig::fc(12, 7),
            HeadConfig::attention(12, 8, 2, 7),
            HeadConfig::attention(12, 24, 4, 2),
        ] {
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, "h", cfg, 0).unwrap();
            assert_eq!(head.registered_scalars(&store), param_count(&cfg));
            assert_eq!(store.scalar_count("h."), param_count(&cfg));
        }
    }

    #[test]
    fn both_heads_pass_gradient_checks() {
        for cfg in [HeadConfig::fc(6, 4), HeadConfig::attention(6, 4, 2, 4)] {
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, "h", cfg, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for id in head.param_ids() {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).value = random_tensor(&mut rng, &shape, 0.5);
            }
            let x = store.add("x", random_tensor(&mut rng, &[6, 6], 1.0)).unwrap();
            let layout = BatchLayout::new(2, 3, vec![true, true, true, true, true, false]).unwrap();
            let report = check_gradients(&mut store, 1e-6, |tape| {
                let xv = tape.param(x);
                let out = head.forward(tape, xv, &layout)?;
                tape.softmax_xent(out, &[1, 3])
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{cfg:?}: {report:?}");
        }
    }

    proptest! {
        #[test]
        fn outputs_finite_for_bounded_inputs(seed in 0u64..1000, fc in any::<bool>()) {
            let cfg = if fc { HeadConfig::fc(8, 3) } else { HeadConfig::attention(8, 4, 2, 3) };
            let mut store = ParamStore::new();
            let head = Head::register(&mut store, "h", cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[4, 8], 10.0);
            let out = logits(&store, &head, &x, &BatchLayout::dense(4));
            prop_assert!(out.is_finite());
        }
    }
}
