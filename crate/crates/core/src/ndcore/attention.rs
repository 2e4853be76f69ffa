use super::{BatchLayout, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::name_stream;

/// Query/key/value/output projections of one multi-head self-attention
/// layer at width `width`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub width: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    /// Register the eight tensors under `prefix`, weights drawn from
    /// `N(0, 1/width)` on a stream keyed by `(seed, name)`; biases zero.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let mut weight = |name: &str| -> Result<ParamId> {
            let full = format!("{prefix}.{name}");
            let t = init_normal(seed, &full, &[width, width], 1.0 / (width as f64).sqrt());
            store.add(full, t)
        };
        let (wq, wk, wv, wo) = (weight("wq")?, weight("wk")?, weight("wv")?, weight("wo")?);
        let mut bias = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[width]));
        Ok(Self {
            width,
            heads,
            wq,
            bq: bias("bq")?,
            wk,
            bk: bias("bk")?,
            wv,
            bv: bias("bv")?,
            wo,
            bo: bias("bo")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }

    /// Scalars held: four `width x width` matrices and four biases.
    pub fn scalar_count(&self) -> usize {
        4 * (self.width * self.width + self.width)
    }
}

/// Multi-head self-attention of `x: [batch*seq, width]` with the given
/// projections; padding rows in `layout` are never attended to.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    params: &AttentionParams,
    layout: &BatchLayout,
) -> Result<Var> {
    let p = |tape: &mut Tape, id| tape.param(id);
    let (wq, bq) = (p(tape, params.wq), p(tape, params.bq));
    let (wk, bk) = (p(tape, params.wk), p(tape, params.bk));
    let (wv, bv) = (p(tape, params.wv), p(tape, params.bv));
    let (wo, bo) = (p(tape, params.wo), p(tape, params.bo));
    let q = tape.linear(x, wq, bq)?;
    let k = tape.linear(x, wk, bk)?;
    let v = tape.linear(x, wv, bv)?;
    let mixed = tape.attention(q, k, v, params.heads, layout)?;
    tape.linear(mixed, wo, bo)
}

/// Deterministic `N(0, std^2)` init keyed by seed and parameter name, so
/// registration order never changes initial values.
pub fn init_normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, name_stream(name)));
    super::gradcheck::random_tensor(&mut rng, shape, std)
}
