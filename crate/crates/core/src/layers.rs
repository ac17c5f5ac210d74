//! Parameterized building blocks shared by the connector and the router.

use crate::numerics::{NumericsError, ParamId, ParamStore, RngHandle, Tape, Tensor, Var};

/// Gaussian weights scaled by `1/√fan_in`.
pub(crate) fn init_weight(rng: &mut RngHandle, rows: usize, cols: usize) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// `x · W (+ b)` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut RngHandle) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let y = x.matmul(tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_row(tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Row-wise layer norm with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[1, dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        x.layer_norm()?
            .mul_row(tape.param(store, self.gain))?
            .add_row(tape.param(store, self.bias))
    }
}

/// Multi-head cross-attention: rows of the query input attend over rows of
/// the key/value input. An optional learned null slot is appended to the
/// keys and values so a query can attend to "nothing".
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub null_slot: Option<(ParamId, ParamId)>,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        dim: usize,
        heads: usize,
        null_slot: bool,
        rng: &mut RngHandle,
    ) -> Self {
        let wq = Linear::new(store, &format!("{name}.wq"), d_query, dim, false, rng);
        let wk = Linear::new(store, &format!("{name}.wk"), d_kv, dim, false, rng);
        let wv = Linear::new(store, &format!("{name}.wv"), d_kv, dim, false, rng);
        let wo = Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng);
        let null_slot = null_slot.then(|| {
            let k = store.add(format!("{name}.null_key"), init_weight(rng, dim, 1).transpose());
            let v = store.add(format!("{name}.null_value"), Tensor::zeros(&[1, dim]));
            (k, v)
        });
        Self {
            wq,
            wk,
            wv,
            wo,
            null_slot,
            heads,
            dim,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        queries: Var<'t>,
        context: Var<'t>,
    ) -> Result<Var<'t>, NumericsError> {
        let q = self.wq.forward(tape, store, queries)?;
        let mut k = self.wk.forward(tape, store, context)?;
        let mut v = self.wv.forward(tape, store, context)?;
        if let Some((nk, nv)) = self.null_slot {
            k = Var::concat_rows(&[k, tape.param(store, nk)])?;
            v = Var::concat_rows(&[v, tape.param(store, nv)])?;
        }
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(a, b)?, k.slice_cols(a, b)?, v.slice_cols(a, b)?)
            };
            let weights = qh.matmul_nt(kh)?.scale(scale)?.softmax_rows()?;
            outs.push(weights.matmul(vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat_cols(&outs)?
        };
        self.wo.forward(tape, store, joined)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// PReLU with one learnable slope per layer.
    Prelu,
}

/// Two-layer feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub slope: Option<ParamId>,
}

pub const PRELU_INIT_SLOPE: f64 = 0.25;

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        rng: &mut RngHandle,
    ) -> Self {
        let up = Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng);
        let slope = (act == Activation::Prelu)
            .then(|| store.add(format!("{name}.prelu_slope"), Tensor::scalar(PRELU_INIT_SLOPE)));
        let down = Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng);
        Self { up, down, slope }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let h = self.up.forward(tape, store, x)?;
        let h = match self.slope {
            Some(s) => h.prelu(tape.param(store, s))?,
            None => h.gelu()?,
        };
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm block: `x += attn(LN(x), LN(ctx))`, then `x += ff(LN(x))`.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: CrossAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl CrossBlock {
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        context: Var<'t>,
    ) -> Result<Var<'t>, NumericsError> {
        let q = self.norm_q.forward(tape, store, x)?;
        let kv = self.norm_kv.forward(tape, store, context)?;
        let x = x.add(self.attn.forward(tape, store, q, kv)?)?;
        let h = self.norm_ff.forward(tape, store, x)?;
        x.add(self.ff.forward(tape, store, h)?)
    }
}
