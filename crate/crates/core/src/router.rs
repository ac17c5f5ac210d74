//! Segment retrieval router: routing tokens, cross-attention scoring against
//! a text query, the similarity loss and top-k selection.
//!
//! Each routing token attends over the projected query tokens plus a learned
//! null slot, so the share of attention a segment puts on the text depends on
//! how well the two match. The attended token is then scored by a bilinear
//! similarity with the pooled sentence. Segments never attend to each other,
//! which keeps the scores permutation-equivariant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::QueryEmbedding;
use crate::layers::{Activation, CrossAttention, CrossBlock, FeedForward, LayerNorm, Linear};
use crate::numerics::{NumericsError, ParamId, ParamStore, RngHandle, Tape, Tensor, Var};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("invalid router config: {0}")]
    Config(String),
    #[error("empty query")]
    EmptyQuery,
    #[error("supervision has no positive segment")]
    NoPositive,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    /// Width of connector latents feeding the routing-token projection.
    pub d_latent: usize,
    /// Width of query token embeddings.
    pub d_text: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Margin of the ranking term.
    pub delta: f64,
    /// Number of sampled (positive, negative) pairs per query.
    pub n_pairs: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            d_latent: 1024,
            d_text: 1024,
            d_model: 1024,
            layers: 2,
            heads: 1,
            ff_mult: 2,
            delta: 0.2,
            n_pairs: 16,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        if [self.d_latent, self.d_text, self.d_model, self.heads, self.ff_mult].contains(&0) {
            return Err(RouterError::Config("all sizes must be ≥ 1".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(RouterError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(RouterError::Config(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.n_pairs == 0 {
            return Err(RouterError::Config("n_pairs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `N_v × D` routing tokens, one row per segment in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTokens {
    pub r: Tensor,
}

/// Per-segment relevance in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteScores {
    pub s: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Router {
    pub config: RouterConfig,
    pub token_proj: Linear,
    pub text_proj: Linear,
    pub blocks: Vec<CrossBlock>,
    pub norm_out: LayerNorm,
    pub norm_text: LayerNorm,
    /// Bilinear score head: `logit_i = (x_i·W_v)·(t̄·W_t)ᵀ/√D + b`.
    pub head_video: Linear,
    pub head_text: Linear,
    pub score_bias: ParamId,
}

impl Router {
    pub fn new(config: RouterConfig, store: &mut ParamStore, rng: &mut RngHandle) -> Result<Self, RouterError> {
        config.validate()?;
        let c = &config;
        let token_proj = Linear::new(store, "router.token_proj", c.d_latent, c.d_model, true, rng);
        let text_proj = Linear::new(store, "router.text_proj", c.d_text, c.d_model, true, rng);
        let blocks = (0..c.layers)
            .map(|l| {
                let name = format!("router.block{l}");
                CrossBlock {
                    norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), c.d_model),
                    norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), c.d_model),
                    attn: CrossAttention::new(
                        store,
                        &format!("{name}.attn"),
                        c.d_model,
                        c.d_model,
                        c.d_model,
                        c.heads,
                        true,
                        rng,
                    ),
                    norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), c.d_model),
                    ff: FeedForward::new(
                        store,
                        &format!("{name}.ff"),
                        c.d_model,
                        c.d_model * c.ff_mult,
                        Activation::Prelu,
                        rng,
                    ),
                }
            })
            .collect();
        let norm_out = LayerNorm::new(store, "router.norm_out", c.d_model);
        let norm_text = LayerNorm::new(store, "router.norm_text", c.d_model);
        let head_video = Linear::new(store, "router.score_head.video", c.d_model, c.d_model, false, rng);
        let head_text = Linear::new(store, "router.score_head.text", c.d_model, c.d_model, false, rng);
        let score_bias = store.add("router.score_head.bias", Tensor::zeros(&[1, 1]));
        Ok(Self {
            config,
            token_proj,
            text_proj,
            blocks,
            norm_out,
            norm_text,
            head_video,
            head_text,
            score_bias,
        })
    }

    /// Mean over the latent rows followed by a learned linear map to `D`.
    pub fn routing_token<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        latent: Var<'t>,
    ) -> Result<Var<'t>, RouterError> {
        let width = latent.value().cols();
        if width != self.config.d_latent {
            return Err(RouterError::Shape(format!(
                "latent width {width}, router expects {}",
                self.config.d_latent
            )));
        }
        Ok(self.token_proj.forward(tape, store, latent.mean_rows()?)?)
    }

    /// Raw score logits (`N_v × 1`) for routing tokens `r` against query tokens:
    /// the routing tokens attend over the sentence, then each output is
    /// compared with the pooled sentence features.
    pub fn logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        r: Var<'t>,
        query: Var<'t>,
    ) -> Result<Var<'t>, RouterError> {
        let q = query.value();
        if q.rows() == 0 {
            return Err(RouterError::EmptyQuery);
        }
        if q.cols() != self.config.d_text {
            return Err(RouterError::Shape(format!(
                "query width {}, router expects {}",
                q.cols(),
                self.config.d_text
            )));
        }
        let text = self.text_proj.forward(tape, store, query)?;
        let mut x = r;
        for block in &self.blocks {
            x = block.forward(tape, store, x, text)?;
        }
        let x = self
            .head_video
            .forward(tape, store, self.norm_out.forward(tape, store, x)?)?;
        let t = self.norm_text.forward(tape, store, text)?.mean_rows()?;
        let t = self.head_text.forward(tape, store, t)?;
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        Ok(x.matmul_nt(t)?
            .scale(scale)?
            .add_row(tape.param(store, self.score_bias))?)
    }

    /// Sigmoid relevance scores (`N_v × 1`).
    pub fn scores<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        r: Var<'t>,
        query: Var<'t>,
    ) -> Result<Var<'t>, RouterError> {
        Ok(self.logits(tape, store, r, query)?.sigmoid()?)
    }
}

/// Routing token of a single latent, evaluated outside any training tape.
pub fn extract_routing_token(latent: &Tensor, router: &Router, store: &ParamStore) -> Result<Tensor, RouterError> {
    let tape = Tape::new();
    let out = router.routing_token(&tape, store, tape.constant(latent.clone()))?;
    Ok(out.value().as_ref().clone())
}

/// Scores every segment against one query.
pub fn sr_router_forward(
    tokens: &RoutingTokens,
    query: &QueryEmbedding,
    router: &Router,
    store: &ParamStore,
) -> Result<RouteScores, RouterError> {
    if query.tokens.rows() == 0 {
        return Err(RouterError::EmptyQuery);
    }
    let tape = Tape::new();
    let s = router.scores(
        &tape,
        store,
        tape.constant(tokens.r.clone()),
        tape.constant(query.tokens.clone()),
    )?;
    Ok(RouteScores {
        s: s.value().data().to_vec(),
    })
}

/// `(positive, negative)` index pairs drawn uniformly with replacement.
pub fn sample_pairs(y: &[u8], n_pairs: usize, rng: &mut RngHandle) -> Vec<(usize, usize)> {
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Vec::new();
    }
    (0..n_pairs)
        .map(|_| (pos[rng.below(pos.len())], neg[rng.below(neg.len())]))
        .collect()
}

/// Mean binary cross-entropy over all segments plus the mean hinge
/// `max(0, δ − (s_p − s_n))` over `n_pairs` sampled pairs.
///
/// The ranking term vanishes when `y` has no negatives.
pub fn similarity_loss<'t>(
    s: Var<'t>,
    y: &[u8],
    delta: f64,
    n_pairs: usize,
    rng: &mut RngHandle,
) -> Result<Var<'t>, RouterError> {
    if !y.contains(&1) {
        return Err(RouterError::NoPositive);
    }
    if s.value().len() != y.len() {
        return Err(RouterError::Shape(format!(
            "{} scores vs {} labels",
            s.value().len(),
            y.len()
        )));
    }
    let labels: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let bce = s.bce(&labels)?;
    let pairs = sample_pairs(y, n_pairs, rng);
    if pairs.is_empty() {
        return Ok(bce);
    }
    Ok(bce.add(s.margin_ranking(&pairs, delta)?)?)
}

/// Indices of the `k` largest scores (ties to the lower index), returned in
/// ascending temporal order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn tiny() -> RouterConfig {
        RouterConfig {
            d_latent: 3,
            d_text: 4,
            d_model: 4,
            layers: 2,
            heads: 1,
            ff_mult: 2,
            delta: 0.2,
            n_pairs: 4,
        }
    }

    #[test]
    fn ln2_for_half_score_single_positive() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::scalar(0.5));
        let l = similarity_loss(s, &[1], 0.2, 16, &mut seeded_rng(0)).unwrap();
        assert!((l.value().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn separated_pair_contributes_nothing() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::matrix(2, 1, vec![0.9, 0.5]).unwrap());
        let m = s.margin_ranking(&[(0, 1)], 0.2).unwrap();
        assert_eq!(m.value().data()[0], 0.0);
        let s = tape.constant(Tensor::matrix(2, 1, vec![0.6, 0.55]).unwrap());
        let m = s.margin_ranking(&[(0, 1)], 0.2).unwrap();
        assert!((m.value().data()[0] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn missing_positive_is_an_error() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::matrix(2, 1, vec![0.3, 0.4]).unwrap());
        assert!(matches!(
            similarity_loss(s, &[0, 0], 0.2, 4, &mut seeded_rng(0)),
            Err(RouterError::NoPositive)
        ));
    }

    #[test]
    fn top_k_rules() {
        assert_eq!(top_k(&[0.1, 0.9, 0.9, 0.2], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.1, 0.9, 0.9, 0.2], 1), vec![1]);
        assert_eq!(top_k(&[0.3, 0.2], 5), vec![0, 1]);
        assert_eq!(top_k(&[0.5, 0.1, 0.7, 0.6], 3), vec![0, 2, 3]);
    }

    #[test]
    fn zero_head_gives_half() {
        let mut store = ParamStore::new();
        let router = Router::new(tiny(), &mut store, &mut seeded_rng(1)).unwrap();
        store.get_mut(router.head_video.weight).value = Tensor::zeros(&[4, 4]);
        let r = RoutingTokens {
            r: Tensor::matrix(3, 4, seeded_rng(2).normals(12)).unwrap(),
        };
        let q = QueryEmbedding::new(Tensor::matrix(2, 4, seeded_rng(3).normals(8)).unwrap()).unwrap();
        let s = sr_router_forward(&r, &q, &router, &store).unwrap();
        assert!(s.s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn routing_token_of_equal_rows_is_projection() {
        let mut store = ParamStore::new();
        let router = Router::new(tiny(), &mut store, &mut seeded_rng(1)).unwrap();
        store.get_mut(router.token_proj.bias.unwrap()).value = Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]);
        let v = vec![0.5, -1.0, 2.0];
        let latent = Tensor::from_rows(&vec![v.clone(); 6]).unwrap();
        let got = extract_routing_token(&latent, &router, &store).unwrap();
        let w = store.value(router.token_proj.weight);
        for j in 0..4 {
            let e: f64 = (0..3).map(|i| v[i] * w.get(i, j)).sum::<f64>() + 0.1 * (j + 1) as f64;
            assert!((got.data()[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.delta = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_pairs = 0;
        assert!(c.validate().is_err());
    }
}
