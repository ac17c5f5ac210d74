//! Spatio-temporal connector: token drop, position encodings and a
//! perceiver-style resampler that maps a variable-length segment onto a
//! fixed `n_latents × d_hidden` latent grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::FeatureStream;
use crate::layers::{Activation, CrossAttention, CrossBlock, FeedForward, LayerNorm, Linear};
use crate::numerics::{NumericsError, ParamId, ParamStore, RngHandle, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("invalid connector config: {0}")]
    Config(String),
    #[error("drop plan does not match segment: {0}")]
    Plan(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorConfig {
    /// Width of incoming frame tokens.
    pub d_in: usize,
    pub n_latents: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_hidden`.
    pub ff_mult: usize,
    /// Segment length at which the drop rate saturates.
    pub t_ref: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            d_in: 1024,
            n_latents: 256,
            d_hidden: 1024,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            t_ref: 128,
        }
    }
}

impl ConnectorConfig {
    pub fn validate(&self) -> Result<(), ConnectorError> {
        if [
            self.d_in,
            self.n_latents,
            self.d_hidden,
            self.heads,
            self.ff_mult,
            self.t_ref,
        ]
        .contains(&0)
        {
            return Err(ConnectorError::Config("all sizes must be ≥ 1".into()));
        }
        if !self.d_hidden.is_multiple_of(self.heads) {
            return Err(ConnectorError::Config(format!(
                "d_hidden {} not divisible by {} heads",
                self.d_hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Length-dependent drop rate: `max_rate · min(1, T_i / t_ref)`.
pub fn drop_rate(frames: usize, max_rate: f64, t_ref: usize) -> f64 {
    max_rate * (frames as f64 / t_ref as f64).min(1.0)
}

/// Surviving `(frame, patch)` tokens of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct DropPlan {
    pub frames: usize,
    pub patches: usize,
    /// Sorted, unique, non-empty.
    pub kept: Vec<(usize, usize)>,
    /// Realized drop fraction.
    pub rate: f64,
}

/// Number of tokens that survive dropping `rate` of `total`; rounding is
/// half away from zero.
pub fn kept_count(total: usize, rate: f64) -> usize {
    (((1.0 - rate) * total as f64).round() as usize).clamp(1, total)
}

/// Uniform random token drop. `rate = 0` keeps every token in order.
pub fn plan_drop(frames: usize, patches: usize, rate: f64, rng: &mut RngHandle) -> DropPlan {
    let total = frames * patches;
    let keep = kept_count(total, rate);
    let mut flat: Vec<usize> = if keep == total {
        (0..total).collect()
    } else {
        rng.sample_without_replacement(total, keep)
    };
    flat.sort_unstable();
    DropPlan {
        frames,
        patches,
        kept: flat.into_iter().map(|i| (i / patches, i % patches)).collect(),
        rate: 1.0 - keep as f64 / total as f64,
    }
}

/// `sin(pos / 10000^(2i/d))` on even entries, `cos` on odd ones.
pub fn sinusoid(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Sinusoidal table that grows on demand.
#[derive(Clone, Debug)]
pub struct PositionTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl PositionTable {
    pub fn new(dim: usize, len: usize) -> Self {
        Self {
            dim,
            rows: (0..len).map(|p| sinusoid(p, dim)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&mut self, pos: usize) -> &[f64] {
        while self.rows.len() <= pos {
            let next = self.rows.len();
            self.rows.push(sinusoid(next, self.dim));
        }
        &self.rows[pos]
    }
}

/// Separate spatial and temporal encodings added to every kept token.
#[derive(Clone, Debug)]
pub struct PositionEncoder {
    pub spatial: PositionTable,
    pub temporal: PositionTable,
}

impl PositionEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            spatial: PositionTable::new(dim, 0),
            temporal: PositionTable::new(dim, 0),
        }
    }

    /// `K_kept × d` matrix of `token + spatial_pe[p] + temporal_pe[t]`.
    pub fn encode(&mut self, segment: &FeatureStream, plan: &DropPlan) -> Result<Tensor, ConnectorError> {
        let [t, p, d] = segment.dims();
        if plan.frames != t || plan.patches != p {
            return Err(ConnectorError::Plan(format!(
                "plan for {}×{} tokens, segment has {t}×{p}",
                plan.frames, plan.patches
            )));
        }
        let mut data = Vec::with_capacity(plan.kept.len() * d);
        for &(ft, fp) in &plan.kept {
            if ft >= t || fp >= p {
                return Err(ConnectorError::Plan(format!("token ({ft}, {fp}) out of range")));
            }
            let token = &segment.frame(ft)[fp * d..(fp + 1) * d];
            let sp = self.spatial.get(fp).to_vec();
            let tp = self.temporal.get(ft);
            data.extend(token.iter().zip(&sp).zip(tp).map(|((x, s), q)| x + s + q));
        }
        Ok(Tensor::matrix(plan.kept.len(), d, data)?)
    }
}

/// Convenience wrapper around [`PositionEncoder::encode`].
pub fn encode_positions(segment: &FeatureStream, plan: &DropPlan) -> Result<Tensor, ConnectorError> {
    PositionEncoder::new(segment.dims()[2]).encode(segment, plan)
}

/// Fixed-size latent of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentLatent {
    pub latent: Tensor,
    pub segment_index: usize,
}

/// Learnable parameters of the connector.
#[derive(Clone, Debug)]
pub struct Connector {
    pub config: ConnectorConfig,
    pub latents: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub norm_out: LayerNorm,
    pub proj_in: Linear,
    pub proj_out: Linear,
}

impl Connector {
    pub fn new(config: ConnectorConfig, store: &mut ParamStore, rng: &mut RngHandle) -> Result<Self, ConnectorError> {
        config.validate()?;
        let c = &config;
        let scale = 1.0 / (c.d_hidden as f64).sqrt();
        let latents = Tensor::matrix(
            c.n_latents,
            c.d_hidden,
            rng.normals(c.n_latents * c.d_hidden)
                .into_iter()
                .map(|v| v * scale)
                .collect(),
        )?;
        let latents = store.add("connector.latents", latents);
        let blocks = (0..c.layers)
            .map(|l| {
                let name = format!("connector.block{l}");
                CrossBlock {
                    norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), c.d_hidden),
                    norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), c.d_in),
                    attn: CrossAttention::new(
                        store,
                        &format!("{name}.attn"),
                        c.d_hidden,
                        c.d_in,
                        c.d_hidden,
                        c.heads,
                        false,
                        rng,
                    ),
                    norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), c.d_hidden),
                    ff: FeedForward::new(
                        store,
                        &format!("{name}.ff"),
                        c.d_hidden,
                        c.d_hidden * c.ff_mult,
                        Activation::Gelu,
                        rng,
                    ),
                }
            })
            .collect();
        let norm_out = LayerNorm::new(store, "connector.norm_out", c.d_hidden);
        let proj_in = Linear::new(store, "connector.projector.0", c.d_hidden, c.d_hidden, true, rng);
        let proj_out = Linear::new(store, "connector.projector.1", c.d_hidden, c.d_hidden, true, rng);
        Ok(Self {
            config,
            latents,
            blocks,
            norm_out,
            proj_in,
            proj_out,
        })
    }

    /// Resamples position-encoded tokens (`K × d_in`) to `n_latents × d_hidden`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, tokens: Var<'t>) -> Result<Var<'t>, ConnectorError> {
        let width = tokens.value().cols();
        if width != self.config.d_in {
            return Err(ConnectorError::Plan(format!(
                "tokens have width {width}, connector expects {}",
                self.config.d_in
            )));
        }
        let mut x = tape.param(store, self.latents);
        for block in &self.blocks {
            x = block.forward(tape, store, x, tokens)?;
        }
        let x = self.norm_out.forward(tape, store, x)?;
        let h = self.proj_in.forward(tape, store, x)?.gelu()?;
        Ok(self.proj_out.forward(tape, store, h)?)
    }
}

/// Encodes positions of the kept tokens and resamples them to a latent.
pub fn st_connector_forward(
    segment: &FeatureStream,
    segment_index: usize,
    plan: &DropPlan,
    connector: &Connector,
    store: &ParamStore,
) -> Result<SegmentLatent, ConnectorError> {
    let tokens = encode_positions(segment, plan)?;
    let tape = Tape::new();
    let out = connector.forward(&tape, store, tape.constant(tokens))?;
    Ok(SegmentLatent {
        latent: out.value().as_ref().clone(),
        segment_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn stage_maxima_bound_the_rate() {
        for t in [1, 10, 128, 1000] {
            assert_eq!(drop_rate(t, 0.0, 128), 0.0);
        }
        assert!((drop_rate(128, 0.7, 128) - 0.7).abs() < 1e-15);
        assert!((drop_rate(32, 0.4, 128) - 0.1).abs() < 1e-15);
        assert!((drop_rate(4096, 0.4, 128) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_keeps_everything_in_order() {
        let plan = plan_drop(3, 4, 0.0, &mut seeded_rng(0));
        assert_eq!(plan.kept.len(), 12);
        assert_eq!(plan.kept[5], (1, 1));
        assert!(plan.kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(plan.rate, 0.0);
    }

    #[test]
    fn kept_count_follows_formula() {
        let plan = plan_drop(10, 10, 0.7, &mut seeded_rng(1));
        assert_eq!(plan.kept.len(), 30);
        assert_eq!(kept_count(1, 0.99), 1);
        // 2.5 rounds away from zero
        assert_eq!(kept_count(5, 0.5), 3);
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let a = plan_drop(8, 6, 0.4, &mut seeded_rng(5));
        let b = plan_drop(8, 6, 0.4, &mut seeded_rng(5));
        assert_eq!(a, b);
    }

    #[test]
    fn position_encoding_is_additive() {
        let seg = FeatureStream::new("s", Tensor::zeros(&[2, 3, 4])).unwrap();
        let plan = plan_drop(2, 3, 0.0, &mut seeded_rng(0));
        let enc = encode_positions(&seg, &plan).unwrap();
        let expected: Vec<f64> = sinusoid(0, 4).iter().zip(sinusoid(0, 4)).map(|(a, b)| a + b).collect();
        assert_eq!(enc.row(0), expected.as_slice());
        // (t=0,p=1) vs (t=1,p=1) differ by the temporal term only
        let diff: Vec<f64> = enc.row(4).iter().zip(enc.row(1)).map(|(a, b)| a - b).collect();
        let temporal: Vec<f64> = sinusoid(1, 4).iter().zip(sinusoid(0, 4)).map(|(a, b)| a - b).collect();
        for (a, b) in diff.iter().zip(&temporal) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sinusoid_closed_form() {
        let d = 8;
        let row = sinusoid(7, d);
        assert!((row[0] - 7f64.sin()).abs() < 1e-15);
        assert!((row[1] - 7f64.cos()).abs() < 1e-15);
        let f = 10000f64.powf(4.0 / 8.0);
        assert!((row[4] - (7.0 / f).sin()).abs() < 1e-15);
        assert!((row[5] - (7.0 / f).cos()).abs() < 1e-15);
    }

    #[test]
    fn table_extends_on_demand() {
        let mut t = PositionTable::new(4, 2);
        assert_eq!(t.get(9), sinusoid(9, 4).as_slice());
        assert_eq!(t.len(), 10);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ConnectorConfig {
            d_hidden: 10,
            heads: 3,
            ..ConnectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shape_is_fixed() {
        let cfg = ConnectorConfig {
            d_in: 6,
            n_latents: 5,
            d_hidden: 8,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            t_ref: 16,
        };
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let conn = Connector::new(cfg, &mut store, &mut rng).unwrap();
        for t in [1, 3, 17] {
            let seg = FeatureStream::new(
                "s",
                Tensor::matrix(t * 2, 6, rng.normals(t * 12))
                    .unwrap()
                    .reshape(vec![t, 2, 6])
                    .unwrap(),
            )
            .unwrap();
            let plan = plan_drop(t, 2, drop_rate(t, 0.7, 16), &mut rng);
            let out = st_connector_forward(&seg, 0, &plan, &conn, &store).unwrap();
            assert_eq!(out.latent.shape(), &[5, 8]);
        }
    }
}
