//! Full parameter set: connector, router and readout over one store.

use serde::{Deserialize, Serialize};

use crate::connector::{drop_rate, plan_drop, Connector, ConnectorConfig, PositionEncoder};
use crate::focusfast::{Readout, ReadoutConfig};
use crate::ingest::{FeatureStream, QueryEmbedding};
use crate::numerics::{parallel, seeded_rng, ParamStore, Precision, RngHandle, Tape, Tensor, Var};
use crate::router::{RouteScores, Router, RouterConfig, RoutingTokens};
use crate::Error;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub connector: ConnectorConfig,
    pub router: RouterConfig,
    pub readout: ReadoutConfig,
}

impl ModelConfig {
    /// Small widths for the synthetic tasks.
    pub fn toy(d_in: usize, vocab: usize) -> Self {
        Self {
            connector: ConnectorConfig {
                d_in,
                n_latents: 8,
                d_hidden: 64,
                layers: 2,
                heads: 2,
                ff_mult: 2,
                t_ref: 128,
            },
            router: RouterConfig {
                d_latent: 64,
                d_text: d_in,
                d_model: 64,
                layers: 2,
                heads: 1,
                ff_mult: 2,
                delta: 0.2,
                n_pairs: 16,
            },
            readout: ReadoutConfig {
                vocab,
                d_focus: 64,
                d_fast: 64,
                init_std: 0.01,
            },
        }
    }

    /// Every width ≤ 8, for exhaustive finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            connector: ConnectorConfig {
                d_in: 4,
                n_latents: 3,
                d_hidden: 4,
                layers: 2,
                heads: 2,
                ff_mult: 2,
                t_ref: 8,
            },
            router: RouterConfig {
                d_latent: 4,
                d_text: 4,
                d_model: 4,
                layers: 2,
                heads: 1,
                ff_mult: 2,
                delta: 0.2,
                n_pairs: 8,
            },
            readout: ReadoutConfig {
                vocab: 5,
                d_focus: 4,
                d_fast: 4,
                init_std: 0.3,
            },
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.connector.validate()?;
        self.router.validate()?;
        let c = &self.connector;
        let mismatch = |what: &str, a: usize, b: usize| Err(Error::Config(format!("{what}: {a} ≠ {b}")));
        if self.router.d_latent != c.d_hidden {
            return mismatch(
                "router.d_latent vs connector.d_hidden",
                self.router.d_latent,
                c.d_hidden,
            );
        }
        if self.readout.d_focus != c.d_hidden {
            return mismatch(
                "readout.d_focus vs connector.d_hidden",
                self.readout.d_focus,
                c.d_hidden,
            );
        }
        if self.readout.d_fast != self.router.d_model {
            return mismatch(
                "readout.d_fast vs router.d_model",
                self.readout.d_fast,
                self.router.d_model,
            );
        }
        Ok(())
    }
}

/// Learnable state of the whole stack.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub connector: Connector,
    pub router: Router,
    pub readout: Readout,
}

/// Module names used by stage freeze sets.
pub const MODULES: [&str; 3] = ["connector", "router", "readout"];

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let root = seeded_rng(seed);
        let mut store = ParamStore::new();
        let connector = Connector::new(config.connector.clone(), &mut store, &mut root.derive(&[0]))?;
        let router = Router::new(config.router.clone(), &mut store, &mut root.derive(&[1]))?;
        let readout = Readout::new(config.readout.clone(), &mut store, &mut root.derive(&[2]))?;
        Ok(Self {
            config,
            store,
            connector,
            router,
            readout,
        })
    }

    /// Copy with every parameter rounded to the given precision.
    pub fn with_precision(&self, precision: Precision) -> Model {
        let mut m = self.clone();
        if precision == Precision::F32 {
            for p in m.store.iter_mut() {
                p.value = p.value.round_to_f32();
            }
        }
        m
    }

    /// Position-encoded tokens of one segment after dropping `max_drop`-scaled
    /// tokens.
    pub fn prepare_segment(
        &self,
        segment: &FeatureStream,
        max_drop: f64,
        rng: &mut RngHandle,
    ) -> Result<Tensor, Error> {
        let [t, p, _] = segment.dims();
        let rate = drop_rate(t, max_drop, self.config.connector.t_ref);
        let plan = plan_drop(t, p, rate, rng);
        Ok(PositionEncoder::new(segment.dims()[2]).encode(segment, &plan)?)
    }

    /// Latents and routing tokens of every segment on a shared tape.
    pub fn encode_on_tape<'t>(&self, tape: &'t Tape, tokens: &[Tensor]) -> Result<(Vec<Var<'t>>, Var<'t>), Error> {
        let mut latents = Vec::with_capacity(tokens.len());
        let mut routing = Vec::with_capacity(tokens.len());
        for t in tokens {
            let latent = self.connector.forward(tape, &self.store, tape.constant(t.clone()))?;
            routing.push(self.router.routing_token(tape, &self.store, latent)?);
            latents.push(latent);
        }
        Ok((latents, Var::concat_rows(&routing)?))
    }

    /// Inference encoding without token drop; segments run in parallel.
    pub fn encode_segments(&self, segments: &[FeatureStream], precision: Precision) -> Result<EncodedVideo, Error> {
        let rows = parallel::try_map_indexed(segments.len(), |i| -> Result<(Tensor, Tensor), Error> {
            let tokens = precision.apply(&self.prepare_segment(&segments[i], 0.0, &mut seeded_rng(0))?);
            let tape = Tape::new();
            let latent = self.connector.forward(&tape, &self.store, tape.constant(tokens))?;
            let r = self.router.routing_token(&tape, &self.store, latent)?;
            Ok((precision.apply(&latent.value()), precision.apply(&r.value())))
        })?;
        let (latents, tokens): (Vec<Tensor>, Vec<Tensor>) = rows.into_iter().unzip();
        let refs: Vec<&Tensor> = tokens.iter().collect();
        Ok(EncodedVideo {
            latents,
            routing: RoutingTokens {
                r: Tensor::concat_rows(&refs)?,
            },
        })
    }

    pub fn score(&self, encoded: &EncodedVideo, query: &QueryEmbedding) -> Result<RouteScores, Error> {
        Ok(crate::router::sr_router_forward(
            &encoded.routing,
            query,
            &self.router,
            &self.store,
        )?)
    }
}

/// Latents and routing tokens of one video.
#[derive(Clone, Debug)]
pub struct EncodedVideo {
    pub latents: Vec<Tensor>,
    pub routing: RoutingTokens,
}
