//! Focus/fast assembly of retrieved segments and the toy readout head.
//!
//! The focus pathway concatenates the latents of the selected segments in
//! temporal order; the fast pathway is the full set of routing tokens. The
//! readout mean-pools both, concatenates them and maps to vocabulary logits
//! shared by every target position. Selection is discrete and passes no
//! gradient; gradients reach the selected latents and every routing token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connector::SegmentLatent;
use crate::layers::{init_weight, Linear};
use crate::numerics::{NumericsError, ParamStore, RngHandle, Tape, Tensor, Var};
use crate::router::RoutingTokens;

#[derive(Debug, Error)]
pub enum FocusFastError {
    #[error("invalid selection: {0}")]
    Selection(String),
    #[error("readout needs at least one target")]
    EmptyTargets,
    #[error("target {token} outside vocabulary of {vocab}")]
    Target { token: usize, vocab: usize },
    #[error("invalid readout config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocusFastBundle {
    /// `(k · n_latents) × d_hidden`.
    pub focus: Tensor,
    /// `N_v × D`.
    pub fast: Tensor,
    pub selected: Vec<usize>,
}

/// Checks that `selected` is strictly ascending and within `0..n`.
pub fn validate_selection(selected: &[usize], n: usize) -> Result<(), FocusFastError> {
    if selected.is_empty() {
        return Err(FocusFastError::Selection("no segment selected".into()));
    }
    if let Some(&i) = selected.iter().find(|&&i| i >= n) {
        return Err(FocusFastError::Selection(format!("index {i} outside 0..{n}")));
    }
    if selected.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FocusFastError::Selection(format!(
            "indices must be unique and ascending: {selected:?}"
        )));
    }
    Ok(())
}

pub fn assemble(
    latents: &[SegmentLatent],
    tokens: &RoutingTokens,
    selected: &[usize],
) -> Result<FocusFastBundle, FocusFastError> {
    validate_selection(selected, latents.len())?;
    if tokens.r.rows() != latents.len() {
        return Err(FocusFastError::Selection(format!(
            "{} latents but {} routing tokens",
            latents.len(),
            tokens.r.rows()
        )));
    }
    let parts: Vec<&Tensor> = selected.iter().map(|&i| &latents[i].latent).collect();
    Ok(FocusFastBundle {
        focus: Tensor::concat_rows(&parts)?,
        fast: tokens.r.clone(),
        selected: selected.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadoutConfig {
    pub vocab: usize,
    /// Width of the pooled focus latent.
    pub d_focus: usize,
    /// Width of the pooled routing token.
    pub d_fast: usize,
    /// Std of the initial weights; 0 gives uniform logits at start.
    pub init_std: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            d_focus: 1024,
            d_fast: 1024,
            init_std: 0.01,
        }
    }
}

impl ReadoutConfig {
    pub fn d_pool(&self) -> usize {
        self.d_focus + self.d_fast
    }
}

#[derive(Clone, Debug)]
pub struct Readout {
    pub config: ReadoutConfig,
    pub proj: Linear,
}

impl Readout {
    pub fn new(config: ReadoutConfig, store: &mut ParamStore, rng: &mut RngHandle) -> Result<Self, FocusFastError> {
        if config.vocab < 2 {
            return Err(FocusFastError::Config(format!("vocab {} < 2", config.vocab)));
        }
        let weight = init_weight(rng, config.d_pool(), config.vocab)
            .map(|v| v * config.init_std * (config.d_pool() as f64).sqrt());
        let proj = Linear {
            weight: store.add("readout.proj.weight", weight),
            bias: Some(store.add("readout.proj.bias", Tensor::zeros(&[1, config.vocab]))),
        };
        Ok(Self { config, proj })
    }

    /// Bag-of-targets cross-entropy. With `use_fast = false` the fast
    /// pathway is replaced by zeros.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        focus: Var<'t>,
        fast: Var<'t>,
        use_fast: bool,
        targets: &[usize],
    ) -> Result<Var<'t>, FocusFastError> {
        Ok(self
            .logits(tape, store, focus, fast, use_fast, targets)?
            .cross_entropy_bag(targets)?)
    }

    pub fn logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        focus: Var<'t>,
        fast: Var<'t>,
        use_fast: bool,
        targets: &[usize],
    ) -> Result<Var<'t>, FocusFastError> {
        if targets.is_empty() {
            return Err(FocusFastError::EmptyTargets);
        }
        if let Some(&token) = targets.iter().find(|&&t| t >= self.config.vocab) {
            return Err(FocusFastError::Target {
                token,
                vocab: self.config.vocab,
            });
        }
        let focus_pool = focus.mean_rows()?;
        let fast_pool = if use_fast {
            fast.mean_rows()?
        } else {
            tape.constant(Tensor::zeros(&[1, self.config.d_fast]))
        };
        let pooled = Var::concat_cols(&[focus_pool, fast_pool])?;
        Ok(self.proj.forward(tape, store, pooled)?)
    }
}

/// Readout loss of a bundle, evaluated outside any training tape.
pub fn toy_readout(
    bundle: &FocusFastBundle,
    targets: &[usize],
    readout: &Readout,
    store: &ParamStore,
) -> Result<f64, FocusFastError> {
    let tape = Tape::new();
    let l = readout.loss(
        &tape,
        store,
        tape.constant(bundle.focus.clone()),
        tape.constant(bundle.fast.clone()),
        true,
        targets,
    )?;
    let v = l.value().data()[0];
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn latents(n: usize, rows: usize, cols: usize) -> Vec<SegmentLatent> {
        (0..n)
            .map(|i| SegmentLatent {
                latent: Tensor::filled(&[rows, cols], i as f64),
                segment_index: i,
            })
            .collect()
    }

    #[test]
    fn selection_rules() {
        let ls = latents(4, 2, 3);
        let tokens = RoutingTokens {
            r: Tensor::zeros(&[4, 5]),
        };
        assert!(assemble(&ls, &tokens, &[2, 1]).is_err());
        assert!(assemble(&ls, &tokens, &[1, 1]).is_err());
        assert!(assemble(&ls, &tokens, &[4]).is_err());
        let b = assemble(&ls, &tokens, &[3]).unwrap();
        assert_eq!(b.focus, ls[3].latent);
        assert_eq!(b.fast.shape(), &[4, 5]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut store = ParamStore::new();
        let cfg = ReadoutConfig {
            vocab: 4,
            d_focus: 3,
            d_fast: 5,
            init_std: 0.0,
        };
        let ro = Readout::new(cfg, &mut store, &mut seeded_rng(0)).unwrap();
        let ls = latents(3, 2, 3);
        let tokens = RoutingTokens {
            r: Tensor::filled(&[3, 5], 0.7),
        };
        let b = assemble(&ls, &tokens, &[0, 2]).unwrap();
        let l = toy_readout(&b, &[0, 3, 1], &ro, &store).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            toy_readout(&b, &[], &ro, &store),
            Err(FocusFastError::EmptyTargets)
        ));
        assert!(matches!(
            toy_readout(&b, &[4], &ro, &store),
            Err(FocusFastError::Target { .. })
        ));
    }
}
