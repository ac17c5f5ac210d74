//! Central-difference verification of analytic gradients.

use std::time::Instant;

use serde::Serialize;

use super::task::{build_episode, Episode, Labeling, TaskSpec};
use super::{batch_loss, Batch, LossOptions, Stage, StageConfig};
use crate::ingest::SynthSpec;
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamStore, Tape};
use crate::Error;

/// A scalar function of a parameter store.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self) -> Result<f64, Error>;
    /// Returns the loss and leaves `∂loss/∂θ` in the store's grads.
    fn loss_and_grad(&mut self) -> Result<f64, Error>;
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
    pub note: String,
    pub secs: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-4)` for every coordinate, with `n` the central
/// difference at step `1e-5`.
pub fn grad_check(obj: &mut dyn Objective, tol: f64) -> Result<GradCheckReport, Error> {
    let started = Instant::now();
    let coords = obj.params().coordinate_count();
    if coords == 0 {
        return Ok(GradCheckReport {
            coords,
            max_rel_err: 0.0,
            worst: None,
            tol,
            passed: true,
            note: "0 coords: nothing to check".into(),
            secs: started.elapsed().as_secs_f64(),
        });
    }
    obj.params_mut().zero_grad();
    obj.loss_and_grad()?;
    let analytic: Vec<(String, Vec<f64>)> = obj
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let original = obj.params().iter().nth(pi).expect("index in range").1.value.data()[k];
            let at = |v: f64, obj: &mut dyn Objective| -> Result<f64, Error> {
                let id = obj.params().iter().nth(pi).expect("index in range").0;
                obj.params_mut().get_mut(id).value.data_mut()[k] = v;
                obj.loss()
            };
            let plus = at(original + FD_STEP, obj)?;
            let minus = at(original - FD_STEP, obj)?;
            at(original, obj)?;
            let n = (plus - minus) / (2.0 * FD_STEP);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = rel;
                worst = Some((name.clone(), k));
            }
        }
    }
    Ok(GradCheckReport {
        coords,
        max_rel_err,
        worst,
        tol,
        passed: max_rel_err <= tol,
        note: format!("{coords} coords"),
        secs: started.elapsed().as_secs_f64(),
    })
}

/// Full pipeline loss (connector, router, readout, joint loss) on one batch.
pub struct PipelineObjective {
    pub model: Model,
    pub episode: Episode,
    pub queries: Vec<usize>,
    pub seed: u64,
    pub stage: StageConfig,
    pub opts: LossOptions,
}

impl PipelineObjective {
    fn batch(&self) -> Batch<'_> {
        Batch {
            episode: &self.episode,
            queries: self.queries.clone(),
            seed: self.seed,
        }
    }
}

impl Objective for PipelineObjective {
    fn params(&self) -> &ParamStore {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn loss(&self) -> Result<f64, Error> {
        let tape = Tape::new();
        let l = batch_loss(&self.model, &tape, &self.batch(), &self.stage, self.opts)?;
        let v = l.total.value().data()[0];
        Ok(v)
    }

    fn loss_and_grad(&mut self) -> Result<f64, Error> {
        let tape = Tape::new();
        let batch = self.batch();
        let l = batch_loss(&self.model, &tape, &batch, &self.stage, self.opts)?;
        let v = l.total.value().data()[0];
        tape.backward(l.total, &mut self.model.store)?;
        Ok(v)
    }
}

/// Miniature full pipeline: every width ≤ 8, three segments, token drop and
/// the joint loss both active.
pub fn miniature_objective(seed: u64) -> Result<PipelineObjective, Error> {
    let config = ModelConfig::miniature();
    let task = TaskSpec {
        video: SynthSpec {
            n_segments: 3,
            min_frames: 2,
            max_frames: 4,
            dim: config.connector.d_in,
            tokens_per_frame: 2,
            max_cross_sim: 0.3,
            frame_noise: 0.1,
        },
        query_noise: 0.1,
        query_tokens: 2,
        vocab: config.readout.vocab,
        ..TaskSpec::default()
    };
    let labeling = Labeling::new(task.vocab, task.video.dim, seed ^ 0x5eed);
    let episode = build_episode(&task, &labeling, seed)?;
    let mut stage = StageConfig::for_stage(Stage::S1_5, 1, 1e-2);
    stage.max_token_drop = 0.4;
    Ok(PipelineObjective {
        model: Model::new(config, seed)?,
        queries: (0..episode.len()).collect(),
        episode,
        seed,
        stage,
        opts: LossOptions {
            top_k: 2,
            use_fast: true,
            grad_clip: None,
        },
    })
}
