//! Stage-aware training on the synthetic task.

mod checkpoint;
mod gradcheck;
mod task;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
pub use gradcheck::{grad_check, miniature_objective, GradCheckReport, Objective, PipelineObjective};
pub use task::{build_episode, label_of, label_projection, Dataset, Episode, Labeling, TaskSpec};

use crate::model::{Model, ModelConfig, MODULES};
use crate::numerics::{derive_seed, parallel, seeded_rng, Precision, Tape, Tensor, Var};
use crate::router::{similarity_loss, top_k, DEFAULT_TOP_K};
use crate::{Error, ErrorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    S1,
    #[serde(rename = "S1.5", alias = "S1_5")]
    S1_5,
    S2,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::S1 => "S1",
            Stage::S1_5 => "S1.5",
            Stage::S2 => "S2",
        }
    }

    pub fn default_max_drop(self) -> f64 {
        match self {
            Stage::S1 => 0.0,
            Stage::S1_5 => 0.7,
            Stage::S2 => 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub max_token_drop: f64,
    pub lr: f64,
    pub trainable: Vec<String>,
    pub lambda_sim: f64,
}

impl StageConfig {
    /// Stage defaults: S1 trains the connector path on the readout loss only;
    /// later stages train everything on the joint loss.
    pub fn for_stage(stage: Stage, steps: usize, lr: f64) -> Self {
        let (trainable, lambda_sim): (&[&str], f64) = match stage {
            Stage::S1 => (&["connector", "router"], 0.0),
            _ => (&MODULES, 1.0),
        };
        Self {
            stage,
            steps,
            max_token_drop: stage.default_max_drop(),
            lr,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            lambda_sim,
        }
    }

    fn validate(&self) -> Result<(), Error> {
        if !(0.0..1.0).contains(&self.max_token_drop) {
            return Err(Error::Config(format!(
                "max_token_drop {} outside [0, 1)",
                self.max_token_drop
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lambda_sim < 0.0 {
            return Err(Error::Config(format!(
                "stage {}: lr must be > 0 and lambda_sim ≥ 0",
                self.stage.label()
            )));
        }
        if let Some(m) = self.trainable.iter().find(|m| !MODULES.contains(&m.as_str())) {
            return Err(Error::Config(format!("unknown module {m:?} in trainable set")));
        }
        Ok(())
    }

    fn trains(&self, module: &str) -> bool {
        self.trainable.iter().any(|m| m == module)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        momentum: f64,
    },
    Adamw {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub schedule: Vec<StageConfig>,
    pub optimizer: OptimizerConfig,
    /// Descriptions scored per step.
    pub batch_queries: usize,
    pub top_k: usize,
    pub use_fast: bool,
    /// Global gradient-norm cap applied before each update.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        Self {
            model: ModelConfig::toy(task.video.dim, task.vocab),
            task,
            schedule: vec![
                StageConfig::for_stage(Stage::S1, 25, 0.03),
                StageConfig::for_stage(Stage::S1_5, 175, 0.03),
                StageConfig::for_stage(Stage::S2, 300, 0.03),
            ],
            optimizer: OptimizerConfig::default(),
            batch_queries: 13,
            top_k: DEFAULT_TOP_K,
            use_fast: true,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.task.validate()?;
        if self.model.connector.d_in != self.task.video.dim || self.model.router.d_text != self.task.video.dim {
            return Err(Error::Config(
                "connector.d_in and router.d_text must equal task.video.dim".into(),
            ));
        }
        if self.model.readout.vocab != self.task.vocab {
            return Err(Error::Config("readout.vocab must equal task.vocab".into()));
        }
        if self.batch_queries == 0 || self.top_k == 0 {
            return Err(Error::Config("batch_queries and top_k must be ≥ 1".into()));
        }
        let mut last = None;
        for s in &self.schedule {
            s.validate()?;
            if last.is_some_and(|l| l > s.stage) {
                return Err(Error::Config("schedule stages must be in order S1, S1.5, S2".into()));
            }
            last = Some(s.stage);
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.iter().map(|s| s.steps).sum()
    }
}

impl PartialOrd for Stage {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        let rank = |s: &Stage| *s as u8;
        rank(self).partial_cmp(&rank(other))
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: OptimizerConfig,
    /// First moments (momentum buffers for SGD).
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: Model, optimizer: OptimizerConfig) -> Self {
        let zeros: Vec<Tensor> = model
            .store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            model,
            optimizer,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, stage: &StageConfig) {
        let t = (self.step + 1) as f64;
        for (i, p) in self.model.store.iter_mut().enumerate() {
            if !stage.trains(p.module()) {
                continue;
            }
            let m = self.m[i].data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            match self.optimizer {
                OptimizerConfig::Sgd { momentum } => {
                    for k in 0..w.len() {
                        m[k] = momentum * m[k] + g[k];
                        w[k] -= stage.lr * m[k];
                    }
                }
                OptimizerConfig::Adamw {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let v = self.v[i].data_mut();
                    let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    for k in 0..w.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let step = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        w[k] -= stage.lr * (step + weight_decay * w[k]);
                    }
                }
            }
        }
    }
}

/// One optimisation step's inputs.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub episode: &'a Episode,
    pub queries: Vec<usize>,
    /// Seeds token-drop plans and pair sampling.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub stage: String,
    pub step: usize,
    pub total: f64,
    pub l_sim: f64,
    pub l_ar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub top_k: usize,
    pub use_fast: bool,
    pub grad_clip: Option<f64>,
}

/// Per-term values of a batch loss.
pub struct BatchLoss<'t> {
    pub total: Var<'t>,
    pub l_sim: f64,
    pub l_ar: f64,
}

fn diverged(term: &'static str, max_grad: f64) -> impl Fn(Error) -> Error {
    move |e| {
        if e.kind() == ErrorKind::Numeric {
            Error::Diverged {
                step: 0,
                term,
                max_grad,
            }
        } else {
            e
        }
    }
}

/// `mean_j (L_ar + λ·L_sim)` over the batch descriptions, built on `tape`.
pub fn batch_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    batch: &Batch<'_>,
    stage: &StageConfig,
    opts: LossOptions,
) -> Result<BatchLoss<'t>, Error> {
    let max_grad = model.store.max_abs_grad();
    let ep = batch.episode;
    let root = seeded_rng(batch.seed);
    let tokens = ep
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| model.prepare_segment(s, stage.max_token_drop, &mut root.derive(&[0, i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let (latents, r) = model
        .encode_on_tape(tape, &tokens)
        .map_err(diverged("latent", max_grad))?;
    let mut terms = Vec::with_capacity(batch.queries.len());
    let (mut l_sim_sum, mut l_ar_sum) = (0.0, 0.0);
    for (qi, &j) in batch.queries.iter().enumerate() {
        let query = tape.constant(ep.queries[j].tokens.clone());
        let s = model
            .router
            .scores(tape, &model.store, r, query)
            .map_err(|e| diverged("scores", max_grad)(e.into()))?;
        let selected = top_k(s.value().data(), opts.top_k);
        let focus = Var::concat_rows(&selected.iter().map(|&i| latents[i]).collect::<Vec<_>>())?;
        let l_ar = model
            .readout
            .loss(tape, &model.store, focus, r, opts.use_fast, &ep.targets(j))
            .map_err(|e| diverged("l_ar", max_grad)(e.into()))?;
        l_ar_sum += l_ar.value().data()[0];
        let mut term = l_ar;
        if stage.lambda_sim > 0.0 {
            let y = ep.positives(j)?;
            let l_sim = similarity_loss(
                s,
                &y,
                model.router.config.delta,
                model.router.config.n_pairs,
                &mut root.derive(&[1, qi as u64]),
            )
            .map_err(|e| diverged("l_sim", max_grad)(e.into()))?;
            l_sim_sum += l_sim.value().data()[0];
            term = term.add(l_sim.scale(stage.lambda_sim)?)?;
        }
        terms.push(term);
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(BatchLoss {
        total: total.scale(1.0 / n)?,
        l_sim: l_sim_sum / n,
        l_ar: l_ar_sum / n,
    })
}

/// Zero grads, forward, backward and update of the stage's trainable set.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch<'_>,
    stage: &StageConfig,
    opts: LossOptions,
) -> Result<StepRow, Error> {
    let step = state.step;
    let tape = Tape::new();
    let loss = batch_loss(&state.model, &tape, batch, stage, opts).map_err(|e| match e {
        Error::Diverged { term, max_grad, .. } => Error::Diverged { step, term, max_grad },
        other => other,
    })?;
    let total = loss.total.value().data()[0];
    state.model.store.zero_grad();
    tape.backward(loss.total, &mut state.model.store)?;
    let max_grad = state.model.store.max_abs_grad();
    if !max_grad.is_finite() {
        return Err(Error::Diverged {
            step,
            term: "gradient",
            max_grad,
        });
    }
    if let Some(cap) = opts.grad_clip {
        let norm = state
            .model
            .store
            .iter()
            .filter(|(_, p)| stage.trains(p.module()))
            .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cap {
            for p in state.model.store.iter_mut() {
                p.grad = p.grad.map(|g| g * cap / norm);
            }
        }
    }
    state.update(stage);
    state.step += 1;
    Ok(StepRow {
        stage: stage.stage.label().into(),
        step,
        total,
        l_sim: loss.l_sim,
        l_ar: loss.l_ar,
    })
}

/// Retrieval and readout quality over a set of episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub queries: usize,
    /// Top-1 segment is a supervised positive.
    pub recall_at_1: f64,
    /// Described segment is among the selected `k`.
    pub recall_at_k: f64,
    pub readout_loss: f64,
    /// Readout argmax is one of the bag's targets.
    pub readout_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub top_k: usize,
    pub use_fast: bool,
    /// Replace router scores with a constant, so selection takes the first `k`.
    pub bypass_router: bool,
    pub precision: Precision,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            use_fast: true,
            bypass_router: false,
            precision: Precision::F64,
        }
    }
}

/// Bag loss and whether the readout's argmax is one of the targets.
pub fn readout_metrics(
    model: &Model,
    focus: &Tensor,
    fast: &Tensor,
    use_fast: bool,
    targets: &[usize],
) -> Result<(f64, bool), Error> {
    let tape = Tape::new();
    let logits = model.readout.logits(
        &tape,
        &model.store,
        tape.constant(focus.clone()),
        tape.constant(fast.clone()),
        use_fast,
        targets,
    )?;
    let loss = logits.cross_entropy_bag(targets)?.value().data()[0];
    let argmax = top_k(logits.value().data(), 1)[0];
    Ok((loss, targets.contains(&argmax)))
}

#[derive(Default)]
struct EpisodeTally {
    n: usize,
    hit1: usize,
    hitk: usize,
    loss: f64,
    correct: usize,
}

fn eval_episode(model: &Model, ep: &Episode, opts: EvalOptions) -> Result<EpisodeTally, Error> {
    let enc = model.encode_segments(&ep.segments, opts.precision)?;
    let mut t = EpisodeTally::default();
    for j in 0..ep.len() {
        let q = crate::ingest::QueryEmbedding::new(opts.precision.apply(&ep.queries[j].tokens))?;
        let scores = if opts.bypass_router {
            vec![0.5; ep.len()]
        } else {
            model.score(&enc, &q)?.s
        };
        let y = ep.positives(j)?;
        let best = top_k(&scores, 1)[0];
        let selected = top_k(&scores, opts.top_k);
        t.hit1 += usize::from(y[best] == 1);
        t.hitk += usize::from(selected.contains(&j));
        let parts: Vec<&Tensor> = selected.iter().map(|&i| &enc.latents[i]).collect();
        let focus = Tensor::concat_rows(&parts)?;
        let (loss, correct) = readout_metrics(model, &focus, &enc.routing.r, opts.use_fast, &ep.targets(j))?;
        t.loss += loss;
        t.correct += usize::from(correct);
        t.n += 1;
    }
    Ok(t)
}

/// Evaluates every description of every episode; episodes run in parallel.
pub fn evaluate(model: &Model, episodes: &[Episode], opts: EvalOptions) -> Result<EvalMetrics, Error> {
    let model = model.with_precision(opts.precision);
    let tallies = parallel::try_map_indexed(episodes.len(), |i| eval_episode(&model, &episodes[i], opts))?;
    let total = tallies.iter().fold(EpisodeTally::default(), |a, b| EpisodeTally {
        n: a.n + b.n,
        hit1: a.hit1 + b.hit1,
        hitk: a.hitk + b.hitk,
        loss: a.loss + b.loss,
        correct: a.correct + b.correct,
    });
    let n = total.n.max(1) as f64;
    Ok(EvalMetrics {
        queries: total.n,
        recall_at_1: total.hit1 as f64 / n,
        recall_at_k: total.hitk as f64 / n,
        readout_loss: total.loss / n,
        readout_acc: total.correct as f64 / n,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub steps: usize,
    pub heldout: EvalMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub rows: Vec<StepRow>,
    pub stages: Vec<StageSummary>,
    pub final_retrieval_accuracy: f64,
    pub final_eval: EvalMetrics,
    pub wall_clock_secs: f64,
}

/// Draws the batch for global step `step` from the training pool.
pub fn sample_batch<'a>(dataset: &'a Dataset, batch_queries: usize, seed: u64, step: usize) -> Batch<'a> {
    let batch_seed = derive_seed(seed, &[20, step as u64]);
    let mut rng = seeded_rng(batch_seed);
    let episode = &dataset.train[rng.below(dataset.train.len())];
    let mut queries = rng.sample_without_replacement(episode.len(), batch_queries.min(episode.len()));
    queries.sort_unstable();
    Batch {
        episode,
        queries,
        seed: batch_seed,
    }
}

/// Runs every stage of `config.schedule` in order. `on_stage_end` receives
/// the state after each stage (for checkpointing).
pub fn run_stages(
    config: &TrainConfig,
    seed: u64,
    dataset: &Dataset,
    mut on_stage_end: impl FnMut(&StageConfig, &TrainState) -> Result<(), Error>,
) -> Result<(TrainState, TrainReport), Error> {
    config.validate()?;
    let started = Instant::now();
    let model = Model::new(config.model.clone(), derive_seed(seed, &[1]))?;
    let mut state = TrainState::new(model, config.optimizer.clone());
    let opts = LossOptions {
        top_k: config.top_k,
        use_fast: config.use_fast,
        grad_clip: config.grad_clip,
    };
    let eval_opts = EvalOptions {
        top_k: config.top_k,
        use_fast: config.use_fast,
        ..EvalOptions::default()
    };
    let mut rows = Vec::with_capacity(config.total_steps());
    let mut stages = Vec::new();
    for stage in &config.schedule {
        for _ in 0..stage.steps {
            let batch = sample_batch(dataset, config.batch_queries, seed, state.step);
            rows.push(train_step(&mut state, &batch, stage, opts)?);
        }
        stages.push(StageSummary {
            stage: stage.stage.label().into(),
            steps: stage.steps,
            heldout: evaluate(&state.model, &dataset.heldout, eval_opts)?,
        });
        on_stage_end(stage, &state)?;
    }
    let final_eval = stages
        .last()
        .map(|s| s.heldout.clone())
        .map_or_else(|| evaluate(&state.model, &dataset.heldout, eval_opts), Ok)?;
    Ok((
        state,
        TrainReport {
            seed,
            rows,
            stages,
            final_retrieval_accuracy: final_eval.recall_at_1,
            final_eval,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Generates the dataset and trains.
pub fn train(config: &TrainConfig, seed: u64) -> Result<(TrainState, TrainReport), Error> {
    config.validate()?;
    let dataset = Dataset::generate(&config.task, derive_seed(seed, &[2]))?;
    run_stages(config, seed, &dataset, |_, _| Ok(()))
}
