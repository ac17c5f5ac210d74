use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use salova::harness::{ablation_run, ablation_table, niah_eval, standard_variants, NiahSpec, Scorer, Variant};
use salova::ingest::format::{load_matrix_file, write_matrix_file};
use salova::ingest::{
    load_feature_file, synth_query_for, synth_video, write_feature_file, Dtype, EmbeddingProvider, FeatureStream,
    QueryEmbedding, SegmentManifest, SynthSpec, SyntheticProvider,
};
use salova::numerics::{derive_seed, parallel, seeded_rng, Precision, Tensor};
use salova::router::top_k;
use salova::segmenter::{segment_stream, DetectorConfig};
use salova::supervision::{build_supervision, load_csv_matrix, CorrespondenceScores, DEFAULT_TAU_T2T, DEFAULT_TAU_V2T};
use salova::trainer::{
    grad_check, load_checkpoint, miniature_objective, run_stages, save_checkpoint, CheckpointMeta, Dataset, TrainConfig,
};
use salova::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "salova", version, about = "Segment retrieval over long feature streams")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with any of the sections `train`, `niah`, `detector`,
    /// `supervision`, `synth`, `gradcheck_tol`, `variants`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Storage width for inference; training always runs in f64.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Router,
    Oracle,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic video, its manifest, one description and its correspondence scores.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Segment the written description describes.
        #[arg(long, default_value_t = 0)]
        describe: usize,
    },
    /// Detect scene cuts in a feature stream.
    Segment {
        #[arg(long)]
        stream: PathBuf,
        /// Where to write the manifest JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Threshold V2T and T2T score matrices (CSV) into a positive matrix.
    Supervise {
        #[arg(long)]
        v2t: PathBuf,
        #[arg(long)]
        t2t: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the stage schedule on the synthetic task and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the segments of a stream against a description.
    Route {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Segment manifest; detected with the default detector when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Description tokens as an SLVF matrix.
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Needle-in-a-haystack heatmap.
    Niah {
        /// Trained checkpoint; needed by the router scorer.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScorerArg::Router)]
        scorer: ScorerArg,
        /// Heatmap CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation table on held-out synthetic episodes.
    Ablate {
        /// Evaluate this checkpoint instead of training one.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the miniature pipeline's gradients.
    Gradcheck,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    train: TrainConfig,
    niah: NiahSpec,
    detector: DetectorConfig,
    supervision: Thresholds,
    synth: SynthSpec,
    gradcheck_tol: Option<f64>,
    variants: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct Thresholds {
    tau_v2t: f64,
    tau_t2t: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_v2t: DEFAULT_TAU_V2T,
            tau_t2t: DEFAULT_TAU_T2T,
        }
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn segments_of(stream: &FeatureStream, manifest: &SegmentManifest) -> Result<Vec<FeatureStream>, Error> {
    Ok(manifest
        .segments
        .iter()
        .map(|s| stream.slice(s.start_frame, s.end_frame))
        .collect::<Result<Vec<_>, _>>()?)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(cli.global.config.as_deref())?;
    let seed = cli.global.seed;
    let precision: Precision = cli.global.precision.into();
    match cli.command {
        Command::Synth { out_dir, describe } => {
            let video = synth_video(&cfg.synth, seed)?;
            if describe >= video.manifest.len() {
                return Err(Error::Config(format!(
                    "--describe {describe} but the video has {} segments",
                    video.manifest.len()
                )));
            }
            std::fs::create_dir_all(&out_dir)?;
            write_feature_file(out_dir.join("stream.slvf"), &video.stream)?;
            video.manifest.save(out_dir.join("manifest.json"))?;
            let mut rng = seeded_rng(derive_seed(seed, &[3]));
            let query = synth_query_for(describe, &video.manifest, &video.prototypes, 0.1, 2, &mut rng)?;
            write_matrix_file(out_dir.join("query.slvf"), &query.tokens, Dtype::F64)?;

            let provider = SyntheticProvider {
                dim: cfg.synth.dim,
                seed,
            };
            let mut seg_rows = Vec::new();
            let mut desc_rows = Vec::new();
            for (i, s) in video.manifest.segments.iter().enumerate() {
                seg_rows.push(provider.embed_segment(&video.stream, i, *s)?);
                desc_rows.push(synth_query_for(i, &video.manifest, &video.prototypes, 0.1, 2, &mut rng)?.pooled());
            }
            let scores =
                CorrespondenceScores::from_embeddings(&Tensor::from_rows(&seg_rows)?, &Tensor::from_rows(&desc_rows)?)?;
            std::fs::write(out_dir.join("v2t.csv"), matrix_csv(&scores.s_v2t))?;
            std::fs::write(out_dir.join("t2t.csv"), matrix_csv(&scores.s_t2t))?;
            emit(json!({
                "command": "synth",
                "out_dir": out_dir,
                "frames": video.stream.frame_count(),
                "segments": video.manifest.len(),
                "described": describe,
            }));
        }
        Command::Segment { stream, out } => {
            let s = load_feature_file(&stream)?;
            let manifest = segment_stream(&s, &cfg.detector)?;
            if let Some(out) = &out {
                manifest.save(out)?;
            }
            emit(json!({
                "command": "segment",
                "frames": manifest.total_frames,
                "segments": manifest.len(),
                "cuts": manifest.cut_points(),
            }));
        }
        Command::Supervise { v2t, t2t, out } => {
            let scores = CorrespondenceScores {
                s_v2t: load_csv_matrix(&v2t)?,
                s_t2t: load_csv_matrix(&t2t)?,
            };
            let y = build_supervision(&scores, cfg.supervision.tau_v2t, cfg.supervision.tau_t2t)?;
            if let Some(out) = &out {
                std::fs::write(out, y.to_csv())?;
            }
            let positives: usize = y.y.iter().flatten().map(|&v| usize::from(v)).sum();
            emit(json!({
                "command": "supervise",
                "n": y.len(),
                "positives": positives,
                "y": if out.is_none() { json!(y.y) } else { json!(null) },
            }));
        }
        Command::Train { out } => {
            let config = &cfg.train;
            config.validate()?;
            let dataset = Dataset::generate(&config.task, derive_seed(seed, &[2]))?;
            let (state, report) = run_stages(config, seed, &dataset, |stage, state| {
                let path = stage_path(&out, stage.stage.label());
                save_checkpoint(&path, &state.model, &meta(state.model.config.clone(), state.step, seed))?;
                Ok(())
            })?;
            save_checkpoint(&out, &state.model, &meta(state.model.config.clone(), state.step, seed))?;
            for row in &report.rows {
                emit(json!({ "event": "step", "row": row }));
            }
            for stage in &report.stages {
                emit(json!({ "event": "stage", "summary": stage }));
            }
            emit(json!({
                "event": "report",
                "seed": report.seed,
                "final_retrieval_accuracy": report.final_retrieval_accuracy,
                "final_eval": report.final_eval,
                "wall_clock_secs": report.wall_clock_secs,
                "checkpoint": out,
            }));
        }
        Command::Route {
            ckpt,
            stream,
            manifest,
            query,
            top_k: k,
        } => {
            let (model, _) = load_ckpt(&ckpt)?;
            let s = load_feature_file(&stream)?;
            let manifest = match &manifest {
                Some(p) => SegmentManifest::load(p)?,
                None => segment_stream(&s, &cfg.detector)?,
            };
            manifest.validate(1)?;
            if manifest.total_frames != s.frame_count() {
                return Err(Error::Data(format!(
                    "manifest covers {} frames but the stream has {}",
                    manifest.total_frames,
                    s.frame_count()
                )));
            }
            let model = model.with_precision(precision);
            let enc = model.encode_segments(&segments_of(&s, &manifest)?, precision)?;
            let q = QueryEmbedding::new(precision.apply(&load_matrix_file(&query)?))?;
            let scores = model.score(&enc, &q)?.s;
            emit(json!({
                "command": "route",
                "segments": manifest.len(),
                "scores": scores,
                "selected": top_k(&scores, k.max(1)),
            }));
        }
        Command::Niah { ckpt, scorer, out } => {
            let loaded = match (&ckpt, scorer) {
                (Some(p), _) => Some(load_ckpt(p)?),
                (None, ScorerArg::Router) => {
                    return Err(Error::Config("the router scorer needs --ckpt".into()));
                }
                (None, _) => None,
            };
            if let (Some((_, m)), ScorerArg::Router) = (&loaded, scorer) {
                if m.steps == 0 {
                    return Err(Error::Data("checkpoint is untrained (0 steps)".into()));
                }
            }
            let model = loaded.as_ref().map(|(m, _)| m.with_precision(precision));
            let scorer = match (scorer, &model) {
                (ScorerArg::Router, Some(model)) => Scorer::Router { model, precision },
                (ScorerArg::Oracle, _) => Scorer::Oracle,
                _ => Scorer::Random,
            };
            let mut spec = cfg.niah.clone();
            spec.seed = seed;
            let heatmap = niah_eval(&spec, &scorer)?;
            if let Some(out) = &out {
                std::fs::write(out, heatmap.to_csv())?;
            }
            emit(json!({
                "command": "niah",
                "mean_recall": heatmap.mean(),
                "heatmap": heatmap,
            }));
        }
        Command::Ablate { ckpt, out } => {
            let variants = match &cfg.variants {
                Some(names) => names.iter().map(|n| Variant::parse(n)).collect::<Result<Vec<_>, _>>()?,
                None => standard_variants(),
            };
            let config = &cfg.train;
            let table = match &ckpt {
                Some(p) => {
                    config.validate()?;
                    let (model, _) = load_ckpt(p)?;
                    if model.config != config.model {
                        return Err(Error::Config(
                            "checkpoint model differs from the configured model".into(),
                        ));
                    }
                    let dataset = Dataset::generate(&config.task, derive_seed(seed, &[2]))?;
                    ablation_table(&variants, &model, &dataset.heldout, config.top_k)?
                }
                None => ablation_run(&variants, config, seed)?,
            };
            if let Some(out) = &out {
                std::fs::write(out, table.to_csv())?;
            }
            for row in &table.rows {
                emit(json!({ "command": "ablate", "row": row }));
            }
        }
        Command::Gradcheck => {
            let tol = cfg.gradcheck_tol.unwrap_or(1e-4);
            let mut objective = miniature_objective(seed)?;
            let report = grad_check(&mut objective, tol)?;
            emit(json!({ "command": "gradcheck", "report": report }));
            if !report.passed {
                return Err(Error::Diverged {
                    step: 0,
                    term: "gradient check",
                    max_grad: report.max_rel_err,
                });
            }
        }
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<(salova::model::Model, CheckpointMeta), Error> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn meta(model: salova::model::ModelConfig, steps: usize, seed: u64) -> CheckpointMeta {
    CheckpointMeta { model, steps, seed }
}

/// `run.ckpt` → `run.S1.5.ckpt`.
fn stage_path(out: &Path, label: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{label}.{ext}"),
        None => format!("{stem}.{label}"),
    };
    out.with_file_name(name)
}

fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn threads_from_env() -> Result<(), Error> {
    if let Ok(v) = std::env::var("SALOVA_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SALOVA_THREADS must be a positive integer, got {v:?}")))?;
        parallel::init_threads(n);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                ErrorKind::Usage.exit_code()
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match threads_from_env().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
