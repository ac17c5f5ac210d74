//! Ablation drivers: frame sampling without the router, the fast pathway,
//! and the number of retrieved segments.

use serde::Serialize;

use crate::ingest::{even_indices, Segment};
use crate::model::Model;
use crate::numerics::{derive_seed, parallel, Precision, Tensor};
use crate::router::top_k;
use crate::segmenter::{segment_stream, DetectorConfig};
use crate::trainer::{evaluate, readout_metrics, run_stages, Dataset, Episode, EvalOptions, TrainConfig};
use crate::Error;

/// Retrieval counts compared in the top-k ablation.
pub const TOPK_SET: [usize; 4] = [1, 5, 9, 13];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Router bypassed; each stream subsampled to 8 frames before segmentation.
    Frames8,
    Frames16,
    /// Router bypassed; one frame per second of stream time.
    Fps1,
    Full,
    /// Fast pathway input to the readout replaced by zeros.
    NoFocusFast,
    TopK(usize),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Frames8 => "frames_8".into(),
            Variant::Frames16 => "frames_16".into(),
            Variant::Fps1 => "fps_1".into(),
            Variant::Full => "full".into(),
            Variant::NoFocusFast => "no_focusfast".into(),
            Variant::TopK(k) => format!("topk_{k}"),
        }
    }

    pub fn group(&self) -> &'static str {
        match self {
            Variant::Frames8 | Variant::Frames16 | Variant::Fps1 => "frame_sampling",
            Variant::Full | Variant::NoFocusFast => "focusfast",
            Variant::TopK(_) => "topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        let v = match s {
            "frames_8" => Variant::Frames8,
            "frames_16" => Variant::Frames16,
            "fps_1" => Variant::Fps1,
            "full" => Variant::Full,
            "no_focusfast" => Variant::NoFocusFast,
            other => match other.strip_prefix("topk_").and_then(|k| k.parse().ok()) {
                Some(k) if TOPK_SET.contains(&k) => Variant::TopK(k),
                _ => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
            },
        };
        Ok(v)
    }
}

/// Every variant of the three ablation tables.
pub fn standard_variants() -> Vec<Variant> {
    let mut v = vec![
        Variant::Frames8,
        Variant::Frames16,
        Variant::Fps1,
        Variant::Full,
        Variant::NoFocusFast,
    ];
    v.extend(TOPK_SET.iter().map(|&k| Variant::TopK(k)));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub group: String,
    pub recall_at_1: f64,
    pub recall_at_k: f64,
    pub readout_loss: f64,
    pub readout_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,group,recall_at_1,recall_at_k,readout_loss,readout_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant, r.group, r.recall_at_1, r.recall_at_k, r.readout_loss, r.readout_acc
            ));
        }
        out
    }
}

/// Whether detected segment `s` of the subsampled stream keeps a frame of
/// `truth`; `kept[f]` is the original index of subsampled frame `f`.
fn keeps_frame_of(s: Segment, kept: &[usize], truth: Segment) -> bool {
    kept[s.start_frame..s.end_frame]
        .iter()
        .any(|&f| truth.start_frame <= f && f < truth.end_frame)
}

/// Subsamples, re-segments and reads out with uniform scores, so the first
/// `k` detected segments are selected. A selected segment is a hit when it
/// keeps at least one frame of the described segment.
fn eval_resampled(
    model: &Model,
    episodes: &[Episode],
    keep: impl Fn(&Episode) -> usize + Sync,
    k: usize,
) -> Result<AblationRow, Error> {
    let per_episode = parallel::try_map_indexed(episodes.len(), |e| -> Result<[f64; 5], Error> {
        let ep = &episodes[e];
        let stream = &ep.video.stream;
        let n_keep = keep(ep);
        let kept = even_indices(stream.frame_count(), n_keep);
        let sub = stream.subsample_even(n_keep)?;
        let manifest = segment_stream(&sub, &DetectorConfig::default())?;
        let segments = manifest
            .segments
            .iter()
            .map(|s| sub.slice(s.start_frame, s.end_frame))
            .collect::<Result<Vec<_>, _>>()?;
        let enc = model.encode_segments(&segments, Precision::F64)?;
        let selected = top_k(&vec![0.5; segments.len()], k);
        let parts: Vec<&Tensor> = selected.iter().map(|&i| &enc.latents[i]).collect();
        let focus = Tensor::concat_rows(&parts)?;
        let mut acc = [0.0; 5];
        for j in 0..ep.len() {
            let truth = ep.video.manifest.segments[j];
            let hit = |i: usize| keeps_frame_of(manifest.segments[i], &kept, truth);
            acc[0] += f64::from(u8::from(hit(selected[0])));
            acc[1] += f64::from(u8::from(selected.iter().any(|&i| hit(i))));
            let (loss, correct) = readout_metrics(model, &focus, &enc.routing.r, true, &ep.targets(j))?;
            acc[2] += loss;
            acc[3] += f64::from(u8::from(correct));
            acc[4] += 1.0;
        }
        Ok(acc)
    })?;
    let sum = per_episode.iter().fold([0.0; 5], |mut a, b| {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        a
    });
    let n = sum[4].max(1.0);
    Ok(AblationRow {
        variant: String::new(),
        group: String::new(),
        recall_at_1: sum[0] / n,
        recall_at_k: sum[1] / n,
        readout_loss: sum[2] / n,
        readout_acc: sum[3] / n,
    })
}

/// Evaluates one variant as an override of the trained model's settings.
pub fn evaluate_variant(
    variant: Variant,
    model: &Model,
    episodes: &[Episode],
    top_k: usize,
) -> Result<AblationRow, Error> {
    let opts = EvalOptions {
        top_k,
        ..EvalOptions::default()
    };
    let row_of = |m: crate::trainer::EvalMetrics| AblationRow {
        variant: String::new(),
        group: String::new(),
        recall_at_1: m.recall_at_1,
        recall_at_k: m.recall_at_k,
        readout_loss: m.readout_loss,
        readout_acc: m.readout_acc,
    };
    let mut row = match variant {
        Variant::Frames8 => eval_resampled(model, episodes, |_| 8, top_k)?,
        Variant::Frames16 => eval_resampled(model, episodes, |_| 16, top_k)?,
        Variant::Fps1 => eval_resampled(
            model,
            episodes,
            |ep| {
                let s = &ep.video.stream;
                ((s.frame_count() as f64 / s.fps).ceil() as usize).max(1)
            },
            top_k,
        )?,
        Variant::Full => row_of(evaluate(model, episodes, opts)?),
        Variant::NoFocusFast => row_of(evaluate(
            model,
            episodes,
            EvalOptions {
                use_fast: false,
                ..opts
            },
        )?),
        Variant::TopK(k) => row_of(evaluate(model, episodes, EvalOptions { top_k: k, ..opts })?),
    };
    row.variant = variant.name();
    row.group = variant.group().into();
    Ok(row)
}

/// Trains once on the synthetic task, then evaluates every variant on the
/// held-out episodes.
pub fn ablation_run(variants: &[Variant], config: &TrainConfig, seed: u64) -> Result<AblationTable, Error> {
    config.validate()?;
    let dataset = Dataset::generate(&config.task, derive_seed(seed, &[2]))?;
    let (state, _) = run_stages(config, seed, &dataset, |_, _| Ok(()))?;
    ablation_table(variants, &state.model, &dataset.heldout, config.top_k)
}

pub fn ablation_table(
    variants: &[Variant],
    model: &Model,
    episodes: &[Episode],
    top_k: usize,
) -> Result<AblationTable, Error> {
    let rows = variants
        .iter()
        .map(|&v| evaluate_variant(v, model, episodes, top_k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hit_needs_a_kept_frame() {
        let seg = |a, b| Segment {
            start_frame: a,
            end_frame: b,
        };
        let kept = [0, 10, 20, 30];
        assert!(keeps_frame_of(seg(0, 4), &kept, seg(15, 25)));
        assert!(!keeps_frame_of(seg(0, 4), &kept, seg(11, 19)));
        assert!(!keeps_frame_of(seg(2, 4), &kept, seg(0, 15)));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in standard_variants() {
            assert_eq!(Variant::parse(&v.name()).unwrap(), v);
        }
        assert!(Variant::parse("topk_3").is_err());
        assert!(Variant::parse("frames_32").is_err());
        let topk: Vec<_> = standard_variants()
            .into_iter()
            .filter(|v| v.group() == "topk")
            .collect();
        assert_eq!(topk.len(), 4);
    }
}
