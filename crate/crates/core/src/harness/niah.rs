//! Needle-in-a-haystack retrieval at toy scale.

use serde::{Deserialize, Serialize};

use crate::ingest::{synth_query_for, synth_video, FeatureStream, QueryEmbedding, SynthSpec, SynthVideo};
use crate::model::Model;
use crate::numerics::{derive_seed, parallel, seeded_rng, Precision};
use crate::router::top_k;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NiahSpec {
    /// Haystack sizes in segments.
    pub haystack_lengths: Vec<usize>,
    pub depth_fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub frames_per_segment: usize,
    pub dim: usize,
    pub tokens_per_frame: usize,
    /// Bound on pairwise prototype cosine among needle and distractors.
    pub max_cross_sim: f64,
    pub frame_noise: f64,
    pub query_noise: f64,
    pub query_tokens: usize,
}

impl Default for NiahSpec {
    fn default() -> Self {
        Self {
            haystack_lengths: vec![8, 16, 32, 64, 128, 256],
            depth_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            trials: 50,
            seed: 0,
            frames_per_segment: 4,
            dim: 64,
            tokens_per_frame: 4,
            max_cross_sim: 0.3,
            frame_noise: 0.1,
            query_noise: 0.1,
            query_tokens: 2,
        }
    }
}

impl NiahSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.haystack_lengths.is_empty() || self.haystack_lengths.iter().any(|&n| n < 2) {
            return Err(Error::Config("haystack lengths must be ≥ 2".into()));
        }
        let d = &self.depth_fractions;
        if d.is_empty() || d.iter().any(|f| !(0.0..=1.0).contains(f)) || d.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("depth fractions must be sorted and within [0, 1]".into()));
        }
        if self.trials == 0 || self.frames_per_segment == 0 {
            return Err(Error::Config("trials and frames_per_segment must be ≥ 1".into()));
        }
        Ok(())
    }

    fn video_spec(&self, n: usize) -> SynthSpec {
        SynthSpec {
            n_segments: n,
            min_frames: self.frames_per_segment,
            max_frames: self.frames_per_segment,
            dim: self.dim,
            tokens_per_frame: self.tokens_per_frame,
            max_cross_sim: self.max_cross_sim,
            frame_noise: self.frame_noise,
        }
    }
}

/// `min(floor(depth · N), N − 1)`.
pub fn needle_index(depth: f64, n: usize) -> usize {
    ((depth * n as f64).floor() as usize).min(n - 1)
}

#[derive(Clone, Debug)]
pub struct NiahInstance {
    pub video: SynthVideo,
    pub segments: Vec<FeatureStream>,
    pub query: QueryEmbedding,
    pub needle_index: usize,
}

/// A haystack of `n` segments whose segment at the needle index is described
/// by the query; every other segment is a distractor.
pub fn niah_build(spec: &NiahSpec, n: usize, depth: f64, seed: u64) -> Result<NiahInstance, Error> {
    if n < 2 || !(0.0..=1.0).contains(&depth) {
        return Err(Error::Config(format!("invalid cell: {n} segments at depth {depth}")));
    }
    let video = synth_video(&spec.video_spec(n), seed)?;
    let needle = needle_index(depth, n);
    let mut rng = seeded_rng(derive_seed(seed, &[3]));
    let query = synth_query_for(
        needle,
        &video.manifest,
        &video.prototypes,
        spec.query_noise,
        spec.query_tokens,
        &mut rng,
    )?;
    let segments = video
        .manifest
        .segments
        .iter()
        .map(|s| video.stream.slice(s.start_frame, s.end_frame))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NiahInstance {
        video,
        segments,
        query,
        needle_index: needle,
    })
}

/// Scores segments of a haystack against its query.
pub enum Scorer<'a> {
    /// Cosine between pooled query and segment prototypes: the upper bound.
    Oracle,
    /// Independent uniform scores.
    Random,
    Router {
        model: &'a Model,
        precision: Precision,
    },
}

impl Scorer<'_> {
    fn scores(&self, inst: &NiahInstance, seed: u64) -> Result<Vec<f64>, Error> {
        match self {
            Scorer::Oracle => {
                let q = inst.query.pooled();
                let p = &inst.video.prototypes;
                Ok((0..p.rows()).map(|i| cosine(&q, p.row(i))).collect())
            }
            Scorer::Random => {
                let mut rng = seeded_rng(derive_seed(seed, &[4]));
                Ok((0..inst.segments.len()).map(|_| rng.uniform()).collect())
            }
            Scorer::Router { model, precision } => {
                let enc = model.encode_segments(&inst.segments, *precision)?;
                let q = QueryEmbedding::new(precision.apply(&inst.query.tokens))?;
                Ok(model.score(&enc, &q)?.s)
            }
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Recall@1 per cell; rows are depths, columns haystack lengths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub depths: Vec<f64>,
    pub lengths: Vec<usize>,
    pub frames_per_segment: usize,
    pub trials: usize,
    pub cells: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn mean(&self) -> f64 {
        let n = self.cells.iter().map(Vec::len).sum::<usize>().max(1);
        self.cells.iter().flatten().sum::<f64>() / n as f64
    }

    /// Total frames along the header, needle depth down the first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth\\frames");
        for &n in &self.lengths {
            out.push_str(&format!(",{}", n * self.frames_per_segment));
        }
        out.push('\n');
        for (depth, row) in self.depths.iter().zip(&self.cells) {
            out.push_str(&format!("{depth}"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates every `(depth, length)` cell; cells run in parallel with RNG
/// streams derived from `(seed, row, col)`.
pub fn niah_eval(spec: &NiahSpec, scorer: &Scorer<'_>) -> Result<Heatmap, Error> {
    spec.validate()?;
    let (rows, cols) = (spec.depth_fractions.len(), spec.haystack_lengths.len());
    let cells = parallel::try_map_indexed(rows * cols, |c| -> Result<f64, Error> {
        let (r, col) = (c / cols, c % cols);
        let (depth, n) = (spec.depth_fractions[r], spec.haystack_lengths[col]);
        let mut hits = 0;
        for t in 0..spec.trials {
            let seed = derive_seed(spec.seed, &[r as u64, col as u64, t as u64]);
            let inst = niah_build(spec, n, depth, seed)?;
            let scores = scorer.scores(&inst, seed)?;
            hits += usize::from(top_k(&scores, 1) == [inst.needle_index]);
        }
        Ok(hits as f64 / spec.trials as f64)
    })?;
    Ok(Heatmap {
        depths: spec.depth_fractions.clone(),
        lengths: spec.haystack_lengths.clone(),
        frames_per_segment: spec.frames_per_segment,
        trials: spec.trials,
        cells: cells.chunks(cols).map(<[f64]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_clamp() {
        assert_eq!(needle_index(0.0, 10), 0);
        assert_eq!(needle_index(1.0, 10), 9);
        assert_eq!(needle_index(0.5, 10), 5);
        assert_eq!(needle_index(0.75, 8), 6);
    }

    #[test]
    fn csv_axes() {
        let h = Heatmap {
            depths: vec![0.0, 1.0],
            lengths: vec![8, 16],
            frames_per_segment: 4,
            trials: 1,
            cells: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
        };
        assert_eq!(h.to_csv(), "depth\\frames,32,64\n0,1,0.5\n1,0,1\n");
        assert_eq!(h.mean(), 0.625);
    }

    #[test]
    fn spec_validation() {
        let mut s = NiahSpec::default();
        s.depth_fractions = vec![0.5, 0.25];
        assert!(s.validate().is_err());
        let mut s = NiahSpec::default();
        s.haystack_lengths = vec![1];
        assert!(s.validate().is_err());
    }
}
