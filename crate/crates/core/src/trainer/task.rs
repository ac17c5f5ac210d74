//! The separable synthetic retrieval task.
//!
//! Each episode is one synthetic video with one description per segment.
//! Descriptions are noisy copies of the segment prototypes and supervision
//! comes from thresholded correspondence scores. A fixed random projection
//! labels every segment by its prototype. Each video also carries one of
//! `vocab` themes: a weak offset added to every frame token, invisible in
//! the descriptions. The readout target for description `j` is the bag
//! `[label(j), theme]`. Any one segment shows the theme only faintly, so
//! averaging over every segment recovers it better than over the selected
//! few.

use serde::{Deserialize, Serialize};

use crate::ingest::{
    synth_query_for, synth_video, EmbeddingProvider, FeatureStream, QueryEmbedding, SynthSpec, SynthVideo,
    SyntheticProvider,
};
use crate::numerics::{derive_seed, seeded_rng, Tensor};
use crate::supervision::{
    build_supervision, query_targets, CorrespondenceScores, SupervisionMatrix, DEFAULT_TAU_T2T, DEFAULT_TAU_V2T,
};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub video: SynthSpec,
    /// Relative noise of description tokens around their prototype.
    pub query_noise: f64,
    pub query_tokens: usize,
    pub vocab: usize,
    /// Theme offset scale relative to the unit-RMS prototype entries.
    pub theme_strength: f64,
    pub tau_v2t: f64,
    pub tau_t2t: f64,
    /// Number of training videos cycled through.
    pub train_videos: usize,
    pub heldout_videos: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            video: SynthSpec {
                max_cross_sim: 0.1,
                ..SynthSpec::default()
            },
            query_noise: 0.1,
            query_tokens: 2,
            vocab: 4,
            theme_strength: 0.2,
            tau_v2t: DEFAULT_TAU_V2T,
            tau_t2t: DEFAULT_TAU_T2T,
            train_videos: 500,
            heldout_videos: 16,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.vocab < 2 || self.query_tokens == 0 || self.train_videos == 0 {
            return Err(Error::Config(
                "task needs vocab ≥ 2, query_tokens ≥ 1 and train_videos ≥ 1".into(),
            ));
        }
        for (name, v) in [
            ("query_noise", self.query_noise),
            ("theme_strength", self.theme_strength),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Fixed labelling map: `vocab × d` Gaussian matrix.
pub fn label_projection(vocab: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::matrix(vocab, dim, rng.normals(vocab * dim)).expect("consistent shape")
}

/// Fixed label maps shared by every episode of a dataset.
#[derive(Clone, Debug)]
pub struct Labeling {
    /// `vocab × d`; labels segments by prototype.
    pub projection: Tensor,
    /// `vocab × d`; row `c` is the frame offset of theme `c`.
    pub themes: Tensor,
}

impl Labeling {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        Self {
            projection: label_projection(vocab, dim, derive_seed(seed, &[0])),
            themes: label_projection(vocab, dim, derive_seed(seed, &[1])),
        }
    }
}

/// Index of the projection row with the largest response to `v`.
pub fn label_of(projection: &Tensor, v: &[f64]) -> usize {
    (0..projection.rows())
        .map(|r| projection.row(r).iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub video: SynthVideo,
    pub segments: Vec<FeatureStream>,
    /// Description `j` describes segment `j`.
    pub queries: Vec<QueryEmbedding>,
    pub supervision: SupervisionMatrix,
    pub labels: Vec<usize>,
    pub theme: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Positive segments for description `j`.
    pub fn positives(&self, j: usize) -> Result<Vec<u8>, Error> {
        Ok(query_targets(&self.supervision, j)?)
    }

    /// Readout bag for description `j`.
    pub fn targets(&self, j: usize) -> Vec<usize> {
        vec![self.labels[j], self.theme]
    }
}

fn add_theme(stream: &FeatureStream, offset: &[f64]) -> Result<FeatureStream, Error> {
    let mut frames = stream.frames().clone();
    for (x, o) in frames.data_mut().iter_mut().zip(offset.iter().cycle()) {
        *x += o;
    }
    let mut out = FeatureStream::new(stream.video_id.clone(), frames)?;
    out.fps = stream.fps;
    out.dtype = stream.dtype;
    Ok(out)
}

/// Builds one episode; the same `(spec, labeling, seed)` always gives the
/// same episode. Prototypes stay theme-free; only the stream carries it.
pub fn build_episode(spec: &TaskSpec, labeling: &Labeling, seed: u64) -> Result<Episode, Error> {
    let mut video = synth_video(&spec.video, seed)?;
    let n = video.manifest.len();
    let theme = seeded_rng(derive_seed(seed, &[8])).below(spec.vocab);
    let offset: Vec<f64> = labeling
        .themes
        .row(theme)
        .iter()
        .map(|v| v * spec.theme_strength)
        .collect();
    video.stream = add_theme(&video.stream, &offset)?;
    let segments = video
        .manifest
        .segments
        .iter()
        .map(|s| video.stream.slice(s.start_frame, s.end_frame))
        .collect::<Result<Vec<_>, _>>()?;
    let mut qrng = seeded_rng(derive_seed(seed, &[7]));
    let queries = (0..n)
        .map(|j| {
            synth_query_for(
                j,
                &video.manifest,
                &video.prototypes,
                spec.query_noise,
                spec.query_tokens,
                &mut qrng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let provider = SyntheticProvider {
        dim: spec.video.dim,
        seed,
    };
    let mut seg_rows = Vec::with_capacity(n);
    for (i, s) in video.manifest.segments.iter().enumerate() {
        seg_rows.push(provider.embed_segment(&video.stream, i, *s)?);
    }
    let desc_rows: Vec<Vec<f64>> = queries.iter().map(|q| q.pooled()).collect();
    let scores =
        CorrespondenceScores::from_embeddings(&Tensor::from_rows(&seg_rows)?, &Tensor::from_rows(&desc_rows)?)?;
    let supervision = build_supervision(&scores, spec.tau_v2t, spec.tau_t2t)?;
    let labels = (0..n)
        .map(|i| label_of(&labeling.projection, video.prototypes.row(i)))
        .collect();
    Ok(Episode {
        video,
        segments,
        queries,
        supervision,
        labels,
        theme,
    })
}

/// Training pool and held-out episodes derived from one seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Episode>,
    pub heldout: Vec<Episode>,
}

impl Dataset {
    pub fn generate(spec: &TaskSpec, seed: u64) -> Result<Self, Error> {
        spec.validate()?;
        let labeling = Labeling::new(spec.vocab, spec.video.dim, derive_seed(seed, &[12]));
        let make = |tag: u64, count: usize| {
            (0..count)
                .map(|i| build_episode(spec, &labeling, derive_seed(seed, &[tag, i as u64])))
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            train: make(10, spec.train_videos)?,
            heldout: make(11, spec.heldout_videos)?,
        })
    }
}
