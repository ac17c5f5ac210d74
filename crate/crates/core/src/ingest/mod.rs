//! Feature streams, segment manifests, file formats and synthetic data.

pub mod format;
mod provider;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub use format::{load_feature_file, write_feature_file, Dtype};
pub use provider::{provider_from_config, EmbeddingProvider, FileBackedProvider, SyntheticProvider};
pub use synth::{synth_query_for, synth_video, SynthSpec, SynthVideo};

/// Per-frame token counts of the reference encoders.
pub const TOKENS_PER_FRAME_POOLED: usize = 196;
pub const TOKENS_PER_FRAME_LLAVA: usize = 144;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl IngestError {
    pub(crate) fn format(offset: usize, message: String) -> Self {
        Self::Format { offset, message }
    }
}

/// Per-frame token grids `T × P × d` for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub video_id: String,
    pub fps: f64,
    pub dtype: Dtype,
    frames: Tensor,
}

impl FeatureStream {
    pub fn new(video_id: impl Into<String>, frames: Tensor) -> Result<Self, IngestError> {
        let shape = frames.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(IngestError::Precondition(format!(
                "feature stream needs T, P, d ≥ 1, got {shape:?}"
            )));
        }
        Ok(Self {
            video_id: video_id.into(),
            fps: 1.0,
            dtype: Dtype::F64,
            frames,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// `[T, P, d]`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[0], s[1], s[2]]
    }

    pub fn frame_count(&self) -> usize {
        self.dims()[0]
    }

    /// Flattened `P·d` entries of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let [_, p, d] = self.dims();
        &self.frames.data()[t * p * d..(t + 1) * p * d]
    }

    /// Frames `start..end` as a new stream.
    pub fn slice(&self, start: usize, end: usize) -> Result<FeatureStream, IngestError> {
        let [t, p, d] = self.dims();
        if start >= end || end > t {
            return Err(IngestError::Precondition(format!(
                "frame range {start}..{end} outside 0..{t}"
            )));
        }
        let data = self.frames.data()[start * p * d..end * p * d].to_vec();
        let mut out = FeatureStream::new(self.video_id.clone(), Tensor::new(vec![end - start, p, d], data)?)?;
        out.fps = self.fps;
        out.dtype = self.dtype;
        Ok(out)
    }

    /// Keeps `n` evenly spaced frames (all frames when `n ≥ T`).
    pub fn subsample_even(&self, n: usize) -> Result<FeatureStream, IngestError> {
        let [t, p, d] = self.dims();
        if n == 0 {
            return Err(IngestError::Precondition("cannot keep zero frames".into()));
        }
        if n >= t {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(n * p * d);
        for idx in even_indices(t, n) {
            data.extend_from_slice(self.frame(idx));
        }
        let mut out = FeatureStream::new(self.video_id.clone(), Tensor::new(vec![n, p, d], data)?)?;
        out.fps = self.fps * n as f64 / t as f64;
        out.dtype = self.dtype;
        Ok(out)
    }

    /// Mean over frames and tokens of `start..end`.
    pub fn mean_embedding(&self, start: usize, end: usize) -> Vec<f64> {
        let [_, p, d] = self.dims();
        let mut acc = vec![0.0; d];
        for t in start..end {
            for tok in self.frame(t).chunks(d) {
                for (a, v) in acc.iter_mut().zip(tok) {
                    *a += v;
                }
            }
        }
        let n = ((end - start) * p) as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }
}

/// Frame indices kept by [`FeatureStream::subsample_even`].
pub fn even_indices(t: usize, n: usize) -> Vec<usize> {
    if n >= t {
        return (0..t).collect();
    }
    (0..n).map(|i| if n == 1 { 0 } else { i * (t - 1) / (n - 1) }).collect()
}

/// Half-open frame range `[start_frame, end_frame)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentManifest {
    pub video_id: String,
    pub total_frames: usize,
    pub segments: Vec<Segment>,
}

impl SegmentManifest {
    /// Builds a manifest from the start frames of every segment after the first.
    pub fn from_cuts(video_id: impl Into<String>, total_frames: usize, starts: &[usize]) -> Self {
        let mut bounds = vec![0];
        bounds.extend(starts.iter().copied().filter(|&s| s > 0 && s < total_frames));
        bounds.push(total_frames);
        bounds.dedup();
        let segments = bounds
            .windows(2)
            .map(|w| Segment {
                start_frame: w[0],
                end_frame: w[1],
            })
            .collect();
        Self {
            video_id: video_id.into(),
            total_frames,
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Start frame of every segment after the first.
    pub fn cut_points(&self) -> Vec<usize> {
        self.segments.iter().skip(1).map(|s| s.start_frame).collect()
    }

    /// Checks contiguity, coverage and the minimum length.
    pub fn validate(&self, min_segment_frames: usize) -> Result<(), IngestError> {
        let mut cursor = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start_frame != cursor {
                return Err(IngestError::Manifest(format!(
                    "segment {i} starts at {} but previous ends at {cursor}",
                    s.start_frame
                )));
            }
            if s.len() < min_segment_frames.max(1) || s.end_frame < s.start_frame {
                return Err(IngestError::Manifest(format!(
                    "segment {i} has {} frames, minimum {min_segment_frames}",
                    s.end_frame.saturating_sub(s.start_frame)
                )));
            }
            cursor = s.end_frame;
        }
        if cursor != self.total_frames || self.segments.is_empty() {
            return Err(IngestError::Manifest(format!(
                "segments cover 0..{cursor}, expected 0..{}",
                self.total_frames
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let m: SegmentManifest = serde_json::from_str(text)?;
        m.validate(1)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IngestError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Sentence features `N_t × D_text`.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub tokens: Tensor,
    pub text: Option<String>,
}

impl QueryEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self, IngestError> {
        if tokens.shape().len() != 2 || tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(IngestError::Precondition(format!(
                "query needs N_t ≥ 1 tokens, got shape {:?}",
                tokens.shape()
            )));
        }
        Ok(Self { tokens, text: None })
    }

    /// Mean over tokens.
    pub fn pooled(&self) -> Vec<f64> {
        let cols = self.tokens.cols();
        let mut acc = vec![0.0; cols];
        for row in self.tokens.data().chunks(cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.tokens.rows() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, p: usize, d: usize) -> FeatureStream {
        let data = (0..t * p * d).map(|v| v as f64).collect();
        FeatureStream::new("r", Tensor::new(vec![t, p, d], data).unwrap()).unwrap()
    }

    #[test]
    fn slices_reconstruct_stream() {
        let s = ramp(9, 2, 3);
        let m = SegmentManifest::from_cuts("r", 9, &[2, 5]);
        m.validate(1).unwrap();
        let mut joined = Vec::new();
        for seg in &m.segments {
            joined.extend_from_slice(s.slice(seg.start_frame, seg.end_frame).unwrap().frames().data());
        }
        assert_eq!(joined, s.frames().data());
    }

    #[test]
    fn manifest_rejects_gaps() {
        let mut m = SegmentManifest::from_cuts("r", 10, &[4]);
        m.segments[1].start_frame = 5;
        assert!(m.validate(1).is_err());
        let m = SegmentManifest::from_cuts("r", 10, &[4]);
        assert!(m.validate(5).is_err());
        let json = m.to_json();
        assert_eq!(SegmentManifest::from_json(&json).unwrap(), m);
    }

    #[test]
    fn even_subsampling_keeps_endpoints() {
        let s = ramp(10, 1, 1);
        let sub = s.subsample_even(4).unwrap();
        let kept: Vec<f64> = (0..4).map(|i| sub.frame(i)[0]).collect();
        assert_eq!(kept, vec![0.0, 3.0, 6.0, 9.0]);
        assert_eq!(s.subsample_even(20).unwrap(), s);
    }

    #[test]
    fn empty_query_rejected() {
        assert!(QueryEmbedding::new(Tensor::zeros(&[0, 4])).is_err());
    }
}
