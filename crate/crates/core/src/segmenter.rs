//! Adaptive content-based segmentation of feature streams.
//!
//! The content score between adjacent frames is the mean absolute difference
//! of their flattened token grids. A cut is placed after frame `t` when the
//! score exceeds `adaptive_threshold` times the mean score of the `window`
//! neighbours on each side (excluding `t` itself) and also clears
//! `min_content`. Segments shorter than `min_segment_frames` are merged into
//! their left neighbour (the first segment merges rightward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FeatureStream, SegmentManifest};

#[derive(Debug, Error, PartialEq)]
pub enum SegmenterError {
    #[error("invalid detector config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub adaptive_threshold: f64,
    pub window: usize,
    pub min_content: f64,
    pub min_segment_frames: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            adaptive_threshold: 3.0,
            window: 2,
            min_content: 0.05,
            min_segment_frames: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), SegmenterError> {
        if !(self.adaptive_threshold > 1.0) {
            return Err(SegmenterError::Config(format!(
                "adaptive_threshold must exceed 1, got {}",
                self.adaptive_threshold
            )));
        }
        if self.window == 0 {
            return Err(SegmenterError::Config("window must be ≥ 1".into()));
        }
        if self.min_content < 0.0 {
            return Err(SegmenterError::Config("min_content must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference between consecutive frames; `None` when `T < 2`.
pub fn content_curve(stream: &FeatureStream) -> Option<Vec<f64>> {
    let t = stream.frame_count();
    if t < 2 {
        return None;
    }
    Some(
        (0..t - 1)
            .map(|i| {
                let (a, b) = (stream.frame(i), stream.frame(i + 1));
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
            })
            .collect(),
    )
}

/// Indices `t` of the curve where a cut is placed (between frames `t` and `t+1`).
///
/// No minimum-length handling; see [`adaptive_detect`].
pub fn adaptive_cut_indices(curve: &[f64], config: &DetectorConfig) -> Vec<usize> {
    let n = curve.len();
    (0..n)
        .filter(|&t| {
            let lo = t.saturating_sub(config.window);
            let hi = (t + config.window).min(n - 1);
            let neighbours: Vec<f64> = (lo..=hi).filter(|&i| i != t).map(|i| curve[i]).collect();
            if neighbours.is_empty() || curve[t] < config.min_content {
                return false;
            }
            let mean = neighbours.iter().sum::<f64>() / neighbours.len() as f64;
            // ratio > threshold, written to stay finite when mean == 0
            curve[t] > config.adaptive_threshold * mean
        })
        .collect()
}

/// Start frames of every segment after the first, for a stream of
/// `curve.len() + 1` frames, with short segments merged away.
pub fn adaptive_detect(curve: &[f64], config: &DetectorConfig) -> Vec<usize> {
    let total = curve.len() + 1;
    let starts: Vec<usize> = adaptive_cut_indices(curve, config).into_iter().map(|t| t + 1).collect();
    merge_short(&starts, total, config.min_segment_frames)
}

fn merge_short(starts: &[usize], total: usize, min_len: usize) -> Vec<usize> {
    let mut bounds = vec![0];
    bounds.extend_from_slice(starts);
    bounds.push(total);
    loop {
        let short = bounds.windows(2).position(|w| w[1] - w[0] < min_len.max(1));
        match short {
            // only one segment left: nothing to merge with
            Some(_) if bounds.len() <= 2 => break,
            // first segment merges into the next one
            Some(0) => {
                bounds.remove(1);
            }
            // later segments merge into their left neighbour
            Some(i) => {
                bounds.remove(i);
            }
            None => break,
        }
    }
    bounds[1..bounds.len() - 1].to_vec()
}

/// Splits a stream into segments.
pub fn segment_stream(stream: &FeatureStream, config: &DetectorConfig) -> Result<SegmentManifest, SegmenterError> {
    config.validate()?;
    let total = stream.frame_count();
    let starts = content_curve(stream)
        .map(|c| adaptive_detect(&c, config))
        .unwrap_or_default();
    Ok(SegmentManifest::from_cuts(stream.video_id.clone(), total, &starts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn cfg(window: usize, min_content: f64, min_len: usize) -> DetectorConfig {
        DetectorConfig {
            adaptive_threshold: 3.0,
            window,
            min_content,
            min_segment_frames: min_len,
        }
    }

    #[test]
    fn identical_frames_have_zero_score() {
        let s = FeatureStream::new("a", Tensor::filled(&[3, 2, 2], 0.3)).unwrap();
        assert_eq!(content_curve(&s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zeros_to_ones_scores_one() {
        let mut data = vec![0.0; 6];
        data.extend(vec![1.0; 6]);
        let s = FeatureStream::new("a", Tensor::new(vec![2, 2, 3], data).unwrap()).unwrap();
        assert_eq!(content_curve(&s).unwrap(), vec![1.0]);
    }

    #[test]
    fn constant_curve_never_cuts() {
        assert!(adaptive_detect(&[0.5; 20], &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn spike_is_cut() {
        let curve = [1.0, 1.0, 1.0, 10.0, 1.0, 1.0];
        assert_eq!(adaptive_cut_indices(&curve, &cfg(2, 0.05, 1)), vec![3]);
        assert_eq!(adaptive_detect(&curve, &cfg(2, 0.05, 1)), vec![4]);
    }

    #[test]
    fn spike_below_floor_is_ignored() {
        let curve = [1e-4, 1e-4, 1e-4, 1e-3, 1e-4, 1e-4];
        assert!(adaptive_detect(&curve, &cfg(2, 0.05, 1)).is_empty());
        assert_eq!(adaptive_detect(&curve, &cfg(2, 0.0, 1)), vec![4]);
    }

    #[test]
    fn ratio_equal_to_threshold_does_not_cut() {
        let curve = [1.0, 1.0, 3.0, 1.0, 1.0];
        assert!(adaptive_detect(&curve, &cfg(2, 0.0, 1)).is_empty());
    }

    #[test]
    fn sliver_merges_left() {
        // segments [0,4) [4,5) [5,10) before merging
        assert_eq!(merge_short(&[4, 5], 10, 3), vec![5]);
        // a short first segment merges right
        assert_eq!(merge_short(&[1, 6], 10, 3), vec![6]);
        assert_eq!(merge_short(&[1], 2, 3), Vec::<usize>::new());
    }

    #[test]
    fn single_frame_stream_is_one_segment() {
        let s = FeatureStream::new("a", Tensor::zeros(&[1, 2, 2])).unwrap();
        let m = segment_stream(&s, &DetectorConfig::default()).unwrap();
        assert_eq!(m.segments.len(), 1);
        assert_eq!((m.segments[0].start_frame, m.segments[0].end_frame), (0, 1));
    }

    #[test]
    fn config_validation() {
        let bad = DetectorConfig {
            adaptive_threshold: 1.0,
            ..DetectorConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DetectorConfig {
            window: 0,
            ..DetectorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
