use serde::{Deserialize, Serialize};

use super::{FeatureStream, IngestError, QueryEmbedding, SegmentManifest};
use crate::numerics::{seeded_rng, RngHandle, Tensor};

/// Attempts per prototype before the repulsion loop gives up.
const MAX_REDRAWS: usize = 64;
const MAX_REPULSION_STEPS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_segments: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    pub tokens_per_frame: usize,
    /// Upper bound on pairwise prototype cosine similarity.
    pub max_cross_sim: f64,
    /// Per-entry noise std relative to the unit-RMS prototype entries.
    pub frame_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_segments: 13,
            min_frames: 4,
            max_frames: 8,
            dim: 64,
            tokens_per_frame: 4,
            max_cross_sim: 0.2,
            frame_noise: 0.1,
        }
    }
}

/// A generated video with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub stream: FeatureStream,
    pub manifest: SegmentManifest,
    /// One row per segment, norm `√d`.
    pub prototypes: Tensor,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Draws `n` Gaussian directions and pushes each new one away from the
/// earlier ones until every pairwise cosine is at most `bound`.
fn repelled_prototypes(n: usize, d: usize, bound: f64, rng: &mut RngHandle) -> Result<Vec<Vec<f64>>, IngestError> {
    if n > 1 && bound < -1.0 / (n as f64 - 1.0) {
        return Err(IngestError::Generation(format!(
            "{n} prototypes cannot have pairwise cosine ≤ {bound}"
        )));
    }
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(n);
    'proto: for i in 0..n {
        for _ in 0..MAX_REDRAWS {
            let mut g = rng.normals(d);
            for _ in 0..MAX_REPULSION_STEPS {
                let gn = norm(&g);
                if gn == 0.0 {
                    break;
                }
                let worst = units
                    .iter()
                    .map(|u| (dot(&g, u) / gn, u))
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                match worst {
                    Some((cos, u)) if cos > bound => {
                        // remove the excess along u, landing at half the bound
                        let excess = dot(&g, u) - 0.5 * bound.max(0.0) * gn;
                        for (gv, uv) in g.iter_mut().zip(u) {
                            *gv -= excess * uv;
                        }
                    }
                    _ => {
                        let gn = norm(&g);
                        units.push(g.iter().map(|v| v / gn).collect());
                        continue 'proto;
                    }
                }
            }
        }
        return Err(IngestError::Generation(format!(
            "could not place prototype {i} of {n} in {d} dims with cosine ≤ {bound}"
        )));
    }
    Ok(units)
}

/// Generates a video whose segments are noisy copies of separated prototypes.
///
/// Pure function of `(spec, seed)`.
pub fn synth_video(spec: &SynthSpec, seed: u64) -> Result<SynthVideo, IngestError> {
    if spec.n_segments == 0 || spec.dim == 0 || spec.tokens_per_frame == 0 {
        return Err(IngestError::Generation("segments, dim and tokens must be ≥ 1".into()));
    }
    if spec.min_frames == 0 || spec.min_frames > spec.max_frames {
        return Err(IngestError::Generation(format!(
            "invalid frame range {}..={}",
            spec.min_frames, spec.max_frames
        )));
    }
    let root = seeded_rng(seed);
    let mut proto_rng = root.derive(&[0]);
    let mut len_rng = root.derive(&[1]);
    let mut noise_rng = root.derive(&[2]);

    let units = repelled_prototypes(spec.n_segments, spec.dim, spec.max_cross_sim, &mut proto_rng)?;
    let scale = (spec.dim as f64).sqrt();
    let protos: Vec<Vec<f64>> = units.iter().map(|u| u.iter().map(|v| v * scale).collect()).collect();

    let lengths: Vec<usize> = (0..spec.n_segments)
        .map(|_| len_rng.range_inclusive(spec.min_frames, spec.max_frames))
        .collect();
    let total: usize = lengths.iter().sum();
    let (p, d) = (spec.tokens_per_frame, spec.dim);
    let mut data = Vec::with_capacity(total * p * d);
    let mut starts = Vec::with_capacity(spec.n_segments);
    let mut cursor = 0;
    for (proto, &len) in protos.iter().zip(&lengths) {
        starts.push(cursor);
        for _ in 0..len * p {
            data.extend(proto.iter().map(|v| v + spec.frame_noise * noise_rng.normal()));
        }
        cursor += len;
    }
    let video_id = format!("synth-{seed}");
    let stream = FeatureStream::new(video_id.clone(), Tensor::new(vec![total, p, d], data)?)?;
    let manifest = SegmentManifest::from_cuts(video_id, total, &starts[1..]);
    let prototypes = Tensor::matrix(spec.n_segments, d, protos.concat())?;
    Ok(SynthVideo {
        stream,
        manifest,
        prototypes,
    })
}

/// Query tokens scattered around the prototype of `segment_index`.
///
/// Each token is `prototype + noise·rms(prototype)·z` with `z ~ N(0, I)`, so
/// `noise` is relative to the typical entry as for frame noise. With
/// `noise = 0` the query is the prototype itself as a single token.
pub fn synth_query_for(
    segment_index: usize,
    manifest: &SegmentManifest,
    prototypes: &Tensor,
    noise: f64,
    tokens: usize,
    rng: &mut RngHandle,
) -> Result<QueryEmbedding, IngestError> {
    if segment_index >= manifest.len() || segment_index >= prototypes.rows() {
        return Err(IngestError::Precondition(format!(
            "segment index {segment_index} outside 0..{}",
            manifest.len()
        )));
    }
    let proto = prototypes.row(segment_index);
    let n = if noise == 0.0 { 1 } else { tokens.max(1) };
    let sigma = noise * norm(proto) / (proto.len() as f64).sqrt();
    let mut data = Vec::with_capacity(n * proto.len());
    for _ in 0..n {
        data.extend(proto.iter().map(|v| v + sigma * rng.normal()));
    }
    let mut q = QueryEmbedding::new(Tensor::matrix(n, proto.len(), data)?)?;
    q.text = Some(format!("{}#segment-{segment_index}", manifest.video_id));
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    #[test]
    fn single_segment_covers_everything() {
        let spec = SynthSpec {
            n_segments: 1,
            ..SynthSpec::default()
        };
        let v = synth_video(&spec, 3).unwrap();
        assert_eq!(v.manifest.len(), 1);
        assert_eq!(v.manifest.segments[0].end_frame, v.stream.frame_count());
    }

    #[test]
    fn frame_bookkeeping() {
        let v = synth_video(&SynthSpec::default(), 11).unwrap();
        v.manifest.validate(4).unwrap();
        let sum: usize = v.manifest.segments.iter().map(|s| s.len()).sum();
        assert_eq!(sum, v.stream.frame_count());
        assert!(v.manifest.segments.iter().all(|s| (4..=8).contains(&s.len())));
    }

    #[test]
    fn prototypes_respect_bound() {
        for seed in 0..5 {
            let v = synth_video(&SynthSpec::default(), seed).unwrap();
            let p = &v.prototypes;
            for i in 0..p.rows() {
                for j in 0..i {
                    assert!(cos(p.row(i), p.row(j)) <= 0.2 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn infeasible_bound_is_rejected() {
        let spec = SynthSpec {
            n_segments: 5,
            max_cross_sim: -0.5,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_video(&spec, 0), Err(IngestError::Generation(_))));
    }

    #[test]
    fn generation_is_pure() {
        let a = synth_video(&SynthSpec::default(), 5).unwrap();
        let b = synth_video(&SynthSpec::default(), 5).unwrap();
        assert_eq!(a.stream, b.stream);
        assert_eq!(a.prototypes, b.prototypes);
    }

    #[test]
    fn noiseless_query_is_prototype() {
        let v = synth_video(&SynthSpec::default(), 1).unwrap();
        let q = synth_query_for(2, &v.manifest, &v.prototypes, 0.0, 4, &mut seeded_rng(0)).unwrap();
        assert_eq!(q.tokens.rows(), 1);
        assert_eq!(q.tokens.row(0), v.prototypes.row(2));
    }

    #[test]
    fn noisy_query_points_at_target() {
        let v = synth_video(&SynthSpec::default(), 2).unwrap();
        let mut hits = 0;
        for trial in 0..100u64 {
            let target = (trial % 13) as usize;
            let mut rng = seeded_rng(1000 + trial);
            let q = synth_query_for(target, &v.manifest, &v.prototypes, 0.1, 1, &mut rng).unwrap();
            let pooled = q.pooled();
            let best = (0..13)
                .max_by(|&a, &b| cos(&pooled, v.prototypes.row(a)).total_cmp(&cos(&pooled, v.prototypes.row(b))))
                .unwrap();
            hits += usize::from(best == target);
        }
        assert!(hits >= 99, "{hits}/100");
    }

    #[test]
    fn invalid_index_is_precondition_error() {
        let v = synth_video(&SynthSpec::default(), 1).unwrap();
        let r = synth_query_for(13, &v.manifest, &v.prototypes, 0.1, 1, &mut seeded_rng(0));
        assert!(matches!(r, Err(IngestError::Precondition(_))));
    }
}
