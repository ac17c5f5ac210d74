use std::path::Path;

use super::format::load_matrix_file;
use super::{FeatureStream, IngestError, Segment};
use crate::numerics::{derive_seed, seeded_rng, Tensor};

/// Source of segment and text embeddings used for correspondence scoring.
pub trait EmbeddingProvider: Send + Sync {
    /// Embedding width `d_e`.
    fn dim(&self) -> usize;

    /// Embedding of segment `index` spanning `segment` in `stream`.
    fn embed_segment(&self, stream: &FeatureStream, index: usize, segment: Segment) -> Result<Vec<f64>, IngestError>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, IngestError>;
}

/// Mean-pools segment features; hashes text into a seeded Gaussian vector.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_segment(&self, stream: &FeatureStream, _index: usize, segment: Segment) -> Result<Vec<f64>, IngestError> {
        let [t, _, d] = stream.dims();
        if d != self.dim || segment.is_empty() || segment.end_frame > t {
            return Err(IngestError::Precondition(format!(
                "segment {segment:?} of a {t}-frame, {d}-dim stream for a {}-dim provider",
                self.dim
            )));
        }
        Ok(stream.mean_embedding(segment.start_frame, segment.end_frame))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, IngestError> {
        let key = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        let mut rng = seeded_rng(derive_seed(self.seed, &[key]));
        Ok(rng.normals(self.dim))
    }
}

/// Precomputed embeddings read from SLVF files with `P = 1`: one row per
/// segment and one row per description. Text keys are row indices.
#[derive(Clone, Debug)]
pub struct FileBackedProvider {
    segments: Tensor,
    texts: Tensor,
}

impl FileBackedProvider {
    pub fn new(segments: Tensor, texts: Tensor) -> Result<Self, IngestError> {
        if segments.cols() != texts.cols() {
            return Err(IngestError::Precondition(format!(
                "segment dim {} differs from text dim {}",
                segments.cols(),
                texts.cols()
            )));
        }
        Ok(Self { segments, texts })
    }

    pub fn open(segments: impl AsRef<Path>, texts: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::new(load_matrix_file(segments)?, load_matrix_file(texts)?)
    }
}

impl EmbeddingProvider for FileBackedProvider {
    fn dim(&self) -> usize {
        self.segments.cols()
    }

    fn embed_segment(&self, _stream: &FeatureStream, index: usize, _segment: Segment) -> Result<Vec<f64>, IngestError> {
        if index >= self.segments.rows() {
            return Err(IngestError::Precondition(format!(
                "no precomputed embedding for segment {index}"
            )));
        }
        Ok(self.segments.row(index).to_vec())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, IngestError> {
        let idx: usize = text
            .trim()
            .trim_start_matches("desc:")
            .parse()
            .map_err(|_| IngestError::Precondition(format!("text key {text:?} is not a row index")))?;
        if idx >= self.texts.rows() {
            return Err(IngestError::Precondition(format!("no precomputed text row {idx}")));
        }
        Ok(self.texts.row(idx).to_vec())
    }
}

/// Selects a provider by config key: `"synthetic"` or `"file-backed"`.
pub fn provider_from_config(
    key: &str,
    dim: usize,
    seed: u64,
    files: Option<(&Path, &Path)>,
) -> Result<Box<dyn EmbeddingProvider>, IngestError> {
    match key {
        "synthetic" => Ok(Box::new(SyntheticProvider { dim, seed })),
        "file-backed" => {
            let (segs, texts) =
                files.ok_or_else(|| IngestError::Precondition("file-backed provider needs embedding files".into()))?;
            Ok(Box::new(FileBackedProvider::open(segs, texts)?))
        }
        other => Err(IngestError::Precondition(format!("unknown provider {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::format::{write_matrix_file, Dtype};

    #[test]
    fn synthetic_text_embedding_is_deterministic() {
        let p = SyntheticProvider { dim: 8, seed: 1 };
        assert_eq!(p.embed_text("a dog").unwrap(), p.embed_text("a dog").unwrap());
        assert_ne!(p.embed_text("a dog").unwrap(), p.embed_text("a cat").unwrap());
    }

    #[test]
    fn file_backed_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let segs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let texts = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let (a, b) = (dir.path().join("s.slvf"), dir.path().join("t.slvf"));
        write_matrix_file(&a, &segs, Dtype::F64).unwrap();
        write_matrix_file(&b, &texts, Dtype::F32).unwrap();
        let p = provider_from_config("file-backed", 2, 0, Some((&a, &b))).unwrap();
        let stream = FeatureStream::new("x", Tensor::zeros(&[2, 1, 2])).unwrap();
        let seg = Segment {
            start_frame: 1,
            end_frame: 2,
        };
        assert_eq!(p.embed_segment(&stream, 1, seg).unwrap(), vec![0.0, 1.0]);
        assert_eq!(p.embed_text("desc:0").unwrap(), vec![0.5, 0.5]);
        assert!(p.embed_text("7").is_err());
        assert!(provider_from_config("clip", 2, 0, None).is_err());
    }
}
