//! Correspondence scores and the binary retrieval supervision built from them.

use std::path::Path;

use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub const DEFAULT_TAU_V2T: f64 = 0.18;
pub const DEFAULT_TAU_T2T: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("row {row} of the {side} operand has zero norm")]
    ZeroRow { side: &'static str, row: usize },
    #[error("description index {index} outside 0..{n}")]
    Index { index: usize, n: usize },
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("invalid matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor, SupervisionError> {
    if a.cols() != b.cols() {
        return Err(SupervisionError::Matrix(format!(
            "embedding widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let norms = |t: &Tensor, side: &'static str| -> Result<Vec<f64>, SupervisionError> {
        (0..t.rows())
            .map(|r| {
                let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    Err(SupervisionError::ZeroRow { side, row: r })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let (na, nb) = (norms(a, "left")?, norms(b, "right")?);
    let mut out = crate::numerics::matmul_nt(a, b)?;
    let n = b.rows();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v / (na[i / n] * nb[i % n])).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// V2T (segment i vs description j) and T2T (description i vs j) cosines.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceScores {
    pub s_v2t: Tensor,
    pub s_t2t: Tensor,
}

impl CorrespondenceScores {
    /// Scores from segment embeddings and description embeddings (one row each).
    pub fn from_embeddings(segments: &Tensor, descriptions: &Tensor) -> Result<Self, SupervisionError> {
        if segments.rows() != descriptions.rows() {
            return Err(SupervisionError::Matrix(format!(
                "{} segments but {} descriptions",
                segments.rows(),
                descriptions.rows()
            )));
        }
        Ok(Self {
            s_v2t: cosine_matrix(segments, descriptions)?,
            s_t2t: cosine_matrix(descriptions, descriptions)?,
        })
    }

    pub fn len(&self) -> usize {
        self.s_v2t.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Binary `N_v × N_v` ground truth; `y[i][j] = 1` when segment `i` is a
/// positive for description `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionMatrix {
    pub y: Vec<Vec<u8>>,
    pub tau_v2t: f64,
    pub tau_t2t: f64,
}

impl SupervisionMatrix {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            y: (0..n).map(|i| (0..n).map(|j| u8::from(i == j)).collect()).collect(),
            tau_v2t: DEFAULT_TAU_V2T,
            tau_t2t: DEFAULT_TAU_T2T,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.y {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Thresholds both score matrices, takes their union and forces the
/// diagonal positive.
pub fn build_supervision(
    scores: &CorrespondenceScores,
    tau_v2t: f64,
    tau_t2t: f64,
) -> Result<SupervisionMatrix, SupervisionError> {
    for tau in [tau_v2t, tau_t2t] {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(SupervisionError::Threshold(tau));
        }
    }
    let n = scores.len();
    let shape_ok = |t: &Tensor| t.shape() == [n, n];
    if !shape_ok(&scores.s_v2t) || !shape_ok(&scores.s_t2t) {
        return Err(SupervisionError::Matrix("score matrices must both be N × N".into()));
    }
    let y = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v2t = scores.s_v2t.get(i, j) > tau_v2t;
                    let t2t = scores.s_t2t.get(i, j) > tau_t2t;
                    u8::from(i == j || v2t || t2t)
                })
                .collect()
        })
        .collect();
    Ok(SupervisionMatrix { y, tau_v2t, tau_t2t })
}

/// Column `j` of `y`: the positives for description `j`.
pub fn query_targets(y: &SupervisionMatrix, j: usize) -> Result<Vec<u8>, SupervisionError> {
    if j >= y.len() {
        return Err(SupervisionError::Index { index: j, n: y.len() });
    }
    Ok(y.y.iter().map(|row| row[j]).collect())
}

/// Parses a headerless CSV of reals into a matrix.
pub fn parse_csv_matrix(text: &str) -> Result<Tensor, SupervisionError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|_| SupervisionError::Matrix(format!("row {r}: cannot parse {cell:?}")))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Tensor::from_rows(&rows).map_err(|e| SupervisionError::Matrix(e.to_string()))
}

pub fn load_csv_matrix(path: impl AsRef<Path>) -> Result<Tensor, SupervisionError> {
    parse_csv_matrix(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_spot_values() {
        let c = cosine_matrix(&m(&[vec![0.6, 0.8]]), &m(&[vec![0.6, 0.8], vec![-0.8, 0.6]])).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(c.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_named() {
        let err = cosine_matrix(&m(&[vec![1.0, 0.0], vec![0.0, 0.0]]), &m(&[vec![1.0, 1.0]])).unwrap_err();
        assert!(matches!(err, SupervisionError::ZeroRow { side: "left", row: 1 }));
    }

    fn scores(v2t: f64, t2t: f64) -> CorrespondenceScores {
        CorrespondenceScores {
            s_v2t: m(&[vec![1.0, v2t], vec![0.0, 1.0]]),
            s_t2t: m(&[vec![1.0, t2t], vec![t2t, 1.0]]),
        }
    }

    #[test]
    fn v2t_branch_fires_above_threshold() {
        let y = build_supervision(&scores(0.25, 0.1), 0.18, 0.8).unwrap();
        assert_eq!(y.y[0][1], 1);
    }

    #[test]
    fn t2t_branch_fires_above_threshold() {
        let y = build_supervision(&scores(0.10, 0.85), 0.18, 0.8).unwrap();
        assert_eq!(y.y[0][1], 1);
        assert_eq!(y.y[1][0], 1);
    }

    #[test]
    fn low_scores_give_identity() {
        let y = build_supervision(&scores(0.10, 0.5), 0.18, 0.8).unwrap();
        assert_eq!(y, SupervisionMatrix::identity(2));
    }

    #[test]
    fn exact_threshold_is_not_positive() {
        let y = build_supervision(&scores(0.18, 0.8), 0.18, 0.8).unwrap();
        assert_eq!(y.y[0][1], 0);
    }

    #[test]
    fn query_targets_reads_columns() {
        let mut y = SupervisionMatrix::identity(3);
        assert_eq!(query_targets(&y, 2).unwrap(), vec![0, 0, 1]);
        y.y[0][2] = 1;
        assert_eq!(query_targets(&y, 2).unwrap(), vec![1, 0, 1]);
        assert!(matches!(query_targets(&y, 3), Err(SupervisionError::Index { .. })));
    }

    #[test]
    fn thresholds_must_be_open_unit() {
        assert!(build_supervision(&scores(0.1, 0.1), 0.0, 0.8).is_err());
        assert!(build_supervision(&scores(0.1, 0.1), 0.18, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = parse_csv_matrix("0.5, 1\n-2,3.25\n").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.get(1, 1), 3.25);
        assert!(parse_csv_matrix("1,2\n3\n").is_err());
    }
}
