//! Reduced description vectors for the semantic margin factor.
//!
//! Descriptions become rows of a term-count matrix `A [m × w]`. A truncated
//! SVD `A ≈ X Λ Yᵀ` keeps the `d5` largest singular values, and the reduced
//! description vectors are the rows of `B = A Y`.
//!
//! The right singular vectors are the eigenvectors of `AᵀA`, obtained with a
//! cyclic Jacobi sweep. Each is signed so that its first non-negligible
//! component is positive, which keeps the result reproducible.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::features::Corpus;
use crate::tensor::{cosine_similarity, Tensor};

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term-count matrix over `texts`; columns follow the sorted vocabulary.
pub fn term_matrix<S: AsRef<str>>(texts: &[S]) -> (BTreeMap<String, usize>, Tensor) {
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
    let mut vocabulary: BTreeMap<String, usize> = tokenized.iter().flatten().map(|t| (t.clone(), 0)).collect();
    for (i, v) in vocabulary.values_mut().enumerate() {
        *v = i;
    }
    let w = vocabulary.len().max(1);
    let mut data = vec![0.0; texts.len().max(1) * w];
    for (row, tokens) in tokenized.iter().enumerate() {
        for t in tokens {
            data[row * w + vocabulary[t]] += 1.0;
        }
    }
    let a = Tensor::matrix(texts.len().max(1), w, data).expect("consistent term matrix");
    (vocabulary, a)
}

/// Eigen-decomposition of a symmetric `n × n` matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of an `n × n` row-major matrix.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 {
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let (app, aqq) = (a[p * n + p], a[q * n + q]);
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    (values, vectors)
}

/// Truncated SVD of `A [m × w]` keeping `rank` components.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSvd {
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `[w × rank]`.
    pub right: Tensor,
    /// Left singular vectors, `[m × rank]`; zero columns for zero singular values.
    pub left: Tensor,
}

impl TruncatedSvd {
    pub fn compute(a: &Tensor, rank: usize) -> Result<Self> {
        let (m, w) = (a.rows(), a.cols());
        if rank == 0 || rank > m.min(w) {
            return Err(Error::Param(format!(
                "d5 = {rank} must lie in 1..={} (min of {m} descriptions and {w} terms)",
                m.min(w)
            )));
        }
        let mut gram = vec![0.0; w * w];
        for r in 0..m {
            let row = a.row(r);
            for i in 0..w {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..w {
                    gram[i * w + j] += row[i] * row[j];
                }
            }
        }
        let (values, vectors) = symmetric_eigen(&gram, w);
        let tiny = 1e-12 * values.first().copied().unwrap_or(0.0).abs().max(1.0);
        let mut right = vec![0.0; w * rank];
        let mut singular_values = Vec::with_capacity(rank);
        for c in 0..rank {
            let mut col: Vec<f64> = (0..w).map(|r| vectors[r * w + c]).collect();
            if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    col.iter_mut().for_each(|x| *x = -*x);
                }
            }
            for r in 0..w {
                right[r * rank + c] = col[r];
            }
            singular_values.push(if values[c] > tiny { values[c].sqrt() } else { 0.0 });
        }
        let right = Tensor::matrix(w, rank, right)?;
        let projected = matmul(a, &right);
        let mut left = vec![0.0; m * rank];
        for r in 0..m {
            for c in 0..rank {
                if singular_values[c] > 0.0 {
                    left[r * rank + c] = projected[r * rank + c] / singular_values[c];
                }
            }
        }
        Ok(TruncatedSvd {
            singular_values,
            right,
            left: Tensor::matrix(m, rank, left)?,
        })
    }

    /// `X Λ Yᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, rank) = (self.left.rows(), self.left.cols());
        let w = self.right.rows();
        let mut out = vec![0.0; m * w];
        for r in 0..m {
            for c in 0..rank {
                let xs = self.left.get(r, c) * self.singular_values[c];
                if xs == 0.0 {
                    continue;
                }
                for t in 0..w {
                    out[r * w + t] += xs * self.right.get(t, c);
                }
            }
        }
        Tensor::matrix(m, w, out).expect("consistent reconstruction")
    }

    /// `‖A − X Λ Yᵀ‖_F`.
    pub fn reconstruction_error(&self, a: &Tensor) -> f64 {
        let r = self.reconstruct();
        a.data().iter().zip(r.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.get(i, p);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.get(p, j);
            }
        }
    }
    out
}

/// Reduced description vectors keyed by description id.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticIndex {
    pub vocabulary: BTreeMap<String, usize>,
    pub svd: TruncatedSvd,
    /// `B = A Y`, `[m × d5]`.
    pub reduced: Tensor,
    positions: HashMap<u64, usize>,
}

impl SemanticIndex {
    pub fn build(corpus: &Corpus, d5: usize) -> Result<Self> {
        let ids: Vec<u64> = corpus.descriptions().iter().map(|d| d.id).collect();
        let texts: Vec<&str> = corpus.descriptions().iter().map(|d| d.text.as_str()).collect();
        SemanticIndex::from_texts(&ids, &texts, d5)
    }

    pub fn from_texts<S: AsRef<str>>(ids: &[u64], texts: &[S], d5: usize) -> Result<Self> {
        if texts.is_empty() || ids.len() != texts.len() {
            return Err(Error::Input("semantic index needs one id per non-empty text list".into()));
        }
        let (vocabulary, a) = term_matrix(texts);
        if vocabulary.is_empty() {
            return Err(Error::Input("descriptions contain no terms".into()));
        }
        let svd = TruncatedSvd::compute(&a, d5)?;
        let reduced = Tensor::matrix(a.rows(), d5, matmul(&a, &svd.right))?;
        let positions = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Ok(SemanticIndex {
            vocabulary,
            svd,
            reduced,
            positions,
        })
    }

    pub fn dim(&self) -> usize {
        self.reduced.cols()
    }

    pub fn reduced(&self, id: u64) -> Option<&[f64]> {
        self.positions.get(&id).map(|&i| self.reduced.row(i))
    }

    /// Cosine of the reduced vectors of two descriptions (0 for zero vectors).
    pub fn cosine(&self, p: u64, q: u64) -> Result<f64> {
        let a = self.reduced(p).ok_or_else(|| Error::Input(format!("description {p} is not indexed")))?;
        let b = self.reduced(q).ok_or_else(|| Error::Input(format!("description {q} is not indexed")))?;
        cosine_similarity(a, b)
    }
}

/// `lambda · cos(D'_p, D'_q)`.
pub fn semantic_factor(p: u64, q: u64, index: &SemanticIndex, lambda: f64) -> Result<f64> {
    Ok(lambda * index.cosine(p, q)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("The RED-cube, left_of  it!"), vec!["the", "red", "cube", "left", "of", "it"]);
        assert!(tokenize(" ,. ").is_empty());
    }

    #[test]
    fn diagonal_matrix_svd() {
        let a = Tensor::from_rows(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let svd = TruncatedSvd::compute(&a, 2).unwrap();
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-12);
        assert!((svd.singular_values[1] - 2.0).abs() < 1e-12);
        assert!((svd.reconstruction_error(&a) - 1.0).abs() < 1e-12);
        let full = TruncatedSvd::compute(&a, 3).unwrap();
        assert!(full.reconstruction_error(&a) <= 1e-9);
        assert!(TruncatedSvd::compute(&a, 4).is_err());
        assert!(TruncatedSvd::compute(&a, 0).is_err());
    }

    #[test]
    fn identical_descriptions_share_reduced_rows() {
        let idx = SemanticIndex::from_texts(&[1, 2, 3], &["red cube", "red cube", "blue sphere"], 2).unwrap();
        assert_eq!(idx.reduced(1), idx.reduced(2));
        assert!((semantic_factor(1, 2, &idx, 0.025).unwrap() - 0.025).abs() < 1e-15);
        assert!(idx.cosine(1, 9).is_err());
    }

    #[test]
    fn disjoint_one_term_descriptions_are_orthogonal() {
        let idx = SemanticIndex::from_texts(&[0, 1, 2], &["cube", "cube cube", "sphere sphere sphere"], 2).unwrap();
        // A = [[1,0],[2,0],[0,3]] over vocabulary {cube, sphere}
        assert_eq!(semantic_factor(0, 2, &idx, 0.025).unwrap(), 0.0);
        assert_eq!(semantic_factor(2, 1, &idx, 0.025).unwrap(), semantic_factor(1, 2, &idx, 0.025).unwrap());
    }

    #[test]
    fn eigenvectors_are_signed() {
        let m = [2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&m, 2);
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        // columns are orthonormal
        let dot = vecs[0] * vecs[1] + vecs[2] * vecs[3];
        assert!(dot.abs() < 1e-14);
    }
}
