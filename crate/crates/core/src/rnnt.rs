//! Exact transducer lattice in log space.
//!
//! The logit grid is laid out with one row per lattice node: row
//! `t * (U + 1) + u` holds the unnormalised scores emitted from frame `t`
//! after `u` labels. From node `(t, u)` a blank advances to `(t + 1, u)` and
//! emitting label `u + 1` advances to `(t, u + 1)`; the path ends with a
//! blank out of `(T - 1, U)`.

use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, Matrix};

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub struct Lattice<'a> {
    logits: &'a Matrix,
    log_probs: Matrix,
    frames: usize,
    labels: &'a [usize],
    blank: usize,
}

impl<'a> Lattice<'a> {
    pub fn new(logits: &'a Matrix, frames: usize, labels: &'a [usize], blank: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidInput("transducer needs at least one frame".into()));
        }
        let vocab = logits.cols();
        let nodes = frames * (labels.len() + 1);
        if logits.rows() != nodes {
            return Err(Error::DimensionMismatch {
                expected: nodes,
                got: logits.rows(),
            });
        }
        if blank >= vocab {
            return Err(Error::OutOfVocabulary { id: blank, vocab });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab || l == blank) {
            return Err(Error::OutOfVocabulary { id: bad, vocab });
        }
        Ok(Self {
            logits,
            log_probs: log_softmax_rows(logits),
            frames,
            labels,
            blank,
        })
    }

    #[inline]
    fn row(&self, t: usize, u: usize) -> usize {
        t * (self.labels.len() + 1) + u
    }

    #[inline]
    fn blank_lp(&self, t: usize, u: usize) -> f64 {
        self.log_probs.get(self.row(t, u), self.blank)
    }

    #[inline]
    fn emit_lp(&self, t: usize, u: usize) -> f64 {
        self.log_probs.get(self.row(t, u), self.labels[u])
    }

    /// Forward variables: `alpha[t][u]` is the log mass of reaching node `(t, u)`.
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        let u_len = self.labels.len() + 1;
        let mut alpha = vec![vec![f64::NEG_INFINITY; u_len]; self.frames];
        for t in 0..self.frames {
            for u in 0..u_len {
                if t == 0 && u == 0 {
                    alpha[0][0] = 0.0;
                    continue;
                }
                let from_blank = if t > 0 {
                    alpha[t - 1][u] + self.blank_lp(t - 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let from_emit = if u > 0 {
                    alpha[t][u - 1] + self.emit_lp(t, u - 1)
                } else {
                    f64::NEG_INFINITY
                };
                alpha[t][u] = log_add_exp(from_blank, from_emit);
            }
        }
        alpha
    }

    /// Backward variables: `beta[t][u]` is the log mass of finishing from `(t, u)`.
    pub fn betas(&self) -> Vec<Vec<f64>> {
        let big_u = self.labels.len();
        let last = self.frames - 1;
        let mut beta = vec![vec![f64::NEG_INFINITY; big_u + 1]; self.frames];
        for t in (0..self.frames).rev() {
            for u in (0..=big_u).rev() {
                if t == last && u == big_u {
                    beta[t][u] = self.blank_lp(t, u);
                    continue;
                }
                let via_blank = if t < last {
                    self.blank_lp(t, u) + beta[t + 1][u]
                } else {
                    f64::NEG_INFINITY
                };
                let via_emit = if u < big_u {
                    self.emit_lp(t, u) + beta[t][u + 1]
                } else {
                    f64::NEG_INFINITY
                };
                beta[t][u] = log_add_exp(via_blank, via_emit);
            }
        }
        beta
    }

    /// `-log P(labels)` by the forward recursion.
    pub fn loss(&self) -> f64 {
        let alpha = self.alphas();
        let big_u = self.labels.len();
        -(alpha[self.frames - 1][big_u] + self.blank_lp(self.frames - 1, big_u))
    }

    /// Loss and its gradient with respect to the raw logits.
    pub fn loss_and_grad(&self) -> (f64, Matrix) {
        let alpha = self.alphas();
        let beta = self.betas();
        let big_u = self.labels.len();
        let last = self.frames - 1;
        let log_p = beta[0][0];
        let loss = -log_p;

        let mut grad = Matrix::zeros(self.logits.rows(), self.logits.cols());
        for t in 0..self.frames {
            for u in 0..=big_u {
                let row = self.row(t, u);
                // d loss / d log_prob for the two outgoing arcs of this node.
                let blank_after = if t < last {
                    Some(beta[t + 1][u])
                } else if u == big_u {
                    Some(0.0)
                } else {
                    None
                };
                let g_blank = blank_after
                    .map(|b| -(alpha[t][u] + self.blank_lp(t, u) + b - log_p).exp())
                    .unwrap_or(0.0);
                let g_emit = if u < big_u {
                    -(alpha[t][u] + self.emit_lp(t, u) + beta[t][u + 1] - log_p).exp()
                } else {
                    0.0
                };
                let total = g_blank + g_emit;
                let lp = self.log_probs.row(row);
                let out = grad.row_mut(row);
                for (o, &l) in out.iter_mut().zip(lp) {
                    *o = -l.exp() * total;
                }
                out[self.blank] += g_blank;
                if u < big_u {
                    out[self.labels[u]] += g_emit;
                }
            }
        }
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_loss_is_final_blank() {
        let logits = Matrix::from_vec(1, 3, vec![0.2, -1.0, 0.5]);
        let lat = Lattice::new(&logits, 1, &[], 0).unwrap();
        let lp = log_softmax_rows(&logits);
        assert!((lat.loss() + lp.get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn alpha_and_beta_agree_on_total_mass() {
        let logits = Matrix::from_fn(4 * 3, 5, |r, c| ((r * 5 + c) as f64 * 0.61).cos());
        let lat = Lattice::new(&logits, 4, &[1, 3], 0).unwrap();
        let (loss, _) = lat.loss_and_grad();
        assert!((loss - lat.loss()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            Lattice::new(&logits, 2, &[3], 0),
            Err(Error::DimensionMismatch { .. })
        ));
        let logits = Matrix::zeros(4, 3);
        assert!(matches!(
            Lattice::new(&logits, 2, &[7], 0),
            Err(Error::OutOfVocabulary { id: 7, .. })
        ));
        assert!(Lattice::new(&logits, 2, &[0], 0).is_err());
    }
}
