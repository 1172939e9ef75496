//! Edit-distance error rates, cosine similarity and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    pub rate: f64,
}

impl ErrorRateResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Pooled rate over several results (total errors / total reference length).
    pub fn pooled(results: &[ErrorRateResult]) -> Result<f64> {
        let refs: usize = results.iter().map(|r| r.reference_length).sum();
        if refs == 0 {
            return Err(Error::Input("error rate over an empty reference set".into()));
        }
        Ok(results.iter().map(|r| r.errors()).sum::<usize>() as f64 / refs as f64)
    }
}

/// Minimal-edit alignment of `hypothesis` against `reference`. Among
/// alignments of equal cost the backtrace prefers matches and
/// substitutions, then deletions, then insertions.
pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<ErrorRateResult> {
    if reference.is_empty() {
        return Err(Error::Input("error rate is undefined for an empty reference".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut del, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                s += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(ErrorRateResult {
        substitutions: s,
        deletions: del,
        insertions: ins,
        reference_length: n,
        rate: (s + del + ins) as f64 / n as f64,
    })
}

/// Phone-like units for text tokens: every token expands to two units drawn
/// from a small shared inventory, so distinct tokens share units the way
/// words share phonemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lexicon {
    base: usize,
}

impl Lexicon {
    pub fn new(v_text: usize) -> Self {
        let mut base = 1;
        while base * base < v_text {
            base += 1;
        }
        Self { base }
    }

    pub fn inventory(&self) -> usize {
        2 * self.base
    }

    pub fn phones(&self, token: usize) -> [usize; 2] {
        [token / self.base, self.base + token % self.base]
    }

    pub fn expand(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().flat_map(|&t| self.phones(t)).collect()
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Numeric("cosine similarity of a zero-norm or non-finite vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation. Undefined (error) for fewer than two points
/// or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("spearman needs two equal-length series of at least two points".into()));
    }
    let r = pearson(&ranks(x), &ranks(y));
    if !r.is_finite() {
        return Err(Error::Numeric("spearman correlation of a constant series".into()));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rate_examples() {
        let r = error_rate(&["a", "b", "c"], &["a", "x", "c"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        assert!((r.rate - 1.0 / 3.0).abs() < 1e-15);
        let r = error_rate(&["a", "b"], &[]).unwrap();
        assert_eq!((r.deletions, r.rate), (2, 1.0));
        assert_eq!(error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap().rate, 0.0);
        let r = error_rate(&[1], &[2, 3, 4]).unwrap();
        assert_eq!(r.rate, 3.0);
        assert!(matches!(error_rate::<u8>(&[], &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn lexicon_shares_units() {
        let lex = Lexicon::new(16);
        assert_eq!(lex.inventory(), 8);
        assert_eq!(lex.phones(0), [0, 4]);
        assert_eq!(lex.phones(5), [1, 5]);
        assert_eq!(lex.phones(15), [3, 7]);
        let all: std::collections::BTreeSet<[usize; 2]> = (0..16).map(|t| lex.phones(t)).collect();
        assert_eq!(all.len(), 16);
        let r = error_rate(&lex.expand(&[0, 5]), &lex.expand(&[1, 5])).unwrap();
        assert_eq!(r.errors(), 1);
        assert_eq!(r.reference_length, 4);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.5]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
