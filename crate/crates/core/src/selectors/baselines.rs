//! Baseline selectors: first-k, random, strided average pooling and
//! attention-based selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_embeddings, check_k, check_window, cover_radius, Metric, SelectionResult};
use crate::error::{invalid, Result};
use crate::matrix::Matrix;

/// Keeps rows `0..k`.
pub fn select_first_k(emb: &Matrix, k: usize) -> Result<SelectionResult> {
    check_k(emb, k)?;
    let selected: Vec<usize> = (0..k).collect();
    let cover_radius = cover_radius(emb, &selected, Metric::Euclidean)?;
    Ok(SelectionResult { importance: vec![0.0; k], selected, cover_radius, m_used: k, metric: Metric::Euclidean })
}

/// CLS plus `k - 1` rows drawn uniformly without replacement, in draw order.
pub fn select_random(emb: &Matrix, k: usize, seed: u64) -> Result<SelectionResult> {
    check_k(emb, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(k);
    selected.push(0);
    if k > 1 {
        selected.extend(rand::seq::index::sample(&mut rng, emb.rows() - 1, k - 1).iter().map(|i| i + 1));
    }
    let cover_radius = cover_radius(emb, &selected, Metric::Euclidean)?;
    Ok(SelectionResult { importance: vec![0.0; k], selected, cover_radius, m_used: k, metric: Metric::Euclidean })
}

/// Output row count of [`average_pool`] for `rows` input rows.
pub fn pooled_len(rows: usize, window: usize) -> usize {
    1 + (rows - 1).div_ceil(window)
}

/// Strided mean pooling with stride equal to the window. CLS passes through;
/// the last window may be shorter and is averaged over its actual length.
pub fn average_pool(emb: &Matrix, window: usize) -> Result<Matrix> {
    check_embeddings(emb)?;
    check_window(window)?;
    let d = emb.cols();
    let mut out = Matrix::zeros(pooled_len(emb.rows(), window), d);
    out.row_mut(0).copy_from_slice(emb.row(0));
    for (w, start) in (1..emb.rows()).step_by(window).enumerate() {
        let end = (start + window).min(emb.rows());
        let len = (end - start) as f64;
        let dst = out.row_mut(w + 1);
        for r in start..end {
            for (o, v) in dst.iter_mut().zip(emb.row(r)) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|o| *o /= len);
    }
    Ok(out)
}

/// Attention received by each token: column sums over heads and queries.
pub fn token_significance(attention: &[Matrix]) -> Vec<f64> {
    let n = attention.first().map_or(0, |a| a.cols());
    let mut sig = vec![0.0; n];
    for head in attention {
        for row in head.row_iter() {
            for (s, a) in sig.iter_mut().zip(row) {
                *s += a;
            }
        }
    }
    sig
}

/// CLS plus the `k - 1` tokens receiving the most attention, ties to the
/// lowest index. `attention` holds one ℓ×ℓ post-softmax matrix per head.
pub fn attention_select(emb: &Matrix, k: usize, attention: &[Matrix]) -> Result<SelectionResult> {
    check_k(emb, k)?;
    let n = emb.rows();
    if attention.is_empty() || attention.iter().any(|a| a.shape() != (n, n)) {
        return invalid(format!("attention tensor does not match {n} tokens"));
    }
    let sig = token_significance(attention);
    let mut order: Vec<usize> = (1..n).collect();
    order.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]).then(a.cmp(&b)));
    let mut selected = vec![0];
    selected.extend_from_slice(&order[..k - 1]);
    let importance = selected.iter().map(|&i| if i == 0 { f64::INFINITY } else { sig[i] }).collect();
    let cover_radius = cover_radius(emb, &selected, Metric::Euclidean)?;
    Ok(SelectionResult { selected, importance, cover_radius, m_used: k, metric: Metric::Euclidean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_k() {
        let pts = Matrix::column(&[0.0, 4.0, 5.0, 10.0]);
        let r = select_first_k(&pts, 2).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.cover_radius, 6.0);
        let five = Matrix::zeros(5, 2);
        assert_eq!(select_first_k(&five, 3).unwrap().selected, vec![0, 1, 2]);
        assert_eq!(select_first_k(&five, 5).unwrap().selected, vec![0, 1, 2, 3, 4]);
        assert!(select_first_k(&five, 6).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let m = Matrix::from_fn(20, 2, |i, j| (i * 2 + j) as f64);
        let a = select_random(&m, 7, 42).unwrap();
        assert_eq!(a, select_random(&m, 7, 42).unwrap());
        assert_eq!(a.selected[0], 0);
        let mut s = a.sorted();
        s.dedup();
        assert_eq!(s.len(), 7);
        assert_eq!(select_random(&m, 1, 3).unwrap().selected, vec![0]);
        assert_eq!(select_random(&m, 20, 3).unwrap().sorted(), (0..20).collect::<Vec<_>>());
        assert!(select_random(&m, 21, 3).is_err());
        let differs = (0..10).any(|s| select_random(&m, 7, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn pooling_means() {
        let m = Matrix::column(&[-9.0, 1.0, 3.0, 5.0, 7.0]);
        let p = average_pool(&m, 2).unwrap();
        assert_eq!(p.as_slice(), &[-9.0, 2.0, 6.0]);
        let p = average_pool(&m, 6).unwrap();
        assert_eq!(p.as_slice(), &[-9.0, 4.0]);
        let p = average_pool(&m, 3).unwrap();
        assert_eq!(p.as_slice(), &[-9.0, 3.0, 7.0]);
        let same = Matrix::from_fn(7, 3, |_, j| j as f64 + 0.25);
        let p = average_pool(&same, 4).unwrap();
        assert_eq!(p.rows(), pooled_len(7, 4));
        assert!(p.row_iter().all(|r| r == same.row(0)));
        assert!(average_pool(&m, 1).is_err());
        assert!(average_pool(&m, 7).is_err());
    }

    #[test]
    fn attention_select_examples() {
        let emb = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let uniform = vec![Matrix::filled(3, 3, 1.0 / 3.0)];
        assert_eq!(token_significance(&uniform), vec![1.0, 1.0, 1.0]);
        assert_eq!(attention_select(&emb, 2, &uniform).unwrap().selected, vec![0, 1]);
        let focused = vec![Matrix::from_fn(3, 3, |_, j| if j == 2 { 1.0 } else { 0.0 })];
        assert_eq!(attention_select(&emb, 2, &focused).unwrap().selected, vec![0, 2]);
        assert_eq!(attention_select(&emb, 3, &focused).unwrap().sorted(), vec![0, 1, 2]);
        assert!(attention_select(&emb, 2, &[Matrix::zeros(2, 2)]).is_err());
    }
}
