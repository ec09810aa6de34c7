use super::{check_k, Metric, SelectionResult};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

/// Largest row count [`kcenter_exact`] will enumerate.
pub const EXACT_ROW_LIMIT: usize = 16;

/// Greedy k-Center with `m` centers added per round, seeded with CLS.
///
/// Each round ranks the unselected rows by their distance to the current
/// center set and takes the `min(m, k - |S|)` farthest. Distances are not
/// refreshed against centers picked earlier in the same round, which is what
/// lets a round run as one parallel top-m. With `m == 1` this is the classic
/// farthest-point greedy and its cover radius is within 2x of optimal.
///
/// Ties go to the lowest row index.
pub fn kcenter_greedy_batch(emb: &Matrix, k: usize, m: usize, metric: Metric) -> Result<SelectionResult> {
    check_k(emb, k)?;
    if m == 0 {
        return invalid("batch size m must be at least 1");
    }
    let n = emb.rows();
    let mut min_dist: Vec<f64> = (0..n).map(|u| metric.distance(emb.row(u), emb.row(0))).collect();
    min_dist[0] = 0.0;
    let mut taken = vec![false; n];
    taken[0] = true;
    let mut selected = Vec::with_capacity(k);
    let mut importance = Vec::with_capacity(k);
    selected.push(0);
    importance.push(f64::INFINITY);

    while selected.len() < k {
        let batch = m.min(k - selected.len());
        let round_start = selected.len();
        for _ in 0..batch {
            let mut best: Option<usize> = None;
            for u in 0..n {
                if taken[u] {
                    continue;
                }
                if best.is_none_or(|b| min_dist[u] > min_dist[b]) {
                    best = Some(u);
                }
            }
            // k <= n guarantees an untaken row exists
            let s = best.expect("unselected row available");
            taken[s] = true;
            selected.push(s);
            importance.push(min_dist[s]);
        }
        for &c in &selected[round_start..] {
            min_dist[c] = 0.0;
            for u in 0..n {
                if !taken[u] {
                    let d = metric.distance(emb.row(u), emb.row(c));
                    if d < min_dist[u] {
                        min_dist[u] = d;
                    }
                }
            }
        }
    }

    let cover_radius = min_dist.iter().copied().fold(0.0, f64::max);
    Ok(SelectionResult { selected, importance, cover_radius, m_used: m, metric })
}

/// Exact k-Center by enumeration of every size-`k` subset containing CLS.
/// Returns the lexicographically smallest optimal subset.
pub fn kcenter_exact(emb: &Matrix, k: usize, metric: Metric) -> Result<SelectionResult> {
    if emb.rows() > EXACT_ROW_LIMIT {
        return Err(Error::SizeLimit(format!(
            "exact k-center is limited to {EXACT_ROW_LIMIT} rows, got {}",
            emb.rows()
        )));
    }
    check_k(emb, k)?;
    let n = emb.rows();
    let dist: Vec<Vec<f64>> =
        (0..n).map(|u| (0..n).map(|v| if u == v { 0.0 } else { metric.distance(emb.row(u), emb.row(v)) }).collect()).collect();

    let radius_of = |set: &[usize]| -> f64 {
        (0..n)
            .map(|u| set.iter().map(|&v| dist[u][v]).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };

    // combinations of k-1 indices from 1..n in lexicographic order
    let r = k - 1;
    let mut comb: Vec<usize> = (1..=r).collect();
    let mut set = Vec::with_capacity(k);
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        set.clear();
        set.push(0);
        set.extend_from_slice(&comb);
        let rad = radius_of(&set);
        if best.as_ref().is_none_or(|(b, _)| rad < *b) {
            best = Some((rad, set.clone()));
        }
        // advance to the next combination
        let mut i = r;
        loop {
            if i == 0 {
                let (cover_radius, selected) = best.expect("at least one subset");
                let importance = importance_in_order(&selected, &dist);
                return Ok(SelectionResult { selected, importance, cover_radius, m_used: 1, metric });
            }
            i -= 1;
            if comb[i] < n - r + i {
                comb[i] += 1;
                for j in i + 1..r {
                    comb[j] = comb[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn importance_in_order(selected: &[usize], dist: &[Vec<f64>]) -> Vec<f64> {
    selected
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            selected[..i].iter().map(|&p| dist[s][p]).fold(f64::INFINITY, f64::min)
        })
        .collect()
}
