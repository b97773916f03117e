//! Rank-based k-sample tests: Kruskal-Wallis H and Dunn's pairwise post-hoc.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("at least two groups are required, got {0}")]
    TooFewGroups(usize),
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("at least three observations are required, got {0}")]
    TooFewObservations(usize),
    #[error("group {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("invalid chi-square arguments x={x}, df={df}")]
    Chi2Domain { x: f64, df: u32 },
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: u32) -> Result<f64, StatsError> {
    if !(x >= 0.0) || df == 0 {
        return Err(StatsError::Chi2Domain { x, df });
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new(df as f64).map_err(|_| StatsError::Chi2Domain { x, df })?;
    Ok(dist.sf(x).clamp(0.0, 1.0))
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

/// Mid-ranks (1-based) of the pooled sample, and the tie term `sum(t^3 - t)`.
pub fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share the average of ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

struct Pooled {
    mean_ranks: Vec<f64>,
    rank_sums: Vec<f64>,
    sizes: Vec<usize>,
    n: usize,
    ties: f64,
}

fn pool<G: AsRef<[f64]>>(groups: &[G]) -> Result<Pooled, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    let mut values = Vec::new();
    let mut sizes = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let g = g.as_ref();
        if g.is_empty() {
            return Err(StatsError::EmptyGroup(i));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
        sizes.push(g.len());
        values.extend_from_slice(g);
    }
    let n = values.len();
    if n < 3 {
        return Err(StatsError::TooFewObservations(n));
    }
    let (ranks, ties) = mid_ranks(&values);
    let mut rank_sums = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &s in &sizes {
        rank_sums.push(ranks[offset..offset + s].iter().sum::<f64>());
        offset += s;
    }
    let mean_ranks = rank_sums.iter().zip(&sizes).map(|(r, &s)| r / s as f64).collect();
    Ok(Pooled { mean_ranks, rank_sums, sizes, n, ties })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTestResult {
    pub h: f64,
    pub df: u32,
    pub p: f64,
    pub group_sizes: Vec<usize>,
    pub tie_corrected: bool,
}

/// Kruskal-Wallis H with tie correction. If every observation is tied, H = 0 and p = 1.
pub fn kruskal_wallis<G: AsRef<[f64]>>(groups: &[G]) -> Result<HTestResult, StatsError> {
    let pooled = pool(groups)?;
    let n = pooled.n as f64;
    let df = (groups.len() - 1) as u32;
    let correction = 1.0 - pooled.ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(HTestResult { h: 0.0, df, p: 1.0, group_sizes: pooled.sizes, tie_corrected: true });
    }
    let sum: f64 = pooled.rank_sums.iter().zip(&pooled.sizes).map(|(r, &s)| r * r / s as f64).sum();
    let raw = 12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0);
    let h = (raw / correction).max(0.0);
    let p = chi2_sf(h, df)?;
    Ok(HTestResult { h, df, p, group_sizes: pooled.sizes, tie_corrected: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    None,
    Bonferroni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnPair {
    pub a: usize,
    pub b: usize,
    pub z: f64,
    pub p: f64,
}

/// Pairwise Dunn comparisons, stored for `a < b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DunnResult {
    pub adjustment: Adjustment,
    pub pairs: Vec<DunnPair>,
}

impl DunnResult {
    /// p-value for groups `i` and `j` in either order; `None` on the diagonal.
    pub fn p(&self, i: usize, j: usize) -> Option<f64> {
        self.pair(i, j).map(|d| d.p)
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&DunnPair> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairs.iter().find(|d| d.a == a && d.b == b)
    }
}

pub fn dunn_posthoc<G: AsRef<[f64]>>(groups: &[G], adjustment: Adjustment) -> Result<DunnResult, StatsError> {
    let pooled = pool(groups)?;
    let n = pooled.n as f64;
    let base = n * (n + 1.0) / 12.0 - pooled.ties / (12.0 * (n - 1.0));
    let k = groups.len();
    let comparisons = (k * (k - 1) / 2) as f64;
    let mut pairs = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let var = base * (1.0 / pooled.sizes[a] as f64 + 1.0 / pooled.sizes[b] as f64);
            let diff = pooled.mean_ranks[a] - pooled.mean_ranks[b];
            let (z, p) = if var > 0.0 {
                let z = diff / var.sqrt();
                (z, normal_two_sided(z))
            } else {
                (0.0, 1.0)
            };
            let p = match adjustment {
                Adjustment::None => p,
                Adjustment::Bonferroni => (p * comparisons).min(1.0),
            };
            pairs.push(DunnPair { a, b, z, p });
        }
    }
    Ok(DunnResult { adjustment, pairs })
}
