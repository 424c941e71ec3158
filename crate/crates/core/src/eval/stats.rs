//! Rank statistics for comparing methods across datasets.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Nemenyi critical values: studentized range quantiles at infinite degrees
/// of freedom divided by √2, for 2..=20 methods.
const Q_005: [f64; 19] = [
    1.9600, 2.3437, 2.5690, 2.7278, 2.8497, 2.9483, 3.0309, 3.1017, 3.1637, 3.2187, 3.2680, 3.3127, 3.3536,
    3.3912, 3.4260, 3.4584, 3.4887, 3.5171, 3.5438,
];
const Q_010: [f64; 19] = [
    1.6449, 2.0523, 2.2913, 2.4595, 2.5885, 2.6927, 2.7799, 2.8546, 2.9199, 2.9778, 3.0297, 3.0767, 3.1197,
    3.1592, 3.1957, 3.2297, 3.2615, 3.2912, 3.3192,
];

pub const FRIEDMAN_ALPHA: f64 = 0.05;

/// Ranks of one row, 1 = best, tied values share their mean rank.
pub fn rank_row(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if lower_is_better {
            c
        } else {
            c.reverse()
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Values (rows = datasets or trials, columns = methods) with their ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub row_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub lower_is_better: bool,
    pub ranks: Vec<Vec<f64>>,
    pub average_ranks: Vec<f64>,
}

impl RankTable {
    pub fn new(methods: Vec<String>, row_labels: Vec<String>, values: Vec<Vec<f64>>, lower_is_better: bool) -> Result<Self> {
        if values.len() != row_labels.len() || values.iter().any(|r| r.len() != methods.len()) {
            return Err(Error::Precondition("rank table rows must match labels and methods".into()));
        }
        let ranks: Vec<Vec<f64>> = values.iter().map(|r| rank_row(r, lower_is_better)).collect();
        let average_ranks = column_means(&ranks)?;
        Ok(RankTable {
            methods,
            row_labels,
            values,
            lower_is_better,
            ranks,
            average_ranks,
        })
    }
}

fn column_means(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rows.is_empty() || rows[0].len() < 2 {
        return Err(Error::Precondition("ranking needs at least 1 row and 2 methods".into()));
    }
    let n = rows.len() as f64;
    Ok((0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect())
}

/// Mean rank of each column.
pub fn average_ranks(values: &[Vec<f64>], lower_is_better: bool) -> Result<Vec<f64>> {
    let ranks: Vec<Vec<f64>> = values.iter().map(|r| rank_row(r, lower_is_better)).collect();
    column_means(&ranks)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub critical_value: f64,
    pub reject: bool,
}

/// Friedman χ² over a rank table with `N` rows and `k` methods.
pub fn friedman(ranks: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = ranks.len();
    let k = ranks.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::Precondition(format!("Friedman test needs N >= 2 and k >= 2, got N={n}, k={k}")));
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = (0..k).map(|j| ranks.iter().map(|r| r[j]).sum::<f64>().powi(2)).sum();
    let statistic = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
    let critical_value = ChiSquared::new((k - 1) as f64)
        .map_err(|e| Error::Precondition(e.to_string()))?
        .inverse_cdf(1.0 - FRIEDMAN_ALPHA);
    Ok(FriedmanResult {
        statistic,
        degrees_of_freedom: k - 1,
        critical_value,
        reject: statistic > critical_value,
    })
}

/// Tabulated `q_alpha` for `k` methods.
pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_005
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_010
    } else {
        return Err(Error::UnsupportedK { k, alpha });
    };
    if !(2..=20).contains(&k) {
        return Err(Error::UnsupportedK { k, alpha });
    }
    Ok(table[k - 2])
}

/// Critical difference of average ranks for `k` methods over `n` rows.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition("Nemenyi test needs at least one row".into()));
    }
    let q = nemenyi_q(k, alpha)?;
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTest {
    pub friedman: FriedmanResult,
    pub critical_difference: f64,
    pub alpha: f64,
}

/// Friedman and Nemenyi outputs for a table, when its shape allows them.
pub fn rank_test(table: &RankTable, alpha: f64) -> Result<RankTest> {
    Ok(RankTest {
        friedman: friedman(&table.ranks)?,
        critical_difference: nemenyi_cd(table.methods.len(), table.ranks.len(), alpha)?,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use statrs::distribution::{Continuous, Normal};

    #[test]
    fn rank_examples() {
        assert_eq!(rank_row(&[1.0, 2.0, 3.0], true), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_row(&[1.0, 2.0, 3.0], false), vec![3.0, 2.0, 1.0]);
        assert_eq!(rank_row(&[1.0, 1.0], true), vec![1.5, 1.5]);
        assert_eq!(rank_row(&[2.0, 1.0, 2.0, 2.0], true), vec![3.0, 1.0, 3.0, 3.0]);
        let avg = average_ranks(&[vec![1.0, 2.0], vec![2.0, 1.0]], true).unwrap();
        assert_eq!(avg, vec![1.5, 1.5]);
    }

    #[test]
    fn rank_sums_are_conserved() {
        let mut rng = crate::seed::rng(3);
        for _ in 0..200 {
            let k = rng.random_range(2..9);
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0..4) as f64).collect();
            let sum: f64 = rank_row(&row, true).iter().sum();
            assert!((sum - (k * (k + 1)) as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn friedman_cases() {
        let unanimous = vec![vec![1.0, 2.0]; 10];
        let f = friedman(&unanimous).unwrap();
        assert!((f.statistic - 10.0).abs() < 1e-9);
        assert!((f.critical_value - 3.841).abs() < 1e-3);
        assert!(f.reject);
        let tied = vec![vec![1.5, 1.5]; 10];
        let f = friedman(&tied).unwrap();
        assert!(f.statistic.abs() < 1e-12 && !f.reject);
        assert!(friedman(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn friedman_is_column_permutation_invariant() {
        let mut rng = crate::seed::rng(4);
        let table: Vec<Vec<f64>> = (0..8).map(|_| rank_row(&(0..5).map(|_| rng.random()).collect::<Vec<f64>>(), true)).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = table.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let (a, b) = (friedman(&table).unwrap(), friedman(&permuted).unwrap());
        assert!((a.statistic - b.statistic).abs() < 1e-9);
    }

    #[test]
    fn nemenyi_cases() {
        assert!((nemenyi_cd(2, 10, 0.05).unwrap() - 0.6198).abs() < 1e-3);
        let a = nemenyi_cd(5, 10, 0.05).unwrap();
        let b = nemenyi_cd(5, 40, 0.05).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(matches!(nemenyi_cd(21, 10, 0.05), Err(Error::UnsupportedK { k: 21, .. })));
        assert!(matches!(nemenyi_cd(1, 10, 0.05), Err(Error::UnsupportedK { .. })));
        assert!(nemenyi_cd(3, 10, 0.01).is_err());
    }

    /// P(range of k iid standard normals <= w) by Simpson quadrature.
    fn range_cdf(w: f64, k: usize) -> f64 {
        let n = Normal::standard();
        let (lo, hi, steps) = (-9.0, 9.0, 4000);
        let h = (hi - lo) / steps as f64;
        let f = |z: f64| n.pdf(z) * (n.cdf(z + w) - n.cdf(z)).powi(k as i32 - 1);
        let mut s = f(lo) + f(hi);
        for i in 1..steps {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        k as f64 * s * h / 3.0
    }

    #[test]
    fn q_table_matches_studentized_range_quadrature() {
        for (alpha, table) in [(0.05, &Q_005), (0.10, &Q_010)] {
            for (i, &q) in table.iter().enumerate() {
                let k = i + 2;
                let (mut a, mut b) = (0.0, 10.0);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if range_cdf(m, k) < 1.0 - alpha {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                let oracle = 0.5 * (a + b) / 2f64.sqrt();
                assert!((oracle - q).abs() < 6e-5, "k={k} alpha={alpha}: {oracle} vs {q}");
            }
        }
    }
}
