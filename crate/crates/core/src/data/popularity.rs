use serde::{Deserialize, Serialize};

use super::dataset::Buckets;
use super::ingest::InteractionRecord;

/// Default Laplace smoothing of the per-bucket popularity estimate.
pub const DEFAULT_SMOOTHING: f64 = 1.0;

/// Per-bucket item popularity `z_t`, each a probability vector over items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularitySeries {
    pub buckets: Vec<Vec<f64>>,
}

impl PopularitySeries {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn bucket(&self, t: usize) -> &[f64] {
        &self.buckets[t]
    }

    /// Entropy of `z_t` divided by `ln(n_items)`, in `[0, 1]`.
    pub fn normalized_entropy(&self, t: usize) -> f64 {
        let z = &self.buckets[t];
        if z.len() < 2 {
            return 0.0;
        }
        let h: f64 = z.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        h / (z.len() as f64).ln()
    }
}

/// `z_t[i] = (count_t(i) + eps) / (total_t + eps * n_items)`; a bucket with no
/// mass at all falls back to the uniform vector.
pub fn compute_popularity(
    records: &[InteractionRecord],
    buckets: &Buckets,
    n_items: usize,
    smoothing: f64,
) -> PopularitySeries {
    let mut counts = vec![vec![0.0f64; n_items]; buckets.len()];
    for r in records {
        counts[buckets.bucket_of(r.timestamp)][r.item] += 1.0;
    }
    let out = counts
        .into_iter()
        .map(|c| {
            let total: f64 = c.iter().sum::<f64>() + smoothing * n_items as f64;
            if total <= 0.0 {
                vec![1.0 / n_items as f64; n_items]
            } else {
                c.into_iter().map(|v| (v + smoothing) / total).collect()
            }
        })
        .collect();
    PopularitySeries { buckets: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(item: usize, ts: i64) -> InteractionRecord {
        InteractionRecord { user: 0, item, feedback: 1, timestamp: ts }
    }

    #[test]
    fn normalizes_counts() {
        let b = Buckets::from_width(0, 9, 10);
        let z = compute_popularity(&[rec(0, 1), rec(0, 2), rec(1, 3), rec(2, 4)], &b, 3, 0.0);
        assert_eq!(z.buckets[0], vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn empty_bucket_is_uniform() {
        let b = Buckets::from_width(0, 19, 10);
        let z = compute_popularity(&[rec(0, 1)], &b, 4, 1.0);
        assert_eq!(z.buckets[1], vec![0.25; 4]);
        let z0 = compute_popularity(&[rec(0, 1)], &b, 4, 0.0);
        assert_eq!(z0.buckets[1], vec![0.25; 4]);
    }

    #[test]
    fn disjoint_buckets_change_argmax() {
        let b = Buckets::from_width(0, 19, 10);
        let recs = [rec(0, 1), rec(0, 2), rec(1, 3), rec(2, 12), rec(2, 13), rec(1, 14)];
        let z = compute_popularity(&recs, &b, 3, 1.0);
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(z.bucket(0)), 0);
        assert_eq!(argmax(z.bucket(1)), 2);
    }
}
