use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dataset::Buckets;
use super::ingest::TrustEdge;

/// Neighbour lists are truncated to this many highest-degree neighbours.
pub const DEFAULT_NEIGHBOR_CAP: usize = 50;

/// Per-bucket neighbour lists `G_t`, cumulative over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocialGraphSeries {
    pub buckets: Vec<Vec<Vec<usize>>>,
}

impl SocialGraphSeries {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn neighbors(&self, t: usize, user: usize) -> &[usize] {
        &self.buckets[t][user]
    }

    /// Graph with a fixed neighbour list per user in every bucket.
    pub fn from_static(lists: Vec<Vec<usize>>, n_buckets: usize) -> Self {
        Self {
            buckets: vec![lists; n_buckets],
        }
    }
}

/// Bucket `t` holds every edge with `timestamp <= end_t`. With `undirected`
/// each trust edge links both endpoints.
pub fn snapshot_graph(
    edges: &[TrustEdge],
    buckets: &Buckets,
    n_users: usize,
    undirected: bool,
    neighbor_cap: usize,
) -> SocialGraphSeries {
    let mut sorted: Vec<&TrustEdge> = edges.iter().filter(|e| e.truster != e.trustee).collect();
    sorted.sort_by_key(|e| (e.timestamp, e.truster, e.trustee));
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_users];
    let mut next = 0;
    let mut out = Vec::with_capacity(buckets.len());
    for &end in buckets.ends() {
        while next < sorted.len() && sorted[next].timestamp <= end {
            let e = sorted[next];
            adj[e.truster].insert(e.trustee);
            if undirected {
                adj[e.trustee].insert(e.truster);
            }
            next += 1;
        }
        out.push(truncate(&adj, neighbor_cap));
    }
    SocialGraphSeries { buckets: out }
}

fn truncate(adj: &[BTreeSet<usize>], cap: usize) -> Vec<Vec<usize>> {
    adj.iter()
        .map(|nbrs| {
            let mut v: Vec<usize> = nbrs.iter().copied().collect();
            if v.len() > cap {
                v.sort_by_key(|&n| (std::cmp::Reverse(adj[n].len()), n));
                v.truncate(cap);
                v.sort_unstable();
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(a: usize, b: usize, ts: i64) -> TrustEdge {
        TrustEdge { truster: a, trustee: b, timestamp: ts }
    }

    #[test]
    fn static_source_replicates() {
        let b = Buckets::from_width(0, 29, 10);
        let g = snapshot_graph(&[edge(0, 1, 0), edge(1, 2, 0)], &b, 4, true, 50);
        assert_eq!(g.len(), 3);
        assert!(g.buckets.iter().all(|s| s == &g.buckets[0]));
        assert!(g.buckets.iter().all(|s| s[3].is_empty()));
    }

    #[test]
    fn cumulative_rule() {
        let b = Buckets::from_ends(vec![4, 6]);
        let g = snapshot_graph(&[edge(0, 1, 5)], &b, 2, false, 50);
        assert!(g.neighbors(0, 0).is_empty());
        assert_eq!(g.neighbors(1, 0), &[1]);
        assert!(g.neighbors(1, 1).is_empty());
    }

    #[test]
    fn cap_keeps_highest_degree() {
        let b = Buckets::from_ends(vec![0]);
        // user 0 links to 1, 2, 3; user 3 also links to 4 and 5.
        let edges = [edge(0, 1, 0), edge(0, 2, 0), edge(0, 3, 0), edge(3, 4, 0), edge(3, 5, 0), edge(2, 4, 0)];
        let g = snapshot_graph(&edges, &b, 6, true, 2);
        assert_eq!(g.neighbors(0, 0), &[2, 3]);
    }
}
