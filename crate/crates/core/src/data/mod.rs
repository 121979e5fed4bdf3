//! Interaction logs, trust graphs and the logged dataset built from them.

pub mod dataset;
pub mod ingest;
pub mod popularity;
pub mod social;
pub mod synthetic;

pub use dataset::{Buckets, BuildOptions, LoggedDataset};
pub use ingest::{parse_interactions, parse_trust, IdMap, InteractionRecord, TrustEdge};
pub use popularity::{compute_popularity, PopularitySeries};
pub use social::{snapshot_graph, SocialGraphSeries};
