//! Network definition, kernels and parameter storage.

pub mod checkpoint;
pub mod config;
pub mod kernels;
pub mod model;
pub mod params;
pub mod receptive;
pub mod scalar;

use std::collections::BTreeMap;

pub use config::{Aggregation, ModelConfig};
pub use model::{Network, PartMapStack, SampleCache};
pub use params::{NetworkParams, Slot};
pub use receptive::{analytic_receptive_field, dependency_support, receptive_field, PixelBox};
pub use scalar::Real;

use crate::error::Result;

/// Builds the architecture and deterministically initialized parameters.
pub fn build_model<T: Real>(config: &ModelConfig, init_seed: u64) -> Result<(Network, NetworkParams<T>)> {
    let net = Network::new(config)?;
    let params = net.init_params(init_seed);
    Ok((net, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// trunk / branch[r] / map_head[r] / classifier, summed across ensemble members.
    Role,
    /// Every group name as stored, ensemble prefixes included.
    Exact,
}

/// Exact parameter counts per group plus the total.
pub fn parameter_count<T: Real>(params: &NetworkParams<T>, grouping: Grouping) -> (BTreeMap<String, usize>, usize) {
    let exact = params.count_by_group();
    let total = exact.values().sum();
    let groups = match grouping {
        Grouping::Exact => exact,
        Grouping::Role => {
            let mut m = BTreeMap::new();
            for (g, n) in exact {
                let role = g.rsplit('/').next().unwrap_or(&g).to_string();
                *m.entry(role).or_insert(0) += n;
            }
            m
        }
    };
    (groups, total)
}
