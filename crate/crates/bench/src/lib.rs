//! Fixtures shared by the criterion benchmarks.

use adagraph::{BnParams, DomainGraph, DomainId, KernelConfig, Metadata, Network, NodeRole, ParamSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct Fixture {
    pub net: Network,
    pub graph: DomainGraph,
    /// A virtual node whose parameters were regressed and installed in `net`.
    pub target: DomainId,
    pub batch: Array2<f64>,
    pub labels: Vec<usize>,
}

fn random_params(rng: &mut ChaCha8Rng, layout: &[usize]) -> ParamSet {
    let n = Normal::new(0.0, 1.0).unwrap();
    ParamSet {
        layers: layout
            .iter()
            .map(|&c| BnParams {
                mu: (0..c).map(|_| n.sample(rng)).collect(),
                var: (0..c).map(|_| n.sample(rng).abs() + 0.1).collect(),
                gamma: (0..c).map(|_| 1.0 + 0.2 * n.sample(rng)).collect(),
                beta: (0..c).map(|_| 0.2 * n.sample(rng)).collect(),
            })
            .collect(),
    }
}

/// Two-input network with the default `[32, 32]` hidden layout and `domains`
/// known domains on a one-dimensional metadata line.
pub fn fixture(domains: u32, batch: usize) -> Fixture {
    let hidden = [32, 32];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Network::new(2, &hidden, 2, DomainId(0), 1e-5, 0.1, &mut rng).unwrap();
    let mut graph = DomainGraph::new(1, KernelConfig::default()).unwrap();
    for i in 0..domains {
        let id = DomainId(i);
        let role = if i == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
        graph
            .add_node(id, Metadata::new(vec![f64::from(i) / f64::from(domains)]).unwrap(), role)
            .unwrap();
        let p = random_params(&mut rng, &hidden);
        net.set_param_set(id, &p).unwrap();
        graph.assign_params(id, p).unwrap();
    }
    let target = DomainId(domains);
    graph.add_virtual_node(target, Metadata::new(vec![0.37]).unwrap()).unwrap();
    let p = graph.propagate_params(target).unwrap();
    net.set_param_set(target, &p).unwrap();
    let n = Normal::new(0.0, 1.0).unwrap();
    let batch = Array2::from_shape_fn((batch, 2), |_| n.sample(&mut rng));
    let labels = (0..batch.nrows()).map(|_| rng.random_range(0..2)).collect();
    Fixture {
        net,
        graph,
        target,
        batch,
        labels,
    }
}
