//! Runtime invariant suite behind the `selftest` subcommand: gradient
//! checks, parameter-regression oracle, normalization invariant and the
//! running-statistics closed form.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::domain_graph::{BnParams, DomainGraph, DomainId, KernelConfig, Metadata, NodeRole, ParamSet};
use crate::error::Result;
use crate::gbn::{BnMode, GbnState};
use crate::gradcheck::{self, GradCheckConfig, Probe};
use crate::network::{Loss, Network};
use crate::refinement::blend_stats;
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run() -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 4] = [
        ("gradients", gradients),
        ("propagation_oracle", propagation_oracle),
        ("normalization", normalization),
        ("running_stats_closed_form", running_stats),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn random_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let u = Uniform::new(lo, hi).expect("valid range");
    (0..n).map(|_| u.sample(rng)).collect()
}

/// Network with three domains holding distinct random GBN entries, plus a
/// graph over them.
fn fixture(seed: u64) -> Result<(Network, DomainGraph, Array2<f64>, Vec<usize>)> {
    let mut rng = seeds::rng(seed, &[0x5e1f]);
    let input = rng.random_range(2..5);
    let hidden = [rng.random_range(3..7), rng.random_range(3..7)];
    let classes = rng.random_range(2..5);
    let batch = rng.random_range(4..9);
    let mut net = Network::new(input, &hidden, classes, DomainId(0), 1e-5, 0.1, &mut rng)?;
    let mut graph = DomainGraph::new(2, KernelConfig::new(0.5)?)?;
    for d in 0..3u32 {
        let id = DomainId(d);
        let role = if d == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
        graph.add_node(id, Metadata::new(random_vec(&mut rng, 2, 0.0, 1.0))?, role)?;
        let layers = hidden
            .iter()
            .map(|&c| BnParams {
                mu: random_vec(&mut rng, c, -0.5, 0.5),
                var: random_vec(&mut rng, c, 0.5, 2.0),
                gamma: random_vec(&mut rng, c, 0.5, 1.5),
                beta: random_vec(&mut rng, c, -0.5, 0.5),
            })
            .collect();
        net.set_param_set(id, &ParamSet { layers })?;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x = Array2::from_shape_fn((batch, input), |_| normal.sample(&mut rng));
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Ok((net, graph, x, labels))
}

fn gradients() -> Result<(bool, String)> {
    let cfg = GradCheckConfig::default();
    let mut total = gradcheck::GradCheckReport::default();
    for seed in 0..24u64 {
        let (net, graph, x, labels) = fixture(seed)?;
        let domain = DomainId((seed % 3) as u32);
        let probes = [
            (Probe { domain, graph: None, mode: BnMode::Train }, Loss::CrossEntropy(&labels)),
            (Probe { domain, graph: Some(&graph), mode: BnMode::Train }, Loss::CrossEntropy(&labels)),
            (Probe { domain, graph: None, mode: BnMode::Train }, Loss::Entropy),
            (Probe { domain, graph: Some(&graph), mode: BnMode::Train }, Loss::Entropy),
            // Refinement step: eval-mode statistics, entropy objective.
            (Probe { domain, graph: None, mode: BnMode::Eval }, Loss::Entropy),
        ];
        for (probe, loss) in &probes {
            total.merge(gradcheck::check(&net, &x, probe, loss, 1.0, &cfg)?);
        }
    }
    Ok((
        total.passed(&cfg),
        format!(
            "{} entries, max relative error {:.3e} at {}",
            total.checked, total.max_rel_error, total.worst
        ),
    ))
}

fn propagation_oracle() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = seeds::rng(seed, &[0x9a0c]);
        let dim = rng.random_range(1..5);
        let n = rng.random_range(1..20);
        let sigma = rng.random_range(0.05..1.0);
        let mut g = DomainGraph::new(dim, KernelConfig::new(sigma)?)?;
        let mut nodes = Vec::new();
        for i in 0..n {
            let m = random_vec(&mut rng, dim, 0.0, 1.0);
            let role = if i == 0 { NodeRole::Source } else { NodeRole::Auxiliary };
            g.add_node(DomainId(i), Metadata::new(m.clone())?, role)?;
            let p = ParamSet {
                layers: vec![BnParams {
                    mu: random_vec(&mut rng, 3, -1.0, 1.0),
                    var: random_vec(&mut rng, 3, 0.1, 2.0),
                    gamma: random_vec(&mut rng, 3, 0.5, 1.5),
                    beta: random_vec(&mut rng, 3, -1.0, 1.0),
                }],
            };
            g.assign_params(DomainId(i), p.clone())?;
            nodes.push((m, p));
        }
        let mt = random_vec(&mut rng, dim, 0.0, 1.0);
        let target = DomainId(n);
        g.add_virtual_node(target, Metadata::new(mt.clone())?)?;
        let got = g.propagate_params(target)?;
        // Plain weighted average with log-domain shift for stability.
        let logw: Vec<f64> = nodes
            .iter()
            .map(|(m, _)| -m.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * sigma))
            .collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..3 {
            let want: f64 = nodes.iter().zip(&w).map(|((_, p), wi)| wi * p.layers[0].mu[c]).sum::<f64>() / z;
            let have = got.layers[0].mu[c];
            worst = worst.max((want - have).abs() / want.abs().max(1e-300));
        }
    }
    Ok((worst <= 1e-12, format!("max relative error {worst:.3e} over 50 graphs")))
}

fn normalization() -> Result<(bool, String)> {
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut rng = seeds::rng(seed, &[0xb7]);
        let c = rng.random_range(1..8);
        let n = rng.random_range(8..64);
        let shift = Normal::new(0.0, 3.0).expect("finite");
        let offsets: Vec<f64> = (0..c).map(|_| shift.sample(&mut rng)).collect();
        let scales = random_vec(&mut rng, c, 0.5, 5.0);
        let unit = Normal::new(0.0, 1.0).expect("finite");
        let x = Array2::from_shape_fn((n, c), |(_, j)| offsets[j] + scales[j] * unit.sample(&mut rng));
        let mut state = GbnState::new(c, 1e-5, 0.1)?;
        state.insert(DomainId(0), BnParams::identity(c))?;
        let y = state.forward_plain(x.view(), DomainId(0), BnMode::Train)?;
        let (mu, var) = crate::gbn::batch_stats(y.view())?;
        mean_err = mu.iter().fold(mean_err, |a, m| a.max(m.abs()));
        var_err = var.iter().fold(var_err, |a, v| a.max((v - 1.0).abs()));
    }
    Ok((
        mean_err <= 1e-6 && var_err <= 1e-4,
        format!("max |mean| {mean_err:.3e}, max |var - 1| {var_err:.3e}"),
    ))
}

fn running_stats() -> Result<(bool, String)> {
    let (alpha, m) = (0.1, 16usize);
    let bessel = m as f64 / (m as f64 - 1.0);
    let (mu0, var0, mu_m, var_m) = (0.7, 2.0, -0.3, 0.5);
    let (mut mu, mut var) = (vec![mu0], vec![var0]);
    let mut worst = 0.0f64;
    for k in 1..=50 {
        blend_stats(&mut mu, &mut var, &[mu_m], &[var_m], alpha, m)?;
        let keep = (1.0 - alpha).powi(k);
        worst = worst
            .max((mu[0] - (keep * mu0 + (1.0 - keep) * mu_m)).abs())
            .max((var[0] - (keep * var0 + (1.0 - keep) * bessel * var_m)).abs());
    }
    let (mut one_mu, mut one_var) = (vec![mu0], vec![var0]);
    blend_stats(&mut one_mu, &mut one_var, &[mu_m], &[var_m], 1.0, m)?;
    let bessel_ok = (one_var[0] - var_m * 16.0 / 15.0).abs() <= 1e-15 && one_mu[0] == mu_m;
    Ok((
        worst <= 1e-12 && bessel_ok,
        format!("max deviation {worst:.3e} over 50 updates"),
    ))
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
