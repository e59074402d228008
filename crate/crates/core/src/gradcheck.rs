//! Central finite-difference check of [`Network::backward`].
//!
//! The numerical side only ever calls the forward pass, so it stays
//! independent of the hand-written reverse pass it verifies.

use ndarray::Array2;

use crate::domain_graph::{DomainGraph, DomainId};
use crate::error::Result;
use crate::gbn::BnMode;
use crate::network::{cross_entropy, entropy, Conditioning, Gradients, Loss, Network};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor; gradients below it are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_error <= cfg.tolerance
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", name());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// What the loss is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub domain: DomainId,
    pub graph: Option<&'a DomainGraph>,
    pub mode: BnMode,
}

fn loss_value(
    net: &Network,
    x: &Array2<f64>,
    probe: &Probe<'_>,
    loss: &Loss<'_>,
    scale: f64,
) -> Result<f64> {
    // Train-mode forwards update running stats; work on a scratch copy.
    let mut scratch = net.clone();
    let probs = scratch.forward(x.view(), probe.domain, probe.graph, probe.mode)?;
    Ok(scale
        * match loss {
            Loss::CrossEntropy(labels) => cross_entropy(&probs, labels)?,
            Loss::Entropy => entropy(&probs),
        })
}

/// Analytic gradients of `scale * loss` for the probe.
pub fn analytic(
    net: &Network,
    x: &Array2<f64>,
    probe: &Probe<'_>,
    loss: &Loss<'_>,
    scale: f64,
) -> Result<Gradients> {
    let mut scratch = net.clone();
    let cond = Conditioning::new(probe.domain, probe.graph);
    let pass = scratch.forward_pass(x.view(), cond, probe.mode)?;
    scratch.backward(&pass, loss, scale)
}

/// Compares every analytic gradient entry (shared weights, every reached
/// scale/bias, input) against central differences.
pub fn check(
    net: &Network,
    x: &Array2<f64>,
    probe: &Probe<'_>,
    loss: &Loss<'_>,
    scale: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let grads = analytic(net, x, probe, loss, scale)?;
    let h = cfg.step;
    let mut report = GradCheckReport::default();

    for (l, g) in grads.shared.iter().enumerate() {
        for ((i, j), &a) in g.weight.indexed_iter() {
            let mut plus = net.clone();
            plus.shared_mut().layers[l].weight[[i, j]] += h;
            let mut minus = net.clone();
            minus.shared_mut().layers[l].weight[[i, j]] -= h;
            let n = (loss_value(&plus, x, probe, loss, scale)?
                - loss_value(&minus, x, probe, loss, scale)?)
                / (2.0 * h);
            report.record(|| format!("W{l}[{i},{j}]"), a, n, cfg.floor);
        }
        for (i, &a) in g.bias.indexed_iter() {
            let mut plus = net.clone();
            plus.shared_mut().layers[l].bias[i] += h;
            let mut minus = net.clone();
            minus.shared_mut().layers[l].bias[i] -= h;
            let n = (loss_value(&plus, x, probe, loss, scale)?
                - loss_value(&minus, x, probe, loss, scale)?)
                / (2.0 * h);
            report.record(|| format!("b{l}[{i}]"), a, n, cfg.floor);
        }
    }

    for (l, layer) in grads.scale_bias.iter().enumerate() {
        for (&d, g) in layer {
            for c in 0..g.gamma.len() {
                for (field, a) in [("gamma", g.gamma[c]), ("beta", g.beta[c])] {
                    let bump = |net: &Network, delta: f64| -> Result<Network> {
                        let mut n = net.clone();
                        let e = n.gbn_mut(l).entry_mut(d)?;
                        if field == "gamma" {
                            e.gamma[c] += delta;
                        } else {
                            e.beta[c] += delta;
                        }
                        Ok(n)
                    };
                    let n = (loss_value(&bump(net, h)?, x, probe, loss, scale)?
                        - loss_value(&bump(net, -h)?, x, probe, loss, scale)?)
                        / (2.0 * h);
                    report.record(|| format!("{field}{l}[{d}][{c}]"), a, n, cfg.floor);
                }
            }
        }
    }

    for ((i, j), &a) in grads.input.indexed_iter() {
        let mut xp = x.clone();
        xp[[i, j]] += h;
        let mut xm = x.clone();
        xm[[i, j]] -= h;
        let n = (loss_value(net, &xp, probe, loss, scale)? - loss_value(net, &xm, probe, loss, scale)?)
            / (2.0 * h);
        report.record(|| format!("x[{i},{j}]"), a, n, cfg.floor);
    }
    Ok(report)
}
