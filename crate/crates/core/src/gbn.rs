//! Batch normalization with per-domain statistics and per-domain scale/bias.
//!
//! The plain forward normalizes with the domain's own statistics and applies
//! the domain's own scale and bias. The graph forward keeps the statistics
//! per domain but replaces scale and bias by their edge-weighted mean over
//! all known domains of a [`DomainGraph`].

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::domain_graph::{convex_mix, BnParams, DomainGraph, DomainId};
use crate::error::{check_dim, AdaGraphError, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch and update running statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

/// Per-domain state of one GBN layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GbnState {
    channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
    entries: BTreeMap<DomainId, BnParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveScaleBias {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Per-channel mean and biased (divide by `n`) variance of a batch.
pub fn batch_stats(x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.nrows();
    if n == 0 {
        return Err(AdaGraphError::InsufficientBatch { got: 0, need: 1 });
    }
    let mu = x.mean_axis(Axis(0)).expect("nonempty batch");
    let mut var = Array1::<f64>::zeros(x.ncols());
    for row in x.rows() {
        for ((v, xi), m) in var.iter_mut().zip(row).zip(&mu) {
            let d = xi - m;
            *v += d * d;
        }
    }
    var /= n as f64;
    Ok((mu.to_vec(), var.to_vec()))
}

/// Where the scale/bias of a layer comes from during a forward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LayerCond<'a> {
    Plain(DomainId),
    /// Own statistics, scale/bias blended with the given normalized weights.
    Graph(DomainId, &'a [(DomainId, f64)]),
    /// Externally synthesized parameters; eval mode only.
    Explicit(&'a BnParams),
}

#[derive(Debug, Clone)]
pub(crate) struct GbnCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub gamma_eff: Array1<f64>,
    pub train: bool,
    /// Domains receiving scale/bias gradient and their share of it.
    pub grad_targets: Vec<(DomainId, f64)>,
}

pub(crate) struct GbnOutput {
    pub y: Array2<f64>,
    pub cache: GbnCache,
    /// Batch statistics to fold into the running estimate (train mode).
    pub batch: Option<(DomainId, Vec<f64>, Vec<f64>)>,
}

impl GbnState {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(AdaGraphError::Config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(AdaGraphError::Config(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            channels,
            epsilon,
            momentum,
            entries: BTreeMap::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.entries.keys().copied()
    }

    pub fn contains(&self, domain: DomainId) -> bool {
        self.entries.contains_key(&domain)
    }

    pub fn entry(&self, domain: DomainId) -> Result<&BnParams> {
        self.entries
            .get(&domain)
            .ok_or(AdaGraphError::UnknownDomain(domain))
    }

    pub fn entry_mut(&mut self, domain: DomainId) -> Result<&mut BnParams> {
        self.entries
            .get_mut(&domain)
            .ok_or(AdaGraphError::UnknownDomain(domain))
    }

    pub fn insert(&mut self, domain: DomainId, params: BnParams) -> Result<()> {
        check_dim(self.channels, params.channels())?;
        params.validate()?;
        self.entries.insert(domain, params);
        Ok(())
    }

    pub fn remove(&mut self, domain: DomainId) -> Option<BnParams> {
        self.entries.remove(&domain)
    }

    /// Exponential running update: `s <- (1 - m) s + m s_hat` for mean and variance.
    pub fn update_batch_stats(
        &mut self,
        domain: DomainId,
        mu_hat: &[f64],
        var_hat: &[f64],
        momentum: f64,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(AdaGraphError::Config(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        let channels = self.channels;
        let e = self.entry_mut(domain)?;
        check_dim(channels, mu_hat.len())?;
        check_dim(channels, var_hat.len())?;
        for c in 0..channels {
            e.mu[c] = (1.0 - momentum) * e.mu[c] + momentum * mu_hat[c];
            e.var[c] = ((1.0 - momentum) * e.var[c] + momentum * var_hat[c]).max(0.0);
        }
        Ok(())
    }

    /// Forward with the domain's own entry. Train mode also folds the batch statistics into
    /// the domain's running estimate.
    pub fn forward_plain(
        &mut self,
        x: ArrayView2<'_, f64>,
        domain: DomainId,
        mode: BnMode,
    ) -> Result<Array2<f64>> {
        let out = self.normalize(x, LayerCond::Plain(domain), mode)?;
        self.commit(&out)?;
        Ok(out.y)
    }

    /// Graph-aware forward: own statistics, graph-blended scale and bias.
    pub fn forward_graph(
        &mut self,
        x: ArrayView2<'_, f64>,
        domain: DomainId,
        graph: &DomainGraph,
        mode: BnMode,
    ) -> Result<Array2<f64>> {
        let weights = graph.mixing_weights(domain)?;
        let out = self.normalize(x, LayerCond::Graph(domain, &weights), mode)?;
        self.commit(&out)?;
        Ok(out.y)
    }

    pub(crate) fn commit(&mut self, out: &GbnOutput) -> Result<()> {
        if let Some((domain, mu, var)) = &out.batch {
            self.update_batch_stats(*domain, mu, var, self.momentum)?;
        }
        Ok(())
    }

    fn blend(&self, weights: &[(DomainId, f64)]) -> Result<EffectiveScaleBias> {
        let mut entries = Vec::with_capacity(weights.len());
        for (id, _) in weights {
            entries.push(self.entry(*id)?);
        }
        let w: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
        Ok(EffectiveScaleBias {
            gamma: convex_mix(&w, entries.iter().map(|e| e.gamma.as_slice()), self.channels),
            beta: convex_mix(&w, entries.iter().map(|e| e.beta.as_slice()), self.channels),
        })
    }

    /// Pure part of the forward pass; running statistics are left untouched.
    pub(crate) fn normalize(
        &self,
        x: ArrayView2<'_, f64>,
        cond: LayerCond<'_>,
        mode: BnMode,
    ) -> Result<GbnOutput> {
        check_dim(self.channels, x.ncols())?;
        let (stats_owner, gamma, beta, grad_targets) = match cond {
            LayerCond::Plain(d) => {
                let e = self.entry(d)?;
                (Some(d), e.gamma.clone(), e.beta.clone(), vec![(d, 1.0)])
            }
            LayerCond::Graph(d, weights) => {
                self.entry(d)?;
                let eff = self.blend(weights)?;
                (Some(d), eff.gamma, eff.beta, weights.to_vec())
            }
            LayerCond::Explicit(p) => {
                check_dim(self.channels, p.channels())?;
                (None, p.gamma.clone(), p.beta.clone(), Vec::new())
            }
        };

        let (mu, var, batch) = match mode {
            BnMode::Train => {
                let Some(owner) = stats_owner else {
                    return Err(AdaGraphError::InvalidState(
                        "train mode requires a domain-owned state".into(),
                    ));
                };
                if x.nrows() < 2 {
                    return Err(AdaGraphError::InsufficientBatch {
                        got: x.nrows(),
                        need: 2,
                    });
                }
                let (mu, var) = batch_stats(x)?;
                (mu.clone(), var.clone(), Some((owner, mu, var)))
            }
            BnMode::Eval => match cond {
                LayerCond::Explicit(p) => (p.mu.clone(), p.var.clone(), None),
                _ => {
                    let e = self.entry(stats_owner.expect("domain cond"))?;
                    (e.mu.clone(), e.var.clone(), None)
                }
            },
        };

        let inv_std: Array1<f64> = var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        let mu = ArrayView1::from(&mu);
        let x_hat = (&x - &mu) * &inv_std;
        let gamma_eff = Array1::from(gamma);
        let y = &x_hat * &gamma_eff + &ArrayView1::from(&beta);
        Ok(GbnOutput {
            y,
            cache: GbnCache {
                x_hat,
                inv_std,
                gamma_eff,
                train: mode == BnMode::Train,
                grad_targets,
            },
            batch,
        })
    }
}

/// Gradient of a GBN layer: w.r.t. its input and its effective scale/bias.
pub(crate) fn backward(cache: &GbnCache, dy: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (&dy * &cache.x_hat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dx_hat = &dy * &cache.gamma_eff;
    let dx = if cache.train {
        // Batch statistics depend on x: full batch-norm backward.
        let n = dy.nrows() as f64;
        let sum_dxh = dx_hat.sum_axis(Axis(0));
        let sum_dxh_xh = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
        let inner = &dx_hat * n - &sum_dxh - &(&cache.x_hat * &sum_dxh_xh);
        inner * &(&cache.inv_std / n)
    } else {
        dx_hat * &cache.inv_std
    };
    (dx, dgamma, dbeta)
}

/// Scale/bias actually applied to `domain` by the graph-aware forward.
pub fn effective_scale_bias(
    graph: &DomainGraph,
    state: &GbnState,
    domain: DomainId,
) -> Result<EffectiveScaleBias> {
    state.entry(domain)?;
    state.blend(&graph.mixing_weights(domain)?)
}
