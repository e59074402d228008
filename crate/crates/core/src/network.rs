//! Dense feedforward classifier with a GBN layer after every hidden layer.
//!
//! `input -> dense -> GBN -> relu -> ... -> dense -> softmax`
//!
//! Gradients are computed by hand in reverse order over the cached forward
//! pass. Running statistics never receive gradient.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain_graph::{BnParams, DomainGraph, DomainId, ParamSet};
use crate::error::{check_dim, AdaGraphError, Result};
use crate::gbn::{self, BnMode, GbnCache, GbnState, LayerCond};

/// Floor applied inside every logarithm of the two losses.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Option<usize>,
    pub domain: DomainId,
}

impl Sample {
    pub fn labeled(x: Vec<f64>, y: usize, domain: DomainId) -> Self {
        Self { x, y: Some(y), domain }
    }
}

/// Stacks the selected samples into a `batch x features` matrix.
pub fn stack(samples: &[Sample], indices: &[usize]) -> Array2<f64> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut out = Array2::zeros((indices.len(), dim));
    for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
        row.assign(&ndarray::ArrayView1::from(&samples[i].x));
    }
    out
}

pub fn stack_all(samples: &[Sample]) -> Array2<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    stack(samples, &idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// How the GBN layers pick their parameters.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Own statistics and own scale/bias.
    Plain(DomainId),
    /// Own statistics, scale/bias blended over the graph.
    Graph(DomainId, &'a DomainGraph),
    /// Synthesized parameters (eval only).
    Explicit(&'a ParamSet),
}

impl<'a> Conditioning<'a> {
    pub fn new(domain: DomainId, graph: Option<&'a DomainGraph>) -> Self {
        match graph {
            Some(g) => Conditioning::Graph(domain, g),
            None => Conditioning::Plain(domain),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Loss<'a> {
    /// Mean negative log-likelihood of the given labels.
    CrossEntropy(&'a [usize]),
    /// Mean prediction entropy.
    Entropy,
}

/// Cached forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probs: Array2<f64>,
    /// Inputs of every dense layer.
    inputs: Vec<Array2<f64>>,
    /// Inputs of every GBN layer (pre-normalization activations).
    pre_norm: Vec<Array2<f64>>,
    /// Outputs of every GBN layer, before the rectifier.
    post_norm: Vec<Array2<f64>>,
    caches: Vec<GbnCache>,
    generation: u64,
}

impl ForwardPass {
    pub fn pre_norm(&self, layer: usize) -> &Array2<f64> {
        &self.pre_norm[layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBiasGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub shared: Vec<DenseGrad>,
    /// Per GBN layer, per domain.
    pub scale_bias: Vec<BTreeMap<DomainId, ScaleBiasGrad>>,
    /// Gradient with respect to the network input.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0_f64;
        for g in &self.shared {
            m = g.weight.iter().chain(&g.bias).fold(m, |a, b| a.max(b.abs()));
        }
        for layer in &self.scale_bias {
            for g in layer.values() {
                m = g.gamma.iter().chain(&g.beta).fold(m, |a, b| a.max(b.abs()));
            }
        }
        m
    }
}

/// Which parameter groups an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateScope {
    pub shared: bool,
    pub scale_bias: bool,
}

impl UpdateScope {
    pub const ALL: Self = Self {
        shared: true,
        scale_bias: true,
    };
    pub const SCALE_BIAS: Self = Self {
        shared: false,
        scale_bias: true,
    };
    pub const SHARED_ONLY: Self = Self {
        shared: true,
        scale_bias: false,
    };
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn check_labels(probs: &Array2<f64>, labels: &[usize]) -> Result<()> {
    check_dim(probs.nrows(), labels.len())?;
    if let Some(bad) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(AdaGraphError::Label(format!(
            "label {bad} out of range for {} classes",
            probs.ncols()
        )));
    }
    Ok(())
}

/// `-(1/N) sum log p(y_i)`, with `log(max(p, 1e-12))`.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean row entropy `(1/N) sum_i -sum_y p log p`.
pub fn entropy(probs: &Array2<f64>) -> f64 {
    if probs.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .map(|&p| -p * p.max(LOG_FLOOR).ln())
        .sum();
    total / probs.nrows() as f64
}

/// Per-row entropy.
pub fn row_entropy(probs: &Array2<f64>) -> Array1<f64> {
    probs.map_axis(Axis(1), |row| {
        row.iter().map(|&p| -p * p.max(LOG_FLOOR).ln()).sum()
    })
}

/// Gradient of the (scaled) loss with respect to the logits.
fn loss_logit_grad(probs: &Array2<f64>, loss: &Loss<'_>, scale: f64) -> Result<Array2<f64>> {
    let n = probs.nrows() as f64;
    match loss {
        Loss::CrossEntropy(labels) => {
            check_labels(probs, labels)?;
            let mut g = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                g[[i, y]] -= 1.0;
            }
            Ok(g * (scale / n))
        }
        Loss::Entropy => {
            // dH/dz_j = -p_j (log p_j + H)
            let h = row_entropy(probs);
            let mut g = probs.clone();
            for (mut row, hi) in g.rows_mut().into_iter().zip(&h) {
                row.mapv_inplace(|p| -p * (p.max(LOG_FLOOR).ln() + hi));
            }
            Ok(g * (scale / n))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    shared: SharedParams,
    gbn: Vec<GbnState>,
    num_classes: usize,
    /// Bumped on every parameter or statistics mutation; detects stale passes.
    generation: u64,
}

impl Network {
    /// He-initialized network; every GBN layer gets an identity entry for `domain`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        domain: DomainId,
        epsilon: f64,
        momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(AdaGraphError::Config("need at least two classes".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
            layers.push(DenseLayer {
                weight,
                bias: Array1::zeros(fan_out),
            });
        }
        let mut gbn = Vec::new();
        for &h in hidden {
            let mut s = GbnState::new(h, epsilon, momentum)?;
            s.insert(domain, BnParams::identity(h))?;
            gbn.push(s);
        }
        Ok(Self {
            shared: SharedParams { layers },
            gbn,
            num_classes,
            generation: 0,
        })
    }

    pub fn from_parts(shared: SharedParams, gbn: Vec<GbnState>, num_classes: usize) -> Result<Self> {
        if shared.layers.len() != gbn.len() + 1 {
            return Err(AdaGraphError::Dimension {
                expected: gbn.len() + 1,
                got: shared.layers.len(),
            });
        }
        for w in shared.layers.windows(2) {
            check_dim(w[0].out_dim(), w[1].in_dim())?;
        }
        for (l, s) in shared.layers.iter().zip(&gbn) {
            check_dim(l.out_dim(), s.channels())?;
        }
        check_dim(num_classes, shared.layers.last().expect("nonempty").out_dim())?;
        Ok(Self {
            shared,
            gbn,
            num_classes,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.shared.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shared(&self) -> &SharedParams {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut SharedParams {
        self.generation += 1;
        &mut self.shared
    }

    pub fn gbn_layers(&self) -> &[GbnState] {
        &self.gbn
    }

    pub fn gbn_mut(&mut self, layer: usize) -> &mut GbnState {
        self.generation += 1;
        &mut self.gbn[layer]
    }

    pub fn gbn_layout(&self) -> Vec<usize> {
        self.gbn.iter().map(GbnState::channels).collect()
    }

    /// The domain-specific parameters of `domain` across all GBN layers.
    pub fn param_set(&self, domain: DomainId) -> Result<ParamSet> {
        let layers = self
            .gbn
            .iter()
            .map(|s| s.entry(domain).cloned())
            .collect::<Result<_>>()?;
        Ok(ParamSet { layers })
    }

    /// Installs `params` as the GBN entries of `domain` (created if absent).
    pub fn set_param_set(&mut self, domain: DomainId, params: &ParamSet) -> Result<()> {
        check_dim(self.gbn.len(), params.layers.len())?;
        for (s, p) in self.gbn.iter_mut().zip(&params.layers) {
            s.insert(domain, p.clone())?;
        }
        self.generation += 1;
        Ok(())
    }

    /// Copies the entry of `from` into `to` on every GBN layer.
    pub fn clone_domain(&mut self, from: DomainId, to: DomainId) -> Result<()> {
        let p = self.param_set(from)?;
        self.set_param_set(to, &p)
    }

    pub fn has_domain(&self, domain: DomainId) -> bool {
        self.gbn.iter().all(|s| s.contains(domain))
    }

    fn run(
        &self,
        x: ArrayView2<'_, f64>,
        cond: Conditioning<'_>,
        mode: BnMode,
    ) -> Result<(ForwardPass, Vec<Option<(DomainId, Vec<f64>, Vec<f64>)>>)> {
        check_dim(self.input_dim(), x.ncols())?;
        let weights = match cond {
            Conditioning::Graph(d, g) => Some(g.mixing_weights(d)?),
            _ => None,
        };
        let n_hidden = self.gbn.len();
        let mut inputs = Vec::with_capacity(n_hidden + 1);
        let mut pre_norm = Vec::with_capacity(n_hidden);
        let mut post_norm = Vec::with_capacity(n_hidden);
        let mut caches = Vec::with_capacity(n_hidden);
        let mut batches = Vec::with_capacity(n_hidden);
        let mut a = x.to_owned();
        for (l, layer) in self.shared.layers.iter().enumerate() {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            inputs.push(a);
            if l == n_hidden {
                a = z;
                break;
            }
            let layer_cond = match cond {
                Conditioning::Plain(d) => LayerCond::Plain(d),
                Conditioning::Graph(d, _) => {
                    LayerCond::Graph(d, weights.as_deref().expect("computed above"))
                }
                Conditioning::Explicit(p) => {
                    let p = p.layers.get(l).ok_or(AdaGraphError::Dimension {
                        expected: n_hidden,
                        got: p.layers.len(),
                    })?;
                    LayerCond::Explicit(p)
                }
            };
            let out = self.gbn[l].normalize(z.view(), layer_cond, mode)?;
            pre_norm.push(z);
            a = out.y.mapv(|v| v.max(0.0));
            post_norm.push(out.y);
            caches.push(out.cache);
            batches.push(out.batch);
        }
        Ok((
            ForwardPass {
                probs: softmax(&a),
                inputs,
                pre_norm,
                post_norm,
                caches,
                generation: self.generation,
            },
            batches,
        ))
    }

    /// Forward pass with cached intermediates. Train mode updates the running
    /// statistics of the conditioned domain.
    pub fn forward_pass(
        &mut self,
        x: ArrayView2<'_, f64>,
        cond: Conditioning<'_>,
        mode: BnMode,
    ) -> Result<ForwardPass> {
        let (mut pass, batches) = self.run(x, cond, mode)?;
        if batches.iter().any(Option::is_some) {
            for (l, b) in batches.into_iter().enumerate() {
                if let Some((d, mu, var)) = b {
                    let m = self.gbn[l].momentum;
                    self.gbn[l].update_batch_stats(d, &mu, &var, m)?;
                }
            }
            self.generation += 1;
            pass.generation = self.generation;
        }
        Ok(pass)
    }

    /// Eval-mode forward with cached intermediates; never mutates.
    pub fn eval_pass(&self, x: ArrayView2<'_, f64>, cond: Conditioning<'_>) -> Result<ForwardPass> {
        Ok(self.run(x, cond, BnMode::Eval)?.0)
    }

    /// Class probabilities; graph-aware GBN layers when `graph` is given.
    pub fn forward(
        &mut self,
        x: ArrayView2<'_, f64>,
        domain: DomainId,
        graph: Option<&DomainGraph>,
        mode: BnMode,
    ) -> Result<Array2<f64>> {
        Ok(self
            .forward_pass(x, Conditioning::new(domain, graph), mode)?
            .probs)
    }

    /// Eval-mode class probabilities.
    pub fn predict(
        &self,
        x: ArrayView2<'_, f64>,
        domain: DomainId,
        graph: Option<&DomainGraph>,
    ) -> Result<Array2<f64>> {
        Ok(self.eval_pass(x, Conditioning::new(domain, graph))?.probs)
    }

    /// Eval-mode class probabilities with externally supplied GBN parameters.
    pub fn predict_with_params(&self, x: ArrayView2<'_, f64>, params: &ParamSet) -> Result<Array2<f64>> {
        check_dim(self.gbn.len(), params.layers.len())?;
        Ok(self.eval_pass(x, Conditioning::Explicit(params))?.probs)
    }

    /// Reverse-mode gradients of `scale * loss` for a cached forward pass.
    pub fn backward(&self, pass: &ForwardPass, loss: &Loss<'_>, scale: f64) -> Result<Gradients> {
        if pass.generation != self.generation {
            return Err(AdaGraphError::InvalidState(
                "forward pass is stale: parameters changed since it was computed".into(),
            ));
        }
        let n_hidden = self.gbn.len();
        let mut dz = loss_logit_grad(&pass.probs, loss, scale)?;
        let mut shared = Vec::with_capacity(n_hidden + 1);
        let mut scale_bias = vec![BTreeMap::new(); n_hidden];
        let mut input_grad = None;
        for l in (0..=n_hidden).rev() {
            let layer = &self.shared.layers[l];
            shared.push(DenseGrad {
                weight: dz.t().dot(&pass.inputs[l]),
                bias: dz.sum_axis(Axis(0)),
            });
            let da = dz.dot(&layer.weight);
            if l == 0 {
                input_grad = Some(da);
                break;
            }
            let h = l - 1;
            let mut dy = da;
            ndarray::Zip::from(&mut dy)
                .and(&pass.post_norm[h])
                .for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
            let cache = &pass.caches[h];
            let (dx, dgamma, dbeta) = gbn::backward(cache, dy.view());
            let layer_grads: &mut BTreeMap<DomainId, ScaleBiasGrad> = &mut scale_bias[h];
            for (d, w) in &cache.grad_targets {
                let e = layer_grads.entry(*d).or_insert_with(|| ScaleBiasGrad {
                    gamma: Array1::zeros(dgamma.len()),
                    beta: Array1::zeros(dbeta.len()),
                });
                e.gamma.scaled_add(*w, &dgamma);
                e.beta.scaled_add(*w, &dbeta);
            }
            dz = dx;
        }
        shared.reverse();
        Ok(Gradients {
            shared,
            scale_bias,
            input: input_grad.expect("loop reaches the first layer"),
        })
    }

    /// `p <- p - lr * g` for every parameter in `scope`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, scope: UpdateScope) -> Result<()> {
        check_dim(self.shared.layers.len(), grads.shared.len())?;
        check_dim(self.gbn.len(), grads.scale_bias.len())?;
        if scope.shared {
            for (layer, g) in self.shared.layers.iter_mut().zip(&grads.shared) {
                check_dim(layer.weight.len(), g.weight.len())?;
                check_dim(layer.bias.len(), g.bias.len())?;
                layer.weight.scaled_add(-lr, &g.weight);
                layer.bias.scaled_add(-lr, &g.bias);
            }
        }
        if scope.scale_bias {
            for (state, layer_grads) in self.gbn.iter_mut().zip(&grads.scale_bias) {
                for (d, g) in layer_grads {
                    let e = state.entry_mut(*d)?;
                    check_dim(e.gamma.len(), g.gamma.len())?;
                    for (p, dp) in e.gamma.iter_mut().zip(&g.gamma) {
                        *p -= lr * dp;
                    }
                    for (p, dp) in e.beta.iter_mut().zip(&g.beta) {
                        *p -= lr * dp;
                    }
                }
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn to_doc(&self) -> NetworkDoc {
        NetworkDoc {
            num_classes: self.num_classes,
            layers: self
                .shared
                .layers
                .iter()
                .map(|l| DenseDoc {
                    weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            gbn: self.gbn.clone(),
        }
    }

    pub fn from_doc(doc: NetworkDoc) -> Result<Self> {
        let mut layers = Vec::new();
        for l in doc.layers {
            let rows = l.weight.len();
            let cols = l.weight.first().map_or(0, Vec::len);
            let flat: Vec<f64> = l.weight.into_iter().flatten().collect();
            let weight = Array2::from_shape_vec((rows, cols), flat).map_err(|_| {
                AdaGraphError::InvalidState("ragged weight matrix in checkpoint".into())
            })?;
            check_dim(rows, l.bias.len())?;
            layers.push(DenseLayer {
                weight,
                bias: Array1::from(l.bias),
            });
        }
        Self::from_parts(SharedParams { layers }, doc.gbn, doc.num_classes)
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.shared == other.shared && self.gbn == other.gbn && self.num_classes == other.num_classes
    }
}

/// Serialized form of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub num_classes: usize,
    pub layers: Vec<DenseDoc>,
    pub gbn: Vec<GbnState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseDoc {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, scope: UpdateScope) -> Result<()> {
        if self.momentum == 0.0 {
            return net.sgd_step(grads, self.lr, scope);
        }
        let v = match self.velocity.take() {
            None => grads.clone(),
            Some(mut v) => {
                for (vl, gl) in v.shared.iter_mut().zip(&grads.shared) {
                    vl.weight *= self.momentum;
                    vl.weight += &gl.weight;
                    vl.bias *= self.momentum;
                    vl.bias += &gl.bias;
                }
                for (vl, gl) in v.scale_bias.iter_mut().zip(&grads.scale_bias) {
                    for g in vl.values_mut() {
                        g.gamma *= self.momentum;
                        g.beta *= self.momentum;
                    }
                    for (d, g) in gl {
                        match vl.get_mut(d) {
                            Some(e) => {
                                e.gamma += &g.gamma;
                                e.beta += &g.beta;
                            }
                            None => {
                                vl.insert(*d, g.clone());
                            }
                        }
                    }
                }
                v
            }
        };
        net.sgd_step(&v, self.lr, scope)?;
        self.velocity = Some(v);
        Ok(())
    }
}
