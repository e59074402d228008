//! Continuous test-time refinement of a target domain's GBN entries.
//!
//! Samples are classified one at a time and then appended to a fixed-size
//! buffer. Whenever the buffer fills up, the target statistics move towards
//! the buffer statistics (Bessel-corrected variance), scale and bias take one
//! entropy-descent step on the buffer, and the buffer is cleared.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::domain_graph::DomainId;
use crate::error::{check_dim, AdaGraphError, Result};
use crate::gbn::batch_stats;
use crate::network::{entropy, Conditioning, Loss, Network, UpdateScope};

pub const DEFAULT_CAPACITY: usize = 16;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_REFINE_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementBuffer {
    capacity: usize,
    samples: Vec<Vec<f64>>,
    pub alpha: f64,
    pub refine_lr: f64,
}

impl RefinementBuffer {
    pub fn new(capacity: usize, alpha: f64, refine_lr: f64) -> Result<Self> {
        if capacity < 2 {
            return Err(AdaGraphError::Config(format!(
                "buffer capacity must be at least 2, got {capacity}"
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AdaGraphError::Config(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        if !(refine_lr >= 0.0) {
            return Err(AdaGraphError::Config(format!(
                "refinement learning rate must be nonnegative, got {refine_lr}"
            )));
        }
        Ok(Self {
            capacity,
            samples: Vec::with_capacity(capacity),
            alpha,
            refine_lr,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    /// Appends a sample; a full buffer rejects further samples.
    pub fn push(&mut self, x: Vec<f64>) -> Result<()> {
        if self.is_full() {
            return Err(AdaGraphError::InvalidState("refinement buffer is full".into()));
        }
        self.samples.push(x);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    fn ready(&self) -> Result<()> {
        if self.is_full() {
            Ok(())
        } else {
            Err(AdaGraphError::BufferNotReady {
                len: self.samples.len(),
                capacity: self.capacity,
            })
        }
    }

    pub fn matrix(&self) -> Array2<f64> {
        let dim = self.samples.first().map_or(0, Vec::len);
        let mut m = Array2::zeros((self.samples.len(), dim));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.samples) {
            row.assign(&ArrayView1::from(s));
        }
        m
    }
}

fn require_target(net: &Network, target: DomainId) -> Result<()> {
    if net.has_domain(target) {
        Ok(())
    } else {
        Err(AdaGraphError::InvalidState(format!(
            "target {target} has no instantiated parameters"
        )))
    }
}

/// Mean and biased variance of every GBN layer's input over the buffer,
/// from one eval forward with the current target parameters.
pub fn buffer_stats(buf: &RefinementBuffer, net: &Network, target: DomainId) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    buf.ready()?;
    require_target(net, target)?;
    let pass = net.eval_pass(buf.matrix().view(), Conditioning::Plain(target))?;
    (0..net.gbn_layers().len())
        .map(|l| batch_stats(pass.pre_norm(l).view()))
        .collect()
}

/// Single-layer view of [`buffer_stats`].
pub fn buffer_layer_stats(
    buf: &RefinementBuffer,
    net: &Network,
    target: DomainId,
    layer: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut all = buffer_stats(buf, net, target)?;
    if layer >= all.len() {
        return Err(AdaGraphError::Dimension {
            expected: all.len(),
            got: layer,
        });
    }
    Ok(all.swap_remove(layer))
}

/// `mu <- (1 - a) mu + a mu_M`, `var <- (1 - a) var + a |M|/(|M|-1) var_M`.
pub fn blend_stats(
    mu: &mut [f64],
    var: &mut [f64],
    mu_m: &[f64],
    var_m: &[f64],
    alpha: f64,
    buffer_len: usize,
) -> Result<()> {
    check_dim(mu.len(), mu_m.len())?;
    check_dim(var.len(), var_m.len())?;
    if buffer_len < 2 {
        return Err(AdaGraphError::InsufficientBatch {
            got: buffer_len,
            need: 2,
        });
    }
    let bessel = buffer_len as f64 / (buffer_len as f64 - 1.0);
    for c in 0..mu.len() {
        mu[c] = (1.0 - alpha) * mu[c] + alpha * mu_m[c];
        var[c] = ((1.0 - alpha) * var[c] + alpha * bessel * var_m[c]).max(0.0);
    }
    Ok(())
}

/// Moves every GBN layer's target statistics towards the buffer statistics.
pub fn update_target_stats(net: &mut Network, target: DomainId, buf: &RefinementBuffer) -> Result<()> {
    let stats = buffer_stats(buf, net, target)?;
    for (l, (mu_m, var_m)) in stats.iter().enumerate() {
        let e = net.gbn_mut(l).entry_mut(target)?;
        blend_stats(&mut e.mu, &mut e.var, mu_m, var_m, buf.alpha, buf.len())?;
    }
    Ok(())
}

/// One gradient step of the buffer's mean prediction entropy with respect to
/// the target's scale and bias only. Returns the entropy before the step.
pub fn refine_scale_bias(net: &mut Network, target: DomainId, buf: &RefinementBuffer, lr: f64) -> Result<f64> {
    buf.ready()?;
    require_target(net, target)?;
    let pass = net.eval_pass(buf.matrix().view(), Conditioning::Plain(target))?;
    let before = entropy(&pass.probs);
    let grads = net.backward(&pass, &Loss::Entropy, 1.0)?;
    net.sgd_step(&grads, lr, UpdateScope::SCALE_BIAS)?;
    Ok(before)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// No updates; the plain frozen model.
    Frozen,
    /// Statistics updates only.
    Stats,
    /// Statistics updates followed by the entropy step on scale/bias.
    Full,
}

/// Prequential stream processor holding one target-instantiated network.
#[derive(Debug, Clone)]
pub struct RefinementEngine {
    net: Network,
    target: DomainId,
    buffer: RefinementBuffer,
    mode: RefineMode,
    stats_updates: usize,
    scale_bias_steps: usize,
}

impl RefinementEngine {
    pub fn new(net: Network, target: DomainId, buffer: RefinementBuffer, mode: RefineMode) -> Result<Self> {
        require_target(&net, target)?;
        Ok(Self {
            net,
            target,
            buffer,
            mode,
            stats_updates: 0,
            scale_bias_steps: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn buffer(&self) -> &RefinementBuffer {
        &self.buffer
    }

    pub fn stats_updates(&self) -> usize {
        self.stats_updates
    }

    pub fn scale_bias_steps(&self) -> usize {
        self.scale_bias_steps
    }

    /// Class probabilities for `x` with the current parameters.
    pub fn classify(&self, x: &[f64]) -> Result<ndarray::Array1<f64>> {
        let row = ArrayView1::from(x).insert_axis(ndarray::Axis(0));
        let p = self.net.predict(row, self.target, None)?;
        Ok(p.row(0).to_owned())
    }

    /// Classifies `x` first, then buffers it and refines if the buffer filled.
    /// The returned class never depends on `x` itself or later samples.
    pub fn step(&mut self, x: &[f64]) -> Result<usize> {
        let p = self.classify(x)?;
        let pred = argmax(p.view());
        if self.mode == RefineMode::Frozen {
            return Ok(pred);
        }
        self.buffer.push(x.to_vec())?;
        if self.buffer.is_full() {
            update_target_stats(&mut self.net, self.target, &self.buffer)?;
            self.stats_updates += 1;
            if self.mode == RefineMode::Full {
                let lr = self.buffer.refine_lr;
                refine_scale_bias(&mut self.net, self.target, &self.buffer, lr)?;
                self.scale_bias_steps += 1;
            }
            self.buffer.clear();
        }
        Ok(pred)
    }
}

pub fn argmax(p: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_stats_examples() {
        let (mut mu, mut var) = (vec![0.3], vec![0.7]);
        blend_stats(&mut mu, &mut var, &[0.3], &[0.7], 1.0, 16).unwrap();
        assert_eq!(mu[0], 0.3);
        assert!((var[0] - 0.7 * 16.0 / 15.0).abs() < 1e-15);

        let (mut mu, mut var) = (vec![0.0], vec![1.0]);
        for k in 1..=20 {
            blend_stats(&mut mu, &mut var, &[1.0], &[0.0], 0.1, 16).unwrap();
            assert!((mu[0] - (1.0 - 0.9_f64.powi(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn buffer_contract() {
        let mut b = RefinementBuffer::new(2, 0.1, 1e-3).unwrap();
        assert!(RefinementBuffer::new(1, 0.1, 1e-3).is_err());
        assert!(RefinementBuffer::new(4, 0.0, 1e-3).is_err());
        b.push(vec![1.0]).unwrap();
        assert!(matches!(b.ready(), Err(AdaGraphError::BufferNotReady { len: 1, capacity: 2 })));
        b.push(vec![2.0]).unwrap();
        assert!(b.push(vec![3.0]).is_err());
        b.clear();
        assert!(b.is_empty());
    }
}
