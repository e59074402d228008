//! Two-stage training: supervised source stage, then the graph-aware
//! multi-domain stage that estimates domain-specific GBN parameters.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain_graph::{DomainGraph, DomainId, NodeRole};
use crate::error::{AdaGraphError, Result};
use crate::gbn::BnMode;
use crate::network::{cross_entropy, entropy, stack, Conditioning, Loss, Network, Sample, Sgd, UpdateScope};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Heavy-ball momentum of the optimizer (0 = plain SGD).
    pub sgd_momentum: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Momentum of the running GBN statistics.
    pub gbn_momentum: f64,
    /// Also update the shared dense layers during the graph stage.
    pub update_shared_stage2: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 10,
            epochs_stage2: 1,
            lr_stage1: 0.1,
            lr_stage2: 0.01,
            sgd_momentum: 0.9,
            batch_size: 16,
            lambda: 1.0,
            gbn_momentum: 0.1,
            update_shared_stage2: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(AdaGraphError::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(AdaGraphError::Config("learning rates must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(AdaGraphError::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.gbn_momentum) {
            return Err(AdaGraphError::Config(format!(
                "gbn_momentum must lie in [0, 1], got {}",
                self.gbn_momentum
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(AdaGraphError::Config(format!(
                "sgd_momentum must lie in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        Ok(())
    }
}

/// Toggles distinguishing the ablation variants of the graph stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Mode {
    /// Optimize per-domain scale/bias; otherwise only statistics are estimated.
    pub train_scale_bias: bool,
    /// Blend scale/bias over the graph in the forward pass.
    pub graph_forward: bool,
}

impl Stage2Mode {
    pub const FULL: Self = Self {
        train_scale_bias: true,
        graph_forward: true,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledBatch {
    pub domain: DomainId,
    /// Indices into that domain's dataset.
    pub indices: Vec<usize>,
}

/// Single-domain batches in a randomized global order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DomainBatchSchedule {
    pub batches: Vec<ScheduledBatch>,
}

impl DomainBatchSchedule {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScheduledBatch> {
        self.batches.iter()
    }

    /// Same schedule without the batches of `domain`; relative order is kept.
    pub fn without(&self, domain: DomainId) -> Self {
        Self {
            batches: self
                .batches
                .iter()
                .filter(|b| b.domain != domain)
                .cloned()
                .collect(),
        }
    }

    pub fn extend(&mut self, other: DomainBatchSchedule) {
        self.batches.extend(other.batches);
    }
}

/// One epoch of single-domain batches for datasets of the given sizes.
///
/// Each domain is shuffled with its own random stream, so removing a domain
/// leaves the batches of the others unchanged. Trailing batches smaller than
/// two samples are dropped.
pub fn schedule_from_sizes(
    sizes: &BTreeMap<DomainId, usize>,
    batch_size: usize,
    seed: u64,
) -> Result<DomainBatchSchedule> {
    if batch_size < 2 {
        return Err(AdaGraphError::Config("batch_size must be at least 2".into()));
    }
    let mut batches = Vec::new();
    for (&domain, &n) in sizes {
        if n == 0 {
            return Err(AdaGraphError::EmptyDataset(Some(domain)));
        }
        let mut rng = seeds::rng(seed, &[u64::from(domain.0)]);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            if chunk.len() >= 2 {
                batches.push(ScheduledBatch {
                    domain,
                    indices: chunk.to_vec(),
                });
            }
        }
    }
    batches.shuffle(&mut seeds::rng(seed, &[seeds::TAG_ORDER]));
    Ok(DomainBatchSchedule { batches })
}

pub fn make_schedule(
    datasets: &BTreeMap<DomainId, Vec<Sample>>,
    batch_size: usize,
    seed: u64,
) -> Result<DomainBatchSchedule> {
    let sizes = datasets.iter().map(|(d, s)| (*d, s.len())).collect();
    schedule_from_sizes(&sizes, batch_size, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Ce,
    Ent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub domain: DomainId,
    pub term: LossTerm,
    pub loss: f64,
}

/// Per-step loss bookkeeping of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    fn push(&mut self, domain: DomainId, term: LossTerm, loss: f64) {
        let step = self.rows.len();
        self.rows.push(LogRow {
            step,
            domain,
            term,
            loss,
        });
    }

    /// CSV with header `step,domain,term,loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn labels_of(samples: &[Sample], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| samples[i].y.expect("validated")).collect()
}

fn set_gbn_momentum(net: &mut Network, momentum: f64) {
    for l in 0..net.gbn_layers().len() {
        net.gbn_mut(l).momentum = momentum;
    }
}

/// Supervised training of shared layers and the source GBN entries.
///
/// Returns the source domain's trained GBN parameters.
pub fn stage1_source(
    net: &mut Network,
    source: DomainId,
    data: &[Sample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<crate::domain_graph::ParamSet> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AdaGraphError::EmptyDataset(Some(source)));
    }
    for s in data {
        if s.domain != source {
            return Err(AdaGraphError::UnknownDomain(s.domain));
        }
        match s.y {
            None => return Err(AdaGraphError::Label("unlabeled source sample".into())),
            Some(y) if y >= net.num_classes() => {
                return Err(AdaGraphError::Label(format!("label {y} out of range")))
            }
            _ => {}
        }
    }
    if !net.has_domain(source) {
        return Err(AdaGraphError::UnknownDomain(source));
    }
    if cfg.epochs_stage1 == 0 {
        return net.param_set(source);
    }
    set_gbn_momentum(net, cfg.gbn_momentum);
    let mut opt = Sgd::new(cfg.lr_stage1, cfg.sgd_momentum);
    let sizes = BTreeMap::from([(source, data.len())]);
    for epoch in 0..cfg.epochs_stage1 {
        let seed = seeds::derive(cfg.seed, &[seeds::TAG_STAGE1, epoch as u64]);
        for batch in schedule_from_sizes(&sizes, cfg.batch_size, seed)?.iter() {
            let x = stack(data, &batch.indices);
            let labels = labels_of(data, &batch.indices);
            let pass = net.forward_pass(x.view(), Conditioning::Plain(source), BnMode::Train)?;
            log.push(source, LossTerm::Ce, cross_entropy(&pass.probs, &labels)?);
            let grads = net.backward(&pass, &Loss::CrossEntropy(&labels), 1.0)?;
            opt.step(net, &grads, UpdateScope::ALL)?;
        }
    }
    net.param_set(source)
}

/// Schedule used by [`stage2_graph`] over all of its epochs.
pub fn stage2_schedule(
    source: DomainId,
    source_len: usize,
    aux_sizes: impl Iterator<Item = (DomainId, usize)>,
    cfg: &TrainConfig,
) -> Result<DomainBatchSchedule> {
    let mut sizes: BTreeMap<DomainId, usize> = aux_sizes.collect();
    sizes.insert(source, source_len);
    let mut schedule = DomainBatchSchedule::default();
    for epoch in 0..cfg.epochs_stage2 {
        let seed = seeds::derive(cfg.seed, &[seeds::TAG_STAGE2, epoch as u64]);
        schedule.extend(schedule_from_sizes(&sizes, cfg.batch_size, seed)?);
    }
    Ok(schedule)
}

/// Graph-aware multi-domain stage.
///
/// Source batches contribute cross-entropy, auxiliary batches the
/// lambda-weighted entropy. Statistics are estimated per domain; scale and
/// bias are optimized through the graph-blended forward when
/// `mode.graph_forward` is set. On return every known node of `graph` holds
/// its parameter set.
pub fn stage2_graph(
    net: &mut Network,
    graph: &mut DomainGraph,
    source: DomainId,
    source_data: &[Sample],
    aux_data: &BTreeMap<DomainId, Vec<Sample>>,
    cfg: &TrainConfig,
    mode: Stage2Mode,
    log: &mut TrainLog,
) -> Result<()> {
    let schedule = stage2_schedule(
        source,
        source_data.len(),
        aux_data.iter().map(|(d, s)| (*d, s.len())),
        cfg,
    )?;
    stage2_with_schedule(net, graph, source, source_data, aux_data, cfg, mode, &schedule, log)
}

/// [`stage2_graph`] driven by an explicit batch schedule.
#[allow(clippy::too_many_arguments)]
pub fn stage2_with_schedule(
    net: &mut Network,
    graph: &mut DomainGraph,
    source: DomainId,
    source_data: &[Sample],
    aux_data: &BTreeMap<DomainId, Vec<Sample>>,
    cfg: &TrainConfig,
    mode: Stage2Mode,
    schedule: &DomainBatchSchedule,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if source_data.is_empty() {
        return Err(AdaGraphError::EmptyDataset(Some(source)));
    }
    if source_data.iter().any(|s| s.y.is_none()) {
        return Err(AdaGraphError::Label("unlabeled source sample".into()));
    }
    if graph.source() != Some(source) {
        return Err(AdaGraphError::NodeSetMismatch(format!(
            "graph source is {:?}, expected {source}",
            graph.source()
        )));
    }
    let mut expected: Vec<DomainId> = aux_data.keys().copied().collect();
    expected.push(source);
    expected.sort();
    if graph.known_ids() != expected {
        return Err(AdaGraphError::NodeSetMismatch(
            "known graph nodes differ from the domains with data".into(),
        ));
    }
    for (&d, samples) in aux_data {
        if graph.node(d)?.role != NodeRole::Auxiliary {
            return Err(AdaGraphError::NodeSetMismatch(format!("{d} is not auxiliary")));
        }
        if samples.len() < 2 {
            return Err(AdaGraphError::InsufficientBatch {
                got: samples.len(),
                need: 2,
            });
        }
    }
    if !net.has_domain(source) {
        return Err(AdaGraphError::UnknownDomain(source));
    }

    // Warm start: every auxiliary entry begins as a copy of the source entry.
    for &d in aux_data.keys() {
        if !net.has_domain(d) {
            net.clone_domain(source, d)?;
        }
    }
    set_gbn_momentum(net, cfg.gbn_momentum);

    let scope = UpdateScope {
        shared: cfg.update_shared_stage2,
        scale_bias: mode.train_scale_bias,
    };
    let learns = scope.shared || scope.scale_bias;
    let mut opt = Sgd::new(cfg.lr_stage2, cfg.sgd_momentum);
    for batch in schedule.iter() {
        let d = batch.domain;
        let samples: &[Sample] = if d == source {
            source_data
        } else {
            aux_data.get(&d).ok_or(AdaGraphError::UnknownDomain(d))?
        };
        let x = stack(samples, &batch.indices);
        let cond = if mode.graph_forward {
            Conditioning::Graph(d, graph)
        } else {
            Conditioning::Plain(d)
        };
        let pass = net.forward_pass(x.view(), cond, BnMode::Train)?;
        let grads = if d == source {
            let labels = labels_of(samples, &batch.indices);
            log.push(d, LossTerm::Ce, cross_entropy(&pass.probs, &labels)?);
            if !learns {
                continue;
            }
            net.backward(&pass, &Loss::CrossEntropy(&labels), 1.0)?
        } else {
            // Auxiliary labels, if any, are never read.
            log.push(d, LossTerm::Ent, entropy(&pass.probs));
            if !learns || cfg.lambda == 0.0 {
                continue;
            }
            net.backward(&pass, &Loss::Entropy, cfg.lambda)?
        };
        opt.step(net, &grads, scope)?;
    }

    for id in expected {
        graph.assign_params(id, net.param_set(id)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain_graph::{KernelConfig, Metadata};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(domain: DomainId, n: usize, seed: u64, shift: f64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        (0..n)
            .map(|i| {
                let y = i % 2;
                let c = if y == 0 { -2.0 } else { 2.0 };
                Sample::labeled(
                    vec![c + shift + noise.sample(&mut rng), shift + noise.sample(&mut rng)],
                    y,
                    domain,
                )
            })
            .collect()
    }

    fn fresh(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(2, &[16, 16], 2, DomainId(0), 1e-5, 0.1, &mut rng).unwrap()
    }

    fn accuracy(net: &Network, data: &[Sample], d: DomainId) -> f64 {
        let x = crate::network::stack_all(data);
        let p = net.predict(x.view(), d, None).unwrap();
        let hits = p
            .rows()
            .into_iter()
            .zip(data)
            .filter(|(r, s)| {
                let arg = if r[0] >= r[1] { 0 } else { 1 };
                Some(arg) == s.y
            })
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn schedule_examples() {
        let d = |i| DomainId(i);
        let one = BTreeMap::from([(d(0), 32usize)]);
        assert_eq!(schedule_from_sizes(&one, 16, 0).unwrap().len(), 2);

        let two = BTreeMap::from([(d(0), 40usize), (d(1), 33)]);
        let s = schedule_from_sizes(&two, 16, 5).unwrap();
        // 40 -> 16,16,8 ; 33 -> 16,16,1 (dropped)
        assert_eq!(s.len(), 5);
        assert_eq!(s, schedule_from_sizes(&two, 16, 5).unwrap());
        let mut seen: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
        for b in s.iter() {
            seen.entry(b.domain).or_default().extend(&b.indices);
        }
        let mut zero = seen[&d(0)].clone();
        zero.sort();
        assert_eq!(zero, (0..40).collect::<Vec<_>>());
        assert_eq!(seen[&d(1)].len(), 32);

        let empty = BTreeMap::from([(d(0), 0usize)]);
        assert!(matches!(
            schedule_from_sizes(&empty, 16, 0),
            Err(AdaGraphError::EmptyDataset(_))
        ));
    }

    #[test]
    fn stage1_learns_separable_blobs_in_one_epoch() {
        let data = blobs(DomainId(0), 200, 1, 0.0);
        let mut net = fresh(1);
        let cfg = TrainConfig {
            epochs_stage1: 1,
            ..TrainConfig::default()
        };
        let mut log = TrainLog::default();
        stage1_source(&mut net, DomainId(0), &data, &cfg, &mut log).unwrap();
        assert!(accuracy(&net, &data, DomainId(0)) >= 0.95);
        assert!(log.rows.iter().all(|r| r.term == LossTerm::Ce));
    }

    #[test]
    fn stage1_contracts() {
        let mut net = fresh(2);
        let before = net.clone();
        let data = blobs(DomainId(0), 20, 2, 0.0);
        let cfg = TrainConfig {
            epochs_stage1: 0,
            ..TrainConfig::default()
        };
        stage1_source(&mut net, DomainId(0), &data, &cfg, &mut TrainLog::default()).unwrap();
        assert_eq!(net, before);
        assert!(matches!(
            stage1_source(&mut net, DomainId(0), &[], &cfg, &mut TrainLog::default()),
            Err(AdaGraphError::EmptyDataset(_))
        ));
        let mut unlabeled = data.clone();
        unlabeled[3].y = None;
        assert!(matches!(
            stage1_source(&mut net, DomainId(0), &unlabeled, &cfg, &mut TrainLog::default()),
            Err(AdaGraphError::Label(_))
        ));
    }

    fn two_domain_graph() -> DomainGraph {
        let mut g = DomainGraph::new(1, KernelConfig::default()).unwrap();
        g.add_node(DomainId(0), Metadata::new(vec![0.0]).unwrap(), NodeRole::Source)
            .unwrap();
        g.add_node(DomainId(1), Metadata::new(vec![0.5]).unwrap(), NodeRole::Auxiliary)
            .unwrap();
        g
    }

    #[test]
    fn zero_lambda_leaves_auxiliary_scale_bias() {
        let src = blobs(DomainId(0), 64, 3, 0.0);
        let aux = BTreeMap::from([(DomainId(1), blobs(DomainId(1), 64, 4, 1.0))]);
        let mut net = fresh(3);
        let cfg = TrainConfig {
            epochs_stage1: 2,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        stage1_source(&mut net, DomainId(0), &src, &cfg, &mut TrainLog::default()).unwrap();
        let source_entry = net.param_set(DomainId(0)).unwrap();
        let mut g = two_domain_graph();
        let mode = Stage2Mode {
            train_scale_bias: true,
            graph_forward: false,
        };
        let mut log = TrainLog::default();
        stage2_graph(&mut net, &mut g, DomainId(0), &src, &aux, &cfg, mode, &mut log).unwrap();
        let a = g.node(DomainId(1)).unwrap().params.clone().unwrap();
        for (l, s) in a.layers.iter().zip(&source_entry.layers) {
            assert_eq!(l.gamma, s.gamma);
            assert_eq!(l.beta, s.beta);
            assert_ne!(l.mu, s.mu);
        }
        // bookkeeping: ce only on source, ent only on the auxiliary domain
        for r in &log.rows {
            assert_eq!(r.term == LossTerm::Ce, r.domain == DomainId(0));
        }
    }

    #[test]
    fn stage2_rejects_unknown_domains() {
        let src = blobs(DomainId(0), 32, 3, 0.0);
        let aux = BTreeMap::from([(DomainId(7), blobs(DomainId(7), 32, 4, 1.0))]);
        let mut net = fresh(3);
        let mut g = two_domain_graph();
        let err = stage2_graph(
            &mut net,
            &mut g,
            DomainId(0),
            &src,
            &aux,
            &TrainConfig::default(),
            Stage2Mode::FULL,
            &mut TrainLog::default(),
        );
        assert!(matches!(err, Err(AdaGraphError::NodeSetMismatch(_))));
    }
}
