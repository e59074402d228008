//! Leave-one-out predictive adaptation: train on a source and auxiliary
//! domains, regress a target model from its metadata alone, evaluate on the
//! target.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::family::{generate_family, DomainFamilySpec, Family};
use super::{accuracy, state_hash, ProtocolConfig, ResultRow, Stopwatch, VariantId};
use crate::checkpoint::Checkpoint;
use crate::domain_graph::{DomainGraph, DomainId, NodeRole};
use crate::error::{AdaGraphError, Result};
use crate::network::{stack_all, Network, Sample};
use crate::prediction::{predict_from_metadata, train_metadata_classifier};
use crate::refinement::{RefineMode, RefinementEngine};
use crate::seeds;
use crate::training::{stage1_source, stage2_graph, Stage2Mode, TrainLog};

#[derive(Debug, Clone, PartialEq)]
pub struct PdaRun {
    pub row: ResultRow,
    /// Hash of every trained parameter before the target is seen.
    pub state_hash: String,
}

/// A family with a trained source model; shared by all targets of a source.
#[derive(Debug, Clone)]
pub struct PdaContext<'a> {
    family: &'a Family,
    cfg: ProtocolConfig,
    source: DomainId,
    source_net: Network,
    stage1_secs: f64,
}

struct GraphModel {
    net: Network,
    graph: DomainGraph,
    hash: String,
    secs: f64,
}

fn stage2_mode(variant: VariantId) -> Stage2Mode {
    match variant {
        VariantId::AdaGraphBN => Stage2Mode {
            train_scale_bias: false,
            graph_forward: false,
        },
        VariantId::AdaGraphSB => Stage2Mode {
            train_scale_bias: true,
            graph_forward: false,
        },
        _ => Stage2Mode::FULL,
    }
}

impl<'a> PdaContext<'a> {
    /// Runs the supervised source stage.
    pub fn new(family: &'a Family, source: DomainId, cfg: &ProtocolConfig) -> Result<Self> {
        cfg.validate()?;
        let watch = Stopwatch::start(cfg.record_wall_time);
        let data = &family.domain(source)?.samples;
        let mut rng = seeds::rng(cfg.train.seed, &[seeds::TAG_INIT]);
        let mut net = Network::new(
            data[0].x.len(),
            &cfg.hidden,
            family.num_classes(),
            source,
            cfg.epsilon,
            cfg.train.gbn_momentum,
            &mut rng,
        )?;
        stage1_source(&mut net, source, data, &cfg.train, &mut TrainLog::default())?;
        Ok(Self {
            family,
            cfg: cfg.clone(),
            source,
            source_net: net,
            stage1_secs: watch.secs(),
        })
    }

    pub fn source(&self) -> DomainId {
        self.source
    }

    pub fn source_net(&self) -> &Network {
        &self.source_net
    }

    pub fn family(&self) -> &Family {
        self.family
    }

    /// Graph stage over the source and `aux` with the given toggles.
    pub fn train_graph(&self, aux: &[DomainId], mode: Stage2Mode) -> Result<(Network, DomainGraph)> {
        let m = self.graph_model(aux, mode)?;
        Ok((m.net, m.graph))
    }

    fn graph_model(&self, aux: &[DomainId], mode: Stage2Mode) -> Result<GraphModel> {
        let watch = Stopwatch::start(self.cfg.record_wall_time);
        let spec = &self.family.spec;
        let mut graph = DomainGraph::new(spec.metadata_dim(), self.cfg.kernel)?;
        graph.add_node(self.source, self.family.domain(self.source)?.metadata.clone(), NodeRole::Source)?;
        let mut aux_data: BTreeMap<DomainId, Vec<Sample>> = BTreeMap::new();
        for &d in aux {
            if d == self.source {
                return Err(AdaGraphError::Config(format!("{d} is the source")));
            }
            let dom = self.family.domain(d)?;
            graph.add_node(d, dom.metadata.clone(), NodeRole::Auxiliary)?;
            aux_data.insert(d, dom.samples.clone());
        }
        let mut net = self.source_net.clone();
        stage2_graph(
            &mut net,
            &mut graph,
            self.source,
            &self.family.domain(self.source)?.samples,
            &aux_data,
            &self.cfg.train,
            mode,
            &mut TrainLog::default(),
        )?;
        let hash = state_hash(&net, Some(&graph))?;
        Ok(GraphModel {
            net,
            graph,
            hash,
            secs: watch.secs(),
        })
    }

    /// Every domain except the source and `target`.
    pub fn default_aux(&self, target: DomainId) -> Vec<DomainId> {
        self.family.ids().filter(|&d| d != self.source && d != target).collect()
    }

    /// Graph model trained without the target, plus a domain classifier
    /// over the same domains, for checkpointing.
    pub fn checkpoint(&self, target: DomainId) -> Result<Checkpoint> {
        let aux = self.default_aux(target);
        let (net, graph) = self.train_graph(&aux, Stage2Mode::FULL)?;
        let mut data = BTreeMap::new();
        for d in std::iter::once(self.source).chain(aux) {
            data.insert(d, self.family.domain(d)?.samples.clone());
        }
        let classifier = train_metadata_classifier(&data, &self.cfg.hidden, &self.cfg.train)?;
        Ok(Checkpoint::new(self.source, &graph, &net).with_classifier(&classifier))
    }

    pub fn run(&self, target: DomainId, variants: &[VariantId]) -> Result<Vec<PdaRun>> {
        self.run_with_aux(target, &self.default_aux(target), variants)
    }

    /// Evaluates `variants` on `target` with an explicit auxiliary set.
    /// Variants sharing a graph stage reuse one trained model.
    pub fn run_with_aux(&self, target: DomainId, aux: &[DomainId], variants: &[VariantId]) -> Result<Vec<PdaRun>> {
        if target == self.source {
            return Err(AdaGraphError::Config("source and target must differ".into()));
        }
        if aux.contains(&target) {
            return Err(AdaGraphError::Config(format!("target {target} listed as auxiliary")));
        }
        let target_dom = self.family.domain(target)?;
        let x = stack_all(&target_dom.samples);
        let mut cache: BTreeMap<(bool, bool, bool), GraphModel> = BTreeMap::new();
        let mut out = Vec::with_capacity(variants.len());
        for &variant in variants {
            let watch = Stopwatch::start(self.cfg.record_wall_time);
            let mut secs = self.stage1_secs;
            let (acc, hash) = match variant {
                VariantId::Baseline | VariantId::BaselineRefine => {
                    let hash = state_hash(&self.source_net, None)?;
                    let acc = if variant == VariantId::Baseline {
                        accuracy(&self.source_net.predict(x.view(), self.source, None)?, &target_dom.samples)?
                    } else {
                        let mut net = self.source_net.clone();
                        net.clone_domain(self.source, target)?;
                        self.prequential(net, target, &target_dom.samples)?
                    };
                    (acc, hash)
                }
                _ => {
                    let mode = stage2_mode(variant);
                    let upper = variant == VariantId::DAUpperBound;
                    let key = (mode.train_scale_bias, mode.graph_forward, upper);
                    if !cache.contains_key(&key) {
                        let mut ids = aux.to_vec();
                        if upper {
                            ids.push(target);
                            ids.sort();
                        }
                        cache.insert(key, self.graph_model(&ids, mode)?);
                    }
                    let m = &cache[&key];
                    secs += m.secs;
                    let acc = if upper {
                        accuracy(&m.net.predict(x.view(), target, Some(&m.graph))?, &target_dom.samples)?
                    } else {
                        let model = predict_from_metadata(&m.graph, &m.net, target_dom.metadata.clone())?;
                        if variant.refines() {
                            self.prequential(model.net, model.target, &target_dom.samples)?
                        } else {
                            accuracy(&model.predict(x.view())?, &target_dom.samples)?
                        }
                    };
                    (acc, m.hash.clone())
                }
            };
            out.push(PdaRun {
                row: ResultRow {
                    source: self.source,
                    target,
                    variant,
                    seed: self.cfg.train.seed,
                    accuracy: acc,
                    wall_time_s: if self.cfg.record_wall_time { secs + watch.secs() } else { 0.0 },
                },
                state_hash: hash,
            });
        }
        Ok(out)
    }

    /// Prequential accuracy of a refining model over the target samples in
    /// a seeded arrival order.
    fn prequential(&self, net: Network, target_entry: DomainId, samples: &[Sample]) -> Result<f64> {
        let mut engine = RefinementEngine::new(net, target_entry, self.cfg.buffer()?, RefineMode::Full)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeds::rng(self.cfg.train.seed, &[seeds::TAG_STREAM]));
        let mut hits = 0usize;
        for &i in &order {
            if Some(engine.step(&samples[i].x)?) == samples[i].y {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }
}

/// One protocol run on a freshly generated family. The family's seed and the
/// training seed are both `cfg.train.seed`.
pub fn run_pda(
    spec: &DomainFamilySpec,
    variant: VariantId,
    source: DomainId,
    target: DomainId,
    cfg: &ProtocolConfig,
) -> Result<PdaRun> {
    let spec = DomainFamilySpec {
        seed: cfg.train.seed,
        ..spec.clone()
    };
    let family = generate_family(&spec, cfg.train.batch_size)?;
    let ctx = PdaContext::new(&family, source, cfg)?;
    Ok(ctx.run(target, &[variant])?.remove(0))
}

/// Ordered `(source, target)` pairs at least `min_angle` degrees apart,
/// optionally restricted to one source.
pub fn leave_one_out_pairs(
    family: &Family,
    min_angle: f64,
    source: Option<DomainId>,
) -> Result<Vec<(DomainId, DomainId)>> {
    let mut pairs = Vec::new();
    for s in family.ids() {
        if source.is_some_and(|f| f != s) {
            continue;
        }
        for t in family.ids() {
            // Tolerate rounding in angles recovered from metadata.
            if s != t && family.angular_distance(s, t)? >= min_angle - 1e-9 {
                pairs.push((s, t));
            }
        }
    }
    Ok(pairs)
}

/// Runs every `(pair, seed)` for `variants`, in parallel. Rows come back
/// ordered by seed, then pair, then variant.
pub fn run_pda_grid(
    spec: &DomainFamilySpec,
    cfg: &ProtocolConfig,
    variants: &[VariantId],
    pairs: &[(DomainId, DomainId)],
    seed_list: &[u64],
) -> Result<Vec<PdaRun>> {
    let families: Vec<Family> = seed_list
        .iter()
        .map(|&seed| generate_family(&DomainFamilySpec { seed, ..spec.clone() }, cfg.train.batch_size))
        .collect::<Result<_>>()?;
    let mut sources: Vec<DomainId> = pairs.iter().map(|p| p.0).collect();
    sources.sort();
    sources.dedup();
    let jobs: Vec<(usize, DomainId)> = (0..seed_list.len())
        .flat_map(|i| sources.iter().map(move |&s| (i, s)))
        .collect();
    let contexts: Vec<PdaContext<'_>> = jobs
        .par_iter()
        .map(|&(i, s)| PdaContext::new(&families[i], s, &cfg.with_seed(seed_list[i])))
        .collect::<Result<_>>()?;
    let ctx_of = |i: usize, s: DomainId| {
        let k = sources.binary_search(&s).expect("source listed");
        &contexts[i * sources.len() + k]
    };
    let runs: Vec<(usize, DomainId, DomainId)> = (0..seed_list.len())
        .flat_map(|i| pairs.iter().map(move |&(s, t)| (i, s, t)))
        .collect();
    let nested: Vec<Vec<PdaRun>> = runs
        .par_iter()
        .map(|&(i, s, t)| ctx_of(i, s).run(t, variants))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
