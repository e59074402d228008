//! Target-model synthesis at test time.
//!
//! With target metadata, a virtual node is attached to the graph and its
//! parameters are regressed from the known nodes; inference then runs the
//! graph-aware forward. Without metadata, a domain classifier gives
//! `p(v | x)` and the parameters are the `p`-weighted mixture of the known
//! nodes' parameters, used with the plain forward.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::domain_graph::{mix_param_sets, DomainGraph, DomainId, Metadata, ParamSet};
use crate::error::{AdaGraphError, Result};
use crate::network::{Network, Sample};
use crate::training::{stage1_source, TrainConfig, TrainLog};

/// A network specialized to a virtual target node.
#[derive(Debug, Clone)]
pub struct TargetModel {
    pub net: Network,
    pub graph: DomainGraph,
    pub target: DomainId,
}

impl TargetModel {
    /// Eval-mode class probabilities through the graph-aware forward.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.net.predict(x, self.target, Some(&self.graph))
    }

    pub fn params(&self) -> Result<ParamSet> {
        self.net.param_set(self.target)
    }
}

/// Adds a virtual node with metadata `m_t` (first free id), regresses its
/// parameters from the graph and installs them in a copy of `net`.
pub fn predict_from_metadata(graph: &DomainGraph, net: &Network, m_t: Metadata) -> Result<TargetModel> {
    let mut graph = graph.clone();
    let target = graph.next_free_id();
    graph.add_virtual_node(target, m_t)?;
    let params = graph.propagate_params(target)?;
    let mut net = net.clone();
    net.set_param_set(target, &params)?;
    Ok(TargetModel { net, graph, target })
}

/// `p(v | x)` over known domains.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDistribution {
    pub weights: BTreeMap<DomainId, f64>,
}

impl MixtureDistribution {
    pub fn one_hot(domain: DomainId) -> Self {
        Self {
            weights: BTreeMap::from([(domain, 1.0)]),
        }
    }
}

/// Classifier from input to known-domain index.
#[derive(Debug, Clone)]
pub struct MetadataClassifier {
    net: Network,
    /// Class index -> domain.
    classes: Vec<DomainId>,
}

/// The single GBN entry used inside a metadata classifier.
const CLASSIFIER_DOMAIN: DomainId = DomainId(0);

/// Serialized form of a [`MetadataClassifier`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassifierDoc {
    pub classes: Vec<DomainId>,
    pub network: crate::network::NetworkDoc,
}

impl MetadataClassifier {
    pub fn to_doc(&self) -> ClassifierDoc {
        ClassifierDoc {
            classes: self.classes.clone(),
            network: self.net.to_doc(),
        }
    }

    pub fn from_doc(doc: ClassifierDoc) -> Result<Self> {
        let net = Network::from_doc(doc.network)?;
        crate::error::check_dim(doc.classes.len(), net.num_classes())?;
        if !net.has_domain(CLASSIFIER_DOMAIN) {
            return Err(AdaGraphError::UnknownDomain(CLASSIFIER_DOMAIN));
        }
        Ok(Self {
            net,
            classes: doc.classes,
        })
    }

    pub fn classes(&self) -> &[DomainId] {
        &self.classes
    }

    pub fn probabilities(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.net.predict(x, CLASSIFIER_DOMAIN, None)
    }

    pub fn mixture(&self, x: ArrayView1<'_, f64>) -> Result<MixtureDistribution> {
        let row = x.insert_axis(ndarray::Axis(0));
        let p = self.probabilities(row)?;
        Ok(MixtureDistribution {
            weights: self.classes.iter().copied().zip(p.row(0).iter().copied()).collect(),
        })
    }
}

/// Trains a domain classifier on the pooled data; the class of a sample is
/// the index of its domain.
pub fn train_metadata_classifier(
    data: &BTreeMap<DomainId, Vec<Sample>>,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<MetadataClassifier> {
    if data.len() < 2 {
        return Err(AdaGraphError::DegenerateTask(format!(
            "need at least two domains, got {}",
            data.len()
        )));
    }
    let classes: Vec<DomainId> = data.keys().copied().collect();
    let mut pooled = Vec::new();
    for (class, samples) in data.values().enumerate() {
        if samples.is_empty() {
            return Err(AdaGraphError::EmptyDataset(Some(classes[class])));
        }
        pooled.extend(samples.iter().map(|s| Sample::labeled(s.x.clone(), class, CLASSIFIER_DOMAIN)));
    }
    let input_dim = pooled[0].x.len();
    let mut rng = crate::seeds::rng(cfg.seed, &[crate::seeds::TAG_META]);
    let mut net = Network::new(
        input_dim,
        hidden,
        classes.len(),
        CLASSIFIER_DOMAIN,
        crate::gbn::DEFAULT_EPSILON,
        cfg.gbn_momentum,
        &mut rng,
    )?;
    // Pooled batches mix domains, so batch statistics do not erase them.
    stage1_source(&mut net, CLASSIFIER_DOMAIN, &pooled, cfg, &mut TrainLog::default())?;
    Ok(MetadataClassifier { net, classes })
}

/// `sum_v p(v) psi(v)` over the mixture's support.
pub fn synthesize_params(graph: &DomainGraph, mixture: &MixtureDistribution) -> Result<ParamSet> {
    let mut weights = Vec::with_capacity(mixture.weights.len());
    let mut sets = Vec::with_capacity(mixture.weights.len());
    for (&d, &p) in &mixture.weights {
        let node = graph.node(d)?;
        let params = node.params.as_ref().ok_or_else(|| {
            AdaGraphError::NodeSetMismatch(format!("node {d} has no parameters"))
        })?;
        weights.push(p);
        sets.push(params);
    }
    mix_param_sets(&weights, &sets)
}

/// Class probabilities for one input under an explicit domain mixture.
pub fn predict_with_mixture(
    graph: &DomainGraph,
    net: &Network,
    mixture: &MixtureDistribution,
    x: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let params = synthesize_params(graph, mixture)?;
    let p = net.predict_with_params(x.insert_axis(ndarray::Axis(0)), &params)?;
    Ok(p.row(0).to_owned())
}

/// Class probabilities for `x` with parameters synthesized from the domain
/// classifier's `p(v | x)`.
pub fn predict_from_image(
    graph: &DomainGraph,
    net: &Network,
    classifier: &MetadataClassifier,
    x: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let parameterized: Vec<DomainId> = graph
        .nodes()
        .filter(|n| n.role != crate::domain_graph::NodeRole::Virtual && n.params.is_some())
        .map(|n| n.id)
        .collect();
    if parameterized != classifier.classes {
        return Err(AdaGraphError::NodeSetMismatch(format!(
            "classifier covers {:?}, graph has parameters for {:?}",
            classifier.classes, parameterized
        )));
    }
    let mixture = classifier.mixture(x)?;
    predict_with_mixture(graph, net, &mixture, x)
}
