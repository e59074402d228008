//! Domains as a weighted graph over their metadata.
//!
//! Every pair of nodes is connected. The strength of an edge is
//! `exp(-d(m_a, m_b))` with `d(a, b) = ||a - b||^2 / (2 sigma)`. Nodes without
//! data (virtual nodes) receive parameters as the edge-weighted mean of the
//! parameters of nodes that do have data.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AdaGraphError, Result};

/// Opaque domain identifier. Ordering fixes every summation order in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A metadata vector; components are finite and by convention lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Metadata(Vec<f64>);

impl Metadata {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(AdaGraphError::InvalidMetadata(format!(
                "non-finite component {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for Metadata {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Metadata::new(values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `||a - b||^2 / (2 sigma)`
    #[default]
    SquaredEuclideanOver2Sigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: f64,
    #[serde(default)]
    pub distance: Distance,
}

impl KernelConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(AdaGraphError::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            sigma,
            distance: Distance::SquaredEuclideanOver2Sigma,
        })
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            distance: Distance::SquaredEuclideanOver2Sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Source,
    Auxiliary,
    Virtual,
}

/// Statistics and scale/bias of one normalization layer for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BnParams {
    /// Zero mean, unit variance, identity scale/bias.
    pub fn identity(channels: usize) -> Self {
        Self {
            mu: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_dim(c, self.var.len())?;
        check_dim(c, self.gamma.len())?;
        check_dim(c, self.beta.len())?;
        if self.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(AdaGraphError::InvalidState(
                "negative or NaN variance".into(),
            ));
        }
        Ok(())
    }

    pub fn fields(&self) -> [&[f64]; 4] {
        [&self.mu, &self.var, &self.gamma, &self.beta]
    }
}

/// Domain-specific parameters of a network: one entry per normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<BnParams>,
}

impl ParamSet {
    pub fn layout(&self) -> Vec<usize> {
        self.layers.iter().map(BnParams::channels).collect()
    }

    /// Largest absolute componentwise difference between two sets with equal layout.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        let mut worst = 0.0_f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (fa, fb) in a.fields().into_iter().zip(b.fields()) {
                for (x, y) in fa.iter().zip(fb) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }
}

/// Weighted mean of equally shaped vectors, clamped to the contributors'
/// componentwise envelope so that rounding never leaves the convex hull.
pub(crate) fn convex_mix<'a>(
    weights: &[f64],
    vectors: impl Iterator<Item = &'a [f64]> + Clone,
    len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    for (w, v) in weights.iter().zip(vectors) {
        for c in 0..len {
            out[c] += w * v[c];
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    for c in 0..len {
        out[c] = out[c].clamp(lo[c], hi[c]);
    }
    out
}

/// Convex combination of parameter sets (all four fields of every layer).
pub fn mix_param_sets(weights: &[f64], sets: &[&ParamSet]) -> Result<ParamSet> {
    let first = sets
        .first()
        .ok_or_else(|| AdaGraphError::InvalidState("no parameter sets to mix".into()))?;
    let layout = first.layout();
    for s in sets {
        check_dim(layout.len(), s.layers.len())?;
        for (a, b) in layout.iter().zip(s.layout()) {
            check_dim(*a, b)?;
        }
    }
    let layers = layout
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let field = |pick: fn(&BnParams) -> &[f64]| {
                convex_mix(weights, sets.iter().map(move |s| pick(&s.layers[l])), c)
            };
            BnParams {
                mu: field(|p| &p.mu),
                var: field(|p| &p.var),
                gamma: field(|p| &p.gamma),
                beta: field(|p| &p.beta),
            }
        })
        .collect();
    Ok(ParamSet { layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainNode {
    pub id: DomainId,
    pub metadata: Metadata,
    pub role: NodeRole,
    pub params: Option<ParamSet>,
}

pub fn metadata_distance(a: &Metadata, b: &Metadata, kernel: &KernelConfig) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    if !(kernel.sigma > 0.0) {
        return Err(AdaGraphError::Config(format!(
            "sigma must be positive, got {}",
            kernel.sigma
        )));
    }
    let sq: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    match kernel.distance {
        Distance::SquaredEuclideanOver2Sigma => Ok(sq / (2.0 * kernel.sigma)),
    }
}

pub fn edge_weight(a: &Metadata, b: &Metadata, kernel: &KernelConfig) -> Result<f64> {
    Ok((-metadata_distance(a, b, kernel)?).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainGraph {
    metadata_dim: usize,
    kernel: KernelConfig,
    /// Edges with weight at or below this value are dropped; 0 keeps the graph complete.
    min_weight: f64,
    nodes: BTreeMap<DomainId, DomainNode>,
}

impl DomainGraph {
    pub fn new(metadata_dim: usize, kernel: KernelConfig) -> Result<Self> {
        KernelConfig::new(kernel.sigma)?;
        Ok(Self {
            metadata_dim,
            kernel,
            min_weight: 0.0,
            nodes: BTreeMap::new(),
        })
    }

    pub fn with_min_weight(mut self, min_weight: f64) -> Self {
        self.min_weight = min_weight.max(0.0);
        self
    }

    pub fn metadata_dim(&self) -> usize {
        self.metadata_dim
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn min_weight(&self) -> f64 {
        self.min_weight
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &DomainNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: DomainId) -> Result<&DomainNode> {
        self.nodes.get(&id).ok_or(AdaGraphError::UnknownDomain(id))
    }

    pub fn contains(&self, id: DomainId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn source(&self) -> Option<DomainId> {
        self.nodes
            .values()
            .find(|n| n.role == NodeRole::Source)
            .map(|n| n.id)
    }

    /// Ids of the nodes that carry data (source and auxiliaries).
    pub fn known_ids(&self) -> Vec<DomainId> {
        self.nodes
            .values()
            .filter(|n| n.role != NodeRole::Virtual)
            .map(|n| n.id)
            .collect()
    }

    pub fn add_node(&mut self, id: DomainId, metadata: Metadata, role: NodeRole) -> Result<&DomainNode> {
        check_dim(self.metadata_dim, metadata.len())?;
        if self.nodes.contains_key(&id) {
            return Err(AdaGraphError::DuplicateNode(id));
        }
        if role == NodeRole::Source && self.source().is_some() {
            return Err(AdaGraphError::InvalidState(
                "graph already has a source node".into(),
            ));
        }
        self.nodes.insert(
            id,
            DomainNode {
                id,
                metadata,
                role,
                params: None,
            },
        );
        Ok(&self.nodes[&id])
    }

    /// Attaches a data-free node; it is implicitly connected to every other node.
    pub fn add_virtual_node(&mut self, id: DomainId, metadata: Metadata) -> Result<&DomainNode> {
        self.add_node(id, metadata, NodeRole::Virtual)
    }

    pub fn assign_params(&mut self, id: DomainId, params: ParamSet) -> Result<()> {
        for layer in &params.layers {
            layer.validate()?;
        }
        let node = self
            .nodes
            .get_mut(&id)
            .ok_or(AdaGraphError::UnknownDomain(id))?;
        node.params = Some(params);
        Ok(())
    }

    /// First id not used by any node.
    pub fn next_free_id(&self) -> DomainId {
        DomainId(self.nodes.keys().next_back().map_or(0, |id| id.0 + 1))
    }

    pub fn edge_weight(&self, a: DomainId, b: DomainId) -> Result<f64> {
        edge_weight(&self.node(a)?.metadata, &self.node(b)?.metadata, &self.kernel)
    }

    /// Normalized weights of `target` towards `candidates` (ascending id order).
    ///
    /// Normalization is done relative to the nearest candidate so that far
    /// away graphs whose raw weights underflow still yield a distribution.
    fn normalized_weights(
        &self,
        target: &Metadata,
        candidates: impl Iterator<Item = DomainId>,
    ) -> Result<Vec<(DomainId, f64)>> {
        let mut dists = Vec::new();
        for id in candidates {
            let d = metadata_distance(target, &self.nodes[&id].metadata, &self.kernel)?;
            if self.min_weight > 0.0 && (-d).exp() <= self.min_weight {
                continue;
            }
            dists.push((id, d));
        }
        let d_min = dists
            .iter()
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min);
        let raw: Vec<f64> = dists.iter().map(|(_, d)| (d_min - d).exp()).collect();
        let total: f64 = raw.iter().sum();
        Ok(dists
            .iter()
            .zip(raw)
            .map(|((id, _), w)| (*id, w / total))
            .collect())
    }

    /// Normalized edge weights from `target` to every non-virtual node holding
    /// parameters (target excluded).
    pub fn node_weights(&self, target: DomainId) -> Result<Vec<(DomainId, f64)>> {
        let t = self.node(target)?;
        let candidates = self
            .nodes
            .values()
            .filter(|n| n.id != target && n.role != NodeRole::Virtual && n.params.is_some())
            .map(|n| n.id);
        let weights = self.normalized_weights(&t.metadata, candidates)?;
        if weights.is_empty() {
            return Err(AdaGraphError::EmptyGraph(target));
        }
        Ok(weights)
    }

    /// Weights used to blend scale/bias for `domain` during a graph-aware
    /// forward: over all known domains including `domain` itself when known.
    pub fn mixing_weights(&self, domain: DomainId) -> Result<Vec<(DomainId, f64)>> {
        let t = self.node(domain)?;
        let candidates = self
            .nodes
            .values()
            .filter(|n| n.role != NodeRole::Virtual)
            .map(|n| n.id);
        let weights = self.normalized_weights(&t.metadata, candidates)?;
        if weights.is_empty() {
            return Err(AdaGraphError::EmptyGraph(domain));
        }
        Ok(weights)
    }

    /// Regresses parameters for `target` from its parameterized neighbors and
    /// assigns them to the node.
    pub fn propagate_params(&mut self, target: DomainId) -> Result<ParamSet> {
        let weights = self.node_weights(target)?;
        let w: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
        let sets: Vec<&ParamSet> = weights
            .iter()
            .map(|(id, _)| self.nodes[id].params.as_ref().expect("filtered on params"))
            .collect();
        let mixed = mix_param_sets(&w, &sets)?;
        self.assign_params(target, mixed.clone())?;
        Ok(mixed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<GraphDoc>(text)?.try_into()
    }
}

/// JSON layout: `{metadata_dim, sigma, nodes: [{id, role, metadata, params}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDoc {
    pub metadata_dim: usize,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub min_weight: f64,
    pub nodes: Vec<NodeDoc>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: DomainId,
    pub role: NodeRole,
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamSet>,
}

impl From<&DomainGraph> for GraphDoc {
    fn from(g: &DomainGraph) -> Self {
        GraphDoc {
            metadata_dim: g.metadata_dim,
            sigma: g.kernel.sigma,
            min_weight: g.min_weight,
            nodes: g
                .nodes
                .values()
                .map(|n| NodeDoc {
                    id: n.id,
                    role: n.role,
                    metadata: n.metadata.clone(),
                    params: n.params.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<GraphDoc> for DomainGraph {
    type Error = AdaGraphError;

    fn try_from(doc: GraphDoc) -> Result<Self> {
        let mut g = DomainGraph::new(doc.metadata_dim, KernelConfig::new(doc.sigma)?)?
            .with_min_weight(doc.min_weight);
        for n in doc.nodes {
            g.add_node(n.id, n.metadata, n.role)?;
            if let Some(p) = n.params {
                g.assign_params(n.id, p)?;
            }
        }
        Ok(g)
    }
}
