//! Synthetic benchmark family and the experimental protocols: leave-one-out
//! predictive adaptation, continuous adaptation on a drifting stream, and
//! the auxiliary-count sweep.

mod continuous;
mod family;
mod pda;
mod sweep;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain_graph::{DomainId, KernelConfig};
use crate::error::{AdaGraphError, Result};
use crate::network::{Network, Sample};
use crate::refinement::{RefinementBuffer, DEFAULT_ALPHA, DEFAULT_CAPACITY, DEFAULT_REFINE_LR};
use crate::training::TrainConfig;

pub use continuous::{
    run_continuous, run_stream, train_stream_source, write_continuous_csv, write_stream_csv, ContinuousRun, ContinuousVariant, StreamRecord,
    StreamSpec,
};
pub use family::{generate_family, rotate, BaseDataset, Domain, DomainFamilySpec, Family};
pub use pda::{leave_one_out_pairs, run_pda, run_pda_grid, PdaContext, PdaRun};
pub use sweep::{summarize_sweep, sweep_auxiliary_count, SweepRow, SweepSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    /// Source model evaluated directly on the target.
    Baseline,
    /// Source model refined on the target stream.
    BaselineRefine,
    /// Statistics estimated per domain; scale/bias stay the source's.
    #[serde(rename = "adagraph_bn")]
    AdaGraphBN,
    /// Per-domain scale/bias trained without the graph-blended forward.
    #[serde(rename = "adagraph_sb")]
    AdaGraphSB,
    #[serde(rename = "adagraph_full")]
    AdaGraphFull,
    #[serde(rename = "adagraph_refine")]
    AdaGraphRefine,
    /// Target data used as an extra unlabeled domain during training.
    #[serde(rename = "da_upper_bound")]
    DAUpperBound,
}

impl VariantId {
    pub const ALL: [VariantId; 7] = [
        VariantId::Baseline,
        VariantId::BaselineRefine,
        VariantId::AdaGraphBN,
        VariantId::AdaGraphSB,
        VariantId::AdaGraphFull,
        VariantId::AdaGraphRefine,
        VariantId::DAUpperBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::Baseline => "baseline",
            VariantId::BaselineRefine => "baseline_refine",
            VariantId::AdaGraphBN => "adagraph_bn",
            VariantId::AdaGraphSB => "adagraph_sb",
            VariantId::AdaGraphFull => "adagraph_full",
            VariantId::AdaGraphRefine => "adagraph_refine",
            VariantId::DAUpperBound => "da_upper_bound",
        }
    }

    /// Whether a graph stage runs before evaluation.
    pub fn uses_graph(self) -> bool {
        !matches!(self, VariantId::Baseline | VariantId::BaselineRefine)
    }

    pub fn refines(self) -> bool {
        matches!(self, VariantId::BaselineRefine | VariantId::AdaGraphRefine)
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = AdaGraphError;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| AdaGraphError::Config(format!("unknown variant `{s}`")))
    }
}

/// Everything a protocol run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub kernel: KernelConfig,
    pub hidden: Vec<usize>,
    pub epsilon: f64,
    pub buffer_capacity: usize,
    pub refine_alpha: f64,
    pub refine_lr: f64,
    /// Measure wall time; when off the column is written as 0 so results
    /// files compare bitwise across runs.
    pub record_wall_time: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            kernel: KernelConfig::default(),
            hidden: vec![32, 32],
            epsilon: crate::gbn::DEFAULT_EPSILON,
            buffer_capacity: DEFAULT_CAPACITY,
            refine_alpha: DEFAULT_ALPHA,
            refine_lr: DEFAULT_REFINE_LR,
            record_wall_time: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(AdaGraphError::Config("hidden layer sizes must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(AdaGraphError::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        self.buffer()?;
        Ok(())
    }

    pub fn buffer(&self) -> Result<RefinementBuffer> {
        RefinementBuffer::new(self.buffer_capacity, self.refine_alpha, self.refine_lr)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub source: DomainId,
    pub target: DomainId,
    pub variant: VariantId,
    pub seed: u64,
    pub accuracy: f64,
    pub wall_time_s: f64,
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Into::into))
        .collect()
}

/// Fraction of `samples` whose argmax class under `probs` equals the label.
pub fn accuracy(probs: &ndarray::Array2<f64>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(AdaGraphError::EmptyDataset(None));
    }
    crate::error::check_dim(samples.len(), probs.nrows())?;
    let mut hits = 0usize;
    for (row, s) in probs.rows().into_iter().zip(samples) {
        if Some(crate::refinement::argmax(row)) == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// SHA-256 over the serialized network and, when present, graph.
pub fn state_hash(net: &Network, graph: Option<&crate::domain_graph::DomainGraph>) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&net.to_doc())?);
    if let Some(g) = graph {
        h.update(g.to_json()?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Mean accuracy per variant, in variant order.
pub fn mean_by_variant(rows: &[ResultRow]) -> Vec<(VariantId, f64, usize)> {
    let mut acc: std::collections::BTreeMap<VariantId, (f64, usize)> = Default::default();
    for r in rows {
        let e = acc.entry(r.variant).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(v, (s, n))| (v, s / n as f64, n)).collect()
}

pub(crate) struct Stopwatch(Option<std::time::Instant>);

impl Stopwatch {
    pub(crate) fn start(enabled: bool) -> Self {
        Self(enabled.then(std::time::Instant::now))
    }

    pub(crate) fn secs(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

/// Writes samples as `x0,..,x{d-1},label` rows.
pub fn write_samples_csv<W: Write>(samples: &[Sample], w: W) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    out.write_record(&header)?;
    for s in samples {
        crate::error::check_dim(dim, s.x.len())?;
        let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        rec.push(s.y.map(|y| y.to_string()).unwrap_or_default());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads samples with feature columns `x0, x1, ..` and an optional `label`
/// column (empty cells are unlabeled). Other columns are rejected.
pub fn read_samples_csv<R: std::io::Read>(r: R, domain: DomainId) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let mut feature_cols = Vec::new();
    let mut label_col = None;
    for (i, name) in header.iter().enumerate() {
        match name.trim() {
            "label" => label_col = Some(i),
            n if n.strip_prefix('x').is_some_and(|k| k.parse::<usize>().is_ok()) => feature_cols.push(i),
            other => {
                return Err(AdaGraphError::Config(format!("unexpected sample column `{other}`")))
            }
        }
    }
    if feature_cols.is_empty() {
        return Err(AdaGraphError::Config("sample file has no feature columns".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| AdaGraphError::Config(format!("bad feature value `{}`", &rec[i])))
        };
        let x = feature_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?;
        let y = match label_col.map(|i| rec[i].trim()) {
            None | Some("") => None,
            Some(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| AdaGraphError::Label(format!("bad label `{v}`")))?,
            ),
        };
        out.push(Sample { x, y, domain });
    }
    if out.is_empty() {
        return Err(AdaGraphError::EmptyDataset(None));
    }
    Ok(out)
}
