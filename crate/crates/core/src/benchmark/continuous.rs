//! Continuous adaptation: a source model classifies a drifting stream one
//! sample at a time, optionally refining its target entry as it goes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::family::{rotate, DomainFamilySpec};
use super::{ProtocolConfig, Stopwatch};
use crate::domain_graph::{DomainId, Metadata};
use crate::error::{AdaGraphError, Result};
use crate::network::{Network, Sample};
use crate::refinement::{RefineMode, RefinementEngine};
use crate::seeds;
use crate::training::{stage1_source, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousVariant {
    Baseline,
    RefineStats,
    RefineFull,
}

impl ContinuousVariant {
    pub const ALL: [ContinuousVariant; 3] = [
        ContinuousVariant::Baseline,
        ContinuousVariant::RefineStats,
        ContinuousVariant::RefineFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContinuousVariant::Baseline => "baseline",
            ContinuousVariant::RefineStats => "refine_stats",
            ContinuousVariant::RefineFull => "refine_full",
        }
    }

    pub fn mode(self) -> RefineMode {
        match self {
            ContinuousVariant::Baseline => RefineMode::Frozen,
            ContinuousVariant::RefineStats => RefineMode::Stats,
            ContinuousVariant::RefineFull => RefineMode::Full,
        }
    }
}

impl fmt::Display for ContinuousVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContinuousVariant {
    type Err = AdaGraphError;

    fn from_str(s: &str) -> Result<Self> {
        ContinuousVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| AdaGraphError::Config(format!("unknown continuous variant `{s}`")))
    }
}

/// A stream whose rotation moves linearly from `start_deg` to `end_deg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub length: usize,
    pub start_deg: f64,
    pub end_deg: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            length: 2000,
            start_deg: 0.0,
            end_deg: 90.0,
        }
    }
}

const SOURCE: DomainId = DomainId(0);
const TARGET: DomainId = DomainId(1);

impl StreamSpec {
    /// Labeled samples in arrival order, tagged with the target entry.
    pub fn generate(&self, family: &DomainFamilySpec) -> Result<Vec<Sample>> {
        if self.length == 0 {
            return Err(AdaGraphError::EmptyDataset(None));
        }
        let mut rng = seeds::rng(family.seed, &[seeds::TAG_STREAM]);
        let span = (self.length.max(2) - 1) as f64;
        Ok((0..self.length)
            .map(|i| {
                let (p, y) = family.base_point(i, &mut rng);
                let deg = self.start_deg + (self.end_deg - self.start_deg) * i as f64 / span;
                Sample::labeled(rotate(p, deg, family.rotation_center).to_vec(), y, TARGET)
            })
            .collect())
    }

    fn source_metadata(&self, family: &DomainFamilySpec) -> Result<Metadata> {
        let mut m = vec![self.start_deg / 360.0];
        if family.max_translation.is_some() {
            m.push(0.0);
        }
        Metadata::new(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub idx: usize,
    pub pred: usize,
    pub label: Option<usize>,
    pub correct: Option<bool>,
    /// Accuracy over the labeled samples seen so far.
    pub cum_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRun {
    pub variant: ContinuousVariant,
    pub seed: u64,
    pub accuracy: f64,
    pub wall_time_s: f64,
    pub records: Vec<StreamRecord>,
}

/// Prequential pass of `stream` through a copy of `net` whose `entry` is
/// initialized from `init`.
pub fn run_stream(
    net: &Network,
    init: DomainId,
    stream: &[Sample],
    mode: RefineMode,
    cfg: &ProtocolConfig,
) -> Result<Vec<StreamRecord>> {
    let mut net = net.clone();
    let entry = if net.has_domain(TARGET) && init != TARGET {
        DomainId(u32::MAX)
    } else {
        TARGET
    };
    if entry != init {
        net.clone_domain(init, entry)?;
    }
    let mut engine = RefinementEngine::new(net, entry, cfg.buffer()?, mode)?;
    let (mut hits, mut seen) = (0usize, 0usize);
    let mut out = Vec::with_capacity(stream.len());
    for (idx, s) in stream.iter().enumerate() {
        let pred = engine.step(&s.x)?;
        let correct = s.y.map(|y| y == pred);
        if let Some(c) = correct {
            seen += 1;
            hits += usize::from(c);
        }
        out.push(StreamRecord {
            idx,
            pred,
            label: s.y,
            correct,
            cum_acc: (seen > 0).then(|| hits as f64 / seen as f64),
        });
    }
    Ok(out)
}

/// Trains a source model at the stream's starting rotation.
pub fn train_stream_source(family: &DomainFamilySpec, stream: &StreamSpec, cfg: &ProtocolConfig) -> Result<Network> {
    cfg.validate()?;
    family.validate(cfg.train.batch_size)?;
    let data = family.draw(&stream.source_metadata(family)?, family.samples_per_domain, SOURCE)?;
    let mut rng = seeds::rng(cfg.train.seed, &[seeds::TAG_INIT]);
    let mut net = Network::new(
        2,
        &cfg.hidden,
        family.base_dataset.num_classes(),
        SOURCE,
        cfg.epsilon,
        cfg.train.gbn_momentum,
        &mut rng,
    )?;
    stage1_source(&mut net, SOURCE, &data, &cfg.train, &mut TrainLog::default())?;
    Ok(net)
}

/// Continuous protocol for each variant on one seed. The family seed and
/// the training seed are both `cfg.train.seed`.
pub fn run_continuous(
    family: &DomainFamilySpec,
    stream: &StreamSpec,
    variants: &[ContinuousVariant],
    cfg: &ProtocolConfig,
) -> Result<Vec<ContinuousRun>> {
    let family = DomainFamilySpec {
        seed: cfg.train.seed,
        ..family.clone()
    };
    let watch = Stopwatch::start(cfg.record_wall_time);
    let net = train_stream_source(&family, stream, cfg)?;
    let train_secs = watch.secs();
    let samples = stream.generate(&family)?;
    variants
        .iter()
        .map(|&variant| {
            let watch = Stopwatch::start(cfg.record_wall_time);
            let records = run_stream(&net, SOURCE, &samples, variant.mode(), cfg)?;
            let accuracy = records.last().and_then(|r| r.cum_acc).unwrap_or(0.0);
            Ok(ContinuousRun {
                variant,
                seed: cfg.train.seed,
                accuracy,
                wall_time_s: if cfg.record_wall_time { train_secs + watch.secs() } else { 0.0 },
                records,
            })
        })
        .collect()
}

pub fn write_stream_csv<W: Write>(records: &[StreamRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    variant: &'a str,
    seed: u64,
    accuracy: f64,
    wall_time_s: f64,
}

/// One `variant,seed,accuracy,wall_time_s` row per run.
pub fn write_continuous_csv<W: Write>(runs: &[ContinuousRun], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in runs {
        out.serialize(SummaryRow {
            variant: r.variant.name(),
            seed: r.seed,
            accuracy: r.accuracy,
            wall_time_s: r.wall_time_s,
        })?;
    }
    out.flush()?;
    Ok(())
}
