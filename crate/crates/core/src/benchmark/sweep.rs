//! Accuracy as a function of the number of auxiliary domains.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::family::{generate_family, DomainFamilySpec};
use super::pda::PdaContext;
use super::{ProtocolConfig, VariantId};
use crate::domain_graph::DomainId;
use crate::error::{AdaGraphError, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

/// For each count, `repeats` full-pipeline runs on random auxiliary subsets
/// of that size. Repeat `r` uses seed `cfg.train.seed + r` for data and
/// training, so the full-size count matches the leave-one-out protocol.
pub fn sweep_auxiliary_count(
    spec: &DomainFamilySpec,
    source: DomainId,
    target: DomainId,
    counts: &[usize],
    repeats: usize,
    cfg: &ProtocolConfig,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(AdaGraphError::Config("repeats must be at least 1".into()));
    }
    let available = spec.n_domains.saturating_sub(2);
    if let Some(&c) = counts.iter().find(|&&c| c == 0 || c > available) {
        return Err(AdaGraphError::Config(format!(
            "auxiliary count {c} outside [1, {available}]"
        )));
    }
    let nested: Vec<Vec<SweepRow>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.train.seed + r as u64;
            let cfg = cfg.with_seed(seed);
            let family = generate_family(&DomainFamilySpec { seed, ..spec.clone() }, cfg.train.batch_size)?;
            let ctx = PdaContext::new(&family, source, &cfg)?;
            let candidates = ctx.default_aux(target);
            counts
                .iter()
                .map(|&count| {
                    let mut aux = candidates.clone();
                    aux.shuffle(&mut seeds::rng(seed, &[seeds::TAG_SUBSET, count as u64]));
                    aux.truncate(count);
                    aux.sort();
                    let run = ctx.run_with_aux(target, &aux, &[VariantId::AdaGraphFull])?;
                    Ok(SweepRow {
                        count,
                        repeat: r,
                        seed,
                        accuracy: run[0].row.accuracy,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<SweepRow> = nested.into_iter().flatten().collect();
    rows.sort_by_key(|r| (counts.iter().position(|&c| c == r.count), r.repeat));
    Ok(rows)
}

/// Mean and sample standard deviation per count, in first-seen order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut counts: Vec<usize> = Vec::new();
    for r in rows {
        if !counts.contains(&r.count) {
            counts.push(r.count);
        }
    }
    counts
        .into_iter()
        .map(|count| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.count == count).map(|r| r.accuracy).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepSummary {
                count,
                mean,
                std,
                repeats: acc.len(),
            }
        })
        .collect()
}
