//! Synthetic multi-domain families: a base 2-D dataset transformed by a
//! metadata-indexed rotation (and optional translation).

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain_graph::{DomainId, Metadata};
use crate::error::{AdaGraphError, Result};
use crate::network::Sample;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDataset {
    /// Two interleaved half circles, 2 classes.
    TwoMoons,
    /// Four Gaussian blobs at `(+-1, +-1)`, 4 classes.
    GaussianQuad,
}

impl BaseDataset {
    pub fn num_classes(self) -> usize {
        match self {
            BaseDataset::TwoMoons => 2,
            BaseDataset::GaussianQuad => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFamilySpec {
    pub base_dataset: BaseDataset,
    pub n_domains: usize,
    pub samples_per_domain: usize,
    pub noise_std: f64,
    /// Rotation center in input space.
    pub rotation_center: [f64; 2],
    /// Largest translation (along the first axis). `None` keeps metadata
    /// one-dimensional.
    pub max_translation: Option<f64>,
    pub seed: u64,
}

impl Default for DomainFamilySpec {
    fn default() -> Self {
        Self {
            base_dataset: BaseDataset::TwoMoons,
            n_domains: 18,
            samples_per_domain: 300,
            noise_std: 0.1,
            rotation_center: [0.0, 0.0],
            max_translation: None,
            seed: 0,
        }
    }
}

impl DomainFamilySpec {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.n_domains < 3 {
            return Err(AdaGraphError::Config(format!(
                "n_domains must be at least 3, got {}",
                self.n_domains
            )));
        }
        if self.samples_per_domain < 2 * batch_size {
            return Err(AdaGraphError::Config(format!(
                "samples_per_domain must be at least 2 * batch_size = {}, got {}",
                2 * batch_size,
                self.samples_per_domain
            )));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(AdaGraphError::Config(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if self.rotation_center.iter().any(|c| !c.is_finite()) {
            return Err(AdaGraphError::Config("rotation_center must be finite".into()));
        }
        if let Some(t) = self.max_translation {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(AdaGraphError::Config(format!(
                    "max_translation must be nonnegative, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn metadata_dim(&self) -> usize {
        if self.max_translation.is_some() {
            2
        } else {
            1
        }
    }

    /// Metadata of domain `i`: `[angle / 360]` or `[angle / 360, translation / max]`.
    /// Angles are evenly spaced over the full turn; translations over `[0, 1]`.
    pub fn metadata_of(&self, i: usize) -> Result<Metadata> {
        let angle = i as f64 / self.n_domains as f64;
        let mut m = vec![angle];
        if self.max_translation.is_some() {
            m.push(i as f64 / (self.n_domains - 1) as f64);
        }
        Metadata::new(m)
    }

    /// `(angle in degrees, translation)` encoded by `metadata`.
    pub fn transform_of(&self, metadata: &Metadata) -> Result<(f64, f64)> {
        let v = metadata.values();
        if v.len() != self.metadata_dim() {
            return Err(AdaGraphError::Dimension {
                expected: self.metadata_dim(),
                got: v.len(),
            });
        }
        let shift = match (self.max_translation, v.get(1)) {
            (Some(t), Some(&u)) => t * u,
            _ => 0.0,
        };
        Ok((v[0] * 360.0, shift))
    }

    /// Draws `n` samples of the domain with the given metadata. The random
    /// stream depends only on the family seed and the metadata.
    pub fn draw(&self, metadata: &Metadata, n: usize, domain: DomainId) -> Result<Vec<Sample>> {
        let (angle, shift) = self.transform_of(metadata)?;
        let tags: Vec<u64> = std::iter::once(seeds::TAG_DATA)
            .chain(metadata.values().iter().map(|v| v.to_bits()))
            .collect();
        let mut rng = seeds::rng(self.seed, &tags);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (p, y) = self.base_point(i, &mut rng);
            let mut q = rotate(p, angle, self.rotation_center);
            q[0] += shift;
            out.push(Sample::labeled(q.to_vec(), y, domain));
        }
        Ok(out)
    }

    /// Point `i` of the untransformed base dataset. Classes alternate.
    pub fn base_point<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> ([f64; 2], usize) {
        let noise = Normal::new(0.0, self.noise_std).expect("validated noise");
        match self.base_dataset {
            BaseDataset::TwoMoons => {
                let y = i % 2;
                let t = rng.random::<f64>() * std::f64::consts::PI;
                let p = if y == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                };
                ([p[0] + noise.sample(rng), p[1] + noise.sample(rng)], y)
            }
            BaseDataset::GaussianQuad => {
                let y = i % 4;
                let c = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]][y];
                ([c[0] + noise.sample(rng), c[1] + noise.sample(rng)], y)
            }
        }
    }
}

/// Counter-clockwise rotation of `p` by `deg` degrees about `center`.
pub fn rotate(p: [f64; 2], deg: f64, center: [f64; 2]) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub metadata: Metadata,
    pub samples: Vec<Sample>,
}

/// A generated family, keyed by domain id `0..n_domains`.
#[derive(Debug, Clone, PartialEq)]
pub struct Family {
    pub spec: DomainFamilySpec,
    pub domains: BTreeMap<DomainId, Domain>,
}

impl Family {
    pub fn domain(&self, id: DomainId) -> Result<&Domain> {
        self.domains.get(&id).ok_or(AdaGraphError::UnknownDomain(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.domains.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.base_dataset.num_classes()
    }

    /// Angular distance in degrees between two domains, on the circle.
    pub fn angular_distance(&self, a: DomainId, b: DomainId) -> Result<f64> {
        let (x, _) = self.spec.transform_of(&self.domain(a)?.metadata)?;
        let (y, _) = self.spec.transform_of(&self.domain(b)?.metadata)?;
        let d = (x - y).abs() % 360.0;
        Ok(d.min(360.0 - d))
    }
}

pub fn generate_family(spec: &DomainFamilySpec, batch_size: usize) -> Result<Family> {
    spec.validate(batch_size)?;
    let mut domains = BTreeMap::new();
    for i in 0..spec.n_domains {
        let id = DomainId(i as u32);
        let metadata = spec.metadata_of(i)?;
        let samples = spec.draw(&metadata, spec.samples_per_domain, id)?;
        domains.insert(id, Domain { metadata, samples });
    }
    Ok(Family {
        spec: spec.clone(),
        domains,
    })
}
