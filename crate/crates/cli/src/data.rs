//! Datasets named by the config, rebuilt deterministically from their seed.

use anyhow::{bail, Result};
use rmflow_core::evalsuite::{make_s2_mixture, uniform_samples, HelixDataset};
use rmflow_core::experiments::HelixSpec;
use rmflow_core::geometry::Manifold;

use crate::config::{manifold_name, parse_manifold, DataConfig, DataKind};

pub struct Dataset {
    pub manifold: Manifold,
    pub train: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    /// Present for helices: maps ambient rows back to S².
    pub helix: Option<HelixDataset>,
}

impl Dataset {
    /// The manifold the configured data lives on, without generating it.
    pub fn manifold_of(cfg: &DataConfig) -> Result<Manifold> {
        let natural = match cfg.kind {
            DataKind::Helix => Manifold::Sphere(cfg.ambient_dim),
            DataKind::S2Mixture => Manifold::Sphere(3),
            DataKind::Uniform if cfg.manifold.is_empty() => Manifold::Sphere(cfg.ambient_dim),
            DataKind::Uniform => parse_manifold(&cfg.manifold)?,
        };
        if !cfg.manifold.is_empty() && parse_manifold(&cfg.manifold)? != natural {
            bail!(
                "data.manifold is {} but {:?} data lives on {}",
                cfg.manifold,
                cfg.kind,
                manifold_name(&natural)
            );
        }
        Ok(natural)
    }

    pub fn build(cfg: &DataConfig) -> Result<Self> {
        let natural = Self::manifold_of(cfg)?;
        let n = cfg.train_size + cfg.reference_size;
        let (mut all, helix) = match cfg.kind {
            DataKind::Helix => {
                let d = HelixSpec {
                    ambient_dim: cfg.ambient_dim,
                    turns: cfg.turns,
                    train_size: cfg.train_size,
                    reference_size: cfg.reference_size,
                    seed: cfg.seed,
                }
                .build()?;
                let mut rows = d.train;
                rows.extend(d.reference);
                (rows, Some(d.dataset))
            }
            DataKind::S2Mixture => (make_s2_mixture(&cfg.centers, cfg.spread, n, cfg.seed)?, None),
            DataKind::Uniform => (uniform_samples(&natural, n, cfg.seed), None),
        };
        let reference = all.split_off(cfg.train_size);
        Ok(Dataset {
            manifold: natural,
            train: all,
            reference,
            helix,
        })
    }

    /// Manifold on which samples are compared and plotted.
    pub fn eval_manifold(&self) -> Manifold {
        match self.helix {
            Some(_) => Manifold::Sphere(3),
            None => self.manifold.clone(),
        }
    }

    /// Rows mapped to the evaluation manifold.
    pub fn project(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match &self.helix {
            Some(h) => Ok(rows.iter().map(|y| h.project_back(y)).collect::<rmflow_core::Result<_>>()?),
            None => Ok(rows.to_vec()),
        }
    }
}
