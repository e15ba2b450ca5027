//! End-to-end drivers shared by the CLI and the acceptance suite. A helix run
//! trains a model and scores its samples against held-out data.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{make_helix, mmd, noise_floor, HelixDataset, MmdValue, NoiseFloor};
use crate::geometry::Manifold;
use crate::evalsuite::median;
use crate::inference::{sample, Guidance, LinearReward, SamplerConfig, Stepper};
use crate::model::{AverageVelocity, FlowNet, NetShape};
use crate::training::{LossStats, ObjectiveConfig, Trainer};

/// Consecutive aborted steps after which training is declared divergent.
pub const DIVERGENCE_STREAK: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HelixSpec {
    pub ambient_dim: usize,
    pub turns: u32,
    pub train_size: usize,
    /// Held-out points used as the MMD reference and for the noise floor.
    pub reference_size: usize,
    pub seed: u64,
}

impl Default for HelixSpec {
    fn default() -> Self {
        HelixSpec {
            ambient_dim: 3,
            turns: 3,
            train_size: 20_000,
            reference_size: 4_000,
            seed: 0,
        }
    }
}

/// A helix split into training and reference rows that share one embedding.
#[derive(Debug, Clone)]
pub struct HelixData {
    pub dataset: HelixDataset,
    pub train: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
}

impl HelixSpec {
    pub fn build(&self) -> Result<HelixData> {
        let (dataset, mut all) = make_helix(self.ambient_dim, self.train_size + self.reference_size, self.turns, self.seed)?;
        let reference = all.split_off(self.train_size);
        Ok(HelixData {
            dataset,
            train: all,
            reference,
        })
    }
}

impl HelixData {
    /// Rows mapped back to S².
    pub fn project(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|y| self.dataset.project_back(y)).collect()
    }

    /// Split-half noise floor of the reference set on S², with halves of `half` points.
    pub fn noise_floor(&self, half: usize, splits: usize, kappa: f64, seed: u64) -> Result<NoiseFloor> {
        noise_floor(&Manifold::Sphere(3), &self.project(&self.reference)?, half, splits, kappa, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub nfe: Vec<usize>,
    pub samples: usize,
    pub kappa: f64,
    pub seed: u64,
    pub stepper: Stepper,
    /// Evaluate the EMA shadow instead of the raw parameters.
    pub use_ema: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            nfe: vec![1],
            samples: 1000,
            kappa: 1.0,
            seed: 1,
            stepper: Stepper::FlowMap,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeScore {
    pub nfe: usize,
    pub mmd: MmdValue,
    pub failed: usize,
}

/// Trains `net` on `data` for `cfg.steps` steps, calling `log` after each.
///
/// Stops early with [`Error::Domain`] when the loss has been non-finite for
/// [`DIVERGENCE_STREAK`] consecutive steps.
pub fn train<F: FnMut(&LossStats)>(net: FlowNet, cfg: &ObjectiveConfig, data: &[Vec<f64>], seed: u64, mut log: F) -> Result<Trainer> {
    let mut tr = Trainer::new(net, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.steps {
        let st = tr.step_on_data(data, &mut rng)?;
        log(&st);
        if tr.nonfinite_streak >= DIVERGENCE_STREAK {
            return Err(Error::Domain(format!(
                "training diverged: {} consecutive non-finite steps after {} optimizer steps",
                tr.nonfinite_streak, tr.step
            )));
        }
    }
    Ok(tr)
}

/// Fresh network on the helix's ambient sphere.
pub fn init_net(data: &HelixData, shape: NetShape, cfg: &ObjectiveConfig, seed: u64) -> Result<FlowNet> {
    let m = data.dataset.manifold();
    if shape.ambient_dim != m.ambient_dim() {
        return Err(Error::Dimension {
            expected: m.ambient_dim(),
            got: shape.ambient_dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    FlowNet::init(m, shape, cfg.parameterization, &mut rng)
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn array_of(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ArrayView1::from(&r[..]));
    }
    out
}

/// Samples the model at each requested step count and scores the
/// projected-back samples against the projected reference set.
pub fn evaluate(net: &FlowNet, data: &HelixData, eval: &EvalSpec) -> Result<Vec<NfeScore>> {
    let s2 = Manifold::Sphere(3);
    let reference = array_of(&data.project(&data.reference)?);
    eval.nfe
        .iter()
        .map(|&nfe| {
            let cfg = SamplerConfig {
                nfe,
                seed: eval.seed,
                stepper: eval.stepper,
                ..Default::default()
            };
            let out = sample(net, &cfg, eval.samples, None::<&LinearReward>)?;
            let projected = array_of(&data.project(&rows_of(&out.points))?);
            Ok(NfeScore {
                nfe,
                mmd: mmd(&s2, projected.view(), reference.view(), eval.kappa)?,
                failed: out.failures.len(),
            })
        })
        .collect()
}

/// Everything needed to reproduce one helix training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixRun {
    pub helix: HelixSpec,
    pub shape: NetShape,
    pub objective: ObjectiveConfig,
    pub eval: EvalSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixRunResult {
    pub scores: Vec<NfeScore>,
    pub final_loss: f64,
    /// Mean loss over the last tenth of training.
    pub tail_loss: f64,
    pub skipped_total: u64,
    pub aborted_steps: u64,
    pub steps: u64,
}

impl HelixRun {
    /// Trains on freshly built data and scores the result. Returns the trainer
    /// for checkpointing.
    pub fn execute<F: FnMut(&LossStats)>(&self, mut log: F) -> Result<(HelixRunResult, Trainer, HelixData)> {
        let data = self.helix.build()?;
        let net = init_net(&data, self.shape, &self.objective, self.seed)?;
        let mut losses = Vec::with_capacity(self.objective.steps);
        let mut aborted = 0u64;
        let tr = train(net, &self.objective, &data.train, self.seed, |st| {
            if st.aborted {
                aborted += 1;
            } else {
                losses.push(st.loss);
            }
            log(st);
        })?;
        let eval_net = if self.eval.use_ema { tr.ema_net() } else { tr.net.clone() };
        let scores = evaluate(&eval_net, &data, &self.eval)?;
        let tail = (losses.len() / 10).max(1).min(losses.len());
        let tail_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64
        };
        Ok((
            HelixRunResult {
                scores,
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
                tail_loss,
                skipped_total: tr.skipped_total,
                aborted_steps: aborted,
                steps: tr.step,
            },
            tr,
            data,
        ))
    }
}

/// Mean reward `⟨x, p⟩` over a batch of points.
pub fn mean_linear_reward(points: &Array2<f64>, p: &[f64]) -> f64 {
    if points.nrows() == 0 {
        return f64::NAN;
    }
    points
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / points.nrows() as f64
}

/// Mean reward of one guidance setting over several sampler seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCell {
    pub nfe: usize,
    pub guidance: Guidance,
    pub lambda: f64,
    pub per_seed: Vec<f64>,
    pub median: f64,
    /// Per-sample reward standard deviation, pooled over seeds.
    pub reward_sd: f64,
    pub failed: usize,
}

/// Sweeps step counts and guidance settings for the linear
/// reward `⟨x, pole⟩`, drawing `count` samples for each seed in `1..=seeds`.
/// Unguided sampling appears once per step count with `lambda = 0`.
pub fn guidance_grid<A: AverageVelocity + ?Sized>(
    model: &A,
    pole: &[f64],
    nfes: &[usize],
    lambdas: &[f64],
    seeds: u64,
    count: usize,
    base: &SamplerConfig,
) -> Result<Vec<GuidanceCell>> {
    let d = model.manifold().ambient_dim();
    if pole.len() != d {
        return Err(Error::Dimension { expected: d, got: pole.len() });
    }
    let reward = LinearReward { p: pole.to_vec() };
    let mut cells = Vec::new();
    for &nfe in nfes {
        for guidance in [Guidance::None, Guidance::NaiveState, Guidance::X1Lookahead] {
            let scales: &[f64] = if guidance == Guidance::None { &[0.0] } else { lambdas };
            for &lambda in scales {
                let (mut per_seed, mut var, mut failed) = (Vec::new(), 0.0, 0);
                for seed in 1..=seeds {
                    let cfg = SamplerConfig { nfe, guidance, lambda, seed, ..base.clone() };
                    let out = sample(model, &cfg, count, Some(&reward))?;
                    failed += out.failures.len();
                    let r: Vec<f64> = out.points.rows().into_iter().map(|x| x.iter().zip(pole).map(|(a, b)| a * b).sum()).collect();
                    let mu = mean_linear_reward(&out.points, pole);
                    per_seed.push(mu);
                    if r.len() > 1 {
                        var += r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
                    }
                }
                cells.push(GuidanceCell {
                    nfe,
                    guidance,
                    lambda,
                    median: median(&per_seed),
                    per_seed,
                    reward_sd: (var / seeds.max(1) as f64).sqrt(),
                    failed,
                });
            }
        }
    }
    Ok(cells)
}

/// Best median reward of a guidance kind at a step count over its scales.
pub fn best_median(cells: &[GuidanceCell], nfe: usize, guidance: Guidance) -> f64 {
    cells
        .iter()
        .filter(|c| c.nfe == nfe && c.guidance == guidance)
        .map(|c| c.median)
        .fold(f64::NEG_INFINITY, f64::max)
}
