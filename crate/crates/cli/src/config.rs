//! TOML run configuration. Every key has a default and unknown keys are
//! rejected, so a preset is exactly the set of values that differ.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rmflow_core::geometry::Manifold;
use rmflow_core::inference::SamplerConfig;
use rmflow_core::model::NetShape;
use rmflow_core::training::ObjectiveConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds network initialization and batch draws; `--seed` also
    /// overrides `sampler.seed`.
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads for batch parallelism. One thread is bit-exact.
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub sampler: SamplerConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub guide: GuideConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            sampler: SamplerConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            guide: GuideConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Helix on S², isometrically embedded in `ambient_dim` dimensions.
    Helix,
    /// Uniform (Haar) draws on `manifold`.
    Uniform,
    /// Concentrated clusters on S² around `centers`.
    S2Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Manifold written as `sphere(3)`, `so3`, `euclidean(8)` or
    /// `product(sphere(3), so3)`. Empty means the kind's natural manifold.
    pub manifold: String,
    pub ambient_dim: usize,
    pub turns: u32,
    pub train_size: usize,
    pub reference_size: usize,
    pub seed: u64,
    pub centers: Vec<[f64; 3]>,
    pub spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Helix,
            manifold: String::new(),
            ambient_dim: 3,
            turns: 3,
            train_size: 20_000,
            reference_size: 4_000,
            seed: 0,
            centers: vec![[0.0, 0.0, 1.0]],
            spread: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    /// Number of linear layers, the output head included.
    pub layers: usize,
    pub embed_dim: usize,
    pub omega: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = NetShape::new(3, 256, 5);
        ModelConfig {
            width: s.width,
            layers: s.layers,
            embed_dim: s.embed_dim,
            omega: s.omega,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self, ambient_dim: usize) -> NetShape {
        NetShape {
            ambient_dim,
            width: self.width,
            layers: self.layers,
            embed_dim: self.embed_dim,
            omega: self.omega,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Empty means `<out>/model_ema.rmfckpt`.
    pub checkpoint: String,
    pub count: usize,
    /// Pole of the linear reward used when `sampler.guidance` is not `none`.
    pub reward_pole: Vec<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            checkpoint: String::new(),
            count: 1000,
            reward_pole: vec![0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sample batches to score. Empty means `<out>/samples.csv`.
    pub samples: Vec<String>,
    /// Reference CSV. Empty means the held-out split of `data`.
    pub reference: String,
    pub kappa: f64,
    /// Points per half in the split-half noise floor.
    pub floor_half: usize,
    pub floor_splits: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: Vec::new(),
            reference: String::new(),
            kappa: 1.0,
            floor_half: 1000,
            floor_splits: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideConfig {
    pub checkpoint: String,
    pub nfe: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Sampler seeds `1..=seeds` per cell.
    pub seeds: u64,
    pub count: usize,
    pub reward_pole: Vec<f64>,
}

impl Default for GuideConfig {
    fn default() -> Self {
        GuideConfig {
            checkpoint: String::new(),
            nfe: vec![1, 5, 10],
            lambdas: vec![1.0, 10.0, 100.0],
            seeds: 5,
            count: 500,
            reward_pole: vec![0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Empty means `<out>/samples.csv`.
    pub samples: String,
    /// JSON embedding written by `train` for high-dimensional helices.
    /// Empty means rebuilding it from `data`.
    pub embed: String,
    /// Empty means `<out>/samples.svg`.
    pub output: String,
    pub size: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            samples: String::new(),
            embed: String::new(),
            output: String::new(),
            size: 320,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        self.objective.validate()?;
        self.sampler.validate()?;
        self.model.shape(3).validate()?;
        if !self.data.manifold.is_empty() {
            parse_manifold(&self.data.manifold)?;
        }
        Ok(())
    }

    /// The canonical TOML rendering; parsing it yields the same config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical rendering, as lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// `path` if non-empty, otherwise `<out>/default_name`.
    pub fn or_out(&self, path: &str, default_name: &str) -> PathBuf {
        if path.is_empty() {
            self.out_path(default_name)
        } else {
            PathBuf::from(path)
        }
    }
}

/// Parses `sphere(n)`, `so3`, `euclidean(d)` and `product(a, b, ...)`.
pub fn parse_manifold(spec: &str) -> Result<Manifold> {
    let s = spec.trim().to_ascii_lowercase();
    let (name, arg) = match s.find('(') {
        Some(i) => {
            if !s.ends_with(')') {
                bail!("unbalanced parentheses in manifold {spec:?}");
            }
            (s[..i].trim(), Some(&s[i + 1..s.len() - 1]))
        }
        None => (s.as_str(), None),
    };
    let dim = |a: Option<&str>| -> Result<usize> {
        let a = a.with_context(|| format!("{name} needs a dimension, e.g. {name}(3)"))?;
        a.trim().parse().with_context(|| format!("bad dimension {a:?} in {spec:?}"))
    };
    let m = match name {
        "so3" if arg.is_none() => Manifold::So3,
        "sphere" => Manifold::Sphere(dim(arg)?),
        "euclidean" => Manifold::Euclidean(dim(arg)?),
        "product" => {
            let inner = arg.context("product needs factors")?;
            let factors = split_top_level(inner).into_iter().map(parse_manifold).collect::<Result<Vec<_>>>()?;
            Manifold::Product(factors)
        }
        _ => bail!("unknown manifold {spec:?}"),
    };
    m.validate()?;
    Ok(m)
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

pub fn manifold_name(m: &Manifold) -> String {
    match m {
        Manifold::Euclidean(d) => format!("euclidean({d})"),
        Manifold::Sphere(n) => format!("sphere({n})"),
        Manifold::So3 => "so3".into(),
        Manifold::Product(fs) => format!("product({})", fs.iter().map(manifold_name).collect::<Vec<_>>().join(", ")),
    }
}
