//! Run configuration: one JSON document with a section per command family.
//!
//! Every field is optional. Unknown keys are rejected with their full path
//! (`train.bogus`), and relative paths are resolved against the directory
//! holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use saekit::data::DirectionInit;
use saekit::metasae::MetaSaeConfig;
use saekit::sae::{SaeConfig, Variant};
use saekit::stitching::DEFAULT_THRESHOLD;
use saekit::trainer::TrainConfig;
use saekit::Dtype;

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every per-section seed when set.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub sae: SaeSection,
    pub train: TrainConfig,
    pub stitch: StitchSection,
    pub meta: MetaSaeConfig,
    pub eval: EvalSection,
    pub autointerp: AutointerpSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Activation file: output of `gen`, input of the other commands.
    pub path: Option<PathBuf>,
    pub n_dims: usize,
    pub groups: Vec<usize>,
    pub init: DirectionInit,
    pub coeff_low: f64,
    pub coeff_high: f64,
    pub noise_std: f64,
    pub group_weights: Option<Vec<Vec<f64>>>,
    /// Feature names per group, used to describe synthetic samples.
    pub group_names: Option<Vec<Vec<String>>>,
    pub count: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            n_dims: 16,
            groups: vec![3, 3],
            init: DirectionInit::Orthonormal,
            coeff_low: 0.5,
            coeff_high: 1.5,
            noise_std: 0.0,
            group_weights: None,
            group_names: None,
            count: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    pub variant: Variant,
    pub m: usize,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub alpha_aux: Option<f64>,
    pub k_aux: Option<usize>,
    pub seed: u64,
    /// Training and storage precision.
    pub dtype: Dtype,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            variant: Variant::TopK,
            m: 32,
            k: None,
            lambda: None,
            alpha_aux: None,
            k_aux: None,
            seed: 0,
            dtype: Dtype::F32,
        }
    }
}

impl SaeSection {
    /// Library config for input dimension `n`; unset fields keep library defaults.
    pub fn to_sae_config(&self, n: usize) -> SaeConfig {
        let mut cfg = SaeConfig::new(self.variant, n, self.m).with_seed(self.seed);
        if let Some(k) = self.k {
            cfg = cfg.with_k(k);
        }
        if let Some(l) = self.lambda {
            cfg = cfg.with_lambda(l);
        }
        if let Some(a) = self.alpha_aux {
            cfg = cfg.with_alpha_aux(a);
        }
        if let Some(k) = self.k_aux {
            cfg = cfg.with_k_aux(k);
        }
        cfg
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StitchSection {
    pub threshold: f64,
    /// Seed for the random order within each interpolation phase.
    pub order_seed: u64,
}

impl Default for StitchSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            order_seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Latents per sparse probe.
    pub top_n: usize,
    /// Latents ablated per class in TPP.
    pub n_ablate: usize,
    /// Label group whose classes TPP separates.
    pub tpp_group: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            top_n: 1,
            n_ablate: 1,
            tpp_group: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum MockKind {
    /// Every reply is the given text.
    Canned(String),
    /// Uniformly random option digits.
    Random,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutointerpSection {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub n_examples: usize,
    /// Latents to explain; all when absent.
    pub latents: Option<Vec<usize>>,
    pub concurrency: usize,
    /// Offline client in place of the HTTP endpoint.
    pub mock: Option<MockKind>,
    pub seed: u64,
}

impl Default for AutointerpSection {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4o-mini".into(),
            token_env: "SAEKIT_API_TOKEN".into(),
            n_examples: 10,
            latents: None,
            concurrency: 4,
            mock: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses `bytes`; relative paths resolve against `base_dir`.
    pub fn parse(bytes: &[u8], base_dir: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                ConfigError(format!("config: {inner}"))
            } else {
                ConfigError(format!("config key {path}: {inner}"))
            }
        })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                cfg.data.path = Some(base_dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&bytes, dir)?)
    }

    /// Applies the global seed (from the command line or the config) to
    /// every section.
    pub fn apply_seed(&mut self, cli_seed: Option<u64>) {
        if let Some(s) = cli_seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.sae.seed = s;
            self.train.seed = s;
            self.stitch.order_seed = s;
            self.meta.seed = s;
            self.eval.seed = s;
            self.autointerp.seed = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_nested_key_is_named() {
        let err = RunConfig::parse(br#"{"train": {"lr": 0.1, "bogus": 1}}"#, Path::new(".")).unwrap_err();
        assert!(err.0.contains("train.bogus"), "{err}");
        let err = RunConfig::parse(br#"{"extra": 1}"#, Path::new(".")).unwrap_err();
        assert!(err.0.contains("extra"), "{err}");
    }

    #[test]
    fn empty_document_takes_defaults() {
        let cfg = RunConfig::parse(b"{}", Path::new(".")).unwrap();
        assert_eq!(cfg.data.groups, vec![3, 3]);
        assert_eq!(cfg.stitch.threshold, DEFAULT_THRESHOLD);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn relative_data_path_follows_the_config() {
        let cfg = RunConfig::parse(br#"{"data": {"path": "acts.saea"}}"#, Path::new("/runs/a")).unwrap();
        assert_eq!(cfg.data.path.unwrap(), PathBuf::from("/runs/a/acts.saea"));
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let mut cfg = RunConfig::parse(br#"{"seed": 3, "train": {"seed": 9}}"#, Path::new(".")).unwrap();
        cfg.apply_seed(None);
        assert_eq!(cfg.train.seed, 3);
        cfg.apply_seed(Some(11));
        assert_eq!((cfg.data.seed, cfg.meta.seed, cfg.stitch.order_seed), (11, 11, 11));
    }
}
