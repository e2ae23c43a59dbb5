//! Pipeline configuration, read from TOML with strict key checking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{default_moe_sites, Lambdas, LrSchedule};
use crate::upcycle::{ClusterInitOptions, InitMethod, LayerLayout, UpcycleMethod};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub h: usize,
    pub blocks: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            h: 64,
            blocks: 4,
            n_classes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_clusters: usize,
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 64000,
            n_eval: 2000,
            n_clusters: 8,
            separation: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub k: usize,
    pub capacity_train: f64,
    pub capacity_eval: f64,
    pub router_scale: f64,
    /// Block indices to upcycle; every other block when absent.
    pub sites: Option<Vec<usize>>,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 8,
            k: 2,
            capacity_train: 1.5,
            capacity_eval: 2.0,
            router_scale: crate::upcycle::DEFAULT_ROUTER_SCALE,
            sites: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub method: InitMethod,
    pub drop_ratio: f64,
    pub svd_fraction: f64,
    pub tau: f64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub pca_dim: Option<usize>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            method: InitMethod::ClusterAware,
            drop_ratio: 0.5,
            svd_fraction: 0.25,
            tau: crate::upcycle::DEFAULT_TAU,
            kmeans_restarts: crate::upcycle::DEFAULT_KMEANS_RESTARTS,
            kmeans_max_iters: crate::clustering::DEFAULT_MAX_ITERS,
            pca_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub log_every: usize,
}

impl Default for DenseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 0.05,
            batch_size: 64,
            schedule: LrSchedule::Constant,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub lambda_lb: f64,
    pub lambda_eesd: f64,
    pub beta: f64,
    pub eesd: bool,
    pub log_every: usize,
}

impl Default for MoeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            batch_size: 64,
            schedule: LrSchedule::Constant,
            lambda_lb: crate::train::DEFAULT_LAMBDA_LB,
            lambda_eesd: crate::distill::DEFAULT_LAMBDA_EESD,
            beta: crate::distill::DEFAULT_BETA,
            eesd: false,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_samples: usize,
    pub token_cap: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            token_cap: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tokens: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            tokens: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Adds the distillation loss to the cluster-aware run only.
    pub cluster_eesd: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { cluster_eesd: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub threads: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub moe: MoeConfig,
    pub init: InitConfig,
    pub dense_train: DenseTrainConfig,
    pub moe_train: MoeTrainConfig,
    pub calibration: CalibrationConfig,
    pub gradcheck: GradCheckConfig,
    pub compare: CompareConfig,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(msg()))
    }
}

fn positive_finite(name: &str, v: f64) -> Result<()> {
    check(v > 0.0 && v.is_finite(), || format!("{name} must be positive and finite, got {v}"))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check(m.d >= 2, || format!("model.d = {} < 2", m.d))?;
        check(m.h >= 1, || "model.h must be >= 1".into())?;
        check(m.blocks >= 1, || "model.blocks must be >= 1".into())?;
        check(m.n_classes >= 2, || "model.n_classes must be >= 2".into())?;

        let d = &self.data;
        check(d.n_clusters >= m.n_classes, || {
            format!("data.n_clusters {} < model.n_classes {}", d.n_clusters, m.n_classes)
        })?;
        check(d.n_train >= 1 && d.n_eval >= 1, || "data sizes must be >= 1".into())?;
        positive_finite("data.separation", d.separation)?;

        let e = &self.moe;
        check(e.n_experts >= 1, || "moe.n_experts must be >= 1".into())?;
        check(e.k >= 1 && e.k <= e.n_experts, || {
            format!("moe.k = {} with {} experts", e.k, e.n_experts)
        })?;
        positive_finite("moe.capacity_train", e.capacity_train)?;
        positive_finite("moe.capacity_eval", e.capacity_eval)?;
        positive_finite("moe.router_scale", e.router_scale)?;
        let sites = self.sites();
        check(!sites.is_empty(), || "no MoE sites".into())?;
        check(sites.iter().all(|&s| s < m.blocks), || {
            format!("moe.sites {sites:?} outside {} blocks", m.blocks)
        })?;
        check(sites.windows(2).all(|w| w[0] < w[1]), || {
            "moe.sites must be strictly increasing".into()
        })?;

        let i = &self.init;
        check(i.tau > 0.0 && i.tau <= 1.0, || format!("init.tau = {}", i.tau))?;
        check((0.0..=1.0).contains(&i.drop_ratio), || format!("init.drop_ratio = {}", i.drop_ratio))?;
        check((0.0..1.0).contains(&i.svd_fraction), || {
            format!("init.svd_fraction = {}", i.svd_fraction)
        })?;
        check(i.kmeans_restarts >= 1 && i.kmeans_max_iters >= 1, || {
            "k-means restarts and iterations must be >= 1".into()
        })?;
        if let Some(p) = i.pca_dim {
            check(p >= 1 && p <= m.d, || format!("init.pca_dim = {p}"))?;
        }

        let t = &self.dense_train;
        check(t.lr >= 0.0 && t.lr.is_finite(), || format!("dense_train.lr = {}", t.lr))?;
        check(t.batch_size >= 1, || "dense_train.batch_size must be >= 1".into())?;
        t.schedule.validate()?;
        let t = &self.moe_train;
        check(t.lr >= 0.0 && t.lr.is_finite(), || format!("moe_train.lr = {}", t.lr))?;
        check(t.batch_size >= 1, || "moe_train.batch_size must be >= 1".into())?;
        t.schedule.validate()?;
        check(t.lambda_lb >= 0.0 && t.lambda_lb.is_finite(), || "moe_train.lambda_lb".into())?;
        check(t.lambda_eesd >= 0.0 && t.lambda_eesd.is_finite(), || {
            "moe_train.lambda_eesd".into()
        })?;
        check((0.0..=1.0).contains(&t.beta), || format!("moe_train.beta = {}", t.beta))?;

        let c = &self.calibration;
        check(c.token_cap >= e.n_experts, || {
            format!("calibration.token_cap {} < moe.n_experts", c.token_cap)
        })?;
        check(c.n_samples >= e.n_experts, || {
            format!("calibration.n_samples {} < moe.n_experts", c.n_samples)
        })?;

        let g = &self.gradcheck;
        check((1e-6..=1e-3).contains(&g.epsilon), || {
            format!("gradcheck.epsilon = {} outside [1e-6, 1e-3]", g.epsilon)
        })?;
        check(g.tokens >= 1, || "gradcheck.tokens must be >= 1".into())?;
        Ok(())
    }

    pub fn sites(&self) -> Vec<usize> {
        self.moe
            .sites
            .clone()
            .unwrap_or_else(|| default_moe_sites(self.model.blocks))
    }

    pub fn layout(&self) -> LayerLayout {
        LayerLayout {
            n_experts: self.moe.n_experts,
            k: self.moe.k,
            capacity_factor: self.moe.capacity_train,
        }
    }

    pub fn lambdas(&self, eesd: bool) -> Lambdas {
        Lambdas {
            lb: self.moe_train.lambda_lb,
            eesd: if eesd { self.moe_train.lambda_eesd } else { 0.0 },
        }
    }

    pub fn upcycle_method(&self, method: InitMethod) -> UpcycleMethod {
        match method {
            InitMethod::Sparse => UpcycleMethod::Sparse,
            InitMethod::Drop => UpcycleMethod::Drop {
                ratio: self.init.drop_ratio,
            },
            InitMethod::DropSvd => UpcycleMethod::DropSvd {
                fraction: self.init.svd_fraction,
            },
            InitMethod::ClusterAware => UpcycleMethod::ClusterAware(ClusterInitOptions {
                tau: self.init.tau,
                kmeans_restarts: self.init.kmeans_restarts,
                kmeans_max_iters: self.init.kmeans_max_iters,
                pca_dim: self.init.pca_dim,
                threads: self.threads.max(1),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        let json = cfg.to_json_value();
        let back: PipelineConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.sites(), vec![1, 3]);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 9\n[moe]\nk = 1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.moe.k, 1);
        assert_eq!(cfg.moe.n_experts, 8);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        assert!(PipelineConfig::from_toml_str("sed = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("[moe]\nexperts = 4\n").is_err());
        assert!(PipelineConfig::from_toml_str("[moe]\nk = 9\n").is_err());
        assert!(PipelineConfig::from_toml_str("[init]\ntau = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[init]\nmethod = \"bogus\"\n").is_err());
        assert!(PipelineConfig::from_toml_str("[gradcheck]\nepsilon = 0.1\n").is_err());
        assert!(PipelineConfig::from_toml_str("[moe]\nsites = [5]\n").is_err());
        assert!(PipelineConfig::from_toml_str("[moe]\ncapacity_eval = inf\n").is_err());
    }

    #[test]
    fn method_mapping() {
        let cfg = PipelineConfig::default();
        for m in InitMethod::ALL {
            assert_eq!(cfg.upcycle_method(m).kind(), m);
        }
        assert_eq!(cfg.lambdas(false).eesd, 0.0);
        assert_eq!(cfg.lambdas(true).eesd, 1.0);
    }
}
