use serde::{Deserialize, Serialize};

use crate::amk_mmd::{DEFAULT_GAMMA, DEFAULT_KERNELS};
use crate::encoder::{EncoderConfig, SgdConfig, StagedLr};
use crate::error::{Error, Result};
use crate::eval::Distance;
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    Vector,
    Image,
}

/// Synthetic dataset settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: DataMode,
    /// Training identities (classifier width).
    pub identities: usize,
    /// Held-out identities used only for evaluation.
    pub test_identities: usize,
    pub samples_per_identity: usize,
    pub latent_dim: usize,
    pub token_dim: usize,
    pub tokens: usize,
    /// Strength of the modality-specific perturbation of the rendering map.
    pub gap: f64,
    pub noise: f64,
    /// Per-sample latent perturbation, growing towards the lower body.
    pub pose: f64,
    /// Probability that a global token is replaced by clutter.
    pub occlusion: f64,
    /// Upper-body proportion seen by the part branch.
    pub ubp: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: DataMode::Vector,
            identities: 16,
            test_identities: 32,
            samples_per_identity: 8,
            latent_dim: 12,
            token_dim: 24,
            tokens: 4,
            gap: 1.0,
            noise: 0.5,
            pose: 1.0,
            occlusion: 0.25,
            ubp: 0.5,
            image_height: 64,
            image_width: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per identity in a batch; identities per batch = batch / K.
    pub k: usize,
    pub schedule: StagedLr,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, k: 4, schedule: StagedLr::default(), sgd: SgdConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub kernels: usize,
    pub gamma: f64,
    /// Learn the softmax kernel weights alongside the encoder.
    pub learn_weights: bool,
    pub weight_lr: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { kernels: DEFAULT_KERNELS, gamma: DEFAULT_GAMMA, learn_weights: false, weight_lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// L2-normalize the intra and cross embeddings inside the objective.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self { hidden: e.hidden, feature_dim: e.feature_dim, embed_dim: e.embed_dim, normalize: true }
    }
}

/// Which components are active (M0 = none, M4 = all).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub ubf: bool,
    pub imdal: bool,
    pub idal: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { ubf: true, imdal: true, idal: true }
    }
}

impl Ablation {
    pub const VARIANTS: [(&'static str, Ablation); 5] = [
        ("M0", Ablation { ubf: false, imdal: false, idal: false }),
        ("M1", Ablation { ubf: true, imdal: false, idal: false }),
        ("M2", Ablation { ubf: true, imdal: true, idal: false }),
        ("M3", Ablation { ubf: true, imdal: false, idal: true }),
        ("M4", Ablation { ubf: true, imdal: true, idal: true }),
    ];

    pub fn by_name(name: &str) -> Result<Ablation> {
        Self::VARIANTS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {name}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ranks: Vec<usize>,
    pub distance: Distance,
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ranks: vec![1, 5, 10, 20], distance: Distance::Euclidean, normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub kernel: KernelConfig,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            token_dim: self.data.token_dim,
            hidden: self.model.hidden,
            feature_dim: self.model.feature_dim,
            embed_dim: self.model.embed_dim,
            classes: self.data.identities,
        }
    }

    /// Identities per batch.
    pub fn p(&self) -> usize {
        self.train.batch_size / self.train.k.max(1)
    }

    /// Loss weights with ablated terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let a = self.ablation;
        LossWeights {
            w_intra: if a.ubf && a.imdal { self.loss.w_intra } else { 0.0 },
            w_inter: if a.idal { self.loss.w_inter } else { 0.0 },
            ..self.loss
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        if d.identities < 4 || d.test_identities < 2 {
            return bad(format!("need ≥ 4 training and ≥ 2 test identities, got {} and {}", d.identities, d.test_identities));
        }
        if d.samples_per_identity < 4 {
            return bad(format!("samples per identity {} < 4", d.samples_per_identity));
        }
        if d.latent_dim == 0 || d.token_dim == 0 || d.tokens == 0 {
            return bad("latent_dim, token_dim and tokens must be ≥ 1".into());
        }
        for (name, v) in [("gap", d.gap), ("noise", d.noise), ("pose", d.pose)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and ≥ 0"));
            }
        }
        if !(0.0..1.0).contains(&d.occlusion) {
            return bad(format!("occlusion {} not in [0, 1)", d.occlusion));
        }
        if !(d.ubp.is_finite() && d.ubp > 0.0 && d.ubp <= 1.0) {
            return bad(format!("ubp {} not in (0, 1]", d.ubp));
        }
        if d.mode == DataMode::Image && (d.image_height < 32 || d.image_width < 32) {
            return bad(format!("image side must be ≥ 32, got {}x{}", d.image_height, d.image_width));
        }
        let t = &self.train;
        if t.k < 2 || !t.batch_size.is_multiple_of(t.k) || t.batch_size / t.k < 2 {
            return bad(format!("batch {} must be P·K with P ≥ 2 and K = {} ≥ 2", t.batch_size, t.k));
        }
        if self.p() > d.identities {
            return bad(format!("P = {} exceeds {} training identities", self.p(), d.identities));
        }
        if t.k > d.samples_per_identity {
            return bad(format!("K = {} exceeds {} samples per identity", t.k, d.samples_per_identity));
        }
        t.schedule.validate()?;
        if !(t.sgd.momentum.is_finite() && (0.0..1.0).contains(&t.sgd.momentum) && t.sgd.weight_decay >= 0.0) {
            return bad(format!("bad optimizer settings {:?}", t.sgd));
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        let k = &self.kernel;
        if k.kernels == 0 || !(k.gamma.is_finite() && k.gamma > 1.0) || !(k.weight_lr.is_finite() && k.weight_lr >= 0.0) {
            return bad(format!("bad kernel settings {k:?}"));
        }
        self.encoder().validate()?;
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return bad("eval ranks must be a non-empty list of positive ranks".into());
        }
        Ok(())
    }
}
