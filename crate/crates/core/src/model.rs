//! Architecture configuration and the bundle of all trainable networks.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::expression_encoder::ExpressionEncoder;
use crate::linalg::Real;
use crate::nelf_renderer::SrNet;
use crate::nn::{Module, ResMlp, ResMlpConfig, Tensor};
use crate::ray_geometry::{pe_factor, RayRepConfig};

/// Upsampling factor of the super-resolution network (two ×2 stages).
pub const SR_SCALE: usize = 4;

/// Number of outputs of the warp network: axis-angle, rotation centre, translation.
pub const WARP_OUTPUTS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionMode {
    /// Attention-weighted local feature bank, `I_exp = W · Z`.
    Attention,
    /// Baseline: positionally encoded raw code concatenated to the ray encoding.
    RawCode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub ray: RayRepConfig,
    /// Expression code dimension.
    pub expr_dim: usize,
    pub expression: ExpressionMode,
    /// Positionally encode the code before the local-feature and attention networks.
    pub encode_expression: bool,
    /// Octaves used whenever the code is encoded (always, in raw-code mode).
    pub expr_pe_freqs: usize,
    /// Rows of the local feature bank.
    pub bank_rows: usize,
    /// Feature width of the bank (= width of the expression representation).
    pub bank_dim: usize,
    pub encoder_width: usize,
    pub encoder_blocks: usize,
    pub nelf_width: usize,
    pub nelf_blocks: usize,
    pub sr_width: usize,
    pub sr_blocks: usize,
    pub warp_width: usize,
    pub warp_blocks: usize,
    pub warp_pe_freqs: usize,
    pub latent_dim: usize,
    /// Rows of the per-frame latent table (number of real training frames).
    pub latent_count: usize,
    /// Extend the ray encoding with shoulder-frame points.
    pub shoulder: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    /// Small configuration sized for CPU training.
    pub fn desk() -> Self {
        ArchConfig {
            ray: RayRepConfig::default(),
            expr_dim: 4,
            expression: ExpressionMode::Attention,
            encode_expression: false,
            expr_pe_freqs: 4,
            bank_rows: 16,
            bank_dim: 32,
            encoder_width: 64,
            encoder_blocks: 2,
            nelf_width: 64,
            nelf_blocks: 4,
            sr_width: 24,
            sr_blocks: 3,
            warp_width: 32,
            warp_blocks: 2,
            warp_pe_freqs: 4,
            latent_dim: 16,
            latent_count: 200,
            shoulder: false,
        }
    }

    /// Full-size configuration (used for FLOPs accounting).
    pub fn full() -> Self {
        ArchConfig {
            ray: RayRepConfig { samples: 16, near: 1.2, far: 4.2, pe_freqs: 6, include_input: true },
            expr_dim: 50,
            bank_rows: 64,
            bank_dim: 128,
            encoder_width: 128,
            encoder_blocks: 2,
            nelf_width: 128,
            nelf_blocks: 10,
            sr_width: 56,
            sr_blocks: 5,
            warp_width: 128,
            warp_blocks: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ray.validate()?;
        ensure!(self.expr_dim >= 1, Config, "expr_dim must be ≥ 1");
        ensure!(self.bank_rows >= 1 && self.bank_dim >= 1, Config, "feature bank must be non-empty");
        for (name, v) in [
            ("encoder_width", self.encoder_width),
            ("nelf_width", self.nelf_width),
            ("sr_width", self.sr_width),
            ("warp_width", self.warp_width),
            ("latent_dim", self.latent_dim),
        ] {
            ensure!(v >= 1, Config, "{name} must be ≥ 1");
        }
        Ok(())
    }

    pub fn ray_dim(&self) -> usize {
        self.ray.encoded_len(self.shoulder)
    }

    /// Width of the code as seen by the local-feature and attention networks.
    pub fn encoder_code_dim(&self) -> usize {
        if self.encode_expression {
            self.expr_dim * pe_factor(self.expr_pe_freqs, true)
        } else {
            self.expr_dim
        }
    }

    /// Width of the expression part of the NeLF input.
    pub fn expr_rep_dim(&self) -> usize {
        match self.expression {
            ExpressionMode::Attention => self.bank_dim,
            ExpressionMode::RawCode => self.expr_dim * pe_factor(self.expr_pe_freqs, true),
        }
    }

    pub fn nelf_input_dim(&self) -> usize {
        self.ray_dim() + self.expr_rep_dim()
    }

    pub fn warp_input_dim(&self) -> usize {
        3 * pe_factor(self.warp_pe_freqs, true) + self.latent_dim
    }

    pub fn nelf_mlp(&self) -> ResMlpConfig {
        ResMlpConfig {
            input: self.nelf_input_dim(),
            width: self.nelf_width,
            blocks: self.nelf_blocks,
            output: 3,
            long_skip: true,
        }
    }

    pub fn local_feature_mlp(&self) -> ResMlpConfig {
        ResMlpConfig {
            input: self.encoder_code_dim(),
            width: self.encoder_width,
            blocks: self.encoder_blocks,
            output: self.bank_rows * self.bank_dim,
            long_skip: false,
        }
    }

    pub fn attention_mlp(&self) -> ResMlpConfig {
        ResMlpConfig {
            input: self.ray_dim() + self.encoder_code_dim(),
            width: self.encoder_width,
            blocks: self.encoder_blocks,
            output: self.bank_rows,
            long_skip: false,
        }
    }

    pub fn warp_mlp(&self) -> ResMlpConfig {
        ResMlpConfig {
            input: self.warp_input_dim(),
            width: self.warp_width,
            blocks: self.warp_blocks,
            output: WARP_OUTPUTS,
            long_skip: false,
        }
    }

    /// 64-bit fingerprint of the architecture, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("architecture config serialises");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Instrumentation of network evaluations, used to assert the single-pass
/// contract.
#[derive(Debug, Default)]
pub struct EvalCounters {
    pub nelf_rays: AtomicU64,
    pub attention_rays: AtomicU64,
    pub local_feature_frames: AtomicU64,
    pub sr_passes: AtomicU64,
    pub warp_points: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub nelf_rays: u64,
    pub attention_rays: u64,
    pub local_feature_frames: u64,
    pub sr_passes: u64,
    pub warp_points: u64,
}

impl EvalCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            nelf_rays: self.nelf_rays.load(Ordering::Relaxed),
            attention_rays: self.attention_rays.load(Ordering::Relaxed),
            local_feature_frames: self.local_feature_frames.load(Ordering::Relaxed),
            sr_passes: self.sr_passes.load(Ordering::Relaxed),
            warp_points: self.warp_points.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.nelf_rays, &self.attention_rays, &self.local_feature_frames, &self.sr_passes, &self.warp_points] {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub(crate) fn add(counter: &AtomicU64, n: usize) {
        counter.fetch_add(n as u64, Ordering::Relaxed);
    }
}

impl Clone for EvalCounters {
    fn clone(&self) -> Self {
        let s = self.snapshot();
        EvalCounters {
            nelf_rays: AtomicU64::new(s.nelf_rays),
            attention_rays: AtomicU64::new(s.attention_rays),
            local_feature_frames: AtomicU64::new(s.local_feature_frames),
            sr_passes: AtomicU64::new(s.sr_passes),
            warp_points: AtomicU64::new(s.warp_points),
        }
    }
}

/// Trainable parameter groups, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    LocalFeature,
    Attention,
    Nelf,
    Sr,
    Warp,
    Latents,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::LocalFeature,
        ParamGroup::Attention,
        ParamGroup::Nelf,
        ParamGroup::Sr,
        ParamGroup::Warp,
        ParamGroup::Latents,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::LocalFeature => "local_feature",
            ParamGroup::Attention => "attention",
            ParamGroup::Nelf => "nelf",
            ParamGroup::Sr => "sr",
            ParamGroup::Warp => "warp",
            ParamGroup::Latents => "latents",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

/// Parameters of every network plus the per-frame latent table.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub arch: ArchConfig,
    /// Absent in raw-code mode.
    pub encoder: Option<ExpressionEncoder<T>>,
    pub nelf: ResMlp<T>,
    pub sr: SrNet<T>,
    pub warp: ResMlp<T>,
    /// `latent_count × latent_dim`.
    pub latents: Tensor<T>,
    pub counters: EvalCounters,
}

impl<T: Real> ModelBundle<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match arch.expression {
            ExpressionMode::Attention => Some(ExpressionEncoder::new(arch, &mut rng)),
            ExpressionMode::RawCode => None,
        };
        let nelf = ResMlp::new("nelf", arch.nelf_mlp(), None, &mut rng);
        let sr = SrNet::new(arch.sr_width, arch.sr_blocks, &mut rng);
        // Zero tail: the warp starts as the exact identity.
        let warp = ResMlp::new("warp", arch.warp_mlp(), Some(0.0), &mut rng);
        let latents = Tensor::normal("latents.table", &[arch.latent_count, arch.latent_dim], 0.1, &mut rng);
        Ok(ModelBundle { arch: arch.clone(), encoder, nelf, sr, warp, latents, counters: EvalCounters::default() })
    }

    pub fn group_tensors(&self, group: ParamGroup) -> Vec<&Tensor<T>> {
        match group {
            ParamGroup::LocalFeature => self.encoder.as_ref().map(|e| e.local_feature.tensors()).unwrap_or_default(),
            ParamGroup::Attention => self.encoder.as_ref().map(|e| e.attention.tensors()).unwrap_or_default(),
            ParamGroup::Nelf => self.nelf.tensors(),
            ParamGroup::Sr => self.sr.tensors(),
            ParamGroup::Warp => self.warp.tensors(),
            ParamGroup::Latents => vec![&self.latents],
        }
    }

    pub fn group_tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor<T>> {
        match group {
            ParamGroup::LocalFeature => self.encoder.as_mut().map(|e| e.local_feature.tensors_mut()).unwrap_or_default(),
            ParamGroup::Attention => self.encoder.as_mut().map(|e| e.attention.tensors_mut()).unwrap_or_default(),
            ParamGroup::Nelf => self.nelf.tensors_mut(),
            ParamGroup::Sr => self.sr.tensors_mut(),
            ParamGroup::Warp => self.warp.tensors_mut(),
            ParamGroup::Latents => vec![&mut self.latents],
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        let mut out = ModelBundle::<U>::new(&self.arch, 0).expect("validated architecture");
        out.load_from(self);
        out
    }
}

impl<T: Real> Module<T> for ModelBundle<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        ParamGroup::ALL.iter().flat_map(|&g| self.group_tensors(g)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let ModelBundle { encoder, nelf, sr, warp, latents, .. } = self;
        let mut out = Vec::new();
        if let Some(e) = encoder {
            out.extend(e.local_feature.tensors_mut());
            out.extend(e.attention.tensors_mut());
        }
        out.extend(nelf.tensors_mut());
        out.extend(sr.tensors_mut());
        out.extend(warp.tensors_mut());
        out.push(latents);
        out
    }
}
