//! TOML pipeline configuration. Every section is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsepose::camera::DepthRange;
use sparsepose::heatmap::HeatmapParams;
use sparsepose::pose::{IcpParams, VotingParams};
use sparsepose::synth::{BinSpec, CameraRig, NoiseParams};
use sparsepose::tsdf::TsdfConfig;
use sparsepose::Vec3;
use sparsepose_nn::attention::AttentionConfig;
use sparsepose_nn::pipeline::PipelineParams;
use sparsepose_nn::LossWeights;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub fusion: FusionConfig,
    pub heatmap: HeatmapConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub voting: VotingConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub theta_mm: f64,
    pub coarse_factor: usize,
    /// TSDF truncation in voxels.
    pub tsdf_truncation_voxels: f64,
    pub tsdf_block_voxels: usize,
    pub depth_near_m: f64,
    pub depth_far_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub sigma_c: f64,
    pub sigma_b: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub reweight_features: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub topk_ratio: f64,
    pub topk_min: usize,
    pub topk_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub channels: usize,
    pub heads: usize,
    pub window_small: usize,
    pub window_medium: usize,
    /// Scale attention logits by 1/√D.
    pub scaled_attention: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// λ for RoI, objectness, class, translation, rotation.
    pub weights: [f64; 5],
    pub smooth_l1_delta_mm: f64,
    pub chamfer_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VotingConfig {
    pub dbscan_eps_voxels: f64,
    pub dbscan_min_pts: usize,
    pub top_fraction: f64,
    pub refine: bool,
    pub icp_max_iters: usize,
    pub icp_corr_voxels: f64,
    pub icp_tolerance: f64,
    pub visibility_voxels: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub objects: usize,
    pub bin_min_mm: [f64; 3],
    pub bin_max_mm: [f64; 3],
    pub wall_height_mm: f64,
    pub views: usize,
    pub arc_deg: f64,
    pub elevation_deg: f64,
    pub camera_distance_m: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    pub noise_sigma_mm: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub auc_max_m: f64,
    /// Also report MSSD recall at absolute 5…50 mm thresholds.
    pub mssd_mm: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            fusion: FusionConfig::default(),
            heatmap: HeatmapConfig::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            voting: VotingConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { theta_mm: 4.0, coarse_factor: 10, tsdf_truncation_voxels: 8.0, tsdf_block_voxels: 8, depth_near_m: 0.05, depth_far_m: 5.0 }
    }
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        let h = HeatmapParams::<f64>::default();
        Self {
            sigma_c: h.sigma_c,
            sigma_b: h.sigma_b,
            alpha: h.alpha,
            gamma: h.gamma,
            beta: h.beta,
            epsilon: h.epsilon,
            kappa: h.kappa,
            reweight_features: false,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            topk_ratio: 0.5,
            topk_min: 16,
            topk_max: 20_000,
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { channels: 32, heads: 4, window_small: 4, window_medium: 8, scaled_attention: true }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default().to_array(), smooth_l1_delta_mm: 10.0, chamfer_points: 128 }
    }
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self {
            dbscan_eps_voxels: 5.0,
            dbscan_min_pts: 5,
            top_fraction: 0.5,
            refine: true,
            icp_max_iters: 30,
            icp_corr_voxels: 4.0,
            icp_tolerance: 1e-5,
            visibility_voxels: 0.5,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 600, lr: 0.02, momentum: 0.9, warmup_fraction: 0.2, clip_norm: 5.0 }
    }
}

impl Default for SynthConfig {
    /// A 160 × 160 mm bin with three objects, seen by the default three-view rig.
    fn default() -> Self {
        let rig = CameraRig::default();
        let noise = NoiseParams::default();
        Self {
            objects: 3,
            bin_min_mm: [-80.0, -80.0, 0.0],
            bin_max_mm: [80.0, 80.0, 150.0],
            wall_height_mm: 40.0,
            views: rig.views,
            arc_deg: rig.arc.to_degrees(),
            elevation_deg: rig.elevation.to_degrees(),
            camera_distance_m: rig.distance,
            image_width: rig.width,
            image_height: rig.height,
            focal_px: rig.focal,
            noise_sigma_mm: noise.sigma * 1e3,
            dropout: noise.dropout,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { auc_max_m: 0.1, mssd_mm: false }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn theta(&self) -> f64 {
        self.fusion.theta_mm * 1e-3
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline_params()?;
        self.tsdf_config(self.theta())?;
        check_bin(&self.bin())?;
        let s = &self.synth;
        if s.objects == 0 || s.views == 0 || s.image_width == 0 || s.image_height == 0 || !(s.focal_px > 0.0) || !(s.camera_distance_m > 0.0) {
            return Err(CliError::Config("synth needs objects, views, image size, focal length and camera distance to be positive".into()));
        }
        if !(s.noise_sigma_mm >= 0.0) || !(0.0..1.0).contains(&s.dropout) {
            return Err(CliError::Config("noise sigma must be non-negative and dropout in [0, 1)".into()));
        }
        if !(self.fusion.depth_near_m > 0.0 && self.fusion.depth_near_m < self.fusion.depth_far_m) {
            return Err(CliError::Config("depth range must satisfy 0 < near < far".into()));
        }
        if !(self.eval.auc_max_m > 0.0) {
            return Err(CliError::Config("AUC threshold must be positive".into()));
        }
        if !(self.voting.top_fraction > 0.0 && self.voting.top_fraction <= 1.0) || self.voting.dbscan_min_pts == 0 || self.voting.icp_max_iters == 0 {
            return Err(CliError::Config("voting needs top_fraction in (0, 1] and positive min_pts and ICP iterations".into()));
        }
        if !(self.voting.dbscan_eps_voxels > 0.0 && self.voting.icp_corr_voxels > 0.0 && self.voting.visibility_voxels > 0.0 && self.voting.icp_tolerance >= 0.0) {
            return Err(CliError::Config("voting radii must be positive".into()));
        }
        Ok(())
    }

    pub fn voting_params(&self, theta: f64) -> VotingParams<f64> {
        let v = &self.voting;
        VotingParams {
            eps: v.dbscan_eps_voxels * theta,
            min_pts: v.dbscan_min_pts,
            top_fraction: v.top_fraction,
            icp: IcpParams { max_iters: v.icp_max_iters, corr_dist: v.icp_corr_voxels * theta, tol: v.icp_tolerance },
            visibility_tol: v.visibility_voxels * theta,
            refine: v.refine,
        }
    }

    pub fn pipeline_params(&self) -> Result<PipelineParams> {
        let theta = self.theta();
        let h = &self.heatmap;
        let n = &self.network;
        let mut attention = AttentionConfig::new(n.channels, n.heads, n.window_small, n.window_medium).map_err(config_err)?;
        attention.scaled = n.scaled_attention;
        let p = PipelineParams {
            theta,
            coarse_factor: self.fusion.coarse_factor,
            depth_range: DepthRange { near: self.fusion.depth_near_m, far: self.fusion.depth_far_m },
            heat: HeatmapParams { sigma_c: h.sigma_c, sigma_b: h.sigma_b, alpha: h.alpha, gamma: h.gamma, beta: h.beta, epsilon: h.epsilon, kappa: h.kappa },
            reweight_features: h.reweight_features,
            focal_alpha: h.focal_alpha,
            focal_gamma: h.focal_gamma,
            topk_ratio: h.topk_ratio,
            topk_min: h.topk_min,
            topk_max: h.topk_max,
            weights: LossWeights::from_array(self.loss.weights),
            smooth_l1_delta: self.loss.smooth_l1_delta_mm * 1e-3,
            chamfer_points: self.loss.chamfer_points,
            attention,
            voting: self.voting_params(theta),
            lr: self.train.lr,
            momentum: self.train.momentum,
            warmup_fraction: self.train.warmup_fraction,
            clip_norm: self.train.clip_norm,
        };
        p.validate().map_err(config_err)?;
        Ok(p)
    }

    pub fn tsdf_config(&self, theta: f64) -> Result<TsdfConfig<f64>> {
        TsdfConfig::with_truncation(theta, self.fusion.tsdf_block_voxels, self.fusion.tsdf_truncation_voxels * theta).map_err(config_err)
    }

    pub fn bin(&self) -> BinSpec {
        let s = &self.synth;
        let mm = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]).scale(1e-3);
        BinSpec::new(mm(s.bin_min_mm), mm(s.bin_max_mm), s.wall_height_mm * 1e-3)
    }

    pub fn rig(&self) -> CameraRig {
        let s = &self.synth;
        CameraRig {
            views: s.views,
            arc: s.arc_deg.to_radians(),
            elevation: s.elevation_deg.to_radians(),
            distance: s.camera_distance_m,
            width: s.image_width,
            height: s.image_height,
            focal: s.focal_px,
        }
    }

    pub fn noise(&self) -> NoiseParams {
        NoiseParams { sigma: self.synth.noise_sigma_mm * 1e-3, dropout: self.synth.dropout }
    }
}

fn check_bin(bin: &BinSpec) -> Result<()> {
    if (0..3).all(|i| bin.min[i] < bin.max[i]) && bin.wall_height > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config("bin needs min < max on every axis and a positive wall height".into()))
    }
}
