//! Run configuration: model dimensions, training hyperparameters, simulator
//! noise, ablation flags, and persistence.
//!
//! Configs are JSON with a versioned `schema` field. Unknown keys are
//! rejected. Environment variables prefixed `BRIDGEAD_` override keys 1:1
//! (nested keys joined by `__`, e.g. `BRIDGEAD_TRAIN__EPOCHS=5`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Keyframe period. One cached frame equals one prediction step only at
/// this rate, so other rates are rejected at load.
pub const FRAME_DT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Perception,
    EndToEnd,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_det_reg: f64,
    pub lambda_det_cls: f64,
    pub lambda_map_reg: f64,
    pub lambda_map_cls: f64,
    pub lambda_mot_reg: f64,
    pub lambda_mot_cls: f64,
    pub lambda_plan_reg: f64,
    pub lambda_plan_cls: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub stage: TrainStage,
    pub epochs: usize,
    pub seed: u64,
    /// Use Hungarian-style exhaustive matching instead of greedy
    /// nearest-center for det/map target assignment.
    pub hungarian_matching: bool,
    /// Cap on streaming frames consumed per scenario per epoch.
    pub max_frames_per_scenario: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_det_reg: 0.25,
            lambda_det_cls: 2.0,
            lambda_map_reg: 10.0,
            lambda_map_cls: 1.0,
            lambda_mot_reg: 0.05,
            lambda_mot_cls: 0.1,
            lambda_plan_reg: 1.0,
            lambda_plan_cls: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            base_lr: 1e-4,
            weight_decay: 1e-3,
            stage: TrainStage::EndToEnd,
            epochs: 5,
            seed: 0,
            hungarian_matching: false,
            max_frames_per_scenario: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_det_reg", self.lambda_det_reg),
            ("lambda_det_cls", self.lambda_det_cls),
            ("lambda_map_reg", self.lambda_map_reg),
            ("lambda_map_cls", self.lambda_map_cls),
            ("lambda_mot_reg", self.lambda_mot_reg),
            ("lambda_mot_cls", self.lambda_mot_cls),
            ("lambda_plan_reg", self.lambda_plan_reg),
            ("lambda_plan_cls", self.lambda_plan_cls),
        ];
        for (name, v) in lambdas {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!(
                "focal_alpha must be in [0,1], got {}",
                self.focal_alpha
            )));
        }
        if self.max_frames_per_scenario == 0 {
            return Err(Error::Config(
                "max_frames_per_scenario must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Observation noise. Position noise std is per agent class.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub pos_std_car: f64,
    pub pos_std_pedestrian: f64,
    pub vel_std: f64,
    pub yaw_std: f64,
    pub map_std: f64,
    /// Probability an agent is dropped from a frame (missed detection).
    pub dropout_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pos_std_car: 0.4,
            pos_std_pedestrian: 0.2,
            vel_std: 0.6,
            yaw_std: 0.05,
            map_std: 0.1,
            dropout_prob: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub mot2det: bool,
    pub his_mot: bool,
    pub his_plan: bool,
    pub mot2plan: bool,
    pub step_self_attn: bool,
    pub mode_self_attn: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            mot2det: true,
            his_mot: true,
            his_plan: true,
            mot2plan: true,
            step_self_attn: true,
            mode_self_attn: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub channels: usize,
    pub n_obj_max: usize,
    pub n_map: usize,
    pub map_points: usize,
    pub decoder_layers: usize,
    pub attn_heads: usize,
    pub m_mot: usize,
    pub t_mot: usize,
    pub m_plan: usize,
    pub t_plan: usize,
    pub k_history: usize,
    pub t_m2m: usize,
    pub t_p2p: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            channels: 64,
            n_obj_max: 32,
            n_map: 8,
            map_points: 10,
            decoder_layers: 2,
            attn_heads: 1,
            m_mot: 6,
            t_mot: 12,
            m_plan: 18,
            t_plan: 6,
            k_history: 3,
            t_m2m: 6,
            t_p2p: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema: u32,
    /// When set, forces the published horizon tuple
    /// {t_mot=12, t_plan=6, k_history=3, t_m2m=6, t_p2p=3, m_mot=6}.
    pub paper_preset: bool,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    pub ablation: AblationFlags,
    pub frame_dt: f64,
    pub model_seed: u64,
    pub scenario_seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            paper_preset: false,
            dims: ModelDims::default(),
            train: TrainConfig::default(),
            noise: NoiseConfig::default(),
            ablation: AblationFlags::default(),
            frame_dt: FRAME_DT,
            model_seed: 0,
            scenario_seed: 0,
            out_dir: "runs".to_string(),
        }
    }
}

impl RunConfig {
    pub fn apply_preset(&mut self) {
        if self.paper_preset {
            self.dims.t_mot = 12;
            self.dims.t_plan = 6;
            self.dims.k_history = 3;
            self.dims.t_m2m = 6;
            self.dims.t_p2p = 3;
            self.dims.m_mot = 6;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema: expected {SCHEMA_VERSION}, got {}",
                self.schema
            )));
        }
        let d = &self.dims;
        if d.t_m2m + d.k_history > d.t_mot {
            return Err(Error::Config(format!(
                "t_m2m: must satisfy t_m2m <= t_mot - k_history ({} > {} - {})",
                d.t_m2m, d.t_mot, d.k_history
            )));
        }
        if d.t_p2p + d.k_history > d.t_plan {
            return Err(Error::Config(format!(
                "t_p2p: must satisfy t_p2p <= t_plan - k_history ({} > {} - {})",
                d.t_p2p, d.t_plan, d.k_history
            )));
        }
        if self.paper_preset && d.t_mot != 2 * d.t_plan {
            return Err(Error::Config(format!(
                "t_mot: paper preset requires t_mot = 2 * t_plan, got {} vs {}",
                d.t_mot, d.t_plan
            )));
        }
        if self.frame_dt != FRAME_DT {
            return Err(Error::Config(format!(
                "frame_dt: only {FRAME_DT} s keyframes are supported, got {}",
                self.frame_dt
            )));
        }
        if d.m_plan % 3 != 0 || d.m_plan == 0 {
            return Err(Error::Config(format!(
                "m_plan: must be a positive multiple of 3 (command groups), got {}",
                d.m_plan
            )));
        }
        if d.channels == 0 || d.m_mot == 0 || d.t_plan == 0 {
            return Err(Error::Config("dims: zero-sized model dimension".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob: must be in [0,1], got {}",
                self.noise.dropout_prob
            )));
        }
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        apply_env_overrides(&mut value, std::env::vars());
        let mut cfg: RunConfig = serde_json::from_value(value)?;
        cfg.apply_preset();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Stable hash of the canonical JSON form, embedded into artifacts so
    /// reports can refuse mixed-config aggregation.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Apply `BRIDGEAD_*` environment overrides onto a JSON config value.
/// `BRIDGEAD_TRAIN__EPOCHS=5` sets `train.epochs`. Values parse as JSON
/// first, falling back to a raw string.
pub fn apply_env_overrides<I: Iterator<Item = (String, String)>>(
    value: &mut serde_json::Value,
    vars: I,
) {
    for (key, val) in vars {
        let Some(rest) = key.strip_prefix("BRIDGEAD_") else { continue };
        let path: Vec<String> = rest.split("__").map(|s| s.to_lowercase()).collect();
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut cursor = &mut *value;
        let mut reachable = true;
        for part in parents {
            match cursor {
                serde_json::Value::Object(obj) => {
                    cursor = obj
                        .entry(part.clone())
                        .or_insert_with(|| serde_json::Value::Object(Default::default()));
                }
                _ => {
                    reachable = false;
                    break;
                }
            }
        }
        if !reachable {
            continue;
        }
        if let serde_json::Value::Object(obj) = cursor {
            let parsed = serde_json::from_str(&val)
                .unwrap_or(serde_json::Value::String(val.clone()));
            obj.insert(last.clone(), parsed);
        }
    }
}
