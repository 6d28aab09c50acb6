use std::path::Path;

use anyhow::{bail, Context};
use facerig::dynamic_detail::MaskNormalization;
use facerig::fitting::FitConfig;
use facerig::morphable::TuckerMethod;
use facerig::registration::NicpConfig;
use facerig::synthetic::{PopulationConfig, ResolutionTier, WrinkleSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub expressions: usize,
    pub tier: ResolutionTier,
    pub wrinkle: WrinkleSpec,
    pub truth_map_resolution: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let p = PopulationConfig::default();
        Self {
            identities: p.identities,
            expressions: p.expressions,
            tier: p.tier,
            wrinkle: p.wrinkle,
            truth_map_resolution: p.truth_map_resolution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub rank_id: usize,
    pub rank_exp: usize,
    pub method: TuckerMethod,
    pub albedo_components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rank_id: 5,
            rank_exp: 3,
            method: TuckerMethod::Hosvd,
            albedo_components: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BakeConfig {
    pub resolution: usize,
    /// Loop subdivision levels used when measuring the reconstruction.
    pub subdiv: usize,
    pub smooth_raw: bool,
}

impl Default for BakeConfig {
    fn default() -> Self {
        Self {
            resolution: 1024,
            subdiv: 2,
            smooth_raw: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { size: 256 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub normalization: MaskNormalization,
    pub subdiv: usize,
    /// Blendshape weights of the emitted detailed mesh; all zero when absent.
    pub alpha: Option<Vec<f64>>,
}

/// Settings for every command; paths are given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub nicp: NicpConfig,
    pub model: ModelConfig,
    pub bake: BakeConfig,
    pub render: RenderConfig,
    pub fit: FitConfig,
    pub rig: RigConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                seed: 7,
                ..Self::default()
            });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.population().validate()?;
        self.nicp.validate()?;
        self.fit.validate()?;
        if self.model.rank_id == 0 || self.model.rank_exp == 0 || self.model.albedo_components == 0 {
            bail!("model ranks and albedo components must be positive");
        }
        if !facerig::displacement::RESOLUTIONS.contains(&self.bake.resolution) {
            bail!(
                "bake resolution {} is not one of {:?}",
                self.bake.resolution,
                facerig::displacement::RESOLUTIONS
            );
        }
        if self.render.size == 0 || self.render.size > facerig::render::MAX_RESOLUTION {
            bail!("render size must lie in 1..={}", facerig::render::MAX_RESOLUTION);
        }
        if self.threads == Some(0) {
            bail!("thread count must be positive");
        }
        if let Some(a) = &self.rig.alpha {
            if a.iter().any(|x| !(0.0..=1.0).contains(x)) {
                bail!("rig alpha entries must lie in [0,1]");
            }
        }
        Ok(())
    }

    pub fn population(&self) -> PopulationConfig {
        PopulationConfig {
            identities: self.synth.identities,
            expressions: self.synth.expressions,
            seed: self.seed,
            tier: self.synth.tier,
            wrinkle: self.synth.wrinkle,
            truth_map_resolution: self.synth.truth_map_resolution,
        }
    }
}
