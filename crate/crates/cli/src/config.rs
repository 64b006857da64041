use std::path::{Path, PathBuf};

use hspi::maxlp::SearchConfig;
use hspi::object::Heterogeneity;
use hspi::{DetectorGeometry, LatentConfig, LatentGrid, MaxlpConfig, TargetSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One experiment. Every section except the top-level `seed` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; relative paths are taken from the config file's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub object: ObjectSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub latent_grid: LatentGridSection,
    #[serde(default)]
    pub maxlp: MaxlpSection,
    #[serde(default)]
    pub phase: PhaseSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub side_px: usize,
    /// Defaults to half the side.
    pub aperture_radius_px: Option<f64>,
    pub hole_radius_px: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            side_px: 185,
            aperture_radius_px: None,
            hole_radius_px: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Homogeneous,
    TwoState,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectSection {
    pub kind: ObjectKind,
    pub n_blobs: usize,
    pub blob_radius_px: [f64; 2],
    pub extent_px: f64,
    pub density: f64,
    pub subunit_radius_px: f64,
    pub subunit_density: f64,
    /// Two-state: the subunit sits at plus or minus this offset.
    /// Continuous: the nominal position the displacements are drawn about.
    pub subunit_offset_px: [f64; 2],
    /// Per-axis standard deviation of the continuous displacement.
    pub subunit_sigma_px: f64,
}

impl Default for ObjectSection {
    fn default() -> Self {
        let t = TargetSpec::default();
        Self {
            kind: ObjectKind::Homogeneous,
            n_blobs: t.n_blobs,
            blob_radius_px: [t.blob_radius_px.0, t.blob_radius_px.1],
            extent_px: t.extent_px,
            density: t.density,
            subunit_radius_px: 3.0,
            subunit_density: 1.0,
            subunit_offset_px: [8.0, 0.0],
            subunit_sigma_px: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub contrast: f64,
    pub mean_diameter_px: f64,
    pub sigma_diameter_px: f64,
    pub sigma_shift_px: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        let l = LatentConfig::default();
        Self {
            contrast: 11.0,
            mean_diameter_px: l.mean_diameter_px,
            sigma_diameter_px: l.sigma_diameter_px,
            sigma_shift_px: l.sigma_shift_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_frames: usize,
    pub photons_per_frame: f64,
    pub with_reference: bool,
    /// Also write a reference-free dataset of the same size for the baseline arm.
    pub reference_free_copy: bool,
    pub n_probe: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_frames: 10_000,
            photons_per_frame: 1e4,
            with_reference: true,
            reference_free_copy: false,
            n_probe: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentGridSection {
    pub theta_step_deg: f64,
    pub diameter_step_px: f64,
    pub shift_range_px: f64,
    pub shift_step_px: f64,
}

impl Default for LatentGridSection {
    fn default() -> Self {
        Self {
            theta_step_deg: 2.0,
            diameter_step_px: 0.5,
            shift_range_px: 2.0,
            shift_step_px: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaxlpSection {
    pub n_iter: usize,
    pub min_observations: usize,
    pub min_phase_spread: f64,
    pub friedel: bool,
    pub search: SearchConfig,
}

impl Default for MaxlpSection {
    fn default() -> Self {
        let m = MaxlpConfig::default();
        Self {
            n_iter: m.n_iter,
            min_observations: m.min_observations,
            min_phase_spread: m.min_phase_spread,
            friedel: m.friedel,
            search: m.search,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection {
    pub beta: f64,
    pub n_iter: usize,
    pub q_band: [f64; 2],
    pub threshold_frac: f64,
}

impl Default for PhaseSection {
    fn default() -> Self {
        let p = hspi::phase::PhaseConfig::default();
        Self {
            beta: p.beta,
            n_iter: p.n_iter,
            q_band: p.q_band,
            threshold_frac: p.threshold_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub n_iter: usize,
    pub theta_step_deg: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            n_iter: hspi::EmcConfig::default().n_iter,
            theta_step_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub ring_width_px: f64,
    pub align_step_deg: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            ring_width_px: 1.0,
            align_step_deg: 2.0,
        }
    }
}

/// Independent seeds for the stages, so changing one stage's settings never
/// perturbs another stage's random draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Object,
    Simulate,
    SimulateReferenceFree,
    Maxlp,
    Phase,
    Emc,
    BaselinePhase,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() {
            Path::new(".")
        } else {
            base
        };
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.geometry()?;
        self.target_spec()?;
        self.latent_grid()?;
        self.maxlp_config()?.validate().map_err(CliError::from)?;
        let s = &self.simulate;
        if s.n_frames == 0 {
            return Err(CliError::Config("simulate.n_frames must be at least 1".into()));
        }
        if !(s.photons_per_frame > 0.0) {
            return Err(CliError::Config("simulate.photons_per_frame must be positive".into()));
        }
        if s.n_probe == 0 {
            return Err(CliError::Config("simulate.n_probe must be at least 1".into()));
        }
        if self.phase.n_iter == 0 {
            return Err(CliError::Config("phase.n_iter must be at least 1".into()));
        }
        if self.baseline.n_iter == 0 || !(self.baseline.theta_step_deg > 0.0) {
            return Err(CliError::Config(
                "baseline needs n_iter >= 1 and a positive theta step".into(),
            ));
        }
        if !(self.metrics.ring_width_px > 0.0) || !(self.metrics.align_step_deg > 0.0) {
            return Err(CliError::Config(
                "metrics ring width and alignment step must be positive".into(),
            ));
        }
        if self.object.kind != ObjectKind::Homogeneous && !(self.object.subunit_radius_px > 0.0) {
            return Err(CliError::Config("object.subunit_radius_px must be positive".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, stage: Stage) -> u64 {
        // odd multiplier keeps the per-stage seeds distinct for every base seed
        self.seed
            .wrapping_add((stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn geometry(&self) -> Result<DetectorGeometry, CliError> {
        let g = &self.geometry;
        let aperture = g.aperture_radius_px.unwrap_or(g.side_px as f64 / 2.0);
        DetectorGeometry::new(g.side_px, aperture, g.hole_radius_px).map_err(CliError::from)
    }

    pub fn latent_config(&self) -> LatentConfig {
        LatentConfig {
            mean_diameter_px: self.reference.mean_diameter_px,
            sigma_diameter_px: self.reference.sigma_diameter_px,
            sigma_shift_px: self.reference.sigma_shift_px,
        }
    }

    pub fn target_spec(&self) -> Result<TargetSpec, CliError> {
        let o = &self.object;
        if o.n_blobs == 0 {
            return Err(CliError::Config("object.n_blobs must be at least 1".into()));
        }
        Ok(TargetSpec {
            side_px: self.geometry.side_px,
            n_blobs: o.n_blobs,
            blob_radius_px: (o.blob_radius_px[0], o.blob_radius_px[1]),
            extent_px: o.extent_px,
            density: o.density,
            seed: self.seed_for(Stage::Object),
        })
    }

    pub fn heterogeneity(&self) -> Option<Heterogeneity> {
        let o = &self.object;
        match o.kind {
            ObjectKind::Homogeneous => None,
            ObjectKind::TwoState => Some(Heterogeneity::TwoState {
                offset: o.subunit_offset_px,
            }),
            ObjectKind::Continuous => Some(Heterogeneity::Continuous {
                nominal: o.subunit_offset_px,
                sigma: o.subunit_sigma_px,
            }),
        }
    }

    pub fn latent_grid(&self) -> Result<LatentGrid, CliError> {
        let g = &self.latent_grid;
        LatentGrid::regular(
            g.theta_step_deg,
            &self.latent_config(),
            g.diameter_step_px,
            g.shift_range_px,
            g.shift_step_px,
        )
        .map_err(CliError::from)
    }

    pub fn maxlp_config(&self) -> Result<MaxlpConfig, CliError> {
        let m = &self.maxlp;
        if m.n_iter == 0 {
            return Err(CliError::Config("maxlp.n_iter must be at least 1".into()));
        }
        Ok(MaxlpConfig {
            n_iter: m.n_iter,
            seed: self.seed_for(Stage::Maxlp),
            search: m.search,
            min_observations: m.min_observations,
            min_phase_spread: m.min_phase_spread,
            friedel: m.friedel,
        })
    }

    pub fn phase_config(&self, stage: Stage) -> hspi::phase::PhaseConfig {
        let p = &self.phase;
        hspi::phase::PhaseConfig {
            beta: p.beta,
            n_iter: p.n_iter,
            seed: self.seed_for(stage),
            q_band: p.q_band,
            threshold_frac: p.threshold_frac,
        }
    }

    /// Baseline rotations over a half turn: intensities of a real object are centrosymmetric.
    pub fn baseline_thetas(&self) -> Vec<f64> {
        hspi::metrics::rotation_candidates(self.baseline.theta_step_deg, 180.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3").unwrap();
        assert_eq!(cfg.geometry.side_px, 185);
        assert_eq!(cfg.simulate.n_frames, 10_000);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        cfg.validate().unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(toml::from_str::<RunConfig>("[geometry]\nside_px = 97").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("seed = 1\n[geometry]\nsides = 97").is_err());
        assert!(toml::from_str::<RunConfig>("seed = 1\nbogus = 2").is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg: RunConfig = toml::from_str("seed = 0").unwrap();
        let a = cfg.seed_for(Stage::Object);
        let b = cfg.seed_for(Stage::Simulate);
        assert_ne!(a, b);
    }

    #[test]
    fn zero_iterations_is_a_config_error() {
        let cfg: RunConfig = toml::from_str("seed = 1\n[maxlp]\nn_iter = 0").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn print_round_trip() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[object]\nkind = \"two_state\"").unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
