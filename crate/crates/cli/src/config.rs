//! Pipeline configuration: one TOML file covering every stage. All fields
//! have defaults; `relidar config --dump-defaults` prints them.

use relidar_core::decomp::{DecompConfig, IcpParams};
use relidar_core::field::{FitConfig, LossWeights, TraceParams};
use relidar_core::geom::{Mat3, RigidTransform, Vec3};
use relidar_core::raysample::RingSpec;
use relidar_core::render::SensorModel;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub output: OutputConfig,
    pub decomp: DecompSection,
    pub align: AlignSection,
    /// Loss weights shared by background and vehicle fits.
    pub weights: LossWeights,
    pub background: BackgroundSection,
    pub vehicles: VehiclesSection,
    pub occupancy: OccupancySection,
    pub trace: TraceParams,
    pub sensors: Vec<SensorConfig>,
    pub render: RenderSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            output: OutputConfig::default(),
            decomp: DecompSection::default(),
            align: AlignSection::default(),
            weights: LossWeights::default(),
            background: BackgroundSection::default(),
            vehicles: VehiclesSection::default(),
            occupancy: OccupancySection::default(),
            // Rendering and fitting march to convergence even at grazing
            // incidence with this step budget.
            trace: TraceParams {
                eps: 1e-3,
                max_steps: 512,
            },
            sensors: vec![SensorConfig::default()],
            render: RenderSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    /// Directory of externally completed clouds:
    /// `<dir>/<fragment>/track_<id>.bin`. Imported clouds bypass mirror
    /// augmentation and ground filtering.
    pub completed_dir: Option<PathBuf>,
    /// Directory of pseudo-label files, `<dir>/<fragment>.jsonl`, in the
    /// dataset label schema; points inside these boxes leave the
    /// background.
    pub pseudo_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub root: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompSection {
    pub min_points: usize,
    pub ground_band: f64,
    pub box_inflation: f64,
    pub pseudo_margin: f64,
}

impl Default for DecompSection {
    fn default() -> Self {
        let d = DecompConfig::default();
        DecompSection {
            min_points: d.min_points,
            ground_band: d.ground_band,
            box_inflation: d.box_inflation,
            pseudo_margin: d.pseudo_margin,
        }
    }
}

impl DecompSection {
    pub fn to_core(&self) -> DecompConfig {
        DecompConfig {
            min_points: self.min_points,
            ground_band: self.ground_band,
            box_inflation: self.box_inflation,
            pseudo_margin: self.pseudo_margin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSection {
    pub enabled: bool,
    pub voxel: f64,
    pub max_iterations: usize,
    pub gate: f64,
    pub min_correspondences: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        let p = IcpParams::default();
        AlignSection {
            enabled: true,
            voxel: p.voxel,
            max_iterations: p.max_iterations,
            gate: p.gate,
            min_correspondences: p.min_correspondences,
        }
    }
}

impl AlignSection {
    pub fn to_core(&self) -> IcpParams {
        IcpParams {
            voxel: self.voxel,
            max_iterations: self.max_iterations,
            gate: self.gate,
            min_correspondences: self.min_correspondences,
            convergence: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundSection {
    /// Field cell size, meters.
    pub voxel: f64,
    pub fit: FitSection,
}

impl Default for BackgroundSection {
    fn default() -> Self {
        BackgroundSection {
            voxel: 0.3,
            fit: FitSection {
                iterations: 1200,
                learning_rate: 0.02,
                batch_size: 1024,
                eikonal_samples: 256,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VehiclesSection {
    /// Field cell size, meters.
    pub voxel: f64,
    /// Hit threshold on point-to-ray distance, meters.
    pub hit_threshold: f64,
    pub fit: FitSection,
    pub rings: RingSpec,
}

impl Default for VehiclesSection {
    fn default() -> Self {
        VehiclesSection {
            voxel: 0.08,
            hit_threshold: 0.05,
            fit: FitSection {
                iterations: 1500,
                learning_rate: 0.02,
                batch_size: 1024,
                eikonal_samples: 256,
            },
            rings: RingSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSection {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eikonal_samples: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            iterations: 1500,
            learning_rate: 0.02,
            batch_size: 1024,
            eikonal_samples: 256,
        }
    }
}

impl FitSection {
    pub fn to_core(&self, seed: u64, trace: TraceParams) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            eikonal_samples: self.eikonal_samples,
            seed,
            trace,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancySection {
    pub voxel: f64,
    pub dilation_radius: usize,
}

impl Default for OccupancySection {
    fn default() -> Self {
        OccupancySection {
            voxel: 0.4,
            dilation_radius: 2,
        }
    }
}

/// One virtual roadside sensor. The pose comes from a position plus yaw and
/// pitch in degrees; positive pitch looks up.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub name: String,
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub channels: usize,
    pub vertical_fov_deg: (f64, f64),
    pub horizontal_fov_deg: (f64, f64),
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            name: "roadside_a".to_string(),
            position: [0.0, 0.0, 6.0],
            yaw_deg: 0.0,
            pitch_deg: -15.0,
            channels: 64,
            vertical_fov_deg: (-25.0, 15.0),
            horizontal_fov_deg: (-180.0, 180.0),
            horizontal_resolution_deg: 0.2,
            max_range: 200.0,
        }
    }
}

impl SensorConfig {
    pub fn pose(&self) -> RigidTransform {
        let rotation = Mat3::rot_z(self.yaw_deg.to_radians())
            .mul_mat(Mat3::rot_y(-self.pitch_deg.to_radians()));
        RigidTransform {
            rotation,
            translation: Vec3::from_array(self.position),
        }
    }

    pub fn to_model(&self) -> SensorModel {
        SensorModel {
            pose: self.pose(),
            channels: self.channels,
            vertical_fov_deg: self.vertical_fov_deg,
            horizontal_fov_deg: self.horizontal_fov_deg,
            horizontal_resolution_deg: self.horizontal_resolution_deg,
            max_range: self.max_range,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSection {
    /// Frame ids to render; empty renders every frame of each fragment.
    pub frames: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub enabled: bool,
    /// Re-render every n-th input frame from its own sensor pose and
    /// compare against the recorded cloud.
    pub every: usize,
    pub channels: usize,
    pub vertical_fov_deg: (f64, f64),
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            enabled: true,
            every: 10,
            channels: 32,
            vertical_fov_deg: (-25.0, 2.0),
            horizontal_resolution_deg: 1.0,
            max_range: 60.0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn dump_defaults() -> String {
        toml::to_string_pretty(&PipelineConfig::default()).expect("defaults serialize")
    }
}
