//! Seed-guided 2D Gaussian surfel reconstruction for indoor scenes.
//!
//! The crate covers the whole CPU pipeline: seed-point initialization from a
//! filtered sparse point cloud, a differentiable surfel rasterizer with an
//! analytic backward pass, seed growth and pruning, monocular depth/normal and
//! multi-view consistency objectives, the training loop, TSDF fusion with
//! marching cubes, and point-cloud reconstruction metrics.
//!
//! Conventions: right-handed world, camera `+z` looks into the screen, pixel
//! `(0, 0)` is the top-left pixel and pixel centers sit at half-integers.

pub mod config;
pub mod densify;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod grid;
pub mod io;
pub mod losses;
pub mod math;
pub mod meshing;
pub mod rasterizer;
pub mod scene;
pub mod trainer;

pub use config::PipelineConfig;
pub use diagnostics::{run_equivalence_suite, run_gradient_suite, OracleReport, Tolerance};
pub use densify::{grow_seeds, prune_seeds, DensifyConfig};
pub use error::{Error, Result};
pub use eval::{compute_metrics, sample_mesh, EvalConfig, Metrics};
pub use gradients::{accumulate_seed_stats, backward, OutputGrads, ParamGrads, SurfelGrad};
pub use grid::Grid;
pub use io::dataset::{Dataset, Frame};
pub use losses::{LossWeights, MvConfig};
pub use meshing::{TriangleMesh, TsdfConfig, TsdfVolume};
pub use rasterizer::{render, RasterConfig, RenderOutput};
pub use scene::{Camera, Scene, SeedConfig, SeedPoint, SfmPoint, Surfel};
pub use trainer::{fit, FitOutput, StepReport, TrainConfig, TrainOptions, TrainState, Trainer};
