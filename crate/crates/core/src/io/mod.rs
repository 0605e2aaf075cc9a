//! File formats, dataset manifests and the synthetic test room.

pub mod dataset;
pub mod pfm;
pub mod ply;
pub mod png;
pub mod synthetic;

pub use dataset::{load_dataset, save_dataset, Dataset, Frame};
pub use ply::{read_ply, write_mesh, write_points, PlyData};
pub use synthetic::{generate_synthetic_room, SyntheticRoom, SyntheticRoomSpec};
