//! Shared fixtures for the pipeline benchmarks.

use splatroom_core::io::synthetic::{generate_synthetic_room, SyntheticRoom, SyntheticRoomSpec};
use splatroom_core::scene::{filter_points, voxelize_seeds};
use splatroom_core::{PipelineConfig, Scene};

/// The default synthetic room with the seed scene used by the room runs.
pub struct Fixture {
    pub room: SyntheticRoom,
    pub scene: Scene,
    pub config: PipelineConfig,
}

pub fn room_fixture() -> Fixture {
    let room = generate_synthetic_room(&SyntheticRoomSpec::default()).expect("synthetic room");
    let mut config = PipelineConfig::default();
    config.seeds.delta = 0.1;
    config.seeds.k = 10;
    let points = filter_points(&room.dataset.points, config.seeds.epsilon);
    let scene = voxelize_seeds(&points, &config.seeds).expect("seeds");
    Fixture { room, scene, config }
}
