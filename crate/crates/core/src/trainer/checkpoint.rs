//! Binary checkpoints. Layout, all little-endian:
//!
//! ```text
//! "SPLATROOM1"
//! u64 len, JSON pipeline config      u64 len, JSON seed config of the scene
//! u32 iteration, f64 extent, f64 loss_ema
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u64 n, u32 × n view order, u64 cursor
//! u64 n seeds × { f64×3 anchor, u8 level, i64×3 key, f64 grad_accum,
//!                 u32 grad_count, f64 opacity_accum, u32 opacity_count,
//!                 u8 active, u64 m, u64 × m surfel ids }
//! u64 n surfels × { f64×13 params, u64 seed id, f64×13 m, f64×13 v }
//! u64 n cameras × { u64 len, UTF-8 id, f64×4 fx fy cx cy,
//!                   f64×9 rotation (column-major), f64×3 translation,
//!                   u64 width, u64 height }
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainState;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::scene::{Camera, Scene, SeedConfig, SeedPoint, Surfel, SURFEL_PARAMS};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"SPLATROOM1";

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub scene: Scene,
    pub state: TrainState,
    /// Training cameras by id, so renders need no dataset.
    pub cameras: Vec<(String, Camera)>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).ok_or("length overflow")?;
        let s = self.buf.get(self.at..end).ok_or("unexpected end of checkpoint")?;
        self.at = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        // Every element takes at least one byte, which bounds allocations on
        // corrupt input.
        if n > (self.buf.len() - self.at) as u64 {
            return Err(format!("implausible length {n}"));
        }
        Ok(n as usize)
    }
    fn i64(&mut self) -> std::result::Result<i64, String> {
        Ok(i64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn blob(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.len()?;
        self.take(n)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.blob(&serde_json::to_vec(&ck.config).expect("config serializes"));
    w.blob(&serde_json::to_vec(&ck.scene.config).expect("seed config serializes"));
    let st = &ck.state;
    w.u32(st.iteration);
    w.f64(st.extent);
    w.f64(st.loss_ema);
    w.bytes(&st.rng.get_seed());
    w.u64(st.rng.get_stream());
    w.bytes(&st.rng.get_word_pos().to_le_bytes());
    w.u64(st.order.len() as u64);
    st.order.iter().for_each(|v| w.u32(*v));
    w.u64(st.cursor as u64);
    w.u64(ck.scene.seeds.len() as u64);
    for s in &ck.scene.seeds {
        s.anchor.iter().for_each(|v| w.f64(*v));
        w.u8(s.level);
        s.key.iter().for_each(|v| w.i64(*v));
        w.f64(s.grad_accum);
        w.u32(s.grad_count);
        w.f64(s.opacity_accum);
        w.u32(s.opacity_count);
        w.u8(s.active as u8);
        w.u64(s.surfel_ids.len() as u64);
        s.surfel_ids.iter().for_each(|v| w.u64(*v as u64));
    }
    w.u64(ck.scene.surfels.len() as u64);
    for (i, s) in ck.scene.surfels.iter().enumerate() {
        s.params().iter().for_each(|v| w.f64(*v));
        w.u64(s.seed_id as u64);
        st.m[i].iter().for_each(|v| w.f64(*v));
        st.v[i].iter().for_each(|v| w.f64(*v));
    }
    w.u64(ck.cameras.len() as u64);
    for (id, c) in &ck.cameras {
        w.blob(id.as_bytes());
        [c.fx, c.fy, c.cx, c.cy].iter().for_each(|v| w.f64(*v));
        c.rotation.iter().for_each(|v| w.f64(*v));
        c.translation.iter().for_each(|v| w.f64(*v));
        w.u64(c.width as u64);
        w.u64(c.height as u64);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err("not a SPLATROOM1 checkpoint".into());
    }
    let config: PipelineConfig = serde_json::from_slice(r.blob()?).map_err(|e| e.to_string())?;
    let seed_config: SeedConfig = serde_json::from_slice(r.blob()?).map_err(|e| e.to_string())?;
    let iteration = r.u32()?;
    let extent = r.f64()?;
    let loss_ema = r.f64()?;
    let mut rng = ChaCha8Rng::from_seed(r.arr()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.arr()?));
    let n = r.len()?;
    let order = (0..n).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
    let cursor = r.u64()? as usize;

    let n_seeds = r.len()?;
    let mut seeds = Vec::with_capacity(n_seeds);
    for _ in 0..n_seeds {
        let anchor = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let level = r.u8()?;
        let key = [r.i64()?, r.i64()?, r.i64()?];
        let grad_accum = r.f64()?;
        let grad_count = r.u32()?;
        let opacity_accum = r.f64()?;
        let opacity_count = r.u32()?;
        let active = r.u8()? != 0;
        let m = r.len()?;
        let surfel_ids = (0..m)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        seeds.push(SeedPoint {
            anchor,
            level,
            key,
            grad_accum,
            grad_count,
            opacity_accum,
            opacity_count,
            surfel_ids,
            active,
        });
    }

    let n_surfels = r.len()?;
    let mut surfels = Vec::with_capacity(n_surfels);
    let mut m = Vec::with_capacity(n_surfels);
    let mut v = Vec::with_capacity(n_surfels);
    let row = |r: &mut Reader| -> std::result::Result<[f64; SURFEL_PARAMS], String> {
        let mut a = [0.0; SURFEL_PARAMS];
        for x in a.iter_mut() {
            *x = r.f64()?;
        }
        Ok(a)
    };
    for _ in 0..n_surfels {
        let params = row(&mut r)?;
        let seed_id = r.u64()? as usize;
        let mut s = Surfel {
            offset: Vector3::zeros(),
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 2],
            raw_opacity: 0.0,
            raw_color: [0.0; 3],
            seed_id,
        };
        s.set_params(&params);
        surfels.push(s);
        m.push(row(&mut r)?);
        v.push(row(&mut r)?);
    }
    let n_cameras = r.len()?;
    let mut cameras = Vec::with_capacity(n_cameras);
    for _ in 0..n_cameras {
        let id = String::from_utf8(r.blob()?.to_vec()).map_err(|e| e.to_string())?;
        let [fx, fy, cx, cy] = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let mut rotation = Matrix3::zeros();
        for v in rotation.iter_mut() {
            *v = r.f64()?;
        }
        let translation = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.u64()? as usize, r.u64()? as usize);
        let camera = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        camera.validate().map_err(|e| format!("camera {id}: {e}"))?;
        cameras.push((id, camera));
    }
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    let scene = Scene {
        config: seed_config,
        seeds,
        surfels,
    };
    scene.check_integrity()?;
    Ok(Checkpoint {
        config,
        scene,
        state: TrainState {
            iteration,
            m,
            v,
            rng,
            order,
            cursor,
            extent,
            loss_ema,
        },
        cameras,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| Error::format(path, m))
}
