//! Dataset manifests: posed RGB frames with optional depth and normal priors,
//! a sparse point cloud and an optional ground-truth mesh.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pfm, ply, png};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::meshing::TriangleMesh;
use crate::scene::{Camera, SfmPoint};

pub const MANIFEST_NAME: &str = "manifest.json";
/// The only camera convention accepted on load.
pub const CONVENTION: &str = "x-right y-down z-forward, pixel centers at +0.5";
pub const UNITS: &str = "meters";
/// Prior normals this far from unit length are rejected.
pub const NORMAL_UNIT_TOLERANCE: f64 = 1e-3;
/// Match count given to points whose PLY lacks one, so no filter drops them.
pub const UNKNOWN_MATCH_COUNT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub units: String,
    pub convention: String,
    pub points: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mesh: Option<String>,
    pub cameras: Vec<CameraEntry>,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub name: String,
    pub image: String,
    pub camera: String,
    /// PFM in meters, or 16-bit PNG scaled by `depth_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
    /// 3-channel PFM; a `<path>.meta` sidecar may declare `frame = world`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<String>,
}

impl CameraEntry {
    fn from_camera(id: &str, c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            id: id.to_string(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        }
    }

    fn camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_fn(|i, j| self.rotation[i][j]),
            translation: Vector3::from(self.translation),
            width: self.width,
            height: self.height,
        }
    }
}

/// One posed view with its priors. Priors are camera-space: depth in meters
/// along `+z` (0 = missing), unit normals (zero vector = missing).
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    pub camera_id: String,
    pub camera: Camera,
    pub image: Grid<[f64; 3]>,
    pub depth: Option<Grid<f64>>,
    pub normal: Option<Grid<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    pub points: Vec<SfmPoint>,
    pub gt_mesh: Option<TriangleMesh>,
}

impl Dataset {
    pub fn cameras(&self) -> Vec<Camera> {
        self.frames.iter().map(|f| f.camera.clone()).collect()
    }

    /// Distinct cameras in first-use order, keyed by camera id.
    pub fn named_cameras(&self) -> Vec<(String, Camera)> {
        let mut out: Vec<(String, Camera)> = Vec::new();
        for f in &self.frames {
            if !out.iter().any(|(id, _)| *id == f.camera_id) {
                out.push((f.camera_id.clone(), f.camera.clone()));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the frame whose camera id or name is `id`.
    pub fn find(&self, id: &str) -> Option<usize> {
        self.frames.iter().position(|f| f.camera_id == id || f.name == id)
    }
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

fn normal_frame_is_world(path: &Path) -> std::result::Result<bool, String> {
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta");
    let meta = PathBuf::from(meta);
    let Ok(text) = fs::read_to_string(&meta) else {
        return Ok(false);
    };
    let Some(line) = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#')) else {
        return Ok(false);
    };
    match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
        Some(("frame", "camera")) => Ok(false),
        Some(("frame", "world")) => Ok(true),
        _ => Err(format!("{}: unrecognized line `{line}`", meta.display())),
    }
}

fn load_frame(root: &Path, entry: &FrameEntry, camera: &Camera) -> std::result::Result<Frame, Vec<String>> {
    let mut errors = Vec::new();
    let tag = |m: String| format!("frame `{}`: {m}", entry.name);
    let (w, h) = (camera.width, camera.height);
    let check_dims = |what: &str, gw: usize, gh: usize, errors: &mut Vec<String>| {
        if (gw, gh) != (w, h) {
            errors.push(tag(format!("{what} is {gw}x{gh}, camera is {w}x{h}")));
        }
    };

    let image = match png::read_rgb(&resolve(root, &entry.image)) {
        Ok(img) => {
            check_dims("image", img.width, img.height, &mut errors);
            Some(img)
        }
        Err(e) => {
            errors.push(tag(e.to_string()));
            None
        }
    };

    let depth = entry.depth.as_ref().and_then(|rel| {
        let path = resolve(root, rel);
        let loaded = if rel.ends_with(".png") {
            png::read_depth16(&path, entry.depth_scale.unwrap_or(0.001))
        } else {
            pfm::read_pfm_scalar(&path).map(|d| match entry.depth_scale {
                Some(s) => d.map(|v| v * s),
                None => d,
            })
        };
        match loaded {
            Ok(d) => {
                check_dims("depth prior", d.width, d.height, &mut errors);
                if d.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    errors.push(tag("depth prior has negative or non-finite values".into()));
                }
                Some(d)
            }
            Err(e) => {
                errors.push(tag(e.to_string()));
                None
            }
        }
    });

    let normal = entry.normal.as_ref().and_then(|rel| {
        let path = resolve(root, rel);
        let world = match normal_frame_is_world(&path) {
            Ok(w) => w,
            Err(m) => {
                errors.push(tag(m));
                return None;
            }
        };
        match pfm::read_pfm_rgb(&path) {
            Ok(mut n) => {
                check_dims("normal prior", n.width, n.height, &mut errors);
                if world {
                    for v in n.data.iter_mut() {
                        let c = camera.rotation * Vector3::from(*v);
                        *v = [c.x, c.y, c.z];
                    }
                }
                let bad = n
                    .data
                    .iter()
                    .filter(|v| v.iter().any(|c| *c != 0.0))
                    .filter(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() > NORMAL_UNIT_TOLERANCE)
                    .count();
                if bad > 0 {
                    errors.push(tag(format!("normal prior has {bad} non-unit vectors")));
                }
                Some(n)
            }
            Err(e) => {
                errors.push(tag(e.to_string()));
                None
            }
        }
    });

    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(Frame {
        name: entry.name.clone(),
        camera_id: entry.camera.clone(),
        camera: camera.clone(),
        image: image.expect("image loaded when no errors"),
        depth,
        normal,
    })
}

/// Loads and validates a dataset; all problems are reported together.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut errors = Vec::new();
    if manifest.units != UNITS {
        errors.push(format!("units must be `{UNITS}`, found `{}`", manifest.units));
    }
    if manifest.convention != CONVENTION {
        errors.push(format!("convention must be `{CONVENTION}`, found `{}`", manifest.convention));
    }
    if manifest.frames.is_empty() {
        errors.push("manifest lists no frames".into());
    }
    let mut cameras = std::collections::HashMap::new();
    for c in &manifest.cameras {
        let cam = c.camera();
        if let Err(e) = cam.validate() {
            errors.push(format!("camera `{}`: {e}", c.id));
        }
        if cameras.insert(c.id.clone(), cam).is_some() {
            errors.push(format!("camera `{}` is defined twice", c.id));
        }
    }

    let loaded: Vec<std::result::Result<Frame, Vec<String>>> = manifest
        .frames
        .par_iter()
        .map(|f| match cameras.get(&f.camera) {
            Some(cam) => load_frame(&root, f, cam),
            None => Err(vec![format!("frame `{}`: unknown camera `{}`", f.name, f.camera)]),
        })
        .collect();
    let mut frames = Vec::with_capacity(loaded.len());
    for r in loaded {
        match r {
            Ok(f) => frames.push(f),
            Err(e) => errors.extend(e),
        }
    }

    let points = match ply::read_ply(&resolve(&root, &manifest.points)) {
        Ok(p) => p.into_points(UNKNOWN_MATCH_COUNT),
        Err(e) => {
            errors.push(format!("points: {e}"));
            Vec::new()
        }
    };
    let gt_mesh = match &manifest.gt_mesh {
        Some(rel) => match ply::read_ply(&resolve(&root, rel)) {
            Ok(p) => Some(p.into_mesh()),
            Err(e) => {
                errors.push(format!("gt_mesh: {e}"));
                None
            }
        },
        None => None,
    };

    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    Ok(Dataset {
        root,
        frames,
        points,
        gt_mesh,
    })
}

/// Writes the dataset under `dir` (PNG images, PFM priors, PLY geometry)
/// and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cameras = Vec::new();
    let mut frames = Vec::new();
    for (i, f) in dataset.frames.iter().enumerate() {
        if !cameras.iter().any(|c: &CameraEntry| c.id == f.camera_id) {
            cameras.push(CameraEntry::from_camera(&f.camera_id, &f.camera));
        }
        let image = format!("images/{i:04}.png");
        png::write_rgb(&dir.join(&image), &f.image)?;
        let depth = match &f.depth {
            Some(d) => {
                let rel = format!("depth/{i:04}.pfm");
                pfm::write_pfm_scalar(&dir.join(&rel), d)?;
                Some(rel)
            }
            None => None,
        };
        let normal = match &f.normal {
            Some(n) => {
                let rel = format!("normal/{i:04}.pfm");
                pfm::write_pfm_rgb(&dir.join(&rel), n)?;
                let meta = dir.join(format!("{rel}.meta"));
                fs::write(&meta, "frame = camera\n").map_err(|e| Error::io(&meta, e))?;
                Some(rel)
            }
            None => None,
        };
        frames.push(FrameEntry {
            name: f.name.clone(),
            image,
            camera: f.camera_id.clone(),
            depth,
            depth_scale: None,
            normal,
        });
    }
    ply::write_points(&dir.join("points.ply"), &dataset.points)?;
    let gt_mesh = match &dataset.gt_mesh {
        Some(m) => {
            ply::write_mesh(&dir.join("gt_mesh.ply"), m)?;
            Some("gt_mesh.ply".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        units: UNITS.into(),
        convention: CONVENTION.into(),
        points: "points.ply".into(),
        gt_mesh,
        cameras,
        frames,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> PathBuf {
        let cam = Camera::look_at(
            Vector3::zeros(),
            Vector3::z(),
            -Vector3::y(),
            [4.0, 4.0, 2.0, 1.5],
            4,
            3,
        );
        let frame = |i: usize| Frame {
            name: format!("f{i}"),
            camera_id: format!("c{i}"),
            camera: cam.clone(),
            image: Grid::new(4, 3, [0.2, 0.4, 0.6].map(|v: f64| (v * 255.0).round() / 255.0)),
            depth: Some(Grid::new(4, 3, 2.0)),
            normal: Some(Grid::new(4, 3, [0.0, 0.0, -1.0])),
        };
        let ds = Dataset {
            root: dir.to_path_buf(),
            frames: vec![frame(0), frame(1)],
            points: vec![SfmPoint::new(Vector3::new(0.0, 0.0, 2.0), 5)],
            gt_mesh: None,
        };
        save_dataset(&ds, dir).unwrap()
    }

    #[test]
    fn two_frames_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(&tiny(dir.path())).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.points.len(), 1);
    }

    #[test]
    fn missing_depth_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(dir.path());
        fs::remove_file(dir.path().join("depth/0001.pfm")).unwrap();
        match load_dataset(&m) {
            Err(Error::Validation(errs)) => {
                assert_eq!(errs.len(), 1, "{errs:?}");
                assert!(errs[0].contains("`f1`"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn errors_are_aggregated() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(dir.path());
        fs::remove_file(dir.path().join("images/0000.png")).unwrap();
        pfm::write_pfm_rgb(&dir.path().join("normal/0001.pfm"), &Grid::new(4, 3, [0.0, 0.0, -2.0])).unwrap();
        match load_dataset(&m) {
            Err(Error::Validation(errs)) => {
                assert_eq!(errs.len(), 2, "{errs:?}");
                assert!(errs[1].contains("non-unit"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn world_frame_normals_are_rotated() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(dir.path());
        // look_at(+z forward, -y up) is a 180° turn about z.
        pfm::write_pfm_rgb(&dir.path().join("normal/0000.pfm"), &Grid::new(4, 3, [1.0, 0.0, 0.0])).unwrap();
        fs::write(dir.path().join("normal/0000.pfm.meta"), "frame = world\n").unwrap();
        let ds = load_dataset(&m).unwrap();
        let n = ds.frames[0].normal.as_ref().unwrap().get(0, 0);
        let expect = ds.frames[0].camera.rotation * Vector3::x();
        assert!((Vector3::from(*n) - expect).norm() < 1e-12);
    }

    #[test]
    fn wrong_convention_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(dir.path());
        let text = fs::read_to_string(&m).unwrap().replace(CONVENTION, "y-up");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_dataset(&m), Err(Error::Validation(_))));
    }
}
