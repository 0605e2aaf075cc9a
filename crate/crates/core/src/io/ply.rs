//! PLY point clouds and triangle meshes (ASCII and binary little-endian).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::meshing::TriangleMesh;
use crate::scene::SfmPoint;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Everything this crate reads from a PLY file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub positions: Vec<Vector3<f64>>,
    /// Per-vertex colors in `[0, 1]`.
    pub colors: Option<Vec<[f64; 3]>>,
    pub match_counts: Option<Vec<u32>>,
    /// Faces, fan-triangulated.
    pub triangles: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn into_mesh(self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.positions,
            triangles: self.triangles,
            colors: self.colors,
        }
    }

    /// Points with their match counts, defaulting to `default_count`.
    pub fn into_points(self, default_count: u32) -> Vec<SfmPoint> {
        let n = self.positions.len();
        (0..n)
            .map(|i| SfmPoint {
                position: self.positions[i],
                match_count: self.match_counts.as_ref().map_or(default_count, |m| m[i]),
                color: self.colors.as_ref().map(|c| c[i]),
            })
            .collect()
    }
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_ply(bytes: &[u8]) -> std::result::Result<PlyData, String> {
    let marker = b"end_header";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or("missing end_header")?;
    let mut body = pos + marker.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", f, _] => format = Some(f.to_string()),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count `{count}`"))?,
                props: Vec::new(),
            }),
            ["property", "list", c, t, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let c = Scalar::parse(c).ok_or(format!("unknown type `{c}`"))?;
                let t = Scalar::parse(t).ok_or(format!("unknown type `{t}`"))?;
                el.props.push(Property::List(name.to_string(), c, t));
            }
            ["property", t, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let t = Scalar::parse(t).ok_or(format!("unknown type `{t}`"))?;
                el.props.push(Property::Scalar(name.to_string(), t));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(format!("unsupported header line `{line}`")),
        }
    }
    let binary = match format.as_deref() {
        Some("ascii") => false,
        Some("binary_little_endian") => true,
        Some(f) => return Err(format!("unsupported format `{f}`")),
        None => return Err("missing format line".into()),
    };
    let mut reader: Box<dyn ValueReader> = if binary {
        Box::new(BinaryReader {
            bytes: &bytes[body..],
            at: 0,
        })
    } else {
        let text = std::str::from_utf8(&bytes[body..]).map_err(|_| "body is not UTF-8")?;
        Box::new(AsciiReader {
            tokens: text.split_whitespace(),
        })
    };

    let mut out = PlyData::default();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let has = |n: &str| el.props.iter().any(|p| matches!(p, Property::Scalar(m, _) if m == n));
        if is_vertex {
            if !(has("x") && has("y") && has("z")) {
                return Err("vertex element lacks x, y, z".into());
            }
            if has("red") && has("green") && has("blue") {
                out.colors = Some(Vec::with_capacity(el.count));
            }
            if has("match_count") {
                out.match_counts = Some(Vec::with_capacity(el.count));
            }
        }
        for _ in 0..el.count {
            let mut p = [0.0; 3];
            let mut c = [0.0; 3];
            let mut color_scale = 1.0;
            for prop in &el.props {
                match prop {
                    Property::Scalar(name, t) => {
                        let v = reader.next(*t)?;
                        if is_vertex {
                            match name.as_str() {
                                "x" => p[0] = v,
                                "y" => p[1] = v,
                                "z" => p[2] = v,
                                "red" | "green" | "blue" => {
                                    color_scale = if matches!(t, Scalar::F32 | Scalar::F64) { 1.0 } else { 255.0 };
                                    let k = ["red", "green", "blue"].iter().position(|s| s == name).unwrap();
                                    c[k] = v;
                                }
                                "match_count" => {
                                    if let Some(m) = out.match_counts.as_mut() {
                                        m.push(v.max(0.0) as u32);
                                    }
                                }
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, ct, t) => {
                        let n = reader.next(*ct)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(reader.next(*t)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            if idx.iter().any(|v| *v < 0.0) {
                                return Err("negative face index".into());
                            }
                            for j in 1..n.saturating_sub(1) {
                                out.triangles.push([idx[0] as u32, idx[j] as u32, idx[j + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                out.positions.push(Vector3::new(p[0], p[1], p[2]));
                if let Some(cols) = out.colors.as_mut() {
                    cols.push(c.map(|v| v / color_scale));
                }
            }
        }
    }
    let nv = out.positions.len() as u32;
    if out.triangles.iter().flatten().any(|&i| i >= nv) {
        return Err("face index out of range".into());
    }
    Ok(out)
}

trait ValueReader {
    fn next(&mut self, t: Scalar) -> std::result::Result<f64, String>;
}

struct BinaryReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl ValueReader for BinaryReader<'_> {
    fn next(&mut self, t: Scalar) -> std::result::Result<f64, String> {
        let end = self.at + t.size();
        let b = self.bytes.get(self.at..end).ok_or("unexpected end of binary body")?;
        self.at = end;
        Ok(t.read_le(b))
    }
}

struct AsciiReader<'a> {
    tokens: std::str::SplitWhitespace<'a>,
}

impl ValueReader for AsciiReader<'_> {
    fn next(&mut self, _t: Scalar) -> std::result::Result<f64, String> {
        let tok = self.tokens.next().ok_or("unexpected end of ascii body")?;
        tok.parse().map_err(|_| format!("bad number `{tok}`"))
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary little-endian mesh with double positions and optional colors.
pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut w = create(path)?;
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        mesh.vertices.len()
    );
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str(&format!(
        "element face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.triangles.len()
    ));
    let mut buf = header.into_bytes();
    for (i, v) in mesh.vertices.iter().enumerate() {
        for k in 0..3 {
            buf.extend_from_slice(&v[k].to_le_bytes());
        }
        if let Some(c) = &mesh.colors {
            buf.extend(c[i].map(to_u8));
        }
    }
    for t in &mesh.triangles {
        buf.push(3);
        for i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Binary little-endian point cloud with match counts and optional colors.
pub fn write_points(path: &Path, points: &[SfmPoint]) -> Result<()> {
    let mut w = create(path)?;
    let colored = !points.is_empty() && points.iter().all(|p| p.color.is_some());
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        points.len()
    );
    if colored {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("property uint match_count\nend_header\n");
    let mut buf = header.into_bytes();
    for p in points {
        for k in 0..3 {
            buf.extend_from_slice(&p.position[k].to_le_bytes());
        }
        if colored {
            buf.extend(p.color.unwrap().map(to_u8));
        }
        buf.extend_from_slice(&p.match_count.to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_with_polygon_faces() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n1 1 0 0 0 255\n0 1 0 255 255 255\n4 0 1 2 3\n";
        let d = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(d.positions.len(), 4);
        assert_eq!(d.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert_eq!(d.colors.unwrap()[1], [0.0, 1.0, 0.0]);
        assert!(d.match_counts.is_none());
    }

    #[test]
    fn mesh_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mesh = TriangleMesh {
            vertices: vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0 / 3.0, -2.0, 5.5), Vector3::new(-1e-7, 0.0, 1.0)],
            triangles: vec![[0, 1, 2]],
            colors: Some(vec![[0.0, 0.5, 1.0], [1.0, 1.0, 1.0], [0.2, 0.4, 0.6]]),
        };
        write_mesh(&path, &mesh).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.positions, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        let cols = back.colors.unwrap();
        for (a, b) in cols.iter().zip(mesh.colors.as_ref().unwrap()) {
            for k in 0..3 {
                assert_eq!(a[k], (b[k] * 255.0).round() / 255.0);
            }
        }
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let pts: Vec<SfmPoint> = (0..50)
            .map(|i| SfmPoint {
                position: Vector3::new(i as f64 * 0.37, -(i as f64).sqrt(), 1.0 / (i as f64 + 1.0)),
                match_count: i % 11,
                color: Some([(i % 256) as f64 / 255.0, 0.0, 1.0]),
            })
            .collect();
        write_points(&path, &pts).unwrap();
        let back = read_ply(&path).unwrap().into_points(3);
        assert_eq!(back, pts);
    }

    #[test]
    fn missing_match_count_uses_default() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n";
        let pts = parse_ply(text.as_bytes()).unwrap().into_points(7);
        assert_eq!(pts[0].match_count, 7);
    }

    #[test]
    fn truncated_binary_is_an_error() {
        let text = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n\0\0\0\0";
        assert!(parse_ply(text).is_err());
    }
}
