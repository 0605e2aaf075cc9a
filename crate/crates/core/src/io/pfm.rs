//! Portable float maps: little-endian, scale −1.0, rows stored bottom-up.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

fn encode(width: usize, height: usize, channels: usize, values: impl Fn(usize, usize, usize) -> f64) -> Vec<u8> {
    let tag = if channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(width * height * channels * 4);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                out.extend_from_slice(&(values(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    out
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pfm_scalar(path: &Path, grid: &Grid<f64>) -> Result<()> {
    write(path, encode(grid.width, grid.height, 1, |x, y, _| *grid.get(x, y)))
}

pub fn write_pfm_rgb(path: &Path, grid: &Grid<[f64; 3]>) -> Result<()> {
    write(path, encode(grid.width, grid.height, 3, |x, y, c| grid.get(x, y)[c]))
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    /// Top-down, interleaved.
    values: Vec<f64>,
}

fn decode(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    // Three whitespace-terminated header lines.
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| "header is not ASCII")?);
    }
    at += 1;
    let channels = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(format!("bad magic `{m}`")),
    };
    let width: usize = fields[1].parse().map_err(|_| "bad width")?;
    let height: usize = fields[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = fields[3].parse().map_err(|_| "bad scale")?;
    if scale >= 0.0 {
        return Err("big-endian maps are not supported".into());
    }
    let n = width * height * channels;
    let body = bytes.get(at..at + 4 * n).ok_or("truncated body")?;
    let mut values = vec![0.0; n];
    let row = width * channels;
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (yb, rest) = (i / row, i % row);
        let y = height - 1 - yb;
        values[y * row + rest] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok(Decoded {
        width,
        height,
        channels,
        values,
    })
}

fn read(path: &Path, channels: usize) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(&bytes).map_err(|m| Error::format(path, m))?;
    if d.channels != channels {
        return Err(Error::format(path, format!("expected {channels} channel(s), found {}", d.channels)));
    }
    Ok(d)
}

pub fn read_pfm_scalar(path: &Path) -> Result<Grid<f64>> {
    let d = read(path, 1)?;
    Ok(Grid::from_vec(d.width, d.height, d.values))
}

pub fn read_pfm_rgb(path: &Path) -> Result<Grid<[f64; 3]>> {
    let d = read(path, 3)?;
    let data = d.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Grid::from_vec(d.width, d.height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let g = Grid::from_vec(5, 3, (0..15).map(|i| (i as f32 * 0.731 - 2.0) as f64).collect());
        write_pfm_scalar(&path, &g).unwrap();
        let back = read_pfm_scalar(&path).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rows_are_stored_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let g = Grid::from_vec(1, 2, vec![1.0, 2.0]);
        write_pfm_scalar(&path, &g).unwrap();
        let bytes = fs::read(&path).unwrap();
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn rgb_round_trip_and_channel_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.pfm");
        let g = Grid::from_vec(2, 2, vec![[0.0, 0.0, -1.0], [0.5, -0.25, 0.125], [1.0, 2.0, 3.0], [-0.0, 7.0, 1e-3f32 as f64]]);
        write_pfm_rgb(&path, &g).unwrap();
        assert_eq!(read_pfm_rgb(&path).unwrap(), g);
        assert!(read_pfm_scalar(&path).is_err());
    }

    #[test]
    fn truncated_body_is_rejected() {
        assert!(decode(b"Pf\n2 2\n-1.0\n\0\0\0\0").is_err());
        assert!(decode(b"Pf\n1 1\n1.0\n\0\0\0\0").is_err());
    }
}
