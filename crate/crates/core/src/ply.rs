//! Binary little-endian PLY for point clouds and triangle meshes.
//!
//! Points are written as `float x, y, z` plus an optional `int view`;
//! meshes add a `face` element with `list uchar int vertex_indices`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

pub fn write_points<T: Real>(path: impl AsRef<Path>, points: &[Vec3<T>], views: Option<&[u32]>) -> Result<()> {
    if let Some(v) = views {
        if v.len() != points.len() {
            return Err(Error::DimensionMismatch(format!("{} view ids for {} points", v.len(), points.len())));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if views.is_some() {
        writeln!(w, "property int view")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in points.iter().enumerate() {
        for c in p.to_array() {
            w.write_all(&(c.as_f64() as f32).to_le_bytes())?;
        }
        if let Some(v) = views {
            w.write_all(&(v[i] as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_mesh(path: impl AsRef<Path>, vertices: &[Vec3<f64>], faces: &[[u32; 3]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}", vertices.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    writeln!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header", faces.len())?;
    for p in vertices {
        for c in p.to_array() {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    for f in faces {
        w.write_all(&[3u8])?;
        for &i in f {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vec3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub views: Option<Vec<u32>>,
}

/// Reads the subset of binary little-endian PLY written by this module.
pub fn read(path: impl AsRef<Path>) -> Result<PlyData> {
    let path = path.as_ref();
    let bad = |reason: &str| Error::Malformed { path: path.display().to_string(), reason: reason.to_string() };
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props = Vec::new();
    let mut current = "";
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unterminated header"));
        }
        let t = line.trim();
        if first {
            if t != "ply" {
                return Err(bad("missing ply magic"));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", ..] => return Err(bad("only binary_little_endian is supported")),
            ["element", "vertex", n] => {
                n_vertices = n.parse().map_err(|_| bad("bad vertex count"))?;
                current = "vertex";
            }
            ["element", "face", n] => {
                n_faces = n.parse().map_err(|_| bad("bad face count"))?;
                current = "face";
            }
            ["property", "list", "uchar", "int", _] if current == "face" => {}
            ["property", ty, name] if current == "vertex" => vertex_props.push((ty.to_string(), name.to_string())),
            ["comment", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(&format!("unsupported header line '{t}'"))),
        }
    }
    let expected: Vec<(&str, &str)> = vec![("float", "x"), ("float", "y"), ("float", "z")];
    let props: Vec<(&str, &str)> = vertex_props.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let has_view = match props.len() {
        3 => false,
        4 if props[3] == ("int", "view") => true,
        _ => return Err(bad("unsupported vertex properties")),
    };
    if props[..3] != expected[..] {
        return Err(bad("vertex properties must be float x, y, z"));
    }
    let mut data = PlyData { views: has_view.then(Vec::new), ..Default::default() };
    let mut buf4 = [0u8; 4];
    let mut read_f32 = |r: &mut BufReader<File>| -> Result<f32> {
        r.read_exact(&mut buf4).map_err(|_| bad("truncated body"))?;
        Ok(f32::from_le_bytes(buf4))
    };
    for _ in 0..n_vertices {
        let x = read_f32(&mut r)?;
        let y = read_f32(&mut r)?;
        let z = read_f32(&mut r)?;
        data.vertices.push(Vec3::new(x as f64, y as f64, z as f64));
        if has_view {
            let v = read_f32(&mut r)?.to_bits() as i32;
            data.views.as_mut().unwrap().push(v as u32);
        }
    }
    for _ in 0..n_faces {
        let mut n = [0u8; 1];
        r.read_exact(&mut n).map_err(|_| bad("truncated faces"))?;
        if n[0] != 3 {
            return Err(bad("only triangle faces are supported"));
        }
        let mut f = [0u32; 3];
        for v in f.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated faces"))?;
            let i = i32::from_le_bytes(b);
            if i < 0 || i as usize >= n_vertices {
                return Err(bad("face index out of range"));
            }
            *v = i as u32;
        }
        data.faces.push(f);
    }
    Ok(data)
}
