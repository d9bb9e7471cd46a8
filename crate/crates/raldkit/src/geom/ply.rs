//! ASCII PLY read/write for point clouds.
//!
//! The writer emits the minimal single-element form: `element vertex N` with
//! float32 x, y, z properties. The reader accepts that same shape (extra
//! per-vertex properties are tolerated and ignored) and rejects binary PLY.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::PointCloud;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a PLY file (missing magic)")]
    Magic,
    #[error("unsupported format: {0} (only ascii 1.0)")]
    Format(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("vertex {row}: {reason}")]
    Vertex { row: usize, reason: String },
    #[error("expected {expect} vertices, found {found}")]
    Count { expect: usize, found: usize },
}

/// Serialize a cloud to ASCII PLY. Coordinates are written as f32 with
/// shortest round-trippable decimal form.
pub fn to_ply_string(pc: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\n");
    s.push_str("format ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", pc.len());
    s.push_str("property float x\n");
    s.push_str("property float y\n");
    s.push_str("property float z\n");
    s.push_str("end_header\n");
    for p in &pc.points {
        let _ = writeln!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
    }
    s
}

pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<(), PlyError> {
    fs::write(path, to_ply_string(pc))?;
    Ok(())
}

pub fn from_ply_string(text: &str) -> Result<PointCloud, PlyError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == "ply" => {}
        _ => return Err(PlyError::Magic),
    }

    let mut n_vertex: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    for line in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("comment") {
            continue;
        }
        if line == "end_header" {
            break;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let rest: Vec<&str> = tok.collect();
                if rest.first() != Some(&"ascii") {
                    return Err(PlyError::Format(rest.join(" ")));
                }
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| PlyError::Header(line.into()))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| PlyError::Header(line.into()))?;
                if name == "vertex" {
                    n_vertex = Some(count);
                    in_vertex_element = true;
                } else {
                    if count != 0 {
                        return Err(PlyError::Header(format!("unsupported element {name}")));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let name = line.split_whitespace().last().unwrap_or_default();
                    props.push(name.to_string());
                }
            }
            _ => return Err(PlyError::Header(line.into())),
        }
    }

    let n = n_vertex.ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    let find = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(PlyError::Header("vertex element must have x y z".into())),
    };

    let mut points = Vec::with_capacity(n);
    for (row, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if points.len() == n {
            return Err(PlyError::Count { expect: n, found: n + 1 });
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(PlyError::Vertex {
                row,
                reason: format!("expected {} fields, found {}", props.len(), vals.len()),
            });
        }
        let get = |i: usize| -> Result<f64, PlyError> {
            vals[i]
                .parse::<f64>()
                .map_err(|e| PlyError::Vertex { row, reason: format!("{}: {e}", vals[i]) })
        };
        points.push([get(ix)?, get(iy)?, get(iz)?]);
    }
    if points.len() != n {
        return Err(PlyError::Count { expect: n, found: points.len() });
    }
    Ok(PointCloud::new(points))
}

pub fn read_ply(path: &Path) -> Result<PointCloud, PlyError> {
    from_ply_string(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_coords() {
        let pc = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.25, -3.5, 0.125],
            [7.99, 2.0001, -0.75],
        ]);
        let text = to_ply_string(&pc);
        let back = from_ply_string(&text).unwrap();
        assert_eq!(back.len(), pc.len());
        for (a, b) in pc.points.iter().zip(&back.points) {
            for i in 0..3 {
                // Written as f32, so compare at f32 precision.
                assert_eq!(a[i] as f32, b[i] as f32);
            }
        }
    }

    #[test]
    fn header_shape() {
        let text = to_ply_string(&PointCloud::new(vec![[1.0, 2.0, 3.0]]));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            &lines[..7],
            &[
                "ply",
                "format ascii 1.0",
                "element vertex 1",
                "property float x",
                "property float y",
                "property float z",
                "end_header",
            ]
        );
        assert_eq!(lines[7], "1 2 3");
    }

    #[test]
    fn empty_cloud() {
        let text = to_ply_string(&PointCloud::default());
        let back = from_ply_string(&text).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn rejects_binary_format() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(from_ply_string(text), Err(PlyError::Format(_))));
    }

    #[test]
    fn rejects_missing_magic() {
        assert!(matches!(from_ply_string("not a ply"), Err(PlyError::Magic)));
    }

    #[test]
    fn rejects_count_mismatch() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        assert!(matches!(from_ply_string(text), Err(PlyError::Count { expect: 2, found: 1 })));
    }

    #[test]
    fn tolerates_extra_properties_and_comments() {
        let text = "ply\ncomment made elsewhere\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nend_header\n1 2 3 0.5\n";
        let pc = from_ply_string(text).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0]]);
    }
}
