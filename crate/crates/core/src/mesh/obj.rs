//! Wavefront OBJ, `v` and `f` records only.

use std::fmt::Write as _;
use std::path::Path;

use super::{Mesh, MeshError, Point, Result};

pub fn load_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| MeshError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_obj(&text)
}

/// Parses OBJ text. Polygons are fan-triangulated from their first vertex;
/// `a/b/c` index forms and negative (relative) indices are accepted. Other
/// record types are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut verts: Vec<Point> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut it = content.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<&str> = it.collect();
                if coords.len() < 3 || coords.len() > 4 {
                    return Err(MeshError::Parse {
                        line,
                        msg: format!("vertex record needs 3 coordinates, found {}", coords.len()),
                    });
                }
                let mut p = [0.0; 3];
                for k in 0..3 {
                    let c: f64 = coords[k].parse().map_err(|_| MeshError::Parse {
                        line,
                        msg: format!("bad coordinate {:?}", coords[k]),
                    })?;
                    if !c.is_finite() {
                        return Err(MeshError::Parse {
                            line,
                            msg: "non-finite coordinate".into(),
                        });
                    }
                    p[k] = c;
                }
                verts.push(p);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| MeshError::Parse {
                        line,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    let n = verts.len() as i64;
                    let resolved = if i > 0 { i - 1 } else { n + i };
                    if i == 0 || resolved < 0 || resolved >= n {
                        return Err(MeshError::IndexOutOfRange {
                            line,
                            index: i,
                            count: verts.len(),
                        });
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        msg: format!("face needs at least 3 vertices, found {}", idx.len()),
                    });
                }
                for k in 1..idx.len() - 1 {
                    let tri = [idx[0], idx[k], idx[k + 1]];
                    if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                        return Err(MeshError::Parse {
                            line,
                            msg: "face repeats a vertex".into(),
                        });
                    }
                    faces.push(tri);
                }
            }
            _ => {}
        }
    }
    Mesh::new(verts, faces)
}

pub fn to_obj_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, to_obj_string(mesh)).map_err(|e| MeshError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_and_quad() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!((m.num_vertices(), m.num_faces()), (3, 1));
        let q = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(q.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn slashes_and_negative_indices() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3/1/1 -2//1 -1/2\n").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n").unwrap_err();
        assert_eq!(
            e,
            MeshError::IndexOutOfRange {
                line: 4,
                index: 9,
                count: 3
            }
        );
        assert!(e.to_string().contains("index out of range"));
        assert!(matches!(parse_obj("v 0 nan 0\n"), Err(MeshError::Parse { line: 1, .. })));
        assert!(matches!(parse_obj("v 0 0\n"), Err(MeshError::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read() {
        let m = crate::mesh::synth_shape(crate::mesh::ShapeKind::Torus, 5, 0).unwrap();
        assert_eq!(parse_obj(&to_obj_string(&m)).unwrap(), m);
    }
}
