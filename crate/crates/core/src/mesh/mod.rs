//! Triangle meshes and everything that produces or consumes them before
//! tokenization.

mod obj;
mod quant;
mod sample;
mod synth;

pub use obj::{load_obj, parse_obj, to_obj_string, write_obj};
pub use quant::{dequantize, normalize, quantize, quantize_point, BINS, NORMALIZE_INSET};
pub use sample::{make_pointcloud_set, sample_surface, PointCloudSet, FULL_SCALE_N1_OVER_N2, TOY_COUNTS};
pub use synth::{synth_shape, synth_shape_jittered, ShapeKind};

use rand::seq::index::sample as sample_indices;
use thiserror::Error;

pub type Point = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: index out of range ({index} with {count} vertices)")]
    IndexOutOfRange { line: usize, index: i64, count: usize },
    #[error("face {face}: index {index} out of range for {count} vertices")]
    FaceIndex { face: usize, index: usize, count: usize },
    #[error("face {0} repeats a vertex")]
    RepeatedVertex(usize),
    #[error("vertex {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("mesh is empty")]
    Empty,
    #[error("degenerate extent: bounding box has zero size on every axis")]
    DegenerateExtent,
    #[error("every face has zero area")]
    AllFacesDegenerate,
    #[error("ordering N2<N3<N4<N1 violated: {0:?}")]
    Ordering([usize; 4]),
    #[error("corruption would remove all faces ({remove} of {faces})")]
    WouldRemoveAll { remove: usize, faces: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{kind} resolution {resolution} outside [{min}, {max}]")]
    Resolution {
        kind: &'static str,
        resolution: usize,
        min: usize,
        max: usize,
    },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, MeshError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    /// Validates indices, repeated vertices and finiteness.
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(MeshError::NonFinite(i));
            }
        }
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx >= vertices.len() {
                    return Err(MeshError::FaceIndex {
                        face: fi,
                        index: idx,
                        count: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedVertex(fi));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle(&self, f: usize) -> [Point; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.triangle(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    /// Unit normal by the right-hand rule, or `None` for a zero-area face.
    pub fn face_normal(&self, f: usize) -> Option<Point> {
        let [a, b, c] = self.triangle(f);
        let n = cross(sub(b, a), sub(c, a));
        let l = norm(n);
        (l > 0.0).then(|| scale(n, 1.0 / l))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive for a closed, outward-wound mesh.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn bbox(&self) -> Option<(Point, Point)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        Some((lo, hi))
    }

    /// Same faces with vertices replaced; used by normalization.
    pub(crate) fn with_vertices(&self, vertices: Vec<Point>) -> Self {
        Self {
            vertices,
            faces: self.faces.clone(),
        }
    }
}

/// Removes `floor(fraction * f)` faces chosen uniformly without
/// replacement. Vertices are kept so indices stay stable.
pub fn corrupt_mesh(mesh: &Mesh, fraction: f64, seed: u64) -> Result<Mesh> {
    let f = mesh.num_faces();
    if f < 2 {
        return Err(MeshError::Invalid(format!("corruption needs at least 2 faces, got {f}")));
    }
    if !(fraction > 0.0) || !fraction.is_finite() {
        return Err(MeshError::Invalid(format!("corruption fraction {fraction} not in (0, 1)")));
    }
    let remove = (fraction * f as f64).floor() as usize;
    if remove >= f {
        return Err(MeshError::WouldRemoveAll { remove, faces: f });
    }
    let mut rng = crate::rng::seeded(seed);
    let mut drop = vec![false; f];
    for i in sample_indices(&mut rng, f, remove) {
        drop[i] = true;
    }
    let faces = mesh
        .faces
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(f, _)| *f)
        .collect();
    Ok(Mesh {
        vertices: mesh.vertices.clone(),
        faces,
    })
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_faces() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(Mesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Mesh::new(v.clone(), vec![[0, 1, 1]]).is_err());
        let mut bad = v.clone();
        bad[1][2] = f64::NAN;
        assert!(Mesh::new(bad, vec![[0, 1, 2]]).is_err());
        assert!(Mesh::new(v, vec![[0, 1, 2]]).is_ok());
    }

    #[test]
    fn corruption_counts() {
        let cube = synth_shape(ShapeKind::Cube, 1, 0).unwrap();
        assert_eq!(corrupt_mesh(&cube, 0.25, 1).unwrap().num_faces(), 9);
        assert_eq!(corrupt_mesh(&cube, 0.99, 1).unwrap().num_faces(), 1);
        assert!(matches!(corrupt_mesh(&cube, 1.0, 1), Err(MeshError::WouldRemoveAll { .. })));
        assert_eq!(corrupt_mesh(&cube, 0.5, 7), corrupt_mesh(&cube, 0.5, 7));
    }
}
