//! Procedural shapes. Every closed shape is wound outward and consistently,
//! so each directed edge appears in exactly one face.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Mesh, MeshError, Point, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Subdivided cube: `6r^2 + 2` vertices, `12r^2` faces, r in 1..=64.
    Cube,
    /// `r` latitude bands by `r` segments with pole fans: `r^2 - r + 2`
    /// vertices, `2r^2 - 2r` faces, r in 3..=128.
    UvSphere,
    /// `r x r` torus: `r^2` vertices, `2r^2` faces, r in 3..=128.
    Torus,
    /// Open unit square: `(r+1)^2` vertices, `2r^2` faces, r in 1..=256.
    Grid,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Cube, ShapeKind::UvSphere, ShapeKind::Torus, ShapeKind::Grid];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::UvSphere => "uv_sphere",
            ShapeKind::Torus => "torus",
            ShapeKind::Grid => "grid",
        }
    }

    pub fn resolution_bounds(self) -> (usize, usize) {
        match self {
            ShapeKind::Cube => (1, 64),
            ShapeKind::UvSphere | ShapeKind::Torus => (3, 128),
            ShapeKind::Grid => (1, 256),
        }
    }

    pub fn face_count(self, r: usize) -> usize {
        match self {
            ShapeKind::Cube => 12 * r * r,
            ShapeKind::UvSphere => 2 * r * r - 2 * r,
            ShapeKind::Torus | ShapeKind::Grid => 2 * r * r,
        }
    }

    pub fn vertex_count(self, r: usize) -> usize {
        match self {
            ShapeKind::Cube => 6 * r * r + 2,
            ShapeKind::UvSphere => r * r - r + 2,
            ShapeKind::Torus => r * r,
            ShapeKind::Grid => (r + 1) * (r + 1),
        }
    }

    pub fn is_closed(self) -> bool {
        self != ShapeKind::Grid
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MeshError::Invalid(format!("unknown shape kind {s:?}")))
    }
}

/// Deterministic shape; `seed` is unused without jitter.
pub fn synth_shape(kind: ShapeKind, resolution: usize, _seed: u64) -> Result<Mesh> {
    synth_shape_jittered(kind, resolution, 0, 0.0)
}

/// Shape with every vertex displaced uniformly in `[-amplitude, amplitude]^3`
/// by a stream derived from `seed`. Topology does not depend on the seed.
pub fn synth_shape_jittered(kind: ShapeKind, resolution: usize, seed: u64, amplitude: f64) -> Result<Mesh> {
    let (min, max) = kind.resolution_bounds();
    if resolution < min || resolution > max {
        return Err(MeshError::Resolution {
            kind: kind.name(),
            resolution,
            min,
            max,
        });
    }
    let (mut v, f) = match kind {
        ShapeKind::Cube => cube(resolution),
        ShapeKind::UvSphere => uv_sphere(resolution),
        ShapeKind::Torus => torus(resolution),
        ShapeKind::Grid => grid(resolution),
    };
    if amplitude != 0.0 {
        use rand::Rng as _;
        let mut rng = crate::rng::derived(seed, "jitter");
        for p in &mut v {
            for c in p.iter_mut() {
                *c += rng.gen_range(-amplitude..=amplitude);
            }
        }
    }
    Mesh::new(v, f)
}

fn cube(r: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |lat: [usize; 3], verts: &mut Vec<Point>| -> usize {
        *index.entry(lat).or_insert_with(|| {
            verts.push(std::array::from_fn(|k| 2.0 * lat[k] as f64 / r as f64 - 1.0));
            verts.len() - 1
        })
    };
    // (normal axis, u axis, v axis) with u x v pointing along +normal;
    // the negative side swaps u and v.
    let sides = [(0, 1, 2), (1, 2, 0), (2, 0, 1)];
    for &(a, u, w) in &sides {
        for positive in [false, true] {
            let (u, w) = if positive { (u, w) } else { (w, u) };
            let fixed = if positive { r } else { 0 };
            for i in 0..r {
                for j in 0..r {
                    let at = |di: usize, dj: usize| {
                        let mut l = [0; 3];
                        l[a] = fixed;
                        l[u] = i + di;
                        l[w] = j + dj;
                        l
                    };
                    let p00 = vid(at(0, 0), &mut verts);
                    let p10 = vid(at(1, 0), &mut verts);
                    let p11 = vid(at(1, 1), &mut verts);
                    let p01 = vid(at(0, 1), &mut verts);
                    faces.push([p00, p10, p11]);
                    faces.push([p00, p11, p01]);
                }
            }
        }
    }
    (verts, faces)
}

fn uv_sphere(r: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut verts = vec![[0.0, 0.0, 1.0]];
    for k in 1..r {
        let th = PI * k as f64 / r as f64;
        for j in 0..r {
            let ph = 2.0 * PI * j as f64 / r as f64;
            verts.push([th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]);
        }
    }
    let bottom = verts.len();
    verts.push([0.0, 0.0, -1.0]);
    let ring = |k: usize, j: usize| 1 + (k - 1) * r + j % r;
    let mut faces = Vec::new();
    for j in 0..r {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for k in 1..r - 1 {
        for j in 0..r {
            faces.push([ring(k, j), ring(k + 1, j), ring(k + 1, j + 1)]);
            faces.push([ring(k, j), ring(k + 1, j + 1), ring(k, j + 1)]);
        }
    }
    for j in 0..r {
        faces.push([bottom, ring(r - 1, j + 1), ring(r - 1, j)]);
    }
    (verts, faces)
}

fn torus(r: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let (big, small) = (1.0, 0.4);
    let mut verts = Vec::with_capacity(r * r);
    for i in 0..r {
        let u = 2.0 * PI * i as f64 / r as f64;
        for j in 0..r {
            let v = 2.0 * PI * j as f64 / r as f64;
            let rad = big + small * v.cos();
            verts.push([rad * u.cos(), rad * u.sin(), small * v.sin()]);
        }
    }
    let id = |i: usize, j: usize| (i % r) * r + j % r;
    let mut faces = Vec::with_capacity(2 * r * r);
    for i in 0..r {
        for j in 0..r {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    (verts, faces)
}

fn grid(r: usize) -> (Vec<Point>, Vec<[usize; 3]>) {
    let mut verts = Vec::with_capacity((r + 1) * (r + 1));
    for i in 0..=r {
        for j in 0..=r {
            verts.push([i as f64 / r as f64, j as f64 / r as f64, 0.0]);
        }
    }
    let id = |i: usize, j: usize| i * (r + 1) + j;
    let mut faces = Vec::with_capacity(2 * r * r);
    for i in 0..r {
        for j in 0..r {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    (verts, faces)
}
