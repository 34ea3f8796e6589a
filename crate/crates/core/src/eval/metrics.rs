use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::mesh::{add, dist, dot, sample_surface, scale, sub, Mesh, Point};

fn nearest(p: Point, set: &[Point]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Mean over `a` of the distance to the nearest point of `b`. Minima are
/// computed in parallel and summed in index order.
pub fn one_sided(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    let mins: Vec<f64> = a.par_iter().map(|&p| nearest(p, b)).collect();
    Ok(mins.iter().sum::<f64>() / a.len() as f64)
}

/// Symmetric mean of unsquared nearest-neighbour distances, exact.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    let ab = one_sided(a, b)?;
    let ba = one_sided(b, a)?;
    Ok(0.5 * (ab + ba))
}

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: Point, [a, b, c]: [Point; 3]) -> Point {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

pub fn point_triangle_distance(p: Point, tri: [Point; 3]) -> f64 {
    dist(p, closest_point_on_triangle(p, tri))
}

/// Distance from `p` to the nearest face of `mesh`.
pub fn point_mesh_distance(p: Point, mesh: &Mesh) -> f64 {
    (0..mesh.num_faces())
        .map(|f| point_triangle_distance(p, mesh.triangle(f)))
        .fold(f64::INFINITY, f64::min)
}

/// Mean and maximum over `points` of the exact distance to `mesh`.
pub fn point_to_mesh(points: &[Point], mesh: &Mesh) -> Result<(f64, f64)> {
    if points.is_empty() || mesh.num_faces() == 0 {
        return Err(EvalError::Empty);
    }
    let d: Vec<f64> = points.par_iter().map(|&p| point_mesh_distance(p, mesh)).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let max = d.iter().cloned().fold(0.0, f64::max);
    Ok((mean, max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalConsistency {
    /// Mean over interior edges of `(1 - n_a . n_b) / 2`.
    pub value: f64,
    pub interior_edges: usize,
    /// Interior edges skipped because a neighbour has zero area.
    pub skipped: usize,
}

/// Adjacent-face dihedral measure over edges shared by exactly two faces.
pub fn normal_consistency(mesh: &Mesh) -> Result<NormalConsistency> {
    let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (f, tri) in mesh.faces().iter().enumerate() {
        for k in 0..3 {
            let (u, v) = (tri[k], tri[(k + 1) % 3]);
            edges.entry((u.min(v), u.max(v))).or_default().push(f);
        }
    }
    let mut keys: Vec<_> = edges.into_iter().filter(|(_, fs)| fs.len() == 2).collect();
    keys.sort_unstable();
    if keys.is_empty() {
        return Err(EvalError::NoInteriorEdges);
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (_, fs) in &keys {
        match (mesh.face_normal(fs[0]), mesh.face_normal(fs[1])) {
            (Some(a), Some(b)) => {
                sum += (1.0 - dot(a, b)) / 2.0;
                used += 1;
            }
            _ => skipped += 1,
        }
    }
    if used == 0 {
        return Err(EvalError::NoInteriorEdges);
    }
    Ok(NormalConsistency {
        value: sum / used as f64,
        interior_edges: keys.len(),
        skipped,
    })
}

/// Surface-to-surface Chamfer: points sampled on each mesh, measured
/// against the exact surface of the other.
pub fn mesh_chamfer(a: &Mesh, b: &Mesh, samples: usize, seed: u64) -> Result<f64> {
    let pa = sample_surface(a, samples, seed).map_err(EvalError::Mesh)?;
    let pb = sample_surface(b, samples, seed.wrapping_add(1)).map_err(EvalError::Mesh)?;
    let (ab, _) = point_to_mesh(&pa, b)?;
    let (ba, _) = point_to_mesh(&pb, a)?;
    Ok(0.5 * (ab + ba))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub chamfer: f64,
    pub normal_consistency: Option<f64>,
    pub nc_skipped_edges: usize,
    pub p2m_mean: f64,
    pub p2m_hausdorff: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Geometric quality of `generated` against `reference`. Point-to-mesh
/// distances go from points sampled on the reference to the generated
/// surface.
pub fn evaluate_meshes(generated: &Mesh, reference: &Mesh, samples: usize, seed: u64) -> Result<MetricReport> {
    let chamfer = mesh_chamfer(generated, reference, samples, seed)?;
    let (nc, skipped) = match normal_consistency(generated) {
        Ok(n) => (Some(n.value), n.skipped),
        Err(EvalError::NoInteriorEdges) => (None, 0),
        Err(e) => return Err(e),
    };
    let pts = sample_surface(reference, samples, seed.wrapping_add(2)).map_err(EvalError::Mesh)?;
    let (p2m_mean, p2m_hausdorff) = point_to_mesh(&pts, generated)?;
    Ok(MetricReport {
        chamfer,
        normal_consistency: nc,
        nc_skipped_edges: skipped,
        p2m_mean,
        p2m_hausdorff,
        samples,
        seed,
    })
}
