use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{add, scale, sub, Mesh, MeshError, Point, Result};

/// Toy-scale sampling counts `(N1, N2, N3, N4)`.
pub const TOY_COUNTS: [usize; 4] = [8192, 512, 1024, 2048];

/// Ratio of the conditioning cloud to the coarsest query cloud at full
/// scale.
pub const FULL_SCALE_N1_OVER_N2: usize = 16;

/// Area-weighted surface sampling: a face is picked with probability
/// proportional to its area, then a uniform point inside it.
pub fn sample_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(MeshError::Invalid("sample count must be at least 1".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.num_faces());
    let mut total = 0.0;
    for f in 0..mesh.num_faces() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::AllFacesDegenerate);
    }
    let mut rng = crate::rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        // first face whose cumulative area exceeds u; zero-area faces never win
        let f = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let [a, b, c] = mesh.triangle(f);
        let p = add(a, add(scale(sub(b, a), s * (1.0 - r2)), scale(sub(c, a), s * r2)));
        out.push(p);
    }
    Ok(out)
}

/// Four independent surface samplings of one mesh. `x1` is the dense
/// conditioning cloud; `x2..x4` are the increasingly fine query clouds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudSet {
    pub x1: Vec<Point>,
    pub x2: Vec<Point>,
    pub x3: Vec<Point>,
    pub x4: Vec<Point>,
    pub seed: u64,
}

impl PointCloudSet {
    pub fn counts(&self) -> [usize; 4] {
        [self.x1.len(), self.x2.len(), self.x3.len(), self.x4.len()]
    }

    pub fn check_ordering(counts: [usize; 4]) -> Result<()> {
        let [n1, n2, n3, n4] = counts;
        if n2 > 0 && n2 < n3 && n3 < n4 && n4 < n1 {
            Ok(())
        } else {
            Err(MeshError::Ordering(counts))
        }
    }
}

/// Samples `X1..X4` with seeds `seed + 0..3`.
pub fn make_pointcloud_set(mesh: &Mesh, counts: [usize; 4], seed: u64) -> Result<PointCloudSet> {
    PointCloudSet::check_ordering(counts)?;
    Ok(PointCloudSet {
        x1: sample_surface(mesh, counts[0], seed)?,
        x2: sample_surface(mesh, counts[1], seed.wrapping_add(1))?,
        x3: sample_surface(mesh, counts[2], seed.wrapping_add(2))?,
        x4: sample_surface(mesh, counts[3], seed.wrapping_add(3))?,
        seed,
    })
}
