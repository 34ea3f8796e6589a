use std::collections::HashMap;

use lane_core::mesh::{
    corrupt_mesh, dequantize, make_pointcloud_set, normalize, quantize_point, sample_surface, synth_shape,
    synth_shape_jittered, Mesh, MeshError, Point, ShapeKind, FULL_SCALE_N1_OVER_N2, TOY_COUNTS,
};
use proptest::prelude::*;

/// Independent on-surface test: the point lies in some triangle's plane
/// and its barycentric coordinates there are all non-negative.
fn on_surface(mesh: &Mesh, p: Point, tol: f64) -> bool {
    (0..mesh.num_faces()).any(|f| {
        let [a, b, c] = mesh.triangle(f);
        let v0 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v1 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let v2 = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
        let d = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
        let (d00, d01, d11, d20, d21) = (d(v0, v0), d(v0, v1), d(v1, v1), d(v2, v0), d(v2, v1));
        let den = d00 * d11 - d01 * d01;
        if den <= 0.0 {
            return false;
        }
        let v = (d11 * d20 - d01 * d21) / den;
        let w = (d00 * d21 - d01 * d20) / den;
        let u = 1.0 - v - w;
        let proj: Vec<f64> = (0..3).map(|k| a[k] + v * v0[k] + w * v1[k]).collect();
        let off = ((p[0] - proj[0]).powi(2) + (p[1] - proj[1]).powi(2) + (p[2] - proj[2]).powi(2)).sqrt();
        u >= -tol && v >= -tol && w >= -tol && off <= tol
    })
}

fn directed_edges(mesh: &Mesh) -> HashMap<(usize, usize), usize> {
    let mut m = HashMap::new();
    for f in mesh.faces() {
        for k in 0..3 {
            *m.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    m
}

#[test]
fn synth_counts_match_formulas() {
    let cube = synth_shape(ShapeKind::Cube, 1, 0).unwrap();
    assert_eq!((cube.num_vertices(), cube.num_faces()), (8, 12));
    let sphere = synth_shape(ShapeKind::UvSphere, 8, 0).unwrap();
    assert_eq!(sphere.num_faces(), 2 * 8 * 8 - 2 * 8);
    assert_eq!(sphere.num_faces(), 112);
    let grid = synth_shape(ShapeKind::Grid, 4, 0).unwrap();
    assert_eq!((grid.num_vertices(), grid.num_faces()), (25, 32));
    for kind in ShapeKind::ALL {
        let (lo, _) = kind.resolution_bounds();
        for r in lo..lo + 5 {
            let m = synth_shape(kind, r, 0).unwrap();
            assert_eq!(m.num_faces(), kind.face_count(r), "{kind} {r}");
            assert_eq!(m.num_vertices(), kind.vertex_count(r), "{kind} {r}");
        }
    }
}

#[test]
fn closed_shapes_are_watertight_and_outward() {
    for kind in [ShapeKind::Cube, ShapeKind::UvSphere, ShapeKind::Torus] {
        for r in [3, 4, 7] {
            let m = synth_shape(kind, r, 0).unwrap();
            let e = directed_edges(&m);
            for (&(a, b), &n) in &e {
                assert_eq!(n, 1, "{kind} {r}: directed edge repeated");
                assert!(e.contains_key(&(b, a)), "{kind} {r}: boundary edge");
            }
            assert!(m.signed_volume() > 0.0, "{kind} {r}");
            for f in 0..m.num_faces() {
                assert!(m.face_area(f) > 0.0);
            }
        }
    }
}

#[test]
fn resolution_bounds_are_enforced() {
    assert!(matches!(synth_shape(ShapeKind::Cube, 0, 0), Err(MeshError::Resolution { .. })));
    assert!(matches!(synth_shape(ShapeKind::UvSphere, 2, 0), Err(MeshError::Resolution { .. })));
    assert!(synth_shape(ShapeKind::Grid, 257, 0).is_err());
}

#[test]
fn jitter_depends_on_seed_only_in_positions() {
    let a = synth_shape_jittered(ShapeKind::Torus, 5, 1, 0.01).unwrap();
    let b = synth_shape_jittered(ShapeKind::Torus, 5, 2, 0.01).unwrap();
    assert_eq!(a.faces(), b.faces());
    assert_ne!(a.vertices(), b.vertices());
    assert_eq!(a, synth_shape_jittered(ShapeKind::Torus, 5, 1, 0.01).unwrap());
}

#[test]
fn samples_lie_in_single_triangle() {
    let m = Mesh::new(vec![[0.1, 0.2, 0.3], [0.9, 0.1, 0.5], [0.4, 0.8, 0.2]], vec![[0, 1, 2]]).unwrap();
    let pts = sample_surface(&m, 1000, 3).unwrap();
    assert!(pts.iter().all(|&p| on_surface(&m, p, 1e-6)));
    assert_eq!(pts, sample_surface(&m, 1000, 3).unwrap());
}

#[test]
fn sampling_is_area_weighted() {
    // two disjoint triangles with areas 9:1
    let m = Mesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.0, 3.0, 0.0],
            [0.0, 0.0, 5.0],
            [1.0, 0.0, 5.0],
            [0.0, 1.0, 5.0],
        ],
        vec![[0, 1, 2], [3, 4, 5]],
    )
    .unwrap();
    let pts = sample_surface(&m, 100_000, 11).unwrap();
    let frac = pts.iter().filter(|p| p[2] < 1.0).count() as f64 / 1e5;
    // binomial sd is sqrt(0.9 * 0.1 / 1e5) ~ 0.00095, so 0.01 is ~10 sd
    assert!((frac - 0.9).abs() < 0.01, "{frac}");
}

#[test]
fn zero_area_mesh_cannot_be_sampled() {
    let m = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
    assert_eq!(sample_surface(&m, 5, 0), Err(MeshError::AllFacesDegenerate));
}

#[test]
fn pointcloud_set_ordering_and_support() {
    let m = normalize(&synth_shape(ShapeKind::UvSphere, 6, 0).unwrap()).unwrap();
    let set = make_pointcloud_set(&m, TOY_COUNTS, 5).unwrap();
    assert_eq!(set.counts(), TOY_COUNTS);
    for cloud in [&set.x2, &set.x3, &set.x4] {
        assert!(cloud.iter().all(|&p| on_surface(&m, p, 1e-6)));
    }
    assert!(set.x1.iter().take(500).all(|&p| on_surface(&m, p, 1e-6)));
    assert_eq!(set.x2, sample_surface(&m, 512, 6).unwrap());
    assert!(matches!(
        make_pointcloud_set(&m, [100, 200, 300, 400], 0),
        Err(MeshError::Ordering(_))
    ));
    assert!(make_pointcloud_set(&m, [100, 200, 300, 400], 0).unwrap_err().to_string().contains("N2<N3<N4<N1"));
    assert_eq!(TOY_COUNTS[0] / TOY_COUNTS[1], FULL_SCALE_N1_OVER_N2);
}

fn arb_mesh() -> impl Strategy<Value = Mesh> {
    (prop::sample::select(ShapeKind::ALL.to_vec()), 0usize..4, any::<u64>(), 0.0f64..0.3, 0.1f64..10.0).prop_map(
        |(kind, dr, seed, jit, s)| {
            let (lo, _) = kind.resolution_bounds();
            let m = synth_shape_jittered(kind, lo + dr, seed, jit).unwrap();
            let v: Vec<Point> = m.vertices().iter().map(|p| [p[0] * s, p[1] * s * 0.5, p[2] * s + 3.0]).collect();
            Mesh::new(v, m.faces().to_vec()).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(m in arb_mesh()) {
        let n = normalize(&m).unwrap();
        let nn = normalize(&n).unwrap();
        for (a, b) in n.vertices().iter().zip(nn.vertices()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-7);
            }
        }
        let (lo, hi) = n.bbox().unwrap();
        let ext = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        prop_assert!((ext - (1.0 - 2.0 / 1024.0)).abs() < 1e-12);
        for k in 0..3 {
            prop_assert!(lo[k] >= 1.0 / 1024.0 - 1e-12 && hi[k] <= 1.0 - 1.0 / 1024.0 + 1e-12);
        }
    }

    #[test]
    fn quantization_error_is_bounded(m in arb_mesh()) {
        let n = normalize(&m).unwrap();
        for &p in n.vertices() {
            let q = quantize_point(p);
            let back = [dequantize(q[0]), dequantize(q[1]), dequantize(q[2])];
            let d = ((p[0] - back[0]).powi(2) + (p[1] - back[1]).powi(2) + (p[2] - back[2]).powi(2)).sqrt();
            prop_assert!(d < 3f64.sqrt() / 2.0 / 512.0);
        }
    }

    #[test]
    fn samples_are_on_surface(m in arb_mesh(), seed in any::<u64>()) {
        let n = normalize(&m).unwrap();
        for p in sample_surface(&n, 50, seed).unwrap() {
            prop_assert!(on_surface(&n, p, 1e-6));
        }
    }

    #[test]
    fn corruption_yields_strict_subset(m in arb_mesh(), frac in 0.01f64..0.95, seed in any::<u64>()) {
        let c = corrupt_mesh(&m, frac, seed).unwrap();
        let removed = (frac * m.num_faces() as f64).floor() as usize;
        prop_assert_eq!(c.num_faces(), m.num_faces() - removed);
        prop_assert_eq!(c.vertices(), m.vertices());
        let mut it = m.faces().iter();
        for f in c.faces() {
            prop_assert!(it.any(|g| g == f));
        }
        prop_assert_eq!(&c, &corrupt_mesh(&m, frac, seed).unwrap());
    }
}
