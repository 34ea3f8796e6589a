use super::{Mesh, MeshError, Point, Result};

/// Bins per axis.
pub const BINS: usize = 512;

/// Half a quantization cell; the normalized box is inset by this much.
pub const NORMALIZE_INSET: f64 = 1.0 / 1024.0;

/// Centers the mesh in `[0,1)^3` and scales its longest side to
/// `1 - 2*NORMALIZE_INSET`, preserving aspect ratio.
pub fn normalize(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh.bbox().ok_or(MeshError::Empty)?;
    let ext = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    if !(ext > 0.0) {
        return Err(MeshError::DegenerateExtent);
    }
    let s = (1.0 - 2.0 * NORMALIZE_INSET) / ext;
    let center: Point = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
    let verts = mesh
        .vertices()
        .iter()
        .map(|v| std::array::from_fn(|k| (v[k] - center[k]) * s + 0.5))
        .collect();
    Ok(mesh.with_vertices(verts))
}

/// `floor(c * 512)` clamped to `[0, 511]`.
pub fn quantize(c: f64) -> u16 {
    let b = (c * BINS as f64).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else if b >= (BINS - 1) as f64 {
        (BINS - 1) as u16
    } else {
        b as u16
    }
}

/// Bin center.
pub fn dequantize(b: u16) -> f64 {
    (f64::from(b) + 0.5) / BINS as f64
}

pub fn quantize_point(p: Point) -> [u16; 3] {
    [quantize(p[0]), quantize(p[1]), quantize(p[2])]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 256);
        assert_eq!(quantize(1.0), 511);
        assert_eq!(quantize(-0.1), 0);
        assert_eq!(dequantize(0), 0.0009765625);
        for b in 0..BINS as u16 {
            assert_eq!(quantize(dequantize(b)), b);
        }
    }

    #[test]
    fn cube_corners_map_to_inset() {
        let m = Mesh::new(
            vec![[-5.0, -5.0, -5.0], [5.0, 5.0, 5.0], [5.0, -5.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let n = normalize(&m).unwrap();
        let e = NORMALIZE_INSET;
        for k in 0..3 {
            assert!((n.vertices()[0][k] - e).abs() < 1e-15);
            assert!((n.vertices()[1][k] - (1.0 - e)).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_extent_is_rejected() {
        let m = Mesh::new(vec![[1.0, 2.0, 3.0]; 3], vec![]).unwrap();
        assert_eq!(normalize(&m), Err(MeshError::DegenerateExtent));
    }
}
