use std::sync::Arc;

use lane_core::rng;
use lane_core::tensor::{
    gradcheck, AttnMask, GradcheckOptions, LaneGroup, Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::seeded(seed))
}

/// Scalar probe: sum(out * w) for a fixed random w, so every output element
/// contributes with a distinct weight.
fn probe(t: &mut Tape, v: Var, seed: u64) -> lane_core::tensor::Result<Var> {
    let shape = t.shape(v).to_vec();
    let w = t.constant(randn(&shape, seed ^ 0xabc));
    let p = t.mul(v, w)?;
    t.sum(p)
}

fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> lane_core::tensor::Result<Var>) -> f64 {
    let r = gradcheck(&inputs, f, GradcheckOptions::default()).unwrap();
    assert!(r.checked > 0);
    r.max_rel_error
}

// --- slow references, written independently of the kernels ---

fn ref_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn ref_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, allow: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let (nq, nk, d) = (q.rows(), k.rows(), q.cols());
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let mut scores = vec![f64::NEG_INFINITY; nk];
            for (j, s) in scores.iter_mut().enumerate() {
                if allow(i, j) {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.row(i)[h * dh + c] * k.row(j)[h * dh + c];
                    }
                    *s = dot / (dh as f64).sqrt();
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..nk).map(|j| w[j] / z * v.row(j)[h * dh + c]).sum();
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    let y = t.softmax(x).unwrap();
    close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn cross_entropy_of_uniform_logits() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[4, 517]));
    let l = t.cross_entropy(x, &[0, 17, 516, 3], 9999).unwrap();
    assert!((t.value(l).item() - 517f64.ln()).abs() < 1e-12);
    assert!((t.value(l).item() - 6.248).abs() < 1e-3);
}

#[test]
fn cross_entropy_ignores_padding() {
    let logits = randn(&[3, 5], 1);
    let mut t = Tape::new();
    let x = t.constant(logits.clone());
    let all = t.cross_entropy(x, &[1, 4, 2], 9).unwrap();
    let some = t.cross_entropy(x, &[1, 9, 2], 9).unwrap();
    let row_ce = |r: usize, tgt: usize| {
        let row = logits.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[tgt]
    };
    assert!((t.value(all).item() - (row_ce(0, 1) + row_ce(1, 4) + row_ce(2, 2)) / 3.0).abs() < 1e-12);
    assert!((t.value(some).item() - (row_ce(0, 1) + row_ce(2, 2)) / 2.0).abs() < 1e-12);
    assert!(t.cross_entropy(x, &[9, 9, 9], 9).is_err());
}

#[test]
fn attention_with_one_key_per_query_copies_values() {
    let (q, k, v) = (randn(&[3, 4], 1), randn(&[3, 4], 2), randn(&[3, 4], 3));
    let mut mask = vec![false; 9];
    for (i, j) in [(0, 2), (1, 0), (2, 1)] {
        mask[i * 3 + j] = true;
    }
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v.clone()));
    let o = t.attention(qv, kv, vv, 2, AttnMask::Dense(Arc::new(mask))).unwrap();
    close(t.value(o).row(0), v.row(2), 1e-15);
    close(t.value(o).row(1), v.row(0), 1e-15);
    close(t.value(o).row(2), v.row(1), 1e-15);
}

#[test]
fn forward_values_match_references() {
    let mut t = Tape::new();
    let a = randn(&[5, 7], 1);
    let b = randn(&[7, 3], 2);
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let m = t.matmul(av, bv).unwrap();
    close(t.value(m).data(), &ref_matmul(&a, &b), 1e-10);

    let bias = randn(&[3], 3);
    let bias_v = t.constant(bias.clone());
    let l = t.linear(av, bv, Some(bias_v)).unwrap();
    let mut want = ref_matmul(&a, &b);
    for (i, w) in want.iter_mut().enumerate() {
        *w += bias.data()[i % 3];
    }
    close(t.value(l).data(), &want, 1e-10);

    let (q, k, v) = (randn(&[6, 8], 4), randn(&[9, 8], 5), randn(&[9, 8], 6));
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let o = t.attention(qv, kv, vv, 2, AttnMask::Full).unwrap();
    close(t.value(o).data(), &ref_attention(&q, &k, &v, 2, &|_, _| true), 1e-10);

    // block-causal over 3 blocks of 2 tokens
    let (q, k, v) = (randn(&[6, 8], 7), randn(&[6, 8], 8), randn(&[6, 8], 9));
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let o = t.attention(qv, kv, vv, 4, AttnMask::block_causal(3, 2)).unwrap();
    close(t.value(o).data(), &ref_attention(&q, &k, &v, 4, &|i, j| j / 2 <= i / 2), 1e-10);
    let o2 = t.attention(qv, kv, vv, 4, AttnMask::causal(6)).unwrap();
    close(t.value(o2).data(), &ref_attention(&q, &k, &v, 4, &|i, j| j <= i), 1e-10);

    let x = randn(&[4, 6], 10);
    let (g, be) = (randn(&[6], 11), randn(&[6], 12));
    let (xv, gv, bev) = (t.constant(x.clone()), t.constant(g.clone()), t.constant(be.clone()));
    let ln = t.layer_norm(xv, Some((gv, bev))).unwrap();
    let mut want = Vec::new();
    for r in 0..4 {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
        for j in 0..6 {
            want.push((row[j] - mu) / (var + 1e-5).sqrt() * g.data()[j] + be.data()[j]);
        }
    }
    close(t.value(ln).data(), &want, 1e-10);

    let ge = t.gelu(xv).unwrap();
    let want: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    close(t.value(ge).data(), &want, 1e-12);
}

#[test]
fn lane_attention_matches_per_group_reference() {
    let d = 8;
    let groups = [LaneGroup { rows: 3, latent: 2 }, LaneGroup { rows: 3, latent: 5 }];
    let (q, ks, vs) = (randn(&[6, d], 1), randn(&[6, d], 2), randn(&[6, d], 3));
    let (kl, vl) = (randn(&[5, d], 4), randn(&[5, d], 5));
    let mut t = Tape::new();
    let vars: Vec<Var> = [&q, &ks, &vs, &kl, &vl].iter().map(|x| t.constant((*x).clone())).collect();
    let o = t.lane_attention(vars[0], vars[1], vars[2], vars[3], vars[4], 2, &groups).unwrap();
    let mut r0 = 0;
    for g in groups {
        let qg = q.slice_rows(r0, r0 + g.rows);
        let cat = |own: &Tensor, lat: &Tensor| {
            let mut rows: Vec<Vec<f64>> = (r0..r0 + g.rows).map(|i| own.row(i).to_vec()).collect();
            rows.extend((0..g.latent).map(|i| lat.row(i).to_vec()));
            Tensor::from_rows(&rows).unwrap()
        };
        let want = ref_attention(&qg, &cat(&ks, &kl), &cat(&vs, &vl), 2, &|_, _| true);
        close(&t.value(o).data()[r0 * d..(r0 + g.rows) * d], &want, 1e-10);
        r0 += g.rows;
    }
}

#[test]
fn shape_errors_report_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(TensorError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
    let c = t.constant(Tensor::zeros(&[3, 2]));
    assert!(t.add(a, c).is_err());
}

#[test]
fn fully_masked_row_is_rejected() {
    let mut t = Tape::new();
    let q = t.constant(randn(&[2, 4], 1));
    let mask = AttnMask::Dense(Arc::new(vec![true, false, false, false]));
    assert!(matches!(
        t.attention(q, q, q, 1, mask),
        Err(TensorError::FullyMasked { row: 1, .. })
    ));
}

#[test]
fn backward_on_inference_tape_fails() {
    let mut t = Tape::inference();
    let x = t.input(Tensor::scalar(1.0));
    let s = t.sum(x).unwrap();
    assert_eq!(t.backward(s).err(), Some(TensorError::NoGradRecorded));
}

// --- gradient checks, one per op ---

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_square_sum() {
    let e = check(vec![randn(&[4, 5], 1)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    });
    assert!(e < 1e-7, "{e}");
}

#[test]
fn gradcheck_matmul_linear_add_scale() {
    let e = check(vec![randn(&[4, 5], 1), randn(&[5, 3], 2), randn(&[3], 3)], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let l = t.linear(v[0], v[1], Some(v[2]))?;
        let s = t.add(m, l)?;
        let s = t.scale(s, -0.7)?;
        probe(t, s, 1)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_concat_slice_gather_tile() {
    let e = check(vec![randn(&[3, 4], 1), randn(&[2, 4], 2), randn(&[2, 4], 3)], |t, v| {
        let c = t.concat_rows(&[v[0], v[1]])?;
        let s = t.slice_rows(c, 1, 4)?;
        let g = t.gather(c, &[4, 0, 0, 2])?;
        let ta = t.tile_add(s, v[2])?;
        let a = probe(t, g, 2)?;
        let b = probe(t, ta, 3)?;
        t.add(a, b)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_softmax_gelu() {
    let e = check(vec![randn(&[3, 6], 1)], |t, v| {
        let s = t.softmax(v[0])?;
        let g = t.gelu(v[0])?;
        let a = probe(t, s, 4)?;
        let b = probe(t, g, 5)?;
        t.add(a, b)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_layer_norm_affine_and_plain() {
    let e = check(vec![randn(&[3, 8], 1), randn(&[8], 2), randn(&[8], 3)], |t, v| {
        let a = t.layer_norm(v[0], Some((v[1], v[2])))?;
        let b = t.layer_norm(v[0], None)?;
        let pa = probe(t, a, 6)?;
        let pb = probe(t, b, 7)?;
        t.add(pa, pb)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_layer_norm_near_constant_input() {
    // row variance about 1e-12: the additive floor keeps the map smooth
    let mut x = Tensor::full(&[2, 8], 0.3);
    let noise = randn(&[2, 8], 9);
    for (a, n) in x.data_mut().iter_mut().zip(noise.data()) {
        *a += 1e-6 * n;
    }
    let e = check(vec![x], |t, v| {
        let a = t.layer_norm(v[0], None)?;
        probe(t, a, 8)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_modulate() {
    let e = check(vec![randn(&[6, 4], 1), randn(&[2, 4], 2), randn(&[2, 4], 3)], |t, v| {
        let m = t.modulate(v[0], v[1], v[2], 3)?;
        probe(t, m, 9)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_attention_masks() {
    let inputs = vec![randn(&[6, 8], 1), randn(&[6, 8], 2), randn(&[6, 8], 3)];
    for mask in [AttnMask::Full, AttnMask::causal(6), AttnMask::block_causal(3, 2)] {
        let e = check(inputs.clone(), |t, v| {
            let o = t.attention(v[0], v[1], v[2], 2, mask.clone())?;
            probe(t, o, 10)
        });
        assert!(e < TOL, "{mask:?}: {e}");
    }
}

#[test]
fn gradcheck_lane_attention() {
    let groups = [LaneGroup { rows: 2, latent: 1 }, LaneGroup { rows: 2, latent: 3 }];
    let inputs = vec![
        randn(&[4, 8], 1),
        randn(&[4, 8], 2),
        randn(&[4, 8], 3),
        randn(&[3, 8], 4),
        randn(&[3, 8], 5),
    ];
    let e = check(inputs, |t, v| {
        let o = t.lane_attention(v[0], v[1], v[2], v[3], v[4], 2, &groups)?;
        probe(t, o, 11)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gradcheck_cross_entropy_mean() {
    let e = check(vec![randn(&[4, 7], 1)], |t, v| {
        let ce = t.cross_entropy(v[0], &[1, 99, 6, 0], 99)?;
        let m = t.mean(v[0])?;
        t.add(ce, m)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn large_tensors_are_subsampled() {
    let r = gradcheck(
        &[randn(&[30, 30], 1)],
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        GradcheckOptions::default(),
    )
    .unwrap();
    assert_eq!(r.checked, 200);
}

#[test]
fn inference_tape_keeps_fewer_bytes() {
    let run = |mut t: Tape| {
        let q = t.input(randn(&[16, 8], 1));
        t.attention(q, q, q, 2, AttnMask::Full).unwrap();
        t.scope_bytes(Default::default())
    };
    assert!(run(Tape::inference()) < run(Tape::new()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..64), cols in 1usize..8) {
        let n = vals.len() / cols * cols;
        prop_assume!(n > 0);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![n / cols, cols], vals[..n].to_vec()).unwrap());
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations(seed in any::<u64>(), nq in 1usize..6, nk in 1usize..6, density in 0.1f64..1.0) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let mut mask: Vec<bool> = (0..nq * nk).map(|_| r.gen::<f64>() < density).collect();
        for i in 0..nq {
            mask[i * nk + r.gen_range(0..nk)] = true;
        }
        let (q, k, v) = (randn(&[nq, 4], seed), randn(&[nk, 4], seed + 1), randn(&[nk, 4], seed + 2));
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v.clone()));
        let o = t.attention(qv, kv, vv, 1, AttnMask::Dense(Arc::new(mask.clone()))).unwrap();
        for i in 0..nq {
            for c in 0..4 {
                let allowed: Vec<f64> = (0..nk).filter(|&j| mask[i * nk + j]).map(|j| v.row(j)[c]).collect();
                let lo = allowed.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = allowed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let x = t.value(o).row(i)[c];
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut t = Tape::new();
            let x = t.input(randn(&[5, 8], seed));
            let w = t.input(randn(&[8, 8], seed + 1));
            let h = t.linear(x, w, None).unwrap();
            let a = t.attention(h, h, h, 2, AttnMask::causal(5)).unwrap();
            let n = t.layer_norm(a, None).unwrap();
            let s = t.sum(n).unwrap();
            let g = t.backward(s).unwrap();
            (t.value(n).clone(), g.get(&t, w).unwrap())
        };
        prop_assert_eq!(run(), run());
    }
}
