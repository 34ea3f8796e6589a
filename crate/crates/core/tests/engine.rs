use lane_core::engine::{
    adagraph_generate, assemble, build_hierarchy, generate, generate_mesh, greedy, serial_generate, DecodeMode,
    EngineError, GenerateInput, PathwaySpec, PathwayStatus,
};
use lane_core::mesh::{make_pointcloud_set, normalize, synth_shape, PointCloudSet, ShapeKind};
use lane_core::model::{LaneModel, ModelConfig, ModelError};
use lane_core::tensor::Tensor;
use lane_core::tokenizer::{Scheme, EOS, PAD};
use rand::Rng;

fn cube_clouds(counts: [usize; 4], seed: u64) -> PointCloudSet {
    let mesh = normalize(&synth_shape(ShapeKind::Cube, 1, 0).unwrap()).unwrap();
    make_pointcloud_set(&mesh, counts, seed).unwrap()
}

/// Micro-sized model with more spaces so batching has something to do.
fn small(m_max: usize, seed: u64) -> (LaneModel, PointCloudSet) {
    let cfg = ModelConfig {
        m_max,
        ..ModelConfig::micro()
    };
    let pcs = cube_clouds(cfg.counts, seed + 100);
    (LaneModel::new(cfg, seed).unwrap(), pcs)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn hierarchy_size_follows_length() {
    let cfg = ModelConfig::toy();
    let model = LaneModel::new(cfg.clone(), 0).unwrap();
    let pcs = cube_clouds(cfg.counts, 1);
    let (h, _) = build_hierarchy(&model, &pcs, 129).unwrap();
    assert_eq!(h.m, 3);
    assert_eq!(h.spaces.shape(), &[3 * cfg.t_sc, cfg.d_model]);
}

#[test]
fn over_capacity_is_rejected_with_capacity() {
    let (model, pcs) = small(3, 0);
    match build_hierarchy(&model, &pcs, 25) {
        Err(EngineError::Model(ModelError::Length { length: 25, capacity: 24 })) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert!(build_hierarchy(&model, &pcs, 0).is_err());
}

#[test]
fn adagraph_matches_serial_for_every_batch_limit() {
    let (model, pcs) = small(6, 3);
    let len = 45;
    let (h, _) = build_hierarchy(&model, &pcs, len).unwrap();
    assert_eq!(h.m, 6);
    let serial = serial_generate(&model, &h, len, Scheme::HalfEdge).unwrap();
    for b in 1..=8 {
        let ada = adagraph_generate(&model, &h, len, Scheme::HalfEdge, b).unwrap();
        assert_eq!(ada.raw, serial.raw, "batch_limit {b}");
        assert_eq!(ada.tokens, serial.tokens, "batch_limit {b}");
        for (x, y) in ada.logits.iter().zip(&serial.logits) {
            assert!(max_abs_diff(x, y) < 1e-9);
            assert_eq!(x.data(), y.data(), "batch_limit {b}");
        }
    }
}

#[test]
fn random_configs_decode_identically() {
    let mut rng = lane_core::rng::seeded(99);
    for trial in 0..6 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let cfg = ModelConfig {
            d_model: 8 * rng.gen_range(1..=2usize),
            n_heads: heads.min(2),
            k_blocks: rng.gen_range(1..=3),
            t_sc: rng.gen_range(1..=4),
            m_max: rng.gen_range(2..=7),
            l_sub: rng.gen_range(2..=6),
            d_ff: 16,
            n_enc_layers: rng.gen_range(1..=2),
            n_ar_layers: rng.gen_range(1..=2),
            ..ModelConfig::micro()
        };
        let model = LaneModel::new(cfg.clone(), trial).unwrap();
        let pcs = cube_clouds(cfg.counts, trial);
        let len = rng.gen_range(1..=cfg.capacity());
        let b = rng.gen_range(1..=cfg.m_max + 1);
        let serial = generate(&model, &pcs, len, Scheme::Flat, DecodeMode::Serial, 1).unwrap();
        let ada = generate(&model, &pcs, len, Scheme::Flat, DecodeMode::Adagraph, b).unwrap();
        assert_eq!(serial.raw, ada.raw, "{cfg:?} L={len} b={b}");
        assert_eq!(serial.tokens, ada.tokens);
    }
}

#[test]
fn hierarchy_is_built_once_per_generation() {
    let (model, pcs) = small(5, 4);
    for (mode, b) in [(DecodeMode::Serial, 1), (DecodeMode::Adagraph, 2), (DecodeMode::Adagraph, 5)] {
        let e0 = model.extractor_calls();
        let a0 = model.ar_calls();
        let r = generate(&model, &pcs, 37, Scheme::HalfEdge, mode, b).unwrap();
        assert_eq!(model.extractor_calls() - e0, 1);
        assert_eq!(model.ar_calls() - a0, 1);
        assert_eq!(r.timing.m, 5);
        assert_eq!(r.timing.mode, mode);
    }
}

#[test]
fn pathway_order_and_company_do_not_matter() {
    let (model, pcs) = small(6, 5);
    let (h, _) = build_hierarchy(&model, &pcs, 48).unwrap();
    let alone: Vec<Tensor> = (1..=6).map(|m| model.predict_subsequence(&h, m).unwrap()).collect();
    let shuffled = [4, 1, 6, 2];
    let out = model.predict_pathways(&h, &shuffled).unwrap();
    for (m, l) in shuffled.iter().zip(&out) {
        assert_eq!(l.data(), alone[m - 1].data(), "m = {m}");
    }
    let dup = model.predict_pathways(&h, &[3, 3]).unwrap();
    assert_eq!(dup[0].data(), alone[2].data());
    assert_eq!(dup[1].data(), alone[2].data());
}

#[test]
fn decoding_is_deterministic() {
    let (model, pcs) = small(4, 6);
    let a = generate(&model, &pcs, 30, Scheme::Flat, DecodeMode::Adagraph, 3).unwrap();
    let b = generate(&model, &pcs, 30, Scheme::Flat, DecodeMode::Adagraph, 3).unwrap();
    assert_eq!(a.raw, b.raw);
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn zero_batch_limit_and_bad_pathways_fail() {
    let (model, pcs) = small(3, 7);
    let (h, _) = build_hierarchy(&model, &pcs, 20).unwrap();
    assert!(matches!(
        adagraph_generate(&model, &h, 20, Scheme::Flat, 0),
        Err(EngineError::BatchLimit)
    ));
    assert!(matches!(
        model.predict_pathways(&h, &[4]),
        Err(ModelError::Pathway { m: 4, spaces: 3 })
    ));
    assert!(model.predict_pathways(&h, &[0]).is_err());
    // hierarchy built for another length
    assert!(serial_generate(&model, &h, 19, Scheme::Flat).is_err());
    let enc = model.encode_hierarchy(&pcs, 20).unwrap();
    assert!(serial_generate(&model, &enc, 20, Scheme::Flat).is_err());
}

#[test]
fn greedy_breaks_ties_toward_lowest_id() {
    let t = Tensor::new(vec![2, 4], vec![1.0, 3.0, 3.0, 0.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
    assert_eq!(greedy(&t), vec![1, 0]);
}

#[test]
fn assembly_truncates_or_forces_eos() {
    assert_eq!(assemble(&[5, 6, EOS, 7, 8, 9], 6), vec![5, 6, EOS]);
    assert_eq!(assemble(&[5, 6, 7, 8, EOS, 9], 4), vec![5, 6, 7, EOS]);
    assert_eq!(assemble(&[5, PAD, 7, 8, 9], 5), vec![5, 7, 8, EOS]);
    assert_eq!(assemble(&[5, 6, 7, 8], 2), vec![5, EOS]);
    assert_eq!(assemble(&[EOS, 1, 2], 3), vec![EOS]);
    // an EOS past the requested length does not count
    assert_eq!(assemble(&[1, 2, 3, EOS], 3), vec![1, 2, EOS]);
}

#[test]
fn pathway_specs_cover_their_prefix() {
    let p = PathwaySpec::new(4);
    assert_eq!(p.status, PathwayStatus::Pending);
    assert_eq!(p.active_spaces().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn timing_serializes_with_report_keys() {
    let (model, pcs) = small(3, 8);
    let r = generate(&model, &pcs, 17, Scheme::Flat, DecodeMode::Adagraph, 2).unwrap();
    let v = serde_json::to_value(&r.timing).unwrap();
    for k in ["hierarchy_s", "decode_s", "tok_per_s", "mode", "batch_limit", "M", "L"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert_eq!(v["mode"], "adagraph");
    assert_eq!(v["M"], 3);
    assert_eq!(r.summaries.len(), 3);
    assert_eq!(r.raw.len(), 3 * 8);
    assert!(r.tokens.len() <= 17);
}

#[test]
fn mesh_input_is_sampled_and_decoded_best_effort() {
    let (model, _) = small(3, 9);
    let mesh = synth_shape(ShapeKind::Cube, 1, 0).unwrap();
    let input = GenerateInput::Mesh {
        mesh,
        corrupt_fraction: 0.25,
        seed: 4,
    };
    let (decoded, r) = generate_mesh(&model, input, 20, Scheme::Flat, DecodeMode::Serial, 1).unwrap();
    // an untrained model rarely produces valid grammar; the decode must
    // still come back with whatever faces it could read
    assert!(decoded.partial || decoded.error.is_none());
    assert_eq!(r.timing.length, 20);
    assert_eq!(*r.tokens.tokens.last().unwrap(), EOS);
}

#[test]
fn decode_mode_parses() {
    assert_eq!("serial".parse::<DecodeMode>().unwrap(), DecodeMode::Serial);
    assert_eq!("adagraph".parse::<DecodeMode>().unwrap(), DecodeMode::Adagraph);
    assert!("parallel".parse::<DecodeMode>().is_err());
}
