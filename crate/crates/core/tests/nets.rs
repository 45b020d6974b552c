use partnet_core::autodiff::gradcheck::GradCheckOptions;
use partnet_core::autodiff::{ParamStore, Tape, Tensor};
use partnet_core::model::gradient_check_suite;
use partnet_core::nets::*;
use proptest::prelude::*;

/// Parameter count written out layer by layer: a dense layer has
/// `in * out + out` weights and a normalized one two more vectors.
fn hand_count(k: usize) -> usize {
    let dense = |i: usize, o: usize| i * o + o;
    let normed = |i: usize, o: usize| dense(i, o) + 2 * o;
    let pn1 = normed(6, 64) + normed(64, 128) + normed(128, 128) + normed(128, 256) + normed(256, 256) + normed(256, 128);
    let pn2 = normed(6, 64) + normed(64, 64) + normed(64, 128) + normed(128, 128);
    let seg = normed(128 + 256, 512) + normed(512, 256) + normed(256, 128) + normed(128, 128) + dense(128, 2);
    let dec = dense(256, 256) + dense(256, 256);
    let cls = dense(256, 256) + dense(256, 3);
    let sym = dense(256, 256) + dense(256, 11);
    let sem = dense(256, 128) + dense(128, 128) + dense(128, k);
    pn1 + pn2 + seg + dec + cls + sym + sem
}

#[test]
fn full_width_parameter_count() {
    assert_eq!(hand_count(7), 886_359);
    assert_eq!(NetConfig::full(7).param_count(), hand_count(7));
    assert_eq!(NetConfig::full(4).param_count(), hand_count(4));
    let model: Model<f32> = Model::init(NetConfig::full(7), 0).unwrap();
    assert_eq!(model.store().scalar_count(), 886_359);
}

#[test]
fn every_block_passes_finite_differences() {
    let checks = gradient_check_suite(3, &GradCheckOptions::default()).unwrap();
    assert_eq!(checks.len(), 13);
    for c in &checks {
        assert!(c.report.passed(1e-4), "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = NetConfig::reduced(3);
    c.shape_encoder.clear();
    assert!(Model::<f64>::init(c, 0).is_err());
    let mut c = NetConfig::reduced(3);
    c.semantic_classes = 0;
    assert!(c.validate().is_err());
    let mut c = NetConfig::reduced(3);
    c.dropout = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn from_store_checks_names_and_shapes() {
    let model: Model<f64> = Model::init(NetConfig::reduced(3), 1).unwrap();
    assert!(Model::from_store(NetConfig::reduced(3), model.store().clone()).is_ok());
    assert!(Model::from_store(NetConfig::reduced(4), model.store().clone()).is_err());
    assert!(Model::<f64>::from_store(NetConfig::reduced(3), ParamStore::new()).is_err());
}

fn points(n: usize, seed: u64) -> Vec<f64> {
    (0..n * 6).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect()
}

#[test]
fn variant_wiring() {
    let model: Model<f64> = Model::init(NetConfig::reduced(3), 2).unwrap();
    let f = model.config().feature_dim();
    let mut tape = Tape::with_params(model.store());
    let x = points_input(&mut tape, &points(9, 1)).unwrap();
    let psf = model.encode_shape(&mut tape, x).unwrap();
    let rcf = tape.input(&Tensor::row((0..f).map(|i| i as f64 * 0.1).collect()), false).unwrap();
    let psf_v = tape.value(psf).to_vec();
    let rcf_v = tape.value(rcf).to_vec();

    let full = model.node_features(&mut tape, psf, Some(rcf), Variant::Full).unwrap();
    assert_eq!(tape.value(full.node), [rcf_v.clone(), psf_v.clone()].concat());
    assert_eq!(tape.value(full.classifier), tape.value(full.node));

    let no_rcf = model.node_features(&mut tape, psf, Some(rcf), Variant::NoRcf).unwrap();
    let node = tape.value(no_rcf.node);
    assert_eq!(node[..f], node[f..]);
    assert_eq!(node[..f], psf_v[..]);

    let no_psf = model.node_features(&mut tape, psf, Some(rcf), Variant::NoPsf).unwrap();
    assert_eq!(tape.value(no_psf.classifier), [rcf_v.clone(), rcf_v].concat());
    assert_eq!(tape.value(no_psf.node), tape.value(full.node));

    let root = model.node_features(&mut tape, psf, None, Variant::Full).unwrap();
    assert_eq!(tape.value(root.node), [psf_v.clone(), psf_v].concat());
}

#[test]
fn zero_parameters_give_uniform_classes() {
    let model: Model<f64> = Model::init(NetConfig::reduced(3), 2).unwrap().zeroed();
    let mut tape = Tape::with_params(model.store());
    let node = tape.input(&Tensor::row(vec![0.3; model.config().node_dim()]), false).unwrap();
    let logits = model.classify_node(&mut tape, node).unwrap();
    let p = softmax(tape.value(logits));
    for v in &p {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn wrong_widths_are_rejected() {
    let model: Model<f64> = Model::init(NetConfig::reduced(3), 2).unwrap();
    let mut tape = Tape::with_params(model.store());
    let bad = tape.input(&Tensor::matrix(2, 5, vec![0.0; 10]).unwrap(), false).unwrap();
    assert!(model.encode_shape(&mut tape, bad).is_err());
    assert!(model.classify_node(&mut tape, bad).is_err());
    assert!(model.decode_children(&mut tape, bad).is_err());
}

#[test]
fn argmax_prefers_the_first_tie() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0]), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shape_feature_ignores_point_order(n in 1usize..20, seed in 0u64..1000, rot in 0usize..20) {
        let model: Model<f64> = Model::init(NetConfig::reduced(3), seed).unwrap();
        let x = points(n, seed);
        let mut rows: Vec<&[f64]> = x.chunks(6).collect();
        rows.rotate_left(rot % n);
        rows.reverse();
        let y: Vec<f64> = rows.concat();
        let mut tape = Tape::with_params(model.store());
        let a = points_input(&mut tape, &x).unwrap();
        let b = points_input(&mut tape, &y).unwrap();
        let fa = model.encode_shape(&mut tape, a).unwrap();
        let fb = model.encode_shape(&mut tape, b).unwrap();
        for (u, v) in tape.value(fa).iter().zip(tape.value(fb)) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn segmentation_follows_point_order(n in 2usize..16, seed in 0u64..1000) {
        let model: Model<f64> = Model::init(NetConfig::reduced(3), seed).unwrap();
        let x = points(n, seed);
        let mut rows: Vec<&[f64]> = x.chunks(6).collect();
        rows.reverse();
        let y: Vec<f64> = rows.concat();
        let seg = |data: &[f64]| {
            let mut tape = Tape::with_params(model.store());
            let p = points_input(&mut tape, data).unwrap();
            let psf = model.encode_shape(&mut tape, p).unwrap();
            let nf = model.node_features(&mut tape, psf, None, Variant::Full).unwrap();
            let pp = model.encode_points(&mut tape, p).unwrap();
            let s = model.segment_points(&mut tape, pp, nf.node).unwrap();
            tape.value(s).to_vec()
        };
        let a = seg(&x);
        let b = seg(&y);
        let b_rows: Vec<&[f64]> = b.chunks(2).rev().collect();
        for (u, v) in a.chunks(2).zip(b_rows) {
            prop_assert!((u[0] - v[0]).abs() <= 1e-12 && (u[1] - v[1]).abs() <= 1e-12);
        }
    }
}
