use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfnet_core::tensor::{grad_check, FocalParams, Tape, Tensor};
use tfnet_core::tfnet::{
    aspp_decoder_forward, encoder_forward, tfnet_forward, Head, TFNetConfig, TFNetParams,
};

fn random_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_bool(0.3) as u8 as f64)
}

#[test]
fn build_is_deterministic_and_decoders_are_independent() {
    let a = TFNetParams::build(TFNetConfig::desk_scale(), 42).unwrap();
    let b = TFNetParams::build(TFNetConfig::desk_scale(), 42).unwrap();
    assert_eq!(a, b);
    let c = TFNetParams::build(TFNetConfig::desk_scale(), 43).unwrap();
    assert_ne!(a, c);
    let bw = a.tensor("decoder.building.refine.weight").unwrap();
    let ew = a.tensor("decoder.edge.refine.weight").unwrap();
    assert_eq!(bw.shape(), ew.shape());
    assert_ne!(bw.data(), ew.data());
    assert!(a.tensors().iter().all(Tensor::is_finite));
}

#[test]
fn desk_scale_param_count_matches_layer_arithmetic() {
    // weights out·in·k² plus out biases, per layer
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let stem = conv(3, 16, 3);
    let stage1 = conv(16, 16, 3) + conv(16, 16, 3) + conv(16, 16, 1); // strided: projection shortcut
    let stage2 = conv(16, 32, 3) + conv(32, 32, 3) + conv(16, 32, 1);
    let stage3 = conv(32, 64, 3) + conv(64, 64, 3) + conv(32, 64, 1);
    let aspp = conv(64, 16, 1) + conv(64, 16, 3) + conv(64, 16, 3) + conv(64, 16, 1) + conv(4 * 16, 16, 1);
    let decoder = aspp + conv(16, 8, 1) + conv(16 + 8, 16, 3) + conv(16, 1, 1);
    let expected = stem + stage1 + stage2 + stage3 + 2 * decoder;
    assert_eq!(expected, 127_746);
    let p = TFNetParams::build(TFNetConfig::desk_scale(), 0).unwrap();
    assert_eq!(p.param_count(), expected);
    let ablated = TFNetParams::build(TFNetConfig::desk_scale().without_edge_head(), 0).unwrap();
    assert_eq!(ablated.param_count(), expected - decoder);
}

#[test]
fn encoder_shapes_and_finiteness() {
    let p = TFNetParams::build(TFNetConfig::desk_scale(), 3).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let x = tape.leaf(random_image(&[1, 3, 64, 64], 1));
    let f = encoder_forward(&p, &bound, &mut tape, x).unwrap();
    assert_eq!(tape.value(f.deep).shape(), &[1, 64, 8, 8]);
    assert_eq!(tape.value(f.low_level).shape(), &[1, 16, 32, 32]);
    assert!(tape.value(f.deep).is_finite());
}

/// Interval of output indices that can read input interval [a, b] through a
/// conv with kernel k, stride s, dilation d, padding p.
fn propagate(a: i64, b: i64, k: i64, s: i64, d: i64, p: i64, out: i64) -> (i64, i64) {
    // output o reads [o·s − p, o·s − p + d(k−1)]
    let lo = ((a + p - d * (k - 1)) as f64 / s as f64).ceil() as i64;
    let hi = ((b + p) as f64 / s as f64).floor() as i64;
    (lo.max(0), hi.min(out - 1))
}

#[test]
fn deep_features_change_only_inside_receptive_field() {
    let cfg = TFNetConfig::desk_scale();
    let p = TFNetParams::build(cfg.clone(), 5).unwrap();
    let x = random_image(&[1, 3, 128, 128], 2);
    let deep = |img: &Tensor| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let v = tape.leaf(img.clone());
        let f = encoder_forward(&p, &bound, &mut tape, v).unwrap();
        tape.value(f.deep).clone()
    };
    let base = deep(&x);
    let (pr, pc) = (5i64, 100i64);
    let mut x2 = x.clone();
    for ch in 0..3 {
        x2.data_mut()[ch * 128 * 128 + (pr * 128 + pc) as usize] += 0.5;
    }
    let changed = deep(&x2);

    // analytic interval per axis: stem, then each stage as union of main path and shortcut
    let axis = |pos: i64| {
        let (mut a, mut b) = propagate(pos, pos, 3, 2, 1, 1, 64);
        let mut size = 64;
        for ((&s, &d), _) in cfg.stage_strides.iter().zip(&cfg.stage_dilations).zip(&cfg.stage_channels) {
            let (s, d) = (s as i64, d as i64);
            let out = size / s;
            let (a1, b1) = propagate(a, b, 3, s, d, d, out);
            let (a2, b2) = propagate(a1, b1, 3, 1, d, d, out);
            let (a3, b3) = propagate(a, b, 1, s, 1, 0, out);
            a = a2.min(a3);
            b = b2.max(b3);
            size = out;
        }
        (a, b)
    };
    let (r0, r1) = axis(pr);
    let (c0, c1) = axis(pc);
    let mut any = false;
    for ch in 0..64 {
        for r in 0..16i64 {
            for c in 0..16i64 {
                let i = (ch * 256 + r * 16 + c) as usize;
                if base.data()[i] != changed.data()[i] {
                    any = true;
                    assert!(
                        (r0..=r1).contains(&r) && (c0..=c1).contains(&c),
                        "({r},{c}) outside [{r0},{r1}]×[{c0},{c1}]"
                    );
                }
            }
        }
    }
    assert!(any);
    // the field does not cover the whole map
    assert!(r1 - r0 < 15 && c1 - c0 < 15, "[{r0},{r1}]×[{c0},{c1}]");
}

#[test]
fn aspp_branches_are_live_and_receive_gradient() {
    let cfg = TFNetConfig::desk_scale();
    let p = TFNetParams::build(cfg.clone(), 9).unwrap();
    let x = random_image(&[2, 3, 32, 32], 4);
    let target = binary(&[2, 1, 32, 32], 5);

    let run = |params: &TFNetParams| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let v = tape.leaf(x.clone());
        let f = encoder_forward(params, &bound, &mut tape, v).unwrap();
        let logits = aspp_decoder_forward(params, &bound, &mut tape, Head::Building, f).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 1, 32, 32]);
        let out = tape.value(logits).clone();
        let loss = tape.focal_loss(logits, &target, FocalParams::default()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut params = params.clone();
        params.accumulate_grads(&bound, &grads).unwrap();
        (out, params)
    };
    let (full, with_grads) = run(&p);
    for i in 0..cfg.aspp_rates.len() {
        let mut ablated = p.clone();
        for suffix in ["weight", "bias"] {
            let t = ablated.tensor_mut(&format!("decoder.building.aspp.{i}.{suffix}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (out, _) = run(&ablated);
        assert_ne!(out.data(), full.data(), "branch {i} has no effect");
        let g = with_grads.tensor(&format!("decoder.building.aspp.{i}.weight")).unwrap().grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "branch {i} receives no gradient");
    }
    let g = with_grads.tensor("decoder.building.aspp.pool.weight").unwrap().grad().unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn fork_shares_one_encoder_pass() {
    let p = TFNetParams::build(TFNetConfig::desk_scale(), 11).unwrap();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let x = tape.leaf(random_image(&[2, 3, 40, 48], 6));
    let heads = tfnet_forward(&p, &bound, &mut tape, x).unwrap();
    assert_eq!(tape.counter("encoder"), 1);
    assert_eq!(tape.counter("decoder"), 2);
    assert_eq!(tape.value(heads.building).shape(), &[2, 1, 40, 48]);
    assert_eq!(tape.value(heads.edge.unwrap()).shape(), &[2, 1, 40, 48]);
}

#[test]
fn mirrored_decoders_give_identical_logits() {
    let mut p = TFNetParams::build(TFNetConfig::desk_scale(), 12).unwrap();
    let x = random_image(&[1, 3, 32, 32], 7);
    let (b, e) = p.infer(&x).unwrap();
    assert_ne!(b, e.unwrap());
    p.mirror_decoders().unwrap();
    let (b, e) = p.infer(&x).unwrap();
    assert_eq!(b.data(), e.unwrap().data());
    // forward is deterministic
    let (b2, _) = p.infer(&x).unwrap();
    assert_eq!(b, b2);
}

#[test]
fn both_heads_feed_encoder_gradients() {
    let p = TFNetParams::build(TFNetConfig::desk_scale(), 13).unwrap();
    let x = random_image(&[1, 3, 32, 32], 8);
    let tb = binary(&[1, 1, 32, 32], 9);
    let te = binary(&[1, 1, 32, 32], 10);
    let stem_grad = |edge_weight: f64| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let v = tape.leaf(x.clone());
        let h = tfnet_forward(&p, &bound, &mut tape, v).unwrap();
        let lb = tape.focal_loss(h.building, &tb, FocalParams::default()).unwrap();
        let le = tape.focal_loss(h.edge.unwrap(), &te, FocalParams::default()).unwrap();
        let total = tape.weighted_sum(&[(lb, 1.0), (le, edge_weight)]).unwrap();
        let grads = tape.backward(total).unwrap();
        let mut q = p.clone();
        q.accumulate_grads(&bound, &grads).unwrap();
        q.tensor("encoder.stem.weight").unwrap().grad().unwrap().to_vec()
    };
    let both = stem_grad(1.0);
    let building_only = stem_grad(0.0);
    assert_ne!(both, building_only);
    assert!(both.iter().all(|v| v.is_finite()));
}

#[test]
fn end_to_end_gradient_check_tiny() {
    let p = TFNetParams::build(TFNetConfig::tiny(), 21).unwrap();
    let x = random_image(&[1, 3, 16, 16], 11);
    let tb = binary(&[1, 1, 16, 16], 12);
    let te = binary(&[1, 1, 16, 16], 13);
    for name in [
        "encoder.stem.weight",
        "encoder.stage2.conv1.weight",
        "decoder.building.aspp.1.weight",
        "decoder.edge.refine.weight",
        "decoder.building.classifier.bias",
    ] {
        let idx = p.index_of(name).unwrap();
        let err = grad_check(
            |tape, v| {
                let mut bound = p.bind(tape);
                bound.replace(idx, v);
                let xv = tape.leaf(x.clone());
                let h = tfnet_forward(&p, &bound, tape, xv)?;
                let lb = tape.focal_loss(h.building, &tb, FocalParams::default())?;
                let le = tape.focal_loss(h.edge.unwrap(), &te, FocalParams::default())?;
                tape.weighted_sum(&[(lb, 1.0), (le, 1.0)])
            },
            &p.tensors()[idx],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn checkpoint_round_trip_requires_matching_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = TFNetParams::build(TFNetConfig::tiny(), 3).unwrap();
    p.save(dir.path(), "weights", Default::default()).unwrap();
    let (q, _) = TFNetParams::load(dir.path(), "weights").unwrap();
    assert_eq!(p, q);
    // a different config on disk no longer matches the checkpoint hash
    let other = TFNetConfig::tiny().without_edge_head();
    std::fs::write(dir.path().join("config.json"), serde_json::to_vec(&other).unwrap()).unwrap();
    assert!(TFNetParams::load(dir.path(), "weights").is_err());
}
