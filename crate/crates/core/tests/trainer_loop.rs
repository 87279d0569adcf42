use tfnet_core::error::Error;
use tfnet_core::raster::Raster;
use tfnet_core::rastergeo::Polygon;
use tfnet_core::synthgen::{generate, SceneSpec};
use tfnet_core::tensor::{ops, Tensor};
use tfnet_core::tfnet::{TFNetConfig, TFNetParams};
use tfnet_core::trainer::{
    checkpoint_stem, fit, fit_from, load_checkpoint_step, make_samples, predict, record_losses, train_step,
    SceneInput, TrainConfig, TrainSample,
};

/// 16×16 cores, k = 2, the tiny network.
fn tiny_cfg(margin: usize) -> TrainConfig {
    TrainConfig {
        core_w: 16,
        core_h: 16,
        margin,
        batch_size: 2,
        epochs: 3,
        max_steps: None,
        learning_rate: 0.5,
        edge_width: 1,
        seed: 4,
        model: TFNetConfig::tiny(),
        ..TrainConfig::desk_scale()
    }
}

fn scene(h: usize, w: usize, seed: u64) -> SceneInput {
    let spec = SceneSpec {
        height: h,
        width: w,
        building_count: 3,
        size_min: 4,
        size_max: 8,
        min_gap: 2,
        max_gap: 2,
        seed,
        ..SceneSpec::default()
    };
    let s = generate(&spec).unwrap();
    SceneInput {
        id: format!("s{seed}"),
        image: s.image.clone(),
        polygons: s.polygons(),
    }
}

fn stack(ts: &[&Tensor]) -> Tensor {
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts[0].shape());
    Tensor::new(shape, ts.iter().flat_map(|t| t.data().to_vec()).collect()).unwrap()
}

#[test]
fn samples_match_tiles() {
    let sc = scene(40, 40, 1);
    for k in [0, 2] {
        let cfg = tiny_cfg(k);
        let samples = make_samples(std::slice::from_ref(&sc), &cfg).unwrap();
        assert_eq!(samples.len(), 9);
        for s in &samples {
            assert_eq!(s.image.shape(), &[3, 16 + 2 * k, 16 + 2 * k]);
            assert_eq!(s.building.shape(), &[1, 16, 16]);
            assert_eq!(s.edge.shape(), &[1, 16, 16]);
        }
    }
}

#[test]
fn straddling_building_is_whole_in_neighbour_context() {
    // 10×10 building over the column boundary at 64
    let mut image = Raster::<u8>::filled(64, 128, 3, 30).unwrap();
    for r in 20..30 {
        for c in 60..70 {
            for ch in 0..3 {
                image.set(r, c, ch, 200);
            }
        }
    }
    let sc = SceneInput {
        id: "x".into(),
        image,
        polygons: vec![Polygon::rect(20.0, 60.0, 30.0, 70.0).unwrap()],
    };
    let cfg = TrainConfig {
        margin: 12,
        ..TrainConfig::desk_scale()
    };
    let samples = make_samples(&[sc], &cfg).unwrap();
    let right = samples.iter().find(|s| s.record.tile_id.col == 1).unwrap();
    // parent (r, c) sits at augmented (r + 12, c − 64 + 12)
    let (_, ah, aw) = (3, right.image.shape()[1], right.image.shape()[2]);
    let bright = 200.0 / 255.0 - 0.5;
    let mut seen = 0;
    for r in 0..ah {
        for c in 0..aw {
            if right.image.data()[r * aw + c] == bright {
                seen += 1;
                assert!((32..42).contains(&r) && (8..18).contains(&c));
            }
        }
    }
    assert_eq!(seen, 100);
    // the core mask still only holds the in-core part
    assert_eq!(right.building.data().iter().sum::<f64>(), 60.0);
}

#[test]
fn zero_margin_total_is_sum_of_focal_losses() {
    let cfg = tiny_cfg(0);
    let samples = make_samples(&[scene(32, 32, 2)], &cfg).unwrap();
    let batch: Vec<&TrainSample> = samples.iter().take(2).collect();
    let p = TFNetParams::build(cfg.model.clone(), 1).unwrap();
    let l = record_losses(&p, &batch, &cfg).unwrap().losses();

    let x = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());
    let (b, e) = p.infer(&x).unwrap();
    let tb = stack(&batch.iter().map(|s| &s.building).collect::<Vec<_>>());
    let te = stack(&batch.iter().map(|s| &s.edge).collect::<Vec<_>>());
    let lb = ops::focal_loss(&b, &tb, &cfg.focal).unwrap();
    let le = ops::focal_loss(&e.unwrap(), &te, &cfg.focal).unwrap();
    assert_eq!(l.loss_building, lb);
    assert_eq!(l.loss_edge, le);
    assert_eq!(l.total, lb + le);
}

#[test]
fn poisoned_margin_masks_leave_loss_alone() {
    let cfg = tiny_cfg(2);
    let samples = make_samples(&[scene(32, 32, 3)], &cfg).unwrap();
    let batch: Vec<&TrainSample> = samples.iter().take(2).collect();
    let p = TFNetParams::build(cfg.model.clone(), 2).unwrap();
    let l = record_losses(&p, &batch, &cfg).unwrap().losses();

    // pad core masks out to the augmented size with NaN, then crop back
    let pad = |t: &Tensor| {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        Tensor::from_fn(&[1, h + 4, w + 4], |i| {
            let (r, c) = (i / (w + 4), i % (w + 4));
            if (2..h + 2).contains(&r) && (2..w + 2).contains(&c) {
                t.data()[(r - 2) * w + c - 2]
            } else {
                f64::NAN
            }
        })
    };
    let x = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());
    let (b, e) = p.infer(&x).unwrap();
    let tb = stack(&batch.iter().map(|s| pad(&s.building)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
    let te = stack(&batch.iter().map(|s| pad(&s.edge)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
    let lb = ops::focal_loss(&ops::crop_core(&b, 2).unwrap(), &ops::crop_core(&tb, 2).unwrap(), &cfg.focal).unwrap();
    let le = ops::focal_loss(
        &ops::crop_core(&e.unwrap(), 2).unwrap(),
        &ops::crop_core(&te, 2).unwrap(),
        &cfg.focal,
    )
    .unwrap();
    assert_eq!((l.loss_building, l.loss_edge), (lb, le));
}

#[test]
fn full_pipeline_finite_differences() {
    let cfg = tiny_cfg(2);
    let samples = make_samples(&[scene(32, 32, 5)], &cfg).unwrap();
    let batch: Vec<&TrainSample> = samples.iter().take(2).collect();
    let mut p = TFNetParams::build(cfg.model.clone(), 8).unwrap();
    for name in ["encoder.stem.weight", "decoder.building.classifier.weight", "decoder.edge.refine.bias"] {
        let idx = p.index_of(name).unwrap();
        let mut g = record_losses(&p, &batch, &cfg).unwrap();
        let grads = g.tape.backward(g.total).unwrap();
        let analytic = grads.get(g.bound.var(idx)).unwrap().to_vec();
        let eps = 1e-5;
        let n = p.tensors()[idx].numel();
        for i in (0..n).step_by((n / 12).max(1)) {
            let orig = p.tensors()[idx].data()[i];
            p.tensors_mut()[idx].data_mut()[i] = orig + eps;
            let plus = record_losses(&p, &batch, &cfg).unwrap().losses().total;
            p.tensors_mut()[idx].data_mut()[i] = orig - eps;
            let minus = record_losses(&p, &batch, &cfg).unwrap().losses().total;
            p.tensors_mut()[idx].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{i}]: {} vs {numeric}", analytic[i]);
        }
    }
}

#[test]
fn steps_are_deterministic() {
    let cfg = tiny_cfg(2);
    let samples = make_samples(&[scene(32, 32, 6)], &cfg).unwrap();
    let batch: Vec<&TrainSample> = samples.iter().take(2).collect();
    let run = || {
        let mut p = TFNetParams::build(cfg.model.clone(), 3).unwrap();
        let a = train_step(&mut p, &batch, &cfg).unwrap();
        let b = train_step(&mut p, &batch, &cfg).unwrap();
        (a, b, p)
    };
    let (a1, b1, p1) = run();
    let (a2, b2, p2) = run();
    assert_eq!((a1, b1), (a2, b2));
    assert_eq!(p1, p2);
    assert_ne!(a1.total, b1.total);
    assert_eq!(a1.total, a1.loss_building + a1.loss_edge);
}

#[test]
fn zero_epochs_is_a_no_op() {
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_cfg(2)
    };
    let samples = make_samples(&[scene(32, 32, 7)], &cfg).unwrap();
    let p0 = TFNetParams::build(cfg.model.clone(), 3).unwrap();
    let mut p = p0.clone();
    assert!(fit(&mut p, &samples, &cfg, None).unwrap().is_empty());
    assert_eq!(p, p0);
    assert!(fit(&mut p, &[], &tiny_cfg(2), None).unwrap_err().is_invalid_argument());
}

#[test]
fn resume_reproduces_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 5,
        ..tiny_cfg(2)
    };
    let samples = make_samples(&[scene(48, 32, 8)], &cfg).unwrap();
    let mut p = TFNetParams::build(cfg.model.clone(), 5).unwrap();
    let full = fit(&mut p, &samples, &cfg, Some(dir.path())).unwrap();
    assert_eq!(full.len(), 9);

    let (mut q, step) = load_checkpoint_step(dir.path(), &checkpoint_stem(5)).unwrap();
    assert_eq!(step, 5);
    let tail = fit_from(&mut q, &samples, &cfg, None, step).unwrap();
    assert_eq!(tail, full[5..]);
    assert_eq!(q, p);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = tiny_cfg(2);
    let samples = make_samples(&[scene(32, 32, 9)], &cfg).unwrap();
    let mut p = TFNetParams::build(cfg.model.clone(), 5).unwrap();
    p.tensor_mut("decoder.building.classifier.bias").unwrap().data_mut()[0] = f64::NAN;
    let before = p.clone();
    match fit_from(&mut p, &samples, &cfg, None, 3) {
        Err(Error::NonFiniteLoss { step, loss_building, .. }) => {
            assert_eq!(step, 3);
            assert!(loss_building.is_nan());
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    let bits = |p: &TFNetParams| p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&p), bits(&before));
}

#[test]
fn overfits_a_single_square() {
    let mut image = Raster::<u8>::filled(64, 64, 3, 70).unwrap();
    for r in 20..44 {
        for c in 20..44 {
            for ch in 0..3 {
                image.set(r, c, ch, 170);
            }
        }
    }
    let sc = SceneInput {
        id: "square".into(),
        image,
        polygons: vec![Polygon::rect(20.0, 20.0, 44.0, 44.0).unwrap()],
    };
    let cfg = TrainConfig {
        epochs: 1000,
        max_steps: Some(200),
        ..TrainConfig::desk_scale()
    };
    let samples = make_samples(&[sc], &cfg).unwrap();
    assert_eq!(samples.len(), 1);
    let mut p = TFNetParams::build(cfg.model.clone(), 0).unwrap();
    let h = fit(&mut p, &samples, &cfg, None).unwrap();
    assert_eq!(h.len(), 200);
    let (first, last) = (h[0].losses.total, h[199].losses.total);
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn prediction_extents_and_determinism() {
    let p = TFNetParams::build(TFNetConfig::tiny(), 6).unwrap();
    let img = scene(37, 45, 10).image;
    let a = predict(&p, &img, 16, 16, 2).unwrap();
    assert_eq!((a.building.height(), a.building.width()), (37, 45));
    assert_eq!(a.edge.as_ref().unwrap().width(), 45);
    assert!(a.building.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(predict(&p, &img, 16, 16, 2).unwrap(), a);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    assert_eq!(single.install(|| predict(&p, &img, 16, 16, 2).unwrap()), a);
}

#[test]
fn zero_border_does_not_change_interior() {
    // enlarging by a whole core keeps the tile grid aligned; tiles that saw
    // zero fill beyond the old border now see zero pixels instead
    let p = TFNetParams::build(TFNetConfig::tiny(), 7).unwrap();
    let img = scene(32, 48, 11).image;
    let big = img.window(-16, -16, 64, 80).unwrap();
    let a = predict(&p, &img, 16, 16, 2).unwrap();
    let b = predict(&p, &big, 16, 16, 2).unwrap();
    assert_eq!(b.building.window(16, 16, 32, 48).unwrap().data(), a.building.data());
}
