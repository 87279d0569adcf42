use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfnet_core::polygonize::{
    binarize, connected_components, extract, extract_with, fill_holes, trace_boundary, ExtractOptions, PolygonSet,
};
use tfnet_core::raster::{Mask, Raster};
use tfnet_core::rastergeo::{polygon_region, rasterize, PixelRegion};

fn mask_from(rows: &[&str]) -> Mask {
    let h = rows.len();
    let w = rows[0].len();
    let data = rows.iter().flat_map(|r| r.bytes().map(|b| (b == b'#') as u8)).collect();
    Mask::from_vec(h, w, 1, data).unwrap()
}

fn prob_of(mask: &Mask) -> Raster<f64> {
    mask.map(|v| v as f64)
}

/// Random 8-connected blob grown one neighbour at a time, holes filled.
fn random_region(rng: &mut ChaCha8Rng, size: u32, steps: usize) -> PixelRegion {
    let mut px = vec![(rng.random_range(1..size - 1), rng.random_range(1..size - 1))];
    for _ in 0..steps {
        let &(r, c) = &px[rng.random_range(0..px.len())];
        let dr = rng.random_range(-1i64..=1);
        let dc = rng.random_range(-1i64..=1);
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if nr >= 0 && nc >= 0 && (nr as u32) < size && (nc as u32) < size && !px.contains(&(nr as u32, nc as u32)) {
            px.push((nr as u32, nc as u32));
        }
    }
    fill_holes(&PixelRegion::from_pixels(px).unwrap())
}

#[test]
fn binarize_conventions() {
    let p = Raster::from_vec(1, 3, 1, vec![0.5, 0.49, 1.0]).unwrap();
    assert_eq!(binarize(&p, 0.5).unwrap().data(), &[1, 0, 1]);
    let z = Raster::<f64>::new(2, 2, 1).unwrap();
    assert_eq!(binarize(&z, 0.5).unwrap().count_ones(), 0);
    assert_eq!(binarize(&z, 0.0).unwrap().count_ones(), 4);
    assert!(binarize(&z, 1.5).unwrap_err().is_invalid_argument());
    assert!(binarize(&z, -0.1).unwrap_err().is_invalid_argument());
}

#[test]
fn diagonal_pixels_are_one_region() {
    let m = mask_from(&["#.", ".#"]);
    let cc = connected_components(&m).unwrap();
    assert_eq!(cc.len(), 1);
    assert_eq!(cc[0].area(), 2);
    let blob = mask_from(&["###", "###"]);
    assert_eq!(connected_components(&blob).unwrap().len(), 1);
    assert!(connected_components(&mask_from(&["...."])).unwrap().is_empty());
}

#[test]
fn components_come_in_canonical_order() {
    let m = mask_from(&["....##", "#.....", "#...#.", "......"]);
    let cc = connected_components(&m).unwrap();
    let keys: Vec<_> = cc.iter().map(|r| r.key()).collect();
    assert_eq!(keys, vec![(0, 4), (1, 0), (2, 4)]);
}

#[test]
fn single_pixel_unit_square() {
    let r = PixelRegion::from_pixels(vec![(2, 5)]).unwrap();
    let p = trace_boundary(&r);
    let mut corners = p.exterior().to_vec();
    corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(corners, vec![[2.0, 5.0], [2.0, 6.0], [3.0, 5.0], [3.0, 6.0]]);
}

#[test]
fn rectangle_and_l_shape_corner_counts() {
    let rect = connected_components(&mask_from(&["##", "##", "##"])).unwrap().remove(0);
    let p = trace_boundary(&rect);
    assert_eq!(p.exterior().len(), 4);
    assert_eq!(polygon_region(&p).unwrap(), rect);

    let l = connected_components(&mask_from(&["#..", "#..", "###"])).unwrap().remove(0);
    let p = trace_boundary(&l);
    assert_eq!(p.exterior().len(), 6);
    assert_eq!(polygon_region(&p).unwrap(), l);
    assert!(p.signed_area() > 0.0, "ring runs counter-clockwise on screen");
    assert_eq!(p.signed_area(), l.area() as f64);
}

#[test]
fn pinched_region_round_trips() {
    let m = mask_from(&["##...", "##...", "..###", "..#.#", "..###"]);
    let cc = connected_components(&m).unwrap();
    assert_eq!(cc.len(), 1);
    let filled = fill_holes(&cc[0]);
    assert_eq!(filled.area(), cc[0].area() + 1);
    assert_eq!(polygon_region(&trace_boundary(&cc[0])).unwrap(), filled);
}

#[test]
fn random_regions_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let steps = rng.random_range(0..80);
        let r = random_region(&mut rng, 14, steps);
        assert!(r.is_connected8());
        let p = trace_boundary(&r);
        assert_eq!(polygon_region(&p).unwrap(), r);
    }
}

#[test]
fn two_squares_extracted_in_order() {
    let mut m = Mask::new(20, 20, 1).unwrap();
    for (r0, c0) in [(10, 1), (2, 12)] {
        for r in r0..r0 + 4 {
            for c in c0..c0 + 4 {
                m.set(r, c, 0, 1);
            }
        }
    }
    let set = extract(&prob_of(&m), 0.5).unwrap();
    assert_eq!(set.len(), 2);
    let keys: Vec<_> = set.regions().map(|r| r.key()).collect();
    assert_eq!(keys, vec![(2, 12), (10, 1)]);
    assert!(extract(&Raster::new(5, 5, 1).unwrap(), 0.5).unwrap().is_empty());
}

#[test]
fn extraction_is_idempotent_and_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let mut m = Mask::new(24, 24, 1).unwrap();
        for _ in 0..4 {
            let r = random_region(&mut rng, 10, 25);
            let (dr, dc) = (rng.random_range(0..14), rng.random_range(0..14));
            for &(pr, pc) in r.pixels() {
                m.set(pr as usize + dr, pc as usize + dc, 0, 1);
            }
        }
        let set = extract(&prob_of(&m), 0.5).unwrap();
        let again = rasterize(&set.polygons(), 24, 24).unwrap();
        let set2 = extract(&prob_of(&again), 0.5).unwrap();
        let a: Vec<_> = set.regions().cloned().collect();
        let b: Vec<_> = set2.regions().cloned().collect();
        assert_eq!(a, b);

        let shifted = m.window(-3, -2, 28, 28).unwrap();
        assert_eq!(extract(&prob_of(&shifted), 0.5).unwrap().len(), set.len());
    }
}

#[test]
fn min_area_filter() {
    let m = mask_from(&["#...##", "....##"]);
    let opts = ExtractOptions {
        min_area: 2,
        ..Default::default()
    };
    let set = extract_with(&prob_of(&m), None, &opts).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.entries()[0].0.area(), 4);
}

#[test]
fn edge_split_recovers_touching_buildings() {
    // two 6×6 buildings one pixel apart, merged by the building head
    let mut b = Mask::new(10, 17, 1).unwrap();
    let mut e = Mask::new(10, 17, 1).unwrap();
    for r in 2..8 {
        for c in 2..15 {
            b.set(r, c, 0, 1);
            let on_edge = r < 4 || r >= 6 || c < 4 || (5..=10).contains(&c) || c >= 13;
            e.set(r, c, 0, on_edge as u8);
        }
    }
    let plain = extract(&prob_of(&b), 0.5).unwrap();
    assert_eq!(plain.len(), 1);
    let opts = ExtractOptions {
        edge_threshold: Some(0.5),
        ..Default::default()
    };
    let split = extract_with(&prob_of(&b), Some(&prob_of(&e)), &opts).unwrap();
    assert_eq!(split.len(), 2);
    let total: usize = split.regions().map(|r| r.area()).sum();
    assert_eq!(total, b.count_ones());
    assert!(extract_with(&prob_of(&b), None, &opts).is_err());
}

#[test]
fn overlapping_sets_are_rejected() {
    let a = PixelRegion::from_pixels(vec![(0, 0), (0, 1)]).unwrap();
    let b = PixelRegion::from_pixels(vec![(0, 1), (1, 1)]).unwrap();
    assert!(PolygonSet::from_regions(vec![a, b]).is_err());
}
