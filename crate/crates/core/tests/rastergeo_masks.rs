use proptest::prelude::*;
use tfnet_core::raster::Mask;
use tfnet_core::rastergeo::{edge_mask, intersection_area, polygon_region, rasterize, region_iou, PixelRegion, Polygon};

fn rect(r0: f64, c0: f64, r1: f64, c1: f64) -> Polygon {
    Polygon::rect(r0, c0, r1, c1).unwrap()
}

/// Point-in-rectangle counting, independent of the scanline code.
fn rect_pixels(r0: u32, c0: u32, r1: u32, c1: u32) -> PixelRegion {
    let mut px = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            px.push((r, c));
        }
    }
    PixelRegion::from_pixels(px).unwrap()
}

#[test]
fn empty_list_gives_empty_mask() {
    assert_eq!(rasterize(&[], 5, 7).unwrap().count_ones(), 0);
    assert_eq!(edge_mask(&[], 5, 7, 2).unwrap().count_ones(), 0);
}

#[test]
fn square_has_one_hundred_pixels() {
    let m = rasterize(&[rect(2.0, 2.0, 12.0, 12.0)], 20, 20).unwrap();
    assert_eq!(m.count_ones(), 100);
    assert_eq!(m.get(2, 2, 0), 1);
    assert_eq!(m.get(11, 11, 0), 1);
    assert_eq!(m.get(12, 12, 0), 0);
}

#[test]
fn disjoint_rectangles_add_up() {
    let a = rect(0.0, 0.0, 4.0, 5.0);
    let b = rect(10.0, 3.0, 13.0, 9.0);
    let m = rasterize(&[a, b], 20, 20).unwrap();
    assert_eq!(m.count_ones(), 20 + 18);
}

#[test]
fn shared_edge_is_claimed_once() {
    let a = rect(0.0, 0.0, 4.0, 3.0);
    let b = rect(0.0, 3.0, 4.0, 6.0);
    let ra = polygon_region(&a).unwrap();
    let rb = polygon_region(&b).unwrap();
    assert_eq!(intersection_area(&ra, &rb), 0);
    assert_eq!(ra.area() + rb.area(), 24);
    // centre exactly on a vertical edge: the polygon to its right owns it
    let tri = Polygon::new(vec![[0.0, 0.5], [4.0, 0.5], [4.0, 3.0]]).unwrap();
    let m = rasterize(&[tri], 4, 4).unwrap();
    assert_eq!(m.get(3, 0, 0), 1);
}

#[test]
fn clipping_and_oblique_edges() {
    let m = rasterize(&[rect(-3.0, -3.0, 2.0, 2.0)], 4, 4).unwrap();
    assert_eq!(m.count_ones(), 4);
    // right triangle with legs of 10: centres strictly under the diagonal
    let tri = Polygon::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap();
    let m = rasterize(&[tri], 10, 10).unwrap();
    let expected = (0..10).map(|r| (0..10).filter(|&c| (c as f64 + 0.5) < r as f64 + 0.5).count()).sum::<usize>();
    assert_eq!(m.count_ones(), expected);
}

#[test]
fn hole_is_excluded() {
    let p = Polygon::with_holes(
        vec![[0.0, 0.0], [6.0, 0.0], [6.0, 6.0], [0.0, 6.0]],
        vec![vec![[2.0, 2.0], [4.0, 2.0], [4.0, 4.0], [2.0, 4.0]]],
    )
    .unwrap();
    assert_eq!(rasterize(&[p], 6, 6).unwrap().count_ones(), 32);
}

#[test]
fn edge_ring_of_square() {
    let sq = [rect(5.0, 5.0, 15.0, 15.0)];
    let e1 = edge_mask(&sq, 20, 20, 1).unwrap();
    assert_eq!(e1.count_ones(), 36);
    let b = rasterize(&sq, 20, 20).unwrap();
    for w in 5..8 {
        assert_eq!(edge_mask(&sq, 20, 20, w).unwrap(), b);
    }
    assert_eq!(edge_mask(&sq, 20, 20, 2).unwrap().count_ones(), 100 - 36);
    assert!(edge_mask(&sq, 20, 20, 0).unwrap_err().is_invalid_argument());
}

#[test]
fn grid_border_is_not_an_edge() {
    let full = [rect(0.0, 0.0, 8.0, 8.0)];
    assert_eq!(edge_mask(&full, 8, 8, 2).unwrap().count_ones(), 0);
}

#[test]
fn overlapping_strip_iou_is_one_third() {
    let a = rect_pixels(0, 0, 10, 10);
    let b = rect_pixels(5, 0, 15, 10);
    assert_eq!(region_iou(&a, &b), 50.0 / 150.0);
    assert_eq!(region_iou(&a, &a), 1.0);
    assert_eq!(region_iou(&a, &rect_pixels(20, 20, 22, 22)), 0.0);
}

#[test]
fn polygon_region_matches_mask() {
    let p = Polygon::new(vec![[1.0, 1.0], [9.0, 2.0], [7.0, 11.0], [2.0, 8.5]]).unwrap();
    let m = rasterize(&[p.clone()], 16, 16).unwrap();
    assert_eq!(polygon_region(&p).unwrap(), PixelRegion::from_mask(&m).unwrap());
}

fn arb_rect() -> impl Strategy<Value = (u32, u32, u32, u32)> {
    (0u32..20, 0u32..20, 1u32..8, 1u32..8).prop_map(|(r, c, h, w)| (r, c, r + h, c + w))
}

fn arb_region() -> impl Strategy<Value = PixelRegion> {
    prop::collection::vec((0u32..12, 0u32..12), 1..40).prop_map(|px| PixelRegion::from_pixels(px).unwrap())
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_region(), b in arb_region()) {
        let x = region_iou(&a, &b);
        prop_assert_eq!(x, region_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x == 1.0, a == b);
        // bounding-box fast path agrees with plain set arithmetic
        let i = intersection_area(&a, &b);
        prop_assert_eq!(x, i as f64 / (a.area() + b.area() - i) as f64);
    }

    #[test]
    fn edge_masks_nest(rects in prop::collection::vec(arb_rect(), 1..4), w1 in 1usize..4, extra in 0usize..3) {
        let polys: Vec<_> = rects.iter().map(|&(r0, c0, r1, c1)| rect(r0 as f64, c0 as f64, r1 as f64, c1 as f64)).collect();
        let b = rasterize(&polys, 30, 30).unwrap();
        let e1 = edge_mask(&polys, 30, 30, w1).unwrap();
        let e2 = edge_mask(&polys, 30, 30, w1 + extra).unwrap();
        for i in 0..900 {
            prop_assert!(e1.data()[i] <= e2.data()[i]);
            prop_assert!(e2.data()[i] <= b.data()[i]);
        }
    }

    #[test]
    fn rasterize_translation_equivariant(
        verts in prop::collection::vec((0u32..48, 0u32..48), 3..7),
        dr in 0i64..6, dc in 0i64..6,
    ) {
        // quarter-pixel vertices keep the shifted coordinates exact
        let ring: Vec<[f64; 2]> = verts.iter().map(|&(r, c)| [r as f64 / 4.0, c as f64 / 4.0]).collect();
        let Ok(p) = Polygon::new(ring) else { return Ok(()); };
        let a = rasterize(&[p.clone()], 24, 24).unwrap();
        let b = rasterize(&[p.translate(dr as f64, dc as f64)], 24, 24).unwrap();
        let shifted: Mask = a.window(-dr as isize, -dc as isize, 24, 24).unwrap();
        prop_assert_eq!(b, shifted);
    }
}
