use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use winmatch_core::stem::{stem_trace, StemParams};
use winmatch_core::tensor::Padding;
use winmatch_core::FeatureMap;

const SIDE: usize = 32;

fn image(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..SIDE * SIDE).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Circularly shifts an `h×w×c` buffer right by `dx` and down by `dy`.
fn roll(data: &[f64], h: usize, w: usize, c: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = ((y + dy) % h, (x + dx) % w);
            out[(ty * w + tx) * c..(ty * w + tx + 1) * c].copy_from_slice(&data[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64]) {
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max deviation {worst}");
}

fn params() -> StemParams {
    let mut p = StemParams::init(3, [4, 6, 8, 8]);
    p.set_padding(Padding::Circular);
    p
}

#[test]
fn shift_by_eight_pixels_moves_the_eighth_scale_map_by_one_cell() {
    let p = params();
    let px = image(1);
    let base = stem_trace(&FeatureMap::from_gray(SIDE, SIDE, px.clone()).unwrap(), &p).unwrap();
    let shifted_px = roll(&px, SIDE, SIDE, 1, 8, 8);
    let shifted = stem_trace(&FeatureMap::from_gray(SIDE, SIDE, shifted_px).unwrap(), &p).unwrap();

    // the 1/16 branch only moves by half a cell, so compare before the merge
    let (h, w, c) = base.eighth_pre_merge.extents();
    let expected = roll(&base.eighth_pre_merge.tensor.to_vec(), h, w, c, 1, 1);
    assert_close(&shifted.eighth_pre_merge.tensor.to_vec(), &expected);

    let (h, w, c) = base.half.extents();
    assert_close(&shifted.half.tensor.to_vec(), &roll(&base.half.tensor.to_vec(), h, w, c, 4, 4));
}

#[test]
fn shift_by_sixteen_pixels_moves_the_merged_map_by_two_cells() {
    let p = params();
    let px = image(2);
    let base = stem_trace(&FeatureMap::from_gray(SIDE, SIDE, px.clone()).unwrap(), &p).unwrap();
    let shifted = stem_trace(&FeatureMap::from_gray(SIDE, SIDE, roll(&px, SIDE, SIDE, 1, 16, 0)).unwrap(), &p).unwrap();
    let f = &base.pyramid.f_eighth;
    let (h, w, c) = f.extents();
    assert_close(&shifted.pyramid.f_eighth.tensor.to_vec(), &roll(&f.tensor.to_vec(), h, w, c, 2, 0));
}
