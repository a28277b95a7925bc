use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpo_core::hsi::HsiCube;
use tpo_core::sampler::{extract_tpo, BorderMode, SamplerConfig, TpoExtractor, ViewMode, VIEW_OFFSETS};

/// Index sequence of an axis of length `n` after symmetric padding by `m`,
/// built by concatenation: reversed interior, the axis, reversed interior.
fn padded_axis(n: usize, m: usize, mode: BorderMode) -> Vec<Option<usize>> {
    let mut seq = Vec::new();
    match mode {
        BorderMode::Mirror => {
            seq.extend((1..=m).rev().map(Some));
            seq.extend((0..n).map(Some));
            seq.extend((0..n - 1).rev().take(m).map(Some));
        }
        BorderMode::Zero => {
            seq.extend(std::iter::repeat_n(None, m));
            seq.extend((0..n).map(Some));
            seq.extend(std::iter::repeat_n(None, m));
        }
    }
    seq
}

/// Brute force: pad explicitly, then crop each view window.
fn oracle(cube: &HsiCube, r: usize, c: usize, k: usize, mode: BorderMode, views: usize) -> Vec<f32> {
    let m = k / 2 + 1;
    let rows = padded_axis(cube.height(), m, mode);
    let cols = padded_axis(cube.width(), m, mode);
    let mut out = Vec::new();
    for &(dr, dc) in &VIEW_OFFSETS[..views] {
        let top = (r + m) as isize + dr - (k / 2) as isize;
        let left = (c + m) as isize + dc - (k / 2) as isize;
        for b in 0..cube.bands() {
            for i in 0..k {
                for j in 0..k {
                    let pr = rows[(top + i as isize) as usize];
                    let pc = cols[(left + j as isize) as usize];
                    out.push(match (pr, pc) {
                        (Some(pr), Some(pc)) => cube.get(pr, pc, b),
                        _ => 0.0,
                    });
                }
            }
        }
    }
    out
}

fn random_cube(seed: u64) -> HsiCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HsiCube::from_fn(9, 9, 4, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

fn config(k: usize, mode: BorderMode, views: ViewMode) -> SamplerConfig {
    let mut cfg = SamplerConfig::new(k);
    cfg.border_mode = mode;
    cfg.views = views;
    cfg
}

#[test]
fn extraction_matches_brute_force_crop() {
    let start = Instant::now();
    for seed in 0..5 {
        let cube = random_cube(seed);
        for k in [1, 3, 5] {
            for mode in [BorderMode::Mirror, BorderMode::Zero] {
                for views in [ViewMode::Nine, ViewMode::One] {
                    let cfg = config(k, mode, views);
                    let ex = TpoExtractor::new(&cube, cfg).unwrap();
                    for r in 0..9 {
                        for c in 0..9 {
                            let got = ex.extract(r, c).unwrap();
                            assert_eq!(got.shape(), &[views.count(), 4, k, k]);
                            let want = oracle(&cube, r, c, k, mode, views.count());
                            assert_eq!(
                                got.data(),
                                &want[..],
                                "seed {seed} k {k} {mode:?} {views:?} at ({r}, {c})"
                            );
                        }
                    }
                }
            }
        }
    }
    assert!(start.elapsed() < Duration::from_secs(10), "took {:?}", start.elapsed());
}

#[test]
fn constant_cube_gives_constant_views() {
    let cube = HsiCube::from_fn(9, 9, 4, |_, _, _| 2.5).unwrap();
    for k in [3, 5, 7] {
        let ex = TpoExtractor::new(&cube, config(k, BorderMode::Mirror, ViewMode::Nine)).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                assert!(ex.extract(r, c).unwrap().data().iter().all(|&v| v == 2.5));
            }
        }
    }
    // zero padding: the centre view of the corner keeps exactly its in-bounds quarter
    let s = extract_tpo(&cube, (0, 0), &config(5, BorderMode::Zero, ViewMode::One)).unwrap();
    let nonzero = s.data().iter().filter(|&&v| v != 0.0).count();
    assert_eq!(nonzero, 4 * 3 * 3);
}

#[test]
fn shifted_views_equal_centre_view_of_neighbour() {
    let cube = random_cube(11);
    for k in [3, 5] {
        let ex = TpoExtractor::new(&cube, config(k, BorderMode::Mirror, ViewMode::Nine)).unwrap();
        let view_len = 4 * k * k;
        for r in 0..9usize {
            for c in 0..9usize {
                let s = ex.extract(r, c).unwrap();
                for (v, &(dr, dc)) in VIEW_OFFSETS.iter().enumerate() {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= 9 || nc >= 9 {
                        continue;
                    }
                    let n = ex.extract(nr as usize, nc as usize).unwrap();
                    assert_eq!(&s.data()[v * view_len..(v + 1) * view_len], &n.data()[..view_len]);
                }
            }
        }
    }
}

#[test]
fn first_view_is_centred_on_target() {
    let cube = random_cube(3);
    let k = 3;
    let s = extract_tpo(&cube, (4, 6), &config(k, BorderMode::Mirror, ViewMode::Nine)).unwrap();
    for b in 0..4 {
        assert_eq!(s.at(&[0, b, 1, 1]), cube.get(4, 6, b));
    }
    // view (-1,-1) puts the target at the bottom-right of its centre pixel
    assert_eq!(s.at(&[1, 0, 2, 2]), cube.get(4, 6, 0));
}

#[test]
fn oversized_mirror_margin_is_rejected() {
    let cube = HsiCube::from_fn(3, 3, 2, |r, c, b| (r + c + b) as f32).unwrap();
    assert!(TpoExtractor::new(&cube, config(5, BorderMode::Mirror, ViewMode::Nine)).is_err());
    assert!(TpoExtractor::new(&cube, config(5, BorderMode::Zero, ViewMode::Nine)).is_ok());
}
