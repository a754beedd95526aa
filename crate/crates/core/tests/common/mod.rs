//! Oracles and property checks shared by the integration and acceptance
//! tests. Each check returns `Err(description)` on the first violation.

#![allow(dead_code)]

use biasprobe::ablation::{
    detect_edges, mean_shift_filter, remove_color, shuffle_topology, tile_permutation, weaken_shape,
    MEAN_SHIFT_EPS, MEAN_SHIFT_MAX_ITER,
};
use biasprobe::imagecore::ImageTensor;
use biasprobe::rng::SplitMix64;

pub type Check = Result<(), String>;

pub fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = SplitMix64::new(seed);
    ImageTensor::from_fn(h, w, |_, _| [0; 3].map(|_| rng.next_f64() as f32))
}

/// Random piecewise-constant image with a few strong edges.
pub fn blocky_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = SplitMix64::new(seed);
    let cut_y = 1 + rng.below(h as u64 - 2) as usize;
    let cut_x = 1 + rng.below(w as u64 - 2) as usize;
    let colors: Vec<[f32; 3]> = (0..4).map(|_| [0; 3].map(|_| rng.next_f64() as f32)).collect();
    ImageTensor::from_fn(h, w, |y, x| colors[(y >= cut_y) as usize * 2 + (x >= cut_x) as usize])
}

/// Direct fixed-point iteration of flat-kernel mean shift, written from the
/// operator definition: the joint state `(y, x, r, g, b)` moves to the mean
/// of every input pixel inside the square window (side `window`, centred on
/// the current position) whose colour is within `radius` of the current one.
pub fn mean_shift_oracle(img: &ImageTensor, window: usize, radius: f64, max_iter: usize, eps: f64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let pixels: Vec<(f64, f64, [f64; 3])> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| (y as f64, x as f64, img.pixel(y, x).map(f64::from)))
        .collect();
    let half = window as f64 / 2.0;
    ImageTensor::from_fn(h, w, |y, x| {
        let mut state = (y as f64, x as f64, img.pixel(y, x).map(f64::from));
        for _ in 0..max_iter {
            let members: Vec<&(f64, f64, [f64; 3])> = pixels
                .iter()
                .filter(|(py, px, c)| {
                    let dist2: f64 = (0..3).map(|k| (c[k] - state.2[k]).powi(2)).sum();
                    (py - state.0).abs() <= half && (px - state.1).abs() <= half && dist2 <= radius * radius
                })
                .collect();
            if members.is_empty() {
                break;
            }
            let n = members.len() as f64;
            let next = (
                members.iter().map(|m| m.0).sum::<f64>() / n,
                members.iter().map(|m| m.1).sum::<f64>() / n,
                [0, 1, 2].map(|k| members.iter().map(|m| m.2[k]).sum::<f64>() / n),
            );
            let moved = ((next.0 - state.0).powi(2)
                + (next.1 - state.1).powi(2)
                + (0..3).map(|k| (next.2[k] - state.2[k]).powi(2)).sum::<f64>())
            .sqrt();
            state = next;
            if moved < eps {
                break;
            }
        }
        state.2.map(|v| v as f32)
    })
}

/// A 4x4 image whose left half is near colour `a` and right half near `b`,
/// with per-pixel jitter well inside the range radius.
pub fn two_halves_4x4(seed: u64) -> ImageTensor {
    let mut rng = SplitMix64::new(seed);
    let a = [0.2f32, 0.3, 0.25];
    let b = [0.8f32, 0.7, 0.9];
    ImageTensor::from_fn(4, 4, |_, x| {
        let base = if x < 2 { a } else { b };
        base.map(|v| v + rng.uniform(-0.03, 0.03) as f32)
    })
}

fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn check_mean_shift_oracle(seeds: std::ops::Range<u64>) -> Check {
    for seed in seeds {
        let img = two_halves_4x4(seed);
        let got = mean_shift_filter(&img, 3, 0.2, MEAN_SHIFT_MAX_ITER, MEAN_SHIFT_EPS).map_err(|e| e.to_string())?;
        let want = mean_shift_oracle(&img, 3, 0.2, MEAN_SHIFT_MAX_ITER, MEAN_SHIFT_EPS);
        let d = max_abs_diff(&got, &want);
        if d > 1e-6 {
            return Err(format!("seed {seed}: mean shift differs from oracle by {d}"));
        }
        // Neither half may borrow colour from the other.
        for y in 0..4 {
            for x in 0..4 {
                let own = if x < 2 { 0.2 } else { 0.8 };
                if (got.get(y, x, 0) - own).abs() > 0.03 + 1e-6 {
                    return Err(format!("seed {seed}: pixel ({y},{x}) left its half's colour range"));
                }
            }
        }
        // Each half is pulled towards its own mean: spread shrinks.
        for half in [0..2, 2..4] {
            let spread = |im: &ImageTensor| {
                let vals: Vec<f32> = (0..4).flat_map(|y| half.clone().map(move |x| (y, x))).map(|(y, x)| im.get(y, x, 0)).collect();
                vals.iter().cloned().fold(f32::MIN, f32::max) - vals.iter().cloned().fold(f32::MAX, f32::min)
            };
            if spread(&got) > spread(&img) + 1e-6 {
                return Err(format!("seed {seed}: mean shift increased the spread within a half"));
            }
        }
    }
    Ok(())
}

pub fn check_identity_cases(seed: u64) -> Check {
    let img = random_image(12, 12, seed);
    let same = |name: &str, out: ImageTensor, expected: &ImageTensor| -> Check {
        if out.data() == expected.data() {
            Ok(())
        } else {
            Err(format!("{name} is not the identity (max diff {})", max_abs_diff(&out, expected)))
        }
    };
    same("mean shift, window 1", mean_shift_filter(&img, 1, 0.2, 20, 1e-3).unwrap(), &img)?;
    same("weaken_shape, window 1", weaken_shape(&img, 1, 0.2).unwrap(), &img)?;
    same("shuffle, n = 1", shuffle_topology(&img, 1, seed).unwrap(), &img)?;
    let mut rng = SplitMix64::new(seed);
    let rgb = [0; 3].map(|_| rng.next_f64() as f32);
    let flat = ImageTensor::filled(12, 12, rgb);
    same("mean shift on a constant image", mean_shift_filter(&flat, 7, 0.2, 20, 1e-3).unwrap(), &flat)?;
    same("weaken_shape on a constant image", weaken_shape(&flat, 7, 0.2).unwrap(), &flat)?;
    same("shuffle on a constant image", shuffle_topology(&flat, 3, seed).unwrap(), &flat)?;
    let gray = ImageTensor::filled(12, 12, [rgb[0]; 3]);
    same("remove_color on a gray image", remove_color(&gray), &gray)
}

pub fn check_remove_color_idempotent(seed: u64) -> Check {
    let once = remove_color(&random_image(9, 13, seed));
    if remove_color(&once).data() != once.data() {
        return Err(format!("seed {seed}: remove_color is not idempotent"));
    }
    Ok(())
}

pub fn check_shuffle_histogram_and_inverse(seed: u64, n: usize) -> Check {
    let img = random_image(4 * n, 3 * n, seed);
    let out = shuffle_topology(&img, n, seed).map_err(|e| e.to_string())?;
    for c in 0..3 {
        let sorted = |im: &ImageTensor| {
            let mut v: Vec<u32> = im.data().iter().skip(c).step_by(3).map(|x| x.to_bits()).collect();
            v.sort_unstable();
            v
        };
        if sorted(&img) != sorted(&out) {
            return Err(format!("seed {seed}, n {n}: channel {c} histogram changed"));
        }
    }
    // Undo the permutation tile by tile.
    let perm = tile_permutation(n, seed);
    let (th, tw) = (4, 3);
    let restored = ImageTensor::from_fn(4 * n, 3 * n, |y, x| {
        let src_tile = (y / th) * n + x / tw;
        let dst_tile = perm.iter().position(|&p| p == src_tile).unwrap();
        out.pixel((dst_tile / n) * th + y % th, (dst_tile % n) * tw + x % tw)
    });
    if restored.data() != img.data() {
        return Err(format!("seed {seed}, n {n}: inverse permutation does not restore the input"));
    }
    Ok(())
}

pub fn check_weaken_shape_locality(seed: u64, window: usize) -> Check {
    let img = blocky_image(20, 20, seed);
    let out = weaken_shape(&img, window, 0.2).map_err(|e| e.to_string())?;
    let band = detect_edges(&img, 0.2).unwrap().dilate((window - 1) / 2);
    for y in 0..20 {
        for x in 0..20 {
            if !band.get(y, x) && out.pixel(y, x).map(f32::to_bits) != img.pixel(y, x).map(f32::to_bits) {
                return Err(format!("seed {seed}, window {window}: pixel ({y},{x}) outside the band changed"));
            }
        }
    }
    Ok(())
}
