//! Independent reference implementations used as test oracles. Nothing here
//! calls the library routine it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use umsn_core::semantics::SemanticMaskSet;
use umsn_core::Image;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, r: &mut impl Rng) -> Image {
    Image::from_fn(w, h, |_, _, _| r.random::<f64>())
}

pub fn random_hard_masks(w: usize, h: usize, r: &mut impl Rng) -> SemanticMaskSet {
    let classes: Vec<u8> = (0..w * h).map(|_| r.random_range(0..4u8)).collect();
    SemanticMaskSet::from_class_map(w, h, &classes).unwrap()
}

/// Mirror index without repeating the edge sample: -1 → 1, n → n-2.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Brute-force true convolution `out(y,x) = Σ k(a,b)·img(y-a, x-b)` with
/// kernel offsets centred on zero and mirrored borders.
pub fn direct_convolution(img: &Image, kernel: &[f64], side: usize) -> Image {
    let r = (side / 2) as isize;
    let (w, h) = img.dims();
    Image::from_fn(w, h, |c, y, x| {
        let mut s = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                let k = kernel[((a + r) as usize) * side + (b + r) as usize];
                let yy = mirror(y as isize - a, h);
                let xx = mirror(x as isize - b, w);
                s += k * img.get(c, yy, xx);
            }
        }
        s
    })
}

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn finite_difference(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// SSIM from explicit weighted sums over every full 11×11 window, using a
/// 2-D Gaussian built directly rather than as a separable product.
pub fn ssim_reference(a: &Image, b: &Image) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5f64;
    let mut weights = vec![0.0; WIN * WIN];
    for i in 0..WIN {
        for j in 0..WIN {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            weights[i * WIN + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (w, h) = a.dims();
    let mut acc = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - WIN {
            for x0 in 0..=w - WIN {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = weights[i * WIN + j];
                        mx += k * a.get(c, y0 + i, x0 + j);
                        my += k * b.get(c, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..WIN {
                    for j in 0..WIN {
                        let k = weights[i * WIN + j];
                        let dx = a.get(c, y0 + i, x0 + j) - mx;
                        let dy = b.get(c, y0 + i, x0 + j) - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / 3.0
}

/// Mean squared error over all entries.
pub fn mse(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
}

/// `10·log10(1 / mse)`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    10.0 * (1.0 / mse(a, b)).log10()
}

/// Mean absolute error over all entries.
pub fn mean_l1(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64
}

/// Grid minimiser of `C·ℓ − λ·log C` over `C ∈ (0, 1]`.
pub fn grid_argmin(objective: impl Fn(f64) -> f64, step: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    (1..=n)
        .map(|i| i as f64 * step)
        .map(|c| (c, objective(c)))
        .fold((f64::NAN, f64::INFINITY), |best, (c, v)| if v < best.1 { (c, v) } else { best })
        .0
}
