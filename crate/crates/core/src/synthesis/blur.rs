use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng::rng;
use crate::semantics::{ClassId, SemanticMaskSet};

use super::BlurKernel;

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Per-channel 2-D convolution with reflect padding; output keeps the input size.
pub fn blur(image: &Image, kernel: &BlurKernel) -> Result<Image> {
    ensure!(image.is_finite(), "blur input contains non-finite pixels");
    let (w, h) = image.dims();
    let side = kernel.side();
    ensure!(
        side <= w && side <= h,
        "kernel of side {side} is larger than the {w}x{h} image"
    );
    let r = kernel.radius();
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let xs: Vec<usize> = (0..pw).map(|i| reflect_index(i as isize - r as isize, w)).collect();
    let ys: Vec<usize> = (0..ph).map(|i| reflect_index(i as isize - r as isize, h)).collect();
    // flipped taps turn the correlation loop below into a convolution
    let taps: Vec<f64> = kernel.weights().iter().rev().copied().collect();

    let mut out = Image::new(w, h);
    let mut padded = vec![0.0; pw * ph];
    for c in 0..Image::CHANNELS {
        let src = image.plane(c);
        for (py, &sy) in ys.iter().enumerate() {
            let row = &src[sy * w..(sy + 1) * w];
            for (px, &sx) in xs.iter().enumerate() {
                padded[py * pw + px] = row[sx];
            }
        }
        let dst = out.plane_mut(c);
        dst.fill(0.0);
        for ky in 0..side {
            for kx in 0..side {
                let t = taps[ky * side + kx];
                if t == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let src_row = &padded[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                    for (d, s) in dst[y * w..(y + 1) * w].iter_mut().zip(src_row) {
                        *d += t * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise and clips the result to `[0, 1]`.
pub fn add_noise(image: &Image, sigma: f64, seed: u64) -> Result<Image> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        "noise sigma must be finite and non-negative, got {sigma}"
    );
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut r = rng(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Blurs only the region of one class: `m ⊙ blur(x) + (1 − m) ⊙ x`.
pub fn class_blur(
    clean: &Image,
    masks: &SemanticMaskSet,
    class: ClassId,
    kernel: &BlurKernel,
) -> Result<Image> {
    ensure!(
        masks.dims() == clean.dims(),
        "mask set is {:?} but image is {:?}",
        masks.dims(),
        clean.dims()
    );
    let m = masks.plane(class);
    let mut out = clean.clone();
    if m.iter().all(|&v| v == 0.0) {
        return Ok(out);
    }
    let blurred = blur(clean, kernel)?;
    for c in 0..Image::CHANNELS {
        let b = blurred.plane(c);
        for ((o, &mv), &bv) in out.plane_mut(c).iter_mut().zip(m).zip(b) {
            if mv != 0.0 {
                *o = mv * bv + (1.0 - mv) * *o;
            }
        }
    }
    Ok(out)
}
