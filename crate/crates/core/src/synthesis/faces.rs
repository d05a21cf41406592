//! Procedural frontal-face renderer producing an image with its 11-label parsing map.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::rng::{rng_for, Stream};
use crate::semantics::LabelMap11;

const BACKGROUND: u8 = 0;
const SKIN: u8 = 1;
const LEFT_BROW: u8 = 2;
const RIGHT_BROW: u8 = 3;
const LEFT_EYE: u8 = 4;
const RIGHT_EYE: u8 = 5;
const NOSE: u8 = 6;
const UPPER_LIP: u8 = 7;
const TEETH: u8 = 8;
const LOWER_LIP: u8 = 9;
const HAIR: u8 = 10;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn value(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.value(x, y) <= 1.0
    }
}

type Rgb = [f64; 3];

struct FaceLayout {
    bg_top: Rgb,
    bg_bottom: Rgb,
    bg_stripes: f64,
    skin: Rgb,
    hair: Rgb,
    brow: Rgb,
    iris: Rgb,
    lip: Rgb,
    face: Ellipse,
    hair_outer: Ellipse,
    fringe: f64,
    eyes: [Ellipse; 2],
    brows: [Ellipse; 2],
    nose: (f64, f64, f64, f64),
    upper_lip: Ellipse,
    lower_lip: Ellipse,
    mouth_open: f64,
    light: f64,
}

fn color(r: &mut ChaCha8Rng, base: Rgb, spread: f64) -> Rgb {
    base.map(|c| (c + r.random_range(-spread..=spread)).clamp(0.02, 0.98))
}

fn jitter(r: &mut ChaCha8Rng, v: f64, spread: f64) -> f64 {
    v + r.random_range(-spread..=spread)
}

impl FaceLayout {
    fn sample(r: &mut ChaCha8Rng) -> Self {
        let tone = r.random_range(0.0..1.0);
        let skin = color(
            r,
            [0.95 - 0.55 * tone, 0.78 - 0.5 * tone, 0.66 - 0.45 * tone],
            0.04,
        );
        let hair_dark = r.random_range(0.05..0.6);
        let hair = color(r, [hair_dark, hair_dark * 0.75, hair_dark * 0.5], 0.05);
        let cx = jitter(r, 0.5, 0.04);
        let cy = jitter(r, 0.54, 0.04);
        let rx = r.random_range(0.26..0.33);
        let ry = rx * r.random_range(1.2..1.4);
        let face = Ellipse { cx, cy, rx, ry };
        let hair_outer = Ellipse {
            cx,
            cy: cy - 0.06,
            rx: rx * r.random_range(1.12..1.35),
            ry: ry * r.random_range(1.05..1.2),
        };
        let eye_dx = rx * r.random_range(0.36..0.46);
        let eye_y = cy - ry * r.random_range(0.12..0.22);
        let eye_rx = rx * r.random_range(0.16..0.22);
        let eye_ry = eye_rx * r.random_range(0.4..0.6);
        let eyes = [-1.0, 1.0].map(|s| Ellipse {
            cx: cx + s * eye_dx,
            cy: eye_y,
            rx: eye_rx,
            ry: eye_ry,
        });
        let brow_gap = ry * r.random_range(0.12..0.18);
        let brows = eyes.map(|e| Ellipse {
            cx: e.cx,
            cy: e.cy - brow_gap,
            rx: e.rx * 1.25,
            ry: e.ry * 0.35,
        });
        let nose_top = eye_y + eye_ry;
        let nose_bottom = cy + ry * r.random_range(0.22..0.3);
        let nose = (cx, nose_top, nose_bottom, rx * r.random_range(0.12..0.18));
        let mouth_y = cy + ry * r.random_range(0.45..0.55);
        let mouth_rx = rx * r.random_range(0.32..0.45);
        let lip_h = ry * r.random_range(0.05..0.08);
        let mouth_open = if r.random_bool(0.5) {
            lip_h * r.random_range(0.4..1.0)
        } else {
            0.0
        };
        let upper_lip = Ellipse {
            cx,
            cy: mouth_y - mouth_open / 2.0,
            rx: mouth_rx,
            ry: lip_h,
        };
        let lower_lip = Ellipse {
            cx,
            cy: mouth_y + mouth_open / 2.0,
            rx: mouth_rx * 0.9,
            ry: lip_h * 1.2,
        };
        Self {
            bg_top: color(r, [0.5, 0.5, 0.5], 0.45),
            bg_bottom: color(r, [0.5, 0.5, 0.5], 0.45),
            bg_stripes: r.random_range(4.0..16.0),
            skin,
            hair,
            brow: color(r, [hair_dark * 0.7, hair_dark * 0.55, hair_dark * 0.4], 0.03),
            iris: color(r, [0.25, 0.3, 0.3], 0.2),
            lip: color(r, [0.75, 0.3, 0.32], 0.08),
            face,
            hair_outer,
            fringe: cy - ry * r.random_range(0.45..0.75),
            eyes,
            brows,
            nose,
            upper_lip,
            lower_lip,
            mouth_open,
            light: r.random_range(-0.25..0.25),
        }
    }

    fn label(&self, x: f64, y: f64) -> u8 {
        let mouth_gap = self.mouth_open > 0.0
            && (y - (self.upper_lip.cy + self.lower_lip.cy) / 2.0).abs()
                <= self.mouth_open / 2.0
            && ((x - self.upper_lip.cx) / (self.upper_lip.rx * 0.85)).abs() <= 1.0;
        if self.face.contains(x, y) && y >= self.fringe {
            for (k, e) in self.brows.iter().enumerate() {
                if e.contains(x, y) {
                    return [LEFT_BROW, RIGHT_BROW][k];
                }
            }
            for (k, e) in self.eyes.iter().enumerate() {
                if e.contains(x, y) {
                    return [LEFT_EYE, RIGHT_EYE][k];
                }
            }
            let (ncx, top, bottom, half) = self.nose;
            if y >= top && y <= bottom {
                let t = (y - top) / (bottom - top);
                if (x - ncx).abs() <= half * (0.35 + 0.65 * t) {
                    return NOSE;
                }
            }
            if mouth_gap {
                return TEETH;
            }
            if self.upper_lip.contains(x, y) && y <= self.upper_lip.cy + self.mouth_open / 2.0 {
                return UPPER_LIP;
            }
            if self.lower_lip.contains(x, y) && y >= self.lower_lip.cy - self.mouth_open / 2.0 {
                return LOWER_LIP;
            }
            return SKIN;
        }
        let neck = (x - self.face.cx).abs() <= self.face.rx * 0.45 && y > self.face.cy;
        if self.hair_outer.contains(x, y) && !neck && y <= self.face.cy + self.face.ry * 0.6 {
            return HAIR;
        }
        if neck {
            return SKIN;
        }
        BACKGROUND
    }

    fn shade(&self, label: u8, x: f64, y: f64) -> Rgb {
        let lit = 1.0 + self.light * (x - 0.5);
        let scale = |c: Rgb, s: f64| c.map(|v| (v * s * lit).clamp(0.0, 1.0));
        match label {
            BACKGROUND => {
                let t = y;
                let stripe = 0.06 * (self.bg_stripes * (x + 0.3 * y) * std::f64::consts::TAU).sin();
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = (self.bg_top[k] * (1.0 - t) + self.bg_bottom[k] * t + stripe).clamp(0.0, 1.0);
                }
                c
            }
            SKIN => {
                let d = self.face.value(x, y).min(1.5);
                scale(self.skin, 1.05 - 0.15 * d)
            }
            LEFT_BROW | RIGHT_BROW => self.brow,
            LEFT_EYE | RIGHT_EYE => {
                let e = if label == LEFT_EYE { self.eyes[0] } else { self.eyes[1] };
                let pupil = ((x - e.cx) / e.rx).abs() < 0.45;
                if pupil {
                    scale(self.iris, 1.0 - 0.5 * (1.0 - e.value(x, y)).max(0.0))
                } else {
                    [0.92, 0.92, 0.9]
                }
            }
            NOSE => {
                let (ncx, _, _, half) = self.nose;
                scale(self.skin, 0.85 + 0.1 * ((x - ncx) / half))
            }
            UPPER_LIP => scale(self.lip, 0.9),
            LOWER_LIP => scale(self.lip, 1.05),
            TEETH => [0.95, 0.94, 0.88],
            _ => {
                let strand = 0.08 * ((x * 90.0 + y * 25.0).sin());
                scale(self.hair, 1.0 + strand)
            }
        }
    }
}

/// Renders face number `index` of the corpus generated from `master_seed`.
pub fn render_face(master_seed: u64, index: u64, width: usize, height: usize) -> Result<(Image, LabelMap11)> {
    ensure!(width >= 8 && height >= 8, "face images must be at least 8x8, got {width}x{height}");
    let mut r = rng_for(master_seed, Stream::Face, index);
    let layout = FaceLayout::sample(&mut r);
    let mut labels = Vec::with_capacity(width * height);
    let mut image = Image::new(width, height);
    let scale = width.min(height) as f64;
    let (ox, oy) = (
        (width as f64 - scale) / 2.0,
        (height as f64 - scale) / 2.0,
    );
    for py in 0..height {
        for px in 0..width {
            let x = (px as f64 + 0.5 - ox) / scale;
            let y = (py as f64 + 0.5 - oy) / scale;
            let label = layout.label(x, y);
            let rgb = layout.shade(label, x, y);
            for (c, v) in rgb.iter().enumerate() {
                image.set(c, py, px, *v);
            }
            labels.push(label);
        }
    }
    Ok((image, LabelMap11::new(width, height, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::{group_labels, ClassId};

    #[test]
    fn faces_cover_all_classes() {
        for index in 0..8 {
            let (img, labels) = render_face(11, index, 64, 64).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let masks = group_labels(&labels);
            for class in ClassId::ALL {
                assert!(masks.count(class) > 0, "face {index} lacks class {class}");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render_face(3, 5, 32, 48).unwrap(), render_face(3, 5, 32, 48).unwrap());
        assert_ne!(render_face(3, 5, 32, 32).unwrap().0, render_face(3, 6, 32, 32).unwrap().0);
    }
}
