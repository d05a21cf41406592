use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;

/// RGB image with real-valued pixels, stored planar (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    /// `f(channel, y, x)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == 3 * width * height,
            "expected {} values for a {width}x{height} image, got {}",
            3 * width * height,
            data.len()
        );
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// `[1, 3, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone())
    }

    /// Extracts sample `n` of a `[_, 3, h, w]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let [_, c, h, w] = t.shape();
        ensure!(c == 3, "expected a 3-channel tensor, got {c}");
        Image::from_planar(w, h, t.sample(n).to_vec())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }

    /// 8-bit RGB after clamping to `[0, 1]` and rounding.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        encode_png(path.as_ref(), self.to_rgb8())
    }

    /// Horizontal concatenation, used for comparison grids.
    pub fn hstack(images: &[&Image]) -> Result<Image> {
        ensure!(!images.is_empty(), "hstack needs at least one image");
        let h = images[0].height;
        ensure!(
            images.iter().all(|i| i.height == h),
            "hstack needs equal heights"
        );
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = Image::new(w, h);
        let mut x0 = 0;
        for img in images {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..img.width {
                        out.set(c, y, x0 + x, img.get(c, y, x));
                    }
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn encode_png<P, C>(path: &Path, img: image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &bytes)
}
