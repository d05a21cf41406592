//! Face-parsing taxonomy, the 11 → 4 class grouping, mask algebra and the
//! per-class F-score.

mod snet;

pub use snet::{snet_forward, SNetModel};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{encode_png, Image};
use crate::io::write_npy;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const NUM_SOURCE_LABELS: usize = 11;

/// Source parsing labels, in the order of the Helen face-parsing annotations.
pub const SOURCE_LABEL_NAMES: [&str; NUM_SOURCE_LABELS] = [
    "background",
    "face_skin",
    "left_eyebrow",
    "right_eyebrow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "teeth",
    "lower_lip",
    "hair",
];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "skin", "inner_face", "hair"];

/// Grouped class (1-based) of each source label.
pub const LABEL_TO_CLASS: [u8; NUM_SOURCE_LABELS] = [1, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4];

/// One of the four grouped semantic classes, numbered 1..=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ClassId(u8);

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [ClassId(1), ClassId(2), ClassId(3), ClassId(4)];

    pub fn new(index: usize) -> Result<Self> {
        ensure!(
            (1..=NUM_CLASSES).contains(&index),
            "class index must be in 1..=4, got {index}"
        );
        Ok(ClassId(index as u8))
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Zero-based plane index.
    pub fn plane(self) -> usize {
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.plane()]
    }
}

impl TryFrom<u8> for ClassId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        ClassId::new(v as usize)
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-pixel source labels in `0..=10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap11 {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap11 {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        ensure!(
            labels.len() == width * height,
            "label map needs {} entries, got {}",
            width * height,
            labels.len()
        );
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_SOURCE_LABELS) {
            return Err(crate::error::invalid!("label {bad} outside 0..=10"));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        ensure!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop outside label map"
        );
        let labels = (y0..y0 + h)
            .flat_map(|y| (x0..x0 + w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y, x))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            labels,
        })
    }

    /// Single-channel PNG whose gray values are the labels.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        LabelMap11::new(w, h, img.into_raw()).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("label buffer matches dimensions");
        encode_png(path, img)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Hard,
    Soft,
}

/// Four class planes that partition the image.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMaskSet {
    width: usize,
    height: usize,
    planes: Vec<f64>,
    kind: MaskKind,
}

const PARTITION_TOL: f64 = 1e-6;

impl SemanticMaskSet {
    /// Hard masks from per-pixel zero-based class indices.
    pub fn from_class_map(width: usize, height: usize, classes: &[u8]) -> Result<Self> {
        ensure!(
            classes.len() == width * height,
            "class map needs {} entries, got {}",
            width * height,
            classes.len()
        );
        let n = width * height;
        let mut planes = vec![0.0; NUM_CLASSES * n];
        for (p, &c) in classes.iter().enumerate() {
            ensure!((c as usize) < NUM_CLASSES, "class value {c} outside 0..=3");
            planes[c as usize * n + p] = 1.0;
        }
        Ok(Self {
            width,
            height,
            planes,
            kind: MaskKind::Hard,
        })
    }

    /// Validates the partition property (and binary values for hard masks).
    pub fn from_planes(width: usize, height: usize, planes: Vec<f64>, kind: MaskKind) -> Result<Self> {
        let n = width * height;
        ensure!(
            planes.len() == NUM_CLASSES * n,
            "mask set needs {} values, got {}",
            NUM_CLASSES * n,
            planes.len()
        );
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..NUM_CLASSES {
                let v = planes[c * n + p];
                ensure!(
                    (0.0..=1.0).contains(&v),
                    "mask value {v} outside [0, 1]"
                );
                ensure!(
                    kind == MaskKind::Soft || v == 0.0 || v == 1.0,
                    "hard mask value {v} is not binary"
                );
                sum += v;
            }
            ensure!(
                (sum - 1.0).abs() <= PARTITION_TOL,
                "mask planes sum to {sum} at pixel {p}"
            );
        }
        Ok(Self {
            width,
            height,
            planes,
            kind,
        })
    }

    /// Soft masks from sample `n` of a `[_, 4, h, w]` probability tensor.
    pub fn from_tensor(t: &Tensor, n: usize, kind: MaskKind) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        ensure!(c == NUM_CLASSES, "expected 4 mask channels, got {c}");
        Self::from_planes(w, h, t.sample(n).to_vec(), kind)
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

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn planes(&self) -> &[f64] {
        &self.planes
    }

    pub fn plane(&self, class: ClassId) -> &[f64] {
        let n = self.width * self.height;
        &self.planes[class.plane() * n..(class.plane() + 1) * n]
    }

    /// Pixels whose hardened class is `class`.
    pub fn count(&self, class: ClassId) -> usize {
        self.class_map()
            .iter()
            .filter(|&&c| c as usize == class.plane())
            .count()
    }

    /// Per-pixel argmax (zero-based), ties resolved to the lowest class.
    pub fn class_map(&self) -> Vec<u8> {
        let n = self.width * self.height;
        (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if self.planes[c * n + p] > self.planes[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn harden(&self) -> SemanticMaskSet {
        Self::from_class_map(self.width, self.height, &self.class_map())
            .expect("class map is well-formed")
    }

    /// `[1, 4, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, NUM_CLASSES, self.height, self.width], self.planes.clone())
    }

    /// Hardened class indices (0..=3) as a single-channel PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.class_map())
            .expect("class buffer matches dimensions");
        encode_png(path, img)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_class_map(w, h, img.as_raw()).map_err(|e| Error::format(path, e.to_string()))
    }

    /// All four planes as a `(4, h, w)` float64 NPY file.
    pub fn save_npy(&self, path: &Path) -> Result<()> {
        write_npy(path, &[NUM_CLASSES, self.height, self.width], &self.planes)
    }
}

/// Groups the 11 source labels into the 4 semantic classes.
pub fn group_labels(labels: &LabelMap11) -> SemanticMaskSet {
    let classes: Vec<u8> = labels
        .labels
        .iter()
        .map(|&l| LABEL_TO_CLASS[l as usize] - 1)
        .collect();
    SemanticMaskSet::from_class_map(labels.width, labels.height, &classes)
        .expect("grouped classes are in range")
}

/// The four masked images `m_i ⊙ x`.
pub fn decompose(image: &Image, masks: &SemanticMaskSet) -> Result<[Image; NUM_CLASSES]> {
    ensure!(
        image.dims() == masks.dims(),
        "image is {:?} but masks are {:?}",
        image.dims(),
        masks.dims()
    );
    Ok(ClassId::ALL.map(|class| {
        let m = masks.plane(class);
        let mut out = image.clone();
        for c in 0..Image::CHANNELS {
            for (v, &mv) in out.plane_mut(c).iter_mut().zip(m) {
                *v *= mv;
            }
        }
        out
    }))
}

/// F-score of one class after hardening both mask sets. A class absent from
/// both prediction and truth scores 1.
pub fn f_score(pred: &SemanticMaskSet, truth: &SemanticMaskSet, class: ClassId) -> Result<f64> {
    ensure!(
        pred.dims() == truth.dims(),
        "mask dimensions differ: {:?} vs {:?}",
        pred.dims(),
        truth.dims()
    );
    let k = class.plane() as u8;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.class_map().iter().zip(&truth.class_map()) {
        match (p == k, t == k) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}
