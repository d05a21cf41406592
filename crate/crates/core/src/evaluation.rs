//! Restoration metrics and dataset reports.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::io::{atomic_write, write_json};
use crate::losses::{FeatureExtractor, Tap};
use crate::network::{umsn_forward, UMSNModel};
use crate::semantics::{snet_forward, ClassId, MaskKind, SNetModel, SemanticMaskSet, NUM_CLASSES};
use crate::synthesis::DatasetManifest;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const GRID_DIR: &str = "grids";

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB, or a flag for zero error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.6}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Db(v) => s.serialize_f64(*v),
            Psnr::Identical => s.serialize_str("identical"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(t) if t == "identical" => Ok(Psnr::Identical),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected psnr value {t:?}"))),
        }
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (1.0 / mse).log10()
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    ensure!(
        a.same_dims(b),
        "image sizes differ: {}x{} vs {}x{}",
        a.width(),
        a.height(),
        b.width(),
        b.height()
    );
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(psnr_from_mse(m))
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local structural similarity over all valid 11×11 Gaussian windows,
/// averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    ensure!(
        w >= SSIM_WINDOW && h >= SSIM_WINDOW,
        "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
    );
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let pa = a.plane(c);
        let pb = b.plane(c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (ma, _, _) = filter_valid(pa, w, h, &win);
        let (mb, _, _) = filter_valid(pb, w, h, &win);
        let (aa, _, _) = filter_valid(&sq(pa, pa), w, h, &win);
        let (bb, _, _) = filter_valid(&sq(pb, pb), w, h, &win);
        let (ab, ow, oh) = filter_valid(&sq(pa, pb), w, h, &win);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (mx, my) = (ma[i], mb[i]);
            let vx = aa[i] - mx * mx;
            let vy = bb[i] - my * my;
            let cxy = ab[i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// L2 distance between deep-tap features.
pub fn feature_distance(a: &Image, b: &Image, fx: &FeatureExtractor) -> Result<f64> {
    check_dims(a, b)?;
    let fa = fx.features(a, Tap::Deep)?;
    let fb = fx.features(b, Tap::Deep)?;
    Ok(fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Metrics of one class region. `None` marks a class absent from the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub pixels: usize,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
}

/// PSNR with MSE normalised by the class pixel count, and SSIM of the
/// masked images.
pub fn per_class_metrics(pred: &Image, truth: &Image, masks: &SemanticMaskSet) -> Result<[ClassMetric; NUM_CLASSES]> {
    check_dims(pred, truth)?;
    ensure!(masks.kind() == MaskKind::Hard, "per-class metrics need hard masks");
    ensure!(masks.dims() == pred.dims(), "mask size differs from the image");
    let n = pred.pixels();
    let mut out = [ClassMetric {
        pixels: 0,
        psnr: None,
        ssim: None,
    }; NUM_CLASSES];
    for class in ClassId::ALL {
        let m = masks.plane(class);
        let count = masks.count(class);
        let slot = &mut out[class.plane()];
        slot.pixels = count;
        if count == 0 {
            continue;
        }
        let mut sq = 0.0;
        for c in 0..3 {
            let (p, t) = (pred.plane(c), truth.plane(c));
            for i in 0..n {
                let d = m[i] * (p[i] - t[i]);
                sq += d * d;
            }
        }
        let class_mse = sq / (count * 3) as f64;
        slot.psnr = Some(if class_mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(psnr_from_mse(class_mse))
        });
        let masked = |img: &Image| {
            let mut o = img.clone();
            for c in 0..3 {
                o.plane_mut(c).iter_mut().zip(m).for_each(|(v, w)| *v *= w);
            }
            o
        };
        slot.ssim = if pred.width() >= SSIM_WINDOW && pred.height() >= SSIM_WINDOW {
            Some(ssim(&masked(pred), &masked(truth))?)
        } else {
            None
        };
    }
    Ok(out)
}

/// Anything that turns a blurry image (and its masks) into a restored one.
pub trait Deblur: Sync {
    fn deblur(&self, blurry: &Image, masks: &SemanticMaskSet) -> Result<Image>;
    fn label(&self) -> String;
}

/// Returns its input unchanged.
pub struct Identity;

impl Deblur for Identity {
    fn deblur(&self, blurry: &Image, _: &SemanticMaskSet) -> Result<Image> {
        Ok(blurry.clone())
    }

    fn label(&self) -> String {
        "identity".into()
    }
}

impl Deblur for UMSNModel {
    fn deblur(&self, blurry: &Image, masks: &SemanticMaskSet) -> Result<Image> {
        umsn_forward(self, blurry, masks)
    }

    fn label(&self) -> String {
        format!("umsn(width={})", self.width_multiplier())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub psnr: Psnr,
    pub input_psnr: Psnr,
    pub ssim: f64,
    pub d_feat: f64,
    pub per_class: [ClassMetric; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over images with a finite PSNR.
    pub psnr: Option<f64>,
    pub identical: usize,
    pub ssim: f64,
    pub d_feat: f64,
    /// Per class: mean finite PSNR and mean SSIM over images containing it.
    pub per_class_psnr: [Option<f64>; NUM_CLASSES],
    pub per_class_ssim: [Option<f64>; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_digest: String,
    pub model: String,
    pub extractor: String,
    /// How outputs were treated before scoring.
    pub output_range: String,
    pub masks: String,
    pub records: Vec<ImageRecord>,
    pub aggregate: Aggregate,
    pub failures: Vec<Failure>,
}

impl MetricReport {
    /// 0 when every sample was scored, 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,input_psnr,ssim,d_feat");
        for c in ClassId::ALL {
            s.push_str(&format!(",class{0}_psnr,class{0}_ssim", c.get()));
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{},{},{},{:.9},{:.9}", r.id, r.psnr, r.input_psnr, r.ssim, r.d_feat));
            for m in &r.per_class {
                let p = m.psnr.map(|p| p.to_string()).unwrap_or_else(|| "empty".into());
                let q = m.ssim.map(|v| format!("{v:.9}")).unwrap_or_else(|| "empty".into());
                s.push_str(&format!(",{p},{q}"));
            }
            s.push('\n');
        }
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(records: &[ImageRecord]) -> Aggregate {
    let mut per_class_psnr = [None; NUM_CLASSES];
    let mut per_class_ssim = [None; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        per_class_psnr[k] = mean(records.iter().filter_map(|r| r.per_class[k].psnr.and_then(Psnr::db)));
        per_class_ssim[k] = mean(records.iter().filter_map(|r| r.per_class[k].ssim));
    }
    Aggregate {
        psnr: mean(records.iter().filter_map(|r| r.psnr.db())),
        identical: records.iter().filter(|r| r.psnr == Psnr::Identical).count(),
        ssim: mean(records.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
        d_feat: mean(records.iter().map(|r| r.d_feat)).unwrap_or(f64::NAN),
        per_class_psnr,
        per_class_ssim,
    }
}

/// Where the network's input masks come from during evaluation. Per-class
/// metrics always use the stored masks.
#[derive(Clone, Copy, Debug)]
pub enum EvalMasks<'a> {
    Stored,
    Snet(&'a SNetModel),
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub config_digest: String,
    /// Write `blurry | deblurred | truth` strips under `grids/`.
    pub grids: bool,
}

fn score(
    model: &dyn Deblur,
    manifest: &DatasetManifest,
    index: usize,
    masks_from: EvalMasks<'_>,
    fx: &FeatureExtractor,
    grid_dir: Option<&Path>,
) -> std::result::Result<ImageRecord, String> {
    let rec = &manifest.records[index];
    let paths: Vec<PathBuf> = [&rec.clean, &rec.blurry, &rec.masks]
        .iter()
        .map(|p| manifest.resolve(p))
        .collect();
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(format!("missing files: {}", missing.join(", ")));
    }
    let run = || -> Result<ImageRecord> {
        let clean = Image::load_png(&paths[0])?;
        let blurry = Image::load_png(&paths[1])?;
        let truth_masks = SemanticMaskSet::load_png(&paths[2])?;
        let input_masks = match masks_from {
            EvalMasks::Stored => truth_masks.clone(),
            EvalMasks::Snet(s) => snet_forward(s, &blurry)?,
        };
        let pred = model.deblur(&blurry, &input_masks)?.clamped();
        let record = ImageRecord {
            id: rec.id.clone(),
            psnr: psnr(&pred, &clean)?,
            input_psnr: psnr(&blurry, &clean)?,
            ssim: ssim(&pred, &clean)?,
            d_feat: feature_distance(&pred, &clean, fx)?,
            per_class: per_class_metrics(&pred, &clean, &truth_masks)?,
        };
        if let Some(dir) = grid_dir {
            Image::hstack(&[&blurry, &pred, &clean])?.save_png(dir.join(format!("{}.png", rec.id)))?;
        }
        Ok(record)
    };
    run().map_err(|e| e.to_string())
}

/// Deblurs and scores every manifest entry. Unreadable samples are recorded
/// as failures and the rest still evaluated; reports go to `out` when given.
pub fn evaluate_dataset(
    model: &dyn Deblur,
    manifest: &DatasetManifest,
    masks_from: EvalMasks<'_>,
    fx: &FeatureExtractor,
    options: &EvalOptions,
    out: Option<&Path>,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::NoSamples(format!("manifest under {} has no records", manifest.root.display())));
    }
    let grid_dir = match out {
        Some(dir) if options.grids => {
            let g = dir.join(GRID_DIR);
            std::fs::create_dir_all(&g).map_err(|e| Error::io(&g, e))?;
            Some(g)
        }
        _ => None,
    };
    let results: Vec<_> = (0..manifest.len())
        .into_par_iter()
        .map(|i| score(model, manifest, i, masks_from, fx, grid_dir.as_deref()))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(message) => {
                log::warn!("sample {}: {message}", manifest.records[i].id);
                failures.push(Failure {
                    id: manifest.records[i].id.clone(),
                    message,
                })
            }
        }
    }
    if records.is_empty() {
        return Err(Error::NoSamples(format!(
            "all {} samples failed; first: {}",
            failures.len(),
            failures[0].message
        )));
    }
    let report = MetricReport {
        config_digest: options.config_digest.clone(),
        model: model.label(),
        extractor: fx.name.clone(),
        output_range: "float, clamped to [0, 1]".into(),
        masks: match masks_from {
            EvalMasks::Stored => "stored".into(),
            EvalMasks::Snet(_) => "snet".into(),
        },
        aggregate: aggregate(&records),
        records,
        failures,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(REPORT_JSON), &report)?;
        atomic_write(&dir.join(REPORT_CSV), report.to_csv().as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{build_dataset, Corpus, DatasetConfig, KernelSizeRange};
    use proptest::prelude::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut r = crate::rng::rng(seed);
        Image::from_fn(w, h, |_, _, _| r.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(8, 8, 0.4);
        let b = Image::filled(8, 8, 0.5);
        assert!((psnr(&a, &b).unwrap().db().unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Identical);
        let c = Image::from_fn(8, 8, |_, y, x| if (x + y) % 2 == 0 { 0.6 } else { 0.2 });
        assert!((psnr(&a, &c).unwrap().db().unwrap() - 13.979400086720377).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(4, 8, 0.0)).is_err());
    }

    #[test]
    fn psnr_serializes_flag() {
        let s = serde_json::to_string(&[Psnr::Db(20.0), Psnr::Identical]).unwrap();
        assert_eq!(s, r#"[20.0,"identical"]"#);
        let back: Vec<Psnr> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![Psnr::Db(20.0), Psnr::Identical]);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = noise_image(24, 24, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let bin = Image::from_fn(24, 24, |_, y, x| ((x / 3 + y / 2) % 2) as f64);
        let inv = Image::from_fn(24, 24, |c, y, x| 1.0 - bin.get(c, y, x));
        assert!(ssim(&bin, &inv).unwrap() < 0.2);
        assert!(ssim(&Image::new(10, 20), &Image::new(10, 20)).is_err());
    }

    #[test]
    fn per_class_locality_and_normalisation() {
        let classes: Vec<u8> = (0..64).map(|i| if i < 32 { 2 } else { [0u8, 1, 3][i % 3] }).collect();
        let masks = SemanticMaskSet::from_class_map(8, 8, &classes).unwrap();
        let truth = Image::filled(8, 8, 0.3);
        let mut pred = truth.clone();
        for c in 0..3 {
            for i in 0..32 {
                pred.plane_mut(c)[i] += 0.1;
            }
        }
        let m = per_class_metrics(&pred, &truth, &masks).unwrap();
        assert!((m[2].psnr.unwrap().db().unwrap() - 20.0).abs() < 1e-9);
        for k in [0, 1, 3] {
            assert!(matches!(m[k].psnr, None | Some(Psnr::Identical)));
        }
        assert!(per_class_metrics(&truth, &truth, &masks)
            .unwrap()
            .iter()
            .all(|c| c.psnr.is_none() || c.psnr == Some(Psnr::Identical)));
    }

    #[test]
    fn feature_distance_basics() {
        let fx = FeatureExtractor::seeded(0);
        let a = noise_image(16, 16, 2);
        assert_eq!(feature_distance(&a, &a, &fx).unwrap(), 0.0);
        assert!(feature_distance(&a, &noise_image(16, 16, 3), &fx).unwrap() > 0.0);
    }

    #[test]
    fn identity_report_matches_input_psnr() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_samples: 3,
            patch_size: 16,
            num_kernels: 4,
            kernel_sides: KernelSizeRange { min: 3, max: 5 },
            class_blurred: false,
            ..DatasetConfig::default()
        };
        let manifest = build_dataset(&Corpus::synthetic(0, 2, 24, 24), &cfg, &dir.path().join("d")).unwrap();
        let fx = FeatureExtractor::seeded(0);
        let opts = EvalOptions {
            grids: true,
            ..EvalOptions::default()
        };
        let out = dir.path().join("eval");
        let report = evaluate_dataset(&Identity, &manifest, EvalMasks::Stored, &fx, &opts, Some(&out)).unwrap();
        assert_eq!(report.exit_code(), 0);
        assert_eq!(report.records.len(), 3);
        for r in &report.records {
            assert_eq!(r.psnr, r.input_psnr);
        }
        let mean_ssim = report.records.iter().map(|r| r.ssim).sum::<f64>() / 3.0;
        assert!((report.aggregate.ssim - mean_ssim).abs() < 1e-9);
        assert!(out.join(REPORT_CSV).exists());
        assert!(out.join(GRID_DIR).join(format!("{}.png", report.records[0].id)).exists());

        let mut broken = manifest.clone();
        std::fs::remove_file(broken.resolve(&broken.records[1].blurry)).unwrap();
        broken.records[1].id = "gone".into();
        let partial = evaluate_dataset(&Identity, &broken, EvalMasks::Stored, &fx, &EvalOptions::default(), None).unwrap();
        assert_eq!(partial.exit_code(), 2);
        assert_eq!(partial.failures[0].id, "gone");
        assert!(partial.failures[0].message.contains("missing"));

        broken.records.clear();
        assert!(matches!(
            evaluate_dataset(&Identity, &broken, EvalMasks::Stored, &fx, &EvalOptions::default(), None),
            Err(Error::NoSamples(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = noise_image(12, 13, s1);
            let b = noise_image(12, 13, s2 + 1000);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn masked_mse_decomposes(seed in 0u64..1000) {
            use rand::Rng;
            let mut r = crate::rng::rng(seed);
            let classes: Vec<u8> = (0..100).map(|_| r.random_range(0..4u8)).collect();
            let masks = SemanticMaskSet::from_class_map(10, 10, &classes).unwrap();
            let a = noise_image(10, 10, seed);
            let b = noise_image(10, 10, seed + 7);
            let m = per_class_metrics(&a, &b, &masks).unwrap();
            let total: f64 = m
                .iter()
                .filter_map(|c| c.psnr.map(|p| c.pixels as f64 / 100.0 * 10f64.powf(-p.db().unwrap() / 10.0)))
                .sum();
            prop_assert!((total - mse(&a, &b).unwrap()).abs() < 1e-9);
        }
    }
}
