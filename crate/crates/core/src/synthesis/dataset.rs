use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::io::{read_json, write_json};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::semantics::{
    group_labels, ClassId, LabelMap11, SNetModel, SemanticMaskSet, CLASS_NAMES, LABEL_TO_CLASS,
    SOURCE_LABEL_NAMES,
};

use super::{add_noise, blur, class_blur, generate_kernel_in_range, render_face, BlurKernel, KernelSizeRange, TrajectoryParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASSES_FILE: &str = "classes.json";

/// Knobs of dataset synthesis. Defaults follow the full-scale recipe except
/// for the sample count, which is kept small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub patch_size: usize,
    pub num_kernels: usize,
    pub kernel_sides: KernelSizeRange,
    pub trajectory: TrajectoryParams,
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub class_blurred: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 64,
            patch_size: 128,
            num_kernels: 25_000,
            kernel_sides: KernelSizeRange::default(),
            trajectory: TrajectoryParams::default(),
            noise_sigma: 0.03,
            master_seed: 0,
            class_blurred: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_samples > 0, "num_samples must be positive");
        ensure!(self.num_kernels > 0, "num_kernels must be positive");
        ensure!(
            self.patch_size >= 2 && self.patch_size.is_multiple_of(2),
            "patch_size must be even, got {}",
            self.patch_size
        );
        self.kernel_sides.validate()?;
        ensure!(
            self.kernel_sides.max <= self.patch_size,
            "largest kernel side {} exceeds patch size {}",
            self.kernel_sides.max,
            self.patch_size
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be non-negative"
        );
        Ok(())
    }

    /// Kernel number `id` of the pool: its side and trajectory both derive from the master seed.
    pub fn kernel(&self, id: usize) -> Result<BlurKernel> {
        ensure!(id < self.num_kernels, "kernel id {id} outside pool of {}", self.num_kernels);
        let mut r = rng_for(self.master_seed, Stream::Kernel, id as u64);
        let side = self.kernel_sides.nth(r.random_range(0..self.kernel_sides.choices()));
        generate_kernel_in_range(r.random(), side, &self.trajectory, &self.kernel_sides)
    }
}

pub fn kernel_name(id: usize) -> String {
    format!("k{id:05}")
}

/// Where per-pixel semantic masks of a directory corpus come from.
#[derive(Clone, Debug)]
pub enum MaskSource {
    /// PNGs of the 11 source labels (values 0..=10), matched by file stem.
    LabelDir(PathBuf),
    /// PNGs of grouped classes (values 0..=3), matched by file stem.
    ClassDir(PathBuf),
    /// Hardened predictions of a segmentation network.
    Model(Box<SNetModel>),
}

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub name: String,
    pub image: Image,
    pub masks: SemanticMaskSet,
}

/// Clean images with their hard masks.
#[derive(Clone, Debug)]
pub enum Corpus {
    /// Procedurally rendered faces, generated on demand.
    Synthetic {
        seed: u64,
        count: usize,
        width: usize,
        height: usize,
    },
    Loaded(Vec<CorpusItem>),
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Corpus {
    pub fn synthetic(seed: u64, count: usize, width: usize, height: usize) -> Self {
        Corpus::Synthetic {
            seed,
            count,
            width,
            height,
        }
    }

    /// Loads every PNG of `images` together with its masks.
    pub fn load_dir(images: &Path, masks: &MaskSource) -> Result<Self> {
        let files = png_files(images)?;
        if files.is_empty() {
            return Err(Error::NoSamples(format!(
                "no PNG images found in {}",
                images.display()
            )));
        }
        let mut items = Vec::with_capacity(files.len());
        for path in files {
            let name = stem(&path);
            let image = Image::load_png(&path)?;
            let masks = match masks {
                MaskSource::LabelDir(dir) => {
                    group_labels(&LabelMap11::load_png(&dir.join(format!("{name}.png")))?)
                }
                MaskSource::ClassDir(dir) => SemanticMaskSet::load_png(&dir.join(format!("{name}.png")))?,
                MaskSource::Model(model) => crate::semantics::snet_forward(model, &image)?.harden(),
            };
            ensure!(
                masks.dims() == image.dims(),
                "masks of {name} are {:?} but the image is {:?}",
                masks.dims(),
                image.dims()
            );
            items.push(CorpusItem { name, image, masks });
        }
        Ok(Corpus::Loaded(items))
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Synthetic { count, .. } => *count,
            Corpus::Loaded(items) => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self, index: usize) -> (usize, usize) {
        match self {
            Corpus::Synthetic { width, height, .. } => (*width, *height),
            Corpus::Loaded(items) => items[index].image.dims(),
        }
    }

    pub fn item(&self, index: usize) -> Result<CorpusItem> {
        ensure!(index < self.len(), "corpus index {index} out of range");
        match self {
            Corpus::Synthetic {
                seed,
                width,
                height,
                ..
            } => {
                let (image, labels) = render_face(*seed, index as u64, *width, *height)?;
                Ok(CorpusItem {
                    name: format!("face{index:05}"),
                    image,
                    masks: group_labels(&labels),
                })
            }
            Corpus::Loaded(items) => Ok(items[index].clone()),
        }
    }
}

/// A clean/blurry pair with masks and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub clean: Image,
    pub blurry: Image,
    pub masks: SemanticMaskSet,
    pub kernel_id: String,
    pub noise_sigma: f64,
    pub seed: u64,
    pub class_blurred: Option<BTreeMap<ClassId, Image>>,
}

fn crop_image(img: &Image, x0: usize, y0: usize, size: usize) -> Image {
    Image::from_fn(size, size, |c, y, x| img.get(c, y0 + y, x0 + x))
}

fn crop_masks(m: &SemanticMaskSet, x0: usize, y0: usize, size: usize) -> SemanticMaskSet {
    let w = m.width();
    let map = m.class_map();
    let mut classes = Vec::with_capacity(size * size);
    for y in 0..size {
        classes.extend_from_slice(&map[(y0 + y) * w + x0..(y0 + y) * w + x0 + size]);
    }
    SemanticMaskSet::from_class_map(size, size, &classes).expect("crop of a valid class map")
}

/// Builds sample `index`; all randomness derives from `(master_seed, index)`.
pub fn generate_sample(corpus: &Corpus, config: &DatasetConfig, index: usize) -> Result<TrainingSample> {
    let size = config.patch_size;
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let (w, h) = corpus.dims(i);
            w >= size && h >= size
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::NoSamples(format!(
            "no corpus image is at least {size}x{size}"
        )));
    }
    let seed = derive_seed(config.master_seed, Stream::Sample, index as u64);
    let mut r = rng_for(config.master_seed, Stream::Sample, index as u64);
    let item = corpus.item(usable[r.random_range(0..usable.len())])?;
    let (w, h) = item.image.dims();
    let x0 = r.random_range(0..=w - size);
    let y0 = r.random_range(0..=h - size);
    let kernel_id = r.random_range(0..config.num_kernels);
    let kernel = config.kernel(kernel_id)?;

    let clean = crop_image(&item.image, x0, y0, size);
    let masks = crop_masks(&item.masks, x0, y0, size);
    let noise_seed = |k: u64| derive_seed(config.master_seed, Stream::Noise, index as u64 * 5 + k);
    let blurry = add_noise(&blur(&clean, &kernel)?, config.noise_sigma, noise_seed(0))?;
    let class_blurred = if config.class_blurred {
        let mut map = BTreeMap::new();
        for class in ClassId::ALL {
            let b = class_blur(&clean, &masks, class, &kernel)?;
            map.insert(class, add_noise(&b, config.noise_sigma, noise_seed(class.get() as u64))?);
        }
        Some(map)
    } else {
        None
    };
    Ok(TrainingSample {
        clean,
        blurry,
        masks,
        kernel_id: kernel_name(kernel_id),
        noise_sigma: config.noise_sigma,
        seed,
        class_blurred,
    })
}

/// Samples `0..num_samples`; parallel generation gives the serial result.
pub fn generate_samples(corpus: &Corpus, config: &DatasetConfig) -> Result<Vec<TrainingSample>> {
    config.validate()?;
    (0..config.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(corpus, config, i))
        .collect()
}

/// One line of `manifest.json`; paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub clean: String,
    pub blurry: String,
    pub masks: String,
    pub kernel_id: String,
    pub kernel_side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_blurred: Option<BTreeMap<ClassId, String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Serialize)]
struct ClassEntry {
    index: usize,
    name: &'static str,
    source_labels: Vec<&'static str>,
}

fn class_table() -> Vec<ClassEntry> {
    ClassId::ALL
        .iter()
        .map(|c| ClassEntry {
            index: c.get(),
            name: CLASS_NAMES[c.plane()],
            source_labels: SOURCE_LABEL_NAMES
                .iter()
                .zip(LABEL_TO_CLASS)
                .filter(|(_, k)| *k as usize == c.get())
                .map(|(n, _)| *n)
                .collect(),
        })
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates the dataset and writes it under `out`.
pub fn build_dataset(corpus: &Corpus, config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::NoSamples("clean corpus is empty".into()));
    }
    for dir in ["clean", "blurry", "masks", "kernels"] {
        create_dir(&out.join(dir))?;
    }
    if config.class_blurred {
        for class in ClassId::ALL {
            create_dir(&out.join("class_blurred").join(class.get().to_string()))?;
        }
    }
    let records = (0..config.num_samples)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let sample = generate_sample(corpus, config, i)?;
            let id = format!("{i:06}");
            let rel = |dir: &str| format!("{dir}/{id}.png");
            sample.clean.save_png(out.join(rel("clean")))?;
            sample.blurry.save_png(out.join(rel("blurry")))?;
            sample.masks.save_png(&out.join(rel("masks")))?;
            let kernel_index: usize = sample.kernel_id[1..].parse().expect("kernel names are numeric");
            let kernel = config.kernel(kernel_index)?;
            let kernel_path = out.join("kernels").join(format!("{}.npy", sample.kernel_id));
            kernel.save_npy(&kernel_path)?;
            let class_blurred = match &sample.class_blurred {
                Some(map) => {
                    let mut paths = BTreeMap::new();
                    for (class, img) in map {
                        let p = format!("class_blurred/{}/{id}.png", class.get());
                        img.save_png(out.join(&p))?;
                        paths.insert(*class, p);
                    }
                    Some(paths)
                }
                None => None,
            };
            Ok(ManifestRecord {
                id: id.clone(),
                clean: rel("clean"),
                blurry: rel("blurry"),
                masks: rel("masks"),
                kernel_id: sample.kernel_id,
                kernel_side: kernel.side(),
                noise_sigma: sample.noise_sigma,
                seed: sample.seed,
                class_blurred,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join(CLASSES_FILE), &class_table())?;
    write_json(&out.join(MANIFEST_FILE), &records)?;
    Ok(DatasetManifest {
        root: out.to_path_buf(),
        records,
    })
}

impl DatasetManifest {
    /// Reads `manifest.json` from a dataset root or from the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let records: Vec<ManifestRecord> = read_json(&file)?;
        if records.is_empty() {
            return Err(Error::NoSamples(format!("{} lists no samples", file.display())));
        }
        Ok(Self { root, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_sample(&self, index: usize) -> Result<TrainingSample> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("sample {index} not in manifest")))?;
        let clean = Image::load_png(self.resolve(&rec.clean))?;
        let blurry = Image::load_png(self.resolve(&rec.blurry))?;
        let masks = SemanticMaskSet::load_png(&self.resolve(&rec.masks))?;
        let class_blurred = match &rec.class_blurred {
            Some(paths) => {
                let mut map = BTreeMap::new();
                for (class, p) in paths {
                    map.insert(*class, Image::load_png(self.resolve(p))?);
                }
                Some(map)
            }
            None => None,
        };
        let sample = TrainingSample {
            clean,
            blurry,
            masks,
            kernel_id: rec.kernel_id.clone(),
            noise_sigma: rec.noise_sigma,
            seed: rec.seed,
            class_blurred,
        };
        let dims_agree = sample.blurry.same_dims(&sample.clean)
            && sample.masks.dims() == sample.clean.dims()
            && sample
                .class_blurred
                .iter()
                .flat_map(|m| m.values())
                .all(|img| img.same_dims(&sample.clean));
        if !dims_agree {
            return Err(Error::format(
                self.resolve(&rec.clean),
                format!("sample {} has mismatched image sizes", rec.id),
            ));
        }
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<TrainingSample>> {
        (0..self.len()).into_par_iter().map(|i| self.load_sample(i)).collect()
    }

    pub fn load_kernel(&self, kernel_id: &str) -> Result<BlurKernel> {
        BlurKernel::load_npy(&self.root.join("kernels").join(format!("{kernel_id}.npy")))
    }
}

/// Writes kernels `0..count` of the configured pool as `<out>/<id>.npy`.
pub fn write_kernel_bank(config: &DatasetConfig, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    ensure!(count <= config.num_kernels, "requested {count} kernels from a pool of {}", config.num_kernels);
    create_dir(out)?;
    (0..count)
        .into_par_iter()
        .map(|id| {
            let path = out.join(format!("{}.npy", kernel_name(id)));
            config.kernel(id)?.save_npy(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize) -> DatasetConfig {
        DatasetConfig {
            num_samples: n,
            patch_size: 32,
            num_kernels: 50,
            master_seed: 9,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn samples_are_consistent() {
        let corpus = Corpus::synthetic(1, 4, 40, 48);
        let s = generate_sample(&corpus, &small_config(2), 1).unwrap();
        assert_eq!(s.clean.dims(), (32, 32));
        assert!(s.blurry.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.class_blurred.as_ref().unwrap().len(), 4);
        assert_eq!(s, generate_sample(&corpus, &small_config(2), 1).unwrap());
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let corpus = Corpus::synthetic(1, 4, 32, 32);
        let cfg = small_config(4);
        let par = generate_samples(&corpus, &cfg).unwrap();
        let serial: Vec<_> = (0..4).map(|i| generate_sample(&corpus, &cfg, i).unwrap()).collect();
        assert_eq!(par, serial);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(1);
        cfg.patch_size = 31;
        assert!(cfg.validate().is_err());
        cfg.patch_size = 16;
        assert!(cfg.validate().is_err(), "kernels up to 29 do not fit a 16 patch");
        assert!(DatasetConfig::default().validate().is_ok());
    }

    #[test]
    fn too_small_corpus_is_reported() {
        let corpus = Corpus::synthetic(1, 2, 16, 16);
        let err = generate_sample(&corpus, &small_config(1), 0).unwrap_err();
        assert!(matches!(err, Error::NoSamples(_)));
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::synthetic(2, 3, 32, 32);
        let manifest = build_dataset(&corpus, &small_config(3), dir.path()).unwrap();
        assert_eq!(manifest.len(), 3);
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records, manifest.records);
        let s = loaded.load_sample(2).unwrap();
        assert_eq!(s.masks.dims(), (32, 32));
        let k = loaded.load_kernel(&manifest.records[0].kernel_id).unwrap();
        assert_eq!(k.side(), manifest.records[0].kernel_side);
        let classes: serde_json::Value = read_json(&dir.path().join(CLASSES_FILE)).unwrap();
        assert_eq!(classes[2]["source_labels"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn directory_corpus_with_label_masks() {
        let dir = tempfile::tempdir().unwrap();
        let (img_dir, lbl_dir) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::create_dir_all(&img_dir).unwrap();
        fs::create_dir_all(&lbl_dir).unwrap();
        for i in 0..2 {
            let (img, labels) = render_face(5, i, 36, 36).unwrap();
            img.save_png(img_dir.join(format!("f{i}.png"))).unwrap();
            labels.save_png(&lbl_dir.join(format!("f{i}.png"))).unwrap();
        }
        let corpus = Corpus::load_dir(&img_dir, &MaskSource::LabelDir(lbl_dir)).unwrap();
        assert_eq!(corpus.len(), 2);
        assert!(generate_samples(&corpus, &small_config(2)).is_ok());
        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        assert!(Corpus::load_dir(&empty, &MaskSource::ClassDir(empty.clone())).is_err());
    }

    #[test]
    fn kernel_bank() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_kernel_bank(&small_config(1), 5, dir.path()).unwrap();
        assert_eq!(paths.len(), 5);
        for p in paths {
            let k = BlurKernel::load_npy(&p).unwrap();
            assert!(KernelSizeRange::default().contains(k.side()));
        }
    }
}
