//! Blur-kernel simulation, the degradation model and paired-dataset synthesis.

mod blur;
mod dataset;
mod faces;
mod kernel;

pub use blur::{add_noise, blur, class_blur, reflect_index};
pub use dataset::{
    build_dataset, generate_sample, generate_samples, kernel_name, write_kernel_bank, Corpus, CorpusItem,
    DatasetConfig, DatasetManifest, ManifestRecord, MaskSource, TrainingSample, CLASSES_FILE, MANIFEST_FILE,
};
pub use faces::render_face;
pub use kernel::{
    generate_kernel, generate_kernel_in_range, rasterize, BlurKernel, CameraTrajectory, KernelSizeRange,
    TrajectoryParams,
};
