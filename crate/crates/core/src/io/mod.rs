//! Dataset synthesis and on-disk formats.

pub mod dataset;
pub mod files;
pub mod ppm;
pub mod report;
pub mod run_dir;

pub use dataset::{sample, DatasetSpec, Generator, ToyDataset};
pub use files::{
    load_capture, load_dataset, load_images, load_prior, load_victim, save_capture, save_dataset, save_images,
    save_prior, save_victim, sha256_bytes, sha256_file,
};
pub use report::{locate_in_gallery, report_run, RunReport};
pub use run_dir::{execute_attack, replay, DesignFlags, FileRef, RunInputs, RunManifest};
