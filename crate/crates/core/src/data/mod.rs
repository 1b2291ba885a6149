//! Datasets and the two-view augmentation pipeline.

pub mod augment;
pub mod cifar;
pub mod image;
pub mod synthetic;

pub use augment::{
    augment_batch, augment_pair, augment_pair_traced, center_crop, center_crop_region,
    center_suppressed_crop, sample_beta, AugmentConfig, PairTrace,
};
pub use cifar::{encode_cifar, load_cifar_batch, load_dataset, parse_cifar, write_cifar, DatasetRecord};
pub use image::{images_to_tensor, CropRegion, Image};
pub use synthetic::{generate_synthetic, synthetic_records};
