//! Patch-feature sets, their on-disk format, and episode construction.

mod episode;
mod io;
mod mask;

pub use episode::{
    build_inference_manifest, build_manifest_for_type, build_training_episode, episode_for_query, feasible_queries,
    hard_filter, Episode, EpisodeManifest, EpisodeShape, Query, ReferenceSet, Setting,
};
pub use io::{decode_feature_set, encode_feature_set, read_feature_file, write_feature_file};
pub use mask::downsample_mask;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("image {image}: {reason}")]
    Invariant { image: usize, reason: String },
    #[error("insufficient pool: {0}")]
    Capacity(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }
}

/// Patch features for a set of images (`images × patches × channels`),
/// with per-image labels, patch masks and anomaly-type tags.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    n_patches: usize,
    channels: usize,
    features: Vec<f32>,
    labels: Vec<Label>,
    masks: Vec<Vec<bool>>,
    anomaly_types: Vec<String>,
}

impl FeatureSet {
    /// Empty set; `n_patches` must be a perfect square.
    pub fn new(n_patches: usize, channels: usize) -> Result<Self> {
        if n_patches == 0 || grid_side(n_patches).is_none() {
            return Err(FeatureError::Contract(format!(
                "patch count {n_patches} is not a non-zero perfect square"
            )));
        }
        if channels == 0 {
            return Err(FeatureError::Contract("zero channels".into()));
        }
        Ok(Self {
            n_patches,
            channels,
            features: Vec::new(),
            labels: Vec::new(),
            masks: Vec::new(),
            anomaly_types: Vec::new(),
        })
    }

    /// Appends one image, enforcing the label/mask invariants.
    pub fn push_image(
        &mut self,
        label: Label,
        anomaly_type: &str,
        mask: Vec<bool>,
        features: &[f32],
    ) -> Result<usize> {
        let image = self.labels.len();
        if mask.len() != self.n_patches {
            return Err(FeatureError::Invariant {
                image,
                reason: format!("mask has {} bits, expected {}", mask.len(), self.n_patches),
            });
        }
        if features.len() != self.n_patches * self.channels {
            return Err(FeatureError::Invariant {
                image,
                reason: format!(
                    "{} feature values, expected {}",
                    features.len(),
                    self.n_patches * self.channels
                ),
            });
        }
        check_label_mask(image, label, &mask)?;
        self.features.extend_from_slice(features);
        self.labels.push(label);
        self.masks.push(mask);
        self.anomaly_types.push(anomaly_type.to_string());
        Ok(image)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Side `g` of the `g × g` patch grid.
    pub fn grid(&self) -> usize {
        grid_side(self.n_patches).expect("validated at construction")
    }

    pub fn label(&self, image: usize) -> Label {
        self.labels[image]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn mask(&self, image: usize) -> &[bool] {
        &self.masks[image]
    }

    pub fn anomaly_type(&self, image: usize) -> &str {
        &self.anomaly_types[image]
    }

    /// `N × C` features of one image, flattened row-major.
    pub fn image(&self, image: usize) -> &[f32] {
        let sz = self.n_patches * self.channels;
        &self.features[image * sz..(image + 1) * sz]
    }

    pub fn image_tensor(&self, image: usize) -> Tensor<f32> {
        Tensor::matrix(self.n_patches, self.channels, self.image(image).to_vec())
            .expect("sizes fixed by construction")
    }

    /// Stacks several images into one `(len·N) × C` matrix.
    pub fn stack(&self, images: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(images.len() * self.n_patches * self.channels);
        for &i in images {
            data.extend_from_slice(self.image(i));
        }
        Tensor::matrix(images.len() * self.n_patches, self.channels, data)
            .expect("sizes fixed by construction")
    }

    pub fn normal_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels[i].is_abnormal()).collect()
    }

    pub fn abnormal_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_abnormal()).collect()
    }

    /// Abnormal image ids grouped by anomaly type, in type order.
    pub fn ids_by_type(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for i in self.abnormal_ids() {
            out.entry(self.anomaly_types[i].as_str()).or_default().push(i);
        }
        out
    }

    /// Re-checks every per-image invariant.
    pub fn validate(&self) -> Result<()> {
        for (i, (&l, m)) in self.labels.iter().zip(&self.masks).enumerate() {
            check_label_mask(i, l, m)?;
        }
        Ok(())
    }
}

fn check_label_mask(image: usize, label: Label, mask: &[bool]) -> Result<()> {
    let any = mask.iter().any(|&b| b);
    match (label, any) {
        (Label::Normal, true) => Err(FeatureError::Invariant {
            image,
            reason: "normal image with a non-zero mask".into(),
        }),
        (Label::Abnormal, false) => Err(FeatureError::Invariant {
            image,
            reason: "abnormal image with an empty mask".into(),
        }),
        _ => Ok(()),
    }
}

pub(crate) fn grid_side(n: usize) -> Option<usize> {
    let g = (n as f64).sqrt().round() as usize;
    (g * g == n).then_some(g)
}
