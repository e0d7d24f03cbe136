use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureSet, Label, Result};
use crate::tensor::Tensor;

/// Shot counts of an episode: `normals` (L1) and `abnormals` (L2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub normals: usize,
    pub abnormals: usize,
    /// Permit `normals <= abnormals`.
    pub allow_unordered: bool,
}

impl EpisodeShape {
    pub fn new(normals: usize, abnormals: usize) -> Self {
        Self {
            normals,
            abnormals,
            allow_unordered: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normals == 0 || self.abnormals == 0 {
            return Err(FeatureError::Contract(format!(
                "shot counts must be positive (L1={}, L2={})",
                self.normals, self.abnormals
            )));
        }
        if !self.allow_unordered && self.normals <= self.abnormals {
            return Err(FeatureError::Contract(format!(
                "L1={} must exceed L2={}",
                self.normals, self.abnormals
            )));
        }
        Ok(())
    }
}

/// One query image.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: usize,
    pub features: Tensor<f32>,
    pub mask: Vec<bool>,
    pub label: Label,
}

impl Query {
    pub fn from_set(set: &FeatureSet, id: usize) -> Self {
        Self {
            id,
            features: set.image_tensor(id),
            mask: set.mask(id).to_vec(),
            label: set.label(id),
        }
    }
}

/// Normal and abnormal reference images stacked patch-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub normal_ids: Vec<usize>,
    pub abnormal_ids: Vec<usize>,
    pub anomaly_type: String,
    /// `(L1·N) × C`
    pub normals: Tensor<f32>,
    /// `(L2·N) × C`
    pub abnormals: Tensor<f32>,
    pub abnormal_mask: Vec<bool>,
    /// Grid position of each abnormal patch within its own image.
    pub abnormal_positions: Vec<usize>,
    pub grid: usize,
}

impl ReferenceSet {
    pub fn assemble(
        set: &FeatureSet,
        normal_ids: &[usize],
        abnormal_ids: &[usize],
    ) -> Result<Self> {
        for &i in normal_ids.iter().chain(abnormal_ids) {
            if i >= set.len() {
                return Err(FeatureError::Contract(format!(
                    "reference id {i} out of range for {} images",
                    set.len()
                )));
            }
        }
        if let Some(&bad) = normal_ids.iter().find(|&&i| set.label(i).is_abnormal()) {
            return Err(FeatureError::Contract(format!(
                "normal reference {bad} is labelled abnormal"
            )));
        }
        if let Some(&bad) = abnormal_ids.iter().find(|&&i| !set.label(i).is_abnormal()) {
            return Err(FeatureError::Contract(format!(
                "abnormal reference {bad} is labelled normal"
            )));
        }
        let types: BTreeSet<&str> = abnormal_ids.iter().map(|&i| set.anomaly_type(i)).collect();
        if types.len() > 1 {
            return Err(FeatureError::Contract(format!(
                "abnormal references mix anomaly types {types:?}"
            )));
        }
        let n = set.n_patches();
        let mut abnormal_mask = Vec::with_capacity(abnormal_ids.len() * n);
        for &i in abnormal_ids {
            abnormal_mask.extend_from_slice(set.mask(i));
        }
        Ok(Self {
            normal_ids: normal_ids.to_vec(),
            abnormal_ids: abnormal_ids.to_vec(),
            anomaly_type: types.into_iter().next().unwrap_or_default().to_string(),
            normals: set.stack(normal_ids),
            abnormals: set.stack(abnormal_ids),
            abnormal_mask,
            abnormal_positions: (0..abnormal_ids.len() * n).map(|p| p % n).collect(),
            grid: set.grid(),
        })
    }

    pub fn contains(&self, id: usize) -> bool {
        self.normal_ids.contains(&id) || self.abnormal_ids.contains(&id)
    }
}

/// A query with its few-shot references.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Query,
    pub references: ReferenceSet,
}

impl Episode {
    pub fn new(query: Query, references: ReferenceSet) -> Result<Self> {
        if references.contains(query.id) {
            return Err(FeatureError::Contract(format!(
                "query {} is also a reference",
                query.id
            )));
        }
        if references.normal_ids.is_empty() || references.abnormal_ids.is_empty() {
            return Err(FeatureError::Contract(
                "episode needs at least one normal and one abnormal reference".into(),
            ));
        }
        Ok(Self { query, references })
    }
}

struct PoolIndex<'a> {
    normals: Vec<usize>,
    types: Vec<(&'a str, Vec<usize>)>,
}

impl<'a> PoolIndex<'a> {
    fn new(pool: &'a FeatureSet) -> Self {
        Self {
            normals: pool.normal_ids(),
            types: pool.ids_by_type().into_iter().collect(),
        }
    }

    /// Anomaly types that can supply `l2` references when `query` is excluded.
    fn types_for(&self, query: usize, shape: &EpisodeShape) -> Vec<usize> {
        self.types
            .iter()
            .enumerate()
            .filter(|(_, (_, ids))| ids.iter().filter(|&&i| i != query).count() >= shape.abnormals)
            .map(|(t, _)| t)
            .collect()
    }

    fn feasible(&self, query: usize, shape: &EpisodeShape) -> bool {
        let normals = self.normals.iter().filter(|&&i| i != query).count();
        normals >= shape.normals && !self.types_for(query, shape).is_empty()
    }
}

/// Query ids for which a legal episode exists.
pub fn feasible_queries(pool: &FeatureSet, shape: &EpisodeShape) -> Vec<usize> {
    let index = PoolIndex::new(pool);
    (0..pool.len()).filter(|&q| index.feasible(q, shape)).collect()
}

fn shortfall(pool: &FeatureSet, shape: &EpisodeShape) -> FeatureError {
    let best = pool
        .ids_by_type()
        .values()
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    FeatureError::Capacity(format!(
        "need {} normals + {} abnormals of one type besides the query; pool has {} normals, largest type has {}",
        shape.normals,
        shape.abnormals,
        pool.normal_ids().len(),
        best
    ))
}

/// Samples references for a fixed query: normals uniformly, one anomaly type
/// uniformly among those with enough images, then abnormals of that type.
pub fn episode_for_query<R: Rng>(
    pool: &FeatureSet,
    query: usize,
    shape: &EpisodeShape,
    rng: &mut R,
) -> Result<Episode> {
    shape.validate()?;
    let index = PoolIndex::new(pool);
    if query >= pool.len() || !index.feasible(query, shape) {
        return Err(shortfall(pool, shape));
    }
    let normals: Vec<usize> = index.normals.iter().copied().filter(|&i| i != query).collect();
    let types = index.types_for(query, shape);
    let (_, type_ids) = &index.types[types[rng.random_range(0..types.len())]];
    let candidates: Vec<usize> = type_ids.iter().copied().filter(|&i| i != query).collect();

    let normal_ids = pick(&normals, shape.normals, rng);
    let abnormal_ids = pick(&candidates, shape.abnormals, rng);
    let refs = ReferenceSet::assemble(pool, &normal_ids, &abnormal_ids)?;
    Episode::new(Query::from_set(pool, query), refs)
}

/// Draws a training episode with the query uniform over feasible images.
pub fn build_training_episode<R: Rng>(
    pool: &FeatureSet,
    shape: &EpisodeShape,
    rng: &mut R,
) -> Result<Episode> {
    shape.validate()?;
    let queries = feasible_queries(pool, shape);
    if queries.is_empty() {
        return Err(shortfall(pool, shape));
    }
    let q = queries[rng.random_range(0..queries.len())];
    episode_for_query(pool, q, shape, rng)
}

fn pick<R: Rng>(from: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, from.len(), amount)
        .into_iter()
        .map(|i| from[i])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    General,
    Hard,
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "general" => Ok(Setting::General),
            "hard" => Ok(Setting::Hard),
            other => Err(format!("unknown setting {other:?} (general|hard)")),
        }
    }
}

/// Fixed reference selection reused for every query of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    dataset: String,
    seed: u64,
    #[serde(rename = "L1")]
    l1: usize,
    #[serde(rename = "L2")]
    l2: usize,
    setting: Setting,
    normal_ids: Vec<usize>,
    abnormal_ids: Vec<usize>,
    anomaly_type: String,
}

impl EpisodeManifest {
    pub fn dataset(&self) -> &str {
        &self.dataset
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            normals: self.l1,
            abnormals: self.l2,
            allow_unordered: true,
        }
    }
    pub fn setting(&self) -> Setting {
        self.setting
    }
    pub fn normal_ids(&self) -> &[usize] {
        &self.normal_ids
    }
    pub fn abnormal_ids(&self) -> &[usize] {
        &self.abnormal_ids
    }
    pub fn anomaly_type(&self) -> &str {
        &self.anomaly_type
    }

    /// Same references, different evaluation setting.
    pub fn with_setting(&self, setting: Setting) -> Self {
        Self {
            setting,
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are plain data")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| FeatureError::Manifest(e.to_string()))?;
        if m.normal_ids.len() != m.l1 || m.abnormal_ids.len() != m.l2 {
            return Err(FeatureError::Manifest(format!(
                "L1={} / L2={} disagree with {} normal and {} abnormal ids",
                m.l1,
                m.l2,
                m.normal_ids.len(),
                m.abnormal_ids.len()
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Stacks the referenced images, checking labels and type against `dataset`.
    pub fn references(&self, dataset: &FeatureSet) -> Result<ReferenceSet> {
        let refs = ReferenceSet::assemble(dataset, &self.normal_ids, &self.abnormal_ids)?;
        if refs.anomaly_type != self.anomaly_type {
            return Err(FeatureError::Manifest(format!(
                "manifest type {:?} but references are {:?}",
                self.anomaly_type, refs.anomaly_type
            )));
        }
        Ok(refs)
    }

    /// Test queries under this manifest's setting. Reference images are never
    /// queries.
    pub fn query_ids(&self, dataset: &FeatureSet) -> Result<Vec<usize>> {
        match self.setting {
            Setting::General => Ok(self.general_queries(dataset)),
            Setting::Hard => hard_filter(dataset, self),
        }
    }

    fn general_queries(&self, dataset: &FeatureSet) -> Vec<usize> {
        (0..dataset.len())
            .filter(|i| !self.normal_ids.contains(i) && !self.abnormal_ids.contains(i))
            .collect()
    }
}

/// Builds the fixed reference selection for a dataset.
pub fn build_inference_manifest(
    dataset: &FeatureSet,
    dataset_id: &str,
    shape: &EpisodeShape,
    seed: u64,
    setting: Setting,
) -> Result<EpisodeManifest> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = dataset.normal_ids();
    let types: Vec<(&str, Vec<usize>)> = dataset
        .ids_by_type()
        .into_iter()
        .filter(|(_, ids)| ids.len() >= shape.abnormals)
        .collect();
    if normals.len() < shape.normals || types.is_empty() {
        return Err(shortfall(dataset, shape));
    }
    let (ty, ids) = &types[rng.random_range(0..types.len())];
    Ok(fixed_manifest(dataset_id, shape, seed, setting, &mut rng, &normals, ty, ids))
}

/// Like [`build_inference_manifest`] with the anomaly type chosen by the
/// caller.
pub fn build_manifest_for_type(
    dataset: &FeatureSet,
    dataset_id: &str,
    shape: &EpisodeShape,
    seed: u64,
    setting: Setting,
    anomaly_type: &str,
) -> Result<EpisodeManifest> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = dataset.normal_ids();
    let by_type = dataset.ids_by_type();
    let ids = by_type
        .get(anomaly_type)
        .filter(|ids| ids.len() >= shape.abnormals && normals.len() >= shape.normals)
        .ok_or_else(|| shortfall(dataset, shape))?;
    Ok(fixed_manifest(dataset_id, shape, seed, setting, &mut rng, &normals, anomaly_type, ids))
}

#[allow(clippy::too_many_arguments)]
fn fixed_manifest(
    dataset_id: &str,
    shape: &EpisodeShape,
    seed: u64,
    setting: Setting,
    rng: &mut ChaCha8Rng,
    normals: &[usize],
    ty: &str,
    ids: &[usize],
) -> EpisodeManifest {
    let mut normal_ids = pick(normals, shape.normals, rng);
    let mut abnormal_ids = pick(ids, shape.abnormals, rng);
    normal_ids.sort_unstable();
    abnormal_ids.sort_unstable();
    EpisodeManifest {
        dataset: dataset_id.to_string(),
        seed,
        l1: shape.normals,
        l2: shape.abnormals,
        setting,
        normal_ids,
        abnormal_ids,
        anomaly_type: ty.to_string(),
    }
}

/// Non-reference test ids minus every anomaly of the manifest's type.
pub fn hard_filter(dataset: &FeatureSet, manifest: &EpisodeManifest) -> Result<Vec<usize>> {
    if manifest.setting != Setting::Hard {
        return Err(FeatureError::Contract(
            "hard_filter needs a Hard-setting manifest".into(),
        ));
    }
    Ok(manifest
        .general_queries(dataset)
        .into_iter()
        .filter(|&i| {
            !(dataset.label(i).is_abnormal() && dataset.anomaly_type(i) == manifest.anomaly_type)
        })
        .collect())
}
