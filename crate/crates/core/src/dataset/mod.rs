//! Scene-grouped image tiles.
//!
//! Every tile remembers the large scene it was cropped from; the contrastive
//! loss uses that relation to decide which dictionary entries are false
//! negatives.

mod augment;
mod manifest;
mod sampler;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use augment::{augment_pair, AugmentConfig, AugmentedPair, ColorJitter, ResizedCrop};
pub use manifest::{load_tile_directory, write_tile_directory, ManifestRecord, MANIFEST_FILE};
pub use sampler::{BatchSampler, SampledBatch, SamplerState};
pub use synthetic::{generate_synthetic_scenes, pixel_correlation, SyntheticSceneSpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileId(pub String);

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SceneId {
    fn from(s: &str) -> Self {
        SceneId(s.to_owned())
    }
}

impl From<&str> for TileId {
    fn from(s: &str) -> Self {
        TileId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTile {
    pub pixels: Image,
    pub scene_id: SceneId,
    pub tile_id: TileId,
}

impl SceneTile {
    pub fn new(pixels: Image, scene_id: SceneId, tile_id: TileId) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::Format(format!(
                "tile {scene_id}/{tile_id} has {} channels, expected 3",
                pixels.channels()
            )));
        }
        if !pixels.is_unit_range() {
            return Err(Error::contract(format!(
                "tile {scene_id}/{tile_id} has samples outside [0,1]"
            )));
        }
        Ok(Self {
            pixels,
            scene_id,
            tile_id,
        })
    }
}

/// An immutable collection of tiles with unique `(scene_id, tile_id)` keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneDataset {
    tiles: Vec<SceneTile>,
}

impl SceneDataset {
    pub fn new(tiles: Vec<SceneTile>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tiles.len());
        for t in &tiles {
            if !seen.insert((&t.scene_id, &t.tile_id)) {
                return Err(Error::Manifest(format!(
                    "duplicate tile {}/{}",
                    t.scene_id, t.tile_id
                )));
            }
        }
        Ok(Self { tiles })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> &[SceneTile] {
        &self.tiles
    }

    pub fn get(&self, i: usize) -> Option<&SceneTile> {
        self.tiles.get(i)
    }

    /// Sorted distinct scene ids.
    pub fn scene_ids(&self) -> Vec<SceneId> {
        let mut ids: Vec<_> = self.tiles.iter().map(|t| t.scene_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Dense class index per tile, following the order of [`scene_ids`](Self::scene_ids).
    pub fn scene_labels(&self) -> Vec<usize> {
        let index: BTreeMap<SceneId, usize> = self
            .scene_ids()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        self.tiles.iter().map(|t| index[&t.scene_id]).collect()
    }

    /// Splits every scene into a leading `train_fraction` and the remainder,
    /// preserving tile order. Used for probe evaluation.
    pub fn split_per_scene(&self, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::param("train fraction must lie in [0,1]"));
        }
        let mut by_scene: BTreeMap<&SceneId, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tiles.iter().enumerate() {
            by_scene.entry(&t.scene_id).or_default().push(i);
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for idx in by_scene.values() {
            let k = (idx.len() as f64 * train_fraction).round() as usize;
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
        Ok((train, test))
    }
}

/// splitmix64 finalizer; derives independent stream seeds from structured keys.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(scene: &str, id: &str) -> SceneTile {
        SceneTile::new(Image::filled(3, 8, 8, 0.5), scene.into(), id.into()).unwrap()
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = SceneDataset::new(vec![tile("a", "0"), tile("a", "0")]).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
        assert!(SceneDataset::new(vec![tile("a", "0"), tile("b", "0")]).is_ok());
    }

    #[test]
    fn tile_invariants() {
        let bad = Image::filled(3, 4, 4, 1.5);
        assert!(SceneTile::new(bad, "a".into(), "0".into()).is_err());
        let gray = Image::filled(1, 4, 4, 0.5);
        assert!(matches!(
            SceneTile::new(gray, "a".into(), "0".into()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn labels_follow_sorted_scene_ids() {
        let ds = SceneDataset::new(vec![tile("b", "0"), tile("a", "0"), tile("b", "1")]).unwrap();
        assert_eq!(ds.scene_labels(), vec![1, 0, 1]);
        let (train, test) = ds.split_per_scene(0.5).unwrap();
        assert_eq!(train.len() + test.len(), 3);
    }

    #[test]
    fn mix_seed_separates_keys() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7, 9]), mix_seed(&[7, 9]));
    }
}
