//! On-disk tile layout: `<root>/<scene_id>/<tile_id>.png` plus a JSON-lines
//! manifest with one `{"file", "scene_id", "tile_id"}` record per tile.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneDataset, SceneId, SceneTile, TileId};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path relative to the dataset root.
    pub file: String,
    pub scene_id: SceneId,
    pub tile_id: TileId,
}

/// Loads every tile listed in `manifest`; relative file paths resolve against `root`.
pub fn load_tile_directory(root: &Path, manifest: &Path) -> Result<SceneDataset> {
    let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut tiles = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Manifest(format!("{}:{}: {e}", manifest.display(), lineno + 1))
        })?;
        let pixels = Image::load_png(&root.join(&rec.file))?;
        tiles.push(SceneTile::new(pixels, rec.scene_id, rec.tile_id)?);
    }
    SceneDataset::new(tiles)
}

/// Writes the dataset as PNG tiles plus manifest. Returns the manifest path.
pub fn write_tile_directory(dataset: &SceneDataset, root: &Path) -> Result<std::path::PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(f);
    for tile in dataset.tiles() {
        let scene_dir = root.join(&tile.scene_id.0);
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let rel = format!("{}/{}.png", tile.scene_id, tile.tile_id);
        tile.pixels.save_png(&root.join(&rel))?;
        let rec = ManifestRecord {
            file: rel,
            scene_id: tile.scene_id.clone(),
            tile_id: tile.tile_id.clone(),
        };
        let line = serde_json::to_string(&rec).expect("manifest records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}
