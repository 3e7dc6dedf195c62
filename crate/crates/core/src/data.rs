//! Dataset preparation: patch extraction, degradation, manifests, splits.
//!
//! `prepare` tiles every readable source image into non-overlapping,
//! CFA-aligned patches, stores the clean patch as 16-bit RGB PNG and its
//! degraded mosaic as 16-bit grayscale PNG, and writes a JSON-lines manifest
//! (header line, then one record per line, sorted by record id). Noise
//! levels and seeds derive from the global seed and the record id alone, so
//! the same sources and seed always produce byte-identical outputs no matter
//! the traversal order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfa::{degrade, CfaPattern, MosaicImage, NoiseSpec};
use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::util::{derive_seed, rng_from_seed};

pub const DEFAULT_PATCH: usize = 128;
/// Training noise is drawn uniformly from `[0, SIGMA_MAX]` (8-bit scale).
pub const SIGMA_MAX: f64 = 25.0;
/// Evaluation runs at these fixed noise levels.
pub const EVAL_SIGMAS: [f64; 3] = [5.0, 15.0, 25.0];

/// One prepared patch: where it came from, how it was degraded, and where
/// its files live (paths relative to the manifest's directory).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub id: String,
    pub source: String,
    /// Crop offset as `[top, left]`, always a multiple of the CFA tile.
    pub offset: [usize; 2],
    /// Whether the clean patch was mirrored before mosaicking.
    pub flipped: bool,
    pub sigma: f64,
    pub seed: u64,
    pub clean: String,
    pub mosaic: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub pattern: CfaPattern,
    pub patch_size: usize,
    pub seed: u64,
    pub split: String,
    pub records: usize,
    /// Source images skipped because they were unreadable or undersized.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
}

impl DatasetManifest {
    /// Serializes as JSON lines: the header first, then records in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let head = serde_json::to_string(&self.header)
            .map_err(|e| Error::Config(format!("manifest header: {e}")))?;
        out.push_str(&head);
        out.push('\n');
        for record in &self.records {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::Config(format!("manifest record: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let head_line = lines
            .next()
            .ok_or_else(|| Error::bad_file(path, "empty manifest"))?;
        let header: ManifestHeader = serde_json::from_str(head_line)
            .map_err(|e| Error::bad_file(path, format!("manifest header: {e}")))?;
        let mut records = Vec::with_capacity(header.records);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: PatchRecord = serde_json::from_str(line)
                .map_err(|e| Error::bad_file(path, format!("record on line {}: {e}", i + 2)))?;
            records.push(record);
        }
        if records.len() != header.records {
            return Err(Error::bad_file(
                path,
                format!(
                    "header promises {} records, file holds {}",
                    header.records,
                    records.len()
                ),
            ));
        }
        let tile = header.pattern.tile_size();
        for record in &records {
            if record.offset[0] % tile != 0 || record.offset[1] % tile != 0 {
                return Err(Error::bad_file(
                    path,
                    format!("record {} offset is not tile-aligned", record.id),
                ));
            }
        }
        Ok(DatasetManifest { header, records })
    }
}

#[derive(Clone, Debug)]
pub struct PrepareConfig {
    pub pattern: CfaPattern,
    pub patch_size: usize,
    pub seed: u64,
    /// Also emit a horizontally mirrored variant of every patch.
    pub augment_flip: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            pattern: CfaPattern::Quad,
            patch_size: DEFAULT_PATCH,
            seed: 0,
            augment_flip: false,
        }
    }
}

fn record_id(source: &str, top: usize, left: usize, flipped: bool) -> String {
    let mut id = format!("{source}_y{top:05}_x{left:05}");
    if flipped {
        id.push_str("_f");
    }
    id
}

/// Draws the noise level and seed for a record from the global seed and the
/// record id only.
fn degradation_for(global_seed: u64, id: &str) -> (f64, u64) {
    let mut rng = rng_from_seed(derive_seed(global_seed, id));
    let sigma = rng.random_range(0.0..=SIGMA_MAX);
    let seed = rng.random::<u64>();
    (sigma, seed)
}

/// Re-creates a record's degraded mosaic from its clean patch.
pub fn degrade_patch(
    record: &PatchRecord,
    pattern: CfaPattern,
    clean: &RgbImage,
) -> Result<MosaicImage> {
    degrade(
        clean,
        pattern,
        &NoiseSpec {
            sigma: record.sigma,
            seed: record.seed,
        },
    )
}

fn listed_sources(src: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Tiles every readable image under `src` into degraded training pairs under
/// `out` and writes `out/manifest.jsonl`.
pub fn prepare(src: &Path, out: &Path, cfg: &PrepareConfig) -> Result<DatasetManifest> {
    let tile = cfg.pattern.tile_size();
    if cfg.patch_size == 0 || cfg.patch_size % tile != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {} is not a positive multiple of the {} tile ({tile})",
            cfg.patch_size,
            cfg.pattern.name()
        )));
    }
    let sources = listed_sources(src)?;
    if sources.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .png/.jpg sources under {}",
            src.display()
        )));
    }
    let clean_dir = out.join("clean");
    let mosaic_dir = out.join("mosaic");
    std::fs::create_dir_all(&clean_dir).map_err(|e| Error::io(&clean_dir, e))?;
    std::fs::create_dir_all(&mosaic_dir).map_err(|e| Error::io(&mosaic_dir, e))?;

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for path in &sources {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let image = match RgbImage::load_png(path) {
            Ok(img) => img,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if image.width() < cfg.patch_size || image.height() < cfg.patch_size {
            skipped += 1;
            continue;
        }
        let per_row = image.width() / cfg.patch_size;
        let per_col = image.height() / cfg.patch_size;
        for ty in 0..per_col {
            for tx in 0..per_row {
                let (top, left) = (ty * cfg.patch_size, tx * cfg.patch_size);
                let clean = image.crop(top, left, cfg.patch_size, cfg.patch_size)?;
                let variants: &[bool] = if cfg.augment_flip {
                    &[false, true]
                } else {
                    &[false]
                };
                for &flipped in variants {
                    let patch = if flipped {
                        clean.flip_horizontal()
                    } else {
                        clean.clone()
                    };
                    let id = record_id(&stem, top, left, flipped);
                    let (sigma, seed) = degradation_for(cfg.seed, &id);
                    let record = PatchRecord {
                        id: id.clone(),
                        source: stem.clone(),
                        offset: [top, left],
                        flipped,
                        sigma,
                        seed,
                        clean: format!("clean/{id}.png"),
                        mosaic: format!("mosaic/{id}.png"),
                    };
                    patch.save_png16(&out.join(&record.clean))?;
                    let mosaic = degrade_patch(&record, cfg.pattern, &patch)?;
                    mosaic.save(&out.join(&record.mosaic))?;
                    records.push(record);
                }
            }
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = DatasetManifest {
        header: ManifestHeader {
            pattern: cfg.pattern,
            patch_size: cfg.patch_size,
            seed: cfg.seed,
            split: "all".into(),
            records: records.len(),
            skipped,
        },
        records,
    };
    manifest.save(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Splits a manifest by source image (never splitting one source across
/// sides). The shuffle is deterministic in `seed`.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside [0,1]"
        )));
    }
    let mut sources: Vec<&str> = manifest.records.iter().map(|r| r.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    if sources.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two source images to split".into(),
        ));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "split"));
    sources.shuffle(&mut rng);
    let train_count = ((sources.len() as f64) * train_fraction).round() as usize;
    if train_count == 0 || train_count == sources.len() {
        return Err(Error::InvalidArgument(format!(
            "fraction {train_fraction} leaves one side of the split empty"
        )));
    }
    let train_sources: std::collections::BTreeSet<&str> =
        sources[..train_count].iter().copied().collect();

    let take = |keep: bool, tag: &str| -> DatasetManifest {
        let records: Vec<PatchRecord> = manifest
            .records
            .iter()
            .filter(|r| train_sources.contains(r.source.as_str()) == keep)
            .cloned()
            .collect();
        DatasetManifest {
            header: ManifestHeader {
                split: tag.into(),
                records: records.len(),
                ..manifest.header.clone()
            },
            records,
        }
    };
    Ok((take(true, "train"), take(false, "val")))
}

/// A record's clean patch and packed network input, loaded from disk.
pub struct LoadedPair {
    pub clean: RgbImage,
    pub mosaic: MosaicImage,
}

/// Loads the files behind a record, resolving paths against the manifest
/// directory.
pub fn load_pair(base: &Path, record: &PatchRecord) -> Result<LoadedPair> {
    Ok(LoadedPair {
        clean: RgbImage::load_png(&base.join(&record.clean))?,
        mosaic: MosaicImage::load(&base.join(&record.mosaic))?,
    })
}
