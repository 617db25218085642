//! Character datasets: Omniglot ingestion, a packed on-disk cache, synthetic
//! glyphs, and preprocessing into model inputs.

mod pack;
mod preprocess;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use hfw_core::fewshot::ImageRef;
use image::GrayImage;

use crate::error::{AppError, Result};

pub use pack::{read_pack, write_pack, PACK_MAGIC, PACK_VERSION};
pub use preprocess::{
    crop, hflip, image_batch, pad, preprocess, random_crop, resize, rotate, Plane, PreprocessConfig,
    IMAGENET_MEAN, IMAGENET_STD,
};
pub use synth::synth_glyphs;

/// Sub-directories holding the two halves of the Omniglot pool.
pub const OMNIGLOT_SPLITS: [&str; 2] = ["images_background", "images_evaluation"];
pub const OMNIGLOT_URLS: [&str; 2] = [
    "https://github.com/brendenlake/omniglot/raw/master/python/images_background.zip",
    "https://github.com/brendenlake/omniglot/raw/master/python/images_evaluation.zip",
];
pub const OMNIGLOT_PACK: &str = "omniglot.pack";

#[derive(Clone, Debug, PartialEq)]
pub struct CharacterClass {
    pub name: String,
    pub images: Vec<GrayImage>,
}

/// Grayscale images grouped by class. Every class holds at least one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CharacterDataset {
    pub classes: Vec<CharacterClass>,
    /// Files that failed to decode during ingestion.
    pub skipped: Vec<String>,
}

impl CharacterDataset {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes.get(class).map_or(0, |c| c.images.len())
    }

    pub fn class_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).collect()
    }

    pub fn image(&self, r: ImageRef) -> Result<&GrayImage> {
        self.classes
            .get(r.class)
            .and_then(|c| c.images.get(r.index))
            .ok_or_else(|| AppError::Data(format!("no image {} in class {}", r.index, r.class)))
    }

    /// Smallest per-class image count.
    pub fn min_class_len(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).min().unwrap_or(0)
    }
}

fn missing_data_help(root: &Path) -> String {
    let mut msg = format!(
        "no Omniglot data under {}. Expected {}/<alphabet>/<character>/*.png and {}/... \
         Download and extract the archives:",
        root.display(),
        OMNIGLOT_SPLITS[0],
        OMNIGLOT_SPLITS[1]
    );
    for url in OMNIGLOT_URLS {
        msg.push_str("\n  ");
        msg.push_str(url);
    }
    msg
}

fn sorted_entries(dir: &Path, want_dir: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let p = e.map_err(|e| AppError::io(dir, e))?.path();
        if p.is_dir() == want_dir {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads the pooled Omniglot classes, from the pack cache when present.
pub fn load_omniglot(root: &Path) -> Result<CharacterDataset> {
    let pack = root.join(OMNIGLOT_PACK);
    if pack.is_file() {
        return Ok(read_pack(&pack)?.0);
    }
    ingest_omniglot(root)
}

/// Walks both extracted trees. One class per (alphabet, character)
/// directory, ordered by path; undecodable files are skipped and recorded.
pub fn ingest_omniglot(root: &Path) -> Result<CharacterDataset> {
    let present: Vec<PathBuf> = OMNIGLOT_SPLITS.iter().map(|s| root.join(s)).collect();
    if present.iter().any(|p| !p.is_dir()) {
        let archives: Vec<_> = OMNIGLOT_SPLITS
            .iter()
            .filter(|s| root.join(format!("{s}.zip")).is_file())
            .collect();
        let mut msg = missing_data_help(root);
        if !archives.is_empty() {
            msg.push_str("\nArchives found but not extracted; unzip them in place.");
        }
        return Err(AppError::Data(msg));
    }
    let mut ds = CharacterDataset::default();
    for split in &present {
        for alphabet in sorted_entries(split, true)? {
            for character in sorted_entries(&alphabet, true)? {
                let name = character
                    .strip_prefix(root)
                    .unwrap_or(&character)
                    .to_string_lossy()
                    .into_owned();
                let mut images = Vec::new();
                for file in sorted_entries(&character, false)? {
                    if file.extension().and_then(|e| e.to_str()) != Some("png") {
                        continue;
                    }
                    match image::open(&file) {
                        Ok(img) => images.push(img.to_luma8()),
                        Err(e) => {
                            eprintln!("warning: skipping {}: {e}", file.display());
                            ds.skipped.push(format!("{}: {e}", file.display()));
                        }
                    }
                }
                if images.is_empty() {
                    eprintln!("warning: class {name} has no readable images; dropped");
                    continue;
                }
                ds.classes.push(CharacterClass { name, images });
            }
        }
    }
    if ds.is_empty() {
        return Err(AppError::Data(missing_data_help(root)));
    }
    Ok(ds)
}

/// Mixes integers into one seed (splitmix64 finalizer over a running state).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut s: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        s = s.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        s = z ^ (z >> 31);
    }
    s
}
