//! Dataset index over the on-disk layout
//!
//! ```text
//! root/classes.txt                  "<class_id> <name>" per line
//! root/images/<image_id>.ppm        binary P6
//! root/masks/<class_id>/<image_id>.pgm   binary P5, values 0 or 255
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{mask_from_pgm, mask_to_pgm, RgbImage};
use super::synthetic::{random_scene, render, Jitter, SyntheticConfig};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Disk(PathBuf),
    Memory(Vec<RgbImage>),
}

/// Maps classes to the images that contain them. Masks are held in memory;
/// on-disk images are read on access.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    classes: BTreeMap<u32, String>,
    image_ids: Vec<String>,
    masks: Vec<BTreeMap<u32, BinaryMask>>,
    by_class: BTreeMap<u32, Vec<usize>>,
    storage: Storage,
}

/// One image with its per-class masks, for building an in-memory index.
#[derive(Clone, Debug)]
pub struct IndexEntry {
    pub id: String,
    pub image: RgbImage,
    pub masks: Vec<(u32, BinaryMask)>,
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl DatasetIndex {
    pub fn empty() -> Self {
        Self {
            classes: BTreeMap::new(),
            image_ids: Vec::new(),
            masks: Vec::new(),
            by_class: BTreeMap::new(),
            storage: Storage::Memory(Vec::new()),
        }
    }

    fn build(
        classes: BTreeMap<u32, String>,
        image_ids: Vec<String>,
        masks: Vec<BTreeMap<u32, BinaryMask>>,
        storage: Storage,
    ) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> =
            classes.keys().map(|&c| (c, Vec::new())).collect();
        for (i, m) in masks.iter().enumerate() {
            for &c in m.keys() {
                by_class.entry(c).or_default().push(i);
            }
        }
        Self {
            classes,
            image_ids,
            masks,
            by_class,
            storage,
        }
    }

    /// Builds an index from in-memory entries. Empty masks are dropped, so a
    /// class counts as present only where it has foreground pixels.
    pub fn from_entries(classes: BTreeMap<u32, String>, entries: Vec<IndexEntry>) -> Result<Self> {
        let mut ids = Vec::with_capacity(entries.len());
        let mut images = Vec::with_capacity(entries.len());
        let mut masks = Vec::with_capacity(entries.len());
        for e in entries {
            if ids.contains(&e.id) {
                return Err(Error::Config(format!("duplicate image id `{}`", e.id)));
            }
            let mut m = BTreeMap::new();
            for (c, mask) in e.masks {
                if !classes.contains_key(&c) {
                    return Err(Error::Config(format!(
                        "image `{}` uses unlisted class {c}",
                        e.id
                    )));
                }
                if mask.dims() != (e.image.height(), e.image.width()) {
                    return Err(Error::shape(format!(
                        "mask of class {c} does not match image `{}`",
                        e.id
                    )));
                }
                if !mask.is_empty() {
                    m.insert(c, mask);
                }
            }
            ids.push(e.id);
            images.push(e.image);
            masks.push(m);
        }
        Ok(Self::build(classes, ids, masks, Storage::Memory(images)))
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn classes(&self) -> &BTreeMap<u32, String> {
        &self.classes
    }

    pub fn image_id(&self, image: usize) -> &str {
        &self.image_ids[image]
    }

    /// Images whose mask for `class_id` is non-empty.
    pub fn images_of(&self, class_id: u32) -> &[usize] {
        self.by_class
            .get(&class_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Classes with foreground in `image`.
    pub fn classes_in(&self, image: usize) -> impl Iterator<Item = u32> + '_ {
        self.masks[image].keys().copied()
    }

    pub fn mask(&self, image: usize, class_id: u32) -> Option<&BinaryMask> {
        self.masks[image].get(&class_id)
    }

    pub fn image(&self, image: usize) -> Result<RgbImage> {
        match &self.storage {
            Storage::Memory(images) => Ok(images[image].clone()),
            Storage::Disk(root) => RgbImage::read_ppm(&image_path(root, &self.image_ids[image])),
        }
    }
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.ppm"))
}

fn read_dir_sorted(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn parse_classes(path: &Path) -> Result<BTreeMap<u32, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut classes = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let id: u32 = id
            .parse()
            .map_err(|_| ingestion(path, format!("line {}: bad class id `{id}`", n + 1)))?;
        if classes.insert(id, name.trim().to_string()).is_some() {
            return Err(ingestion(
                path,
                format!("line {}: class {id} listed twice", n + 1),
            ));
        }
    }
    Ok(classes)
}

/// Reads a dataset directory. An empty directory yields an empty index.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(ingestion(root, "dataset root is not a directory"));
    }
    let images_dir = root.join("images");
    let image_ids = if images_dir.is_dir() {
        read_dir_sorted(&images_dir, "ppm")?
    } else {
        Vec::new()
    };
    let classes_path = root.join("classes.txt");
    if !classes_path.exists() {
        if image_ids.is_empty() {
            return Ok(DatasetIndex::build(
                BTreeMap::new(),
                Vec::new(),
                Vec::new(),
                Storage::Disk(root.into()),
            ));
        }
        return Err(ingestion(&classes_path, "classes.txt missing"));
    }
    let classes = parse_classes(&classes_path)?;
    let slot: BTreeMap<&str, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut masks: Vec<BTreeMap<u32, BinaryMask>> = vec![BTreeMap::new(); image_ids.len()];
    let mut has_file = vec![false; image_ids.len()];
    for &class_id in classes.keys() {
        let dir = root.join("masks").join(class_id.to_string());
        if !dir.is_dir() {
            return Err(ingestion(
                &dir,
                format!("mask directory for listed class {class_id} missing"),
            ));
        }
        for id in read_dir_sorted(&dir, "pgm")? {
            let path = dir.join(format!("{id}.pgm"));
            let &i = slot.get(id.as_str()).ok_or_else(|| {
                ingestion(
                    &image_path(root, &id),
                    format!("image for mask {} missing", path.display()),
                )
            })?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mask = mask_from_pgm(&bytes, &path)?;
            has_file[i] = true;
            if !mask.is_empty() {
                masks[i].insert(class_id, mask);
            }
        }
    }
    if let Some(i) = has_file.iter().position(|h| !h) {
        return Err(ingestion(
            &image_path(root, &image_ids[i]),
            "listed image has no mask in any class directory",
        ));
    }
    Ok(DatasetIndex::build(
        classes,
        image_ids,
        masks,
        Storage::Disk(root.into()),
    ))
}

/// Writes `index` in the directory format `load_dataset` reads.
pub fn write_dataset(index: &DatasetIndex, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut listing = String::new();
    for (id, name) in &index.classes {
        listing.push_str(&format!("{id} {name}\n"));
        let dir = root.join("masks").join(id.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let path = root.join("classes.txt");
    fs::write(&path, listing).map_err(|e| Error::io(&path, e))?;
    for (i, id) in index.image_ids.iter().enumerate() {
        index.image(i)?.write_ppm(&image_path(root, id))?;
        for (class_id, mask) in &index.masks[i] {
            let path = root
                .join("masks")
                .join(class_id.to_string())
                .join(format!("{id}.pgm"));
            fs::write(&path, mask_to_pgm(mask)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// In-memory synthetic dataset with `per_class` scenes targeting each class.
/// Distractor objects contribute masks for their own classes.
pub fn synthesize_dataset(cfg: &SyntheticConfig, per_class: usize) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut classes = BTreeMap::new();
    for id in cfg.class_ids() {
        classes.insert(id, cfg.class_name(id)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(per_class * classes.len());
    for &class_id in classes.keys() {
        for _ in 0..per_class {
            let frame = render(&random_scene(cfg, class_id, &mut rng)?, Jitter::IDENTITY);
            let masks = classes
                .keys()
                .map(|&c| (c, frame.class_mask(c)))
                .filter(|(_, m)| !m.is_empty())
                .collect();
            entries.push(IndexEntry {
                id: format!("{:06}", entries.len()),
                image: frame.image,
                masks,
            });
        }
    }
    DatasetIndex::from_entries(classes, entries)
}
