//! Access to pristine images by identifier.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

pub trait ImageSource: Sync {
    /// Identifiers in a stable order.
    fn image_ids(&self) -> Vec<String>;
    fn load(&self, image_id: &str) -> Result<ImageBuffer>;

    fn contains(&self, image_id: &str) -> bool {
        self.image_ids().iter().any(|id| id == image_id)
    }
}

/// Images in a directory, identified by file name.
#[derive(Debug, Clone)]
pub struct DirCorpus {
    dir: PathBuf,
    ids: Vec<String>,
}

impl DirCorpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if path.is_file() && is_image {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    ids.push(name.to_string());
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!("no images found in {}", dir.display())));
        }
        ids.sort();
        Ok(Self {
            dir: dir.to_path_buf(),
            ids,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, image_id: &str) -> PathBuf {
        self.dir.join(image_id)
    }
}

impl ImageSource for DirCorpus {
    fn image_ids(&self) -> Vec<String> {
        self.ids.clone()
    }

    fn load(&self, image_id: &str) -> Result<ImageBuffer> {
        if !self.ids.iter().any(|id| id == image_id) {
            return Err(Error::MissingArtifact(format!(
                "image `{image_id}` not found in {}",
                self.dir.display()
            )));
        }
        ImageBuffer::load(&self.path_of(image_id))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryCorpus {
    images: BTreeMap<String, ImageBuffer>,
}

impl MemoryCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, img: ImageBuffer) {
        self.images.insert(image_id.into(), img);
    }
}

impl FromIterator<(String, ImageBuffer)> for MemoryCorpus {
    fn from_iter<T: IntoIterator<Item = (String, ImageBuffer)>>(iter: T) -> Self {
        Self {
            images: iter.into_iter().collect(),
        }
    }
}

impl ImageSource for MemoryCorpus {
    fn image_ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    fn load(&self, image_id: &str) -> Result<ImageBuffer> {
        self.images
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact(format!("image `{image_id}` not in corpus")))
    }

    fn contains(&self, image_id: &str) -> bool {
        self.images.contains_key(image_id)
    }
}

/// Images addressed by paths relative to a root directory (absolute paths
/// are used as given).
#[derive(Debug, Clone)]
pub struct PathCorpus {
    root: PathBuf,
    ids: Vec<String>,
}

impl PathCorpus {
    pub fn new(root: &Path, ids: Vec<String>) -> Self {
        Self {
            root: root.to_path_buf(),
            ids,
        }
    }
}

impl ImageSource for PathCorpus {
    fn image_ids(&self) -> Vec<String> {
        self.ids.clone()
    }

    fn load(&self, image_id: &str) -> Result<ImageBuffer> {
        let path = crate::eval::dataset::resolve(&self.root, image_id);
        if !path.is_file() {
            return Err(Error::MissingArtifact(format!("image {} not found", path.display())));
        }
        ImageBuffer::load(&path)
    }
}
