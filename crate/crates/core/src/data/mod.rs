//! Synthetic phantoms, image I/O and dataset manifests.

mod manifest;
mod pgm;
mod phantom;

pub use manifest::{
    generate_samples, load_manifest, load_samples, make_dataset, read_manifest, split_counts,
    write_manifest, write_manifest_lines, AnnotationBox, DatasetSpec, ManifestRecord,
};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use phantom::{make_phantom, PhantomConfig};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// A grayscale image in `[0, 1]` with shape `(1, H, W)` and its box annotations.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Tensor,
    pub boxes: Vec<BBox>,
    pub split: Split,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        pixels: Tensor,
        boxes: Vec<BBox>,
        split: Split,
    ) -> Result<Self> {
        let sample = ImageSample {
            id: id.into(),
            pixels,
            boxes,
            split,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = match *self.pixels.shape() {
            [1, h, w] => (h, w),
            ref s => {
                return Err(Error::shape(
                    "image",
                    format!("expected (1, H, W), got {s:?}"),
                ));
            }
        };
        if let Some(v) = self
            .pixels
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "image `{}` has pixel {v} outside [0, 1]",
                self.id
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid() || !b.within(w, h)) {
            return Err(Error::InvalidArgument(format!(
                "image `{}` has box {b:?} outside its {w}x{h} bounds",
                self.id
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels.data()[y * self.width() + x]
    }

    /// The pixels as a batch of one, `(1, 1, H, W)`.
    pub fn as_batch(&self) -> Tensor {
        self.pixels
            .clone()
            .reshape(vec![1, 1, self.height(), self.width()])
            .expect("same element count")
    }
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
