//! Image ingestion, preprocessing and the synthetic desk-scale dataset.

mod image;
mod netpbm;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::image::{normalize, resize_bilinear, GrayImage, Image};
pub(crate) use self::image::align_corners_taps;
pub use self::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_pgm_bytes, encode_ppm};
pub use self::synthetic::{make_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

#[derive(Clone, Debug)]
pub enum ImageSource {
    Memory(Image),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct DataItem {
    pub source: ImageSource,
    pub label: usize,
    /// Per-pixel flag for the uniform background region, when known.
    pub background: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.items[i].label
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        match &self.items[i].source {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                decode_ppm(&bytes)
                    .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
            }
        }
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Seeded Fisher–Yates shuffle of `0..n`, keeping the first `k`.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(k.min(n));
    idx
}

/// Reads a `relative_path,label` manifest; paths resolve against the
/// manifest's directory. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let (rel, label) = line
            .rsplit_once(',')
            .ok_or_else(|| err(format!("expected `path,label`, got `{line}`")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| err(format!("invalid label `{}`", label.trim())))?;
        let rel = rel.trim();
        if rel.is_empty() {
            return Err(err("empty path".into()));
        }
        items.push(DataItem {
            source: ImageSource::File(base.join(rel)),
            label,
            background: None,
        });
    }
    let num_classes = items.iter().map(|it| it.label + 1).max().unwrap_or(0);
    Ok(Dataset {
        items,
        num_classes,
        split: Split::Test,
    })
}

/// Resize-to-square then per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Preprocess {
    pub fn apply(&self, image: &Image, side: usize) -> Result<Tensor> {
        let sized = if image.height() == side && image.width() == side {
            image.clone()
        } else {
            resize_bilinear(image, side, side)?
        };
        normalize(&sized, self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "a.ppm,2\nb.ppm,0\n\nsub/c.ppm,1\n").unwrap();
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 3);
        let labels: Vec<_> = (0..3).map(|i| ds.label(i)).collect();
        assert_eq!(labels, [2, 0, 1]);
        match &ds.items[2].source {
            ImageSource::File(f) => assert_eq!(f, &dir.path().join("sub/c.ppm")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_bad_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "a.ppm,1\nb.ppm,x\n").unwrap();
        match load_manifest(&p).unwrap_err() {
            Error::Manifest { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("`x`"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn manifest_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
        assert!(matches!(
            load_manifest(&dir.path().join("nope.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn subsample_is_seeded_prefix() {
        let a = subsample_indices(100, 10, 42);
        let b = subsample_indices(100, 10, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let full = subsample_indices(100, 1000, 42);
        assert_eq!(&full[..10], &a[..]);
        let mut sorted = full.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(subsample_indices(100, 10, 43), a);
    }
}
