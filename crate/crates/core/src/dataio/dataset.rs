use std::path::{Path, PathBuf};

use super::idx::{parse_images, parse_labels, read_file, IdxError};
use crate::model::GridSpec;

/// Images with intensities in `[0, 1]`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<f32>,
    labels: Option<Vec<u8>>,
}

impl ImageDataset {
    /// Panics if `pixels` is not a whole number of images or holds values
    /// outside `[0, 1]`, or if the label count is wrong.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>, labels: Option<Vec<u8>>) -> Self {
        let size = height * width * channels;
        assert!(size > 0 && pixels.len() % size == 0, "pixel buffer is not a whole number of images");
        assert!(
            pixels.iter().all(|v| (0.0..=1.0).contains(v)),
            "intensities must lie in [0, 1]"
        );
        if let Some(l) = &labels {
            assert_eq!(l.len(), pixels.len() / size, "label count");
        }
        ImageDataset {
            height,
            width,
            channels,
            pixels,
            labels,
        }
    }

    /// From raw bytes, dividing by 255.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8], labels: Option<Vec<u8>>) -> Self {
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(height, width, 1, pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_size()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            height: self.height,
            width: self.width,
        }
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// The first `n` images (all if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        ImageDataset {
            pixels: self.pixels[..n * self.image_size()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Paths of the uncompressed image and label files of `split` under `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}-images-idx3-ubyte", split.prefix())),
        dir.join(format!("{}-labels-idx1-ubyte", split.prefix())),
    )
}

/// Loads the first `limit` images of an MNIST split (all when `None`).
pub fn load_mnist(dir: &Path, split: Split, limit: Option<usize>) -> Result<ImageDataset, IdxError> {
    let (img_path, lbl_path) = mnist_paths(dir, split);
    let images = parse_images(&read_file(&img_path)?)?;
    let labels = parse_labels(&read_file(&lbl_path)?)?;
    let (count, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.dims[0],
        });
    }
    let n = limit.unwrap_or(count).min(count);
    Ok(ImageDataset::from_bytes(
        h,
        w,
        &images.data[..n * h * w],
        Some(labels.data[..n].to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn take_keeps_labels_aligned() {
        let ds = ImageDataset::from_bytes(1, 2, &[0, 255, 51, 102, 0, 0], Some(vec![4, 5, 6]));
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image(1), &[0.2, 0.4]);
        let head = ds.take(2);
        assert_eq!(head.len(), 2);
        assert_eq!(head.labels(), Some(&[4u8, 5][..]));
    }
}
