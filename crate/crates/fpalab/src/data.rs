//! Labeled image batches shared by training, attacks and evaluation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dataset held fully in memory: images as one `[N,C,H,W]` tensor with
/// values in `[0,1]`, and one label byte per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(
                "dataset",
                format!("images must be [N,C,H,W], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::config(format!("class count {classes} out of range 1..=256")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C,H,W]` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gather a sub-dataset by index (copies; order preserved, repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!("index {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Dataset::new(Tensor::new(vec![indices.len(), c, h, w], data)?, labels, self.classes)
    }

    /// Zero-pad every image symmetrically to `height x width` (extra odd pixel
    /// goes to the bottom/right edge).
    pub fn pad_spatial(&self, height: usize, width: usize) -> Result<Dataset> {
        let (c, h, w) = self.image_dims();
        if height < h || width < w {
            return Err(Error::config(format!(
                "cannot pad {h}x{w} images down to {height}x{width}"
            )));
        }
        let (top, left) = ((height - h) / 2, (width - w) / 2);
        let n = self.len();
        let mut data = vec![0.0f32; n * c * height * width];
        for nc in 0..n * c {
            let src = &self.images.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * height * width..(nc + 1) * height * width];
            for row in 0..h {
                let d0 = (top + row) * width + left;
                dst[d0..d0 + w].copy_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        Dataset::new(
            Tensor::new(vec![n, c, height, width], data)?,
            self.labels.clone(),
            self.classes,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::new(
            vec![3, 1, 2, 2],
            vec![0.0, 0.1, 0.2, 0.3, 1.0, 0.9, 0.8, 0.7, 0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        Dataset::new(images, vec![0, 1, 2], 3).unwrap()
    }

    #[test]
    fn select_gathers_in_order() {
        let d = tiny();
        let s = d.select(&[2, 0]).unwrap();
        assert_eq!(s.labels(), &[2, 0]);
        assert_eq!(&s.images().data()[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!(d.select(&[3]).is_err());
    }

    #[test]
    fn pad_centers_the_image() {
        let d = tiny();
        let p = d.pad_spatial(4, 4).unwrap();
        assert_eq!(p.images().shape(), &[3, 1, 4, 4]);
        let img = &p.images().data()[..16];
        // Original 2x2 block sits at rows 1..3, cols 1..3.
        assert_eq!(img[1 * 4 + 1], 0.0);
        assert_eq!(img[1 * 4 + 2], 0.1);
        assert_eq!(img[2 * 4 + 1], 0.2);
        assert_eq!(img[2 * 4 + 2], 0.3);
        assert_eq!(img.iter().filter(|&&v| v != 0.0).count(), 3);
        assert!(d.pad_spatial(1, 1).is_err());
    }

    #[test]
    fn label_range_is_validated() {
        let images = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(Dataset::new(images, vec![5], 3).is_err());
    }
}
