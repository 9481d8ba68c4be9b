use crate::autodiff::Tensor;
use crate::data::SeededRng;
use crate::error::{Error, Result};

/// Image collection with pixels in [-1, 1], optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    /// `images` must be `[n, c, h, w]` in [-1, 1]; labels, when given, one per
    /// image and below `num_classes`.
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if let Some(i) = images.data().iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "pixel {i} = {} outside [-1, 1]",
                images.data()[i]
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::Contract(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
            if let Some(bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(Error::Contract(format!(
                    "label {bad} outside 0..{num_classes}"
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let item: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("index {i} out of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * item..(i + 1) * item]);
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect())
    }

    /// First `n` items and the rest.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Contract(format!(
                "split point {n} must be inside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let make = |idx: &[usize], tag: &str| {
            Dataset::new(
                format!("{}[{tag}]", self.name),
                self.gather(idx)?,
                self.gather_labels(idx),
                self.num_classes,
            )
        };
        Ok((make(&head, "head")?, make(&tail, "tail")?))
    }
}

/// Shuffled-epoch minibatch stream over a dataset.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64, stream: u64) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(Error::Config("batch size and dataset must be non-empty".into()));
        }
        let mut s = BatchSampler {
            rng: SeededRng::new(seed, stream),
            order: (0..len).collect(),
            cursor: len,
            batch,
        };
        s.reshuffle_if_needed();
        Ok(s)
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
    }

    /// Indices of the next batch (a batch never straddles two epochs).
    pub fn next_indices(&mut self) -> Vec<usize> {
        self.reshuffle_if_needed();
        let take = self.batch.min(self.order.len());
        let idx = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let imgs = Tensor::new(vec![4, 1, 2, 2], (0..16).map(|i| i as f32 / 16.0).collect()).unwrap();
        Dataset::new("tiny", imgs, Some(vec![0, 1, 2, 0]), 3).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let imgs = Tensor::filled(&[1, 1, 2, 2], 1.5).unwrap();
        assert!(Dataset::new("x", imgs, None, 0).is_err());
        let imgs = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
        assert!(Dataset::new("x", imgs.clone(), Some(vec![0]), 2).is_err());
        assert!(Dataset::new("x", imgs, Some(vec![0, 2]), 2).is_err());
    }

    #[test]
    fn gather_and_split() {
        let d = tiny();
        let b = d.gather(&[3, 1]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.data()[0], 12.0 / 16.0);
        assert_eq!(d.gather_labels(&[3, 1]), Some(vec![0, 1]));
        let (a, rest) = d.split(1).unwrap();
        assert_eq!((a.len(), rest.len()), (1, 3));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(6, 3, 1, 0).unwrap();
        let mut seen: Vec<usize> = s.next_indices();
        seen.extend(s.next_indices());
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }
}
