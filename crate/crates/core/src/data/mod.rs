//! Video records, the FAV1 dataset format, padded batches, the synthetic
//! generator and eigenvalue files.

mod eigen;
mod format;
mod synthetic;

pub use eigen::{load_eigenvalues, read_eigenvalues, save_eigenvalues, write_eigenvalues, Eigenvalues};
pub use format::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, FAV1_HEADER_LEN};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vlad::FrameBatchView;

/// One video: per-second visual and audio features plus its label set.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Sorted, distinct class ids.
    pub labels: Vec<u32>,
    /// `M×N_v` row-major.
    pub visual: Vec<f32>,
    /// `M×N_a` row-major.
    pub audio: Vec<f32>,
}

impl VideoRecord {
    pub fn frames(&self, visual_dim: usize) -> usize {
        self.visual.len() / visual_dim.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub num_classes: usize,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn new(visual_dim: usize, audio_dim: usize, num_classes: usize) -> Self {
        Self {
            visual_dim,
            audio_dim,
            num_classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks every record against the header dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(Error::Format("feature dimensions must be ≥ 1".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            self.validate_record(i, r)?;
        }
        Ok(())
    }

    fn validate_record(&self, i: usize, r: &VideoRecord) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(format!("record {i} (`{}`): {msg}", r.id)));
        if r.id.len() > u16::MAX as usize {
            return bad("id longer than 65535 bytes".into());
        }
        if r.visual.is_empty() || !r.visual.len().is_multiple_of(self.visual_dim) {
            return bad(format!("{} visual values is not a positive multiple of {}", r.visual.len(), self.visual_dim));
        }
        let m = r.visual.len() / self.visual_dim;
        if r.audio.len() != m * self.audio_dim {
            return bad(format!("{m} visual frames but {} audio values", r.audio.len()));
        }
        if let Some(&l) = r.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return bad(format!("label {l} ≥ num_classes {}", self.num_classes));
        }
        if r.labels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("labels must be sorted and distinct".into());
        }
        Ok(())
    }

    /// Label sets as `usize`, in record order.
    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        self.records.iter().map(|r| r.labels.iter().map(|&l| l as usize).collect()).collect()
    }
}

/// A padded minibatch: both streams plus multi-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub visual: FrameBatchView<T>,
    pub audio: FrameBatchView<T>,
    /// `[B, C]` multi-hot.
    pub labels: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of unmasked frames.
    pub fn valid_frames(&self) -> usize {
        self.visual.lengths.iter().sum()
    }

    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        let c = self.labels.shape()[1];
        self.labels
            .data()
            .chunks(c)
            .map(|row| (0..c).filter(|&j| row[j] == T::one()).collect())
            .collect()
    }
}

/// Pads (or truncates) every record to `max_frames` frames.
pub fn make_batch<T: Scalar>(dataset: &Dataset, indices: &[usize], max_frames: usize) -> Result<Batch<T>> {
    if indices.is_empty() {
        return Err(Error::invalid("make_batch", "empty batch"));
    }
    if max_frames == 0 {
        return Err(Error::invalid("make_batch", "max_frames must be ≥ 1"));
    }
    let (nv, na, c) = (dataset.visual_dim, dataset.audio_dim, dataset.num_classes);
    let b = indices.len();
    let mut visual = Tensor::zeros([b, max_frames, nv]);
    let mut audio = Tensor::zeros([b, max_frames, na]);
    let mut labels = Tensor::zeros([b, c]);
    let mut lengths = Vec::with_capacity(b);
    for (row, &i) in indices.iter().enumerate() {
        let r = dataset
            .records
            .get(i)
            .ok_or_else(|| Error::invalid("make_batch", format!("record index {i} out of range")))?;
        let m = r.frames(nv).min(max_frames);
        lengths.push(m);
        let dst = &mut visual.data_mut()[row * max_frames * nv..][..m * nv];
        dst.iter_mut().zip(&r.visual).for_each(|(d, &s)| *d = T::lit(s as f64));
        let dst = &mut audio.data_mut()[row * max_frames * na..][..m * na];
        dst.iter_mut().zip(&r.audio).for_each(|(d, &s)| *d = T::lit(s as f64));
        for &l in &r.labels {
            if l as usize >= c {
                return Err(Error::invalid("make_batch", format!("label {l} ≥ num_classes {c}")));
            }
            labels.data_mut()[row * c + l as usize] = T::one();
        }
    }
    Ok(Batch {
        visual: FrameBatchView::new(visual, lengths.clone())?,
        audio: FrameBatchView::new(audio, lengths)?,
        labels,
    })
}

/// Pads to the longest record in the batch, capped at `max_frames`.
pub fn make_batch_tight<T: Scalar>(dataset: &Dataset, indices: &[usize], max_frames: usize) -> Result<Batch<T>> {
    let longest = indices
        .iter()
        .filter_map(|&i| dataset.records.get(i))
        .map(|r| r.frames(dataset.visual_dim))
        .max()
        .unwrap_or(1);
    make_batch(dataset, indices, longest.clamp(1, max_frames.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let mut d = Dataset::new(2, 1, 4);
        for (i, m) in [3usize, 5, 7].into_iter().enumerate() {
            d.records.push(VideoRecord {
                id: format!("v{i}"),
                labels: vec![i as u32, 3],
                visual: (0..m * 2).map(|x| x as f32 + 1.0).collect(),
                audio: (0..m).map(|x| -(x as f32) - 1.0).collect(),
            });
        }
        d
    }

    #[test]
    fn mask_and_padding() {
        let d = tiny();
        let b: Batch<f64> = make_batch(&d, &[0], 5).unwrap();
        assert_eq!(b.visual.mask.data(), &[1., 1., 1., 0., 0.]);
        assert_eq!(&b.visual.frames.data()[6..], &[0.; 4]);
        let full: Batch<f64> = make_batch(&d, &[1], 5).unwrap();
        assert!(full.visual.mask.data().iter().all(|&m| m == 1.0));
        assert_eq!(b.labels.data(), &[1., 0., 0., 1.]);
        assert_eq!(b.label_sets(), vec![vec![0, 3]]);
    }

    #[test]
    fn valid_frames_are_clipped_lengths() {
        let d = tiny();
        let b: Batch<f32> = make_batch(&d, &[0, 1, 2], 6).unwrap();
        assert_eq!(b.valid_frames(), 3 + 5 + 6);
        let m: f32 = b.visual.mask.data().iter().sum();
        assert_eq!(m as usize, b.valid_frames());
    }

    #[test]
    fn unmasked_frames_recover_the_record() {
        let d = tiny();
        let b: Batch<f32> = make_batch(&d, &[2, 0], 9).unwrap();
        for (row, &i) in [2usize, 0].iter().enumerate() {
            let r = &d.records[i];
            let m = b.visual.lengths[row];
            assert_eq!(&b.visual.frames.data()[row * 18..row * 18 + m * 2], &r.visual[..]);
            assert_eq!(&b.audio.frames.data()[row * 9..row * 9 + m], &r.audio[..]);
        }
    }

    #[test]
    fn tight_batches_pad_to_longest() {
        let d = tiny();
        let b: Batch<f32> = make_batch_tight(&d, &[0, 1], 100).unwrap();
        assert_eq!(b.visual.max_frames(), 5);
        let b: Batch<f32> = make_batch_tight(&d, &[2], 4).unwrap();
        assert_eq!(b.visual.lengths, vec![4]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(make_batch::<f32>(&tiny(), &[], 4).is_err());
    }

    #[test]
    fn validation_catches_bad_records() {
        let mut d = tiny();
        assert!(d.validate().is_ok());
        d.records[0].labels = vec![4];
        assert!(d.validate().is_err());
        let mut d = tiny();
        d.records[1].audio.pop();
        assert!(d.validate().is_err());
        let mut d = tiny();
        d.records[2].labels = vec![1, 1];
        assert!(d.validate().is_err());
    }
}
