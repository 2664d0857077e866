//! Pixel-CSV ingestion, normalization, train/validation split and batching.
//!
//! Labeled files have the header `label,pixel0,...,pixel783`; unlabeled
//! (test) files have `pixel0,...,pixel783`. Pixel column `x` lands at image
//! position `(x / 28, x % 28)`.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{IMAGE_SIDE, NUM_CLASSES};
use crate::tensor::Tensor;

pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const MAX_PIXEL: u32 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: {reason}")]
    Value { row: usize, reason: String },
    #[error("row {row}: label {value:?} is not a digit 0-9")]
    Label { row: usize, value: String },
    #[error("dataset has no rows")]
    Empty,
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("dataset has no labels")]
    MissingLabels,
    #[error("cannot split {available} samples into {train_count} train + {val_count} validation")]
    InvalidSplit {
        train_count: usize,
        val_count: usize,
        available: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Images `(N, 28, 28, 1)` with optional labels. Pixels hold raw 0-255
/// values until [`normalize`](LabeledDataset::normalize) is called.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor<f32>,
    labels: Option<Vec<u8>>,
    normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// One materialized batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
}

pub fn load_csv(path: impl AsRef<Path>, labeled: bool) -> Result<LabeledDataset, DataError> {
    read_csv(File::open(path)?, labeled)
}

fn expected_header(labeled: bool) -> Vec<String> {
    labeled
        .then(|| "label".to_string())
        .into_iter()
        .chain((0..PIXELS).map(|i| format!("pixel{i}")))
        .collect()
}

fn parse_int(field: &[u8]) -> Option<u32> {
    if field.is_empty() || field.len() > 9 || !field.iter().all(u8::is_ascii_digit) {
        return None;
    }
    Some(field.iter().fold(0u32, |acc, &b| acc * 10 + u32::from(b - b'0')))
}

/// Parses CSV text from any reader. Rows are numbered from 1 (the first row
/// after the header) in error messages.
pub fn read_csv(reader: impl Read, labeled: bool) -> Result<LabeledDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let into_data_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => DataError::Io(e),
        other => DataError::Header(format!("{other:?}")),
    };

    let expected = expected_header(labeled);
    let header = rdr.byte_headers().map_err(into_data_err)?.clone();
    if header.len() != expected.len() {
        return Err(DataError::Header(format!(
            "expected {} columns, found {}",
            expected.len(),
            header.len()
        )));
    }
    for (i, (got, want)) in header.iter().zip(&expected).enumerate() {
        let got = std::str::from_utf8(got).unwrap_or("").trim_start_matches('\u{feff}');
        if got != want {
            return Err(DataError::Header(format!(
                "column {} is {got:?}, expected {want:?}",
                i + 1
            )));
        }
    }

    let first_pixel = usize::from(labeled);
    let mut pixels: Vec<f32> = Vec::new();
    let mut labels = Vec::new();
    let mut record = csv::ByteRecord::new();
    let mut row = 0;
    while rdr.read_byte_record(&mut record).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => DataError::Io(e),
        other => DataError::Value {
            row: row + 1,
            reason: format!("{other:?}"),
        },
    })? {
        row += 1;
        if record.len() != expected.len() {
            return Err(DataError::Value {
                row,
                reason: format!("expected {} fields, found {}", expected.len(), record.len()),
            });
        }
        if labeled {
            let field = &record[0];
            match parse_int(field) {
                Some(l) if (l as usize) < NUM_CLASSES => labels.push(l as u8),
                _ => {
                    return Err(DataError::Label {
                        row,
                        value: String::from_utf8_lossy(field).into_owned(),
                    })
                }
            }
        }
        for (col, field) in record.iter().enumerate().skip(first_pixel) {
            match parse_int(field) {
                Some(v) if v <= MAX_PIXEL => pixels.push(v as f32),
                _ => {
                    return Err(DataError::Value {
                        row,
                        reason: format!(
                            "pixel{} value {:?} is not an integer in 0-255",
                            col - first_pixel,
                            String::from_utf8_lossy(field)
                        ),
                    })
                }
            }
        }
    }
    if row == 0 {
        return Err(DataError::Empty);
    }
    let images = Tensor::new(&[row, IMAGE_SIDE, IMAGE_SIDE, 1], pixels).expect("row count matches pixel count");
    Ok(LabeledDataset {
        images,
        labels: labeled.then_some(labels),
        normalized: false,
    })
}

impl LabeledDataset {
    /// Builds a dataset from an image tensor `(N, 28, 28, 1)`.
    pub fn new(images: Tensor<f32>, labels: Option<Vec<u8>>, normalized: bool) -> Result<Self, DataError> {
        if images.shape().len() != 4 || images.shape()[1..] != [IMAGE_SIDE, IMAGE_SIDE, 1] {
            return Err(DataError::InvalidConfig(format!(
                "images must be (N, 28, 28, 1), got {:?}",
                images.shape()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.shape()[0] {
                return Err(DataError::InvalidConfig(format!(
                    "{} labels for {} images",
                    labels.len(),
                    images.shape()[0]
                )));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES) {
                return Err(DataError::Label {
                    row: i + 1,
                    value: l.to_string(),
                });
            }
        }
        let limit = if normalized { 1.0 } else { MAX_PIXEL as f32 };
        if images.data().iter().any(|&v| !(0.0..=limit).contains(&v)) {
            return Err(DataError::InvalidConfig(format!(
                "pixel values must lie in [0, {limit}]"
            )));
        }
        Ok(Self {
            images,
            labels,
            normalized,
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

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u8], DataError> {
        self.labels().ok_or(DataError::MissingLabels)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides every pixel by 255.
    pub fn normalize(mut self) -> Result<Self, DataError> {
        if self.normalized {
            return Err(DataError::AlreadyNormalized);
        }
        let max = MAX_PIXEL as f32;
        for v in self.images.data_mut() {
            *v /= max;
        }
        self.normalized = true;
        Ok(self)
    }

    /// Image `i` as a `(28, 28, 1)` tensor.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.sample(i).expect("index within dataset")
    }

    /// Images at `indices`, stacked as `(len, 28, 28, 1)`.
    pub fn gather_images(&self, indices: &[usize]) -> Tensor<f32> {
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(&src[i * PIXELS..(i + 1) * PIXELS]);
        }
        Tensor::from_parts(vec![indices.len(), IMAGE_SIDE, IMAGE_SIDE, 1], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.gather_images(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            normalized: self.normalized,
        }
    }

    fn check_split(&self, train_count: usize, val_count: usize) -> Result<(), DataError> {
        if train_count + val_count > self.len() || train_count == 0 || val_count == 0 {
            return Err(DataError::InvalidSplit {
                train_count,
                val_count,
                available: self.len(),
            });
        }
        Ok(())
    }

    /// Seeded shuffle of all indices; the first `train_count` go to training,
    /// the next `val_count` to validation.
    pub fn split(&self, train_count: usize, val_count: usize, seed: u64) -> Result<SplitDataset, DataError> {
        self.check_split(train_count, val_count)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(self.split_at(&order, train_count, val_count))
    }

    /// Rows `0..train_count` for training, the following `val_count` for validation.
    pub fn split_sequential(&self, train_count: usize, val_count: usize) -> Result<SplitDataset, DataError> {
        self.check_split(train_count, val_count)?;
        let order: Vec<usize> = (0..self.len()).collect();
        Ok(self.split_at(&order, train_count, val_count))
    }

    fn split_at(&self, order: &[usize], train_count: usize, val_count: usize) -> SplitDataset {
        let train_indices = order[..train_count].to_vec();
        let val_indices = order[train_count..train_count + val_count].to_vec();
        SplitDataset {
            train: self.subset(&train_indices),
            val: self.subset(&val_indices),
            train_indices,
            val_indices,
        }
    }

    /// Materialized batches in [`batch_indices`] order.
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
    ) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
        let order = batch_indices(self.len(), batch_size, shuffle, seed)?;
        Ok(order.into_iter().map(move |indices| Batch {
            images: self.gather_images(&indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices,
        }))
    }
}

/// `ceil(n / batch_size)` index groups; the last may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Writes one image as a binary PGM (P5), scaling normalized images back to 0-255.
pub fn write_pgm(image: &Tensor<f32>, normalized: bool, mut out: impl Write) -> io::Result<()> {
    let (h, w) = match image.shape() {
        [h, w, 1] | [h, w] => (*h, *w),
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("not a greyscale image: {other:?}"),
            ))
        }
    };
    write!(out, "P5\n{w} {h}\n255\n")?;
    let scale = if normalized { MAX_PIXEL as f32 } else { 1.0 };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn csv_text(rows: &[(Option<u8>, Vec<u32>)], labeled: bool, newline: &str) -> String {
        let mut s = expected_header(labeled).join(",");
        s.push_str(newline);
        for (label, pixels) in rows {
            let mut fields: Vec<String> = label.iter().map(|l| l.to_string()).collect();
            fields.extend(pixels.iter().map(|p| p.to_string()));
            s.push_str(&fields.join(","));
            s.push_str(newline);
        }
        s
    }

    fn pixels(seed: u32) -> Vec<u32> {
        (0..PIXELS as u32).map(|i| (i * 31 + seed * 17) % 256).collect()
    }

    #[test]
    fn reads_two_labeled_rows() {
        let text = csv_text(&[(Some(7), pixels(1)), (Some(2), pixels(2))], true, "\n");
        let ds = read_csv(text.as_bytes(), true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels().unwrap(), &[7, 2]);
        let expected = pixels(2);
        // pixel x -> (x / 28, x % 28)
        assert_eq!(ds.images().get(&[1, 3, 5, 0]).unwrap(), expected[3 * 28 + 5] as f32);
        assert!(!ds.is_normalized());
    }

    #[test]
    fn reads_raw_pixels_back_exactly() {
        let rows: Vec<_> = (0..5).map(|i| (Some(i as u8), pixels(i))).collect();
        let ds = read_csv(csv_text(&rows, true, "\r\n").as_bytes(), true).unwrap();
        for (i, (_, px)) in rows.iter().enumerate() {
            let back: Vec<u32> = ds.image(i).data().iter().map(|&v| v as u32).collect();
            assert_eq!(&back, px);
        }
    }

    #[test]
    fn reads_unlabeled_rows() {
        let rows = vec![(None, pixels(3)); 3];
        let text = csv_text(&rows, false, "\n");
        let ds = read_csv(text.as_bytes(), false).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.labels().is_none());
        assert!(matches!(ds.require_labels(), Err(DataError::MissingLabels)));
    }

    #[test]
    fn out_of_range_pixel_names_row() {
        let mut bad = pixels(4);
        bad[100] = 300;
        let text = csv_text(&[(Some(1), pixels(1)), (Some(3), bad)], true, "\n");
        match read_csv(text.as_bytes(), true) {
            Err(DataError::Value { row, reason }) => {
                assert_eq!(row, 2);
                assert!(reason.contains("pixel100"), "{reason}");
            }
            other => panic!("expected value error, got {other:?}"),
        }
    }

    #[test]
    fn non_integer_pixel_and_bad_label() {
        let text = csv_text(&[(Some(1), pixels(1))], true, "\n").replacen(",0,", ",1.5,", 1);
        assert!(matches!(
            read_csv(text.as_bytes(), true),
            Err(DataError::Value { row: 1, .. })
        ));
        let text = csv_text(&[(Some(1), pixels(1)), (Some(12), pixels(1))], true, "\n");
        assert!(matches!(
            read_csv(text.as_bytes(), true),
            Err(DataError::Label { row: 2, .. })
        ));
    }

    #[test]
    fn header_errors() {
        let text = csv_text(&[(Some(1), pixels(1))], true, "\n");
        assert!(matches!(read_csv(text.as_bytes(), false), Err(DataError::Header(_))));
        let renamed = text.replacen("pixel5,", "px5,", 1);
        assert!(matches!(read_csv(renamed.as_bytes(), true), Err(DataError::Header(_))));
        let header_only = expected_header(true).join(",") + "\n";
        assert!(matches!(read_csv(header_only.as_bytes(), true), Err(DataError::Empty)));
    }

    #[test]
    fn short_row_rejected() {
        let mut text = csv_text(&[(Some(1), pixels(1))], true, "\n");
        text.push_str("3,0,0\n");
        assert!(matches!(
            read_csv(text.as_bytes(), true),
            Err(DataError::Value { row: 2, .. })
        ));
    }

    #[test]
    fn normalize_scales_by_255_once() {
        let mut px = pixels(0);
        px[0] = 255;
        px[1] = 0;
        let ds = read_csv(csv_text(&[(Some(0), px)], true, "\n").as_bytes(), true).unwrap();
        let raw = ds.clone();
        let ds = ds.normalize().unwrap();
        assert!(ds.is_normalized());
        assert_eq!(ds.images().data()[0], 1.0);
        assert_eq!(ds.images().data()[1], 0.0);
        assert!(ds.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (&n, &r) in ds.images().data().iter().zip(raw.images().data()) {
            assert_eq!(n * 255.0, r);
        }
        assert!(matches!(ds.normalize(), Err(DataError::AlreadyNormalized)));
    }

    #[test]
    fn every_byte_value_survives_normalization() {
        for raw in 0..=255u32 {
            let n = raw as f32 / 255.0;
            assert_eq!(n * 255.0, raw as f32, "raw {raw}");
        }
    }

    fn synthetic(n: usize) -> LabeledDataset {
        let images = Tensor::from_fn(&[n, 28, 28, 1], |i| ((i / PIXELS) % 256) as f32);
        LabeledDataset::new(images, Some((0..n).map(|i| (i % 10) as u8).collect()), false).unwrap()
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ds = synthetic(50);
        let a = ds.split(30, 15, 9).unwrap();
        let b = ds.split(30, 15, 9).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!(a.val_indices, b.val_indices);
        assert_eq!((a.train.len(), a.val.len()), (30, 15));
        let all: HashSet<_> = a.train_indices.iter().chain(&a.val_indices).collect();
        assert_eq!(all.len(), 45);
        assert_ne!(ds.split(30, 15, 10).unwrap().train_indices, a.train_indices);
        // Subsets carry the matching labels.
        for (pos, &i) in a.val_indices.iter().enumerate() {
            assert_eq!(a.val.labels().unwrap()[pos], ds.labels().unwrap()[i]);
        }
    }

    #[test]
    fn split_counts_validated() {
        let ds = synthetic(10);
        assert!(matches!(ds.split(8, 3, 0), Err(DataError::InvalidSplit { .. })));
        let seq = ds.split_sequential(6, 4).unwrap();
        assert_eq!(seq.train_indices, (0..6).collect::<Vec<_>>());
        assert_eq!(seq.val_indices, (6..10).collect::<Vec<_>>());
    }

    #[test]
    fn default_split_sizes() {
        // Counting only; no pixel data needed.
        let ds = LabeledDataset::new(Tensor::zeros(&[42_000, 28, 28, 1]), Some(vec![0; 42_000]), false).unwrap();
        let split = ds.split(33_600, 8_400, 1).unwrap();
        assert_eq!((split.train.len(), split.val.len()), (33_600, 8_400));
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(batch_indices(33_600, 64, true, 3).unwrap().len(), 525);
        let sizes: Vec<_> = batch_indices(10, 3, true, 1).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let ordered: Vec<_> = batch_indices(10, 3, false, 0).unwrap().concat();
        assert_eq!(ordered, (0..10).collect::<Vec<_>>());
        assert!(batch_indices(10, 0, false, 0).is_err());
    }

    #[test]
    fn batches_cover_dataset_once() {
        let ds = synthetic(23);
        let mut seen: Vec<(usize, u8, f32)> = Vec::new();
        for batch in ds.batches(5, true, 77).unwrap() {
            for (pos, &i) in batch.indices.iter().enumerate() {
                seen.push((
                    i,
                    batch.labels.as_ref().unwrap()[pos],
                    batch.images.sample(pos).unwrap().data()[0],
                ));
            }
        }
        seen.sort_by_key(|s| s.0);
        let expected: Vec<_> = (0..23).map(|i| (i, (i % 10) as u8, (i % 256) as f32)).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn pgm_export() {
        let img = Tensor::from_fn(&[28, 28, 1], |i| (i % 2) as f32);
        let mut buf = Vec::new();
        write_pgm(&img, true, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n28 28\n255\n"));
        assert_eq!(buf.len(), 13 + 784);
        assert_eq!(&buf[13..15], &[0, 255]);
    }
}
