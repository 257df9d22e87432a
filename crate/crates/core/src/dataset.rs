//! In-memory image sets and the sources that fill them.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use thiserror::Error;

use crate::manifest::SampleRecord;
use crate::seed::{derive_seed, rng_for};
use crate::taxonomy::CLASS_NAMES;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("record {id} has no local file (uri {uri})")]
    NotLocal { id: String, uri: String },
    #[error("record {id} has state `{state}`, which is not one of the model's classes")]
    UnknownState { id: String, state: String },
    #[error("image {id} is {got:?}, expected {expected:?}×3")]
    Shape {
        id: String,
        got: Vec<usize>,
        expected: (usize, usize),
    },
}

/// Produces `H×W×3` pixel arrays in `[0, 1]` for manifest records.
pub trait ImageSource: Sync {
    fn load(&self, record: &SampleRecord, size: (usize, usize)) -> Result<Array3<f64>, DataError>;
}

/// Reads image files named by `file://` URIs or by paths relative to `root`.
#[derive(Clone, Debug, Default)]
pub struct FileImageSource {
    pub root: Option<PathBuf>,
}

impl FileImageSource {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root }
    }

    pub fn resolve(&self, record: &SampleRecord) -> Result<PathBuf, DataError> {
        let path = record.local_path().ok_or_else(|| DataError::NotLocal {
            id: record.id.clone(),
            uri: record.uri.clone(),
        })?;
        match &self.root {
            Some(root) if path.is_relative() => Ok(root.join(path)),
            _ => Ok(path),
        }
    }
}

impl ImageSource for FileImageSource {
    fn load(&self, record: &SampleRecord, size: (usize, usize)) -> Result<Array3<f64>, DataError> {
        load_image(&self.resolve(record)?, size)
    }
}

/// Decodes and resizes an image file (bilinear) to `size = (h, w)`.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<Array3<f64>, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes, size).map_err(|message| DataError::Decode {
        path: path.display().to_string(),
        message,
    })
}

pub fn decode_image(bytes: &[u8], size: (usize, usize)) -> Result<Array3<f64>, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?.to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
    };
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Encodes an `H×W×3` array in `[0, 1]` as PNG.
pub fn encode_png(image: ArrayView3<f64>) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

const PALETTE: [[f64; 3]; 11] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.85, 0.25, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.50, 0.30, 0.10],
    [0.55, 0.55, 0.55],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.10],
];

/// Procedural texture for `class`; `index` and `seed` pick the variant.
///
/// Classes differ in base colour and in pattern (horizontal stripes,
/// vertical stripes, checkerboard, rings) and pattern frequency.
pub fn synthetic_texture(class: usize, index: u64, size: (usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = rng_for(seed, &[b"texture", &(class as u64).to_le_bytes(), &index.to_le_bytes()]);
    let base = PALETTE[class % PALETTE.len()];
    let freq = 1.0 + (class / 4) as f64;
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let gain: f64 = 0.9 + 0.2 * rng.random::<f64>();
    let (h, w) = size;
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let t = std::f64::consts::TAU * freq;
            let pattern = match class % 4 {
                0 => (t * v + phase).sin(),
                1 => (t * u + phase).sin(),
                2 => (t * u + phase).sin() * (t * v).sin(),
                _ => (t * ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() * 2.0 + phase).sin(),
            };
            for c in 0..3 {
                let noise = (rng.random::<f64>() - 0.5) * 0.06;
                out[[y, x, c]] = (base[c] * gain * (0.7 + 0.3 * pattern) + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Renders textures keyed by the record's state and id instead of reading files.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticImageSource {
    pub seed: u64,
}

impl ImageSource for SyntheticImageSource {
    fn load(&self, record: &SampleRecord, size: (usize, usize)) -> Result<Array3<f64>, DataError> {
        let class = CLASS_NAMES
            .iter()
            .position(|c| *c == record.state)
            .ok_or_else(|| DataError::UnknownState {
                id: record.id.clone(),
                state: record.state.clone(),
            })?;
        let index = derive_seed(0, &[record.id.as_bytes()]);
        Ok(synthetic_texture(class, index, size, self.seed))
    }
}

/// Images stacked `N×H×W×3` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub class_names: Vec<String>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.images.dim();
        (h, w)
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn select(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// `per_class` textures for each of `class_count` classes.
    pub fn synthetic(class_count: usize, per_class: usize, size: (usize, usize), seed: u64) -> TrainingSet {
        let n = class_count * per_class;
        let (h, w) = size;
        let mut images = Array4::<f64>::zeros((n, h, w, 3));
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for c in 0..class_count {
            for i in 0..per_class {
                let row = c * per_class + i;
                images
                    .slice_mut(s![row, .., .., ..])
                    .assign(&synthetic_texture(c, i as u64, size, seed));
                labels.push(c);
                ids.push(format!("texture-{c:02}-{i:03}"));
            }
        }
        let class_names = (0..class_count)
            .map(|c| {
                CLASS_NAMES
                    .get(c)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class{c}"))
            })
            .collect();
        TrainingSet {
            images,
            labels,
            ids,
            class_names,
        }
    }

    /// Loads `records` with `source`. Records with unreadable images are
    /// skipped and returned alongside the set; unknown states are errors.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a SampleRecord>,
        class_names: &[String],
        source: &dyn ImageSource,
        size: (usize, usize),
    ) -> Result<(TrainingSet, Vec<(String, DataError)>), DataError> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        let mut skipped = Vec::new();
        for record in records {
            let label = class_names
                .iter()
                .position(|c| *c == record.state)
                .ok_or_else(|| DataError::UnknownState {
                    id: record.id.clone(),
                    state: record.state.clone(),
                })?;
            match source.load(record, size) {
                Ok(img) if img.dim() == (size.0, size.1, 3) => {
                    pixels.extend(img.iter().copied());
                    labels.push(label);
                    ids.push(record.id.clone());
                }
                Ok(img) => skipped.push((
                    record.id.clone(),
                    DataError::Shape {
                        id: record.id.clone(),
                        got: img.shape().to_vec(),
                        expected: size,
                    },
                )),
                Err(e) => skipped.push((record.id.clone(), e)),
            }
        }
        let images = Array4::from_shape_vec((labels.len(), size.0, size.1, 3), pixels).expect("consistent sizes");
        Ok((
            TrainingSet {
                images,
                labels,
                ids,
                class_names: class_names.to_vec(),
            },
            skipped,
        ))
    }
}
