//! Corpus ingestion, preprocessing, augmentation and leak-free splits.
//!
//! Images are grayscale, stored NCHW with values in [-1, 1] (tanh range).
//! All randomness is taken from explicit RNG state so every consumer is a
//! pure function of (input, seed).

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::RngExt;
use rand_chacha::ChaCha20Rng;

use crate::error::{PipelineError, Result};

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Fill value for letterbox padding and translation gaps: black in tanh
/// range, matching dark corpus borders.
pub const PAD_VALUE: f32 = -1.0;

/// Batch of grayscale images, NCHW with one channel, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub source_ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>, source_ids: Vec<String>) -> Self {
        let (n, c, h, w) = pixels.dim();
        assert_eq!(c, 1, "batches are single-channel grayscale");
        assert_eq!(h, w, "images must be square, got {h}x{w}");
        assert_eq!(n, source_ids.len(), "one source id per image");
        debug_assert!(
            pixels.iter().all(|&v| (-1.0..=1.0).contains(&v)),
            "pixel values must lie in [-1, 1]"
        );
        ImageBatch { pixels, source_ids }
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// 2-d view of one image.
    pub fn image(&self, i: usize) -> ArrayView2<'_, f32> {
        self.pixels
            .index_axis(Axis(0), i)
            .index_axis_move(Axis(0), 0)
    }

    /// Gather a sub-batch by indices (duplicates allowed).
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let (_, _, h, w) = self.pixels.dim();
        let mut pixels = Array4::zeros((indices.len(), 1, h, w));
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            pixels
                .index_axis_mut(Axis(0), row)
                .assign(&self.pixels.index_axis(Axis(0), i));
            ids.push(self.source_ids[i].clone());
        }
        ImageBatch {
            pixels,
            source_ids: ids,
        }
    }

    pub fn from_images(images: &[Array2<f32>], ids: Vec<String>) -> Self {
        assert!(!images.is_empty(), "empty image list");
        let (h, w) = images[0].dim();
        let mut pixels = Array4::zeros((images.len(), 1, h, w));
        for (i, im) in images.iter().enumerate() {
            assert_eq!(im.dim(), (h, w), "all images must share a shape");
            pixels
                .index_axis_mut(Axis(0), i)
                .index_axis_move(Axis(0), 0)
                .assign(im);
        }
        ImageBatch::new(pixels, ids)
    }

    /// Per-pixel mean image across the batch.
    pub fn mean_image(&self) -> Array2<f32> {
        let (n, _, h, w) = self.pixels.dim();
        let mut acc = ndarray::Array2::<f64>::zeros((h, w));
        for i in 0..n {
            acc.zip_mut_with(&self.image(i), |a, &b| *a += b as f64);
        }
        acc.mapv(|v| (v / n as f64) as f32)
    }
}

/// One labelled example: a group (patient) id, an image reference and the
/// raw plus scaled target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub group_id: String,
    pub image_ref: String,
    pub raw_value: f64,
    pub scaled_target: f64,
}

/// Grouped split request: `ratio` in whole parts (train, held-out).
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub ratio: (u32, u32),
    pub seed: u64,
}

// ---- IDX ----

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PipelineError::io(path, e))
}

/// Read an IDX image file (magic 0x00000803): n x h x w unsigned bytes,
/// mapped to [-1, 1] via v/127.5 - 1.
pub fn load_idx_images(path: &Path) -> Result<ImageBatch> {
    let bytes = read_all(path)?;
    let mut r = std::io::Cursor::new(bytes.as_slice());
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| PipelineError::format(path, "truncated IDX header"))?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(PipelineError::format(
            path,
            format!("bad IDX magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x} (images)"),
        ));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let h = r.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let w = r.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let mut raw = vec![0u8; n * h * w];
    r.read_exact(&mut raw).map_err(|_| {
        PipelineError::format(
            path,
            format!("payload shorter than header promises ({n} x {h} x {w})"),
        )
    })?;
    let pixels = Array4::from_shape_vec(
        (n, 1, h, w),
        raw.iter().map(|&b| b as f32 / 127.5 - 1.0).collect(),
    )
    .expect("shape arithmetic");
    let ids = (0..n).map(|i| format!("idx:{i}")).collect();
    Ok(ImageBatch { pixels, source_ids: ids })
}

/// Read an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_all(path)?;
    let mut r = std::io::Cursor::new(bytes.as_slice());
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| PipelineError::format(path, "truncated IDX header"))?;
    if magic != IDX_MAGIC_LABELS {
        return Err(PipelineError::format(
            path,
            format!("bad IDX magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x} (labels)"),
        ));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated(path))? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .map_err(|_| PipelineError::format(path, format!("payload shorter than {n} labels")))?;
    Ok(raw)
}

fn truncated(path: &Path) -> PipelineError {
    PipelineError::format(path, "truncated IDX header")
}

/// Serialize a batch back to IDX image bytes; inverts `load_idx_images`
/// byte-exactly on its own output.
pub fn idx_image_bytes(batch: &ImageBatch) -> Vec<u8> {
    let (n, _, h, w) = batch.pixels.dim();
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in batch.pixels.iter() {
        out.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
    }
    out
}

// ---- geometry ----

/// Bilinear resize (half-pixel-center convention).
fn resize_bilinear(src: &ArrayView2<'_, f32>, th: usize, tw: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::zeros((th, tw));
    let sy = h as f32 / th as f32;
    let sx = w as f32 / tw as f32;
    for oy in 0..th {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..tw {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Scale into a `side`-square canvas preserving aspect ratio; the shorter
/// dimension is centered with `pad_value` fill, extra row/column on the
/// bottom/right when the padding is odd.
pub fn letterbox(image: &ArrayView2<'_, f32>, side: usize, pad_value: f32) -> Array2<f32> {
    assert!(side > 0, "letterbox side must be positive");
    let (h, w) = image.dim();
    assert!(h > 0 && w > 0, "letterbox input must be nonempty");
    let (th, tw) = if h >= w {
        (side, ((w * side + h / 2) / h).max(1))
    } else {
        (((h * side + w / 2) / w).max(1), side)
    };
    let content = resize_bilinear(image, th, tw);
    let mut out = Array2::from_elem((side, side), pad_value);
    let top = (side - th) / 2;
    let left = (side - tw) / 2;
    out.slice_mut(ndarray::s![top..top + th, left..left + tw])
        .assign(&content);
    out
}

/// Center an image on a larger `side`-square canvas without resampling.
pub fn pad_center(image: &ArrayView2<'_, f32>, side: usize, pad_value: f32) -> Array2<f32> {
    let (h, w) = image.dim();
    assert!(side >= h && side >= w, "pad_center target smaller than image");
    let mut out = Array2::from_elem((side, side), pad_value);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    out.slice_mut(ndarray::s![top..top + h, left..left + w])
        .assign(image);
    out
}

/// Translate by integer offsets drawn uniformly from [-max_shift, max_shift]
/// per axis; vacated pixels take `pad_value`.
pub fn random_translate(
    image: &ArrayView2<'_, f32>,
    max_shift: usize,
    pad_value: f32,
    rng: &mut ChaCha20Rng,
) -> Array2<f32> {
    let m = max_shift as i64;
    let dy = rng.random_range(-m..=m);
    let dx = rng.random_range(-m..=m);
    translate(image, dy as isize, dx as isize, pad_value)
}

/// Deterministic integer translation: positive offsets move content
/// down/right.
pub fn translate(image: &ArrayView2<'_, f32>, dy: isize, dx: isize, pad_value: f32) -> Array2<f32> {
    let (h, w) = image.dim();
    let mut out = Array2::from_elem((h, w), pad_value);
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - dx;
            if sx >= 0 && sx < w as isize {
                out[[y, x]] = image[[sy as usize, sx as usize]];
            }
        }
    }
    out
}

/// Apply an independent random translation to every image in the batch.
pub fn translate_batch(
    batch: &ImageBatch,
    max_shift: usize,
    pad_value: f32,
    rng: &mut ChaCha20Rng,
) -> ImageBatch {
    if max_shift == 0 {
        return batch.clone();
    }
    let (n, _, h, w) = batch.pixels.dim();
    let mut pixels = Array4::zeros((n, 1, h, w));
    for i in 0..n {
        let t = random_translate(&batch.image(i), max_shift, pad_value, rng);
        pixels
            .index_axis_mut(Axis(0), i)
            .index_axis_move(Axis(0), 0)
            .assign(&t);
    }
    ImageBatch {
        pixels,
        source_ids: batch.source_ids.clone(),
    }
}

// ---- targets and splits ----

/// ln(raw)/10: compresses positive clinical values into roughly [0, 1].
pub fn scale_regression_target(raw: f64) -> Result<f64> {
    if !(raw > 0.0) {
        return Err(PipelineError::contract(format!(
            "regression target must be positive, got {raw}"
        )));
    }
    Ok(raw.ln() / 10.0)
}

/// Partition records so that no group id spans both sides. Operates at
/// whole-group granularity: groups are shuffled by seed, then assigned to
/// sides in the requested ratio.
pub fn grouped_split(
    records: &[LabeledRecord],
    spec: &SplitSpec,
) -> Result<(Vec<LabeledRecord>, Vec<LabeledRecord>)> {
    let mut groups: Vec<&str> = Vec::new();
    for r in records {
        if !groups.contains(&r.group_id.as_str()) {
            groups.push(&r.group_id);
        }
    }
    if groups.len() < 2 {
        return Err(PipelineError::contract(format!(
            "grouped split needs at least 2 distinct groups, found {}",
            groups.len()
        )));
    }
    let (a, b) = spec.ratio;
    assert!(a > 0 && b > 0, "split ratio parts must be positive");

    let mut rng = gvr_core::rng::seeded_stream(spec.seed, 0);
    // Fisher-Yates with the split's own stream.
    for i in (1..groups.len()).rev() {
        let j = rng.random_range(0..=i);
        groups.swap(i, j);
    }

    let total = groups.len();
    let n_train = ((total as f64 * a as f64 / (a + b) as f64).round() as usize)
        .clamp(1, total - 1);
    let train_groups: std::collections::HashSet<&str> =
        groups[..n_train].iter().copied().collect();

    let mut train = Vec::new();
    let mut held = Vec::new();
    for r in records {
        if train_groups.contains(r.group_id.as_str()) {
            train.push(r.clone());
        } else {
            held.push(r.clone());
        }
    }
    Ok((train, held))
}

// ---- manifests and generic corpora ----

/// What the manifest's raw_value column means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// Positive real target, scaled by ln(raw)/10.
    Regression,
    /// Integer class index in [0, num_classes).
    Classification { num_classes: usize },
}

/// Read a labelled-corpus manifest: CSV with header
/// `group_id,image_path,raw_value`.
pub fn read_manifest(path: &Path, kind: TargetKind) -> Result<Vec<LabeledRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| PipelineError::format(path, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| PipelineError::format(path, e.to_string()))?;
        let expected = ["group_id", "image_path", "raw_value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(PipelineError::format(
                path,
                format!("manifest header must be {expected:?}, got {headers:?}"),
            ));
        }
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| PipelineError::format(path, e.to_string()))?;
        let line = i + 2; // header is line 1
        if row.len() != 3 {
            return Err(PipelineError::format(
                path,
                format!("line {line}: expected 3 fields, got {}", row.len()),
            ));
        }
        let raw_value: f64 = row[2].trim().parse().map_err(|_| {
            PipelineError::format(path, format!("line {line}: raw_value {:?} is not a number", &row[2]))
        })?;
        let scaled_target = match kind {
            TargetKind::Regression => scale_regression_target(raw_value).map_err(|e| {
                PipelineError::format(path, format!("line {line}: {e}"))
            })?,
            TargetKind::Classification { num_classes } => {
                let idx = raw_value as i64;
                if raw_value.fract() != 0.0 || idx < 0 || idx as usize >= num_classes {
                    return Err(PipelineError::format(
                        path,
                        format!(
                            "line {line}: class index {raw_value} outside [0, {num_classes})"
                        ),
                    ));
                }
                raw_value
            }
        };
        out.push(LabeledRecord {
            group_id: row[0].to_string(),
            image_ref: row[1].to_string(),
            raw_value,
            scaled_target,
        });
    }
    Ok(out)
}

/// Load an 8- or 16-bit grayscale PNG into tanh range.
pub fn load_png_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| PipelineError::format(path, e.to_string()))?;
    let arr = match img {
        image::DynamicImage::ImageLuma16(im) => {
            let (w, h) = im.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                im.get_pixel(x as u32, y as u32).0[0] as f32 / 32767.5 - 1.0
            })
        }
        other => {
            let im = other.to_luma8();
            let (w, h) = im.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                im.get_pixel(x as u32, y as u32).0[0] as f32 / 127.5 - 1.0
            })
        }
    };
    Ok(arr)
}

// ---- MNIST convenience ----

/// Load an MNIST IDX image file and center-pad each digit to `side`
/// (28 -> 32 by default) with black fill. Padding, not letterboxing: digits
/// are not resampled.
pub fn load_mnist_images(path: &Path, side: usize) -> Result<ImageBatch> {
    let raw = load_idx_images(path)?;
    let (n, _, h, w) = raw.pixels.dim();
    if h > side || w > side {
        return Err(PipelineError::contract(format!(
            "MNIST padding target {side} smaller than source {h}x{w}"
        )));
    }
    let mut pixels = Array4::from_elem((n, 1, side, side), PAD_VALUE);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    for i in 0..n {
        pixels
            .index_axis_mut(Axis(0), i)
            .index_axis_move(Axis(0), 0)
            .slice_mut(ndarray::s![top..top + h, left..left + w])
            .assign(&raw.image(i));
    }
    Ok(ImageBatch {
        pixels,
        source_ids: raw.source_ids,
    })
}

// ---- batching ----

/// A shuffled pass over n indices, deterministic in the rng state.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Uniform-with-replacement minibatch draw.
pub fn sample_indices(n: usize, batch: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}
