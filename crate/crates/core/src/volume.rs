//! Volume and mask data model, the QAV1 container, and the slice
//! preprocessing chain (intensity windowing, mask-guided crop, resize).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QaError, Result};

/// Side length of every preprocessed slice crop.
pub const CROP_SIZE: usize = 224;

/// Default margin (pixels) added around the mask bounding box before cropping.
pub const DEFAULT_MARGIN: usize = 8;

/// Default CT window in HU used for uint8 conversion.
pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 1000.0);

const MAGIC: &str = "QAV1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    I16,
    F32,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::I16 => "i16",
            DType::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(DType::U8),
            "i16" => Ok(DType::I16),
            "f32" => Ok(DType::F32),
            other => Err(QaError::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Voxels {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::U8(v) => v.len(),
            Voxels::I16(v) => v.len(),
            Voxels::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Voxels::U8(_) => DType::U8,
            Voxels::I16(_) => DType::I16,
            Voxels::F32(_) => DType::F32,
        }
    }

    /// Value at flat index widened to f64.
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            Voxels::U8(v) => v[i] as f64,
            Voxels::I16(v) => v[i] as f64,
            Voxels::F32(v) => v[i] as f64,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Voxels::U8(v) => v.clone(),
            Voxels::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Voxels::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::U8 => Voxels::U8(bytes.to_vec()),
            DType::I16 => Voxels::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::F32 => Voxels::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        }
    }
}

/// A 3-D scalar grid with physical spacing. Voxels are stored x-fastest,
/// then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Voxels,
    mask: bool,
}

impl Volume {
    /// Build an intensity volume. Checks dims, spacing and payload length.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Voxels) -> Result<Self> {
        check_geometry(dims, spacing, voxels.len())?;
        Ok(Volume {
            dims,
            spacing,
            voxels,
            mask: false,
        })
    }

    /// Build a binary mask volume (u8 values in {0, 1}).
    pub fn new_mask(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        let v = Volume {
            dims,
            spacing,
            voxels: Voxels::U8(data),
            mask: true,
        };
        v.validate()?;
        Ok(v)
    }

    /// An all-background mask.
    pub fn empty_mask(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new_mask(dims, spacing, vec![0; n])
    }

    /// Wrap a 2-D binary grid as a single-slice mask volume.
    pub fn from_mask_slice(mask: &Grid2<u8>, spacing: [f64; 2]) -> Result<Self> {
        Self::new_mask(
            [mask.width(), mask.height(), 1],
            [spacing[0], spacing[1], 1.0],
            mask.data().to_vec(),
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> DType {
        self.voxels.dtype()
    }

    pub fn voxels(&self) -> &Voxels {
        &self.voxels
    }

    pub fn is_mask(&self) -> bool {
        self.mask
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Mark a u8 volume as a mask (or not). Validation happens on use/save.
    pub fn set_mask(&mut self, mask: bool) {
        self.mask = mask;
    }

    /// Raw u8 data, if the dtype is u8.
    pub fn u8_data(&self) -> Option<&[u8]> {
        match &self.voxels {
            Voxels::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Mutable u8 data. Edits are not validated until [`Volume::validate`].
    pub fn u8_data_mut(&mut self) -> Option<&mut [u8]> {
        match &mut self.voxels {
            Voxels::U8(v) => Some(v),
            _ => None,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// Check every invariant, including the binary-mask invariant for masks.
    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing, self.voxels.len())?;
        if self.mask {
            match &self.voxels {
                Voxels::U8(v) => {
                    if let Some(pos) = v.iter().position(|&x| x > 1) {
                        return Err(QaError::Invariant(format!(
                            "mask voxel {pos} has value {}",
                            v[pos]
                        )));
                    }
                }
                _ => {
                    return Err(QaError::Invariant(
                        "mask volume must have dtype u8".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Binary data for a mask; errors if this is not a valid mask.
    pub fn mask_data(&self) -> Result<&[u8]> {
        match &self.voxels {
            Voxels::U8(v) if v.iter().all(|&x| x <= 1) => Ok(v),
            Voxels::U8(_) => Err(QaError::Invariant("mask values must be 0 or 1".into())),
            _ => Err(QaError::Invariant("mask volume must have dtype u8".into())),
        }
    }

    /// Extract slice `z` of a u8 volume.
    pub fn slice_u8(&self, z: usize) -> Result<Grid2<u8>> {
        let data = self
            .u8_data()
            .ok_or_else(|| QaError::InvalidArgument("slice_u8 requires a u8 volume".into()))?;
        if z >= self.dims[2] {
            return Err(QaError::InvalidArgument(format!(
                "slice {z} out of range (nz = {})",
                self.dims[2]
            )));
        }
        let plane = self.dims[0] * self.dims[1];
        Grid2::new(
            self.dims[0],
            self.dims[1],
            data[z * plane..(z + 1) * plane].to_vec(),
        )
    }

    /// Count of nonzero voxels per z slice.
    pub fn slice_counts(&self) -> Result<Vec<usize>> {
        let data = self.mask_data()?;
        let plane = self.dims[0] * self.dims[1];
        Ok(data
            .chunks_exact(plane)
            .map(|s| s.iter().filter(|&&v| v != 0).count())
            .collect())
    }
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(QaError::Invariant(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(QaError::Invariant(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| QaError::Invariant("dims overflow".into()))?;
    if n != len {
        return Err(QaError::Invariant(format!(
            "voxel count {len} does not match dims {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Qav1Header {
    magic: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

/// Read a QAV1 volume file.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(QaError::MalformedHeader("missing header terminator".into()));
    }
    line.pop();
    let header: Qav1Header = serde_json::from_slice(&line)
        .map_err(|e| QaError::MalformedHeader(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(QaError::MalformedHeader(format!(
            "bad magic `{}`",
            header.magic
        )));
    }
    let dtype = DType::parse(&header.dtype)?;
    if header.dims.contains(&0) {
        return Err(QaError::MalformedHeader(format!(
            "dims must be >= 1, got {:?}",
            header.dims
        )));
    }
    if header.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(QaError::MalformedHeader(format!(
            "spacing must be positive, got {:?}",
            header.spacing
        )));
    }
    let count = header.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = count
        .and_then(|c| c.checked_mul(dtype.size()))
        .ok_or_else(|| QaError::MalformedHeader("dims overflow".into()))?;
    let mut payload = Vec::with_capacity(expected);
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(QaError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    Volume::new(
        header.dims,
        header.spacing,
        Voxels::from_le_bytes(dtype, &payload),
    )
}

/// Read a QAV1 file and validate it as a binary mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Volume> {
    let mut v = load_volume(path)?;
    v.set_mask(true);
    v.validate()?;
    Ok(v)
}

/// Write a volume as QAV1. Masks are validated before anything is written.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    v.validate()?;
    let header = Qav1Header {
        magic: MAGIC.to_string(),
        dims: v.dims,
        spacing: v.spacing,
        dtype: v.dtype().as_str().to_string(),
    };
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&v.voxels.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Map CT intensities into u8 with a linear window, rounding half away from zero.
pub fn normalize_u8(ct: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(QaError::InvalidArgument(format!(
            "window lower bound must be below upper bound, got ({lo}, {hi})"
        )));
    }
    let n = ct.len();
    let out: Vec<u8> = (0..n)
        .map(|i| window_value(ct.voxels.get_f64(i), lo, hi))
        .collect();
    Volume::new(ct.dims, ct.spacing, Voxels::U8(out))
}

#[inline]
pub(crate) fn window_value(v: f64, lo: f64, hi: f64) -> u8 {
    // NaN clamps to the lower bound.
    let c = if v.is_nan() { lo } else { v.clamp(lo, hi) };
    (255.0 * (c - lo) / (hi - lo)).round() as u8
}

/// A dense row-major 2-D grid; `(x, y)` lives at `y * width + x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid2<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(QaError::Invariant(format!(
                "grid must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(QaError::Invariant(format!(
                "grid data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Grid2 {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "grid must be at least 1x1");
        Grid2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> Option<T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    /// Copy out the inclusive sub-rectangle `bbox`.
    pub fn crop(&self, bbox: &BoundingBox) -> Grid2<T> {
        let w = bbox.width();
        let h = bbox.height();
        let mut data = Vec::with_capacity(w * h);
        for y in bbox.y0..=bbox.y1 {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + bbox.x0..=row + bbox.x1]);
        }
        Grid2 {
            width: w,
            height: h,
            data,
        }
    }
}

impl Grid2<u8> {
    /// Number of nonzero cells.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

/// Inclusive axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Tight bounding box of the nonzero cells, or `None` for an empty grid.
pub fn mask_bbox(mask: &Grid2<u8>) -> Option<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) != 0 {
                let b = bbox.get_or_insert(BoundingBox {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                });
                b.x0 = b.x0.min(x);
                b.x1 = b.x1.max(x);
                b.y0 = b.y0.min(y);
                b.y1 = b.y1.max(y);
            }
        }
    }
    bbox
}

/// Crop image and mask to the mask's bounding box grown by `margin` and
/// clipped to the slice.
pub fn crop_to_mask(
    image: &Grid2<u8>,
    mask: &Grid2<u8>,
    margin: usize,
) -> Result<(Grid2<u8>, Grid2<u8>, BoundingBox)> {
    if image.width != mask.width || image.height != mask.height {
        return Err(QaError::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    let tight = mask_bbox(mask).ok_or_else(|| QaError::EmptyMask("crop_to_mask".into()))?;
    let bbox = BoundingBox {
        x0: tight.x0.saturating_sub(margin),
        y0: tight.y0.saturating_sub(margin),
        x1: (tight.x1 + margin).min(mask.width - 1),
        y1: (tight.y1 + margin).min(mask.height - 1),
    };
    Ok((image.crop(&bbox), mask.crop(&bbox), bbox))
}

/// Where a crop came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub organ: String,
    pub slice: i64,
    pub bbox: Option<BoundingBox>,
}

/// A preprocessed `CROP_SIZE`×`CROP_SIZE` slice with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCrop {
    pixels: Grid2<u8>,
    mask: Grid2<u8>,
    pub provenance: Provenance,
}

impl SliceCrop {
    pub fn new(pixels: Grid2<u8>, mask: Grid2<u8>, provenance: Provenance) -> Result<Self> {
        for (name, g) in [("pixels", &pixels), ("mask", &mask)] {
            if g.width != CROP_SIZE || g.height != CROP_SIZE {
                return Err(QaError::Invariant(format!(
                    "{name} grid must be {CROP_SIZE}x{CROP_SIZE}, got {}x{}",
                    g.width, g.height
                )));
            }
        }
        if !mask.is_binary() {
            return Err(QaError::Invariant("crop mask must be binary".into()));
        }
        if mask.count_nonzero() == 0 {
            return Err(QaError::EmptyMask("slice crop".into()));
        }
        Ok(SliceCrop {
            pixels,
            mask,
            provenance,
        })
    }

    pub fn pixels(&self) -> &Grid2<u8> {
        &self.pixels
    }

    pub fn mask(&self) -> &Grid2<u8> {
        &self.mask
    }
}

/// Resize an image (bilinear) and its mask (nearest neighbour) to the crop
/// size. Sampling is corner-aligned: output corners map onto input corners.
pub fn resize_bilinear(crop: &Grid2<u8>, mask: &Grid2<u8>) -> Result<SliceCrop> {
    if crop.width != mask.width || crop.height != mask.height {
        return Err(QaError::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            crop.width, crop.height, mask.width, mask.height
        )));
    }
    let pixels = resize_image(crop, CROP_SIZE, CROP_SIZE);
    let mask = resize_nearest(mask, CROP_SIZE, CROP_SIZE);
    SliceCrop::new(pixels, mask, Provenance::default())
}

#[inline]
fn corner_scale(src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_image(src: &Grid2<u8>, out_w: usize, out_h: usize) -> Grid2<u8> {
    let sx = corner_scale(src.width, out_w);
    let sy = corner_scale(src.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = (fy.floor() as usize).min(src.height - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = (fx.floor() as usize).min(src.width - 1);
            let x1 = (x0 + 1).min(src.width - 1);
            let wx = fx - x0 as f64;
            let top = src.get(x0, y0) as f64 * (1.0 - wx) + src.get(x1, y0) as f64 * wx;
            let bottom = src.get(x0, y1) as f64 * (1.0 - wx) + src.get(x1, y1) as f64 * wx;
            let v = top * (1.0 - wy) + bottom * wy;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Grid2 {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Nearest-neighbour resize with the same corner-aligned mapping.
pub fn resize_nearest<T: Copy + Default>(src: &Grid2<T>, out_w: usize, out_h: usize) -> Grid2<T> {
    let sx = corner_scale(src.width, out_w);
    let sy = corner_scale(src.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let y = ((oy as f64 * sy).round() as usize).min(src.height - 1);
        for ox in 0..out_w {
            let x = ((ox as f64 * sx).round() as usize).min(src.width - 1);
            data.push(src.get(x, y));
        }
    }
    Grid2 {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Full slice preprocessing: crop the normalized slice around the mask and
/// resize to the crop size.
pub fn preprocess_slice(
    image: &Grid2<u8>,
    mask: &Grid2<u8>,
    margin: usize,
    provenance: Provenance,
) -> Result<SliceCrop> {
    let (sub_img, sub_mask, bbox) = crop_to_mask(image, mask, margin)?;
    let mut crop = resize_bilinear(&sub_img, &sub_mask)?;
    crop.provenance = Provenance {
        bbox: Some(bbox),
        ..provenance
    };
    Ok(crop)
}
