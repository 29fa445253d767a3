//! C interface to contourqa.
//!
//! Every fallible function returns a `CqaStatus`; on failure the message is
//! available from `cqa_last_error` until the next call on the same thread.
//! Objects are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use contourqa::eval::{contour_features, ContourScorer, DetectionSample, OcsvmScorer};
use contourqa::features::{read_feature_file, FeatureVector};
use contourqa::metrics::slice_metric_triple;
use contourqa::ocsvm::{load_model, save_model, train, OcsvmModel, TrainConfig};
use contourqa::volume::Grid2;
use contourqa::QaError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    EmptyMask = 6,
    SchemaMismatch = 7,
    NonConvergence = 8,
    Internal = 9,
}

impl From<&QaError> for CqaStatus {
    fn from(e: &QaError) -> Self {
        match e {
            QaError::Io(_) => CqaStatus::Io,
            QaError::MalformedHeader(_)
            | QaError::PayloadLength { .. }
            | QaError::UnsupportedDtype(_)
            | QaError::Format(_) => CqaStatus::Format,
            QaError::DimensionMismatch(_) => CqaStatus::DimensionMismatch,
            QaError::EmptyMask(_) => CqaStatus::EmptyMask,
            QaError::SchemaMismatch { .. } => CqaStatus::SchemaMismatch,
            QaError::NonConvergence { .. } => CqaStatus::NonConvergence,
            QaError::Invariant(_) | QaError::InvalidArgument(_) | QaError::Generation(_) => {
                CqaStatus::InvalidArgument
            }
        }
    }
}

/// DSC, HD95 and MSD of one contour pair.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CqaMetrics {
    pub dsc: f64,
    pub hd95: f64,
    pub msd: f64,
}

/// Trained one-class SVM.
pub struct CqaModel(OcsvmModel);

/// Binary 2-D mask, row-major with x fastest.
pub struct CqaMask(Grid2<u8>);

/// Rows of a feature file.
pub struct CqaFeatureSet(Vec<FeatureVector>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: CqaStatus, msg: &str) -> CqaStatus {
    set_error(msg);
    status
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (CqaStatus, String)>) -> CqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CqaStatus::Ok
        }
        Ok(Err((s, msg))) => fail(s, &msg),
        Err(_) => fail(CqaStatus::Internal, "internal panic"),
    }
}

fn qa(e: QaError) -> (CqaStatus, String) {
    (CqaStatus::from(&e), e.to_string())
}

fn null(name: &str) -> (CqaStatus, String) {
    (CqaStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (CqaStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CqaStatus::InvalidArgument, format!("`{name}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message for the most recent failure on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cqa_model_load(path: *const c_char, out: *mut *mut CqaModel) -> CqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        let m = load_model(p).map_err(qa)?;
        *out = Box::into_raw(Box::new(CqaModel(m)));
        Ok(())
    })
}

/// Train a model on `n` row-major vectors of length `dim`.
///
/// # Safety
/// `rows` must point to `n * dim` doubles, `schema_id` must be a
/// NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cqa_model_train(
    rows: *const f64,
    n: usize,
    dim: usize,
    schema_id: *const c_char,
    nu: f64,
    gamma: f64,
    out: *mut *mut CqaModel,
) -> CqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if rows.is_null() {
            return Err(null("rows"));
        }
        if schema_id.is_null() {
            return Err(null("schema_id"));
        }
        let schema = CStr::from_ptr(schema_id)
            .to_str()
            .map_err(|_| (CqaStatus::InvalidArgument, "schema_id is not UTF-8".to_string()))?;
        let len = n
            .checked_mul(dim)
            .ok_or((CqaStatus::InvalidArgument, "n * dim overflows".to_string()))?;
        let data = std::slice::from_raw_parts(rows, len);
        let vectors = data
            .chunks(dim.max(1))
            .map(|c| FeatureVector::new(schema, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(qa)?;
        let m = train(&vectors, &TrainConfig::new(nu, gamma)).map_err(qa)?;
        *out = Box::into_raw(Box::new(CqaModel(m)));
        Ok(())
    })
}

/// Write a model file.
///
/// # Safety
/// `model` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cqa_model_save(model: *const CqaModel, path: *const c_char) -> CqaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = path_arg(path, "path")?;
        save_model(&m.0, p).map_err(qa)
    })
}

/// Feature dimension the model expects.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_model_dim(model: *const CqaModel, out: *mut usize) -> CqaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.0.standardization.dim();
        Ok(())
    })
}

/// Decision value of a raw (unstandardized) feature vector; negative means
/// low quality.
///
/// # Safety
/// `features` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_model_decision(
    model: *const CqaModel,
    features: *const f64,
    len: usize,
    out: *mut f64,
) -> CqaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let x = std::slice::from_raw_parts(features, len);
        *out = m.0.decision_values(x).map_err(qa)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cqa_model_free(model: *mut CqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copy a `width × height` mask; nonzero bytes other than 1 are rejected.
///
/// # Safety
/// `data` must point to `width * height` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_mask_new(
    data: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut CqaMask,
) -> CqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let len = width
            .checked_mul(height)
            .ok_or((CqaStatus::InvalidArgument, "width * height overflows".to_string()))?;
        let g = Grid2::new(width, height, std::slice::from_raw_parts(data, len).to_vec())
            .map_err(qa)?;
        if !g.is_binary() {
            return Err((CqaStatus::InvalidArgument, "mask values must be 0 or 1".into()));
        }
        *out = Box::into_raw(Box::new(CqaMask(g)));
        Ok(())
    })
}

/// Number of foreground pixels.
///
/// # Safety
/// `mask` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_mask_count(mask: *const CqaMask, out: *mut usize) -> CqaStatus {
    guard(|| {
        let m = mask.as_ref().ok_or_else(|| null("mask"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.0.count_nonzero();
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cqa_mask_free(mask: *mut CqaMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Slice metrics with in-plane pixel spacing (use 1, 1 for pixel units).
///
/// # Safety
/// `gt` and `agc` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_slice_metrics(
    gt: *const CqaMask,
    agc: *const CqaMask,
    spacing_x: f64,
    spacing_y: f64,
    out: *mut CqaMetrics,
) -> CqaStatus {
    guard(|| {
        let gt = gt.as_ref().ok_or_else(|| null("gt"))?;
        let agc = agc.as_ref().ok_or_else(|| null("agc"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = slice_metric_triple(&gt.0, &agc.0, [spacing_x, spacing_y]).map_err(qa)?;
        *out = CqaMetrics {
            dsc: m.dsc,
            hd95: m.hd95,
            msd: m.msd,
        };
        Ok(())
    })
}

fn image_sample(
    image: *const u8,
    mask: &CqaMask,
) -> Result<DetectionSample, (CqaStatus, String)> {
    if image.is_null() {
        return Err(null("image"));
    }
    let (w, h) = (mask.0.width(), mask.0.height());
    // SAFETY: the caller guarantees `image` holds one byte per mask pixel.
    let pixels = unsafe { std::slice::from_raw_parts(image, w * h) }.to_vec();
    Ok(DetectionSample {
        id: String::new(),
        organ: String::new(),
        slice: 0,
        image: Grid2::new(w, h, pixels).map_err(qa)?,
        agc: mask.0.clone(),
    })
}

/// Crop, resize and extract the 24 `classical-v1` features of a contour on
/// its u8 slice image.
///
/// # Safety
/// `image` must hold one byte per mask pixel; `out` must hold `out_len`
/// doubles, with `out_len` at least 24.
#[no_mangle]
pub unsafe extern "C" fn cqa_extract_features(
    image: *const u8,
    mask: *const CqaMask,
    margin: usize,
    out: *mut f64,
    out_len: usize,
) -> CqaStatus {
    guard(|| {
        let mask = mask.as_ref().ok_or_else(|| null("mask"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sample = image_sample(image, mask)?;
        let f = contour_features(&sample, &mask.0, margin).map_err(qa)?;
        if out_len < f.values.len() {
            return Err((
                CqaStatus::InvalidArgument,
                format!("out_len {out_len} < {}", f.values.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, f.values.len()).copy_from_slice(&f.values);
        Ok(())
    })
}

/// Extract features and score them in one call.
///
/// # Safety
/// As for `cqa_extract_features`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_score_contour(
    model: *const CqaModel,
    image: *const u8,
    mask: *const CqaMask,
    margin: usize,
    out: *mut f64,
) -> CqaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let mask = mask.as_ref().ok_or_else(|| null("mask"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let sample = image_sample(image, mask)?;
        let scorer = OcsvmScorer {
            model: &model.0,
            margin,
        };
        *out = scorer.score(&sample, &mask.0).map_err(qa)?;
        Ok(())
    })
}

/// Read a feature file; `strict` rejects unknown schemas.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cqa_feature_file_read(
    path: *const c_char,
    strict: bool,
    out: *mut *mut CqaFeatureSet,
) -> CqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        let rows = read_feature_file(p, strict).map_err(qa)?;
        *out = Box::into_raw(Box::new(CqaFeatureSet(rows)));
        Ok(())
    })
}

/// Row count and dimension of a feature set.
///
/// # Safety
/// `set` must come from this library; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cqa_feature_set_shape(
    set: *const CqaFeatureSet,
    rows: *mut usize,
    dim: *mut usize,
) -> CqaStatus {
    guard(|| {
        let s = set.as_ref().ok_or_else(|| null("set"))?;
        let rows = rows.as_mut().ok_or_else(|| null("rows"))?;
        let dim = dim.as_mut().ok_or_else(|| null("dim"))?;
        *rows = s.0.len();
        *dim = s.0.first().map_or(0, FeatureVector::dim);
        Ok(())
    })
}

/// Copy row `index` into `out`, which must hold at least the set's dimension.
///
/// # Safety
/// `set` must come from this library; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cqa_feature_set_row(
    set: *const CqaFeatureSet,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> CqaStatus {
    guard(|| {
        let s = set.as_ref().ok_or_else(|| null("set"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let row = s.0.get(index).ok_or_else(|| {
            (
                CqaStatus::InvalidArgument,
                format!("row {index} out of range ({} rows)", s.0.len()),
            )
        })?;
        if out_len < row.values.len() {
            return Err((
                CqaStatus::InvalidArgument,
                format!("out_len {out_len} < {}", row.values.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, row.values.len()).copy_from_slice(&row.values);
        Ok(())
    })
}

/// # Safety
/// `set` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cqa_feature_set_free(set: *mut CqaFeatureSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
