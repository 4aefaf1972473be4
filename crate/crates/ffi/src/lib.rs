//! C interface to the cytopair classifier.
//!
//! Models and galleries are opaque handles created by `*_load` and released
//! with `*_free`. Every function returns a [`CytopairStatus`]; on failure the
//! message is available from [`cytopair_last_error`] until the next call on
//! the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cytopair::checkpoint::Checkpoint;
use cytopair::data::{ImageRaster, ModalitySet, OpticalProfile, NUM_CHANNELS};
use cytopair::encoders::DualEncoder;
use cytopair::gallery::{classify_parts, load_gallery, LabeledGallery};
use cytopair::preprocess::AugmentConfig;
use cytopair::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CytopairStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were well-formed but rejected, e.g. a zero `k`.
    InvalidArgument = 2,
    /// A file could not be read.
    Io = 3,
    /// A file was read but its contents are malformed or unsupported.
    Format = 4,
    /// The output buffer is too small; the required size was written back.
    BufferTooSmall = 5,
    /// Any other failure inside the library.
    Runtime = 6,
    /// The library panicked. The handle involved should be freed.
    Panic = 7,
}

/// A trained model together with the preprocessing it was trained with.
pub struct CytopairModel {
    encoder: DualEncoder<f32>,
    augment: AugmentConfig,
}

/// A labeled embedding gallery.
pub struct CytopairGallery(LabeledGallery);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> CytopairStatus {
    match e {
        Error::Io { .. } => CytopairStatus::Io,
        Error::Format { .. }
        | Error::Image { .. }
        | Error::Checkpoint(_)
        | Error::Version { .. }
        | Error::Gallery(_)
        | Error::Config { .. } => CytopairStatus::Format,
        Error::InvalidInput(_) | Error::Domain(_) | Error::Shape(_) | Error::ZeroVector(_) => {
            CytopairStatus::InvalidArgument
        }
        _ => CytopairStatus::Runtime,
    }
}

struct Failure(CytopairStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: CytopairStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `f`, records its error message and converts panics to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CytopairStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CytopairStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {message}"));
            CytopairStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass pointers obtained from this library or valid for reads.
    unsafe { p.as_ref() }
        .ok_or_else(|| fail(CytopairStatus::NullArgument, format!("{what} is null")))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(CytopairStatus::NullArgument, "path is null"));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(CytopairStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn image_arg(
    pixels: *const u8,
    height: usize,
    width: usize,
) -> Result<Option<ImageRaster>, Failure> {
    if pixels.is_null() {
        return Ok(None);
    }
    let len = height
        .checked_mul(width)
        .ok_or_else(|| fail(CytopairStatus::InvalidArgument, "image size overflows"))?;
    // SAFETY: the caller guarantees `height * width` readable bytes.
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    Ok(Some(ImageRaster::new(height, width, data)?))
}

fn profile_arg(samples: *const f64, length: usize) -> Result<Option<OpticalProfile>, Failure> {
    if samples.is_null() {
        return Ok(None);
    }
    let len = length
        .checked_mul(NUM_CHANNELS)
        .ok_or_else(|| fail(CytopairStatus::InvalidArgument, "profile size overflows"))?;
    // SAFETY: the caller guarantees `length * 6` readable values.
    let flat = unsafe { std::slice::from_raw_parts(samples, len) };
    let rows = flat
        .chunks_exact(NUM_CHANNELS)
        .map(|c| {
            let mut row = [0.0; NUM_CHANNELS];
            row.copy_from_slice(c);
            row
        })
        .collect();
    Ok(Some(OpticalProfile::new(rows)?))
}

/// Writes `values` into `out` (capacity `capacity`) and the count into
/// `written`. Reports the needed size when `out` is too small.
fn write_floats(
    values: &[f32],
    out: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> Result<(), Failure> {
    if written.is_null() {
        return Err(fail(CytopairStatus::NullArgument, "length output is null"));
    }
    // SAFETY: checked non-null above.
    unsafe { *written = values.len() };
    if values.len() > capacity {
        return Err(fail(
            CytopairStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    if out.is_null() {
        return Err(fail(CytopairStatus::NullArgument, "output buffer is null"));
    }
    // SAFETY: `out` has room for `capacity >= values.len()` floats.
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn cytopair_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cytopair_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `cytopair train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cytopair_model_load(
    path: *const c_char,
    out: *mut *mut CytopairModel,
) -> CytopairStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CytopairStatus::NullArgument, "output handle is null"));
        }
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let model = CytopairModel {
            encoder: ck.model::<f32>()?,
            augment: ck.config.train.augment.clone(),
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cytopair_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cytopair_model_free(model: *mut CytopairModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the embeddings the model produces.
///
/// # Safety
/// `model` must be a live handle and `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn cytopair_model_embedding_dim(
    model: *const CytopairModel,
    dim: *mut usize,
) -> CytopairStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if dim.is_null() {
            return Err(fail(CytopairStatus::NullArgument, "dim is null"));
        }
        *dim = m.encoder.config.embed_dim;
        Ok(())
    })
}

/// Unit-norm image embedding of a grayscale raster of `height * width`
/// bytes in row-major order.
///
/// # Safety
/// `pixels` must hold `height * width` bytes, `out` `capacity` floats and
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cytopair_embed_image(
    model: *const CytopairModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    out: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> CytopairStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let image = image_arg(pixels, height, width)?
            .ok_or_else(|| fail(CytopairStatus::NullArgument, "pixels is null"))?;
        let e = m.embed(Some(&image), None)?;
        write_floats(&e[0], out, capacity, written)
    })
}

/// Unit-norm profile embedding of `length` time points, each holding the six
/// channel values in order.
///
/// # Safety
/// `samples` must hold `length * 6` values, `out` `capacity` floats and
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cytopair_embed_profile(
    model: *const CytopairModel,
    samples: *const f64,
    length: usize,
    out: *mut f32,
    capacity: usize,
    written: *mut usize,
) -> CytopairStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let profile = profile_arg(samples, length)?
            .ok_or_else(|| fail(CytopairStatus::NullArgument, "samples is null"))?;
        let e = m.embed(None, Some(&profile))?;
        write_floats(&e[0], out, capacity, written)
    })
}

impl CytopairModel {
    fn embed(
        &self,
        image: Option<&ImageRaster>,
        profile: Option<&OpticalProfile>,
    ) -> Result<Vec<Vec<f32>>, Failure> {
        use cytopair::preprocess::{preprocess_image, preprocess_profile, PrepMode};
        // Eval preprocessing draws no random numbers.
        let mut rng = cytopair::seed::rng(0, 0, 0);
        let mut out = Vec::new();
        if let Some(img) = image {
            let t = preprocess_image(img, PrepMode::Eval, &self.augment, &mut rng);
            out.extend(
                self.encoder
                    .embed_images(&[t], 1)?
                    .into_iter()
                    .map(|e| e.values),
            );
        }
        if let Some(p) = profile {
            let t = preprocess_profile(p, PrepMode::Eval, &self.augment, &mut rng)?;
            out.extend(
                self.encoder
                    .embed_profiles(&[t], 1)?
                    .into_iter()
                    .map(|e| e.values),
            );
        }
        Ok(out)
    }
}

/// Loads a gallery written by `cytopair build-gallery`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cytopair_gallery_load(
    path: *const c_char,
    out: *mut *mut CytopairGallery,
) -> CytopairStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CytopairStatus::NullArgument, "output handle is null"));
        }
        let g = load_gallery(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CytopairGallery(g)));
        Ok(())
    })
}

/// Releases a gallery. Null is ignored.
///
/// # Safety
/// `gallery` must come from [`cytopair_gallery_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn cytopair_gallery_free(gallery: *mut CytopairGallery) {
    if !gallery.is_null() {
        drop(Box::from_raw(gallery));
    }
}

/// Number of entries in the gallery.
///
/// # Safety
/// `gallery` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn cytopair_gallery_len(
    gallery: *const CytopairGallery,
    len: *mut usize,
) -> CytopairStatus {
    guard(|| {
        let g = non_null(gallery, "gallery")?;
        if len.is_null() {
            return Err(fail(CytopairStatus::NullArgument, "len is null"));
        }
        *len = g.0.len();
        Ok(())
    })
}

/// Classifies one particle by a k-NN vote over the gallery. Pass null for a
/// modality that was not recorded; at least one must be given. The winning
/// label is written NUL-terminated into `label` and its vote count into
/// `votes`. When `label_capacity` is too small, `BufferTooSmall` is returned
/// and `label_needed` holds the size including the terminator.
///
/// # Safety
/// Pointers follow the same rules as [`cytopair_embed_image`] and
/// [`cytopair_embed_profile`]; `label` must hold `label_capacity` bytes and
/// `votes` and `label_needed` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn cytopair_classify(
    model: *const CytopairModel,
    gallery: *const CytopairGallery,
    pixels: *const u8,
    height: usize,
    width: usize,
    samples: *const f64,
    length: usize,
    k: usize,
    label: *mut c_char,
    label_capacity: usize,
    label_needed: *mut usize,
    votes: *mut usize,
) -> CytopairStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let g = non_null(gallery, "gallery")?;
        let image = image_arg(pixels, height, width)?;
        let profile = profile_arg(samples, length)?;
        let query = match (&image, &profile) {
            (Some(_), Some(_)) => ModalitySet::BOTH,
            (Some(_), None) => ModalitySet::IMAGE,
            (None, Some(_)) => ModalitySet::PROFILE,
            (None, None) => {
                return Err(fail(
                    CytopairStatus::NullArgument,
                    "neither an image nor a profile was given",
                ));
            }
        };
        let pred = classify_parts(
            image.as_ref(),
            profile.as_ref(),
            query,
            &g.0,
            &m.encoder,
            k,
            &m.augment,
        )?;
        let needed = pred.label.len() + 1;
        if !label_needed.is_null() {
            *label_needed = needed;
        }
        if !votes.is_null() {
            *votes = pred.tally.get(&pred.label).copied().unwrap_or(0);
        }
        if needed > label_capacity {
            return Err(fail(
                CytopairStatus::BufferTooSmall,
                format!("label needs {needed} bytes, buffer has {label_capacity}"),
            ));
        }
        if label.is_null() {
            return Err(fail(CytopairStatus::NullArgument, "label buffer is null"));
        }
        ptr::copy_nonoverlapping(pred.label.as_ptr(), label.cast::<u8>(), pred.label.len());
        *label.add(pred.label.len()) = 0;
        Ok(())
    })
}
