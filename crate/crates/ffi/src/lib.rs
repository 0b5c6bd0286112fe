//! C ABI over the `sto2` crate.
//!
//! Objects are opaque handles created by `sto2_*_new`/`load` functions and
//! released with the matching `sto2_*_free`. Every fallible call returns a
//! [`Sto2Status`]; on failure `sto2_last_error()` describes the error for
//! the calling thread. Buffers are caller-owned and row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sto2::dataset::{self, AcquisitionSetup, PhantomSpec};
use sto2::fibre::{self, BundleSpec, FibreMask, LatticeAnchor};
use sto2::gan::{self, InferenceModel};
use sto2::hypercube::{self, Hypercube, SpectralResponse, WavelengthGrid};
use sto2::metrics::{self, SsimParams, HAP_THRESHOLD};
use sto2::oximetry::{self, ChromophoreTable, StO2Map};
use sto2::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sto2Status {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NoEffectivePixels = 6,
    Checkpoint = 7,
    UnreachableTarget = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

/// Spectral hypercube (also used for sparse hyperspectral images).
pub struct Sto2Cube(Hypercube);
/// StO2 map with its per-pixel exclusion codes.
pub struct Sto2Map(StO2Map);
/// Fibre core layout for one image size.
pub struct Sto2FibreMask(FibreMask);
/// Trained generator loaded from a checkpoint.
pub struct Sto2Model(InferenceModel);

/// Evaluation of a predicted map against a reference map.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sto2Metrics {
    pub ssim: f64,
    pub e_bar: f64,
    pub p_hap: f64,
    pub n_effective: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> Sto2Status {
    match e {
        Error::Io { .. } => Sto2Status::Io,
        Error::MalformedHeader(_) | Error::SizeMismatch { .. } | Error::Csv(_) | Error::Png(_) => {
            Sto2Status::Format
        }
        Error::BandMismatch { .. } | Error::DimensionMismatch { .. } => {
            Sto2Status::DimensionMismatch
        }
        Error::OffGrid(_) | Error::InvalidArgument(_) | Error::Empty(_) => {
            Sto2Status::InvalidArgument
        }
        Error::UnreachableTarget { .. } => Sto2Status::UnreachableTarget,
        Error::NoEffectivePixels => Sto2Status::NoEffectivePixels,
        Error::Checkpoint(_) => Sto2Status::Checkpoint,
        Error::NonFinite(_) => Sto2Status::Other,
    }
}

struct Fail(Sto2Status, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let mut msg = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            msg.push_str(": ");
            msg.push_str(&s.to_string());
            src = s.source();
        }
        Fail(status_of(&e), msg)
    }
}

fn null(what: &str) -> Fail {
    Fail(Sto2Status::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Sto2Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Sto2Status::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Sto2Status::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(Sto2Status::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_buf<T: Copy>(src: &[T], dst: *mut T, len: usize) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(null("buffer"));
    }
    if len < src.len() {
        return Err(Fail(
            Sto2Status::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sto2_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sto2_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a cube from band-sequential data (`bands × height × width`).
///
/// # Safety
/// `data` must point to `len` floats and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sto2_cube_new(
    width: usize,
    height: usize,
    start_nm: f64,
    step_nm: f64,
    bands: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut Sto2Cube,
) -> Sto2Status {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let grid = WavelengthGrid::new(start_nm, step_nm, bands)?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(out, Sto2Cube(Hypercube::new(width, height, grid, values)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_cube_load(
    path_: *const c_char,
    out: *mut *mut Sto2Cube,
) -> Sto2Status {
    guard(|| put(out, Sto2Cube(hypercube::load_cube(&path(path_)?)?)))
}

/// # Safety
/// `cube` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sto2_cube_save(cube: *const Sto2Cube, path_: *const c_char) -> Sto2Status {
    guard(|| Ok(hypercube::save_cube(&obj(cube, "cube")?.0, &path(path_)?)?))
}

/// # Safety
/// `cube` must be a live handle; the output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn sto2_cube_dims(
    cube: *const Sto2Cube,
    width: *mut usize,
    height: *mut usize,
    bands: *mut usize,
) -> Sto2Status {
    guard(|| {
        let c = &obj(cube, "cube")?.0;
        for (p, v) in [(width, c.width()), (height, c.height()), (bands, c.bands())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copy the band-sequential data into `buf` (at least `bands·height·width`).
///
/// # Safety
/// `cube` must be live and `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sto2_cube_data(
    cube: *const Sto2Cube,
    buf: *mut f32,
    len: usize,
) -> Sto2Status {
    guard(|| write_buf(&obj(cube, "cube")?.0.planes.data, buf, len))
}

/// # Safety
/// `cube` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sto2_cube_free(cube: *mut Sto2Cube) {
    free(cube)
}

/// Seeded phantom of the given size: its cube and true StO2 map.
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_phantom(
    seed: u64,
    width: usize,
    height: usize,
    out_cube: *mut *mut Sto2Cube,
    out_truth: *mut *mut Sto2Map,
) -> Sto2Status {
    guard(|| {
        if out_cube.is_null() || out_truth.is_null() {
            return Err(null("output handle"));
        }
        let spec = PhantomSpec {
            seed,
            width,
            height,
            ..Default::default()
        };
        let (cube, truth) = dataset::phantom(&spec, &ChromophoreTable::reference())?;
        put(out_cube, Sto2Cube(cube))?;
        put(out_truth, Sto2Map(truth))
    })
}

/// RGB rendering of a reference-grid cube into `buf` (`3·height·width`,
/// channel-sequential).
///
/// # Safety
/// `cube` must be live and `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sto2_synthesize_rgb(
    cube: *const Sto2Cube,
    buf: *mut f32,
    len: usize,
) -> Sto2Status {
    guard(|| {
        let c = &obj(cube, "cube")?.0;
        let rgb = hypercube::synthesize_rgb(c, &SpectralResponse::gaussian(&c.grid))?;
        write_buf(&rgb.0.data, buf, len)
    })
}

/// Regression StO2 map with the bundled extinction table and a flat white
/// reference.
///
/// # Safety
/// `cube` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_estimate(
    cube: *const Sto2Cube,
    cod_threshold: f64,
    out: *mut *mut Sto2Map,
) -> Sto2Status {
    guard(|| {
        let c = &obj(cube, "cube")?.0;
        let table = ChromophoreTable::reference();
        let white = oximetry::flat_white_reference(table.bands());
        put(
            out,
            Sto2Map(oximetry::estimate_sto2_map(
                c,
                &white,
                &table,
                cod_threshold,
            )?),
        )
    })
}

/// # Safety
/// `map` must be live; the output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn sto2_map_dims(
    map: *const Sto2Map,
    width: *mut usize,
    height: *mut usize,
    n_effective: *mut usize,
) -> Sto2Status {
    guard(|| {
        let m = &obj(map, "map")?.0;
        for (p, v) in [
            (width, m.width),
            (height, m.height),
            (n_effective, m.n_effective()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `map` must be live and `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sto2_map_values(
    map: *const Sto2Map,
    buf: *mut f32,
    len: usize,
) -> Sto2Status {
    guard(|| write_buf(&obj(map, "map")?.0.values, buf, len))
}

/// Mask gray levels: effective 255, saturated 0, low CoD 64, non-tissue 128.
///
/// # Safety
/// `map` must be live and `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sto2_map_mask(
    map: *const Sto2Map,
    buf: *mut u8,
    len: usize,
) -> Sto2Status {
    guard(|| {
        let levels: Vec<u8> = obj(map, "map")?
            .0
            .mask
            .codes
            .iter()
            .map(|c| c.gray_level())
            .collect();
        write_buf(&levels, buf, len)
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sto2_map_free(map: *mut Sto2Map) {
    free(map)
}

/// Fibre layout for a preset spot count (0, 121, 171 or 300).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_fibre_mask_new(
    n_spot: usize,
    width: usize,
    height: usize,
    out: *mut *mut Sto2FibreMask,
) -> Sto2Status {
    guard(|| {
        let spec = BundleSpec::preset(n_spot)?;
        put(
            out,
            Sto2FibreMask(fibre::generate_mask(
                &spec,
                width,
                height,
                LatticeAnchor::default(),
            )?),
        )
    })
}

/// Fibre layout from explicit core radius and spacing.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_fibre_mask_custom(
    n_spot: usize,
    r: f64,
    d: f64,
    width: usize,
    height: usize,
    out: *mut *mut Sto2FibreMask,
) -> Sto2Status {
    guard(|| {
        let spec = BundleSpec::new(n_spot, r, d)?;
        put(
            out,
            Sto2FibreMask(fibre::generate_mask(
                &spec,
                width,
                height,
                LatticeAnchor::default(),
            )?),
        )
    })
}

/// # Safety
/// `mask` must be live and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_fibre_mask_count(
    mask: *const Sto2FibreMask,
    count: *mut usize,
) -> Sto2Status {
    guard(|| {
        let m = obj(mask, "fibre mask")?;
        if count.is_null() {
            return Err(null("count"));
        }
        *count = m.0.len();
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sto2_fibre_mask_free(mask: *mut Sto2FibreMask) {
    free(mask)
}

/// Sparse hyperspectral image: each fibre's mean spectrum over its core.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_shsi(
    cube: *const Sto2Cube,
    mask: *const Sto2FibreMask,
    out: *mut *mut Sto2Cube,
) -> Sto2Status {
    guard(|| {
        let s = fibre::apply_mask(&obj(cube, "cube")?.0, &obj(mask, "fibre mask")?.0)?;
        put(out, Sto2Cube(s.0))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_model_load(
    path_: *const c_char,
    out: *mut *mut Sto2Model,
) -> Sto2Status {
    guard(|| put(out, Sto2Model(InferenceModel::load(&path(path_)?)?)))
}

/// Acquire RGB and sHSI from `cube` through `mask`, run the generator and
/// return its map, masked like the regression map of the same cube.
///
/// # Safety
/// Handles must be live; `out` writable; `elapsed_ms` may be null.
#[no_mangle]
pub unsafe extern "C" fn sto2_model_predict(
    model: *const Sto2Model,
    cube: *const Sto2Cube,
    mask: *const Sto2FibreMask,
    out: *mut *mut Sto2Map,
    elapsed_ms: *mut f64,
) -> Sto2Status {
    guard(|| {
        let model = &obj(model, "model")?.0;
        let c = &obj(cube, "cube")?.0;
        let table = ChromophoreTable::reference();
        let white = oximetry::flat_white_reference(table.bands());
        let response = SpectralResponse::gaussian(&c.grid);
        let setup = AcquisitionSetup {
            response: &response,
            table: &table,
            white_ref: &white,
            cod_threshold: oximetry::DEFAULT_COD_THRESHOLD,
        };
        let sample = dataset::acquire("ffi", 0, c, &obj(mask, "fibre mask")?.0, &setup)?;
        let (map, elapsed) = gan::infer(model, &sample)?;
        if !elapsed_ms.is_null() {
            *elapsed_ms = elapsed.as_secs_f64() * 1e3;
        }
        put(out, Sto2Map(map))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sto2_model_free(model: *mut Sto2Model) {
    free(model)
}

/// SSIM, mean absolute error and p_HAP of `predicted` against `reference`
/// over their jointly effective pixels.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sto2_evaluate(
    predicted: *const Sto2Map,
    reference: *const Sto2Map,
    out: *mut Sto2Metrics,
) -> Sto2Status {
    guard(|| {
        let (p, r) = (
            &obj(predicted, "predicted")?.0,
            &obj(reference, "reference")?.0,
        );
        if out.is_null() {
            return Err(null("metrics"));
        }
        let m = metrics::evaluate("ffi", p, r, &SsimParams::default())?;
        *out = Sto2Metrics {
            ssim: m.ssim,
            e_bar: m.e_bar,
            p_hap: metrics::p_hap(p, r, HAP_THRESHOLD)?,
            n_effective: m.n_effective,
        };
        Ok(())
    })
}
