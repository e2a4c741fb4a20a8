//! C API over the retrieval side of `voxdistill`: load a model and a scene
//! index, query them with a teacher feature map, and score duplicate pairs.
//!
//! Every fallible function returns a [`VdStatus`]. On failure the message is
//! available from [`vd_last_error_message`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function; passing null to a `_free` function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use voxdistill::config::Config;
use voxdistill::error::Error;
use voxdistill::image::FeatureImage;
use voxdistill::io;
use voxdistill::model::{student2d_forward, ModelParams};
use voxdistill::retrieval::{dup_detect, image_query, query_image, Intrinsics, QueryMode, SceneIndexEntry};

/// Status codes. Values 2 to 10 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VdStatus {
    Ok = 0,
    Input = 2,
    BehindCamera = 3,
    Config = 4,
    Format = 5,
    Digest = 6,
    Io = 7,
    Numeric = 8,
    Insufficient = 9,
    Contract = 10,
    NullPointer = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VdMode {
    Global = 0,
    Kp = 1,
}

/// Pinhole intrinsics of a query feature map, in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct VdIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

pub struct VdConfig(Config);

pub struct VdModel(ModelParams);

pub struct VdIndex {
    entries: Vec<SceneIndexEntry>,
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VdStatus {
    match e.code() {
        2 => VdStatus::Input,
        3 => VdStatus::BehindCamera,
        4 => VdStatus::Config,
        5 => VdStatus::Format,
        6 => VdStatus::Digest,
        7 => VdStatus::Io,
        8 => VdStatus::Numeric,
        9 => VdStatus::Insufficient,
        _ => VdStatus::Contract,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VdStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            VdStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            VdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::Input(format!("{what} is not UTF-8"))))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn read(path: &str) -> Result<Vec<u8>, Error> {
    io::read_file(Path::new(path))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn vd_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_config_default(out: *mut *mut VdConfig) -> VdStatus {
    guard(|| {
        *out_ptr(out, "out")? = boxed(VdConfig(Config::default()));
        Ok(())
    })
}

/// Parses a JSON configuration document. Missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_config_from_json(json: *const c_char, out: *mut *mut VdConfig) -> VdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = Config::from_json(str_arg(json, "json")?)?;
        *out = boxed(VdConfig(c));
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vd_config_free(config: *mut VdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Loads model parameters written by `voxdistill train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_model_load(path: *const c_char, out: *mut *mut VdModel) -> VdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let params = io::decode_model(&read(str_arg(path, "path")?)?)?;
        *out = boxed(VdModel(params));
        Ok(())
    })
}

/// Feature channels the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vd_model_feature_dim(model: *const VdModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.feature_dim())
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vd_model_free(model: *mut VdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a scene index written by `voxdistill build-index`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vd_index_load(path: *const c_char, out: *mut *mut VdIndex) -> VdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let entries = io::decode_index(&read(str_arg(path, "path")?)?)?;
        let ids = entries
            .iter()
            .map(|e| CString::new(e.id.clone()).map_err(|_| Error::Format("scene id contains NUL".into())))
            .collect::<Result<Vec<_>, _>>()?;
        *out = boxed(VdIndex { entries, ids });
        Ok(())
    })
}

/// Number of scenes, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vd_index_len(index: *const VdIndex) -> usize {
    index.as_ref().map_or(0, |i| i.entries.len())
}

/// Id of scene `i`, owned by the index. Null when out of range.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vd_index_scene_id(index: *const VdIndex, i: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|x| x.ids.get(i))
        .map_or(std::ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `index` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vd_index_free(index: *mut VdIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Ranks the indexed scenes for one teacher feature map.
///
/// `features` holds `height * width * channels` floats, row-major with
/// channels innermost. `valid` is null (all pixels valid) or `width * height`
/// bytes, nonzero meaning valid. On success `*out_best` is the index position
/// of the top scene, `*out_score` its score, and, when `scores` is not null,
/// `scores[i]` receives the score of scene `i` in index order. `*out_fell_back`
/// may be null; otherwise it reports a keypoint query that had no keypoints
/// and was ranked by global descriptor.
///
/// # Safety
/// All non-null pointers must be valid for the stated lengths; `scores` must
/// hold `vd_index_len(index)` doubles.
#[no_mangle]
pub unsafe extern "C" fn vd_query(
    config: *const VdConfig,
    index: *const VdIndex,
    model: *const VdModel,
    features: *const f32,
    width: u32,
    height: u32,
    channels: u32,
    intrinsics: VdIntrinsics,
    valid: *const u8,
    mode: VdMode,
    out_best: *mut usize,
    out_score: *mut f64,
    scores: *mut f64,
    out_fell_back: *mut bool,
) -> VdStatus {
    guard(|| {
        let config = &deref(config, "config")?.0;
        let index = deref(index, "index")?;
        let model = &deref(model, "model")?.0;
        if features.is_null() {
            return Err(Fail::Null("features"));
        }
        let out_best = out_ptr(out_best, "out_best")?;
        let out_score = out_ptr(out_score, "out_score")?;
        let (w, h, c) = (width as usize, height as usize, channels as usize);
        if w == 0 || h == 0 || c == 0 {
            return Err(Error::Input("feature map dimensions must be positive".into()).into());
        }
        let data: Vec<f64> = std::slice::from_raw_parts(features, w * h * c)
            .iter()
            .map(|&x| x as f64)
            .collect();
        let map = FeatureImage::from_data(w, h, c, data)?;
        let mask: Option<Vec<bool>> = (!valid.is_null()).then(|| {
            std::slice::from_raw_parts(valid, w * h)
                .iter()
                .map(|&v| v != 0)
                .collect()
        });
        let cfg = &config.eval.retrieval;
        let maps = student2d_forward(model, &map)?;
        let intr = Intrinsics {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width,
            height,
        };
        let query = image_query(&maps.f2d, &maps.p2d, mask.as_deref(), intr, &cfg.keypoints_2d)?;
        let mode = match mode {
            VdMode::Global => QueryMode::Global,
            VdMode::Kp => QueryMode::Kp,
        };
        let result = query_image(&index.entries, &query, mode, cfg, config.seed ^ 0x9e)?;
        let top = &result.ranking[0];
        *out_best = index
            .entries
            .iter()
            .position(|e| e.id == top.id)
            .expect("ranked id is indexed");
        *out_score = top.score;
        if !scores.is_null() {
            let scores = std::slice::from_raw_parts_mut(scores, index.entries.len());
            for r in &result.ranking {
                let i = index
                    .entries
                    .iter()
                    .position(|e| e.id == r.id)
                    .expect("ranked id is indexed");
                scores[i] = r.score;
            }
        }
        if let Some(f) = out_fell_back.as_mut() {
            *f = result.fell_back;
        }
        Ok(())
    })
}

/// Duplicate verdict for scenes `a` and `b` of the index. The score is the
/// global cosine in global mode and the rigid inlier fraction in keypoint mode.
///
/// # Safety
/// Handles must be live and output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn vd_dup_pair(
    config: *const VdConfig,
    index: *const VdIndex,
    a: usize,
    b: usize,
    mode: VdMode,
    out_duplicate: *mut bool,
    out_score: *mut f64,
) -> VdStatus {
    guard(|| {
        let config = &deref(config, "config")?.0;
        let index = deref(index, "index")?;
        let out_duplicate = out_ptr(out_duplicate, "out_duplicate")?;
        let out_score = out_ptr(out_score, "out_score")?;
        let n = index.entries.len();
        if a >= n || b >= n {
            return Err(Error::Input(format!("pair ({a}, {b}) is outside an index of {n} scenes")).into());
        }
        let mode = match mode {
            VdMode::Global => QueryMode::Global,
            VdMode::Kp => QueryMode::Kp,
        };
        let report = dup_detect(
            &index.entries,
            &[(a, b, None)],
            mode,
            &config.eval.retrieval,
            config.seed,
        )?;
        *out_duplicate = report.verdicts[0].duplicate;
        *out_score = report.verdicts[0].score;
        Ok(())
    })
}
