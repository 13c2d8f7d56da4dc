//! C interface to the stratformer library.
//!
//! Objects are opaque handles created by `st_*_new`-style functions and
//! released with the matching `st_*_free`. Every fallible call returns an
//! [`StStatus`]; on failure a message is kept per thread and can be read with
//! [`st_last_error`]. Panics never cross the boundary: they are reported as
//! `ST_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use stratformer::cli_io::{read_cloud, write_cloud, RunConfig};
use stratformer::diffcore::{load_checkpoint, save_checkpoint};
use stratformer::geometry::PointCloud;
use stratformer::network::{Model, ModelConfig};
use stratformer::training::{argmax_rows, synth_scene, train_model, AugmentFlags, SceneSource, SynthSpec, TrainConfig};
use stratformer::verify::oracle_compare;
use stratformer::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Labelled or unlabelled point cloud.
pub struct StCloud {
    inner: PointCloud,
}

/// Segmentation model with 32-bit parameters.
pub struct StModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StStatus {
    match e {
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::IndexOutOfRange { .. } | Error::MissingWorkspace => StStatus::InvalidArgument,
        Error::NonFiniteGradient { .. } | Error::Diverged { .. } => StStatus::Numeric,
        Error::Parse { .. } => StStatus::Parse,
        Error::Config(_) => StStatus::Config,
        Error::Io { .. } => StStatus::Io,
    }
}

struct Fail(StStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            StStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            StStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(StStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(StStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn cloud_ref<'a>(p: *const StCloud) -> Result<&'a PointCloud, Fail> {
    p.as_ref().map(|c| &c.inner).ok_or_else(|| null("cloud"))
}

unsafe fn model_ref<'a>(p: *const StModel) -> Result<&'a StModel, Fail> {
    p.as_ref().ok_or_else(|| null("model"))
}

/// Why the most recent call on this thread failed, or null if it succeeded.
/// The string stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn st_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a cloud from `n` positions (`n × 3`), `n × channels` features and
/// optional labels (`labels` may be null).
#[no_mangle]
pub unsafe extern "C" fn st_cloud_new(
    positions: *const f64,
    n: usize,
    features: *const f64,
    channels: usize,
    labels: *const u32,
    out: *mut *mut StCloud,
) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let flat = slice_arg(
            positions,
            n.checked_mul(3).ok_or_else(|| Fail(StStatus::InvalidArgument, "n too large".into()))?,
            "positions",
        )?;
        let feats = slice_arg(features, n.saturating_mul(channels), "features")?;
        let labels = if labels.is_null() {
            None
        } else {
            Some(slice_arg(labels, n, "labels")?.to_vec())
        };
        let pos = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let cloud = PointCloud::new(pos, feats.to_vec(), channels, labels)?;
        *out = Box::into_raw(Box::new(StCloud { inner: cloud }));
        Ok(())
    })
}

/// Reads a text or binary cloud file.
#[no_mangle]
pub unsafe extern "C" fn st_cloud_read(path: *const c_char, out: *mut *mut StCloud) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cloud = read_cloud(PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(StCloud { inner: cloud }));
        Ok(())
    })
}

/// Writes a cloud; the format follows the file extension.
#[no_mangle]
pub unsafe extern "C" fn st_cloud_write(cloud: *const StCloud, path: *const c_char) -> StStatus {
    guard(|| {
        write_cloud(cloud_ref(cloud)?, PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Generates a synthetic scene: `two_class`, `shapes` or `long_range`.
#[no_mangle]
pub unsafe extern "C" fn st_cloud_synth(preset: *const c_char, seed: u64, out: *mut *mut StCloud) -> StStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cloud = synth_scene(&SynthSpec::preset(str_arg(preset, "preset")?, seed)?)?;
        *out = Box::into_raw(Box::new(StCloud { inner: cloud }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn st_cloud_len(cloud: *const StCloud, out: *mut usize) -> StStatus {
    guard(|| {
        *out_arg(out, "out")? = cloud_ref(cloud)?.len();
        Ok(())
    })
}

/// Copies the labels into `out` (`len` entries). Fails with
/// `ST_STATUS_INVALID_ARGUMENT` if the cloud has none.
#[no_mangle]
pub unsafe extern "C" fn st_cloud_labels(cloud: *const StCloud, out: *mut u32, len: usize) -> StStatus {
    guard(|| {
        let c = cloud_ref(cloud)?;
        let labels = c
            .labels
            .as_ref()
            .ok_or_else(|| Fail(StStatus::InvalidArgument, "cloud has no labels".into()))?;
        copy_out(labels, out, len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn st_cloud_free(cloud: *mut StCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, len: usize) -> Result<(), Fail> {
    if len < src.len() {
        return Err(Fail(
            StStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        slice::from_raw_parts_mut(out, src.len()).copy_from_slice(src);
    }
    Ok(())
}

fn new_model(config: ModelConfig, seed: u64, out: &mut *mut StModel) -> Result<(), Fail> {
    let model = Model::<f32>::new(config, seed)?;
    *out = Box::into_raw(Box::new(StModel { inner: model }));
    Ok(())
}

/// Fresh model from a named preset: `s3dis`, `scannet` or `toy`.
#[no_mangle]
pub unsafe extern "C" fn st_model_new(preset: *const c_char, seed: u64, out: *mut *mut StModel) -> StStatus {
    guard(|| new_model(ModelConfig::preset(str_arg(preset, "preset")?)?, seed, out_arg(out, "out")?))
}

/// Fresh model from a TOML run configuration file.
#[no_mangle]
pub unsafe extern "C" fn st_model_from_config(path: *const c_char, seed: u64, out: *mut *mut StModel) -> StStatus {
    guard(|| {
        let cfg = RunConfig::load(PathBuf::from(str_arg(path, "path")?))?;
        new_model(cfg.model, seed, out_arg(out, "out")?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn st_model_num_classes(model: *const StModel, out: *mut usize) -> StStatus {
    guard(|| {
        *out_arg(out, "out")? = model_ref(model)?.inner.config.num_classes;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn st_model_load(model: *mut StModel, path: *const c_char) -> StStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let records = load_checkpoint(PathBuf::from(str_arg(path, "path")?))?;
        m.inner.params.load_records(&records)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn st_model_save(model: *const StModel, path: *const c_char) -> StStatus {
    guard(|| {
        save_checkpoint(&model_ref(model)?.inner.params, PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Row-major `N × num_classes` logits into `out` (`len` floats).
#[no_mangle]
pub unsafe extern "C" fn st_model_logits(model: *const StModel, cloud: *const StCloud, out: *mut f32, len: usize) -> StStatus {
    guard(|| {
        let logits = model_ref(model)?.inner.predict(cloud_ref(cloud)?)?;
        copy_out(logits.data(), out, len)
    })
}

/// Predicted class per point into `out` (`len` entries).
#[no_mangle]
pub unsafe extern "C" fn st_model_predict(model: *const StModel, cloud: *const StCloud, out: *mut u32, len: usize) -> StStatus {
    guard(|| {
        let logits = model_ref(model)?.inner.predict(cloud_ref(cloud)?)?;
        copy_out(&argmax_rows(&logits), out, len)
    })
}

/// Trains in place for `steps` steps on a labelled cloud. If `losses` is not
/// null it receives one loss per step (`steps` floats).
#[no_mangle]
pub unsafe extern "C" fn st_model_train(
    model: *mut StModel,
    cloud: *const StCloud,
    steps: usize,
    lr: f64,
    seed: u64,
    augment: bool,
    losses: *mut f64,
) -> StStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let tc = TrainConfig {
            steps,
            lr,
            seed,
            augment: if augment { AugmentFlags::default() } else { AugmentFlags::none() },
            ..TrainConfig::default()
        };
        let records = train_model(&mut m.inner, &SceneSource::Fixed(cloud_ref(cloud)?.clone()), &tc)?;
        if !losses.is_null() {
            let l: Vec<f64> = records.iter().map(|r| r.loss).collect();
            copy_out(&l, losses, steps)?;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn st_model_free(model: *mut StModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Largest deviation between the attention kernel and the padded oracle over
/// `trials` random instances.
#[no_mangle]
pub unsafe extern "C" fn st_oracle_compare(trials: usize, seed: u64, max_deviation: *mut f64) -> StStatus {
    guard(|| {
        let out = out_arg(max_deviation, "max_deviation")?;
        *out = oracle_compare(trials, seed)?.max_deviation;
        Ok(())
    })
}
