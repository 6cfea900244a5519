//! C ABI over `l2s-core`: load or create a model, sample latent stories, compute
//! Fréchet distances and hash configs.
//!
//! Every fallible function returns an [`L2sStatus`]; the message of the last
//! failure on the calling thread is available from [`l2s_last_error`]. Handles are
//! opaque and must be released with their `_free` function. No function unwinds
//! across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use l2s_core::checkpoint::Checkpoint;
use l2s_core::config::RunConfig;
use l2s_core::diffusion::{sample, Denoiser, DiffusionSchedule, SampleSpec};
use l2s_core::eval::fid;
use l2s_core::layout::BoundingBox;
use l2s_core::model::{Branches, Condition, LayoutCondition, Model};
use l2s_core::numerics::Tensor;
use l2s_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum L2sStatus {
    Ok = 0,
    NullArgument = 1,
    /// Bad config, arguments, shapes or files; the CLI's exit code 3.
    Invalid = 2,
    /// NaN, infinity or an all-masked attention row; the CLI's exit code 4.
    Numeric = 3,
    Io = 4,
    /// Output buffer too small; the last error names the required length.
    BufferTooSmall = 5,
    Panic = 6,
}

/// A model with its noise schedule.
pub struct L2sModel {
    model: Model,
    branches: Branches,
    schedule: DiffusionSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(e: &Error) -> L2sStatus {
    match e {
        Error::Io(_) => L2sStatus::Io,
        _ if e.exit_code() == 4 => L2sStatus::Numeric,
        _ => L2sStatus::Invalid,
    }
}

/// Run `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (L2sStatus, String)>) -> L2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => L2sStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            L2sStatus::Panic
        }
    }
}

fn core<T>(r: l2s_core::Result<T>) -> Result<T, (L2sStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (L2sStatus, String) {
    (L2sStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (L2sStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (L2sStatus::Invalid, format!("{what} is not UTF-8")))
}

/// Copies the last error message on this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length excluding the NUL.
#[no_mangle]
pub unsafe extern "C" fn l2s_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn l2s_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// A freshly initialized model from a TOML run config (`NULL` for defaults).
#[no_mangle]
pub unsafe extern "C" fn l2s_model_new(config_toml: *const c_char, out: *mut *mut L2sModel) -> L2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            core(RunConfig::from_toml(str_arg(config_toml, "config_toml")?))?
        };
        let model = core(Model::new(cfg.model.clone(), cfg.seed))?;
        let schedule = core(cfg.schedule.build())?;
        *out = Box::into_raw(Box::new(L2sModel {
            model,
            branches: Branches::Full,
            schedule,
        }));
        Ok(())
    })
}

/// Load a checkpoint file. Stage-1 checkpoints sample with the global branch only.
#[no_mangle]
pub unsafe extern "C" fn l2s_model_load(path: *const c_char, out: *mut *mut L2sModel) -> L2sStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = core(Checkpoint::load(Path::new(str_arg(path, "path")?)))?;
        let schedule = core(ck.header.config.schedule.build())?;
        let branches = if ck.header.stage == 1 { Branches::Global } else { Branches::Full };
        *out = Box::into_raw(Box::new(L2sModel {
            model: ck.into_state().model,
            branches,
            schedule,
        }));
        Ok(())
    })
}

/// Releases a model; `NULL` is ignored.
#[no_mangle]
pub unsafe extern "C" fn l2s_model_free(model: *mut L2sModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `(h, w, channels, max_frames)` of the model's latent frames.
#[no_mangle]
pub unsafe extern "C" fn l2s_model_latent_shape(model: *const L2sModel, dims: *mut usize) -> L2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let c = &m.model.cfg;
        for (i, v) in [c.h, c.w, c.latent_channels, c.max_frames].into_iter().enumerate() {
            *dims.add(i) = v;
        }
        Ok(())
    })
}

/// Number of scalar parameters.
#[no_mangle]
pub unsafe extern "C" fn l2s_model_param_count(model: *const L2sModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count(""))
}

/// Sample one story of `frames` latent frames into `out` (`frames * h * w * 4`
/// floats, frame-major then row-major, channels last).
///
/// `boxes` is `NULL` for a caption-only story or `4 * frames` values
/// `x0, y0, x1, y1` per frame in `[0, 1]`; with boxes, every frame's subject
/// caption is the global caption. `steps == 0` and `guidance < 0` select the
/// defaults (25 and 4.5).
#[no_mangle]
pub unsafe extern "C" fn l2s_sample(
    model: *const L2sModel,
    caption: *const c_char,
    boxes: *const f64,
    frames: usize,
    steps: usize,
    guidance: f64,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> L2sStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let caption = str_arg(caption, "caption")?.to_string();
        let c = &m.model.cfg;
        if frames == 0 || frames > c.max_frames {
            return Err((L2sStatus::Invalid, format!("frames must be in 1..={}", c.max_frames)));
        }
        let need = frames * c.h * c.w * c.latent_channels;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < need {
            return Err((L2sStatus::BufferTooSmall, format!("need {need} floats, got {out_len}")));
        }
        let layout = if boxes.is_null() {
            None
        } else {
            let raw = std::slice::from_raw_parts(boxes, 4 * frames);
            let bx = raw
                .chunks(4)
                .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
                .collect::<l2s_core::Result<Vec<_>>>();
            Some(LayoutCondition {
                boxes: core(bx)?,
                subject_captions: vec![caption.clone(); frames],
                reference: None,
                all_valid_masks: false,
            })
        };
        let mut spec = SampleSpec {
            seed,
            ..SampleSpec::default()
        };
        if steps > 0 {
            spec.steps = steps;
        }
        if guidance >= 0.0 {
            spec.guidance_scale = guidance;
        }
        let cond = Condition {
            global_caption: caption,
            layout,
        };
        let den = Denoiser {
            model: &m.model,
            branches: m.branches,
        };
        let z = core(sample(&den, &m.schedule, &spec, &[cond], frames, (c.h, c.w, c.latent_channels)))?;
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, s) in dst.iter_mut().zip(z.data()) {
            *d = *s as f32;
        }
        Ok(())
    })
}

/// Fréchet distance between row sets `a (na, d)` and `b (nb, d)`, row-major.
#[no_mangle]
pub unsafe extern "C" fn l2s_fid(a: *const f64, na: usize, b: *const f64, nb: usize, d: usize, out: *mut f64) -> L2sStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("a, b or out"));
        }
        let ta = core(Tensor::new(&[na, d], std::slice::from_raw_parts(a, na * d).to_vec()))?;
        let tb = core(Tensor::new(&[nb, d], std::slice::from_raw_parts(b, nb * d).to_vec()))?;
        *out = core(fid(&ta, &tb))?;
        Ok(())
    })
}

/// Short hash of a TOML run config as 16 hex digits plus NUL; `buf` needs 17 bytes.
#[no_mangle]
pub unsafe extern "C" fn l2s_config_hash(config_toml: *const c_char, buf: *mut c_char, len: usize) -> L2sStatus {
    guard(|| {
        let cfg = core(RunConfig::from_toml(str_arg(config_toml, "config_toml")?))?;
        let h = cfg.hash();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < h.len() + 1 {
            return Err((L2sStatus::BufferTooSmall, format!("need {} bytes", h.len() + 1)));
        }
        ptr::copy_nonoverlapping(h.as_ptr() as *const c_char, buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}
