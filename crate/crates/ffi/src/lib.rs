//! C ABI over the `vqad` decoder: decode a bitstream (or a prefix of it),
//! query points and rays, and read size accounting.
//!
//! Every function returns a [`VqadStatus`]; on failure the message is
//! available from [`vqad_last_error_message`] on the same thread. Models are
//! opaque handles released with [`vqad_free`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vqad::codec::{self, CodecError};
use vqad::field::{FieldError, NeuralField, Ray, TaskKind};

/// Decoded model behind an opaque pointer.
pub struct VqadModel {
    field: NeuralField,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Not a stream, unsupported version, or corrupt contents.
    InvalidStream = 3,
    /// The stream ends before the requested levels are complete.
    Truncated = 4,
    /// Output buffer too small.
    BufferTooSmall = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqadTask {
    Image = 0,
    Sdf = 1,
    Radiance = 2,
}

/// Byte counts of the encoded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VqadSizeReport {
    pub header: usize,
    pub mlp: usize,
    /// Per-level framing plus occupancy bitmaps.
    pub structure: usize,
    pub codebooks: usize,
    pub indices: usize,
    /// Raw fp16 features of unquantized levels.
    pub features: usize,
    pub total: usize,
    /// Decoder plus uncompressed fp16 grid, over decoder plus stored grid
    /// payload.
    pub compression_ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(VqadStatus, String);

impl From<CodecError> for Fail {
    fn from(e: CodecError) -> Self {
        let status = match e {
            CodecError::Truncated(_) | CodecError::IncompleteLevel { .. } => VqadStatus::Truncated,
            _ => VqadStatus::InvalidStream,
        };
        Fail(status, e.to_string())
    }
}

impl From<FieldError> for Fail {
    fn from(e: FieldError) -> Self {
        Fail(VqadStatus::InvalidArgument, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VqadStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(VqadStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VqadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VqadStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            VqadStatus::Internal
        }
    }
}

unsafe fn model<'a>(m: *const VqadModel) -> Result<&'a NeuralField, Fail> {
    m.as_ref().map(|m| &m.field).ok_or_else(|| null("model"))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null("data"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn store(out: *mut *mut VqadModel, field: NeuralField) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(VqadModel { field }));
    Ok(())
}

/// Decodes a complete `.vqad` stream into `*out`.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` to a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vqad_decode(
    data: *const u8,
    len: usize,
    out: *mut *mut VqadModel,
) -> VqadStatus {
    guard(|| {
        let field = codec::decode(bytes(data, len)?)?;
        store(out, field)
    })
}

/// Decodes the first `levels` levels of a possibly truncated stream.
///
/// # Safety
/// As for [`vqad_decode`].
#[no_mangle]
pub unsafe extern "C" fn vqad_decode_prefix(
    data: *const u8,
    len: usize,
    levels: usize,
    out: *mut *mut VqadModel,
) -> VqadStatus {
    guard(|| {
        if levels == 0 {
            return Err(bad("levels must be positive"));
        }
        let field = codec::decode_prefix(bytes(data, len)?, levels)?;
        store(out, field)
    })
}

/// Number of whole levels a stream prefix of `len` bytes can render
/// (0 when not even level 0 is complete).
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vqad_complete_levels(
    data: *const u8,
    len: usize,
    out: *mut usize,
) -> VqadStatus {
    guard(|| {
        let n = codec::level_ends(bytes(data, len)?)?.len();
        out.as_mut().map(|o| *o = n).ok_or_else(|| null("out"))
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a decode call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vqad_free(model: *mut VqadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vqad_levels(model: *const VqadModel, out: *mut usize) -> VqadStatus {
    guard(|| {
        let n = self::model(model)?.levels();
        out.as_mut().map(|o| *o = n).ok_or_else(|| null("out"))
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vqad_task(model: *const VqadModel, out: *mut VqadTask) -> VqadStatus {
    guard(|| {
        let t = match self::model(model)?.task {
            TaskKind::Image => VqadTask::Image,
            TaskKind::Sdf => VqadTask::Sdf,
            TaskKind::Radiance => VqadTask::Radiance,
        };
        out.as_mut().map(|o| *o = t).ok_or_else(|| null("out"))
    })
}

/// Spatial input dimension (2 or 3) and output width of the decoder.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vqad_dims(
    model: *const VqadModel,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> VqadStatus {
    guard(|| {
        let f = self::model(model)?;
        let (i, o) = (
            input_dim.as_mut().ok_or_else(|| null("input_dim"))?,
            output_dim.as_mut().ok_or_else(|| null("output_dim"))?,
        );
        *i = f.task.spatial_dim();
        *o = f.task.output_dim();
        Ok(())
    })
}

/// Evaluates the decoder at one point with levels `0..=lod`.
///
/// `x` holds the point's 2 or 3 coordinates in `[-1, 1]`. `dir` is the
/// 3-component view direction for radiance models and must be null
/// otherwise. Writes the output width to `written` (if not null).
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vqad_decode_point(
    model: *const VqadModel,
    x: *const f64,
    x_len: usize,
    dir: *const f64,
    lod: usize,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> VqadStatus {
    guard(|| {
        let f = self::model(model)?;
        if x.is_null() {
            return Err(null("x"));
        }
        let x = std::slice::from_raw_parts(x, x_len);
        if x_len != f.task.spatial_dim() {
            return Err(bad(format!(
                "point has {x_len} coordinates, model expects {}",
                f.task.spatial_dim()
            )));
        }
        if lod >= f.levels() {
            return Err(bad(format!(
                "lod {lod} out of range for {} levels",
                f.levels()
            )));
        }
        let dir = (!dir.is_null()).then(|| {
            let d = std::slice::from_raw_parts(dir, 3);
            [d[0], d[1], d[2]]
        });
        let y = f.decode_point(x, dir, lod)?;
        if let Some(w) = written.as_mut() {
            *w = y.len();
        }
        if out_len < y.len() {
            return Err(Fail(
                VqadStatus::BufferTooSmall,
                format!("output needs {} values", y.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(y.as_ptr(), out, y.len());
        Ok(())
    })
}

/// Volume-renders one ray of a radiance model with levels `0..=lod`,
/// writing `[R, G, B, opacity]` to `rgba`.
///
/// # Safety
/// `origin` and `direction` must point to 3 values, `rgba` to 4 writable.
#[no_mangle]
pub unsafe extern "C" fn vqad_render_ray(
    model: *const VqadModel,
    origin: *const f64,
    direction: *const f64,
    near: f64,
    far: f64,
    lod: usize,
    rgba: *mut f64,
) -> VqadStatus {
    guard(|| {
        let f = self::model(model)?;
        if origin.is_null() || direction.is_null() || rgba.is_null() {
            return Err(null("origin, direction or rgba"));
        }
        if lod >= f.levels() {
            return Err(bad(format!(
                "lod {lod} out of range for {} levels",
                f.levels()
            )));
        }
        let o = std::slice::from_raw_parts(origin, 3);
        let d = std::slice::from_raw_parts(direction, 3);
        let ray = Ray::new([o[0], o[1], o[2]], [d[0], d[1], d[2]], near, far)?;
        let c = f.render_ray(&ray, lod)?;
        let out = std::slice::from_raw_parts_mut(rgba, 4);
        out[..3].copy_from_slice(&c.rgb);
        out[3] = c.opacity;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vqad_size_report(
    model: *const VqadModel,
    out: *mut VqadSizeReport,
) -> VqadStatus {
    guard(|| {
        let r = codec::size_report(self::model(model)?)?;
        let structure = r.levels.iter().map(|l| l.framing + l.occupancy).sum();
        let report = VqadSizeReport {
            header: r.header,
            mlp: r.mlp,
            structure,
            codebooks: r.codebook_bytes(),
            indices: r.index_bytes(),
            features: r.feature_bytes(),
            total: r.total,
            compression_ratio: r.compression_ratio(),
        };
        out.as_mut().map(|o| *o = report).ok_or_else(|| null("out"))
    })
}

/// `16mk / (mb + k·2^b)`: an fp16 grid of `m` vertices and width `k` against
/// `b`-bit indices plus one codebook.
#[no_mangle]
pub extern "C" fn vqad_compression_ratio(m: f64, k: f64, b: f64) -> f64 {
    vqad::vq::compression_ratio(m, k, b)
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// excluding the terminator; pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vqad_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
