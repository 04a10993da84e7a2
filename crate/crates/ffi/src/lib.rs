//! C ABI over `grownet`: load a checkpoint, run inference, read structural
//! sizes, prune and save, and generate two-spirals data.
//!
//! Every function returns a [`GrownetStatus`]. On failure a message is kept
//! per thread and can be read with [`grownet_last_error_message`]. Handles
//! are opaque and owned by the caller until passed to
//! [`grownet_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use grownet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use grownet::data::{generate_two_spirals, SpiralSpec, SpiralVariant};
use grownet::numeric::Matrix;
use grownet::{Architecture, Error, Network};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrownetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Data = 6,
    Numerical = 7,
    /// The query does not apply to this architecture (for example the hard
    /// size of a tunnel network).
    NotApplicable = 8,
    /// An internal panic was caught.
    Panic = 9,
}

/// A loaded checkpoint.
pub struct GrownetModel {
    checkpoint: Checkpoint,
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GrownetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Usage(_) => GrownetStatus::InvalidArgument,
            Error::Data(_) => GrownetStatus::Data,
            Error::Numerical(_) => GrownetStatus::Numerical,
            Error::Parse { .. } => GrownetStatus::Parse,
            Error::Checkpoint(_) => GrownetStatus::Checkpoint,
            Error::Io { .. } => GrownetStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GrownetStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GrownetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrownetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
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
            GrownetStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(GrownetStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(GrownetStatus::NullPointer, format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(GrownetStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

/// Row-major `rows x cols` matrix copied from caller memory.
unsafe fn read_matrix(inputs: *const f64, rows: usize, cols: usize) -> Result<Matrix, Failure> {
    if rows == 0 || cols == 0 {
        return Err(invalid("inputs must have at least one row and one column"));
    }
    let len = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
    let data = std::slice::from_raw_parts(non_null(inputs, "inputs")?, len).to_vec();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

fn check_cols(model: &GrownetModel, cols: usize) -> Result<(), Failure> {
    let want = model.net.spec().input_dim;
    if cols != want {
        return Err(invalid(format!("model expects {want} input columns, got {cols}")));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn grownet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forgets the last error message on this thread.
#[no_mangle]
pub extern "C" fn grownet_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grownet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSON checkpoint. On success `*model_out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `model_out` writable.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_load(path: *const c_char, model_out: *mut *mut GrownetModel) -> GrownetStatus {
    guard(|| {
        let slot = out(model_out, "model_out")?;
        *slot = ptr::null_mut();
        let checkpoint = load_checkpoint(&PathBuf::from(c_str(path, "path")?))?;
        let net = checkpoint.network()?;
        *slot = Box::into_raw(Box::new(GrownetModel { checkpoint, net }));
        Ok(())
    })
}

/// Writes the model, including any pruning, as a JSON checkpoint.
///
/// # Safety
/// `model` must come from [`grownet_model_load`]; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_save(model: *const GrownetModel, path: *const c_char) -> GrownetStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let ck = Checkpoint::new(
            &m.checkpoint.config,
            m.checkpoint.epoch,
            &m.net,
            m.checkpoint.rng.clone(),
        );
        save_checkpoint(&ck, &PathBuf::from(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`grownet_model_load`] and not have
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_free(model: *mut GrownetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input columns, output columns and parameter count (budding trees count
/// only their evaluated path). Any of the out pointers may be null.
///
/// # Safety
/// `model` must come from [`grownet_model_load`].
#[no_mangle]
pub unsafe extern "C" fn grownet_model_dims(
    model: *const GrownetModel,
    input_dim: *mut usize,
    output_dim: *mut usize,
    num_params: *mut usize,
) -> GrownetStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let spec = m.net.spec();
        for (p, v) in [
            (input_dim, spec.input_dim),
            (output_dim, spec.output_dim),
            (num_params, m.net.num_params()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Architecture name (`tunnel`, `highway`, `budding` or `mlp-baseline`) as a
/// static string.
///
/// # Safety
/// `model` must come from [`grownet_model_load`]; `name_out` writable.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_architecture(
    model: *const GrownetModel,
    name_out: *mut *const c_char,
) -> GrownetStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let name = match m.net.spec().architecture {
            Architecture::Tunnel => "tunnel\0",
            Architecture::Highway => "highway\0",
            Architecture::Budding => "budding\0",
            Architecture::MlpBaseline => "mlp-baseline\0",
        };
        *out(name_out, "name_out")? = name.as_ptr().cast();
        Ok(())
    })
}

/// Output probabilities for `rows` row-major inputs of `cols` columns.
/// `out` must hold `rows * output_dim` values.
///
/// # Safety
/// `inputs` must point to `rows * cols` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_predict(
    model: *const GrownetModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> GrownetStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        check_cols(m, cols)?;
        let x = read_matrix(inputs, rows, cols)?;
        let p = m.net.predict(&x)?;
        let need = p.as_slice().len();
        if out_len < need {
            return Err(invalid(format!("output buffer holds {out_len} values, need {need}")));
        }
        std::slice::from_raw_parts_mut(out(out_probs, "out")?, need).copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Total soft size. Highway gates are averaged over the given inputs; the
/// other architectures ignore them, and they may then be null with zero
/// rows. MLP baselines have no soft size.
///
/// # Safety
/// `inputs` must point to `rows * cols` doubles when the model is highway.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_soft_size(
    model: *const GrownetModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    size_out: *mut f64,
) -> GrownetStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let x = if m.net.spec().architecture == Architecture::Highway {
            check_cols(m, cols)?;
            read_matrix(inputs, rows, cols)?
        } else {
            Matrix::zeros(0, m.net.spec().input_dim)
        };
        let total = m.net.sizes(&x)?.total;
        *out(size_out, "size_out")? = total.ok_or_else(|| {
            Failure(
                GrownetStatus::NotApplicable,
                "this architecture has no soft size".into(),
            )
        })?;
        Ok(())
    })
}

/// Hard size (evaluated nodes) of a budding tree.
///
/// # Safety
/// `model` must come from [`grownet_model_load`]; `size_out` writable.
#[no_mangle]
pub unsafe extern "C" fn grownet_model_hard_size(model: *const GrownetModel, size_out: *mut usize) -> GrownetStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let tree = m.net.budding_tree().ok_or_else(|| {
            Failure(
                GrownetStatus::NotApplicable,
                "hard size is defined for budding trees only".into(),
            )
        })?;
        *out(size_out, "size_out")? = tree.hard_size();
        Ok(())
    })
}

/// Drops stale budding subtrees in place. Predictions are unchanged; other
/// architectures are left as they are.
///
/// # Safety
/// `model` must come from [`grownet_model_load`].
#[no_mangle]
pub unsafe extern "C" fn grownet_model_prune(model: *mut GrownetModel) -> GrownetStatus {
    guard(|| {
        let m = out(model, "model")?;
        m.net = m.net.prune_for_export();
        Ok(())
    })
}

/// Generates `2 * points_per_class` standardized two-spirals points, class 0
/// first. `variant` is `easy`, `medium` or `difficult`. `inputs_out` needs
/// room for `2 * rows` values and `labels_out` for `rows`; `*rows_out`
/// receives the row count even when the buffers are too small.
///
/// # Safety
/// The out buffers must hold `capacity_rows` rows.
#[no_mangle]
pub unsafe extern "C" fn grownet_spirals(
    variant: *const c_char,
    seed: u64,
    points_per_class: usize,
    noise_sd: f64,
    inputs_out: *mut f64,
    labels_out: *mut f64,
    capacity_rows: usize,
    rows_out: *mut usize,
) -> GrownetStatus {
    guard(|| {
        let variant: SpiralVariant = c_str(variant, "variant")?.parse()?;
        let rows_slot = out(rows_out, "rows_out")?;
        let mut spec = SpiralSpec::new(variant, seed);
        spec.points_per_class = points_per_class;
        spec.noise_sd = noise_sd;
        let d = generate_two_spirals(&spec)?;
        *rows_slot = d.len();
        if capacity_rows < d.len() {
            return Err(invalid(format!("buffers hold {capacity_rows} rows, need {}", d.len())));
        }
        std::slice::from_raw_parts_mut(out(inputs_out, "inputs_out")?, 2 * d.len())
            .copy_from_slice(d.inputs().as_slice());
        std::slice::from_raw_parts_mut(out(labels_out, "labels_out")?, d.len()).copy_from_slice(d.targets().as_slice());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_status_codes() {
        let cases = [
            (Error::Config("x".into()), GrownetStatus::InvalidArgument),
            (Error::Usage("x".into()), GrownetStatus::InvalidArgument),
            (Error::Data("x".into()), GrownetStatus::Data),
            (Error::Numerical("x".into()), GrownetStatus::Numerical),
            (Error::Checkpoint("x".into()), GrownetStatus::Checkpoint),
        ];
        for (e, want) in cases {
            let Failure(status, msg) = e.into();
            assert_eq!(status, want);
            assert!(msg.ends_with(": x"));
        }
    }

    #[test]
    fn panics_become_status_codes() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, GrownetStatus::Panic);
        let msg = unsafe { CStr::from_ptr(grownet_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic: boom");
    }

    #[test]
    fn interior_nul_in_messages_is_replaced() {
        set_error("a\0b".into());
        let msg = unsafe { CStr::from_ptr(grownet_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
