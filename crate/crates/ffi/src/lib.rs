//! C ABI over the ignition library.
//!
//! Every fallible function returns an [`IgnStatus`]; on failure the message
//! is available from [`ign_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ignition::controller::predict;
use ignition::model::ModelBundle;
use ignition::oracle::{oracle_command, OracleParams};
use ignition::render::{render, CameraParams, Frame, FrameSize};
use ignition::track::{load_track, TrackSpec, DEFAULT_DS};
use ignition::vehicle::{step, CarParams, CarState, ControlCommand, PHYSICS_DT};
use ignition::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    Mismatch = 5,
    NonFinite = 6,
    OffTrack = 7,
    Panic = 8,
}

/// A loaded model with its input normalization.
pub struct IgnModel {
    bundle: ModelBundle,
}

/// A track with the car, oracle and camera parameters used to drive and
/// render on it.
pub struct IgnTrack {
    track: TrackSpec,
    car: CarParams,
    oracle: OracleParams,
    camera: CameraParams,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgnCommand {
    /// Steering wheel degrees, negative = left.
    pub steer_deg: f64,
    pub throttle: f64,
    pub brake: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgnCarState {
    pub x: f64,
    pub y: f64,
    /// Radians, counterclockwise from +x.
    pub heading: f64,
    /// m/s.
    pub speed: f64,
    pub sim_time: f64,
    pub step_count: u64,
}

impl From<CarState> for IgnCarState {
    fn from(s: CarState) -> Self {
        Self { x: s.x, y: s.y, heading: s.heading, speed: s.speed, sim_time: s.sim_time, step_count: s.step_count }
    }
}

impl From<IgnCarState> for CarState {
    fn from(s: IgnCarState) -> Self {
        Self { x: s.x, y: s.y, heading: s.heading, speed: s.speed, sim_time: s.sim_time, step_count: s.step_count }
    }
}

impl From<ControlCommand> for IgnCommand {
    fn from(c: ControlCommand) -> Self {
        Self { steer_deg: c.steer_deg, throttle: c.throttle, brake: c.brake }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_for(e: &Error) -> IgnStatus {
    match e {
        Error::Io { .. } => IgnStatus::Io,
        Error::Checkpoint(_) | Error::Json { .. } => IgnStatus::BadCheckpoint,
        Error::Mismatch(_) | Error::Shape(_) | Error::UnsupportedSize(..) => IgnStatus::Mismatch,
        Error::NonFinite(_) | Error::NonFiniteOutput => IgnStatus::NonFinite,
        Error::OffTrack { .. } => IgnStatus::OffTrack,
        _ => IgnStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for `ign_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (IgnStatus, String)>) -> IgnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IgnStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            IgnStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (IgnStatus, String) {
    (status_for(&e), e.to_string())
}

fn null(what: &str) -> (IgnStatus, String) {
    (IgnStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (IgnStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (IgnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (IgnStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the most recent failure on this thread, or an empty string.
/// Valid until the next ignition call on the same thread.
#[no_mangle]
pub extern "C" fn ign_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code; unknown codes map to "unknown status".
#[no_mangle]
pub extern "C" fn ign_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null argument",
        2 => c"invalid argument",
        3 => c"i/o error",
        4 => c"bad checkpoint",
        5 => c"mismatch",
        6 => c"non-finite value",
        7 => c"off track",
        8 => c"internal error",
        _ => c"unknown status",
    };
    s.as_ptr()
}

#[no_mangle]
pub extern "C" fn ign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a model to release with
/// `ign_model_free`; on failure it is set to NULL.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ign_model_load(path: *const c_char, out: *mut *mut IgnModel) -> IgnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let bundle = ModelBundle::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IgnModel { bundle }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `ign_model_load` and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ign_model_free(model: *mut IgnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frame size the model expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ign_model_input_size(model: *const IgnModel, width: *mut u32, height: *mut u32) -> IgnStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let (w, h) = (width.as_mut().ok_or_else(|| null("width"))?, height.as_mut().ok_or_else(|| null("height"))?);
        let size = m.bundle.model.config().input_size();
        (*w, *h) = (size.width as u32, size.height as u32);
        Ok(())
    })
}

/// Predicts a command for one row-major grayscale frame of exactly the
/// model's input size.
///
/// # Safety
/// `pixels` must point to `len` readable bytes; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ign_model_predict(
    model: *const IgnModel,
    pixels: *const u8,
    len: usize,
    width: u32,
    height: u32,
    speed_mph: f64,
    out: *mut IgnCommand,
) -> IgnStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if !speed_mph.is_finite() {
            return Err((IgnStatus::NonFinite, "speed is not finite".into()));
        }
        let expected = m.bundle.model.config().input_size();
        if (width as usize, height as usize) != (expected.width, expected.height) {
            return Err((IgnStatus::Mismatch, format!("frame is {width}x{height}, model expects {expected}")));
        }
        if len != expected.pixels() {
            return Err((IgnStatus::InvalidArgument, format!("{len} bytes for a {width}x{height} frame")));
        }
        let frame = Frame::new(width as usize, height as usize, std::slice::from_raw_parts(pixels, len).to_vec())
            .map_err(lib_err)?;
        let p = predict(&m.bundle, &frame, speed_mph).map_err(lib_err)?;
        *out = p.command.into();
        Ok(())
    })
}

/// Loads a bundled track by name or a track JSON file, with default car,
/// oracle and camera parameters.
///
/// # Safety
/// `name_or_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ign_track_load(name_or_path: *const c_char, out: *mut *mut IgnTrack) -> IgnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let name = str_arg(name_or_path, "name_or_path")?;
        let track = load_track(name, DEFAULT_DS).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IgnTrack {
            track,
            car: CarParams::default(),
            oracle: OracleParams::default(),
            camera: CameraParams::default(),
        }));
        Ok(())
    })
}

/// # Safety
/// `track` must come from `ign_track_load` and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ign_track_free(track: *mut IgnTrack) {
    if !track.is_null() {
        drop(Box::from_raw(track));
    }
}

/// The car at rest on the start line.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ign_track_start(track: *const IgnTrack, out: *mut IgnCarState) -> IgnStatus {
    guard(|| {
        let t = ref_arg(track, "track")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ignition::controller::start_state(&t.track).into();
        Ok(())
    })
}

/// Signed lateral offset from the centerline in meters (positive = left)
/// and arc length of the nearest centerline sample.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ign_track_locate(
    track: *const IgnTrack,
    state: *const IgnCarState,
    s: *mut f64,
    lateral_offset: *mut f64,
) -> IgnStatus {
    guard(|| {
        let t = ref_arg(track, "track")?;
        let st = CarState::from(*ref_arg(state, "state")?);
        let (s, off) = (s.as_mut().ok_or_else(|| null("s"))?, lateral_offset.as_mut().ok_or_else(|| null("lateral_offset"))?);
        if !(st.x.is_finite() && st.y.is_finite()) {
            return Err((IgnStatus::NonFinite, "position is not finite".into()));
        }
        let loc = t.track.locate(st.position());
        (*s, *off) = (loc.s, loc.lateral_offset);
        Ok(())
    })
}

/// Renders the hood camera view into `out` (`width * height` bytes).
/// `noise` toggles the camera's pixel noise.
///
/// # Safety
/// `out` must point to `out_len` writable bytes; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ign_render(
    track: *const IgnTrack,
    state: *const IgnCarState,
    width: u32,
    height: u32,
    seed: u64,
    noise: bool,
    out: *mut u8,
    out_len: usize,
) -> IgnStatus {
    guard(|| {
        let t = ref_arg(track, "track")?;
        let st = CarState::from(*ref_arg(state, "state")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let size = FrameSize::new(width as usize, height as usize);
        if out_len != size.pixels() {
            return Err((IgnStatus::InvalidArgument, format!("{out_len} bytes for a {size} frame")));
        }
        let camera = if noise { t.camera } else { t.camera.noiseless() };
        let frame = render(&t.track, &st, &camera, size, seed).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&frame.pixels);
        Ok(())
    })
}

/// The oracle's command for a state.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ign_oracle_command(track: *const IgnTrack, state: *const IgnCarState, out: *mut IgnCommand) -> IgnStatus {
    guard(|| {
        let t = ref_arg(track, "track")?;
        let st = CarState::from(*ref_arg(state, "state")?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = oracle_command(&t.track, &st, &t.car, &t.oracle).map_err(lib_err)?.into();
        Ok(())
    })
}

/// Advances the car by one 100 Hz physics step. The command is clamped to
/// its valid ranges first.
///
/// # Safety
/// Pointers must be valid; `out` may alias `state`.
#[no_mangle]
pub unsafe extern "C" fn ign_vehicle_step(
    track: *const IgnTrack,
    state: *const IgnCarState,
    command: *const IgnCommand,
    out: *mut IgnCarState,
) -> IgnStatus {
    guard(|| {
        let t = ref_arg(track, "track")?;
        let st = CarState::from(*ref_arg(state, "state")?);
        let c = *ref_arg(command, "command")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let next = step(&st, &ControlCommand::new(c.steer_deg, c.throttle, c.brake), &t.car, PHYSICS_DT).map_err(lib_err)?;
        *out = next.into();
        Ok(())
    })
}
