//! C interface to the corrnav simulator and trained policies.
//!
//! Every function returns a [`CnStatus`]. On failure the message is kept
//! per thread and read with [`cn_last_error_message`]. Handles are opaque;
//! each `*_new`/`*_load`/`*_generate` pairs with a `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use corrnav::evaluation::{load_policy, Controller, NetController};
use corrnav::seed::rng_for;
use corrnav::worldsim::{
    generate_scene, sample_episode, Action, CameraParams, EpisodeSpec, GoalCameraSetting, NavEnv, Pose, SceneGrid,
    World,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    World = 3,
    Io = 4,
    EpisodeDone = 5,
    BufferTooSmall = 6,
    Model = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnAction {
    Forward = 0,
    Left = 1,
    Right = 2,
    Stop = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnSetting {
    AgentMatched = 0,
    UserMatched = 1,
    Extreme = 2,
}

/// Position in meters, heading in radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnStepInfo {
    pub pose: CnPose,
    /// Geodesic distance to the goal.
    pub distance: f64,
    /// Heading error against the goal view.
    pub angle: f64,
    pub steps: u32,
    pub done: bool,
    pub success: bool,
    pub collided: bool,
}

/// A scene and its navigation graph.
pub struct CnScene {
    world: Arc<World>,
}

/// One navigation episode.
pub struct CnEnv {
    env: NavEnv,
    collided: bool,
}

/// A trained policy with its recurrent state for one episode.
pub struct CnPolicy {
    controller: NetController,
    image_size: usize,
    ready: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CnStatus, String);

impl<E: std::fmt::Display> From<(CnStatus, E)> for Failure {
    fn from((s, e): (CnStatus, E)) -> Self {
        Failure(s, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CnStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(CnStatus::NullPointer, format!("{name} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn as_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(CnStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
    Ok(Path::new(s))
}

fn pose(p: CnPose) -> Pose {
    Pose::new(p.x, p.y, p.theta)
}

fn cn_pose(p: Pose) -> CnPose {
    CnPose { x: p.x, y: p.y, theta: p.theta }
}

fn setting(s: u32) -> Result<GoalCameraSetting, Failure> {
    GoalCameraSetting::ALL
        .get(s as usize)
        .copied()
        .ok_or_else(|| Failure(CnStatus::InvalidArgument, format!("unknown goal setting {s}")))
}

fn info(c: &CnEnv) -> CnStepInfo {
    let e = &c.env;
    CnStepInfo {
        pose: cn_pose(e.pose()),
        distance: e.distance(),
        angle: e.angle(),
        steps: e.steps(),
        done: e.is_done(),
        success: e.is_success(),
        collided: c.collided,
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn cn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Procedural scene of `size` x `size` cells.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_scene_generate(
    seed: u64,
    size: usize,
    wall_density: f64,
    out: *mut *mut CnScene,
) -> CnStatus {
    guard(|| {
        let scene = generate_scene(seed, size, wall_density).map_err(|e| (CnStatus::World, e))?;
        put(out, CnScene { world: Arc::new(World::new(scene)) })
    })
}

/// Scene from a JSON file written by `corrnav gen`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_scene_load(path: *const c_char, out: *mut *mut CnScene) -> CnStatus {
    guard(|| {
        let scene = SceneGrid::load(path_arg(path)?).map_err(|e| (CnStatus::Io, e))?;
        put(out, CnScene { world: Arc::new(World::new(scene)) })
    })
}

/// # Safety
/// `scene` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cn_scene_free(scene: *mut CnScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Grid dimensions in cells and the cell side in meters.
///
/// # Safety
/// `scene` must be a live handle; the out pointers valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_scene_dims(
    scene: *const CnScene,
    width: *mut usize,
    height: *mut usize,
    cell_size: *mut f64,
) -> CnStatus {
    guard(|| {
        let s = as_ref(scene, "scene")?.world.scene();
        *as_mut(width, "width")? = s.width;
        *as_mut(height, "height")? = s.height;
        *as_mut(cell_size, "cell_size")? = s.cell_size;
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_scene_is_wall(scene: *const CnScene, cx: usize, cy: usize, out: *mut bool) -> CnStatus {
    guard(|| {
        let s = as_ref(scene, "scene")?.world.scene();
        if cx >= s.width || cy >= s.height {
            return Err(Failure(
                CnStatus::InvalidArgument,
                format!("cell ({cx}, {cy}) outside {}x{}", s.width, s.height),
            ));
        }
        *as_mut(out, "out")? = s.is_wall(cx, cy);
        Ok(())
    })
}

/// Geodesic distance between two points of the scene.
///
/// # Safety
/// `scene` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_scene_geodesic(scene: *const CnScene, from: CnPose, to: CnPose, out: *mut f64) -> CnStatus {
    guard(|| {
        let w = &as_ref(scene, "scene")?.world;
        *as_mut(out, "out")? = w.geodesic(&pose(from), &pose(to)).map_err(|e| (CnStatus::World, e))?;
        Ok(())
    })
}

fn make_env(world: &Arc<World>, episode: EpisodeSpec, image_size: usize) -> Result<CnEnv, Failure> {
    if image_size == 0 {
        return Err(Failure(CnStatus::InvalidArgument, "image_size must be positive".into()));
    }
    let env = NavEnv::new(Arc::clone(world), episode, image_size).map_err(|e| (CnStatus::World, e))?;
    Ok(CnEnv { env, collided: false })
}

/// Episode between two poses; the goal view uses the agent camera.
///
/// # Safety
/// `scene` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_env_new(
    scene: *const CnScene,
    start: CnPose,
    goal: CnPose,
    image_size: usize,
    out: *mut *mut CnEnv,
) -> CnStatus {
    guard(|| {
        let world = &as_ref(scene, "scene")?.world;
        let (start, goal) = (pose(start), pose(goal));
        let geodesic_length = world.geodesic(&start, &goal).map_err(|e| (CnStatus::World, e))?;
        let episode = EpisodeSpec {
            scene_id: world.scene().scene_id.clone(),
            start,
            goal,
            goal_camera: CameraParams::agent(image_size),
            geodesic_length,
            episode_id: 0,
        };
        put(out, make_env(world, episode, image_size)?)
    })
}

/// Episode with start, goal and goal camera drawn from `seed`;
/// `goal_setting` is a [`CnSetting`].
///
/// # Safety
/// `scene` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_env_sample(
    scene: *const CnScene,
    seed: u64,
    goal_setting: u32,
    image_size: usize,
    out: *mut *mut CnEnv,
) -> CnStatus {
    guard(|| {
        let world = &as_ref(scene, "scene")?.world;
        let mut rng = rng_for(seed, "ffi/episode");
        let episode = sample_episode(world, setting(goal_setting)?, image_size, seed, &mut rng)
            .map_err(|e| (CnStatus::World, e))?;
        put(out, make_env(world, episode, image_size)?)
    })
}

/// # Safety
/// `env` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cn_env_free(env: *mut CnEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Applies a [`CnAction`].
///
/// # Safety
/// `env` must be a live handle; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_env_step(env: *mut CnEnv, action: u32, out: *mut CnStepInfo) -> CnStatus {
    guard(|| {
        let c = as_mut(env, "env")?;
        if c.env.is_done() {
            return Err(Failure(CnStatus::EpisodeDone, "episode already finished".into()));
        }
        let a = Action::from_index(action as usize)
            .ok_or_else(|| Failure(CnStatus::InvalidArgument, format!("unknown action {action}")))?;
        let o = c.env.step(a).map_err(|e| (CnStatus::World, e))?;
        c.collided = o.collided;
        if let Some(out) = out.as_mut() {
            *out = info(c);
        }
        Ok(())
    })
}

/// # Safety
/// `env` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_env_state(env: *const CnEnv, out: *mut CnStepInfo) -> CnStatus {
    guard(|| {
        let c = as_ref(env, "env")?;
        *as_mut(out, "out")? = info(c);
        Ok(())
    })
}

unsafe fn copy_image(pixels: &[f32], buf: *mut f32, len: usize, needed: *mut usize) -> Result<(), Failure> {
    if let Some(n) = needed.as_mut() {
        *n = pixels.len();
    }
    if buf.is_null() {
        return if len == 0 { Ok(()) } else { Err(null("buf")) };
    }
    if len < pixels.len() {
        return Err(Failure(
            CnStatus::BufferTooSmall,
            format!("buffer holds {len} floats, image needs {}", pixels.len()),
        ));
    }
    ptr::copy_nonoverlapping(pixels.as_ptr(), buf, pixels.len());
    Ok(())
}

/// Current view as `image_size * image_size * 3` floats in `[0, 1]`, row
/// major, RGB interleaved. Pass a null `buf` with `len` 0 to query the size.
///
/// # Safety
/// `env` must be a live handle; `buf` valid for `len` floats; `needed`
/// null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_env_observation(
    env: *const CnEnv,
    buf: *mut f32,
    len: usize,
    needed: *mut usize,
) -> CnStatus {
    guard(|| copy_image(&as_ref(env, "env")?.env.observation().pixels, buf, len, needed))
}

/// Goal image, laid out like [`cn_env_observation`].
///
/// # Safety
/// Same as [`cn_env_observation`].
#[no_mangle]
pub unsafe extern "C" fn cn_env_goal_image(
    env: *const CnEnv,
    buf: *mut f32,
    len: usize,
    needed: *mut usize,
) -> CnStatus {
    guard(|| copy_image(&as_ref(env, "env")?.env.goal_image().pixels, buf, len, needed))
}

/// Loads a checkpoint written by `corrnav train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_policy_load(path: *const c_char, out: *mut *mut CnPolicy) -> CnStatus {
    guard(|| {
        let (net, store) = load_policy(path_arg(path)?, None).map_err(|e| (CnStatus::Model, e))?;
        let image_size = net.image_size;
        put(out, CnPolicy { controller: NetController::new(store, net), image_size, ready: false })
    })
}

/// # Safety
/// `policy` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cn_policy_free(policy: *mut CnPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Image side the policy expects.
///
/// # Safety
/// `policy` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_policy_image_size(policy: *const CnPolicy, out: *mut usize) -> CnStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(policy, "policy")?.image_size;
        Ok(())
    })
}

/// Clears the recurrent state and encodes the goal of `env`. Call at the
/// start of every episode.
///
/// # Safety
/// `policy` and `env` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn cn_policy_reset(policy: *mut CnPolicy, env: *const CnEnv) -> CnStatus {
    guard(|| {
        let p = as_mut(policy, "policy")?;
        let e = as_ref(env, "env")?;
        p.controller.begin(std::slice::from_ref(&e.env)).map_err(|err| (CnStatus::Model, err))?;
        p.ready = true;
        Ok(())
    })
}

/// Greedy action for the current view of `env`, as a [`CnAction`].
///
/// # Safety
/// `policy` and `env` must be live handles and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cn_policy_act(policy: *mut CnPolicy, env: *const CnEnv, out: *mut u32) -> CnStatus {
    guard(|| {
        let p = as_mut(policy, "policy")?;
        let e = as_ref(env, "env")?;
        let out = as_mut(out, "out")?;
        if !p.ready {
            return Err(Failure(CnStatus::InvalidArgument, "call cn_policy_reset before cn_policy_act".into()));
        }
        let a = p.controller.act(std::slice::from_ref(&e.env), &[0]).map_err(|err| (CnStatus::Model, err))?;
        *out = a[0].index() as u32;
        Ok(())
    })
}
