"""Synthetic multi-camera tabletop environment.

Scenes are spheres and axis-aligned boxes on a table plus a gray effector
sphere. Rendering casts one pinhole ray per pixel and takes the nearest
analytic intersection; depth images hold the camera-frame z distance, so
point-map construction reproduces the hit points exactly. Two reach tasks
give complementary target cues: `reach-color` scenes have identical
geometry and color-coded targets, `reach-geometry` scenes have identical
colors and a size-coded target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from pmp.data import Dataset, Episode, ViewCalibration, rgb_to_unit, unit_to_rgb
from pmp.geometry import CameraExtrinsics, CameraIntrinsics, DepthImage, normalized_world_pmap

REACH_COLOR = "reach-color"
REACH_GEOMETRY = "reach-geometry"
TASKS = (REACH_COLOR, REACH_GEOMETRY)

WS_LO = np.array([-0.25, -0.25, 0.0])
WS_HI = np.array([0.25, 0.25, 0.30])
BACKGROUND_RGB = np.array([0.1, 0.1, 0.1])
EFFECTOR_RGB = np.array([0.5, 0.5, 0.5])
EFFECTOR_RADIUS = 0.025
TABLE_RGB = np.array([0.25, 0.22, 0.2])

COLOR_NAMES = ("red", "green", "blue")
COLOR_VALUES = {
    "red": np.array([0.9, 0.1, 0.1]),
    "green": np.array([0.1, 0.8, 0.15]),
    "blue": np.array([0.15, 0.2, 0.9]),
}
GEOMETRY_RGB = np.array([0.7, 0.55, 0.2])

INSTRUCTIONS = (
    "reach the red sphere",
    "reach the green sphere",
    "reach the blue sphere",
    "reach the largest sphere",
)


@dataclass(frozen=True)
class SceneObject:
    kind: str  # sphere | box
    center: np.ndarray
    size: np.ndarray  # sphere: (radius,); box: half-extents (3,)
    color: np.ndarray


@dataclass
class Scene:
    objects: list
    effector_pos: np.ndarray
    ws_lo: np.ndarray = field(default_factory=lambda: WS_LO.copy())
    ws_hi: np.ndarray = field(default_factory=lambda: WS_HI.copy())


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    tolerance: float = 0.02
    max_steps: int = 60
    max_step_norm: float = 0.05

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class EnvState:
    scene: Scene
    task: TaskSpec
    instruction: str
    target_index: int

    @property
    def target_center(self) -> np.ndarray:
        return self.scene.objects[self.target_index].center

    def distance_to_target(self) -> float:
        return float(np.linalg.norm(self.scene.effector_pos - self.target_center))

    def succeeded(self) -> bool:
        return self.distance_to_target() <= self.task.tolerance


@dataclass(frozen=True)
class CameraView:
    intr: CameraIntrinsics
    extr: CameraExtrinsics
    d_min: float = 0.1
    d_max: float = 2.0


@dataclass
class CameraRig:
    views: list

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("rig needs at least two cameras")
        center = (WS_LO + WS_HI) / 2.0
        for i, view in enumerate(self.views):
            cam = view.extr.rotation.T @ (center - view.extr.translation)
            if cam[2] <= 0:
                raise ValueError(f"camera {i} does not face the workspace center")
            u = cam[0] / cam[2] * view.intr.fx + view.intr.cx
            v = cam[1] / cam[2] * view.intr.fy + view.intr.cy
            if not (0 <= u < view.intr.width and 0 <= v < view.intr.height):
                raise ValueError(f"camera {i} does not see the workspace center")

    def calibrations(self) -> list:
        return [
            ViewCalibration(v.intr.fx, v.intr.fy, v.intr.cx, v.intr.cy,
                            v.extr.rotation, v.extr.translation, v.d_min, v.d_max)
            for v in self.views
        ]


def _look_at(position: np.ndarray, target: np.ndarray) -> CameraExtrinsics:
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)  # columns: x, y, z of camera
    if np.linalg.det(rotation) < 0:
        rotation[:, 1] = -rotation[:, 1]
    return CameraExtrinsics(rotation, position)


def make_rig(img: int = 64, n_views: int = 2) -> CameraRig:
    """Cameras on a 0.8 m arc around the workspace center, +-45 deg azimuth."""
    center = (WS_LO + WS_HI) / 2.0
    azimuths = np.linspace(-math.pi / 4, math.pi / 4, n_views)
    elevation = math.radians(38.0)
    views = []
    for az in azimuths:
        offset = 0.8 * np.array(
            [-math.cos(elevation) * math.cos(az), -math.cos(elevation) * math.sin(az),
             math.sin(elevation)]
        )
        pos = center + offset
        intr = CameraIntrinsics(fx=0.9 * img, fy=0.9 * img, cx=img / 2.0, cy=img / 2.0,
                                width=img, height=img)
        views.append(CameraView(intr=intr, extr=_look_at(pos, center)))
    return CameraRig(views)


# -- rendering ----------------------------------------------------------------


def _ray_sphere(origin, dirs, center, radius):
    """Nearest positive ray parameter per pixel, +inf when missed."""
    oc = origin - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * dirs @ oc
    c = float(oc @ oc - radius * radius)
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t_far = (-b + sq) / (2.0 * a)
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _ray_box(origin, dirs, lo, hi):
    """Slab test against an axis-aligned box; +inf when missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (t_far >= np.maximum(t_near, 1e-9)) & (t_far > 1e-9)
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit, t, np.inf)


def render_views(scene: Scene, rig: CameraRig):
    """Per camera: flat-shaded RGB in [0, 1] (u8-exact) and a z-depth image.

    Depth is +inf where no object is hit, which masks out after point-map
    construction.
    """
    renderables = list(scene.objects) + [
        SceneObject("sphere", scene.effector_pos, np.array([EFFECTOR_RADIUS]), EFFECTOR_RGB)
    ]
    out = []
    for view in rig.views:
        h, w = view.intr.height, view.intr.width
        u = (np.arange(w) - view.intr.cx) / view.intr.fx
        v = (np.arange(h) - view.intr.cy) / view.intr.fy
        dirs_cam = np.stack(
            [np.broadcast_to(u[None, :], (h, w)), np.broadcast_to(v[:, None], (h, w)),
             np.ones((h, w))], axis=-1
        )
        dirs = dirs_cam @ view.extr.rotation.T  # world-frame, z_cam component is 1
        origin = view.extr.translation

        depth = np.full((h, w), np.inf)
        rgb = np.tile(BACKGROUND_RGB, (h, w, 1))
        for obj in renderables:
            if obj.kind == "sphere":
                t = _ray_sphere(origin, dirs, obj.center, float(obj.size[0]))
            elif obj.kind == "box":
                t = _ray_box(origin, dirs, obj.center - obj.size, obj.center + obj.size)
            else:
                raise ValueError(f"unknown object kind {obj.kind!r}")
            closer = t < depth
            depth = np.where(closer, t, depth)
            rgb[closer] = obj.color
        rgb = rgb_to_unit(unit_to_rgb(rgb))  # snap to the u8 grid stored on disk
        out.append((rgb, DepthImage(depth, view.d_min, view.d_max)))
    return out


# -- dynamics and tasks ---------------------------------------------------------


def clamp_step(delta: np.ndarray, cap: float) -> np.ndarray:
    norm = float(np.linalg.norm(delta))
    if norm > cap:
        return delta * (cap / norm)
    return delta


def step_env(state: EnvState, action: np.ndarray) -> EnvState:
    """Apply (dx, dy, dz, g): displacement capped in norm, position clamped
    to the workspace; the gripper channel is ignored for reach tasks."""
    action = np.asarray(action, dtype=np.float64)
    delta = clamp_step(action[:3], state.task.max_step_norm)
    pos = np.clip(state.scene.effector_pos + delta, state.scene.ws_lo, state.scene.ws_hi)
    scene = replace(state.scene, effector_pos=pos)
    return replace(state, scene=scene)


def resolve_target(scene: Scene, instruction: str) -> int:
    """Index of the instructed object: a color name or 'largest'."""
    for name in COLOR_NAMES:
        if name in instruction:
            for i, obj in enumerate(scene.objects):
                if np.allclose(obj.color, COLOR_VALUES[name]):
                    return i
            raise ValueError(f"no {name} object in scene for {instruction!r}")
    if "largest" in instruction:
        sizes = [float(obj.size[0]) for obj in scene.objects]
        return int(np.argmax(sizes))
    raise ValueError(f"cannot resolve instruction {instruction!r}")


def scripted_expert(state: EnvState) -> np.ndarray:
    """Clamped straight-line step toward the target; zero inside tolerance."""
    vec = state.target_center - state.scene.effector_pos
    if np.linalg.norm(vec) <= state.task.tolerance:
        return np.zeros(4)
    delta = clamp_step(vec, state.task.max_step_norm)
    return np.array([delta[0], delta[1], delta[2], 0.0])


def _sample_positions(rng: np.random.Generator, n: int, min_sep: float = 0.12):
    """Non-overlapping (x, y) placements on the table."""
    placed = []
    while len(placed) < n:
        cand = rng.uniform(-0.18, 0.18, size=2)
        if all(np.linalg.norm(cand - p) >= min_sep for p in placed):
            placed.append(cand)
    return placed


def reset_env(task: TaskSpec, seed: int) -> EnvState:
    """Randomized scene: 3 spheres plus the effector, solvable by design."""
    rng = np.random.default_rng(seed)
    positions = _sample_positions(rng, 3)
    if task.kind == REACH_COLOR:
        # identical geometry, distinct colors: XYZ alone cannot name a target
        radius = 0.04
        names = list(COLOR_NAMES)
        rng.shuffle(names)
        objects = [
            SceneObject("sphere", np.array([x, y, radius]), np.array([radius]),
                        COLOR_VALUES[name])
            for (x, y), name in zip(positions, names)
        ]
        target_name = names[int(rng.integers(3))]
        instruction = f"reach the {target_name} sphere"
    else:
        # identical colors, distinct sizes: color alone cannot name a target
        radii = [0.055, 0.033, 0.02]
        objects = [
            SceneObject("sphere", np.array([x, y, r]), np.array([r]), GEOMETRY_RGB)
            for (x, y), r in zip(positions, radii)
        ]
        instruction = "reach the largest sphere"
    while True:
        eff = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15),
                        rng.uniform(0.12, 0.24)])
        if all(np.linalg.norm(eff - o.center) >= 0.09 for o in objects):
            break
    scene = Scene(objects=objects, effector_pos=eff)
    return EnvState(scene=scene, task=task, instruction=instruction,
                    target_index=resolve_target(scene, instruction))


def generate_episode(task: TaskSpec, seed: int, rig: CameraRig):
    """Expert rollout to success (or the step cap) with rendered frames.

    Returns a data.Episode; deterministic per seed.
    """
    state = reset_env(task, seed)
    rgbs, depths, actions = [], [], []
    for _ in range(task.max_steps):
        frames = render_views(state.scene, rig)
        action = scripted_expert(state)
        rgbs.append(np.stack([unit_to_rgb(f[0]) for f in frames]))
        depths.append(np.stack([f[1].values.astype(np.float32) for f in frames]))
        actions.append(action.astype(np.float32))
        state = step_env(state, action)
        if state.succeeded():
            break
    return Episode(
        instruction=state.instruction,
        rgb=np.stack(rgbs),
        depth=np.stack(depths),
        actions=np.stack(actions),
    )


def generate_dataset(task: TaskSpec, n_episodes: int, seed: int, rig: CameraRig,
                     workers: int = 1) -> Dataset:
    """Episodes under disjoint per-episode seeds; order is seed order."""
    seeds = [seed + i for i in range(n_episodes)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(_episode_job, [(task, s, rig) for s in seeds]))
    else:
        episodes = [generate_episode(task, s, rig) for s in seeds]
    img = rig.views[0].intr.height
    return Dataset(views=rig.calibrations(), episodes=episodes, img_h=img, img_w=img,
                   action_dim=4)


def _episode_job(args):
    task, seed, rig = args
    return generate_episode(task, seed, rig)


def observation_views(scene_or_frames, rig: CameraRig):
    """Rendered frames -> list of (rgb [0,1], normalized world point map)."""
    if isinstance(scene_or_frames, Scene):
        frames = render_views(scene_or_frames, rig)
    else:
        frames = scene_or_frames
    views = []
    for (rgb, depth), view in zip(frames, rig.views):
        pmap = normalized_world_pmap(depth.values, view.d_min, view.d_max,
                                     view.intr, view.extr, WS_LO, WS_HI)
        views.append((rgb, pmap))
    return views


def evaluate_policy(predict_fn, task: TaskSpec, n_episodes: int, seed: int,
                    rig: CameraRig, stride: int = 10):
    """Closed-loop rollouts with chunked execution.

    ``predict_fn(views, instruction, seed, state)`` returns an (H, 4)
    denormalized action chunk; learned policies ignore ``state`` (it is
    there for privileged baselines like the scripted expert). The first
    ``stride`` actions of each chunk are executed before replanning.
    Success: within tolerance of the target at any point before the step
    cap. Deterministic given the seed.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    successes = 0
    final_dists = []
    for ei in range(n_episodes):
        state = reset_env(task, seed + ei)
        steps = 0
        done = state.succeeded()
        while not done and steps < task.max_steps:
            views = observation_views(state.scene, rig)
            chunk = np.asarray(predict_fn(views, state.instruction, seed * 100003 + ei, state))
            for action in chunk[: max(1, min(stride, len(chunk)))]:
                state = step_env(state, action)
                steps += 1
                if state.succeeded() or steps >= task.max_steps:
                    done = True
                    break
        successes += int(state.succeeded())
        final_dists.append(state.distance_to_target())
    return {
        "success_rate": successes / n_episodes,
        "mean_final_dist": float(np.mean(final_dists)),
    }


def expert_chunk_policy(horizon: int = 10):
    """The scripted expert as a chunk policy, rolled out on the known
    deterministic dynamics."""

    def predict(views, instruction, seed, state):
        del views, instruction, seed
        sim = state
        chunk = []
        for _ in range(horizon):
            action = scripted_expert(sim)
            chunk.append(action)
            sim = step_env(sim, action)
        return np.stack(chunk)

    return predict
