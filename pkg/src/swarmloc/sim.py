"""Deterministic swarm simulator and dataset generator.

A circular robot formation sweeps through a tree-filled world. Each frame
yields ground-truth poses, noisy body-frame odometry increments, a noisy
pairwise range matrix, and per-robot anonymous detection bearings
(occlusion-aware, shuffled, possibly containing fakes).

Everything is a pure function of (config, frame index): the scene uses the
rng stream (seed, 0) and frame f uses (seed, 1, f), so frames can be
sampled in any order or in parallel and still match a sequential run.

Dataset files are JSON Lines: a header line with config + trees, then one
line per frame. Floats round-trip bit-exactly (shortest-repr encoding).
The ``lab`` field carries detection provenance (source robot id, -1 for
fakes) for supervision and scoring only; it is never part of a model or
runtime input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .geom import (
    Pose,
    bearing_to,
    compose,
    identity_pose,
    quat_from_axis_angle,
    quat_mul,
    quat_rotate,
    quat_rotate_inv,
    relative,
)

DATASET_FORMAT = "swarmloc-dataset-v1"

# extra detection slots beyond one per robot; matches the observed pattern
# of detection counts running from 0 to n_robots + 4
EXTRA_DET_SLOTS = 4


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset files."""


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for one simulated scene.

    Noise sigmas are applied once per frame (the default frame rate of
    10 Hz makes one frame equal one 0.1 s odometry noise application).
    """

    n_robots: int = 4
    n_frames: int = 500
    world: tuple[float, float, float] = (70.0, 30.0, 3.0)
    n_trees: int = 60
    tree_radius: tuple[float, float] = (0.1, 0.5)
    formation_radius: float = 3.0
    speed: float = 1.0
    frame_rate: float = 10.0
    fov_deg: float = 180.0
    fake_prob: float = 0.4
    uwb_sigma: float = 0.1
    uwb_dropout: float = 0.02
    bearing_sigma: float = np.deg2rad(1.0)
    pvo_t_sigma: float = 0.1
    pvo_r_sigma_deg: float = 1.0
    sway_amp_y: float = 2.0
    sway_amp_z: float = 0.5
    spin_rate: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.n_robots < 2:
            raise ValueError("need at least 2 robots")
        if not (0.0 < self.fov_deg <= 360.0):
            raise ValueError("fov_deg must be in (0, 360]")
        for name in ("uwb_sigma", "bearing_sigma", "pvo_t_sigma", "pvo_r_sigma_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.fake_prob <= 1.0):
            raise ValueError("fake_prob must be in [0, 1]")
        if not (0.0 <= self.uwb_dropout < 1.0):
            raise ValueError("uwb_dropout must be in [0, 1)")

    @property
    def max_detections(self) -> int:
        return self.n_robots + EXTRA_DET_SLOTS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = list(self.world)
        d["tree_radius"] = list(self.tree_radius)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        d = dict(d)
        d["world"] = tuple(d["world"])
        d["tree_radius"] = tuple(d["tree_radius"])
        return SceneConfig(**d)


@dataclass
class SwarmFrame:
    """One timestep: ground truth plus every sensor channel.

    uwb is a symmetric matrix with nan marking dropped pairs (diagonal is
    nan and unused). det[i] is observer i's shuffled (m_i, 3) bearing
    array; det_src[i] aligns with it and names the source robot (-1 for a
    fake). det_src is bookkeeping for labels/metrics, never a model input.
    """

    t: float
    gt: list[Pose]
    pvo: list[Pose]
    uwb: np.ndarray
    det: list[np.ndarray]
    det_src: list[np.ndarray]


@dataclass
class Scene:
    config: SceneConfig
    trees: np.ndarray  # (K, 3): x, y, radius; cylinders spanning full world height
    traj_q: np.ndarray  # (F, N, 4)
    traj_t: np.ndarray  # (F, N, 3)

    def gt_pose(self, frame_idx: int, robot: int) -> Pose:
        return Pose(q=self.traj_q[frame_idx, robot], t=self.traj_t[frame_idx, robot])


def generate_scene(config: SceneConfig) -> Scene:
    """Build trees and the full ground-truth trajectory set.

    Deterministic given config.seed. Raises ValueError when the formation
    cannot fit or the path would leave the world.
    """
    wx, wy, wz = config.world
    margin = 1.0
    r = config.formation_radius
    if 2 * (r + margin) > wy or 2 * (r + margin) > wx:
        raise ValueError("formation does not fit inside the world")

    n = config.n_robots
    frames = config.n_frames
    dt = 1.0 / config.frame_rate
    path_len = config.speed * dt * (frames - 1)
    x_start = margin + r
    if x_start + path_len > wx - margin - r:
        raise ValueError(
            f"path of {path_len:.1f} m does not fit the world x-extent; "
            "reduce speed or n_frames"
        )

    z_mid = wz / 2.0
    phases = 2.0 * np.pi * np.arange(n) / n
    z_off = np.minimum(0.4, (wz / 2.0 - 0.6)) * np.sin(phases + 1.7)

    traj_q = np.zeros((frames, n, 4))
    traj_t = np.zeros((frames, n, 3))
    lam_y, lam_z = 23.0, 31.0
    for f in range(frames):
        s = config.speed * dt * f
        cx = x_start + s
        cy = wy / 2.0 + config.sway_amp_y * np.sin(2 * np.pi * s / lam_y)
        cz = z_mid + config.sway_amp_z * np.sin(2 * np.pi * s / lam_z + 0.9)
        dy_ds = config.sway_amp_y * (2 * np.pi / lam_y) * np.cos(2 * np.pi * s / lam_y)
        heading = np.arctan2(dy_ds, 1.0)
        q = quat_from_axis_angle(np.array([0.0, 0.0, heading]))
        spin = config.spin_rate * dt * f
        ang = phases + spin
        cos_h, sin_h = np.cos(heading), np.sin(heading)
        local = np.stack(
            [r * np.cos(ang), r * np.sin(ang), z_off], axis=1
        )
        world_xy = np.stack(
            [
                cx + cos_h * local[:, 0] - sin_h * local[:, 1],
                cy + sin_h * local[:, 0] + cos_h * local[:, 1],
                cz + local[:, 2],
            ],
            axis=1,
        )
        traj_t[f] = world_xy
        traj_q[f] = q

    rng = np.random.default_rng((config.seed, 0))
    trees = _sample_trees(config, rng, traj_t)
    return Scene(config=config, trees=trees, traj_q=traj_q, traj_t=traj_t)


def _sample_trees(config: SceneConfig, rng: np.random.Generator, traj_t: np.ndarray) -> np.ndarray:
    wx, wy, _ = config.world
    clearance = 0.3
    pts = traj_t[:, :, :2].reshape(-1, 2)
    trees = []
    attempts = 0
    max_attempts = max(200, 80 * config.n_trees)
    while len(trees) < config.n_trees and attempts < max_attempts:
        attempts += 1
        x = rng.uniform(1.0, wx - 1.0)
        y = rng.uniform(1.0, wy - 1.0)
        radius = rng.uniform(*config.tree_radius)
        d = np.min(np.hypot(pts[:, 0] - x, pts[:, 1] - y))
        if d < radius + clearance:
            continue
        trees.append((x, y, radius))
    if len(trees) < config.n_trees:
        raise ValueError("could not place requested tree count; world too crowded")
    return np.asarray(trees, dtype=np.float64).reshape(-1, 3)


def _segment_blocked(p: np.ndarray, q: np.ndarray, trees: np.ndarray) -> bool:
    """True when the 2-D projection of segment p->q passes through any tree disk."""
    if trees.size == 0:
        return False
    p2, q2 = p[:2], q[:2]
    d = q2 - p2
    dd = float(d @ d)
    if dd < 1e-18:
        u = np.zeros(len(trees))
    else:
        u = np.clip(((trees[:, :2] - p2) @ d) / dd, 0.0, 1.0)
    closest = p2[None, :] + u[:, None] * d[None, :]
    dist = np.hypot(closest[:, 0] - trees[:, 0], closest[:, 1] - trees[:, 1])
    return bool(np.any(dist < trees[:, 2]))


def visibility(scene: Scene, frame_idx: int, observer: int, target: int) -> bool:
    """Can `observer` detect `target` at this frame?

    Requires all three of: target inside the observer's field-of-view cone
    (boresight = body +x); observer inside the target's emitter wedge (the
    90-degree sector straight ahead of the target radiates nothing, the
    remaining 270 degrees do); clear line of sight past every tree.
    """
    if observer == target:
        return False
    cfg = scene.config
    p_obs = scene.traj_t[frame_idx, observer]
    p_tgt = scene.traj_t[frame_idx, target]
    d = p_tgt - p_obs
    dist = float(np.linalg.norm(d))
    if dist < 1e-9:
        return False

    body = quat_rotate_inv(scene.traj_q[frame_idx, observer], d / dist)
    if body[0] < np.cos(np.deg2rad(cfg.fov_deg) / 2.0):
        return False

    back = quat_rotate_inv(scene.traj_q[frame_idx, target], -d / dist)
    azimuth = np.arctan2(back[1], back[0])
    if abs(azimuth) < np.pi / 4.0:
        return False

    return not _segment_blocked(p_obs, p_tgt, scene.trees)


def frame_rng(config: SceneConfig, frame_idx: int) -> np.random.Generator:
    """Per-frame derived stream: independent of sampling order."""
    return np.random.default_rng((config.seed, 1, frame_idx))


def sample_frame(
    scene: Scene, frame_idx: int, rng: np.random.Generator | None = None
) -> SwarmFrame:
    """Sample every sensor channel for one frame."""
    cfg = scene.config
    n = cfg.n_robots
    rng = rng if rng is not None else frame_rng(cfg, frame_idx)

    gt = [scene.gt_pose(frame_idx, i) for i in range(n)]

    pvo = []
    for i in range(n):
        if frame_idx == 0:
            delta = identity_pose()
        else:
            delta = relative(scene.gt_pose(frame_idx - 1, i), gt[i])
        t_noise = rng.normal(0.0, cfg.pvo_t_sigma, size=3)
        r_noise = rng.normal(0.0, np.deg2rad(cfg.pvo_r_sigma_deg), size=3)
        noisy = Pose(
            q=quat_mul(delta.q, quat_from_axis_angle(r_noise)),
            t=delta.t + t_noise,
        )
        pvo.append(noisy)

    uwb = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i + 1, n):
            true_d = float(np.linalg.norm(gt[i].t - gt[j].t))
            measured = true_d + rng.normal(0.0, cfg.uwb_sigma)
            dropped = rng.uniform() < cfg.uwb_dropout
            if not dropped:
                uwb[i, j] = uwb[j, i] = measured

    det: list[np.ndarray] = []
    det_src: list[np.ndarray] = []
    cos_half = np.cos(np.deg2rad(cfg.fov_deg) / 2.0)
    for i in range(n):
        bearings = []
        sources = []
        for j in range(n):
            if j == i or not visibility(scene, frame_idx, i, j):
                continue
            b = bearing_to(gt[i], gt[j].t)
            bearings.append(_perturb_bearing(b, cfg.bearing_sigma, rng))
            sources.append(j)
        if rng.uniform() < cfg.fake_prob:
            bearings.append(_random_in_fov(cos_half, rng))
            sources.append(-1)
        if bearings:
            arr = np.asarray(bearings)
            src = np.asarray(sources, dtype=np.int64)
            perm = rng.permutation(len(bearings))
            arr, src = arr[perm], src[perm]
            if len(arr) > cfg.max_detections:
                arr, src = arr[: cfg.max_detections], src[: cfg.max_detections]
        else:
            arr = np.zeros((0, 3))
            src = np.zeros(0, dtype=np.int64)
        det.append(arr)
        det_src.append(src)

    return SwarmFrame(
        t=frame_idx / cfg.frame_rate, gt=gt, pvo=pvo, uwb=uwb, det=det, det_src=det_src
    )


def _perturb_bearing(b: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate b about a random orthogonal axis by |N(0, sigma)| radians."""
    angle = abs(rng.normal(0.0, sigma))
    v = rng.standard_normal(3)
    v -= (v @ b) * b
    nv = np.linalg.norm(v)
    if nv < 1e-12 or angle == 0.0:
        return b.copy()
    axis = v / nv
    out = quat_rotate(quat_from_axis_angle(axis * angle), b)
    return out / np.linalg.norm(out)


def _random_in_fov(cos_half: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit bearing inside the field-of-view cone."""
    u = rng.uniform(cos_half, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    s = np.sqrt(max(0.0, 1.0 - u * u))
    return np.array([u, s * np.cos(phi), s * np.sin(phi)])


def sample_frames(scene: Scene) -> list[SwarmFrame]:
    return [sample_frame(scene, f) for f in range(scene.config.n_frames)]


def generate_dataset(config: SceneConfig) -> tuple[Scene, list[SwarmFrame]]:
    scene = generate_scene(config)
    return scene, sample_frames(scene)


# ---------------------------------------------------------------------------
# dataset files (JSON Lines)
# ---------------------------------------------------------------------------


def _pose_obj(p: Pose) -> dict:
    return {"q": p.q.tolist(), "t": p.t.tolist()}


def _pose_from_obj(d: dict) -> Pose:
    return Pose(q=np.asarray(d["q"]), t=np.asarray(d["t"]))


def _uwb_obj(uwb: np.ndarray) -> list:
    return [[None if np.isnan(v) else v for v in row] for row in uwb]


def frame_to_obj(fr: SwarmFrame) -> dict:
    return {
        "t": fr.t,
        "gt": [_pose_obj(p) for p in fr.gt],
        "pvo": [_pose_obj(p) for p in fr.pvo],
        "uwb": _uwb_obj(fr.uwb),
        "det": [d.tolist() for d in fr.det],
        "lab": [s.tolist() for s in fr.det_src],
    }


def frame_from_obj(d: dict) -> SwarmFrame:
    uwb = np.asarray(
        [[np.nan if v is None else v for v in row] for row in d["uwb"]], dtype=np.float64
    )
    return SwarmFrame(
        t=float(d["t"]),
        gt=[_pose_from_obj(x) for x in d["gt"]],
        pvo=[_pose_from_obj(x) for x in d["pvo"]],
        uwb=uwb,
        det=[np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in d["det"]],
        det_src=[np.asarray(x, dtype=np.int64) for x in d["lab"]],
    )


def write_dataset(scene: Scene, frames: Sequence[SwarmFrame], path) -> None:
    header = {
        "format": DATASET_FORMAT,
        "config": scene.config.to_dict(),
        "trees": scene.trees.tolist(),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for fr in frames:
            fh.write(json.dumps(frame_to_obj(fr), sort_keys=True) + "\n")


def read_dataset(path) -> tuple[SceneConfig, np.ndarray, list[SwarmFrame]]:
    """Returns (config, trees, frames). Raises DatasetError with the line number."""
    frames: list[SwarmFrame] = []
    config = None
    trees = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(
                    f"{path}: parse error at line {lineno} "
                    f"(last good line: {lineno - 1}): {exc.msg}"
                ) from exc
            try:
                if lineno == 1:
                    if obj.get("format") != DATASET_FORMAT:
                        raise DatasetError(
                            f"{path}: line 1: unsupported format {obj.get('format')!r}"
                        )
                    config = SceneConfig.from_dict(obj["config"])
                    trees = np.asarray(obj["trees"], dtype=np.float64).reshape(-1, 3)
                else:
                    frames.append(frame_from_obj(obj))
            except DatasetError:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: invalid record at line {lineno}: {exc}") from exc
    if config is None:
        raise DatasetError(f"{path}: empty dataset (no header line)")
    return config, trees, frames


def zero_noise(config: SceneConfig) -> SceneConfig:
    """Copy of config with every noise source disabled."""
    return replace(
        config,
        uwb_sigma=0.0,
        uwb_dropout=0.0,
        bearing_sigma=0.0,
        pvo_t_sigma=0.0,
        pvo_r_sigma_deg=0.0,
        fake_prob=0.0,
    )
