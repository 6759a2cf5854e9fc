"""Kinematic folding-board simulator with flat-shaded rendering.

The board has a fixed center panel and three hinged flaps (left, right, mid).
A flap at hinge angle ``theta`` has its outward direction rotated from the
board plane towards +z; at ``theta = pi`` it lies face down on the center.
Cloth is a rigid polygon in flat board coordinates; each piece rides on the
section it was laid on.

The end effector is a disc whose normal is the tool axis. It lifts a flap when
the disc sits within the capture radius of the flap's outer edge and moves
along the edge's direction of travel. Past ``align_after`` the tool axis must
also line up with the flap normal, which is what makes the rotating phase
necessary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from matplotlib.path import Path as _MplPath
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.spatial.transform import Rotation

from .policy import Observation

__all__ = [
    "Task",
    "SubProcess",
    "ConfigError",
    "EnvConfig",
    "FoldEnvState",
    "Flap",
    "flaps",
    "reset",
    "step",
    "contact_flags",
    "Camera",
    "top_camera",
    "oblique_camera",
    "RenderResult",
    "render",
    "cloth_mask",
    "board_vertices",
    "effector_vertices",
    "anchor_indices",
    "anchor_points",
    "reference_rotation",
    "section_rects",
    "cloth_keypoints",
    "observe",
    "Demonstration",
    "scripted_expert",
    "ExpertController",
    "expert_horizon",
    "FOLD_CLASSES",
    "classifier_dataset",
    "success_check",
    "LABELS",
    "SceneViews",
    "random_views",
]

LEFT, RIGHT, MID = 0, 1, 2


class Task(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    MID = "mid"

    @property
    def flap(self) -> int:
        return {"left": LEFT, "right": RIGHT, "mid": MID}[self.value]


class SubProcess(str, Enum):
    APPROACHING = "approaching"
    LIFTING = "lifting"
    ROTATING = "rotating"
    PUSHING = "pushing"


class ConfigError(ValueError):
    """Invalid simulator configuration."""


@dataclass(frozen=True)
class EnvConfig:
    center_width: float = 0.2
    center_length: float = 0.35
    flap_width: float = 0.2
    mid_length: float = 0.2
    center_y0: float = -0.15
    home_height: float = 0.5
    capture_radius: float = 0.015
    obs_noise: float = 0.001
    max_step: float = 0.06
    max_rotation: float = 0.6
    align_after: float = np.deg2rad(60.0)
    align_tolerance: float = np.deg2rad(35.0)
    disc_radius: float = 0.03
    tool_length: float = 0.1
    cloth_thickness: float = 0.002
    workspace_lo: tuple[float, float, float] = (-0.7, -0.8, 0.0)
    workspace_hi: tuple[float, float, float] = (0.7, 0.7, 0.8)
    arm_base: tuple[float, float, float] = (0.0, 0.75, 0.0)
    lock_flaps: bool = False
    image_size: int = 128

    def validate(self) -> "EnvConfig":
        for name in ("center_width", "center_length", "flap_width", "mid_length", "home_height",
                     "disc_radius", "tool_length", "max_step", "max_rotation"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.capture_radius > 0:
            raise ConfigError(f"capture_radius must be positive, got {self.capture_radius}")
        if self.obs_noise < 0:
            raise ConfigError(f"obs_noise must be nonnegative, got {self.obs_noise}")
        if np.any(np.asarray(self.workspace_lo) >= np.asarray(self.workspace_hi)):
            raise ConfigError("workspace_lo must lie below workspace_hi")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be at least 16, got {self.image_size}")
        return self

    @property
    def center_y1(self) -> float:
        return self.center_y0 + self.center_length

    @property
    def home(self) -> np.ndarray:
        return np.array([0.0, self.center_y0 + self.center_length / 2, self.home_height])


# ---------------------------------------------------------------- geometry

Z = np.array([0.0, 0.0, 1.0])


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors; same arithmetic as ``np.cross`` without its dispatch cost."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@dataclass(frozen=True)
class Flap:
    """Hinged panel: points are ``h + w a + s u(theta)`` with |w| <= span/2, 0 <= s <= length."""

    hinge: np.ndarray
    u0: np.ndarray
    length: float
    span: float

    @property
    def axis(self) -> np.ndarray:
        return cross3(self.u0, Z)

    def u(self, theta: float) -> np.ndarray:
        return np.cos(theta) * self.u0 + np.sin(theta) * Z

    def normal(self, theta: float) -> np.ndarray:
        return -np.sin(theta) * self.u0 + np.cos(theta) * Z

    def point(self, w, s, theta: float) -> np.ndarray:
        w = np.asarray(w, dtype=float)[..., None]
        s = np.asarray(s, dtype=float)[..., None]
        return self.hinge + w * self.axis + s * self.u(theta)

    def corners(self, theta: float) -> np.ndarray:
        """Hinge corners first, then the outer edge, in matching order."""
        half = self.span / 2
        return self.point([-half, half, -half, half], [0.0, 0.0, self.length, self.length], theta)

    def rotation(self, theta: float) -> Rotation:
        return Rotation.from_rotvec(theta * self.axis)


def flaps(cfg: EnvConfig) -> tuple[Flap, Flap, Flap]:
    hw = cfg.center_width / 2
    yc = cfg.center_y0 + cfg.center_length / 2
    t = cfg.cloth_thickness
    left = Flap(np.array([-hw, yc, 3 * t]), np.array([-1.0, 0.0, 0.0]), cfg.flap_width, cfg.center_length)
    right = Flap(np.array([hw, yc, 3 * t]), np.array([1.0, 0.0, 0.0]), cfg.flap_width, cfg.center_length)
    mid = Flap(np.array([0.0, cfg.center_y0, 4 * t]), np.array([0.0, -1.0, 0.0]), cfg.mid_length, cfg.center_width)
    return left, right, mid


def section_rects(cfg: EnvConfig) -> list[tuple[float, float, float, float]]:
    """Flat (xmin, xmax, ymin, ymax) of center, left, right, mid."""
    hw = cfg.center_width / 2
    y0, y1 = cfg.center_y0, cfg.center_y1
    return [
        (-hw, hw, y0, y1),
        (-hw - cfg.flap_width, -hw, y0, y1),
        (hw, hw + cfg.flap_width, y0, y1),
        (-hw, hw, y0 - cfg.mid_length, y0),
    ]


CLOTH_POLYGON = np.array([
    [-0.15, -0.31], [0.15, -0.31], [0.15, 0.03], [0.25, 0.05], [0.23, 0.15],
    [0.07, 0.18], [-0.07, 0.18], [-0.23, 0.15], [-0.25, 0.05], [-0.15, 0.03],
])


def _clip_rect(poly: np.ndarray, rect) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon to an axis-aligned rectangle."""
    xmin, xmax, ymin, ymax = rect
    planes = [(0, xmin, 1), (0, xmax, -1), (1, ymin, 1), (1, ymax, -1)]
    out = [tuple(p) for p in poly]
    for axis, val, sgn in planes:
        if not out:
            break
        src, out = out, []
        for k in range(len(src)):
            cur, prev = np.array(src[k]), np.array(src[k - 1])
            cin = sgn * (cur[axis] - val) >= 0
            pin = sgn * (prev[axis] - val) >= 0
            if cin != pin:
                f = (val - prev[axis]) / (cur[axis] - prev[axis])
                out.append(tuple(prev + f * (cur - prev)))
            if cin:
                out.append(tuple(cur))
    return np.array(out).reshape(-1, 2)


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class FoldEnvState:
    flap_angles: np.ndarray
    ee_position: np.ndarray
    ee_quat: np.ndarray  # scalar-last
    joint_angles: np.ndarray
    task: Task
    t: int = 0
    contact: tuple[bool, bool, bool] = (False, False, False)
    aligned: bool = False

    def __post_init__(self):
        for name in ("flap_angles", "ee_position", "ee_quat", "joint_angles"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def tool_axis(self) -> np.ndarray:
        return Rotation.from_quat(self.ee_quat).apply(Z)

    def cloth_extent(self, cfg: EnvConfig) -> list[np.ndarray]:
        """World-frame cloth polygon on each section (center, left, right, mid)."""
        out = []
        rects = section_rects(cfg)
        fl = flaps(cfg)
        for k, rect in enumerate(rects):
            poly = _clip_rect(CLOTH_POLYGON, rect)
            out.append(_flat_to_world(poly, k, self.flap_angles, fl, cfg))
        return out


def _flat_to_world(xy: np.ndarray, section: int, angles, fl, cfg: EnvConfig, lift: float | None = None) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    tau = cfg.cloth_thickness if lift is None else lift
    if section == 0:
        return np.column_stack([xy, np.full(len(xy), tau)])
    f = fl[section - 1]
    theta = angles[section - 1]
    rel = np.column_stack([xy, np.zeros(len(xy))]) - np.array([f.hinge[0], f.hinge[1], 0.0])
    w = rel @ f.axis
    s = rel @ f.u0
    return f.point(w, s, theta) + tau * f.normal(theta)


def reference_rotation(task: Task, cfg: EnvConfig) -> Rotation:
    """Wrist reference: halfway through the task's fold, so wrist angles stay clear of pi."""
    f = flaps(cfg)[Task(task).flap]
    return f.rotation(np.pi / 2)


def joint_angles(position: np.ndarray, quat: np.ndarray, task: Task, cfg: EnvConfig) -> np.ndarray:
    """Three positioning joints (yaw, reach, lift) and a three-angle wrist."""
    b = np.asarray(cfg.arm_base)
    d = np.asarray(position) - b
    yaw = np.arctan2(d[0], -d[1])
    reach = np.hypot(d[0], d[1])
    wrist = (Rotation.from_quat(quat) * reference_rotation(task, cfg).inv()).as_rotvec()
    return np.array([yaw, reach, d[2], *wrist])


def reset(cfg: EnvConfig, task: Task | str, seed: int = 0) -> FoldEnvState:
    """Flat board, cloth centered, effector at home with the tool axis pointing up."""
    cfg.validate()
    task = Task(task)
    pos = cfg.home
    quat = np.array([0.0, 0.0, 0.0, 1.0])
    return FoldEnvState(np.zeros(3), pos, quat, joint_angles(pos, quat, task, cfg), task)


def _apply_delta(quat: np.ndarray, dq: np.ndarray, max_rotation: float) -> np.ndarray:
    d = np.array([0.0, 0.0, 0.0, 1.0]) + np.asarray(dq, dtype=float)
    n = np.linalg.norm(d)
    if n < 1e-9:
        d = np.array([0.0, 0.0, 0.0, 1.0])
    else:
        d = d / n
    rv = Rotation.from_quat(d).as_rotvec()
    ang = np.linalg.norm(rv)
    if ang > max_rotation:
        rv *= max_rotation / ang
    q = (Rotation.from_rotvec(rv) * Rotation.from_quat(quat)).as_quat()
    return q / np.linalg.norm(q)


def _edge_contact(f: Flap, theta: float, p: np.ndarray, cfg: EnvConfig) -> tuple[bool, float]:
    rel = p - f.hinge
    w = rel @ f.axis
    perp = rel - w * f.axis
    dist = np.linalg.norm(perp - f.length * f.u(theta))
    ok = dist <= cfg.capture_radius and abs(w) <= f.span / 2 + cfg.capture_radius
    return bool(ok), float(np.linalg.norm(perp))


def is_aligned(tool_axis: np.ndarray, f: Flap, theta: float, cfg: EnvConfig) -> bool:
    return abs(float(tool_axis @ f.normal(theta))) >= np.cos(cfg.align_tolerance)


def step(state: FoldEnvState, action: Sequence[float], cfg: EnvConfig) -> FoldEnvState:
    """Advance one control step. The input state is left untouched."""
    a = np.asarray(action, dtype=float)
    if a.shape != (7,) or not np.all(np.isfinite(a)):
        raise ValueError("action must be a finite 7-vector")
    dp = a[:3]
    n = np.linalg.norm(dp)
    if n > cfg.max_step:
        dp = dp * (cfg.max_step / n)
    p0 = state.ee_position
    p1 = np.clip(p0 + dp, cfg.workspace_lo, cfg.workspace_hi)
    q1 = _apply_delta(state.ee_quat, a[3:], cfg.max_rotation) if np.any(a[3:]) else state.ee_quat
    tool = Rotation.from_quat(q1).apply(Z)
    delta = p1 - p0

    angles = state.flap_angles.copy()
    contact = [False, False, False]
    aligned = False
    if not cfg.lock_flaps:
        for k, f in enumerate(flaps(cfg)):
            theta = angles[k]
            ok, r = _edge_contact(f, theta, p0, cfg)
            if not ok:
                continue
            contact[k] = True
            al = is_aligned(tool, f, theta, cfg)
            aligned = aligned or (al and theta >= cfg.align_after)
            progress = float(delta @ f.normal(theta))
            if progress <= 0:
                continue
            new = theta + progress / max(r, 0.5 * f.length)
            if not al:
                new = min(new, max(theta, cfg.align_after))
            angles[k] = min(max(new, 0.0), np.pi)
    return FoldEnvState(
        angles, p1, q1, joint_angles(p1, q1, state.task, cfg), state.task, state.t + 1, tuple(contact), aligned
    )


def contact_flags(state: FoldEnvState, cfg: EnvConfig) -> tuple[bool, bool, bool]:
    """Whether the disc currently sits at each flap's outer edge."""
    return tuple(_edge_contact(f, state.flap_angles[k], state.ee_position, cfg)[0] for k, f in enumerate(flaps(cfg)))


# ---------------------------------------------------------------- vertices


def board_vertices(angles, cfg: EnvConfig) -> np.ndarray:
    """Ten board vertices: center corners, then outer corners of left, right, mid."""
    hw = cfg.center_width / 2
    y0, y1 = cfg.center_y0, cfg.center_y1
    center = np.array([[-hw, y0, 0.0], [hw, y0, 0.0], [hw, y1, 0.0], [-hw, y1, 0.0]])
    outer = [f.corners(angles[k])[2:] for k, f in enumerate(flaps(cfg))]
    return np.vstack([center, *outer])


def anchor_indices(task: Task) -> tuple[list[int], list[int]]:
    """Board-vertex indices of the active flap: hinge corners, outer corners."""
    cfg = EnvConfig()
    k = Task(task).flap
    center = board_vertices(np.zeros(3), cfg)[:4, :2]
    hinge = [int(np.argmin(np.linalg.norm(center - c[:2], axis=1))) for c in flaps(cfg)[k].corners(0.0)[:2]]
    return hinge, [4 + 2 * k, 5 + 2 * k]


def anchor_points(angles, task: Task, cfg: EnvConfig) -> np.ndarray:
    """The active flap's four corners, hinge pair first, in the flap's own ordering."""
    return flaps(cfg)[Task(task).flap].corners(angles[Task(task).flap])


def effector_vertices(position, quat, cfg: EnvConfig) -> np.ndarray:
    """Disc center and a point one tool length along the tool axis."""
    p = np.asarray(position, dtype=float)
    return np.vstack([p, p + cfg.tool_length * Rotation.from_quat(quat).apply(Z)])


def cloth_keypoints(angles, cfg: EnvConfig) -> np.ndarray:
    """Cloth polygon corners carried by the nearest section (overhanging corners included)."""
    fl = flaps(cfg)
    rects = np.array(section_rects(cfg))
    out = []
    for xy in CLOTH_POLYGON:
        dx = np.maximum(0.0, np.maximum(rects[:, 0] - xy[0], xy[0] - rects[:, 1]))
        dy = np.maximum(0.0, np.maximum(rects[:, 2] - xy[1], xy[1] - rects[:, 3]))
        sec = int(np.argmin(np.hypot(dx, dy)))
        out.append(_flat_to_world(xy, sec, angles, fl, cfg)[0])
    return np.array(out)


def observe(state: FoldEnvState, cfg: EnvConfig, rng: np.random.Generator | None = None) -> Observation:
    """Effector pose from kinematics, board and cloth points with marker noise."""
    task = Task(state.task)
    board = board_vertices(state.flap_angles, cfg)
    cloth = cloth_keypoints(state.flap_angles, cfg)
    anchors = anchor_points(state.flap_angles, task, cfg)
    if rng is not None and cfg.obs_noise > 0:
        board = board + rng.normal(0.0, cfg.obs_noise, board.shape)
        cloth = cloth + rng.normal(0.0, cfg.obs_noise, cloth.shape)
        anchors = anchors + rng.normal(0.0, cfg.obs_noise, anchors.shape)
    return Observation(
        ee_position=state.ee_position.copy(),
        joint_angles=state.joint_angles.copy(),
        anchors=anchors,
        effector=effector_vertices(state.ee_position, state.ee_quat, cfg),
        board=board,
        cloth=cloth,
    )


# ---------------------------------------------------------------- rendering

LABELS = {"background": 0, "center": 1, "left": 2, "right": 3, "mid": 4, "cloth": 5, "effector": 6}

_COLORS = {
    0: (0.08, 0.08, 0.1),
    1: (0.55, 0.55, 0.6),
    2: (0.2, 0.4, 0.85),
    3: (0.2, 0.7, 0.3),
    4: (0.9, 0.6, 0.15),
    5: (0.96, 0.92, 0.8),
    6: (0.9, 0.1, 0.1),
}
_BACK_SHADE = 0.55
# fixed panel texture over flat board coordinates: smoothed noise, so flow has gradients inside panels
_TEX_ORIGIN = np.array([-0.4, -0.45])
_TEX_CELL = 0.0025
_TEX_AMPLITUDE = 0.25


def _panel_texture() -> np.ndarray:
    g = gaussian_filter(np.random.default_rng(20240611).standard_normal((360, 300)), sigma=4.0, mode="wrap")
    return g / np.abs(g).max()


_TEXTURE = _panel_texture()


def panel_shade(xy: np.ndarray) -> np.ndarray:
    """Multiplicative panel shading at flat board coordinates ``(n, 2)``."""
    ij = ((np.asarray(xy, dtype=float) - _TEX_ORIGIN) / _TEX_CELL).T[::-1]
    return 1.0 + _TEX_AMPLITUDE * map_coordinates(_TEXTURE, ij, order=1, mode="nearest")
SHAFT_RADIUS = 0.008


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking from ``position`` towards ``target``; pixel centers at integer coordinates."""

    position: tuple[float, float, float]
    target: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    width: int = 128
    height: int = 128
    fov: float = np.deg2rad(30.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        f = np.asarray(self.target, float) - np.asarray(self.position, float)
        nf = np.linalg.norm(f)
        if nf < 1e-12:
            raise ValueError("camera target coincides with its position")
        f /= nf
        r = np.cross(f, self.up)
        if np.linalg.norm(r) < 1e-9:
            raise ValueError("camera up vector is parallel to the view direction")
        r /= np.linalg.norm(r)
        return f, r, np.cross(r, f)

    @property
    def focal(self) -> float:
        return (self.width / 2) / np.tan(self.fov / 2)

    def rays(self) -> np.ndarray:
        f, r, u = self.basis()
        rows, cols = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        cx, cy = (self.width - 1) / 2, (self.height - 1) / 2
        d = self.focal * f + (cols - cx)[..., None] * r - (rows - cy)[..., None] * u
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points) -> np.ndarray:
        """World points (n, 3) to pixel (col, row); NaN for points behind the camera."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        f, r, u = self.basis()
        v = pts - np.asarray(self.position, float)
        zc = v @ f
        cx, cy = (self.width - 1) / 2, (self.height - 1) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            col = cx + self.focal * (v @ r) / zc
            row = cy - self.focal * (v @ u) / zc
        out = np.column_stack([col, row])
        out[zc <= 1e-9] = np.nan
        return out

    def depth(self, points) -> np.ndarray:
        f, _, _ = self.basis()
        return (np.atleast_2d(points) - np.asarray(self.position, float)) @ f


def top_camera(size: int = 128, cfg: EnvConfig | None = None) -> Camera:
    cfg = cfg or EnvConfig()
    yc = cfg.center_y0 + (cfg.center_length - cfg.mid_length) / 2
    return Camera((0.0, yc, 1.3), (0.0, yc, 0.0), (0.0, 1.0, 0.0), size, size, np.deg2rad(30.0))


def oblique_camera(size: int = 128, yaw: float = 0.0, pitch: float = np.deg2rad(55.0), distance: float = 1.35,
                   cfg: EnvConfig | None = None) -> Camera:
    cfg = cfg or EnvConfig()
    yc = cfg.center_y0 + (cfg.center_length - cfg.mid_length) / 2
    target = np.array([0.0, yc, 0.0])
    d = np.array([np.sin(yaw) * np.cos(pitch), -np.cos(yaw) * np.cos(pitch), np.sin(pitch)])
    pos = target + distance * d
    return Camera(tuple(pos), tuple(target), (0.0, 0.0, 1.0), size, size, np.deg2rad(32.0))


@dataclass(frozen=True)
class RenderResult:
    image: np.ndarray  # (h, w, 3) in [0, 1]
    world: np.ndarray  # (h, w, 3), NaN on background
    labels: np.ndarray  # (h, w) int
    depth: np.ndarray  # (h, w), inf on background


def render(state: FoldEnvState, cfg: EnvConfig, camera: Camera | None = None, effector: bool = True) -> RenderResult:
    cam = camera or top_camera(cfg.image_size, cfg)
    f, _, _ = cam.basis()
    board_center = np.array([0.0, cfg.center_y0 + cfg.center_length / 2, 0.0])
    if (board_center - np.asarray(cam.position)) @ f <= 0:
        raise ValueError("camera faces away from the board")
    D = cam.rays().reshape(-1, 3)
    O = np.asarray(cam.position, dtype=float)
    n = len(D)
    best = np.full(n, np.inf)
    label = np.zeros(n, dtype=int)
    shade = np.ones(n)
    back = np.zeros(n, dtype=bool)
    fl = flaps(cfg)
    rects = section_rects(cfg)
    cloth_path = _MplPath(CLOTH_POLYGON)

    def hit_plane(p0, normal):
        denom = D @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p0 - O) @ normal) / denom
        t[~np.isfinite(t) | (np.abs(denom) < 1e-12) | (t <= 0)] = np.inf
        return t, denom > 0

    def commit(t, inside, lab, behind, tone=None):
        sel = inside & (t < best)
        best[sel] = t[sel]
        label[sel] = lab
        back[sel] = behind[sel]
        shade[sel] = 1.0 if tone is None else tone[sel]

    # sections and the cloth lying on them, in flat coordinates
    for k in range(4):
        if k == 0:
            p0, normal = np.zeros(3), Z
        else:
            flap = fl[k - 1]
            theta = state.flap_angles[k - 1]
            p0, normal = flap.hinge, flap.normal(theta)
        for layer, offset in (("panel", 0.0), ("cloth", cfg.cloth_thickness)):
            t, behind = hit_plane(p0 + offset * normal, normal)
            finite = np.isfinite(t)
            hit = O + np.where(finite, t, 0.0)[:, None] * D
            if k == 0:
                xy = hit[:, :2]
            else:
                rel = hit - flap.hinge
                w = rel @ flap.axis
                s = rel @ flap.u(theta)
                xy = (flap.hinge + w[:, None] * flap.axis + s[:, None] * flap.u0)[:, :2]
            x0, x1, y0, y1 = rects[k]
            inside = finite & (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
            if layer == "cloth":
                idx = np.nonzero(inside)[0]
                if len(idx):
                    inside[idx] = cloth_path.contains_points(xy[idx])
                commit(t, inside, LABELS["cloth"], behind)
            else:
                tone = np.ones(n)
                tone[inside] = panel_shade(xy[inside])
                commit(t, inside, k + 1, behind, tone)

    if effector:
        p = state.ee_position
        t, behind = hit_plane(p, state.tool_axis)
        finite = np.isfinite(t)
        hit = O + np.where(finite, t, 0.0)[:, None] * D
        inside = finite & (np.linalg.norm(hit - p, axis=1) <= cfg.disc_radius)
        commit(t, inside, LABELS["effector"], np.zeros(n, dtype=bool))
        # tool shaft: cylinder from the disc center along the tool axis
        a = state.tool_axis
        Dp = D - np.outer(D @ a, a)
        w = O - p
        wp = w - (w @ a) * a
        A = np.einsum("ij,ij->i", Dp, Dp)
        B = Dp @ wp
        disc = B**2 - A * (wp @ wp - SHAFT_RADIUS**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (-B - np.sqrt(np.maximum(disc, 0.0))) / A
        s = (w @ a) + t * (D @ a)
        inside = (disc >= 0) & (A > 1e-12) & (t > 0) & (s >= 0) & (s <= cfg.tool_length)
        commit(np.where(inside, t, np.inf), inside, LABELS["effector"], np.zeros(n, dtype=bool))

    colors = np.array([_COLORS[k] for k in range(7)])
    img = colors[label] * shade[:, None]
    rear = back & (label >= 1) & (label <= 4)
    img[rear] *= _BACK_SHADE
    img = np.clip(img, 0.0, 1.0)
    world = np.where(np.isfinite(best)[:, None], O + np.where(np.isfinite(best), best, 0.0)[:, None] * D, np.nan)
    h, w = cam.height, cam.width
    return RenderResult(img.reshape(h, w, 3), world.reshape(h, w, 3), label.reshape(h, w), best.reshape(h, w))


def cloth_mask(frame: np.ndarray, tol: float = 0.05) -> np.ndarray:
    """Cloth pixels of a rendered frame, found by color."""
    frame = np.asarray(frame, dtype=float)
    return np.all(np.abs(frame - np.asarray(_COLORS[LABELS["cloth"]])) <= tol, axis=-1)


# ---------------------------------------------------------------- expert


@dataclass(frozen=True)
class Demonstration:
    task: Task
    states: list
    actions: np.ndarray
    phases: list
    frames: list = field(default_factory=list)


def _toward(p, target, cfg: EnvConfig) -> np.ndarray:
    d = np.asarray(target) - np.asarray(p)
    n = np.linalg.norm(d)
    return d if n <= cfg.max_step else d * (cfg.max_step / n)


def _rot_delta(q_from: np.ndarray, rot_to: Rotation, max_angle: float) -> np.ndarray:
    """Quaternion delta (added to identity) that moves ``q_from`` towards ``rot_to``."""
    rv = (rot_to * Rotation.from_quat(q_from).inv()).as_rotvec()
    ang = np.linalg.norm(rv)
    if ang > max_angle:
        rv *= max_angle / ang
    dq = Rotation.from_rotvec(rv).as_quat()
    if dq[3] < 0:
        dq = -dq
    return dq - np.array([0.0, 0.0, 0.0, 1.0])


PHASE_STEPS = {
    SubProcess.APPROACHING: 12,
    SubProcess.LIFTING: 6,
    SubProcess.ROTATING: 4,
    SubProcess.PUSHING: 18,
}
LIFT_ANGLE = np.deg2rad(45.0)
EDGE_OFFSET = 0.01


class ExpertController:
    """Waypoint controller for one fold; ``act`` reads only the current state and step index."""

    def __init__(self, task: Task | str, cfg: EnvConfig):
        self.task = Task(task)
        self.cfg = cfg.validate()
        self.flap = flaps(cfg)[self.task.flap]
        self.radius = self.flap.length + EDGE_OFFSET
        self.start = self.flap.hinge + self.radius * self.flap.u0
        self.above = self.start + np.array([0.0, 0.0, 0.08])
        self.home = cfg.home
        b = np.cumsum([PHASE_STEPS[p] for p in SubProcess])
        self.bounds = dict(zip(SubProcess, b))

    @property
    def horizon(self) -> int:
        return int(self.bounds[SubProcess.PUSHING])

    def phase(self, i: int) -> SubProcess:
        for p in SubProcess:
            if i < self.bounds[p]:
                return p
        raise IndexError(f"step {i} is past the horizon {self.horizon}")

    def act(self, state: FoldEnvState, i: int) -> np.ndarray:
        cfg, f = self.cfg, self.flap
        k = self.task.flap
        phase = self.phase(i)
        theta = state.flap_angles[k]
        if phase is SubProcess.APPROACHING:
            transit = PHASE_STEPS[phase] - 2
            if i < transit:
                target = self.home + (self.above - self.home) * (i + 1) / transit
            else:
                target = self.above + (self.start - self.above) * (i - transit + 1) / 2
            return np.concatenate([_toward(state.ee_position, target, cfg), np.zeros(4)])
        remaining = self.bounds[phase] - i
        if phase is SubProcess.LIFTING:
            return self._arc(state, theta + (LIFT_ANGLE - theta) / remaining, None)
        if phase is SubProcess.ROTATING:
            cur = Rotation.from_quat(state.ee_quat)
            rv = (f.rotation(theta) * cur.inv()).as_rotvec() / remaining
            return np.concatenate([np.zeros(3), _rot_delta(state.ee_quat, Rotation.from_rotvec(rv) * cur, cfg.max_rotation)])
        nxt = theta + 1.03 * (np.pi - theta) / remaining if remaining > 1 else np.pi + 0.1
        return self._arc(state, nxt, f.rotation(min(nxt, np.pi)))

    def _arc(self, state, theta_target, rot_target):
        target = self.flap.hinge + self.radius * self.flap.u(theta_target)
        dp = _toward(state.ee_position, target, self.cfg)
        dq = np.zeros(4) if rot_target is None else _rot_delta(state.ee_quat, rot_target, self.cfg.max_rotation)
        return np.concatenate([dp, dq])


def expert_horizon() -> int:
    return int(sum(PHASE_STEPS.values()))


def scripted_expert(task: Task | str, cfg: EnvConfig | None = None, camera: Camera | None = None,
                    frames: bool = True, effector: bool = True) -> Demonstration:
    """Run the waypoint controller from reset; returns states (T+1), actions (T), phases and frames."""
    cfg = cfg or EnvConfig()
    ctrl = ExpertController(task, cfg)
    s = reset(cfg, task)
    states, actions, phases = [s], [], []
    for i in range(ctrl.horizon):
        a = ctrl.act(states[-1], i)
        actions.append(a)
        phases.append(ctrl.phase(i))
        states.append(step(states[-1], a, cfg))
    imgs = [render(st, cfg, camera, effector).image for st in states] if frames else []
    return Demonstration(Task(task), states, np.array(actions), phases, imgs)


# ---------------------------------------------------------------- state classes

FOLD_CLASSES = ("flat", "partial", "folded")


def fold_class(theta: float) -> str:
    if theta < np.deg2rad(25.0):
        return "flat"
    if theta < np.deg2rad(170.0):
        return "partial"
    return "folded"


def classifier_dataset(cfg: EnvConfig, task: Task | str, n_per_class: int = 12, seed: int = 0,
                       camera: Camera | None = None) -> tuple[list[np.ndarray], list[str]]:
    """Cloth masks of top-view renders (no effector) at sampled hinge angles, labelled by fold stage."""
    task = Task(task)
    rng = np.random.default_rng(seed)
    ranges = {"flat": (0.0, 20.0), "partial": (30.0, 165.0), "folded": (172.0, 180.0)}
    masks, labels = [], []
    base = reset(cfg, task)
    for label in FOLD_CLASSES:
        lo, hi = ranges[label]
        for theta in np.deg2rad(rng.uniform(lo, hi, n_per_class)):
            angles = np.zeros(3)
            angles[task.flap] = theta
            st = replace(base, flap_angles=angles)
            m = cloth_mask(render(st, cfg, camera, effector=False).image)
            masks.append(m)
            labels.append(label)
    return masks, labels


def success_check(final_frame: np.ndarray, model, task: Task | str | None = None) -> bool:
    """True iff the classifier puts the final cloth mask in the folded class."""
    from .shape import classify_state

    label, _ = classify_state(cloth_mask(final_frame), model)
    return label == "folded"


# ---------------------------------------------------------------- multi-view data


@dataclass(frozen=True)
class SceneViews:
    """One board state seen from two cameras, with ground-truth world maps."""

    state: FoldEnvState
    camera_a: Camera
    camera_b: Camera
    render_a: RenderResult
    render_b: RenderResult

    def view_pair(self):
        from .correspondence import ViewPair

        return ViewPair(self.render_a.image, self.render_b.image, self.render_a.world, self.render_b.world,
                        self.camera_b.project)

    def corner_queries(self, cfg: EnvConfig, tol: float = 0.01) -> list[tuple[tuple[int, int], np.ndarray]]:
        """Board vertices visible in both views: (pixel in A as (row, col), true (col, row) in B)."""
        out = []
        h, w = self.render_a.labels.shape
        for X in board_vertices(self.state.flap_angles, cfg):
            a = self.camera_a.project(X[None])[0]
            b = self.camera_b.project(X[None])[0]
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                continue
            ia = (int(np.rint(a[1])), int(np.rint(a[0])))
            ib = (int(np.rint(b[1])), int(np.rint(b[0])))
            if not all(0 <= i[0] < h and 0 <= i[1] < w for i in (ia, ib)):
                continue
            if _visible(self.render_a.world, ia, X, tol) and _visible(self.render_b.world, ib, X, tol):
                out.append((ia, b))
        return out


def _visible(world: np.ndarray, px, X, tol) -> bool:
    r, c = px
    win = world[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2].reshape(-1, 3)
    d = np.linalg.norm(win - X, axis=1)
    d = d[np.isfinite(d)]
    return bool(len(d) and d.min() < tol)


def random_views(cfg: EnvConfig, rng: np.random.Generator, size: int = 128, yaw: float = np.deg2rad(15.0),
                 pitch: tuple[float, float] = (np.deg2rad(55.0), np.deg2rad(75.0)),
                 distance: tuple[float, float] = (1.25, 1.45)) -> SceneViews:
    """A random single-flap board state rendered (without the effector) from two random oblique cameras."""
    angles = np.zeros(3)
    angles[rng.integers(3)] = rng.uniform(0.0, np.pi)
    st = replace(reset(cfg, Task.LEFT), flap_angles=angles)
    cams = [
        oblique_camera(size, rng.uniform(-yaw, yaw), rng.uniform(*pitch), rng.uniform(*distance), cfg)
        for _ in range(2)
    ]
    ra, rb = (render(st, cfg, c, effector=False) for c in cams)
    return SceneViews(st, cams[0], cams[1], ra, rb)
