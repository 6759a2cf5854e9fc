"""Demonstration capture, reward construction, policy training and evaluation.

Three reward modes compare imitation rollouts with one scripted
demonstration:

``refined``
    Graph dissimilarity with edges gated by the demonstration's refined-flow
    saliency at each step.
``plain``
    Graph dissimilarity with every edge kept.
``embedding``
    Negative of the Huber-style embedding reward, where the embedding is a
    fixed stand-in: the shape descriptor of the cloth mask in a top-view
    render, scaled per dimension by the demonstration's spread.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import io
from .correspondence import Featurizer, descriptor_map, match_correspondence, train_descriptor
from .graph import (
    Edge,
    SpatioTemporalGraph,
    Vertex,
    VertexKind,
    _anchor_frame,
    edge_mask,
    record_priors,
)
from .policy import (
    GaussNewtonCost,
    TvlgPolicy,
    Trajectory,
    pilqr_step,
    sample_action,
    state_vector,
    step_cost,
    tcn_reward,
)
from .saliency import saliency_pipeline
from .shape import ClothStateModel, EmptyMaskError, classify_state, feature_vector, train_classifier
from .sim import (
    Camera,
    EnvConfig,
    ExpertController,
    FoldEnvState,
    SceneViews,
    SubProcess,
    Task,
    anchor_indices,
    board_vertices,
    classifier_dataset,
    cloth_keypoints,
    cloth_mask,
    flaps,
    oblique_camera,
    observe,
    reference_rotation,
    random_views,
    render,
    reset,
    scripted_expert,
    step,
    top_camera,
)

__all__ = [
    "RewardMode",
    "RunConfig",
    "parse_bool",
    "ConfigValidationError",
    "GraphModel",
    "DemoData",
    "record_demo",
    "save_demo",
    "load_demo",
    "RewardModel",
    "rollout",
    "policy_controller",
    "expert_controller",
    "subprocess_flags",
    "initial_policy",
    "RunFlags",
    "RunReport",
    "train_policy",
    "evaluate_policy",
    "train_state_classifier",
    "correspondence_accuracy",
    "descriptor_experiment",
]

Z = np.array([0.0, 0.0, 1.0])
N_JOINTS = 6
N_ANCHORS = 4
ACTION_DIM = 7


class RewardMode(str, Enum):
    REFINED = "refined"
    PLAIN = "plain"
    EMBEDDING = "embedding"


def parse_bool(v) -> bool:
    """Strict boolean from a bool or one of true/false/1/0/yes/no."""
    if isinstance(v, bool):
        return v
    key = str(v).strip().lower()
    if key in ("true", "1", "yes"):
        return True
    if key in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


class ConfigValidationError(ValueError):
    """Carries every failed check as ``(identifier, message)``."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{code}: {msg}" for code, msg in problems))


@dataclass(frozen=True)
class RunConfig:
    task: str = "left"
    seed: int = 0
    mode: str = "refined"
    iterations: int = 20
    rollouts: int = 16
    eval_runs: int = 8
    demo_seed: int = 0
    # saliency and edge gating
    lam: float = 5.0
    epsilon: float = 0.5
    tau_f: float = 0.3
    mask_window: int = 4
    step_normalize: bool = True
    canny_low: float = 0.1
    canny_high: float = 0.3
    image_size: int = 128
    weight_effector_board: float = 1.0
    weight_board: float = 1.0
    weight_cloth: float = 1.0
    # optimizer
    mb_fraction: float = 0.5
    temperature: float = 0.5
    dyn_reg: float = 1e-6
    prior_strength: float = 1e-2
    action_penalty: float = 1e-3
    trust: float = 0.1
    kl_weight: float = 1.0
    kl_adapt: float = 2.0
    gn_damping: float = 1e-3
    norm_floor: float = 0.01
    init_std_translation: float = 0.01
    init_std_rotation: float = 0.02
    cov_decay: float = 0.75
    # embedding baseline
    alpha: float = 0.8
    beta: float = 0.001
    gamma: float = 1e-5
    embed_size: int = 40
    # simulator
    obs_noise: float = 0.001

    def validate(self) -> "RunConfig":
        p: list[tuple[str, str]] = []

        def need(cond, code, msg):
            if not cond:
                p.append((code, msg))

        need(self.task in {"left", "right", "mid", "lq"}, "E_CONFIG_ENUM", f"task must be left, right, mid or lq, got {self.task!r}")
        need(self.mode in {m.value for m in RewardMode}, "E_CONFIG_ENUM", f"mode must be refined, plain or embedding, got {self.mode!r}")
        need(self.iterations >= 0, "E_CONFIG_RANGE", f"iterations must be >= 0, got {self.iterations}")
        need(self.rollouts >= 2, "E_CONFIG_RANGE", f"rollouts must be >= 2, got {self.rollouts}")
        need(self.eval_runs >= 1, "E_CONFIG_RANGE", f"eval_runs must be >= 1, got {self.eval_runs}")
        need(self.lam > 0, "E_CONFIG_RANGE", f"lam must be > 0, got {self.lam}")
        need(0 < self.epsilon < 1, "E_CONFIG_RANGE", f"epsilon must lie in (0, 1), got {self.epsilon}")
        need(0 < self.tau_f <= 1, "E_CONFIG_RANGE", f"tau_f must lie in (0, 1], got {self.tau_f}")
        need(self.mask_window >= 0, "E_CONFIG_RANGE", f"mask_window must be >= 0, got {self.mask_window}")
        need(self.canny_low < self.canny_high, "E_CONFIG_RANGE", "canny_low must be below canny_high")
        need(self.image_size >= 32, "E_CONFIG_RANGE", f"image_size must be >= 32, got {self.image_size}")
        need(self.embed_size >= 32, "E_CONFIG_RANGE", f"embed_size must be >= 32, got {self.embed_size}")
        for name in ("weight_effector_board", "weight_board", "weight_cloth", "action_penalty", "trust", "kl_weight",
                     "gn_damping", "norm_floor", "dyn_reg", "prior_strength", "obs_noise"):
            need(getattr(self, name) >= 0, "E_CONFIG_RANGE", f"{name} must be >= 0, got {getattr(self, name)}")
        need(0 <= self.mb_fraction <= 1, "E_CONFIG_RANGE", f"mb_fraction must lie in [0, 1], got {self.mb_fraction}")
        need(self.temperature > 0, "E_CONFIG_RANGE", f"temperature must be > 0, got {self.temperature}")
        need(self.init_std_translation > 0 and self.init_std_rotation > 0, "E_CONFIG_RANGE", "initial exploration std must be > 0")
        need(self.kl_adapt >= 1, "E_CONFIG_RANGE", f"kl_adapt must be >= 1, got {self.kl_adapt}")
        need(0 < self.cov_decay <= 1, "E_CONFIG_RANGE", f"cov_decay must lie in (0, 1], got {self.cov_decay}")
        need(self.alpha >= 0 and self.beta >= 0, "E_CONFIG_RANGE", "alpha and beta must be >= 0")
        need(self.gamma > 0, "E_CONFIG_RANGE", f"gamma must be > 0, got {self.gamma}")
        if p:
            raise ConfigValidationError(p)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigValidationError([("E_CONFIG_KEY", f"unknown config keys: {', '.join(unknown)}")])
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        types = {k: parse_bool if t is bool else t for k, t in types.items()}
        try:
            return cls(**{k: types[k](v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigValidationError([("E_CONFIG_TYPE", str(exc))]) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(obs_noise=self.obs_noise, lock_flaps=self.task == "lq", image_size=self.image_size)

    @property
    def sim_task(self) -> Task:
        return Task.LEFT if self.task == "lq" else Task(self.task)


# ---------------------------------------------------------------- graphs


class GraphModel:
    """Fixed graph topology and the map from state vectors to vertex positions.

    Vertex ids: 0-1 effector (disc center, tool point), 2-11 board, then
    cloth keypoints. Board vertices of the active flap come straight from the
    anchors; the rest are placed from the two hinge anchors with priors
    recorded on the flat board.
    """

    def __init__(self, env: EnvConfig, task: Task, weights: tuple[float, float, float] = (1.0, 1.0, 1.0)):
        self.env = env
        self.task = Task(task)
        self.R0 = reference_rotation(self.task, env)
        self.hinge_idx, self.outer_idx = anchor_indices(self.task)
        known = set(self.hinge_idx + self.outer_idx)
        self.hidden_idx = [i for i in range(10) if i not in known]
        flat = board_vertices(np.zeros(3), env)
        hinge = flaps(env)[self.task.flap].corners(0.0)[:2]
        priors = record_priors(hinge, Z, flat[self.hidden_idx])
        self.prior_t = np.array([P[:3, 3] for P in priors])
        # cloth keypoints on the active flap ride rigidly with its anchor frame
        c_flat = cloth_keypoints(np.zeros(3), env)
        lifted = np.zeros(3)
        lifted[self.task.flap] = np.pi / 2
        self.cloth_on_flap = np.linalg.norm(cloth_keypoints(lifted, env) - c_flat, axis=1) > 1e-9
        self.cloth_flat = c_flat
        o, R = self._flap_frame(flaps(env)[self.task.flap].corners(0.0))
        self.cloth_local = (c_flat - o) @ R
        self.n_cloth = len(c_flat)
        w_eb, w_bb, w_cc = weights
        edges = [Edge(e, 2 + b, w_eb) for e in range(2) for b in range(10)]
        ring = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (6, 7), (8, 9)]
        edges += [Edge(2 + a, 2 + b, w_bb) for a, b in ring]
        nc = self.n_cloth
        edges += [Edge(12 + i, 12 + (i + 1) % nc, w_cc) for i in range(nc)]
        self.edges = edges
        self.edge_pairs = np.array([[e.i, e.j] for e in edges])
        self.edge_weights = np.array([e.weight for e in edges])
        # the dissimilarity sums over effector-board edges only
        self.effector_board = np.array([(e.i < 2) != (e.j < 2) and max(e.i, e.j) < 12 for e in edges])

    @staticmethod
    def _flap_frame(anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Origin and rotation (columns: hinge axis, flap direction, normal) from four anchors."""
        o = anchors[:2].mean(axis=0)
        a = anchors[1] - anchors[0]
        a /= np.linalg.norm(a)
        d = anchors[2:].mean(axis=0) - o
        d -= (d @ a) * a
        d /= np.linalg.norm(d)
        return o, np.column_stack([a, d, np.cross(a, d)])

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def effector(self, s: np.ndarray) -> np.ndarray:
        p = s[:3]
        R = Rotation.from_rotvec(s[6:9]) * self.R0
        return np.vstack([p, p + self.env.tool_length * R.apply(Z)])

    def board(self, s: np.ndarray) -> np.ndarray:
        anchors = s[9:21].reshape(4, 3)
        B = np.empty((10, 3))
        B[self.hinge_idx] = anchors[:2]
        B[self.outer_idx] = anchors[2:]
        T = _anchor_frame(anchors[:2], Z)
        B[self.hidden_idx] = self.prior_t @ T[:3, :3].T + T[:3, 3]
        return B

    def cloth(self, s: np.ndarray) -> np.ndarray:
        """Cloth keypoints predicted from the anchors, assuming the cloth moves rigidly with its section."""
        o, R = self._flap_frame(s[9:21].reshape(4, 3))
        C = self.cloth_flat.copy()
        C[self.cloth_on_flap] = o + self.cloth_local[self.cloth_on_flap] @ R.T
        return C

    def positions(self, s: np.ndarray) -> np.ndarray:
        return np.vstack([self.effector(s), self.board(s), self.cloth(s)])

    def graph(self, s: np.ndarray, cloth: np.ndarray | None = None, t: int = 0) -> SpatioTemporalGraph:
        """Graph at state ``s``; ``cloth`` overrides the predicted cloth keypoints with observed ones."""
        E, B = self.effector(s), self.board(s)
        C = self.cloth(s) if cloth is None else np.asarray(cloth)
        verts = [Vertex(i, VertexKind.EFFECTOR, tuple(E[i])) for i in range(2)]
        verts += [Vertex(2 + i, VertexKind.BOARD, tuple(B[i])) for i in range(10)]
        verts += [Vertex(12 + i, VertexKind.CLOTH, tuple(C[i])) for i in range(self.n_cloth)]
        return SpatioTemporalGraph(t, verts, self.edges)

    def relative(self, s: np.ndarray) -> np.ndarray:
        """Relative vector of every edge, with cloth keypoints predicted from the state."""
        P = self.positions(s)
        return P[self.edge_pairs[:, 0]] - P[self.edge_pairs[:, 1]]

    def residuals(self, s: np.ndarray, demo_rel: np.ndarray) -> np.ndarray:
        """Demo relative vectors minus the imitation's, per edge."""
        return demo_rel - self.relative(s)


def flap_angle_from_anchors(s: np.ndarray, task: Task, env: EnvConfig) -> float:
    f = flaps(env)[Task(task).flap]
    a = s[9:21].reshape(4, 3)
    d = a[2:].mean(axis=0) - a[:2].mean(axis=0)
    return float(np.clip(np.arctan2(d @ Z, d @ f.u0), 0.0, np.pi))


def render_pose(s: np.ndarray, task: Task, env: EnvConfig) -> np.ndarray:
    """The part of a state vector a render depends on: (flap angle, position, rotation vector)."""
    return np.concatenate([[flap_angle_from_anchors(s, task, env)], s[0:3], s[6:9]])


def sim_state_from_pose(pose: np.ndarray, task: Task, env: EnvConfig) -> FoldEnvState:
    """Rebuild the renderable simulator state from a render pose."""
    base = reset(env, task)
    angles = np.zeros(3)
    angles[Task(task).flap] = np.clip(pose[0], 0.0, np.pi)
    q = (Rotation.from_rotvec(pose[4:7]) * reference_rotation(task, env)).as_quat()
    return replace(base, flap_angles=angles, ee_position=np.array(pose[1:4]), ee_quat=q)


def sim_state_from_vector(s: np.ndarray, task: Task, env: EnvConfig) -> FoldEnvState:
    """Rebuild the renderable simulator state a state vector describes."""
    return sim_state_from_pose(render_pose(s, task, env), task, env)


# ---------------------------------------------------------------- demonstrations


@dataclass(frozen=True)
class DemoData:
    task: str
    seed: int
    frames: list
    sim_states: np.ndarray  # (T+1, 10): flap angles, position, quaternion
    vectors: np.ndarray  # (T+1, 25)
    actions: np.ndarray  # (T, 7)
    graphs: list
    camera: Camera


def _straight_demo(env: EnvConfig, camera: Camera):
    """Effector glides from home to a point above the left flap; flaps are locked."""
    T = ExpertController(Task.LEFT, env).horizon
    s = reset(env, Task.LEFT)
    goal = np.array([-0.2, 0.02, 0.15])
    start = s.ee_position.copy()
    states, actions = [s], []
    for i in range(T):
        target = start + (goal - start) * (i + 1) / T
        a = np.concatenate([target - states[-1].ee_position, np.zeros(4)])
        actions.append(a)
        states.append(step(states[-1], a, env))
    return states, np.array(actions)


def record_demo(task: str, seed: int = 0, env: EnvConfig | None = None, image_size: int = 128) -> DemoData:
    env = env or EnvConfig(lock_flaps=task == "lq", image_size=image_size)
    # an oblique view shows the flap rotating; from straight above it barely changes outline
    camera = oblique_camera(image_size, cfg=env)
    sim_task = Task.LEFT if task == "lq" else Task(task)
    if task == "lq":
        states, actions = _straight_demo(env, camera)
    else:
        demo = scripted_expert(sim_task, env, camera, frames=False)
        states, actions = demo.states, demo.actions
    frames = [render(s, env, camera).image for s in states]
    rng = np.random.default_rng([seed, 7])
    gm = GraphModel(env, sim_task)
    vectors, graphs = [], []
    for t, s in enumerate(states):
        obs = observe(s, env, rng)
        v = state_vector(obs)
        vectors.append(v)
        graphs.append(gm.graph(v, obs.cloth, t))
    sim = np.array([np.concatenate([s.flap_angles, s.ee_position, s.ee_quat]) for s in states])
    return DemoData(task, seed, frames, sim, np.array(vectors), np.asarray(actions), graphs, camera)


def save_demo(demo: DemoData, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(demo.frames):
            io.save_image(out / "frames" / f"{t:04d}.png", f)
        io.save_graphs(out / "graphs.jsonl", demo.graphs)
        traj = Trajectory(demo.vectors, demo.actions, np.zeros(len(demo.actions)))
        n, m = demo.vectors.shape[1], demo.actions.shape[1]
        header = ["t"] + [f"s{i}" for i in range(n)] + [f"a{i}" for i in range(m)] + ["cost"]
        io.write_rows(out / "trajectory.csv", header, traj.rows())
        sim_header = ["t", "flap_left", "flap_right", "flap_mid", "x", "y", "z", "qx", "qy", "qz", "qw"]
        io.write_rows(out / "sim_states.csv", sim_header, [[t, *r] for t, r in enumerate(demo.sim_states)])
        cam = asdict(demo.camera)
        manifest = {"task": demo.task, "seed": demo.seed, "horizon": len(demo.actions), "camera": cam,
                    "config_hash": hashlib.sha256(json.dumps(cam, sort_keys=True).encode()).hexdigest()[:16]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"E_IO: cannot write demonstration to {out}: {exc}") from exc
    return out


def load_demo(path: str | Path) -> DemoData:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        T = int(manifest["horizon"])
        frames = [io.load_image(root / "frames" / f"{t:04d}.png") for t in range(T + 1)]
        graphs = io.load_graphs(root / "graphs.jsonl")
        _, traj = io.read_rows(root / "trajectory.csv")
        _, sim = io.read_rows(root / "sim_states.csv")
    except (OSError, KeyError, ValueError) as exc:
        raise OSError(f"E_IO: cannot read demonstration from {root}: {exc}") from exc
    n = (traj.shape[1] - 2 - ACTION_DIM)
    cam = manifest["camera"]
    camera = Camera(tuple(cam["position"]), tuple(cam["target"]), tuple(cam["up"]), int(cam["width"]),
                    int(cam["height"]), float(cam["fov"]))
    return DemoData(manifest["task"], int(manifest["seed"]), frames, sim[:, 1:], traj[:, 1 : 1 + n],
                    traj[:T, 1 + n : 1 + n + ACTION_DIM], graphs, camera)


# ---------------------------------------------------------------- rewards


def demo_edge_masks(demo: DemoData, cfg: RunConfig) -> np.ndarray:
    """Per demo step, which edges lie on salient moving pixels of the demonstration."""
    n_eb = sum(1 for e in demo.graphs[0].edges if e.i < 2)
    masks = []
    frames = demo.frames
    for t, g in enumerate(demo.graphs):
        a, b = (frames[0], frames[1]) if t == 0 else (frames[t - 1], frames[t])
        res = saliency_pipeline(a, b, cfg.lam, cfg.epsilon, cfg.canny_low, cfg.canny_high)
        masks.append(edge_mask(g, res.score, demo.camera.project, cfg.epsilon, cfg.tau_f))
    return window_masks(hold_masks(np.array(masks), n_eb), cfg.mask_window)


def hold_masks(masks: np.ndarray, n_eb: int = 20) -> np.ndarray:
    """Steps with no salient effector-board edge keep the nearest earlier step's mask.

    A still frame pair carries no motion evidence, so the edges that mattered
    last stay in force; leading empty steps take the first nonempty mask.
    """
    out = masks.copy()
    live = out[:, :n_eb].any(axis=1)
    if not live.any():
        return out
    last = out[int(np.argmax(live))]
    for t in range(len(out)):
        if live[t]:
            last = out[t]
        else:
            out[t] = last
    return out


def window_masks(masks: np.ndarray, w: int) -> np.ndarray:
    """An edge stays preserved at step t if it is salient anywhere in steps t-w..t+w."""
    if w <= 0:
        return masks.copy()
    return ndimage.maximum_filter1d(masks.astype(np.uint8), 2 * w + 1, axis=0, mode="nearest").astype(bool)


MEMO_LIMIT = 100_000


class Embedding:
    """Shape descriptor of the cloth mask in a small top-view render, scaled per dimension."""

    def __init__(self, env: EnvConfig, task: Task, size: int, scale: np.ndarray | None = None):
        self.env = env
        self.task = Task(task)
        self.camera = top_camera(size, env)
        self.scale = scale
        # descriptors by packed mask; small state perturbations often leave the mask unchanged
        self._memo: dict[bytes, np.ndarray] = {}

    def raw(self, state: FoldEnvState) -> np.ndarray:
        mask = cloth_mask(render(state, self.env, self.camera).image)
        key = np.packbits(mask).tobytes()
        z = self._memo.get(key)
        if z is None:
            z = feature_vector(mask) if mask.any() else np.zeros(67)
            if len(self._memo) >= MEMO_LIMIT:
                self._memo.clear()
            self._memo[key] = z
        return z.copy()

    def __call__(self, state: FoldEnvState) -> np.ndarray:
        z = self.raw(state)
        return z if self.scale is None else z / self.scale

    def of_vector(self, s: np.ndarray) -> np.ndarray:
        return self(sim_state_from_vector(s, self.task, self.env))

    def jacobian(self, s: np.ndarray, eps: float = 1e-3) -> np.ndarray:
        """Forward-difference Jacobian of ``of_vector`` at ``s``.

        The render sees the twelve anchor coordinates only through the flap
        angle, so differences are taken in the 7-dim render pose and mapped
        back through the angle's derivative.
        """
        pose = render_pose(s, self.task, self.env)
        z0 = self(sim_state_from_pose(pose, self.task, self.env))
        Jp = np.empty((len(z0), len(pose)))
        for i in range(len(pose)):
            q = pose.copy()
            q[i] += eps
            Jp[:, i] = (self(sim_state_from_pose(q, self.task, self.env)) - z0) / eps
        D = np.zeros((len(pose), len(s)))
        D[1:4, 0:3] = D[4:7, 6:9] = np.eye(3)
        for j in range(9, 21):
            sp = s.copy()
            sp[j] += eps
            D[0, j] = (flap_angle_from_anchors(sp, self.task, self.env) - pose[0]) / eps
        return Jp @ D


def step_scales(masks: np.ndarray, gm: GraphModel, normalize: bool = True) -> np.ndarray:
    """Per-step factor giving the preserved effector-board edges the weight of the full edge set.

    Without it a step counts in proportion to how many of its edges are
    salient. With every edge preserved the factor is exactly one.
    """
    if not normalize:
        return np.ones(len(masks))
    w = gm.edge_weights * gm.effector_board
    kept = (masks * w).sum(axis=1)
    return np.where(kept > 0, w.sum() / np.where(kept > 0, kept, 1.0), 1.0)


@dataclass
class RewardModel:
    """Step costs of imitation rollouts against one demonstration, plus their quadratic model."""

    cfg: RunConfig
    demo: DemoData
    graph_model: GraphModel
    masks: np.ndarray  # (T+1, n_edges)
    embedding: Embedding | None = None
    demo_z: np.ndarray | None = None
    step_scale: np.ndarray | None = None  # (T+1,) multiplies each step's graph cost

    @classmethod
    def build(cls, cfg: RunConfig, demo: DemoData) -> "RewardModel":
        env = cfg.env
        gm = GraphModel(env, cfg.sim_task, (cfg.weight_effector_board, cfg.weight_board, cfg.weight_cloth))
        mode = RewardMode(cfg.mode)
        if mode is RewardMode.REFINED:
            masks = demo_edge_masks(demo, cfg)
        else:
            masks = np.ones((len(demo.graphs), gm.n_edges), dtype=bool)
        emb = zs = None
        if mode is RewardMode.EMBEDDING:
            emb = Embedding(env, cfg.sim_task, cfg.embed_size)
            base = reset(env, cfg.sim_task)
            raws = []
            for r in demo.sim_states:
                st = replace(base, flap_angles=r[:3], ee_position=r[3:6], ee_quat=r[6:10])
                raws.append(emb.raw(st))
            raws = np.array(raws)
            spread = raws.std(axis=0)
            emb.scale = np.where(spread > 1e-9, spread, 1.0)
            zs = raws / emb.scale
        # rebuild demo graphs with this run's edge weights
        demo = replace(demo, graphs=[gm.graph(v, g.positions()[12:], t) for t, (v, g) in enumerate(zip(demo.vectors, demo.graphs))])
        return cls(cfg, demo, gm, masks, emb, zs, step_scales(masks, gm, cfg.step_normalize))

    @property
    def horizon(self) -> int:
        return len(self.demo.actions)

    def state_cost(self, t: int, s: np.ndarray, cloth: np.ndarray | None = None) -> float:
        if self.embedding is not None:
            return -tcn_reward(self.demo_z[t], self.embedding.of_vector(s), self.cfg.alpha, self.cfg.beta, self.cfg.gamma)
        return self.step_scale[t] * step_cost(self.demo.graphs[t], self.graph_model.graph(s, cloth, t), self.masks[t])

    def costs(self, states: np.ndarray, actions: np.ndarray, cloth: Sequence | None = None) -> np.ndarray:
        T = len(actions)
        out = np.empty(T + 1)
        for t in range(T + 1):
            c = None if cloth is None else cloth[t]
            out[t] = self.state_cost(t, states[t], c)
            if t < T:
                out[t] += self.cfg.action_penalty * float(actions[t] @ actions[t])
        return out

    def cost_model(self) -> GaussNewtonCost:
        cfg = self.cfg
        if self.embedding is not None:
            emb, zE = self.embedding, self.demo_z

            def residuals(t, s):
                return (zE[t] - emb.of_vector(s))[None, :], np.ones(1)

            def jacobian(t, s):
                return -emb.jacobian(s)[None]

            return GaussNewtonCost(residuals, self.horizon, "tcn", cfg.action_penalty, cfg.gn_damping, cfg.trust,
                                   alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma, jacobian=jacobian)
        gm = self.graph_model
        demo_rel = [g.positions()[gm.edge_pairs[:, 0]] - g.positions()[gm.edge_pairs[:, 1]] for g in self.demo.graphs]

        eb = gm.effector_board

        def residuals(t, s):
            return gm.residuals(s, demo_rel[t])[eb], (self.step_scale[t] * gm.edge_weights * self.masks[t])[eb]

        return GaussNewtonCost(residuals, self.horizon, "norm", cfg.action_penalty, cfg.gn_damping, cfg.trust,
                               norm_floor=cfg.norm_floor)


# ---------------------------------------------------------------- rollouts


@dataclass(frozen=True)
class RunFlags:
    approaching: bool
    lifting: bool
    rotating: bool
    pushing: bool

    @property
    def success(self) -> bool:
        return self.approaching and self.lifting and self.rotating and self.pushing


def subprocess_flags(states: Sequence[FoldEnvState], env: EnvConfig, task: Task, model: ClothStateModel | None) -> RunFlags:
    k = Task(task).flap
    contact = any(s.contact[k] for s in states)
    lifted = max(s.flap_angles[k] for s in states) >= np.deg2rad(30.0)
    rotated = any(s.contact[k] and s.aligned for s in states)
    pushed = False
    if model is not None:
        frame = render(states[-1], env, top_camera(env.image_size, env), effector=False).image
        try:
            label, _ = classify_state(cloth_mask(frame), model)
            pushed = label == "folded"
        except EmptyMaskError:
            pushed = False
    return RunFlags(bool(contact), bool(lifted), bool(rotated), bool(pushed))


Controller = Callable[[FoldEnvState, np.ndarray, int, np.random.Generator], np.ndarray]


def policy_controller(policy: TvlgPolicy, stochastic: bool = True) -> Controller:
    def act(state, s, t, rng):
        return sample_action(policy, s, t, rng) if stochastic else policy.mean(s, t)

    return act


def expert_controller(task: Task, env: EnvConfig) -> Controller:
    ctrl = ExpertController(task, env)

    def act(state, s, t, rng):
        return ctrl.act(state, t)

    return act


def rollout(controller: Controller, env: EnvConfig, task: Task, horizon: int, rng: np.random.Generator):
    """Run one episode; returns (state vectors, actions, sim states, cloth keypoints)."""
    st = reset(env, task)
    vecs, acts, sims, cloth = [], [], [st], []
    for t in range(horizon + 1):
        obs = observe(st, env, rng)
        s = state_vector(obs)
        vecs.append(s)
        cloth.append(obs.cloth)
        if t == horizon:
            break
        a = np.asarray(controller(st, s, t, rng), dtype=float)
        acts.append(a)
        st = step(st, a, env)
        sims.append(st)
    return np.array(vecs), np.array(acts), sims, cloth


# ---------------------------------------------------------------- reports


@dataclass
class RunReport:
    mode: str
    task: str
    mean_cost: list = field(default_factory=list)
    min_cost: list = field(default_factory=list)
    iteration_success: list = field(default_factory=list)
    runs: list = field(default_factory=list)  # list of RunFlags
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    def counts(self) -> dict[str, int]:
        out = {p.value: sum(getattr(r, p.value) for r in self.runs) for p in SubProcess}
        out["summary"] = sum(r.success for r in self.runs)
        return out

    @property
    def final_success(self) -> bool:
        return bool(self.runs) and all(r.success for r in self.runs)

    def table(self) -> str:
        c = self.counts()
        n = self.n_runs
        cols = ["Approaching", "Lifting", "Rotating", "Pushing", "Summary"]
        keys = ["approaching", "lifting", "rotating", "pushing", "summary"]
        head = f"{'mode':<10}" + "".join(f"{h:>13}" for h in cols)
        row = f"{self.mode:<10}" + "".join(f"{f'{c[k]}/{n}':>13}" for k in keys)
        return head + "\n" + row

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "task": self.task,
            "mean_cost": self.mean_cost,
            "min_cost": self.min_cost,
            "iteration_success": self.iteration_success,
            "runs": [asdict(r) for r in self.runs],
            "counts": self.counts() if self.runs else {},
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["mode"], d["task"], list(d["mean_cost"]), list(d["min_cost"]), list(d["iteration_success"]),
                   [RunFlags(**r) for r in d["runs"]], float(d.get("wall_clock", 0.0)))


def train_state_classifier(env: EnvConfig, task: Task, seed: int = 0, n_per_class: int = 12) -> ClothStateModel:
    masks, labels = classifier_dataset(env, task, n_per_class, seed, top_camera(env.image_size, env))
    feats = [feature_vector(m) for m in masks]
    return train_classifier(feats, labels, epochs=200, reg=1e-3, seed=seed)


def initial_policy(cfg: RunConfig, horizon: int) -> TvlgPolicy:
    n = 3 + N_JOINTS + 4 * N_ANCHORS
    std = [cfg.init_std_translation] * 3 + [cfg.init_std_rotation] * 4
    return TvlgPolicy.zeros(horizon, n, ACTION_DIM, std)


def _mean_var(cfg: RunConfig) -> float:
    return (3 * cfg.init_std_translation**2 + 4 * cfg.init_std_rotation**2) / 7


def train_policy(cfg: RunConfig, demo: DemoData, model: ClothStateModel | None = None,
                 log: Callable[[str], None] | None = None,
                 callback: Callable[[int, TvlgPolicy], None] | None = None) -> tuple[TvlgPolicy, RunReport]:
    """Iterate rollouts and combined updates; one metrics entry per iteration including the initial policy."""
    cfg.validate()
    t0 = time.perf_counter()
    env = cfg.env
    task = cfg.sim_task
    rm = RewardModel.build(cfg, demo)
    T = rm.horizon
    policy = initial_policy(cfg, T)
    cost_model = rm.cost_model()
    report = RunReport(cfg.mode, cfg.task)
    kl = cfg.kl_weight
    for it in range(cfg.iterations + 1):
        trajs = []
        for m in range(cfg.rollouts):
            rng = np.random.default_rng([cfg.seed, it, m])
            S, U, _, cloth = rollout(policy_controller(policy), env, task, T, rng)
            trajs.append(Trajectory(S, U, rm.costs(S, U, cloth)))
        totals = np.array([t.costs.sum() for t in trajs])
        rng = np.random.default_rng([cfg.seed, it, 10_000])
        _, _, sims, _ = rollout(policy_controller(policy, stochastic=False), env, task, T, rng)
        ok = subprocess_flags(sims, env, task, model).success if cfg.task != "lq" else False
        report.mean_cost.append(float(totals.mean()))
        report.min_cost.append(float(totals.min()))
        report.iteration_success.append(bool(ok))
        if callback:
            callback(it, policy)
        if log:
            log(f"iter {it:3d}  mean cost {totals.mean():10.4f}  min cost {totals.min():10.4f}  success {int(ok)}")
        if it == cfg.iterations:
            break
        if it == 0:
            # policy penalty and trust are in units of the initial per-step cost
            unit = max(float(totals.mean()) / (T + 1), 1e-12)
            cost_model = replace(cost_model, trust=cfg.trust * unit)
            kl = cfg.kl_weight
        # stiffen the policy penalty after a regression, relax it after progress
        if it > 0 and report.mean_cost[-1] > report.mean_cost[-2]:
            kl *= cfg.kl_adapt
        else:
            kl = max(cfg.kl_weight, kl / cfg.kl_adapt)
        policy, _ = pilqr_step(
            policy, trajs, cost_model,
            dyn_reg=cfg.dyn_reg,
            temperature=cfg.temperature,
            mb_fraction=cfg.mb_fraction,
            prior_strength=cfg.prior_strength,
            cov_target=_mean_var(cfg) * cfg.cov_decay ** (it + 1),
            relative_temperature=True,
            kl_weight=kl * unit,
        )
    report.wall_clock = time.perf_counter() - t0
    return policy, report


def evaluate_policy(controller: Controller, cfg: RunConfig, model: ClothStateModel | None, horizon: int,
                    n_runs: int | None = None, seed: int | None = None) -> list[RunFlags]:
    env = cfg.env
    task = cfg.sim_task
    runs = []
    for r in range(cfg.eval_runs if n_runs is None else n_runs):
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 99, r])
        _, _, sims, _ = rollout(controller, env, task, horizon, rng)
        runs.append(subprocess_flags(sims, env, task, model))
    return runs


# ---------------------------------------------------------------- correspondence


def correspondence_accuracy(featurizer: Featurizer, views: Sequence[SceneViews], env: EnvConfig,
                            tol: float = 3.0) -> tuple[float, int]:
    """Fraction of board-corner queries whose descriptor match lands within ``tol`` px of the truth."""
    hits = total = 0
    for v in views:
        DA = descriptor_map(v.render_a.image, featurizer)
        DB = descriptor_map(v.render_b.image, featurizer)
        for pa, true_b in v.corner_queries(env):
            m = match_correspondence(DA, pa, DB)
            total += 1
            hits += np.hypot(m.pixel[0] - true_b[1], m.pixel[1] - true_b[0]) <= tol
    return (hits / total if total else 0.0), total


def descriptor_experiment(n_train: int = 20, n_test: int = 10, seed: int = 0, steps: int = 300, radius: int = 3,
                          dim: int = 16, size: int = 128, env: EnvConfig | None = None):
    """Train a patch featurizer on random view pairs; returns (featurizer, held-out accuracy, query count)."""
    env = env or EnvConfig()
    rng = np.random.default_rng(seed)
    train = [random_views(env, rng, size) for _ in range(n_train)]
    test = [random_views(env, rng, size) for _ in range(n_test)]
    feat = train_descriptor([v.view_pair() for v in train], Featurizer.init(radius, dim, seed), steps=steps, seed=seed)
    acc, n = correspondence_accuracy(feat, test, env)
    return feat, acc, n
