"""Time-varying linear-Gaussian policies and their optimization.

A policy draws ``a_t ~ N(K_t s_t + k_t, Sigma_t)``. One optimization step fits
per-step linear dynamics to sampled rollouts, solves an LQR problem on a
quadratic model of the step cost, and mixes the resulting bias with a
path-integral reweighting of the sampled actions.

Trajectories hold ``T + 1`` states and ``T`` actions. ``costs[t]`` for
``t < T`` is the step cost of ``(s_t, a_t)``; an optional ``costs[T]`` is the
terminal cost of the last state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import softmax

__all__ = [
    "Observation",
    "state_vector",
    "state_dim",
    "ActionDelta",
    "apply_quat_delta",
    "TvlgPolicy",
    "sample_action",
    "Trajectory",
    "trajectory_cost",
    "step_cost",
    "LinearGaussianDynamics",
    "fit_dynamics",
    "QuadraticCost",
    "LqrSolution",
    "lqr_solve",
    "lqr_backward",
    "NotPositiveDefiniteError",
    "pi2_weights",
    "pi2_update",
    "CostModel",
    "GaussNewtonCost",
    "pilqr_step",
    "tcn_reward",
    "LQBenchmark",
]


# ---------------------------------------------------------------- vectors


@dataclass(frozen=True)
class Observation:
    """What the controller sees at one step."""

    ee_position: np.ndarray
    joint_angles: np.ndarray
    anchors: np.ndarray  # (n_anchor, 3); NaN rows are unresolved
    effector: np.ndarray | None = None
    board: np.ndarray | None = None
    cloth: np.ndarray | None = None


def state_dim(n_joints: int, n_anchor: int) -> int:
    return 3 + n_joints + 3 * n_anchor + n_anchor


def state_vector(obs: Observation) -> np.ndarray:
    """Effector position, joint angles, anchor positions, effector-to-anchor distances."""
    anchors = np.atleast_2d(np.asarray(obs.anchors, dtype=float))
    bad = ~np.all(np.isfinite(anchors), axis=1)
    if bad.any():
        raise ValueError(f"anchor {int(np.argmax(bad))} is unresolved")
    p = np.asarray(obs.ee_position, dtype=float)
    dist = np.linalg.norm(anchors - p, axis=1)
    return np.concatenate([p, np.asarray(obs.joint_angles, dtype=float), anchors.ravel(), dist])


def apply_quat_delta(quat: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Renormalize ``identity + dq`` and left-multiply it onto ``quat`` (both scalar-last)."""
    d = np.array([0.0, 0.0, 0.0, 1.0]) + np.asarray(dq, dtype=float)
    n = np.linalg.norm(d)
    d = np.array([0.0, 0.0, 0.0, 1.0]) if n < 1e-12 else d / n
    x1, y1, z1, w1 = d
    x2, y2, z2, w2 = np.asarray(quat, dtype=float)
    out = np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])
    return out / np.linalg.norm(out)


@dataclass(frozen=True)
class ActionDelta:
    translation: np.ndarray
    dquat: np.ndarray

    @classmethod
    def from_array(cls, a) -> "ActionDelta":
        a = np.asarray(a, dtype=float)
        if a.shape != (7,):
            raise ValueError(f"action must have 7 entries, got {a.shape}")
        return cls(a[:3].copy(), a[3:].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.translation, self.dquat])

    def apply(self, position, quat) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(position, dtype=float) + self.translation, apply_quat_delta(quat, self.dquat)


# ---------------------------------------------------------------- policy


@dataclass(frozen=True)
class TvlgPolicy:
    K: np.ndarray  # (T, m, n)
    k: np.ndarray  # (T, m)
    cov: np.ndarray  # (T, m, m)

    def __post_init__(self):
        K, k, cov = (np.array(x, dtype=float) for x in (self.K, self.k, self.cov))
        if K.ndim != 3 or k.shape != K.shape[:2] or cov.shape != (K.shape[0], K.shape[1], K.shape[1]):
            raise ValueError("inconsistent policy shapes")
        for t in range(len(cov)):
            if not np.allclose(cov[t], cov[t].T, atol=1e-12 * max(1.0, np.abs(cov[t]).max())):
                raise ValueError(f"covariance at step {t} is not symmetric")
            try:
                np.linalg.cholesky(cov[t])
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance at step {t} is not positive definite") from None
        for name, arr in (("K", K), ("k", k), ("cov", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.K.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        """(state dim, action dim)."""
        return self.K.shape[2], self.K.shape[1]

    @classmethod
    def zeros(cls, horizon: int, n: int, m: int, std: float | Sequence[float] = 1.0) -> "TvlgPolicy":
        var = np.broadcast_to(np.asarray(std, dtype=float) ** 2, (m,))
        return cls(np.zeros((horizon, m, n)), np.zeros((horizon, m)), np.tile(np.diag(var), (horizon, 1, 1)))

    def mean(self, s: np.ndarray, t: int) -> np.ndarray:
        if not 0 <= t < self.horizon:
            raise IndexError(f"timestep {t} outside horizon {self.horizon}")
        return self.K[t] @ np.asarray(s, dtype=float) + self.k[t]

    def to_record(self) -> dict:
        return {"K": self.K, "k": self.k, "cov": self.cov}

    @classmethod
    def from_record(cls, rec: dict) -> "TvlgPolicy":
        return cls(np.asarray(rec["K"], float), np.asarray(rec["k"], float), np.asarray(rec["cov"], float))


def sample_action(policy: TvlgPolicy, s: np.ndarray, t: int, seed=None) -> np.ndarray:
    """Draw from ``N(K_t s + k_t, Sigma_t)``; ``seed`` may be an int or a Generator."""
    mu = policy.mean(s, t)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    L = np.linalg.cholesky(policy.cov[t])
    return mu + L @ rng.standard_normal(len(mu))


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (T + 1, n)
    actions: np.ndarray  # (T, m)
    costs: np.ndarray  # (T,) or (T + 1,)
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        s, a, c = (np.asarray(x, dtype=float) for x in (self.states, self.actions, self.costs))
        if s.ndim != 2 or a.ndim != 2 or len(s) != len(a) + 1:
            raise ValueError(f"need T + 1 states for T actions, got {len(s)} and {len(a)}")
        if c.shape not in ((len(a),), (len(a) + 1,)):
            raise ValueError(f"costs must have T or T + 1 entries, got {c.shape}")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "costs", c)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def cost_to_go(self) -> np.ndarray:
        """Remaining cost from each action step, terminal cost included."""
        c = self.costs
        tail = np.cumsum(c[::-1])[::-1]
        return tail[: self.horizon]

    def rows(self) -> list[list[float]]:
        """One row per state: t, state, action (NaN past the end), cost (NaN if absent)."""
        out = []
        m = self.actions.shape[1]
        for t in range(len(self.states)):
            a = self.actions[t] if t < self.horizon else np.full(m, np.nan)
            c = self.costs[t] if t < len(self.costs) else np.nan
            out.append([t, *self.states[t], *a, c])
        return out


def trajectory_cost(traj: Trajectory) -> float:
    return float(np.sum(traj.costs))


def step_cost(gE, gR, mask=None, action=None, penalty: float = 0.0) -> float:
    """Structural dissimilarity of one aligned graph pair plus ``penalty * |a|^2``."""
    from .graph import graph_dissimilarity

    cost = graph_dissimilarity(gE, gR, mask)
    if penalty and action is not None:
        a = np.asarray(action, dtype=float)
        cost += penalty * float(a @ a)
    return cost


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class LinearGaussianDynamics:
    A: np.ndarray  # (T, n, n)
    B: np.ndarray  # (T, n, m)
    c: np.ndarray  # (T, n)
    W: np.ndarray  # (T, n, n)

    def predict(self, s, a, t: int) -> np.ndarray:
        return self.A[t] @ s + self.B[t] @ a + self.c[t]


def _ridge(X: np.ndarray, Y: np.ndarray, reg: float, prior: np.ndarray | None, strength: float):
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    G = Xc.T @ Xc + reg * np.eye(X.shape[1])
    rhs = Xc.T @ Yc
    if prior is not None and strength > 0:
        G = G + strength * np.eye(X.shape[1])
        rhs = rhs + strength * prior.T
    if reg <= 0 and not strength > 0:
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise np.linalg.LinAlgError("degenerate data covariance; add ridge regularization")
    try:
        cf = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("degenerate data covariance after regularization") from None
    Wt = np.linalg.solve(cf.T, np.linalg.solve(cf, rhs)).T
    return Wt, ym - Wt @ xm, Yc - Xc @ Wt.T


def fit_dynamics(rollouts: Sequence[Trajectory], reg: float = 1e-6, prior_strength: float = 0.0) -> LinearGaussianDynamics:
    """Per-step ridge regression ``s' = A s + B a + c`` on centered data.

    With ``prior_strength > 0`` each step is pulled towards a single fit pooled
    over all steps, which keeps the fit sane with fewer rollouts than dimensions.
    """
    if not rollouts:
        raise ValueError("no rollouts to fit")
    S = np.stack([r.states for r in rollouts])  # (M, T+1, n)
    U = np.stack([r.actions for r in rollouts])  # (M, T, m)
    M, T, m = U.shape
    n = S.shape[2]
    prior = None
    if prior_strength > 0:
        Xall = np.concatenate([S[:, :-1].reshape(-1, n), U.reshape(-1, m)], axis=1)
        prior, _, _ = _ridge(Xall, S[:, 1:].reshape(-1, n), max(reg, 1e-9), None, 0.0)
    A = np.empty((T, n, n))
    B = np.empty((T, n, m))
    c = np.empty((T, n))
    W = np.empty((T, n, n))
    for t in range(T):
        X = np.concatenate([S[:, t], U[:, t]], axis=1)
        Wt, ct, res = _ridge(X, S[:, t + 1], reg, prior, prior_strength)
        A[t], B[t], c[t] = Wt[:, :n], Wt[:, n:], ct
        cov = res.T @ res / max(M, 1)
        W[t] = 0.5 * (cov + cov.T)
    return LinearGaussianDynamics(A, B, c, W)


# ---------------------------------------------------------------- LQR


@dataclass(frozen=True)
class QuadraticCost:
    """Per-step ``0.5 x'Hx + g'x + c0`` with ``x = [s; a]``, and terminal ``0.5 s'Hs + g's + c0``."""

    H: np.ndarray  # (T, n+m, n+m)
    g: np.ndarray  # (T, n+m)
    c0: np.ndarray  # (T,)
    HT: np.ndarray | None = None  # (n, n)
    gT: np.ndarray | None = None
    cT: float = 0.0

    def value(self, s: np.ndarray, a: np.ndarray, t: int) -> float:
        x = np.concatenate([s, a])
        return float(0.5 * x @ self.H[t] @ x + self.g[t] @ x + self.c0[t])

    def terminal(self, s: np.ndarray) -> float:
        if self.HT is None:
            return 0.0
        return float(0.5 * s @ self.HT @ s + self.gT @ s + self.cT)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, t: int):
        super().__init__(f"action Hessian block is not positive definite at timestep {t}")
        self.t = t


@dataclass(frozen=True)
class LqrSolution:
    policy: TvlgPolicy
    V: np.ndarray  # (T+1, n, n) value Hessians
    v: np.ndarray  # (T+1, n)
    kappa: np.ndarray  # (T+1,)
    Quu: np.ndarray  # (T, m, m)

    def value(self, s: np.ndarray, t: int) -> float:
        return float(0.5 * s @ self.V[t] @ s + self.v[t] @ s + self.kappa[t])


def lqr_solve(dyn: LinearGaussianDynamics, cost: QuadraticCost, cov_scale: float = 1.0,
              cov_target: float | None = None) -> LqrSolution:
    """Riccati recursion for affine dynamics and quadratic costs in absolute coordinates."""
    T, n, m = dyn.B.shape
    V = np.zeros((T + 1, n, n))
    v = np.zeros((T + 1, n))
    kappa = np.zeros(T + 1)
    if cost.HT is not None:
        V[T], v[T], kappa[T] = cost.HT, cost.gT, cost.cT
    K = np.zeros((T, m, n))
    k = np.zeros((T, m))
    covs = np.zeros((T, m, m))
    Quus = np.zeros((T, m, m))
    for t in range(T - 1, -1, -1):
        F = np.concatenate([dyn.A[t], dyn.B[t]], axis=1)
        f = dyn.c[t]
        Q = cost.H[t] + F.T @ V[t + 1] @ F
        q = cost.g[t] + F.T @ (V[t + 1] @ f + v[t + 1])
        q0 = cost.c0[t] + 0.5 * f @ V[t + 1] @ f + v[t + 1] @ f + kappa[t + 1]
        Q = 0.5 * (Q + Q.T)
        Quu, Qus, qu = Q[n:, n:], Q[n:, :n], q[n:]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(t) from None
        Quu_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(m)))
        K[t] = -Quu_inv @ Qus
        k[t] = -Quu_inv @ qu
        Vt = Q[:n, :n] + Qus.T @ K[t]
        V[t] = 0.5 * (Vt + Vt.T)
        v[t] = q[:n] + Qus.T @ k[t]
        kappa[t] = q0 + 0.5 * k[t] @ Quu @ k[t] + qu @ k[t]
        cov = cov_scale * Quu_inv
        covs[t] = 0.5 * (cov + cov.T)
        Quus[t] = Quu
    if cov_target is not None:
        for t in range(T):
            covs[t] *= cov_target / np.mean(np.diag(covs[t]))
    return LqrSolution(TvlgPolicy(K, k, covs), V, v, kappa, Quus)


def lqr_backward(dyn: LinearGaussianDynamics, cost: QuadraticCost, cov_scale: float = 1.0,
                 cov_target: float | None = None) -> TvlgPolicy:
    return lqr_solve(dyn, cost, cov_scale, cov_target).policy


# ---------------------------------------------------------------- PI2


def pi2_weights(cost_to_go: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``-(S - min S) / temperature`` over rollouts (axis 0)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    S = np.asarray(cost_to_go, dtype=float)
    return softmax(-(S - S.min(axis=0)) / temperature, axis=0)


def _identical(rollouts: Sequence[Trajectory]) -> bool:
    r0 = rollouts[0]
    return all(
        np.array_equal(r.actions, r0.actions) and np.array_equal(r.costs, r0.costs) and np.array_equal(r.states, r0.states)
        for r in rollouts[1:]
    )


def pi2_update(policy: TvlgPolicy, rollouts: Sequence[Trajectory], temperature: float = 1.0,
               relative: bool = False) -> TvlgPolicy:
    """Reweight sampled actions by exponentiated negative cost-to-go into new biases ``k_t``.

    With ``relative=True`` the temperature is scaled per step by the spread of
    the cost-to-go values, which makes it unit free.
    """
    if len(rollouts) < 2:
        raise ValueError("PI2 needs at least two rollouts")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if _identical(rollouts):
        return policy
    S = np.stack([r.cost_to_go() for r in rollouts])  # (M, T)
    states = np.stack([r.states[:-1] for r in rollouts])  # (M, T, n)
    actions = np.stack([r.actions for r in rollouts])  # (M, T, m)
    k = np.empty_like(policy.k)
    for t in range(policy.horizon):
        temp = temperature
        if relative:
            spread = S[:, t].max() - S[:, t].min()
            temp = temperature * spread if spread > 0 else 1.0
        w = pi2_weights(S[:, t], temp)
        k[t] = w @ (actions[:, t] - states[:, t] @ policy.K[t].T)
    return replace(policy, k=k)


# ---------------------------------------------------------------- cost models


class CostModel(Protocol):
    def quadratize(self, states: np.ndarray, actions: np.ndarray) -> QuadraticCost: ...


def _to_absolute(Hd: np.ndarray, gd: np.ndarray, c: float, x0: np.ndarray):
    """Convert ``0.5 d'Hd + g'd + c`` with ``d = x - x0`` to absolute coordinates."""
    return Hd, gd - Hd @ x0, c - gd @ x0 + 0.5 * x0 @ Hd @ x0


@dataclass
class GaussNewtonCost:
    """Robust residual cost ``sum_b w_b rho(|r_b(s)|) + penalty |a|^2`` at each step.

    ``residuals(t, s)`` returns an array (n_blocks, dim) and per-block weights.
    ``rho`` is ``"norm"`` for plain norms or ``"tcn"`` for
    ``alpha x^2 + beta sqrt(gamma + x^2)``. The quadratic model uses
    iteratively reweighted Gauss-Newton from finite-difference Jacobians, with
    Levenberg damping on the state block. ``trust`` adds ``trust |a - a_nom|^2``
    to keep each update near the sampled region.
    """

    residuals: Callable[[int, np.ndarray], tuple[np.ndarray, np.ndarray]]
    horizon: int
    rho: str = "norm"
    penalty: float = 1e-3
    damping: float = 1e-3
    trust: float = 0.0
    norm_floor: float = 0.01
    fd_eps: float = 1e-5
    alpha: float = 0.8
    beta: float = 0.001
    gamma: float = 1e-5
    terminal: bool = True
    fd_mask: np.ndarray | None = None
    # optional ``jacobian(t, s)`` of the residuals, (n_blocks, dim, n); replaces finite differences
    jacobian: Callable[[int, np.ndarray], np.ndarray] | None = None

    def _rho(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.rho == "norm":
            return x, 1.0 / np.maximum(x, self.norm_floor)
        if self.rho == "tcn":
            root = np.sqrt(self.gamma + x**2)
            return self.alpha * x**2 + self.beta * root, 2 * self.alpha + self.beta / root
        raise ValueError(f"unknown rho {self.rho!r}")

    def state_cost(self, t: int, s: np.ndarray) -> float:
        R, w = self.residuals(t, s)
        val, _ = self._rho(np.linalg.norm(R, axis=1))
        return float(np.sum(w * val))

    def step(self, t: int, s: np.ndarray, a: np.ndarray) -> float:
        a = np.asarray(a, dtype=float)
        return self.state_cost(t, s) + self.penalty * float(a @ a)

    def _state_quadratic(self, t: int, s0: np.ndarray):
        R0, w = self.residuals(t, s0)
        x0 = np.linalg.norm(R0, axis=1)
        val, omega = self._rho(x0)
        n = len(s0)
        if self.jacobian is not None:
            J = self.jacobian(t, s0)
        else:
            cols = range(n) if self.fd_mask is None else np.nonzero(self.fd_mask)[0]
            J = np.zeros(R0.shape + (n,))
            for i in cols:
                sp = s0.copy()
                sp[i] += self.fd_eps
                J[..., i] = (self.residuals(t, sp)[0] - R0) / self.fd_eps
        g = np.zeros(n)
        H = self.damping * np.eye(n)
        for b in range(len(R0)):
            if w[b] == 0:
                continue
            Jb = J[b]
            g += w[b] * omega[b] * Jb.T @ R0[b]
            H += w[b] * omega[b] * Jb.T @ Jb
        return H, g, float(np.sum(w * val))

    def quadratize(self, states: np.ndarray, actions: np.ndarray) -> QuadraticCost:
        T, m = actions.shape
        n = states.shape[1]
        H = np.zeros((T, n + m, n + m))
        g = np.zeros((T, n + m))
        c0 = np.zeros(T)
        for t in range(T):
            Hs, gs, cs = self._state_quadratic(t, states[t])
            Ha = 2 * (self.penalty + self.trust) * np.eye(m)
            ga = -2 * self.trust * actions[t]
            Hd = np.zeros((n + m, n + m))
            Hd[:n, :n], Hd[n:, n:] = Hs, Ha
            gd = np.concatenate([gs, ga + 2 * self.penalty * actions[t]])
            x0 = np.concatenate([states[t], actions[t]])
            ca = self.penalty * float(actions[t] @ actions[t])
            H[t], g[t], c0[t] = _to_absolute(Hd, gd, cs + ca, x0)
        HT = gT = None
        cT = 0.0
        if self.terminal:
            Hs, gs, cs = self._state_quadratic(T, states[T])
            HT, gT, cT = _to_absolute(Hs, gs, cs, states[T])
        return QuadraticCost(H, g, c0, HT, gT, cT)


def policy_penalty(cost: QuadraticCost, policy: TvlgPolicy, weight: float) -> QuadraticCost:
    """Add ``weight * 0.5 (a - K s - k)' P (a - K s - k)`` to each step of ``cost``.

    ``P`` is the inverse policy covariance scaled by its mean variance, so the
    penalty keeps its strength as exploration shrinks.
    """
    n, m = policy.dims
    H, g, c0 = cost.H.copy(), cost.g.copy(), cost.c0.copy()
    for t in range(policy.horizon):
        C = policy.cov[t]
        P = weight * np.mean(np.diag(C)) * np.linalg.inv(C)
        M = np.concatenate([-policy.K[t], np.eye(m)], axis=1)
        H[t] += M.T @ P @ M
        g[t] -= M.T @ P @ policy.k[t]
        c0[t] += 0.5 * policy.k[t] @ P @ policy.k[t]
    return replace(cost, H=H, g=g, c0=c0)


def pilqr_step(
    policy: TvlgPolicy,
    rollouts: Sequence[Trajectory],
    cost_model: CostModel,
    dyn_reg: float = 1e-6,
    temperature: float = 1.0,
    mb_fraction: float = 0.5,
    prior_strength: float = 0.0,
    cov_scale: float = 1.0,
    cov_target: float | None = None,
    relative_temperature: bool = False,
    kl_weight: float = 0.0,
) -> tuple[TvlgPolicy, dict]:
    """One combined model-based / model-free update.

    Fits dynamics, solves LQR on the cost model's quadratization about the mean
    rollout, then reweights the rollouts under the LQR gains. The new bias is
    ``mb_fraction * k_lqr + (1 - mb_fraction) * k_pi2``; gains and covariances
    come from LQR. ``kl_weight > 0`` adds ``kl_weight * 0.5 |a - K s - k|^2``
    in the previous policy's normalized inverse-covariance metric to every step cost, a
    fixed-multiplier stand-in for a KL bound that keeps the new policy near
    the one that produced the data.
    """
    if not 0.0 <= mb_fraction <= 1.0:
        raise ValueError(f"mb_fraction must lie in [0, 1], got {mb_fraction}")
    if len(rollouts) < 2:
        raise ValueError("need at least two rollouts")
    if _identical(rollouts):
        return policy, {"skipped": True}
    dyn = fit_dynamics(rollouts, dyn_reg, prior_strength)
    S = np.stack([r.states for r in rollouts])
    U = np.stack([r.actions for r in rollouts])
    quad = cost_model.quadratize(S.mean(axis=0), U.mean(axis=0))
    if kl_weight > 0:
        quad = policy_penalty(quad, policy, kl_weight)
    lqr = lqr_backward(dyn, quad, cov_scale, cov_target)
    pi2 = pi2_update(lqr, rollouts, temperature, relative_temperature)
    k = mb_fraction * lqr.k + (1.0 - mb_fraction) * pi2.k
    return replace(lqr, k=k), {"dynamics": dyn, "lqr": lqr, "pi2": pi2, "skipped": False}


def tcn_reward(zE, zR, alpha: float = 0.8, beta: float = 0.001, gamma: float = 1e-5) -> float:
    """``-alpha |d|^2 - beta sqrt(gamma + |d|^2)`` for ``d = zE - zR``."""
    zE = np.asarray(zE, dtype=float)
    zR = np.asarray(zR, dtype=float)
    if zE.shape != zR.shape:
        raise ValueError(f"embedding shapes differ: {zE.shape} vs {zR.shape}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    d2 = float(np.sum((zE - zR) ** 2))
    return -alpha * d2 - beta * np.sqrt(gamma + d2)


# ---------------------------------------------------------------- LQ benchmark


@dataclass(frozen=True)
class LQBenchmark:
    """Time-invariant linear system with quadratic cost, for checking the optimizers."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    QT: np.ndarray
    s0: np.ndarray
    horizon: int
    noise: float = 0.0

    @classmethod
    def double_integrator(cls, horizon: int = 20, dt: float = 0.1, noise: float = 0.0) -> "LQBenchmark":
        A = np.array([[1.0, dt], [0.0, 1.0]])
        B = np.array([[0.5 * dt**2], [dt]])
        return cls(A, B, np.diag([1.0, 0.1]), np.array([[0.01]]), np.diag([10.0, 1.0]), np.array([1.0, 0.0]), horizon, noise)

    @property
    def dims(self) -> tuple[int, int]:
        return self.B.shape

    def step_cost(self, s, a) -> float:
        return float(s @ self.Q @ s + a @ self.R @ a)

    def rollout(self, policy: TvlgPolicy, seed=None) -> Trajectory:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        s = self.s0.astype(float)
        S, U, C = [s], [], []
        for t in range(self.horizon):
            a = sample_action(policy, s, t, rng)
            C.append(self.step_cost(s, a))
            s = self.A @ s + self.B @ a
            if self.noise:
                s = s + rng.normal(0.0, self.noise, s.shape)
            S.append(s)
            U.append(a)
        C.append(float(s @ self.QT @ s))
        return Trajectory(np.array(S), np.array(U), np.array(C))

    def dynamics(self) -> LinearGaussianDynamics:
        T = self.horizon
        n, m = self.dims
        return LinearGaussianDynamics(
            np.tile(self.A, (T, 1, 1)), np.tile(self.B, (T, 1, 1)), np.zeros((T, n)), np.zeros((T, n, n))
        )

    def quadratize(self, states=None, actions=None) -> QuadraticCost:
        T = self.horizon
        n, m = self.dims
        H = np.zeros((T, n + m, n + m))
        H[:, :n, :n] = 2 * self.Q
        H[:, n:, n:] = 2 * self.R
        return QuadraticCost(H, np.zeros((T, n + m)), np.zeros(T), 2 * self.QT, np.zeros(n), 0.0)
