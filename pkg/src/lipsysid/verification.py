"""Certified error bounds for trained models and rollout comparison."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dataset import Dataset
from .dynamics import EVAL_EXCITATION, SystemSpec, arm_known_accel, rk4_step
from .kdtree import KdTree
from .training import predict


@dataclass
class LatticeGrid:
    """ℓ∞ boxes of half-width ``half`` on a regular grid over [lo, hi].

    Box ``i`` spans [box_lo[i], box_hi[i]]; its edges are ``lo + 2·half·k``
    so boxes sharing an outer corner of 𝒳 share it bit-for-bit.
    """

    half: np.ndarray
    centers: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __len__(self):
        return self.centers.shape[0]

    def locate(self, x) -> np.ndarray:
        """Index of one lattice containing each row of ``x`` (points in 𝒳)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = np.floor((x - self.lo) / (2.0 * self.half)).astype(np.int64)
        k = np.clip(k, 0, np.asarray(self.shape) - 1)
        return np.ravel_multi_index(k.T, self.shape)


def build_lattices(bounds, delta) -> LatticeGrid:
    """Regular grid of centres with spacing 2δ covering ``bounds``.

    ``delta`` may be a scalar or one radius per coordinate. The count per
    axis is ⌈(hi − lo) / 2δ⌉.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("state space must be bounded")
    if np.any(hi < lo):
        raise ValueError("bounds must satisfy lo <= hi")
    half = np.broadcast_to(np.asarray(delta, dtype=np.float64), lo.shape).copy()
    if np.any(half <= 0):
        raise ValueError("delta must be positive")
    # round first so 6/0.1 = 59.99999... counts as 60
    counts = np.maximum(np.ceil(np.round((hi - lo) / (2.0 * half), 9)).astype(np.int64), 1)
    edges = [lo[k] + 2.0 * half[k] * np.arange(counts[k] + 1) for k in range(lo.size)]
    idx = np.stack([m.ravel() for m in np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")], 1)
    box_lo = np.stack([edges[k][idx[:, k]] for k in range(lo.size)], axis=1)
    box_hi = np.stack([edges[k][idx[:, k] + 1] for k in range(lo.size)], axis=1)
    centers = lo + half * (2 * idx + 1)
    return LatticeGrid(half, centers, box_lo, box_hi, lo, hi, tuple(int(c) for c in counts))


@dataclass
class VerifyReport:
    gamma: float
    K: float
    delta: np.ndarray
    n_lattices: int
    bound: float  # Δ (including c)
    errors: np.ndarray  # per-lattice e_i
    centers: np.ndarray
    in_box: np.ndarray
    c: float = 0.0
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = self.delta
        return {
            "gamma": self.gamma,
            "K": self.K,
            "delta": float(d[0]) if np.all(d == d[0]) else d.tolist(),
            "n_lattices": self.n_lattices,
            "c": self.c,
            "Delta": self.bound,
            "empty_lattices": int(np.count_nonzero(~self.in_box)),
            "wall_time_s": self.wall_time,
        }

    def write(self, csv_path, summary_path, header: dict | None = None) -> None:
        head = [f"# {k} = {v}" for k, v in sorted((header or {}).items())]
        n = self.centers.shape[1]
        lines = head + [",".join([f"c{k + 1}" for k in range(n)] + ["e"])]
        for cen, e in zip(self.centers, self.errors):
            lines.append(",".join([repr(float(v)) for v in cen] + [repr(float(e))]))
        with open(csv_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        summ = self.summary()
        summ.pop("wall_time_s")  # keep summaries byte-stable across runs
        body = head + [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in summ.items()]
        with open(summary_path, "w") as fh:
            fh.write("\n".join(body) + "\n")


def residual_norms(model, d: Dataset) -> np.ndarray:
    """‖Φ(x_j) − y_j‖₂ for every sample."""
    return np.linalg.norm(predict(model, d.X) - d.Y, axis=1)


def estimation_error_bound(
    model, d: Dataset, K: float, bounds, delta, q: int = 5, c: float = 0.0, gamma=None, tree=None
) -> VerifyReport:
    """Lattice bound on max_{x∈𝒳} ‖Φ(x) − f(x)‖₂ treating labels as truth.

    Per lattice the candidates are the samples inside it (or the ``q``
    nearest to its centre when it is empty);
    ε_j = ‖Φ(x_j) − y_j‖ + (K + γ)·max_k ‖x_j − v_k‖ over the 2ⁿ vertices,
    e_i = min_j ε_j and Δ = c + max_i e_i.
    """
    if len(d) == 0:
        raise ValueError("empty dataset")
    if q < 1:
        raise ValueError("q must be >= 1")
    if K < 0:
        raise ValueError("K must be non-negative")
    t0 = time.perf_counter()
    grid = build_lattices(bounds, delta)
    g = float(model.lipschitz_bound()) if gamma is None else float(gamma)
    resid = residual_norms(model, d)
    tree = KdTree(d.X) if tree is None else tree
    errors, _, in_box = lattice_errors(tree, resid, grid, K + g, q)
    bound = float(c + errors.max())
    return VerifyReport(
        g, float(K), grid.half, len(grid), bound, errors, grid.centers, in_box, float(c),
        time.perf_counter() - t0,
    )


def lattice_errors(tree: KdTree, resid, grid: LatticeGrid, lip: float, q: int = 5):
    """Run the per-lattice kernel; ``resid`` is indexed like the tree's input points."""
    resid_sorted = np.ascontiguousarray(np.asarray(resid, dtype=np.float64)[tree.perm])
    errors, best_pos, in_box = kernels.lattice_errors_loop(
        *tree.arrays,
        resid_sorted,
        np.ascontiguousarray(grid.box_lo),
        np.ascontiguousarray(grid.box_hi),
        float(lip),
        int(min(q, len(tree))),
    )
    return errors, tree.perm[best_pos], in_box


def prop3_bound(radii, error_norms, K: float, gamma: float, c: float, n: int, p=np.inf) -> float:
    """c + max_i [n^{max(0, 1/2 − 1/p)}·(K + γ)·r_i + ‖e_i‖₂] for a p-ball cover."""
    r = np.asarray(radii, dtype=np.float64).reshape(-1)
    e = np.asarray(error_norms, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise ValueError("empty cover")
    if np.any(r < 0) or c < 0:
        raise ValueError("radii and c must be non-negative")
    if not (p == np.inf or p >= 1):
        raise ValueError("p must be in [1, inf]")
    expo = max(0.0, 0.5 - (0.0 if p == np.inf else 1.0 / p))
    return float(c + np.max(n**expo * (K + gamma) * r + e))


def empirical_lipschitz(d: Dataset, k_neighbors: int = 10, min_dist: float = 1e-9) -> float:
    """Finite-difference estimate of Lip(f) from each sample's nearest neighbours."""
    if len(d) < 2:
        raise ValueError("need at least 2 samples")
    tree = KdTree(d.X)
    dist, idx = tree.query_knn_many(d.X, min(k_neighbors + 1, len(d)))
    dy = np.linalg.norm(d.Y[:, None, :] - d.Y[idx], axis=2)
    ok = dist >= min_dist
    if not np.any(ok):
        raise ValueError("all samples coincide")
    return float(np.max(dy[ok] / dist[ok]))


def trajectory_deviation_bound(a, gamma, t):
    """(a/γ)(e^{γt} − 1); the γ → 0 limit is a·t."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.asarray(a) < 0):
        raise ValueError("a and t must be non-negative")
    if gamma == 0:
        return a * t
    return (a / gamma) * np.expm1(gamma * t)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class TrajectoryBundle:
    t: np.ndarray
    true_states: np.ndarray  # (T, B, n)
    model_states: np.ndarray
    deviation: np.ndarray  # (T, B)
    envelope: np.ndarray  # (T,)
    exit_time: np.ndarray  # (B,) first time either solution leaves 𝒳, inf if never
    diverged: np.ndarray  # (B,) model rollout became non-finite
    a: float
    gamma: float

    @property
    def inside(self) -> np.ndarray:
        return self.t[:, None] < self.exit_time[None, :]

    @property
    def mean(self):
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.deviation, axis=1)

    @property
    def std(self):
        with np.errstate(invalid="ignore"):
            return np.nanstd(self.deviation, axis=1)

    def envelope_violations(self, slack: float = 0.0) -> int:
        viol = self.inside & (self.deviation > self.envelope[:, None] + slack)
        return int(np.count_nonzero(viol))

    def write_csv(self, path, header: dict | None = None) -> None:
        lines = [f"# {k} = {v}" for k, v in sorted((header or {}).items())]
        lines.append("t,mean,std,envelope,n_inside")
        inside = self.inside.sum(axis=1)
        for k in range(self.t.size):
            lines.append(
                f"{float(self.t[k])!r},{float(self.mean[k])!r},{float(self.std[k])!r},"
                f"{float(self.envelope[k])!r},{int(inside[k])}"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _first_true(mask, t):
    """Per column, the time of the first True row (inf when none)."""
    any_ = mask.any(axis=0)
    first = np.argmax(mask, axis=0)
    return np.where(any_, t[first], np.inf)


def rollout_compare(
    spec: SystemSpec,
    model,
    x0_set,
    t_end: float,
    a: float = 0.0,
    gamma=None,
    dt: float = 1e-2,
    rate: float = 100.0,
    seed: int = 0,
    excitation=None,
    true_rhs=None,
) -> TrajectoryBundle:
    """Integrate ẋ = f(x) and ż = Φ(z) from shared initial states.

    For the arm both systems run the excitation controller with matched
    phases and the model replaces the friction term, q̈ = known − Φ(q, q̇).
    ``true_rhs(X)`` overrides the autonomous truth (used for synthetic tests).
    """
    x0 = np.atleast_2d(np.asarray(x0_set, dtype=np.float64))
    g = float(model.lipschitz_bound()) if gamma is None else float(gamma)
    lo, hi = spec.bounds
    sub = int(round((1.0 / rate) / dt))
    if sub < 1 or abs(sub * dt * rate - 1.0) > 1e-9:
        raise ValueError("dt must divide the recording interval")
    h = 1.0 / (rate * sub)
    n_samples = int(np.floor(t_end * rate + 1e-9)) + 1
    phi = getattr(model, "frozen", lambda: model)()

    if spec.name == "arm":
        exc = excitation or EVAL_EXCITATION
        phases = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=(x0.shape[0], 2))
        f_true, tau = spec.closed_loop(x0[:, :2], phases, exc["amp"], exc["freq"])
        p = spec.params

        def f_model(t, Z):
            q, qd = Z[:, :2], Z[:, 2:]
            qdd = arm_known_accel(q, qd, tau(t, Z), p) - np.atleast_2d(phi(Z))
            return np.concatenate([qd, qdd], axis=1)
    else:
        truth = true_rhs or spec.vector_field

        def f_true(t, X):
            return truth(X)

        def f_model(t, Z):
            return np.atleast_2d(phi(Z))

    xs = np.empty((n_samples,) + x0.shape)
    zs = np.empty_like(xs)
    X = x0.copy()
    Z = x0.copy()
    xs[0], zs[0] = X, Z
    with np.errstate(all="ignore"):
        for k in range(1, n_samples):
            t0 = (k - 1) / rate
            for s in range(sub):
                X = rk4_step(f_true, t0 + s * h, X, h)
                Z = rk4_step(f_model, t0 + s * h, Z, h)
            xs[k], zs[k] = X, Z
        t = np.arange(n_samples) / rate
        dev = np.linalg.norm(xs - zs, axis=2)
    finite = np.all(np.isfinite(zs), axis=2)
    diverged = ~finite.all(axis=0)
    dev[~finite] = np.nan
    outside = ~(np.all((xs >= lo) & (xs <= hi), axis=2) & np.all((zs >= lo) & (zs <= hi), axis=2))
    exit_time = _first_true(outside | ~finite, t)
    env = trajectory_deviation_bound(a, g, t)
    return TrajectoryBundle(t, xs, zs, dev, env, exit_time, diverged, float(a), g)


def uniform_initial_states(spec: SystemSpec, count: int, seed: int = 0):
    """Rollout initial states: uniform over 𝒳 (arm: uniform angles, zero velocity)."""
    lo, hi = spec.bounds
    x0 = np.random.default_rng(seed).uniform(lo, hi, size=(count, lo.size))
    if spec.name == "arm":
        x0[:, 2:] = 0.0
    return x0
