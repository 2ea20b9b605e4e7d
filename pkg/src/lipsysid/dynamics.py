"""Benchmark systems, trajectory sampling and dataset assembly.

State functions act on row batches: ``f(X)`` with ``X`` of shape ``(N, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset

GRAVITY = 9.81


# ---------------------------------------------------------------------------
# systems


def f_linear(x):
    """ẋ₁ = −0.2x₁ + 2x₂, ẋ₂ = −2x₁ − 0.2x₂ (poles −0.2 ± 2i)."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([-0.2 * x1 + 2.0 * x2, -2.0 * x1 - 0.2 * x2], axis=-1)


def f_vdp(x, mu=0.02):
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, mu * (1.0 - x1 * x1) * x2 - x1], axis=-1)


@dataclass(frozen=True)
class ArmParams:
    """Two-link planar arm with geared motors on each joint axis."""

    a1: float = 0.8
    a2: float = 0.8
    l1: float = 0.4
    l2: float = 0.4
    m_l1: float = 20.0
    m_l2: float = 20.0
    I_l1: float = 5.0
    I_l2: float = 5.0
    k_r1: float = 100.0
    k_r2: float = 100.0
    m_m1: float = 2.0
    m_m2: float = 2.0
    I_m1: float = 0.01
    I_m2: float = 0.01
    F_v: tuple = (40.0, 40.0)
    F_c: tuple = (2.0, 2.0)
    s_c: float = 10.0

    def __post_init__(self):
        scalars = [
            self.a1, self.a2, self.l1, self.l2, self.m_l1, self.m_l2, self.I_l1,
            self.I_l2, self.k_r1, self.k_r2, self.m_m1, self.m_m2, self.I_m1, self.I_m2,
        ]
        if min(scalars) <= 0:
            raise ValueError("arm physical parameters must be strictly positive")
        if min(self.F_v) < 0 or min(self.F_c) < 0 or self.s_c < 0:
            raise ValueError("friction parameters must be non-negative")


def arm_mass(q, p: ArmParams):
    """Inertia matrix M(q), shape ``(..., 2, 2)``."""
    q = np.asarray(q, dtype=np.float64)
    c2 = np.cos(q[..., 1])
    b11 = (
        p.I_l1 + p.m_l1 * p.l1**2 + p.k_r1**2 * p.I_m1 + p.I_l2
        + p.m_l2 * (p.a1**2 + p.l2**2 + 2.0 * p.a1 * p.l2 * c2)
        + p.I_m2 + p.m_m2 * p.a1**2
    )
    b12 = p.I_l2 + p.m_l2 * (p.l2**2 + p.a1 * p.l2 * c2) + p.k_r2 * p.I_m2
    b22 = np.broadcast_to(p.I_l2 + p.m_l2 * p.l2**2 + p.k_r2**2 * p.I_m2, c2.shape)
    return np.stack([np.stack([b11, b12], -1), np.stack([b12, b22], -1)], -2)


def arm_coriolis(q, qd, p: ArmParams):
    """C(q, q̇) with the Christoffel-symbol factorisation, shape ``(..., 2, 2)``."""
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    h = -p.m_l2 * p.a1 * p.l2 * np.sin(q[..., 1])
    c11 = h * qd[..., 1]
    c12 = h * (qd[..., 0] + qd[..., 1])
    c21 = -h * qd[..., 0]
    c22 = np.zeros_like(h)
    return np.stack([np.stack([c11, c12], -1), np.stack([c21, c22], -1)], -2)


def arm_gravity(q, p: ArmParams, g0: float = GRAVITY):
    q = np.asarray(q, dtype=np.float64)
    c1 = np.cos(q[..., 0])
    c12 = np.cos(q[..., 0] + q[..., 1])
    g1 = (p.m_l1 * p.l1 + p.m_m2 * p.a1 + p.m_l2 * p.a1) * g0 * c1 + p.m_l2 * p.l2 * g0 * c12
    g2 = p.m_l2 * p.l2 * g0 * c12
    return np.stack([g1, g2], -1)


def arm_friction(qd, p: ArmParams):
    """F_f(q̇) = F_v q̇ + F_c tanh(s_c q̇) with diagonal F_v, F_c."""
    qd = np.asarray(qd, dtype=np.float64)
    return np.asarray(p.F_v) * qd + np.asarray(p.F_c) * np.tanh(p.s_c * qd)


def _matvec(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def _solve2(M, v):
    """Batched 2×2 solve M⁻¹v by the adjugate."""
    a, b = M[..., 0, 0], M[..., 0, 1]
    c, d = M[..., 1, 0], M[..., 1, 1]
    det = a * d - b * c
    if np.any(np.abs(det) < 1e-12):
        raise np.linalg.LinAlgError("singular inertia matrix; check arm parameters")
    return np.stack([d * v[..., 0] - b * v[..., 1], -c * v[..., 0] + a * v[..., 1]], -1) / det[..., None]


def arm_known_accel(q, qd, tau, p: ArmParams):
    """M⁻¹(q)(τ − C(q,q̇)q̇ − g(q)): the acceleration without friction."""
    rhs = np.asarray(tau) - _matvec(arm_coriolis(q, qd, p), qd) - arm_gravity(q, p)
    return _solve2(arm_mass(q, p), rhs)


def arm_friction_accel(q, qd, p: ArmParams):
    """M⁻¹(q)F_f(q̇): the residual term the network learns."""
    return _solve2(arm_mass(q, p), arm_friction(qd, p))


def f_arm(q, qd, tau, p: ArmParams):
    """Full arm vector field ``(q̇, q̈)``, shape ``(..., 4)``."""
    qdd = arm_known_accel(q, qd, tau, p) - arm_friction_accel(q, qd, p)
    return np.concatenate([np.asarray(qd, dtype=np.float64), qdd], axis=-1)


def arm_controller(t, q, qd, q0, phases, p: ArmParams, amp=100.0, freq=1.0, kp=1.0, kd=2.0):
    """τ = g + Cq̇ + M[−K_p(q − q₀) − K_d q̇] + ε(t), ε = amp·sin(2π·freq·t + φ)."""
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    eps = amp * np.sin(2.0 * np.pi * freq * t + np.asarray(phases))
    fb = -kp * (q - q0) - kd * qd
    return arm_gravity(q, p) + _matvec(arm_coriolis(q, qd, p), qd) + _matvec(arm_mass(q, p), fb) + eps


TRAIN_EXCITATION = {"amp": 100.0, "freq": 1.0}
EVAL_EXCITATION = {"amp": 30.0, "freq": 0.25}


@dataclass(frozen=True)
class SystemSpec:
    """One benchmark system and its state-space box 𝒳."""

    name: str
    lo: tuple
    hi: tuple
    mu: float = 0.02
    arm: ArmParams | None = None

    def __post_init__(self):
        if self.name not in ("linear", "vdp", "arm"):
            raise ValueError(f"unknown system {self.name!r}")
        if self.name == "vdp" and self.mu <= 0:
            raise ValueError("Van der Pol mu must be > 0")
        if not np.all(np.isfinite(self.lo)) or not np.all(np.isfinite(self.hi)):
            raise ValueError("state space must be a bounded box")

    @property
    def bounds(self):
        return np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)

    @property
    def state_dim(self):
        return len(self.lo)

    @property
    def label_dim(self):
        return 2

    @property
    def params(self) -> ArmParams:
        return self.arm if self.arm is not None else ArmParams()

    def vector_field(self, x):
        """Autonomous f(x); the arm has none (it needs τ)."""
        if self.name == "linear":
            return f_linear(x)
        if self.name == "vdp":
            return f_vdp(x, self.mu)
        raise TypeError("the arm is input-driven; use closed_loop()")

    def closed_loop(self, q0, phases, amp, freq):
        """``(f(t, X), τ(t, X))`` for the arm under the excitation controller."""
        p = self.params

        def tau(t, X):
            return arm_controller(t, X[..., :2], X[..., 2:], q0, phases, p, amp, freq)

        def f(t, X):
            return f_arm(X[..., :2], X[..., 2:], tau(t, X), p)

        return f, tau


def preset_system(name: str) -> SystemSpec:
    if name == "linear":
        return SystemSpec("linear", (-3.0, -3.0), (3.0, 3.0))
    if name == "vdp":
        return SystemSpec("vdp", (-2.5, -2.5), (2.5, 2.5), mu=0.02)
    if name == "arm":
        a = 3.0 * np.pi / 4.0
        return SystemSpec("arm", (-a, -a, -0.1, -0.1), (a, a, 0.1, 0.1), arm=ArmParams())
    raise ValueError(f"unknown system {name!r}")


@dataclass
class SamplingSpec:
    rate: float = 100.0
    duration: float = 12.0
    trajectory_count: int = 100
    noise_variance: float = 1e-4
    seed: int = 0
    filter_window: int = 5
    dt_internal: float = 1e-3
    max_attempts: int = 200

    def __post_init__(self):
        if self.rate <= 0 or self.duration <= 0:
            raise ValueError("rate and duration must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be >= 0")
        if self.trajectory_count < 1:
            raise ValueError("need at least one trajectory")


PRESET_SAMPLING = {
    "linear": SamplingSpec(duration=12.0, trajectory_count=100, noise_variance=1e-4),
    "vdp": SamplingSpec(duration=5.0, trajectory_count=400, noise_variance=5e-5),
    "arm": SamplingSpec(duration=3.0, trajectory_count=400, noise_variance=5e-5),
}


def preset_sampling(name: str, scale: float = 1.0, **overrides) -> SamplingSpec:
    """Preset sampling for ``name``; ``scale`` multiplies the trajectory count."""
    base = PRESET_SAMPLING[name]
    count = max(1, int(round(base.trajectory_count * scale)))
    return replace(base, trajectory_count=count, **overrides)


# ---------------------------------------------------------------------------
# integration and signal processing


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    measured: np.ndarray | None = None
    torques: np.ndarray | None = None
    phases: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def rk4_step(f, t, X, h):
    k1 = f(t, X)
    k2 = f(t + 0.5 * h, X + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, X + 0.5 * h * k2)
    k4 = f(t + h, X + h * k3)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _substeps(rate, dt_internal):
    ratio = (1.0 / rate) / dt_internal
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise ValueError("dt_internal must divide the sample interval")
    return n


def rk4_integrate(f, x0, t_end, dt_internal=1e-3, rate=100.0) -> Trajectory:
    """Classic RK4 at ``dt_internal``, recorded every ``1/rate`` seconds.

    ``f(t, X)`` acts on rows; ``x0`` may be one state or a batch ``(B, n)``,
    giving ``states`` of shape ``(T, n)`` or ``(T, B, n)``.
    """
    sub = _substeps(rate, dt_internal)
    h = 1.0 / (rate * sub)
    n_samples = int(np.floor(t_end * rate + 1e-9)) + 1
    X = np.array(x0, dtype=np.float64)
    out = np.empty((n_samples,) + X.shape)
    out[0] = X
    for k in range(1, n_samples):
        t0 = (k - 1) / rate
        for s in range(sub):
            X = rk4_step(f, t0 + s * h, X, h)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"non-finite state at t={k / rate:.3f}")
        out[k] = X
    return Trajectory(np.arange(n_samples) / rate, out)


def add_noise(traj: Trajectory, variance: float, seed) -> Trajectory:
    """Copy of ``traj`` with i.i.d. N(0, variance) added to every state entry."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, np.sqrt(variance), traj.states.shape) if variance > 0 else 0.0
    return replace(traj, measured=traj.states + noise)


def lowpass_filter(series, window: int = 5):
    """Zero-phase centred moving average along axis 0.

    Near the ends the window shrinks symmetrically so it stays centred.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    half = window // 2
    if half == 0 or n == 0:
        return x.copy()
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    i = np.arange(n)
    r = np.minimum(np.minimum(i, n - 1 - i), half)
    total = csum[i + r + 1] - csum[i - r]
    width = (2 * r + 1).reshape((n,) + (1,) * (x.ndim - 1))
    return total / width


def central_diff4(series, dt: float):
    """Fourth-order central difference; returns derivatives at indices 2..N−3."""
    f = np.asarray(series, dtype=np.float64)
    if f.shape[0] < 5:
        raise ValueError("central_diff4 needs at least 5 samples")
    return (-f[4:] + 8.0 * f[3:-1] - 8.0 * f[1:-3] + f[:-4]) / (12.0 * dt)


def edge_trim(window: int) -> int:
    """Samples dropped at each trajectory end: full filter window under the stencil."""
    return window // 2 + 2


# ---------------------------------------------------------------------------
# dataset assembly


def build_dataset(trajectories, spec: SystemSpec, window: int = 5, meta=None) -> Dataset:
    """Filter, differentiate and pair states with derivative labels.

    For the arm the label is the friction residual
    M⁻¹(q)(τ − C(q,q̇)q̇ − g(q)) − q̈̂ with q̈̂ differentiated from the filtered q̇.
    """
    trim = edge_trim(window)
    xs, ys, ts, ids = [], [], [], []
    for tid, tr in enumerate(trajectories):
        raw = tr.measured if tr.measured is not None else tr.states
        n = raw.shape[0]
        if n < 2 * trim + 1:
            raise ValueError(f"trajectory {tid} has {n} samples; need >= {2 * trim + 1}")
        dt = float(tr.t[1] - tr.t[0])
        filt = lowpass_filter(raw, window)
        keep = slice(trim, n - trim)
        dkeep = slice(trim - 2, n - trim - 2)
        x = filt[keep]
        if spec.name == "arm":
            if tr.torques is None:
                raise ValueError("arm trajectories need recorded torques")
            qdd_hat = central_diff4(filt[:, 2:], dt)[dkeep]
            q, qd = x[:, :2], x[:, 2:]
            y = arm_known_accel(q, qd, tr.torques[keep], spec.params) - qdd_hat
        else:
            y = central_diff4(filt, dt)[dkeep]
        xs.append(x)
        ys.append(y)
        ts.append(tr.t[keep])
        ids.append(np.full(x.shape[0], tr.meta.get("traj_id", tid), dtype=np.int64))
    info = {"system": spec.name, "filter_window": window}
    if meta:
        info.update(meta)
    return Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ts), np.concatenate(ids), info)


def sample_initial_states(spec: SystemSpec, count: int, rng):
    """Uniform over 𝒳; the arm starts at rest (q̇₀ = 0)."""
    lo, hi = spec.bounds
    x0 = rng.uniform(lo, hi, size=(count, lo.size))
    if spec.name == "arm":
        x0[:, 2:] = 0.0
    return x0


def _simulate_batch(spec: SystemSpec, x0, n_samples, sampling: SamplingSpec, rng, excitation):
    t_end = (n_samples - 1) / sampling.rate
    trajs = []
    if spec.name == "arm":
        phases = rng.uniform(0.0, 2.0 * np.pi, size=x0.shape[:1] + (2,))
        q0 = x0[:, :2]
        f, tau = spec.closed_loop(q0, phases, excitation["amp"], excitation["freq"])
        tr = rk4_integrate(f, x0, t_end, sampling.dt_internal, sampling.rate)
        torques = np.stack([tau(tk, tr.states[k]) for k, tk in enumerate(tr.t)])
        for b in range(x0.shape[0]):
            trajs.append(
                Trajectory(tr.t, tr.states[:, b], torques=torques[:, b], phases=phases[b])
            )
    else:
        tr = rk4_integrate(lambda t, X: spec.vector_field(X), x0, t_end, sampling.dt_internal, sampling.rate)
        for b in range(x0.shape[0]):
            trajs.append(Trajectory(tr.t, tr.states[:, b]))
    return trajs


def simulate_trajectories(spec: SystemSpec, sampling: SamplingSpec, excitation=None):
    """Noisy trajectories whose kept (filtered) samples all lie in 𝒳.

    Initial states are drawn uniformly over 𝒳. For the autonomous systems a
    candidate is rejected when its filtered measurements leave 𝒳 inside the
    labelled window. The arm's excitation drives q̇ past the 𝒳 box on every
    trajectory, so arm trajectories are kept whole. Either way the labelled
    sample count is exactly ``trajectory_count · duration · rate``.
    """
    excitation = excitation or TRAIN_EXCITATION
    rng = np.random.default_rng(sampling.seed)
    trim = edge_trim(sampling.filter_window)
    n_keep = int(round(sampling.duration * sampling.rate))
    n_samples = n_keep + 2 * trim
    lo, hi = spec.bounds
    accepted = []
    attempts = 0
    while len(accepted) < sampling.trajectory_count:
        need = sampling.trajectory_count - len(accepted)
        batch = max(need + need // 2, 4)
        attempts += batch
        if attempts > sampling.max_attempts * sampling.trajectory_count:
            raise RuntimeError("could not sample trajectories that stay inside the state space")
        x0 = sample_initial_states(spec, batch, rng)
        noise_seeds = rng.integers(0, 2**63 - 1, size=batch)
        for tr, ns in zip(_simulate_batch(spec, x0, n_samples, sampling, rng, excitation), noise_seeds):
            tr = add_noise(tr, sampling.noise_variance, int(ns))
            filt = lowpass_filter(tr.measured, sampling.filter_window)[trim : n_samples - trim]
            if spec.name == "arm" or (np.all(filt >= lo) and np.all(filt <= hi)):
                tr.meta["traj_id"] = len(accepted)
                tr.meta["x0"] = tr.states[0]
                accepted.append(tr)
                if len(accepted) == sampling.trajectory_count:
                    break
    return accepted


def generate_dataset(spec: SystemSpec, sampling: SamplingSpec, excitation=None) -> Dataset:
    trajs = simulate_trajectories(spec, sampling, excitation)
    meta = {
        "noise_variance": sampling.noise_variance,
        "rate": sampling.rate,
        "seed": sampling.seed,
        "duration": sampling.duration,
        "trajectory_count": sampling.trajectory_count,
        "dt_internal": sampling.dt_internal,
    }
    if spec.name == "vdp":
        meta["mu"] = spec.mu
    return build_dataset(trajs, spec, sampling.filter_window, meta)
