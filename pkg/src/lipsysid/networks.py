"""Lipschitz-bounded network, the plain MLP baselines, and their bounds.

All forwards take row batches ``(N, n)`` and work on either arrays or
:class:`~lipsysid.diffcore.Var` parameters, so training reuses them.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .kernels import max_pair_quotient

FORMAT_VERSION = 1
SQRT2 = float(np.sqrt(2.0))

ACTIVATIONS = {
    "relu": dc.relu,
    "leaky_relu": lambda a: dc.leaky_relu(a, 0.01),
}


class DegenerateDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# normalizer


@dataclass
class AffineNormalizer:
    """F(x) = A_F (x − b_F) with diagonal A_F stored as ``scale``."""

    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ValueError("normalizer scales must be strictly positive")

    @classmethod
    def identity(cls, n: int) -> "AffineNormalizer":
        return cls(np.ones(n), np.zeros(n))

    @property
    def A_F(self) -> np.ndarray:
        return np.diag(self.scale)

    @property
    def norm(self) -> float:
        """‖A_F‖₂, exact for a diagonal matrix."""
        return float(self.scale.max())

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) * self.scale


def fit_normalizer(states) -> AffineNormalizer:
    """Per-coordinate mean and population standard deviation (divide by N)."""
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if X.shape[0] < 2:
        raise DegenerateDataError("need at least 2 samples to fit a normalizer")
    mu = X.mean(axis=0)
    std = X.std(axis=0)
    if np.any(std <= 0):
        bad = np.nonzero(std <= 0)[0].tolist()
        raise DegenerateDataError(f"zero variance in coordinate(s) {bad}")
    return AffineNormalizer(1.0 / std, mu)


# ---------------------------------------------------------------------------
# sandwich layer


@dataclass
class SandwichLayerParams:
    X: np.ndarray  # n_out × n_out
    Y: np.ndarray  # n_in × n_out
    v: np.ndarray  # log-scales of Ψ
    b: np.ndarray

    @property
    def n_in(self):
        return self.Y.shape[0]

    @property
    def n_out(self):
        return self.X.shape[0]


def sandwich_apply(A, B, v, b, H, activation="relu"):
    """h_out = √2 Aᵀ Ψ σ(√2 Ψ⁻¹ B h_in + b) for each row of ``H``."""
    act = ACTIVATIONS[activation]
    psi = dc.exp(v)
    psi_inv = dc.exp(dc.neg(v))
    pre = dc.add(dc.mul(dc.scale(dc.matmul(H, dc.transpose(B)), SQRT2), psi_inv), b)
    return dc.scale(dc.matmul(dc.mul(act(pre), psi), A), SQRT2)


def sandwich_forward(layer: SandwichLayerParams, h_in, activation="relu"):
    """Apply one layer to a vector or a row batch."""
    h = np.asarray(h_in, dtype=np.float64)
    single = h.ndim == 1
    if h.shape[-1] != layer.n_in:
        raise ValueError(f"layer expects {layer.n_in} inputs, got {h.shape[-1]}")
    A, B = dc.cayley(layer.X, layer.Y)
    out = sandwich_apply(A, B, layer.v, layer.b, np.atleast_2d(h), activation)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Lipschitz network


@dataclass
class LipschitzNet:
    normalizer: AffineNormalizer
    hidden: list
    final_X: np.ndarray
    final_Y: np.ndarray
    gamma_prime: float
    activation: str = "relu"
    meta: dict = field(default_factory=dict)

    kind = "lipnet"

    @property
    def n_in(self):
        return self.normalizer.scale.size

    @property
    def n_out(self):
        return self.final_X.shape[0]

    def parameters(self) -> list:
        """Trainable arrays in a fixed order (mutated in place by training)."""
        ps = []
        for layer in self.hidden:
            ps.extend([layer.X, layer.Y, layer.v, layer.b])
        ps.extend([self.final_X, self.final_Y])
        return ps

    def forward_with(self, params, x):
        return lipnet_forward(self, x, params)

    def __call__(self, x):
        return net_forward(self, x)

    def lipschitz_bound(self) -> float:
        return lipschitz_bound(self)

    def frozen(self):
        """Evaluator with the Cayley transforms computed once (for rollouts)."""
        layers = [(*dc.cayley(l.X, l.Y), l.v, l.b) for l in self.hidden]
        _, B_L = dc.cayley(self.final_X, self.final_Y)
        norm, gp, act = self.normalizer, float(self.gamma_prime), self.activation

        def phi(x):
            x = np.asarray(x, dtype=np.float64)
            out = lipnet_apply(np.atleast_2d(x), norm, layers, B_L, gp, act)
            return out[0] if x.ndim == 1 else out

        return phi

    def copy(self) -> "LipschitzNet":
        return LipschitzNet(
            AffineNormalizer(self.normalizer.scale.copy(), self.normalizer.offset.copy()),
            [SandwichLayerParams(l.X.copy(), l.Y.copy(), l.v.copy(), l.b.copy()) for l in self.hidden],
            self.final_X.copy(),
            self.final_Y.copy(),
            float(self.gamma_prime),
            self.activation,
            dict(self.meta),
        )


def init_lipschitz_net(
    normalizer: AffineNormalizer,
    widths=(64,) * 7,
    n_out: int = 2,
    gamma: float = 1.0,
    seed: int = 0,
    activation: str = "relu",
) -> LipschitzNet:
    """Gaussian init with std 1/√fan_in, Ψ = I, zero biases.

    ``gamma`` is the certified bound wanted for Φ; the network scale is set
    to γ' = γ / ‖A_F‖₂ so that :func:`lipschitz_bound` returns ``gamma``.
    """
    rng = np.random.default_rng(seed)
    n_prev = normalizer.scale.size
    hidden = []
    for w in widths:
        s = 1.0 / np.sqrt(n_prev)
        hidden.append(
            SandwichLayerParams(
                X=rng.normal(0.0, s, (w, w)),
                Y=rng.normal(0.0, s, (n_prev, w)),
                v=np.zeros(w),
                b=np.zeros(w),
            )
        )
        n_prev = w
    s = 1.0 / np.sqrt(n_prev)
    final_X = rng.normal(0.0, s, (n_out, n_out))
    final_Y = rng.normal(0.0, s, (n_prev, n_out))
    return LipschitzNet(
        normalizer, hidden, final_X, final_Y, gamma / normalizer.norm, activation
    )


def lipnet_apply(x, normalizer, layers, B_L, gamma_prime, activation="relu"):
    """Φ on a row batch from explicit (A, B, v, b) layers and final B_L.

    φ_L is evaluated on the batch with one extra all-zero row appended, and
    that row's image is subtracted. Input rows equal to 0 read φ_L(0) from
    the same appended row (BLAS rounding can depend on row position), so
    they map to exactly 0.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    stacked = np.vstack([X, np.zeros((1, X.shape[1]))])
    h = normalizer(stacked)
    for A, B, v, b in layers:
        h = sandwich_apply(A, B, v, b, h, activation)
    phi = dc.scale(dc.matmul(h, dc.transpose(B_L)), gamma_prime)
    n = X.shape[0]
    rows = np.arange(n)
    rows[np.all(X == 0.0, axis=1)] = n
    top = dc.take_rows(phi, rows)
    zero = dc.take_rows(phi, np.full(n, n))
    return dc.sub(top, zero)


def lipnet_forward(net: LipschitzNet, x, params=None):
    """Φ(x) for a row batch; ``params`` may be tape variables in ``parameters()`` order."""
    ps = net.parameters() if params is None else list(params)
    layers = []
    for i in range(len(net.hidden)):
        X, Y, v, b = ps[4 * i : 4 * i + 4]
        A, B = dc.cayley(X, Y)
        layers.append((A, B, v, b))
    _, B_L = dc.cayley(ps[-2], ps[-1])
    return lipnet_apply(x, net.normalizer, layers, B_L, net.gamma_prime, net.activation)


def net_forward(net: LipschitzNet, x):
    """Φ(x) for a single vector or a row batch (arrays only)."""
    x = np.asarray(x, dtype=np.float64)
    out = lipnet_forward(net, np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def lipschitz_bound(net: LipschitzNet) -> float:
    """γ = γ'‖A_F‖₂."""
    return float(net.gamma_prime) * net.normalizer.norm


# ---------------------------------------------------------------------------
# MLP baselines


@dataclass
class MlpBaseline:
    weights: list  # W_i with shape (n_out, n_in)
    biases: list
    activation: str = "relu"
    normalizer: AffineNormalizer | None = None
    meta: dict = field(default_factory=dict)

    kind = "mlp"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: bias length {b.shape[0]} != {W.shape[0]}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width does not chain")

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def parameters(self) -> list:
        ps = []
        for W, b in zip(self.weights, self.biases):
            ps.extend([W, b])
        return ps

    def forward_with(self, params, x):
        return mlp_apply(self, x, params)

    def __call__(self, x):
        return mlp_forward(self, x)

    def lipschitz_bound(self) -> float:
        return mlp_lipschitz_upper(self)

    def copy(self) -> "MlpBaseline":
        norm = None
        if self.normalizer is not None:
            norm = AffineNormalizer(self.normalizer.scale.copy(), self.normalizer.offset.copy())
        return MlpBaseline(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            norm,
            dict(self.meta),
        )


def init_mlp(n_in, widths=(64,) * 7, n_out=2, activation="relu", seed=0, normalizer=None):
    """Uniform(±1/√fan_in) weights and biases."""
    rng = np.random.default_rng(seed)
    dims = [n_in, *widths, n_out]
    Ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        s = 1.0 / np.sqrt(a)
        Ws.append(rng.uniform(-s, s, (b, a)))
        bs.append(rng.uniform(-s, s, b))
    return MlpBaseline(Ws, bs, activation, normalizer)


def mlp_apply(net: MlpBaseline, x, params=None):
    ps = net.parameters() if params is None else list(params)
    act = ACTIVATIONS[net.activation]
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != net.n_in:
        raise ValueError(f"network expects {net.n_in} inputs, got {h.shape[1]}")
    if net.normalizer is not None:
        h = net.normalizer(h)
    n_layers = len(ps) // 2
    for i in range(n_layers):
        h = dc.add(dc.matmul(h, dc.transpose(ps[2 * i])), ps[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_forward(net: MlpBaseline, x):
    x = np.asarray(x, dtype=np.float64)
    out = mlp_apply(net, np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def mlp_lipschitz_upper(net: MlpBaseline) -> float:
    """Product of layer spectral norms (times ‖A_F‖₂ when normalized).

    Valid for 1-Lipschitz activations; looser than an SDP certificate.
    """
    bound = 1.0 if net.normalizer is None else net.normalizer.norm
    for W in net.weights:
        bound *= dc.spectral_norm(W)
    return float(bound)


def batch_lipschitz_estimate(net, batch) -> float:
    """Largest output/input distance ratio over pairs in ``batch``."""
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("batch_lipschitz_estimate needs at least 2 points")
    Y = np.atleast_2d(net(X)) if callable(net) else mlp_forward(net, X)
    q, i, _ = max_pair_quotient(X, Y, 1e-12)
    if i < 0:
        warnings.warn("all batch points coincide; Lipschitz estimate is 0", RuntimeWarning)
        return 0.0
    return q


# ---------------------------------------------------------------------------
# serialization


def save_model(path, net, extra: dict | None = None) -> None:
    """Write ``net`` to an ``.npz`` container (no pickling)."""
    arrays = {"format_version": np.array(FORMAT_VERSION), "kind": np.array(net.kind)}
    meta = dict(net.meta)
    if extra:
        meta.update(extra)
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    arrays["activation"] = np.array(net.activation)
    if isinstance(net, LipschitzNet):
        arrays["gamma_prime"] = np.array(net.gamma_prime, dtype=np.float64)
        arrays["norm_scale"] = net.normalizer.scale
        arrays["norm_offset"] = net.normalizer.offset
        arrays["n_hidden"] = np.array(len(net.hidden))
        for i, l in enumerate(net.hidden):
            arrays[f"hidden{i}_X"] = l.X
            arrays[f"hidden{i}_Y"] = l.Y
            arrays[f"hidden{i}_v"] = l.v
            arrays[f"hidden{i}_b"] = l.b
        arrays["final_X"] = net.final_X
        arrays["final_Y"] = net.final_Y
    elif isinstance(net, MlpBaseline):
        arrays["n_layers"] = np.array(len(net.weights))
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
        if net.normalizer is not None:
            arrays["norm_scale"] = net.normalizer.scale
            arrays["norm_offset"] = net.normalizer.offset
    else:
        raise TypeError(f"cannot serialize {type(net).__name__}")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        kind = str(z["kind"])
        meta = json.loads(str(z["meta"]))
        act = str(z["activation"])
        if kind == "lipnet":
            hidden = [
                SandwichLayerParams(
                    z[f"hidden{i}_X"], z[f"hidden{i}_Y"], z[f"hidden{i}_v"], z[f"hidden{i}_b"]
                )
                for i in range(int(z["n_hidden"]))
            ]
            norm = AffineNormalizer(z["norm_scale"], z["norm_offset"])
            return LipschitzNet(
                norm, hidden, z["final_X"], z["final_Y"], float(z["gamma_prime"]), act, meta
            )
        if kind == "mlp":
            n = int(z["n_layers"])
            norm = None
            if "norm_scale" in z:
                norm = AffineNormalizer(z["norm_scale"], z["norm_offset"])
            return MlpBaseline(
                [z[f"W{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)], act, norm, meta
            )
    raise ValueError(f"unknown model kind {kind!r}")
