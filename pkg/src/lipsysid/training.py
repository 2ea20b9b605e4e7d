"""Mini-batch SGD with StepLR, global-norm clipping and best-checkpoint tracking."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .dataset import Dataset
from .kernels import max_pair_quotient

log = logging.getLogger(__name__)

# weight-decay / β grid used for the FCN and LRN sweeps
FULL_REG_GRID = tuple(10.0**k for k in range(-8, 0))
DEFAULT_SEEDS = (0, 100, 200, 300)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr0: float = 1e-2
    step_size: int = 50
    lr_decay: float = 0.5
    clip_norm: float = 1.0
    seed: int = 0
    split_fraction: float = 0.8
    weight_decay: float = 0.0
    beta: float = 0.0
    train_subsample: float = 1.0
    select_on: str = "test"  # or "validation": hold out part of train for θ⋆
    validation_fraction: float = 0.1
    split_seed: int | None = None  # None: split with ``seed``

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.step_size < 1:
            raise ValueError("epochs, batch_size and step_size must be >= 1")
        if self.lr0 <= 0 or self.clip_norm <= 0:
            raise ValueError("lr0 and clip_norm must be positive")
        if not 0.0 < self.lr_decay < 1.0 and self.lr_decay != 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")
        if not 0.0 < self.train_subsample <= 1.0:
            raise ValueError("train_subsample must be in (0, 1]")
        if self.weight_decay < 0 or self.beta < 0:
            raise ValueError("weight_decay and beta must be >= 0")
        if self.select_on not in ("test", "validation"):
            raise ValueError("select_on must be 'test' or 'validation'")

    @classmethod
    def from_mapping(cls, mapping) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise KeyError(f"unknown train config key {key!r}")
            default = getattr(cls, key)
            if default is None:
                kwargs[key] = None if raw in (None, "", "none") else int(raw)
            else:
                kwargs[key] = type(default)(raw) if not isinstance(default, str) else str(raw)
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs: list  # rows (epoch, lr, train_mse, test_mse)
    best_test_mse: float
    best_epoch: int
    best_train_mse: float
    final_model: object
    best_model: object
    config: dict = field(default_factory=dict)

    @property
    def final_test_mse(self) -> float:
        return self.epochs[-1][3]

    def to_csv(self, path, header: dict | None = None) -> None:
        lines = [f"# {k} = {v}" for k, v in sorted((header or {}).items())]
        lines.append("epoch,lr,train_mse,test_mse")
        for e, lr, tr, te in self.epochs:
            lines.append(f"{int(e)},{float(lr)!r},{float(tr)!r},{float(te)!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def split_dataset(d: Dataset, split_fraction=0.8, train_subsample=1.0, seed=0):
    """Seeded uniform shuffle, train/test split, then uniform train downselect."""
    n = len(d)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split_fraction * n))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    n_sub = int(round(train_subsample * n_train))
    train_idx = train_idx[:n_sub]
    if train_idx.size == 0 or test_idx.size == 0:
        raise ValueError(f"split of {n} samples leaves an empty partition")
    return d.subset(np.sort(train_idx)), d.subset(np.sort(test_idx))


def predict(model, X, chunk=8192):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = [np.atleast_2d(model(X[s : s + chunk])) for s in range(0, X.shape[0], chunk)]
    return np.concatenate(out)


def mse(samples, model) -> float:
    """(1/|S|) Σ ‖y_i − Φ(x_i)‖₂² over a Dataset or an ``(X, Y)`` pair."""
    X, Y = (samples.X, samples.Y) if isinstance(samples, Dataset) else samples
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("MSE of an empty set")
    r = Y - predict(model, X)
    return float(np.sum(r * r) / X.shape[0])


def step_lr(epoch: int, lr0: float, step_size: int, decay: float) -> float:
    """α_i = lr0 · decay^⌊i / step_size⌋ for zero-based epoch ``i``."""
    return lr0 * decay ** (epoch // step_size)


def clip_gradients(grads, clip_norm: float = 1.0):
    """Rescale to global ℓ₂ norm ``clip_norm`` when it is exceeded."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > clip_norm:
        return [g * (clip_norm / norm) for g in grads], norm
    return list(grads), norm


def sgd_step(params, grads, lr: float) -> None:
    """θ ← θ − α g in place."""
    for p, g in zip(params, grads):
        p -= lr * g


# ---------------------------------------------------------------------------
# losses


def batch_mse(pred, Y):
    n = dc.value_of(pred).shape[0]
    return dc.scale(dc.sum_all(dc.square(dc.sub(pred, Y))), 1.0 / n)


def pair_quotient_max(out, X, min_dist=1e-12):
    """Differentiable max_{i<j} ‖out_i − out_j‖ / ‖X_i − X_j‖ (w.r.t. ``out``).

    The argmax pair is fixed by the forward values, so the adjoint flows
    only through the two maximising rows.
    """
    vo = dc.value_of(out)
    q, i, j = max_pair_quotient(X, vo, min_dist)
    if i < 0:
        return dc.scale(dc.sum_all(out), 0.0)
    diff = vo[i] - vo[j]
    dy = float(np.linalg.norm(diff))
    dx = float(np.linalg.norm(X[i] - X[j]))
    value = np.asarray(dy / dx)
    if not isinstance(out, dc.Var):
        return value

    def backward(g):
        full = np.zeros_like(vo)
        if dy > 0:
            d = float(g) * diff / (dy * dx)
            full[i] += d
            full[j] -= d
        return (full,)

    return out.tape.record(value, (out,), backward)


def lipnet_loss(model, params, Xb, Yb, cfg):
    return batch_mse(model.forward_with(params, Xb), Yb)


def fcn_loss(model, params, Xb, Yb, cfg):
    loss = batch_mse(model.forward_with(params, Xb), Yb)
    if cfg.weight_decay > 0:
        reg = None
        for W in params[0::2]:
            term = dc.sum_all(dc.square(W))
            reg = term if reg is None else dc.add(reg, term)
        loss = dc.add(loss, dc.scale(reg, cfg.weight_decay))
    return loss


def lrn_loss(model, params, Xb, Yb, cfg):
    pred = model.forward_with(params, Xb)
    loss = batch_mse(pred, Yb)
    if cfg.beta > 0:
        loss = dc.add(loss, dc.scale(pair_quotient_max(pred, Xb), cfg.beta))
    return loss


# ---------------------------------------------------------------------------
# loop


def fit(model, train_set: Dataset, select_set: Dataset, cfg: TrainConfig, loss_fn, progress=None) -> TrainReport:
    """Algorithm loop on pre-split data; ``select_set`` picks θ⋆."""
    rng = np.random.default_rng([cfg.seed, 1])
    params = model.parameters()
    n = len(train_set)
    rows = []
    best = (np.inf, -1, np.inf)
    best_model = model.copy()
    for epoch in range(cfg.epochs):
        lr = step_lr(epoch, cfg.lr0, cfg.step_size, cfg.lr_decay)
        order = rng.permutation(n)
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            tape = dc.Tape()
            pvars = [tape.watch(p) for p in params]
            loss = loss_fn(model, pvars, train_set.X[idx], train_set.Y[idx], cfg)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr}")
            grads = tape.gradient(loss, pvars)
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            sgd_step(params, grads, lr)
        tr = mse(train_set, model)
        te = mse(select_set, model)
        if not np.isfinite(tr):
            raise TrainingDiverged(f"non-finite train MSE after epoch {epoch} (lr {lr})")
        rows.append((epoch, lr, tr, te))
        if te < best[0]:
            best = (te, epoch, tr)
            best_model = model.copy()
        if progress is not None:
            progress(epoch, lr, tr, te)
        log.debug("epoch %d lr %.3g train %.6g test %.6g", epoch, lr, tr, te)
    return TrainReport(rows, best[0], best[1], best[2], model, best_model, cfg.as_dict())


def _run(model, d: Dataset, cfg: TrainConfig, loss_fn, progress=None) -> TrainReport:
    split_seed = cfg.seed if cfg.split_seed is None else cfg.split_seed
    train_set, test_set = split_dataset(d, cfg.split_fraction, cfg.train_subsample, split_seed)
    if cfg.select_on == "validation":
        train_set, select_set = split_dataset(train_set, 1.0 - cfg.validation_fraction, 1.0, split_seed + 1)
    else:
        select_set = test_set
    report = fit(model, train_set, select_set, cfg, loss_fn, progress)
    if cfg.select_on == "validation":
        # report the held-out test MSE of the validation-selected model
        report.best_test_mse = mse(test_set, report.best_model)
    return report


def train(model, d: Dataset, cfg: TrainConfig, progress=None) -> TrainReport:
    """Train a LipschitzNet with plain MSE (normalizer must already be fitted)."""
    return _run(model, d, cfg, lipnet_loss, progress)


def train_fcn(model, d: Dataset, cfg: TrainConfig, progress=None) -> TrainReport:
    """MSE + weight_decay · Σ‖W‖_F² (biases not decayed)."""
    return _run(model, d, cfg, fcn_loss, progress)


def train_lrn(model, d: Dataset, cfg: TrainConfig, progress=None) -> TrainReport:
    """MSE + β · (batch Lipschitz estimate)."""
    return _run(model, d, cfg, lrn_loss, progress)
