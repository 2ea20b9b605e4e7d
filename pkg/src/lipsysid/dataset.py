"""Dataset container and its CSV + JSON-sidecar file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Samples ``(x_i, y_i, t_i)`` with trajectory ids and metadata.

    ``meta`` carries at least ``system``, ``noise_variance`` and ``rate``.
    """

    X: np.ndarray
    Y: np.ndarray
    t: np.ndarray
    traj: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.traj = np.asarray(self.traj, dtype=np.int64).reshape(-1)
        n = self.X.shape[0]
        if not (self.Y.shape[0] == self.t.shape[0] == self.traj.shape[0] == n):
            raise ValueError("X, Y, t and traj must have the same number of rows")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_in(self):
        return self.X.shape[1]

    @property
    def n_out(self):
        return self.Y.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.Y[idx], self.t[idx], self.traj[idx], dict(self.meta))

    def check(self, bounds=None) -> None:
        """Raise if keys repeat or (when given) states leave ``bounds``."""
        keys = np.stack([self.traj.astype(np.float64), self.t], axis=1)
        if np.unique(keys, axis=0).shape[0] != len(self):
            raise ValueError("duplicated (trajectory, timestamp) keys")
        if bounds is not None:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
            if np.any(self.X < lo) or np.any(self.X > hi):
                raise ValueError("dataset states leave the declared state space")


def _fmt(v: float) -> str:
    return repr(float(v))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_dataset(path, d: Dataset, comments: dict | None = None) -> None:
    """CSV ``traj_id,t,x1..xn,y1..ym`` plus ``<path>.meta.json``.

    Floats are written with ``repr`` so reading back is bit-exact. ``comments``
    become leading ``# key = value`` lines.
    """
    path = Path(path)
    header = ["traj_id", "t"] + [f"x{i + 1}" for i in range(d.n_in)] + [
        f"y{i + 1}" for i in range(d.n_out)
    ]
    lines = [f"# {k} = {v}" for k, v in sorted((comments or {}).items())]
    lines.append(",".join(header))
    for k in range(len(d)):
        row = [str(int(d.traj[k])), _fmt(d.t[k])]
        row += [_fmt(v) for v in d.X[k]]
        row += [_fmt(v) for v in d.Y[k]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    meta = dict(d.meta)
    meta.update(n_in=d.n_in, n_out=d.n_out, rows=len(d))
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    with path.open() as fh:
        line = fh.readline()
        while line.startswith("#"):
            line = fh.readline()
        header = line.strip().split(",")
        n_in = sum(1 for h in header if h.startswith("x"))
        rows = [line.split(",") for line in fh if line.strip() and not line.startswith("#")]
    if not rows:
        raise ValueError(f"{path}: no samples")
    traj = np.array([int(r[0]) for r in rows], dtype=np.int64)
    vals = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    t = vals[:, 0]
    X = vals[:, 1 : 1 + n_in]
    Y = vals[:, 1 + n_in :]
    for k in ("n_in", "n_out", "rows"):
        meta.pop(k, None)
    return Dataset(X, Y, t, traj, meta)
