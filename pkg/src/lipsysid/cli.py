"""``lipsysid`` command line: simulate, train, verify, rollout, sweep-gamma, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dynamics as dyn
from . import networks as nets
from . import svg
from . import training as tr
from . import verification as ver
from .dataset import Dataset, load_dataset, save_dataset

log = logging.getLogger("lipsysid")

MODEL_KINDS = ("lipnet", "fcn", "lrn")
FAILED = "FAILED"


# ---------------------------------------------------------------------------
# helpers


def _audit(cfg) -> dict:
    """Resolved config for embedding in artifacts; the output directory is left
    out so identical runs in different directories produce identical files."""
    h = cfgmod.flatten(cfg)
    h.pop("run.out", None)
    return h


def _header(cfg, command: str, **extra) -> dict:
    h = _audit(cfg)
    h["command"] = command
    h["seed"] = cfg["run"]["seed"]
    h.update(extra)
    return h


def _write_csv(path, header: dict, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k, v in sorted(header.items()):
            fh.write(f"# {k} = {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _out(cfg) -> Path:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def system_spec(cfg) -> dyn.SystemSpec:
    spec = dyn.preset_system(cfg["system"]["name"])
    if cfg["system"]["mu"] is not None:
        spec = replace(spec, mu=cfg["system"]["mu"])
    return spec


def sampling_spec(cfg) -> dyn.SamplingSpec:
    s = cfg["sampling"]
    over = {k: s[k] for k in ("rate", "duration", "trajectory_count", "noise_variance") if s[k] is not None}
    over.update(filter_window=s["filter_window"], dt_internal=s["dt_internal"], seed=cfg["run"]["seed"])
    spec = dyn.preset_sampling(cfg["system"]["name"], s["scale"], **over)
    return spec


def gamma_of(cfg) -> float:
    g = cfg["model"]["gamma"]
    return cfgmod.DEFAULT_GAMMA[cfg["system"]["name"]] if g is None else g


def build_model(kind: str, d: Dataset, cfg, seed: int, gamma=None):
    """Fresh network of ``kind``; the normalizer is fitted on the full dataset."""
    norm = nets.fit_normalizer(d.X)
    widths = tuple(cfg["model"]["widths"])
    if kind == "lipnet":
        g = gamma_of(cfg) if gamma is None else gamma
        return nets.init_lipschitz_net(norm, widths, d.n_out, g, seed)
    if kind == "fcn":
        return nets.init_mlp(d.n_in, widths, d.n_out, "relu", seed, norm)
    if kind == "lrn":
        return nets.init_mlp(d.n_in, widths, d.n_out, "leaky_relu", seed, norm)
    raise ValueError(f"unknown model kind {kind!r}")


TRAINERS = {"lipnet": tr.train, "fcn": tr.train_fcn, "lrn": tr.train_lrn}
REG_KEY = {"fcn": "weight_decay", "lrn": "beta"}


def _dataset_path(cfg, args) -> Path:
    p = getattr(args, "dataset", None)
    return Path(p) if p else _out(cfg) / "dataset.csv"


def _fmt_tag(x: float) -> str:
    return f"{x:g}".replace(".", "p").replace("-", "m")


def run_name(kind, subsample, seed) -> str:
    return f"{kind}_p{_fmt_tag(subsample)}_s{seed}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg, args) -> int:
    out = _out(cfg)
    spec = system_spec(cfg)
    sampling = sampling_spec(cfg)
    t0 = time.perf_counter()
    d = dyn.generate_dataset(spec, sampling)
    d.meta["system"] = spec.name
    d.meta["filter_window"] = sampling.filter_window
    d.meta["config"] = _audit(cfg)
    if cfg["sampling"]["clean_k"]:
        # the noise-free replica gives a usable finite-difference K
        clean = dyn.generate_dataset(spec, replace(sampling, noise_variance=0.0))
        d.meta["K_noiseless"] = ver.empirical_lipschitz(clean, cfg["verify"]["k_neighbors"])
    path = out / "dataset.csv"
    save_dataset(path, d, _header(cfg, "simulate"))
    log.info("wrote %s (%d rows) in %.1fs", path, len(d), time.perf_counter() - t0)
    print(f"{path}\t{len(d)} rows")
    return 0


def _train_one(kind, d, cfg, seed, subsample, reg):
    extra = {"seed": seed, "train_subsample": subsample, "split_seed": cfg["run"]["seed"]}
    if kind in REG_KEY:
        extra[REG_KEY[kind]] = reg
    tc = cfgmod.train_config(cfg, **extra)
    model = build_model(kind, d, cfg, seed)
    report = TRAINERS[kind](model, d, tc)
    return report, tc


def train_runs(cfg, d: Dataset, out: Path, command="train", rows=None):
    """Every (kind, subsample, seed) run; baselines take the best of their regularizer grid.

    Finished runs are appended to ``rows`` as they complete.
    """
    rows = [] if rows is None else rows
    for kind in cfg["model"]["kinds"]:
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        if kind in REG_KEY:
            grid = cfg["train"]["reg_grid"] or [cfg["train"][REG_KEY[kind]]]
        else:
            grid = [0.0]
        for sub in cfg["train"]["subsample"]:
            for seed in cfg["train"]["seeds"]:
                best = None
                for reg in grid:
                    report, tc = _train_one(kind, d, cfg, seed, sub, reg)
                    log.info("%s sub=%g seed=%d reg=%g test=%.6g", kind, sub, seed, reg, report.best_test_mse)
                    if best is None or report.best_test_mse < best[0].best_test_mse:
                        best = (report, tc, reg)
                report, tc, reg = best
                name = run_name(kind, sub, seed)
                head = _header(cfg, command, model=kind, train_seed=seed, subsample=sub, reg=reg)
                (out / "curves").mkdir(exist_ok=True)
                (out / "models").mkdir(exist_ok=True)
                report.to_csv(out / "curves" / f"{name}.csv", head)
                model = report.best_model
                nets.save_model(out / "models" / f"{name}.npz", model, {
                    "system": cfg["system"]["name"], "train_seed": seed, "subsample": sub,
                    "reg": reg, "config": _audit(cfg)})
                rows.append([
                    cfg["system"]["name"], kind, sub, seed, float(reg), report.best_epoch,
                    float(report.best_train_mse), float(report.best_test_mse),
                    float(model.lipschitz_bound()),
                ])
    return rows


RUN_COLUMNS = ["system", "model", "subsample", "seed", "reg", "best_epoch", "train_mse", "test_mse", "lipschitz_bound"]


def table2_rows(rows):
    """Mean and (population) std of test MSE over seeds, one row per (system, model, subsample)."""
    groups = {}
    for r in rows:
        groups.setdefault((r[0], r[1], float(r[2])), []).append(float(r[7]))
    out = []
    for (system, kind, sub), vals in groups.items():
        v = np.array(vals)
        out.append([system, kind, sub, float(v.mean()), float(v.std()), len(vals)])
    return out


TABLE2_COLUMNS = ["system", "model", "subsample", "test_mse_mean", "test_mse_std", "n_seeds"]


def cmd_train(cfg, args) -> int:
    out = _out(cfg)
    d = load_dataset(_dataset_path(cfg, args))
    rows = []
    try:
        train_runs(cfg, d, out, rows=rows)
    finally:
        # partial results survive a failing run next to the FAILED marker
        _write_csv(out / "train_runs.csv", _header(cfg, "train"), RUN_COLUMNS, rows)
    head = _header(cfg, "train")
    t2 = table2_rows(rows)
    _write_csv(out / "table2.csv", head, TABLE2_COLUMNS, t2)
    for r in t2:
        print(f"{r[1]}\tsubsample={r[2]:g}\ttest_mse={r[3]:.6g} ± {r[4]:.3g}")
    return 0


def _model_files(cfg, args):
    files = [Path(p) for p in (getattr(args, "model_file", None) or [])]
    if files:
        return files
    mdir = _out(cfg) / "models"
    kinds = cfg["model"]["kinds"]
    found = sorted(p for p in mdir.glob("*.npz") if p.name.split("_", 1)[0] in kinds)
    if not found:
        raise FileNotFoundError(f"no model files for {kinds} in {mdir}")
    return found


def resolve_K(cfg, d: Dataset) -> tuple:
    """``(K, source)``: configured, else the noise-free estimate from simulate, else the data."""
    if cfg["verify"]["K"] is not None:
        return float(cfg["verify"]["K"]), "config"
    if "K_noiseless" in d.meta:
        return float(d.meta["K_noiseless"]), "noiseless replica"
    return ver.empirical_lipschitz(d, cfg["verify"]["k_neighbors"]), "dataset"


def _delta_tag(delta) -> str:
    if isinstance(delta, tuple):
        return "-".join(_fmt_tag(x) for x in delta)
    return _fmt_tag(delta)


def _delta_label(delta) -> str:
    return ":".join(repr(x) for x in delta) if isinstance(delta, tuple) else repr(delta)


def verify_models(cfg, d: Dataset, files, out: Path, command="verify", rows=None):
    spec = system_spec(cfg)
    K, source = resolve_K(cfg, d)
    log.info("K = %.6g (%s)", K, source)
    tree = ver.KdTree(d.X)
    rows = [] if rows is None else rows
    for f in files:
        model = nets.load_model(f)
        for delta in cfg["verify"]["delta"]:
            rep = ver.estimation_error_bound(
                model, d, K, spec.bounds, delta, cfg["verify"]["q"], cfg["verify"]["c"], tree=tree
            )
            head = _header(cfg, command, model_file=f.name, K_source=source, delta=_delta_label(delta))
            stem = out / "verify" / f"{f.stem}_d{_delta_tag(delta)}"
            stem.parent.mkdir(parents=True, exist_ok=True)
            rep.write(stem.with_suffix(".csv"), stem.with_suffix(".summary.txt"), head)
            kind = "lipnet" if model.kind == "lipnet" else f.stem.split("_", 1)[0]
            rows.append([spec.name, kind, f.stem, rep.gamma, rep.K, _delta_label(delta), rep.n_lattices, rep.c, rep.bound])
            log.info("%s delta=%s Delta=%.6g (%.2fs)", f.stem, _delta_label(delta), rep.bound, rep.wall_time)
    return rows


VERIFY_COLUMNS = ["system", "model", "run", "gamma", "K", "delta", "n_lattices", "c", "Delta"]


def table1_rows(rows):
    """One row per (system, model run) with γ and Δ per δ (δ columns in first-seen order)."""
    deltas = list(dict.fromkeys(r[5] for r in rows))
    by_run = {}
    for r in rows:
        key = (r[0], r[1], r[2])
        by_run.setdefault(key, {"gamma": r[3], "K": r[4]})[r[5]] = r[8]
    cols = ["system", "model", "run", "gamma", "K"] + [f"Delta@{dl}" for dl in deltas]
    body = [[*k, v["gamma"], v["K"], *[v.get(dl, "") for dl in deltas]] for k, v in by_run.items()]
    return cols, body


def cmd_verify(cfg, args) -> int:
    out = _out(cfg)
    d = load_dataset(_dataset_path(cfg, args))
    files = _model_files(cfg, args)
    rows = []
    try:
        verify_models(cfg, d, files, out, rows=rows)
    finally:
        _write_csv(out / "verify_runs.csv", _header(cfg, "verify"), VERIFY_COLUMNS, rows)
    head = _header(cfg, "verify")
    cols, body = table1_rows(rows)
    _write_csv(out / "table1.csv", head, cols, body)
    for r in body:
        print("\t".join(str(x) for x in r))
    return 0


class _Truth:
    """Stand-in model returning the true vector field (arm: the friction term)."""

    kind = "truth"

    def __init__(self, spec: dyn.SystemSpec):
        self.spec = spec

    def __call__(self, X):
        X = np.atleast_2d(X)
        if self.spec.name == "arm":
            return dyn.arm_friction_accel(X[:, :2], X[:, 2:], self.spec.params)
        return self.spec.vector_field(X)

    def lipschitz_bound(self):
        return 0.0


def cmd_rollout(cfg, args) -> int:
    out = _out(cfg)
    spec = system_spec(cfg)
    rc = cfg["rollout"]
    names = getattr(args, "model_file", None) or []
    if names == ["truth"]:
        models = [("truth", _Truth(spec))]
    else:
        models = [(f.stem, nets.load_model(f)) for f in _model_files(cfg, args)]
    x0 = ver.uniform_initial_states(spec, rc["count"], cfg["run"]["seed"])
    a = rc["a"]
    if a is None and getattr(args, "dataset", None) and models[0][0] != "truth":
        d = load_dataset(args.dataset)
        K, _ = resolve_K(cfg, d)
        a = ver.estimation_error_bound(
            models[0][1], d, K, spec.bounds, cfg["verify"]["delta"][0], cfg["verify"]["q"], cfg["verify"]["c"]
        ).bound
    series = []
    for k, (name, model) in enumerate(models):
        aa = a if (k == 0 and a is not None) else 0.0
        bundle = ver.rollout_compare(spec, model, x0, rc["t_end"], a=aa, dt=rc["dt"], seed=cfg["run"]["seed"])
        head = _header(cfg, "rollout", model=name, a=aa, gamma=bundle.gamma,
                       envelope_violations=bundle.envelope_violations(), diverged=int(bundle.diverged.sum()))
        (out / "rollout").mkdir(exist_ok=True)
        bundle.write_csv(out / "rollout" / f"rollout_{name}.csv", head)
        series.append(svg.Series(name, bundle.t, bundle.mean, band=bundle.std))
        if k == 0 and a is not None:
            series.append(svg.Series(f"envelope {name}", bundle.t, bundle.envelope, dashed=True, color="black"))
        print(f"{name}\tfinal mean dev={float(bundle.mean[-1]):.4g}\tviolations={bundle.envelope_violations()}")
    svg.line_plot(
        out / "rollout.svg", series, title=f"rollout error ({spec.name})", xlabel="t [s]",
        ylabel="||x(t) - z(t)||", comments=_header(cfg, "rollout"),
    )
    return 0


def cmd_sweep_gamma(cfg, args) -> int:
    out = _out(cfg)
    d = load_dataset(_dataset_path(cfg, args))
    seed = cfg["train"]["seeds"][0]
    sub = cfg["train"]["subsample"][0]
    rows = []
    for g in cfg["sweep"]["gammas"]:
        tc = cfgmod.train_config(cfg, seed=seed, train_subsample=sub, split_seed=cfg["run"]["seed"])
        model = build_model("lipnet", d, cfg, seed, gamma=g)
        rep = tr.train(model, d, tc)
        rows.append([g, float(rep.best_train_mse), float(rep.best_test_mse), rep.best_epoch])
        log.info("gamma=%g train=%.6g test=%.6g", g, rep.best_train_mse, rep.best_test_mse)
        print(f"gamma={g:g}\ttrain_mse={rep.best_train_mse:.6g}\ttest_mse={rep.best_test_mse:.6g}")
    head = _header(cfg, "sweep-gamma")
    _write_csv(out / "sweep_gamma.csv", head, ["gamma", "train_mse", "test_mse", "best_epoch"], rows)
    arr = np.array([r[:3] for r in rows], dtype=np.float64)
    svg.line_plot(
        out / "sweep_gamma.svg",
        [svg.Series("train MSE", arr[:, 0], arr[:, 1], markers=True),
         svg.Series("test MSE", arr[:, 0], arr[:, 2], markers=True)],
        title="MSE vs certified bound", xlabel="gamma", ylabel="MSE", logy=True, comments=head,
    )
    return 0


def cmd_report(cfg, args) -> int:
    out = _out(cfg)
    roots = [Path(p) for p in (args.runs or [cfg["run"]["out"]])]
    run_rows, ver_rows = [], []
    for root in roots:
        for p in sorted(root.rglob("train_runs.csv")):
            for r in _read_csv(p):
                run_rows.append([r[c] if c in ("system", "model") else float(r[c]) for c in RUN_COLUMNS])
        for p in sorted(root.rglob("verify_runs.csv")):
            for r in _read_csv(p):
                ver_rows.append([r["system"], r["model"], r["run"], float(r["gamma"]), float(r["K"]),
                                 r["delta"], int(r["n_lattices"]), float(r["c"]), float(r["Delta"])])
    if not run_rows and not ver_rows:
        raise FileNotFoundError(f"no train_runs.csv or verify_runs.csv under {[str(r) for r in roots]}")
    head = _header(cfg, "report", sources=",".join(str(r) for r in roots))
    if run_rows:
        for r in run_rows:
            r[3] = int(r[3])
        _write_csv(out / "report_table2.csv", head, TABLE2_COLUMNS, table2_rows(run_rows))
    if ver_rows:
        cols, body = table1_rows(ver_rows)
        _write_csv(out / "report_table1.csv", head, cols, body)
    print(f"{len(run_rows)} training runs, {len(ver_rows)} verify rows -> {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "verify": cmd_verify,
    "rollout": cmd_rollout,
    "sweep-gamma": cmd_sweep_gamma,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing

# flag dest -> config key
FLAG_KEYS = {
    "seed": "run.seed",
    "out": "run.out",
    "system": "system.name",
    "mu": "system.mu",
    "scale": "sampling.scale",
    "noise_variance": "sampling.noise_variance",
    "trajectories": "sampling.trajectory_count",
    "duration": "sampling.duration",
    "model": "model.kinds",
    "gamma": "model.gamma",
    "widths": "model.widths",
    "subsample": "train.subsample",
    "seeds": "train.seeds",
    "epochs": "train.epochs",
    "lr": "train.lr0",
    "batch_size": "train.batch_size",
    "step_size": "train.step_size",
    "weight_decay": "train.weight_decay",
    "beta": "train.beta",
    "reg_grid": "train.reg_grid",
    "select_on": "train.select_on",
    "delta": "verify.delta",
    "K": "verify.K",
    "c": "verify.c",
    "q": "verify.q",
    "count": "rollout.count",
    "t_end": "rollout.t_end",
    "a": "rollout.a",
    "gammas": "sweep.gammas",
}


def _add_train_flags(p):
    p.add_argument("--dataset", help="dataset CSV (default: <out>/dataset.csv)")
    p.add_argument("--model", nargs="+", choices=MODEL_KINDS, help="model families to train")
    p.add_argument("--gamma", type=float, help="certified Lipschitz bound for lipnet")
    p.add_argument("--widths", help="hidden widths, comma separated")
    p.add_argument("--subsample", nargs="+", type=float, help="training-set fractions")
    p.add_argument("--seeds", nargs="+", type=int, help="training seeds, e.g. 0 100 200 300")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--step-size", type=int, help="StepLR period in epochs")
    p.add_argument("--weight-decay", type=float, help="FCN weight decay")
    p.add_argument("--beta", type=float, help="LRN Lipschitz penalty weight")
    p.add_argument("--reg-grid", help="comma list of regularizer values for fcn/lrn, or 'full' (1e-8 ... 1e-1)")
    p.add_argument("--select-on", choices=("test", "validation"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with sections")
    common.add_argument("--seed", type=int, help="data/split seed")
    common.add_argument("--system", choices=("linear", "vdp", "arm"))
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="lipsysid", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a dataset")
    p.add_argument("--scale", type=float, help="fraction of the preset trajectory count")
    p.add_argument("--noise-variance", type=float)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--mu", type=float, help="Van der Pol damping")

    p = sub.add_parser("train", parents=[common], help="train model families")
    _add_train_flags(p)

    for name, helptext in (("verify", "certified error bound"), ("rollout", "rollout deviation curves")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("model_file", nargs="*", help="model .npz files (default: <out>/models)")
        p.add_argument("--model", nargs="+", choices=MODEL_KINDS, help="families picked from <out>/models")
        p.add_argument("--dataset")
        p.add_argument("--delta", nargs="+", help="lattice radii; a:b:c:d gives per-axis radii")
        p.add_argument("--K", type=float, help="system Lipschitz constant (default: estimated)")
        p.add_argument("--c", type=float, help="label error constant added to the bound")
        p.add_argument("--q", type=int, help="nearest neighbours for empty lattices")
        if name == "rollout":
            p.add_argument("--count", type=int)
            p.add_argument("--t-end", type=float)
            p.add_argument("--a", type=float, help="model error for the envelope (default: verify bound)")

    p = sub.add_parser("sweep-gamma", parents=[common], help="train lipnets across gamma values")
    _add_train_flags(p)
    p.add_argument("--gammas", nargs="+", type=float)

    p = sub.add_parser("report", parents=[common], help="aggregate run directories")
    p.add_argument("runs", nargs="*", help="run directories to scan")
    return ap


def overrides_from(args) -> dict:
    ov = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        if dest == "reg_grid" and str(v).strip().lower() == "full":
            v = list(tr.FULL_REG_GRID)
        ov[key] = v
    return ov


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out = Path(args.out) if args.out else None
    try:
        cfg = cfgmod.resolve(args.config, overrides_from(args))
        out = Path(cfg["run"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        marker = out / FAILED
        if marker.exists():
            marker.unlink()
        (out / f"{args.command}.config.ini").write_text(cfgmod.dump(cfg))
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - report any stage failure with a marker
        log.debug("failure", exc_info=True)
        print(f"lipsysid {args.command}: error: {exc}", file=sys.stderr)
        target = out or Path(".")
        try:
            target.mkdir(parents=True, exist_ok=True)
            (target / FAILED).write_text(
                json.dumps({"command": args.command, "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc()}, indent=2) + "\n"
            )
        except OSError:
            pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
