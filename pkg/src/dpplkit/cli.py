"""Command-line harness: ``dpplkit {gen-data,train,project,eval,bench}``.

Every command writes ``config.json`` (the resolved settings) to ``--out``;
rerunning with ``--config out/config.json`` reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import constraints as cons
from . import io as fio
from .dppl import ProjectionConfig, project_samples
from .errors import (
    ConvergenceError,
    DivergenceError,
    DpplError,
    GradientUndefinedError,
    InvalidArgumentError,
    ProjectionFailure,
)
from .model import AffineBaseModel, TrainConfig, evaluate_model, pde_projector, predict_batch, train
from .model import train_timing_compare
from .pdegen import PdeDataset, gen_dataset
from .probdist import PRNG_NAME, crps_gaussian

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(InvalidArgumentError):
    pass


# Defaults shared by every command; the parser only sets explicitly given flags.
DEFAULTS = {
    "kind": "heat",
    "n": 200,
    "seed": 1,
    "data_seed": None,
    "grid": "64x64",
    "param_range": None,
    "split": 0.8,
    "format": "bin",
    "data": None,
    "loss": "crps",
    "projector": "oblique",
    "tv_weight": 0.0,
    "q_mode": None,
    "lr": 0.01,
    "momentum": 0.9,
    "epochs": 300,
    "degree": 3,
    "mc_samples": 100,
    "repeats": 3,
    "newton_tol": 1e-10,
    "newton_max_iter": 50,
    "dirichlet": False,
    "checkpoint": None,
    "input": None,
    "constraint": None,
    "hierarchy": None,
    "weights": None,
    "output": None,
}

COMMAND_KEYS = {
    "gen-data": {"kind", "n", "seed", "grid", "param_range", "split", "format"},
    "train": {
        "kind", "n", "seed", "data_seed", "grid", "param_range", "split", "data", "loss", "projector",
        "tv_weight", "q_mode", "lr", "momentum", "epochs", "degree", "newton_tol", "newton_max_iter",
        "dirichlet",
    },
    "project": {"input", "constraint", "hierarchy", "q_mode", "weights", "output", "newton_tol", "newton_max_iter"},
    "eval": {"checkpoint", "data", "kind", "n", "seed", "grid", "param_range", "split", "projector", "q_mode",
             "newton_tol", "newton_max_iter", "dirichlet"},
    "bench": {
        "kind", "n", "seed", "data_seed", "grid", "param_range", "split", "data", "loss", "projector",
        "tv_weight", "q_mode", "lr", "momentum", "degree", "mc_samples", "repeats", "newton_tol",
        "newton_max_iter", "dirichlet",
    },
}


def _add_common(p, keys):
    S = argparse.SUPPRESS
    if "kind" in keys:
        p.add_argument("--kind", choices=["heat", "pme", "stefan", "advection"], default=S)
    if "n" in keys:
        p.add_argument("--n", type=int, default=S, help="number of samples")
    if "seed" in keys:
        p.add_argument("--seed", type=int, default=S)
    if "data_seed" in keys:
        p.add_argument("--data-seed", type=int, default=S, help="dataset seed (defaults to --seed)")
    if "grid" in keys:
        p.add_argument("--grid", default=S, help="NTxNX, e.g. 64x64")
    if "param_range" in keys:
        p.add_argument("--param-range", type=float, nargs=2, metavar=("LO", "HI"), default=S)
        p.add_argument("--m-range", dest="param_range", type=float, nargs=2, metavar=("LO", "HI"), default=S)
    if "split" in keys:
        p.add_argument("--split", type=float, default=S)
    if "format" in keys:
        p.add_argument("--format", choices=["bin", "csv"], default=S)
    if "data" in keys:
        p.add_argument("--data", default=S, help="dataset directory from gen-data")
    if "loss" in keys:
        p.add_argument("--loss", choices=["crps", "nll"], default=S)
    if "projector" in keys:
        p.add_argument("--projector", choices=["none", "orthogonal", "oblique", "nonlinear"], default=S)
    if "tv_weight" in keys:
        p.add_argument("--tv-weight", type=float, default=S)
    if "q_mode" in keys:
        p.add_argument("--q-mode", choices=["identity", "inv_variance_diag"], default=S)
    if "lr" in keys:
        p.add_argument("--lr", type=float, default=S)
    if "momentum" in keys:
        p.add_argument("--momentum", type=float, default=S)
    if "epochs" in keys:
        p.add_argument("--epochs", type=int, default=S)
    if "degree" in keys:
        p.add_argument("--degree", type=int, default=S)
    if "mc_samples" in keys:
        p.add_argument("--mc-samples", type=int, default=S)
    if "repeats" in keys:
        p.add_argument("--repeats", type=int, default=S)
    if "newton_tol" in keys:
        p.add_argument("--newton-tol", type=float, default=S)
    if "newton_max_iter" in keys:
        p.add_argument("--newton-max-iter", type=int, default=S)
    if "dirichlet" in keys:
        p.add_argument("--dirichlet", action="store_true", default=S)
    if "checkpoint" in keys:
        p.add_argument("--checkpoint", default=S)
    if "input" in keys:
        p.add_argument("--input", default=S, help="sample matrix (.csv or .bin), one row per vector")
    if "constraint" in keys:
        p.add_argument("--constraint", default=S, help="JSON constraint spec")
    if "hierarchy" in keys:
        p.add_argument("--hierarchy", default=S, help="summation-matrix CSV")
    if "weights" in keys:
        p.add_argument("--weights", default=S, help="per-coordinate variances for inv_variance_diag Q")
    if "output" in keys:
        p.add_argument("--output", default=S, help="output file name inside --out")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")


def build_parser():
    parser = argparse.ArgumentParser(prog="dpplkit", description="Probabilistic projection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        _add_common(sub.add_parser(name), keys)
    return parser


def resolve_config(command, ns):
    """Defaults < config file < explicit flags; unknown config keys rejected."""
    allowed = COMMAND_KEYS[command]
    cfg = {k: DEFAULTS[k] for k in sorted(allowed)}
    flags = vars(ns).copy()
    flags.pop("command", None)
    out_dir = flags.pop("out", None)
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = fio.read_json(path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        loaded.pop("command", None)
        file_out = loaded.pop("out", None)
        if out_dir is None:
            out_dir = file_out
        unknown = set(loaded) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    cfg["out"] = out_dir if out_dir is not None else "."
    return cfg


def _grid(spec):
    try:
        nt, nx = (int(v) for v in str(spec).lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like NTxNX, got {spec!r}") from None
    return nt, nx


def _echo(out, command, cfg):
    echo = dict(cfg)
    echo["command"] = command
    fio.write_json(Path(out) / "config.json", echo)


def save_dataset(ds, out, fmt="bin"):
    out = Path(out)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    files = []
    for i, f in enumerate(ds.fields):
        name = f"fields/sample_{i:04d}.{fmt}"
        if fmt == "bin":
            fio.write_array_bin(out / name, f)
        else:
            fio.write_csv(out / name, f)
        files.append(name)
    manifest = {
        "kind": ds.kind,
        "n_samples": int(ds.params.size),
        "nt": ds.nt,
        "nx": ds.nx,
        "x_grid": ds.x_grid,
        "t_grid": ds.t_grid,
        "params": ds.params,
        "param_range": list(ds.param_range),
        "seed": ds.seed,
        "prng": ds.prng,
        "split": {"train": ds.train_idx, "test": ds.test_idx},
        "format": fmt,
        "files": files,
    }
    fio.write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(path):
    path = Path(path)
    man = fio.read_json(path / "manifest.json")
    fields = np.stack([fio.read_matrix(path / f) for f in man["files"]])
    return PdeDataset(
        kind=man["kind"],
        params=np.asarray(man["params"], dtype=float),
        x_grid=np.asarray(man["x_grid"], dtype=float),
        t_grid=np.asarray(man["t_grid"], dtype=float),
        fields=fields,
        train_idx=np.asarray(man["split"]["train"], dtype=int),
        test_idx=np.asarray(man["split"]["test"], dtype=int),
        seed=int(man["seed"]),
        prng=man.get("prng", PRNG_NAME),
        param_range=tuple(man["param_range"]),
    )


def _dataset_from(cfg):
    if cfg.get("data"):
        return load_dataset(cfg["data"])
    nt, nx = _grid(cfg["grid"])
    seed = cfg.get("data_seed")
    seed = cfg["seed"] if seed is None else seed
    return gen_dataset(cfg["kind"], cfg["n"], cfg["param_range"], nt, nx, cfg["split"], seed)


def _projector_from(cfg, ds):
    base = ProjectionConfig(
        q_mode=cfg.get("q_mode") or "identity",
        newton_max_iter=int(cfg["newton_max_iter"]),
        newton_tol=float(cfg["newton_tol"]),
        jacobian="gauss_newton",
        backtrack=True,
    )
    mode = cfg["projector"]
    if mode in ("orthogonal", "oblique") and cfg.get("q_mode"):
        expected = "identity" if mode == "orthogonal" else "inv_variance_diag"
        if cfg["q_mode"] != expected:
            raise ConfigError(f"--projector {mode} implies --q-mode {expected}")
    return pde_projector(ds, mode, base, dirichlet=bool(cfg.get("dirichlet")))


def _train_config(cfg, ds, epochs=None):
    return TrainConfig(
        loss=cfg["loss"],
        projector=_projector_from(cfg, ds),
        tv_weight=float(cfg["tv_weight"]),
        lr=float(cfg["lr"]),
        momentum=float(cfg["momentum"]),
        epochs=int(cfg["epochs"] if epochs is None else epochs),
        seed=int(cfg["seed"]),
    )


def _new_model(cfg, ds):
    n = ds.eval_slices().size * ds.nx
    bias = ds.targets(ds.train_idx).mean(axis=0) if len(ds.train_idx) else None
    return AffineBaseModel.init(n, int(cfg["degree"]), ds.param_range, seed=int(cfg["seed"]), bias=bias)


def cmd_gen_data(cfg):
    nt, nx = _grid(cfg["grid"])
    ds = gen_dataset(cfg["kind"], cfg["n"], cfg["param_range"], nt, nx, cfg["split"], cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out, cfg["format"])
    _echo(out, "gen-data", cfg)
    return {"train": len(ds.train_idx), "test": len(ds.test_idx)}


def cmd_train(cfg):
    ds = _dataset_from(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(cfg, ds)
    model, report = train(_new_model(cfg, ds), ds, tcfg)
    rep = report.to_dict()
    rep["prng"] = PRNG_NAME
    fio.write_json(out / "report.json", rep)
    fio.write_json(out / "checkpoint.json", {"model": model.to_dict(), "config": dict(cfg), "train": tcfg.to_dict()})
    _echo(out, "train", cfg)
    return rep["test"]


def cmd_eval(cfg):
    if not cfg.get("checkpoint"):
        raise ConfigError("eval needs --checkpoint")
    ck = fio.read_json(cfg["checkpoint"])
    model = AffineBaseModel.from_dict(ck["model"])
    trained = ck.get("config", {})
    merged = dict(cfg)
    for key in ("data", "kind", "n", "seed", "grid", "param_range", "split", "data_seed"):
        # Unless overridden, evaluate on the data the model was trained on.
        if key in trained and (key not in cfg or cfg[key] == DEFAULTS.get(key)):
            merged[key] = trained[key]
    for key in ("projector", "q_mode", "dirichlet"):
        if cfg.get(key) == DEFAULTS.get(key) and key in trained:
            merged[key] = trained[key]
    ds = _dataset_from(merged)
    proj = _projector_from(merged, ds)
    report = evaluate_model(model, ds, proj)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    batch, mu, s = predict_batch(model, ds, ds.test_idx, proj)
    sd = np.sqrt(np.maximum(s, 0.0))
    crps = crps_gaussian(mu, sd, batch.y)
    times = ds.eval_times()
    rows = []
    for b, i in enumerate(ds.test_idx):
        for k, t in enumerate(times):
            for j, x in enumerate(ds.x_grid):
                c = k * ds.nx + j
                rows.append([i, t, x, mu[b, c], mu[b, c] - 3 * sd[b, c], mu[b, c] + 3 * sd[b, c], batch.y[b, c], crps[b, c]])
    fio.write_csv(out / "bands.csv", np.array(rows), header=["sample", "t", "x", "mean", "lo3", "hi3", "truth", "crps"])
    rep = report.to_dict()
    rep["prng"] = PRNG_NAME
    fio.write_json(out / "eval_report.json", rep)
    _echo(out, "eval", merged)
    return {"mse": report.mse, "ce_mean": report.ce_mean, "crps": report.crps}


def _read_constraint(cfg, n):
    if cfg.get("hierarchy"):
        return cons.hierarchy_constraint(cons.load_summation_matrix(cfg["hierarchy"]))
    if not cfg.get("constraint"):
        raise ConfigError("project needs --constraint or --hierarchy")
    spec = fio.read_json(cfg["constraint"])
    t = spec.get("type")
    if t == "linear":
        return cons.LinearEquality(np.asarray(spec["A"], dtype=float), np.asarray(spec["b"], dtype=float))
    if t == "hierarchy":
        S = spec["S"] if "S" in spec else cons.load_summation_matrix(spec["csv"])
        return cons.hierarchy_constraint(S)
    if t == "sphere":
        r = float(spec.get("radius", 1.0))
        c = np.asarray(spec.get("center", np.zeros(n)), dtype=float)
        return cons.NonlinearEquality(
            q=1, n=n, h=lambda u: np.array([np.sum((u - c) ** 2) - r * r]),
            jac_h=lambda u: 2.0 * (u - c)[None, :],
            hess_lag=lambda u, lam: 2.0 * lam[0] * np.eye(n), name="sphere",
        )
    if t == "box":
        return cons.BoxBounds(spec["lo"], spec["hi"])
    raise ConfigError(f"unknown constraint type {t!r}")


def cmd_project(cfg):
    if not cfg.get("input"):
        raise ConfigError("project needs --input")
    X = fio.read_matrix(cfg["input"])
    c = _read_constraint(cfg, X.shape[1])
    pcfg = ProjectionConfig(
        q_mode=cfg.get("q_mode") or "identity",
        newton_max_iter=int(cfg["newton_max_iter"]),
        newton_tol=float(cfg["newton_tol"]),
        backtrack=True,
    )
    Q = None
    if pcfg.q_mode == "inv_variance_diag":
        var = fio.read_matrix(cfg["weights"]).reshape(-1) if cfg.get("weights") else X.var(axis=0, ddof=1)
        if np.any(var <= 0):
            raise ConfigError("inverse-variance Q needs positive variances")
        Q = 1.0 / var
    Y = project_samples(X, Q, c, pcfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    name = cfg.get("output") or ("projected" + (".bin" if str(cfg["input"]).endswith(".bin") else ".csv"))
    fio.write_matrix(out / name, Y)
    ce = [0.0 if isinstance(c, cons.BoxBounds) else float(np.sum(np.square(c.h(r)))) for r in Y]
    fio.write_json(out / "project_report.json", {"rows": int(Y.shape[0]), "ce_max": max(ce), "ce_mean": float(np.mean(ce))})
    _echo(out, "project", cfg)
    return {"rows": int(Y.shape[0]), "ce_max": max(ce)}


def machine_descriptor():
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "threads": os.environ.get("DPPL_THREADS"),
    }


def cmd_bench(cfg):
    ds = _dataset_from(cfg)
    tcfg = _train_config(cfg, ds, epochs=1)
    closed, sampled = train_timing_compare(
        _new_model(cfg, ds), ds, tcfg, int(cfg["mc_samples"]), int(cfg["repeats"]), int(cfg["seed"])
    )
    res = {
        "closed_form_s_per_epoch": closed,
        "sampling_s_per_epoch": sampled,
        "ratio": sampled / closed,
        "mc_samples": int(cfg["mc_samples"]),
        "seed": int(cfg["seed"]),
        "prng": PRNG_NAME,
        "machine": machine_descriptor(),
    }
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fio.write_json(out / "bench.json", res)
    _echo(out, "bench", cfg)
    return res


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "project": cmd_project,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def _exit_code(exc):
    if isinstance(exc, (ConvergenceError, ProjectionFailure, DivergenceError, GradientUndefinedError)):
        return EXIT_NUMERIC
    if isinstance(exc, (InvalidArgumentError, KeyError, TypeError, ValueError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, DpplError):
        return EXIT_NUMERIC
    raise exc


def run(argv):
    ns = build_parser().parse_args(argv)
    cfg = resolve_config(ns.command, ns)
    return COMMANDS[ns.command](cfg)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    threads = os.environ.get("DPPL_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                result = run(argv)
        else:
            result = run(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"dpplkit: error: {exc}", file=sys.stderr)
        return code
    print(fio.dumps_json(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
