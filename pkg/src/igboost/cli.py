"""Command-line front end: ``igboost <subcommand> [options]``.

Every output file starts with the experiment configuration (a ``# config:``
line in CSVs, a ``"config"`` key in JSON). The output directory and the
worker count are left out of that echo, so reruns with any number of
workers produce byte-identical files.

Exit codes: 0 success, 1 failed check, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boosting import BoostState, run_chain
from .core import Config, Dataset, DatasetError, LossDomainError, generate_sine_dataset, responses_for_loss
from .infinitesimal import euler_integrate, lambda_sweep, long_time_diagnostics
from .measure import (
    Ensemble,
    UnsupportedNorm,
    face_decompose,
    jordan_split,
    l2_norm,
    sup_norm,
    to_measure,
    tv_norm,
)
from .rng import RngStream
from .tree import FittedTree, grow_trees

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


# --------------------------------------------------------------------------- #
# Experiment configuration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ExperimentConfig:
    """Tree/boosting config plus data source and subcommand parameters."""

    config: Config = field(default_factory=Config)
    data: str = "sine"  # "sine" or a CSV path
    n: int = 100
    sigma: float = 0.1
    data_seed: int = 0
    scale: bool = False
    replicates: int = 100
    t_end: float = 5.0
    h: float = 0.05
    B: int = 50
    init: float | None = None
    lambdas: tuple[float, ...] = (0.2, 0.1, 0.05, 0.025, 0.0125)
    replications: int = 20
    h_ref: float | None = None
    B_ref: int = 200
    grid: float = 0.1
    snapshot_times: tuple[float, ...] = ()
    out: str = "out"
    workers: int = 1

    def to_dict(self, echo: bool = False) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "config"}
        d["lambdas"] = list(self.lambdas)
        d["snapshot_times"] = list(self.snapshot_times)
        d = {**self.config.to_dict(), **d}
        if echo:
            del d["out"], d["workers"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(Config)}
        cfg = Config.from_dict({k: d.pop(k) for k in list(d) if k in names})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InputError(f"unknown configuration keys: {', '.join(unknown)}")
        for key in ("lambdas", "snapshot_times"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(config=cfg, **d)

    def echo_json(self) -> str:
        return json.dumps(self.to_dict(echo=True), sort_keys=True)


def _comment(ec: ExperimentConfig) -> str:
    return f"config: {ec.echo_json()}"


def _write_json(path: Path, payload: dict, ec: ExperimentConfig) -> None:
    payload = {"config": ec.to_dict(echo=True), **payload}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_dataset(ec: ExperimentConfig) -> Dataset:
    if ec.data == "sine":
        ds = generate_sine_dataset(ec.n, ec.sigma, ec.data_seed)
        return ds.with_responses(responses_for_loss(ds.y, ec.config.loss))
    return Dataset.from_csv(ec.data, scale=ec.scale)


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_fit_tree(ec: ExperimentConfig, executor=None) -> int:
    """R softmax regression trees on the centred responses, sampled on a grid."""
    ds = load_dataset(ec)
    out = Path(ec.out)
    (out / "atoms").mkdir(parents=True, exist_ok=True)
    R = int(ec.replicates)
    if R < 1:
        raise InputError("replicates must be >= 1")
    v = ds.y - ds.y.mean()
    batch, _ = grow_trees(ds.X, v, -v, np.ones(ds.n), ec.config, RngStream(ec.config.seed).child(0),
                          np.arange(R), executor=executor)
    if ds.p == 1:
        X = np.linspace(0.0, 1.0, 1000)[:, None]
    else:
        X = ds.X
    pred = batch.predict(X)
    mean = pred.mean(axis=0)
    with (out / "trees.csv").open("w", newline="") as fh:
        fh.write(f"# {_comment(ec)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(ds.p)] + [f"tree_{i + 1}" for i in range(R)] + ["mean"])
        for k in range(X.shape[0]):
            w.writerow([repr(float(c)) for c in X[k]] + [repr(float(c)) for c in pred[:, k]]
                       + [repr(float(mean[k]))])
    for i in range(R):
        to_measure(batch.tree(i)).to_csv(out / "atoms" / f"tree_{i + 1:03d}.csv", _comment(ec))
    _write_json(out / "trees.json", {"trees": [t.to_dict() for t in batch]}, ec)
    return EXIT_OK


def _model_payload(state: BoostState) -> dict:
    return {"step": state.step, "ensemble": state.ensemble.to_dict(),
            "fitted_values": [float(v) for v in state.fitted_values]}


def _resume_state(path: str, ds: Dataset) -> tuple[BoostState, dict]:
    try:
        d = json.loads(Path(path).read_text())
        ens = Ensemble.from_dict(d["ensemble"])
        step = int(d["step"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: cannot read model ({exc})") from None
    if ens.p != ds.p:
        raise InputError(f"{path}: model has p={ens.p}, data has p={ds.p}")
    F = np.asarray(d.get("fitted_values") or ens.predict(ds.X), dtype=np.float64)
    if F.shape != (ds.n,):
        raise InputError(f"{path}: model was fitted on {F.shape[0]} samples, data has {ds.n}")
    return BoostState(ens, F, step), d.get("config", {})


def _beta_tag(beta: float) -> str:
    return "inf" if math.isinf(beta) else repr(beta)


def cmd_boost(ec: ExperimentConfig, betas=None, resume: str | None = None, executor=None) -> int:
    """Boosting chain(s): one trajectory CSV and one model JSON per beta."""
    out = Path(ec.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(ec)
    betas = [ec.config.beta] if not betas else list(betas)
    multi = len(betas) > 1
    for beta in betas:
        run_ec = dataclasses.replace(ec, config=ec.config.replace(beta=beta))
        state = None
        if resume is not None:
            state, _ = _resume_state(resume, ds)
        state, rec = run_chain(ds, run_ec.config, state=state, snapshot_times=ec.snapshot_times)
        suffix = f"_beta{_beta_tag(beta)}" if multi else ""
        rec.to_csv(out / f"trajectory{suffix}.csv", _comment(run_ec))
        payload = _model_payload(state)
        payload["snapshots"] = {repr(t): e.to_dict() for t, e in sorted(rec.snapshots.items())}
        _write_json(out / f"model{suffix}.json", payload, run_ec)
    return EXIT_OK


def relaxation_check(h: float, t_end: float = 5.0, y: float = 1.0, F0: float = 0.0) -> tuple[bool, float]:
    """Euler on one sample against y + (F0 - y) e^-t; passes when max error <= 2h."""
    ds = Dataset([[0.5]], [y])
    traj = euler_integrate(ds, Config(lam=h), t_end, h, 1, init=F0)
    t = np.asarray(traj.times)
    F = np.array([f[0] for f in traj.fitted])
    err = float(np.max(np.abs(F - (y + (F0 - y) * np.exp(-t)))))
    return err <= 2 * h, err


def cmd_igb(ec: ExperimentConfig, check_relaxation: bool = False, executor=None) -> int:
    """Euler integration of the boosting ODE plus long-time diagnostics."""
    out = Path(ec.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(ec)
    traj = euler_integrate(ds, ec.config, ec.t_end, ec.h, ec.B, init=ec.init, executor=executor)
    traj.to_csv(out / "trajectory.csv", _comment(ec))
    rep = long_time_diagnostics(traj)
    rel_res, rel_err = rep.relative_final()
    payload = {"monotone": rep.monotone, "increases_at_step": rep.increases,
               "final_relative_max_residual": rel_res, "final_relative_train_error": rel_err,
               "steps": len(traj) - 1}
    status = EXIT_OK
    if check_relaxation:
        ok, err = relaxation_check(ec.h, ec.t_end if ec.t_end > 0 else 5.0)
        payload["relaxation_check"] = {"pass": ok, "max_error": err, "bound": 2 * ec.h}
        print(f"relaxation check: {'PASS' if ok else 'FAIL'} max_error={err:.3e} bound={2 * ec.h:.3e}")
        status = EXIT_OK if ok else EXIT_CHECK
    _write_json(out / "diagnostics.json", payload, ec)
    return status


def cmd_sweep(ec: ExperimentConfig, executor=None) -> int:
    """Learning-rate sweep against an Euler reference: JSON report and log-log CSV."""
    out = Path(ec.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(ec)
    rep = lambda_sweep(ds, ec.config, ec.lambdas, ec.t_end, ec.replications, h_ref=ec.h_ref,
                       B_ref=ec.B_ref, grid=ec.grid, executor=executor)
    _write_json(out / "sweep.json", rep.to_dict(), ec)
    with (out / "loglog.csv").open("w", newline="") as fh:
        fh.write(f"# {_comment(ec)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "log_lambda", "median_error", "log_median_error"])
        for lam, e in zip(rep.lambdas, rep.per_lambda_median_error):
            w.writerow([repr(lam), repr(math.log(lam)), repr(e), repr(math.log(e)) if e > 0 else "-inf"])
    if rep.slope is not None:
        print(f"slope {rep.slope:.4f} intercept {rep.intercept:.4f}")
    return EXIT_OK


def load_model(path: str):
    """A tree, an ensemble, or a boost/igb model file wrapping an ensemble."""
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    try:
        if "ensemble" in d:
            return Ensemble.from_dict(d["ensemble"])
        if "blocks" in d:
            return Ensemble.from_dict(d)
        if "nodes" in d:
            tree = FittedTree.from_dict(d)
            if tree.value is None:
                raise InputError(f"{path}: tree has no leaf values")
            return tree
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed model ({exc})") from None
    raise InputError(f"{path}: not a tree or ensemble model")


def _face_name(J: tuple[int, ...]) -> str:
    return "face_" + ("_".join(str(j + 1) for j in J) if J else "empty")


def cmd_decompose(ec: ExperimentConfig, model: str) -> int:
    """Atoms, Jordan parts, face components and a norms summary of a model."""
    obj = load_model(model)
    out = Path(ec.out)
    out.mkdir(parents=True, exist_ok=True)
    c = _comment(ec)
    mu = to_measure(obj)
    mu.to_csv(out / "atoms.csv", c)
    pos, neg = jordan_split(mu)
    pos.to_csv(out / "jordan_positive.csv", c)
    neg.to_csv(out / "jordan_negative.csv", c)
    faces = face_decompose(mu)
    for J, part in faces.items():
        part.to_csv(out / f"{_face_name(J)}.csv", c)
    summary = {
        "model": str(model),
        "p": mu.p,
        "n_atoms": len(mu),
        "tv": tv_norm(mu),
        "tv_positive": tv_norm(pos),
        "tv_negative": tv_norm(neg),
        "face_tv": {_face_name(J): tv_norm(part) for J, part in faces.items()},
        "face_atoms": {_face_name(J): len(part) for J, part in faces.items()},
    }
    try:
        summary["sup"] = sup_norm(obj)
    except UnsupportedNorm as exc:
        summary["sup"] = None
        summary["sup_note"] = str(exc)
    try:
        summary["l2_nu"] = l2_norm(mu)
    except UnsupportedNorm as exc:
        summary["l2_nu"] = None
        summary["l2_note"] = str(exc)
    _write_json(out / "norms.json", summary, ec)
    print(f"tv {summary['tv']!r}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="JSON file with configuration keys; flags override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--beta", type=_float_list, help="nonnegative, 'inf' for argmax; boost accepts a list")
    g.add_argument("--k", dest="K", type=int)
    g.add_argument("--depth", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--loss", choices=["squared", "bce", "exponential"])
    g.add_argument("--out")
    g.add_argument("--workers", type=int)
    d = common.add_argument_group("data")
    d.add_argument("--data", help="headerless CSV x1..xp,y (default: generated sine data)")
    d.add_argument("--scale", action="store_true", default=None, help="min-max scale CSV features")
    d.add_argument("--n", type=int)
    d.add_argument("--sigma", type=float)
    d.add_argument("--data-seed", dest="data_seed", type=int)

    parser = argparse.ArgumentParser(prog="igboost", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-tree", parents=[common], help="replicate softmax regression trees")
    p.add_argument("--replicates", type=int)

    p = sub.add_parser("boost", parents=[common], help="gradient boosting chain")
    p.add_argument("--resume", help="continue from a model JSON written by boost")
    p.add_argument("--snapshot-times", dest="snapshot_times", type=_float_list)

    p = sub.add_parser("igb", parents=[common], help="Euler integration of the boosting ODE")
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--h", type=float)
    p.add_argument("--B", type=int)
    p.add_argument("--init", type=float)
    p.add_argument("--check-relaxation", action="store_true")

    p = sub.add_parser("sweep", parents=[common], help="learning-rate convergence sweep")
    p.add_argument("--lambdas", type=_float_list)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--replications", type=int)
    p.add_argument("--h-ref", dest="h_ref", type=float)
    p.add_argument("--B-ref", dest="B_ref", type=int)
    p.add_argument("--grid", type=float)

    p = sub.add_parser("decompose", parents=[common], help="measure decomposition of a model")
    p.add_argument("model")
    return parser


_NON_CONFIG = {"command", "config", "resume", "check_relaxation", "model", "beta"}


def resolve_config(args: argparse.Namespace) -> tuple[ExperimentConfig, list[float] | None]:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"{args.config}: {exc.strerror}") from None
        except ValueError as exc:
            raise InputError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(base, dict):
            raise InputError(f"{args.config}: expected a JSON object")
    for key, value in vars(args).items():
        if key in _NON_CONFIG or value is None:
            continue
        base[key] = value
    betas = None
    if args.beta is not None:
        if len(args.beta) > 1 and args.command != "boost":
            raise InputError("only boost accepts several beta values")
        betas = list(args.beta)
        base["beta"] = betas[0]
    try:
        ec = ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from None
    if ec.workers < 1:
        raise InputError("workers must be >= 1")
    return ec, betas


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ec, betas = resolve_config(args)
        pool = ThreadPoolExecutor(ec.workers) if ec.workers > 1 else nullcontext()
        with pool as executor:
            if args.command == "fit-tree":
                return cmd_fit_tree(ec, executor)
            if args.command == "boost":
                return cmd_boost(ec, betas, args.resume, executor)
            if args.command == "igb":
                return cmd_igb(ec, args.check_relaxation, executor)
            if args.command == "sweep":
                return cmd_sweep(ec, executor)
            return cmd_decompose(ec, args.model)
    except (InputError, DatasetError, LossDomainError, ValueError) as exc:
        print(f"igboost: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
