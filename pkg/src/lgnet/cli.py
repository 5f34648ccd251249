"""Command-line entry point: ``lgnet generate | train | eval | verify-solver``.

Every command reads an optional JSON config (``--config``), applies dotted
overrides such as ``--optimizer.epochs 200`` and writes its artifacts under
``--out``. Failures print one JSON object ``{"error": code, "message": ...}``
to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import DatasetError, generate_dataset, load_dataset, save_dataset
from .nn import CheckpointError, Network, NetworkConfig, build_network
from .optim import OptimizerConfig
from .solvers import BURGERS, CDE, HELMHOLTZ, ProblemSpec, SolverError, manufactured_forcing, solve
from .spectral import gauss_lobatto, modal_basis
from .training import TrainingError, WeakFormConfig, evaluate, train

COMMANDS = ("generate", "train", "eval", "verify-solver")
VERIFY_MODES = (8, 16, 32, 48)

DEFAULTS = {
    "problem": {"kind": CDE, "epsilon": 0.1, "k_u": 3.5},
    "data": {"n": 1000, "P": 64, "n_modes": None, "normalize": False, "family": None, "train": None, "test": None},
    "network": {"arch": "linear", "blocks": 0, "filters": 32, "kernel_size": 5, "init_seed": None},
    "optimizer": {"kind": "lbfgs", "epochs": 5000, "history": 10, "max_linesearch": 25, "tol_grad": 1e-12,
                  "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "batch_size": None},
    "weak_form": {"num_test_functions": None, "weight": 1.0},
    "train": {"log_every": 500},
    "eval": {"checkpoint": None, "dataset": None, "pointwise_samples": 4},
    "verify": {"n_modes": list(VERIFY_MODES), "picard_tol": 1e-9},
}


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise CLIError("invalid_config", f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CLIError("invalid_config", f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


@dataclass
class RunConfig:
    """A complete, JSON-serializable description of one command invocation."""

    command: str
    out: str | None = None
    seed: int = 0
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise CLIError("invalid_config", f"unknown command {self.command!r}")

    def __getitem__(self, section):
        return self.sections[section]

    def to_dict(self) -> dict:
        return {"command": self.command, "out": self.out, "seed": self.seed, **copy.deepcopy(self.sections)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, command: str | None = None) -> "RunConfig":
        d = copy.deepcopy(d)
        cmd = command or d.pop("command", None)
        d.pop("command", None)
        if cmd is None:
            raise CLIError("invalid_config", "config names no command")
        cfg = cls(cmd, d.pop("out", None), d.pop("seed", 0))
        _merge(cfg.sections, d)
        return cfg

    @classmethod
    def from_json(cls, text: str, command: str | None = None) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CLIError("invalid_config", f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise CLIError("invalid_config", "config must be a JSON object")
        return cls.from_dict(d, command)

    def set_dotted(self, key: str, value):
        if key in ("out", "seed"):
            setattr(self, key, value)
            return
        parts = key.split(".")
        node = self.sections
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise CLIError("invalid_config", f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise CLIError("invalid_config", f"unknown config key {key!r}")
        node[parts[-1]] = value

    def problem_spec(self) -> ProblemSpec:
        p = self["problem"]
        try:
            if p["kind"] == HELMHOLTZ:
                return ProblemSpec.helmholtz(p["k_u"])
            return ProblemSpec(p["kind"], epsilon=p["epsilon"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CLIError("invalid_config", f"bad problem: {exc}") from exc

    def optimizer_config(self) -> OptimizerConfig:
        o = dict(self["optimizer"])
        try:
            return OptimizerConfig(shuffle_seed=int(self.seed), **o)
        except (TypeError, ValueError) as exc:
            raise CLIError("invalid_config", f"bad optimizer settings: {exc}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_overrides(extra):
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise CLIError("invalid_config", f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise CLIError("invalid_config", f"override {tok} needs a value")
            raw = extra[i + 1]
            i += 2
        pairs.append((key, _parse_value(raw)))
    return pairs


def build_config(args, extra) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CLIError("missing_path", f"config file {path} does not exist")
        cfg = RunConfig.from_json(path.read_text(encoding="utf-8"), args.command)
    else:
        cfg = RunConfig(args.command)
    for key, value in _parse_overrides(extra):
        cfg.set_dotted(key, value)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or not 0 <= cfg.seed < 2**64:
        raise CLIError("invalid_config", f"seed must be an unsigned 64-bit integer, got {cfg.seed!r}")
    if cfg.command != "verify-solver" and not cfg.out:
        raise CLIError("invalid_config", f"{cfg.command} needs --out")
    return cfg


def _require_dir(value, what):
    if not value:
        raise CLIError("invalid_config", f"{what} path is not set")
    path = Path(value)
    if not path.is_dir():
        raise CLIError("missing_path", f"{what} directory {path} does not exist")
    return path


def _summary(msg):
    print(msg, flush=True)


def cmd_generate(cfg: RunConfig) -> Path:
    d = cfg["data"]
    problem = cfg.problem_spec()
    ds = generate_dataset(problem, int(d["n"]), int(d["P"]), d["n_modes"], seed=cfg.seed,
                          normalize=bool(d["normalize"]), family=d["family"])
    out = save_dataset(ds, cfg.out)
    res = ds.extra.get("max_solver_residual", 0.0)
    line = (f"generated n={ds.n} P={ds.P} n_modes={ds.n_modes} problem={problem.kind} max_solver_residual={res:.3e} "
            f"weak_form_mse={ds.extra.get('weak_form_mse', 0.0):.3e}")
    if "max_picard_iterations" in ds.extra:
        line += f" max_picard_iterations={ds.extra['max_picard_iterations']}"
    _summary(line)
    return out


def _network_config(cfg: RunConfig, ds) -> NetworkConfig:
    n = cfg["network"]
    seed = cfg.seed if n["init_seed"] is None else int(n["init_seed"])
    try:
        return NetworkConfig(n["arch"], ds.P, ds.n_modes, blocks=int(n["blocks"]), filters=int(n["filters"]),
                             kernel_size=int(n["kernel_size"]), init_seed=seed)
    except ValueError as exc:
        raise CLIError("invalid_config", f"bad network settings: {exc}") from exc


def cmd_train(cfg: RunConfig) -> Path:
    train_dir = _require_dir(cfg["data"]["train"], "data.train")
    test_dir = _require_dir(cfg["data"]["test"], "data.test")
    opt = cfg.optimizer_config()
    train_ds, test_ds = load_dataset(train_dir), load_dataset(test_dir)
    if (train_ds.P, train_ds.n_modes, train_ds.problem) != (test_ds.P, test_ds.n_modes, test_ds.problem):
        raise CLIError("shape_mismatch", "train and test datasets differ in P, n_modes or problem")
    net = build_network(_network_config(cfg, train_ds))
    w = cfg["weak_form"]
    wf = WeakFormConfig(train_ds.problem, train_ds.basis(), train_ds.rule(), w["num_test_functions"],
                        weight=float(w["weight"]))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    arch = net.describe()
    (out / "architecture.txt").write_text(arch + "\n", encoding="utf-8")
    _summary(f"training {arch}")
    initial = net.get_flat()
    every = int(cfg["train"]["log_every"] or 0)

    def progress(epoch, trace):
        if every > 0 and epoch % every == 0:
            _, total, _, _, _, rel = trace.rows[-1]
            _summary(f"epoch {epoch} train_total={total:.6e} test_mean_rel_l2={rel:.6e}")

    try:
        trace = train(net, train_ds, test_ds, opt, wf, callback=progress)
    except TrainingError as exc:
        exc.trace.save_csv(out / "trace.csv")
        raise
    trace.save_csv(out / "trace.csv")
    net.save(out / "checkpoint_final")
    final = net.get_flat()
    net.set_flat(trace.best_params if trace.best_params is not None else initial)
    net.save(out / "checkpoint_best")
    net.set_flat(final)
    if trace.rows:
        last = trace.rows[-1]
        _summary(f"epochs={len(trace)} final_test_mean_rel_l2={last[-1]:.6e} "
                 f"best_epoch={trace.best_epoch} best_test_mean_rel_l2={trace.best_test_rel_l2:.6e} "
                 f"fallbacks={len(trace.fallback_epochs)}")
    else:
        _summary("epochs=0")
    return out


def _fmt(v) -> str:
    return format(float(v), ".17g")


def cmd_eval(cfg: RunConfig) -> Path:
    e = cfg["eval"]
    ckpt = _require_dir(e["checkpoint"], "eval.checkpoint")
    ds_dir = _require_dir(e["dataset"], "eval.dataset")
    net = Network.load(ckpt)
    ds = load_dataset(ds_dir)
    c = net.config
    if (c.input_len, c.output_len) != (ds.P, ds.n_modes):
        raise CLIError("shape_mismatch", f"checkpoint maps {c.input_len} -> {c.output_len} values but the dataset "
                                         f"has P={ds.P}, n_modes={ds.n_modes}")
    k = int(e["pointwise_samples"])
    m = evaluate(net, ds, pointwise_samples=k)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = m.to_dict()
    metrics["problem"] = ds.problem.to_dict()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    excluded = set(m.excluded)
    kept = iter(m.per_sample_rel_l2)
    lines = ["sample,rel_l2"]
    for i in range(ds.n):
        lines.append(f"{i},nan" if i in excluded else f"{i},{_fmt(next(kept))}")
    (out / "histogram.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    x = ds.rule().nodes
    pw = m.pointwise_errors
    header = ["x"] + [f"sample_{i}" for i in range(pw.shape[0])]
    rows = [",".join(header)]
    for j in range(ds.P):
        rows.append(",".join([_fmt(x[j])] + [_fmt(pw[i, j]) for i in range(pw.shape[0])]))
    (out / "pointwise.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _summary(f"evaluated n={ds.n} mean_rel_l2={m.mean_rel_l2:.6e} median_rel_l2={m.median_rel_l2:.6e} "
             f"max_rel_l2={m.max_rel_l2:.6e} mean_mae={m.mean_mae:.6e}")
    return out


def _manufactured_cases():
    s, c = np.sin, np.cos
    pi = np.pi
    return [
        (ProblemSpec.cde(1.0), "sin", lambda x: s(pi * x), lambda x: pi * c(pi * x), lambda x: -pi**2 * s(pi * x)),
        (ProblemSpec.helmholtz(3.5), "cos", lambda x: c(pi * x), lambda x: -pi * s(pi * x),
         lambda x: -pi**2 * c(pi * x)),
        (ProblemSpec.helmholtz(3.5), "constant", lambda x: np.ones_like(x), np.zeros_like, np.zeros_like),
        (ProblemSpec.burgers(0.5), "sin", lambda x: s(pi * x), lambda x: pi * c(pi * x),
         lambda x: -pi**2 * s(pi * x)),
    ]


# (problem, case) -> (smallest n_modes the bound applies from, bound)
VERIFY_BOUNDS = {
    (CDE, "sin"): (32, 1e-12),
    (HELMHOLTZ, "cos"): (32, 1e-10),
    (HELMHOLTZ, "constant"): (0, 1e-14),
    (BURGERS, "sin"): (32, 1e-8),
}


def verify_solver(n_modes_list=VERIFY_MODES, picard_tol=1e-9):
    """Manufactured-solution sweep; returns rows ``(problem, case, n_modes, P, error, iterations, bound)``."""
    rows = []
    for problem, case, u, du, d2u in _manufactured_cases():
        for n in n_modes_list:
            n = int(n)
            rule = gauss_lobatto(n + 2)
            basis = modal_basis(problem.bc, n, rule)
            f = manufactured_forcing(problem, u, du, d2u, rule)
            kw = {"tol": picard_tol} if problem.kind == BURGERS else {}
            sol = solve(problem, f, basis, rule, **kw)
            err = float(np.max(np.abs(sol.nodal_values - u(rule.nodes))))
            start, bound = VERIFY_BOUNDS[(problem.kind, case)]
            rows.append((problem.kind, case, n, rule.num_points, err, sol.iterations, bound if n >= start else None))
    return rows


def cmd_verify_solver(cfg: RunConfig):
    v = cfg["verify"]
    rows = verify_solver(v["n_modes"], float(v["picard_tol"]))
    lines = ["problem,case,n_modes,P,max_error,iterations,bound,pass"]
    failed = []
    for kind, case, n, P, err, its, bound in rows:
        ok = bound is None or err <= bound
        if not ok:
            failed.append(f"{kind}/{case} n_modes={n}: {err:.3e} > {bound:.0e}")
        lines.append(f"{kind},{case},{n},{P},{_fmt(err)},{its},{'' if bound is None else format(bound, 'g')},"
                     f"{int(ok)}")
    text = "\n".join(lines) + "\n"
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "convergence.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if failed:
        raise CLIError("spectral_decay_violation", "; ".join(failed))
    return rows


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "verify-solver": cmd_verify_solver}


def _parser():
    p = argparse.ArgumentParser(prog="lgnet", description=__doc__.splitlines()[0],
                                epilog="Any config field can be overridden as --section.key VALUE (JSON-parsed).")
    p.add_argument("--version", action="version", version=f"lgnet {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    return p


def _fail(code, message) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": str(message)}) + "\n")
    return 1


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    threads = os.environ.get("LGNET_THREADS")
    try:
        cfg = build_config(args, extra)
        limit = max(1, int(threads)) if threads else None
        with threadpool_limits(limits=limit):
            HANDLERS[cfg.command](cfg)
    except CLIError as exc:
        return _fail(exc.code, exc)
    except TrainingError as exc:
        return _fail(exc.code, f"{exc} (epoch {exc.epoch})")
    except (DatasetError, CheckpointError, SolverError) as exc:
        return _fail(exc.code, exc)
    except ValueError as exc:
        if threads and not threads.isdigit():
            return _fail("invalid_config", f"LGNET_THREADS must be a positive integer, got {threads!r}")
        return _fail("invalid_config", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
