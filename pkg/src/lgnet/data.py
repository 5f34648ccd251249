"""Random forcing families, dataset generation, normalization and on-disk format.

A dataset directory holds ``meta.json`` plus ``forcings.bin``,
``solutions.bin`` and ``coefficients.bin``: row-major little-endian float64.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .solvers import BURGERS, CDE, HELMHOLTZ, ProblemSpec, SolverError, solve
from .spectral import gauss_lobatto, modal_basis

FORMAT_VERSION = 1
LINEAR_TRIG = "linear_trig"
BURGERS_TRIG = "burgers_trig"
_BIN_FILES = ("forcings", "solutions", "coefficients")
_DTYPE = np.dtype("<f8")


class DatasetError(Exception):
    code = "dataset_error"


class MalformedHeaderError(DatasetError):
    code = "malformed_header"


class SizeMismatchError(DatasetError):
    code = "size_mismatch"


class InvariantViolationError(DatasetError):
    code = "invariant_violation"


class GenerationError(DatasetError):
    code = "generation_failure"

    def __init__(self, message, index, params):
        super().__init__(message)
        self.index = index
        self.params = params


@dataclass(frozen=True)
class LinearTrigParams:
    """``m1 sin(pi w1 x) + m2 cos(pi w2 x)``."""

    m1: float
    m2: float
    w1: float
    w2: float
    family = LINEAR_TRIG

    def __call__(self, x):
        return self.m1 * np.sin(np.pi * self.w1 * x) + self.m2 * np.cos(np.pi * self.w2 * x)


@dataclass(frozen=True)
class BurgersTrigParams:
    """``(3+v1) sin((1+v2) pi x) + (3+v3) cos((1+v4) pi x)`` with every ``v_i`` in [0, 2]."""

    v1: float
    v2: float
    v3: float
    v4: float
    family = BURGERS_TRIG

    def __post_init__(self):
        for name in ("v1", "v2", "v3", "v4"):
            v = getattr(self, name)
            if not 0.0 <= v <= 2.0:
                raise ValueError(f"{name}={v} outside [0, 2]")

    def __call__(self, x):
        return (3 + self.v1) * np.sin((1 + self.v2) * np.pi * x) + (3 + self.v3) * np.cos((1 + self.v4) * np.pi * x)


# Parameter laws, recorded verbatim in meta.json.
FORCING_DISTRIBUTIONS = {
    LINEAR_TRIG: {"m1": "normal(0,1)", "m2": "normal(0,1)", "w1": "uniform(0,2)", "w2": "uniform(0,2)"},
    BURGERS_TRIG: {"v1": "uniform(0,2)", "v2": "uniform(0,2)", "v3": "uniform(0,2)", "v4": "uniform(0,2)"},
}


def default_family(problem: ProblemSpec) -> str:
    return BURGERS_TRIG if problem.kind == BURGERS else LINEAR_TRIG


def sample_forcing(family: str, rng: np.random.Generator, x):
    """Draw forcing parameters from ``rng`` and evaluate them at ``x``."""
    if family == LINEAR_TRIG:
        m1, m2 = rng.standard_normal(2)
        w1, w2 = rng.uniform(0.0, 2.0, 2)
        params = LinearTrigParams(float(m1), float(m2), float(w1), float(w2))
    elif family == BURGERS_TRIG:
        params = BurgersTrigParams(*(float(v) for v in rng.uniform(0.0, 2.0, 4)))
    else:
        raise ValueError(f"unknown forcing family {family!r}")
    return params, params(np.asarray(x, dtype=np.float64))


def row_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, row) so row order never affects the bits."""
    return np.random.default_rng([int(seed), int(index)])


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or not self.std > 0:
            raise ValueError(f"normalization needs finite mean and positive std, got {self.mean}, {self.std}")

    @classmethod
    def of(cls, values) -> "NormStats":
        values = np.asarray(values)
        return cls(float(values.mean()), float(values.std()))

    def apply(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values) * self.std + self.mean


@dataclass(frozen=True)
class Dataset:
    """Forcing/solution pairs on a Gauss-Lobatto grid.

    When ``norm_stats`` is set, ``forcings`` holds normalized values and
    :meth:`physical_forcings` undoes it. Solutions and coefficients are
    always physical.
    """

    problem: ProblemSpec
    P: int
    n_modes: int
    forcings: np.ndarray
    solutions: np.ndarray
    coefficients: np.ndarray
    seed: int
    norm_stats: NormStats | None = None
    forcing_family: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.forcings.shape[0]

    def physical_forcings(self) -> np.ndarray:
        if self.norm_stats is None:
            return self.forcings
        return self.norm_stats.invert(self.forcings)

    def rule(self):
        return gauss_lobatto(self.P)

    def basis(self):
        return modal_basis(self.problem.bc, self.n_modes, self.rule())

    def normalized(self) -> "Dataset":
        """Copy with forcings rescaled to global mean 0 and std 1."""
        if self.norm_stats is not None:
            return self
        stats = NormStats.of(self.forcings)
        return replace(self, forcings=stats.apply(self.forcings), norm_stats=stats)

    def validate(self):
        """Raise :class:`InvariantViolationError` if any dataset invariant fails."""
        n = self.forcings.shape[0]
        for name, arr, width in (
            ("forcings", self.forcings, self.P),
            ("solutions", self.solutions, self.P),
            ("coefficients", self.coefficients, self.n_modes),
        ):
            if arr.shape != (n, width):
                raise InvariantViolationError(f"{name} has shape {arr.shape}, expected {(n, width)}")
            if not np.all(np.isfinite(arr)):
                raise InvariantViolationError(f"{name} contains non-finite values")
        basis = self.basis()
        recon = self.coefficients @ basis.phi.T
        scale = max(1.0, float(np.max(np.abs(self.solutions), initial=0.0)))
        err = float(np.max(np.abs(recon - self.solutions), initial=0.0))
        if err > 1e-12 * scale:
            raise InvariantViolationError(f"solutions differ from phi @ coefficients by {err:.3e}")
        if self.norm_stats is not None and n * self.P > 1:
            m, s = float(self.forcings.mean()), float(self.forcings.std())
            if abs(m) > 1e-10 or abs(s - 1.0) > 1e-10:
                raise InvariantViolationError(f"normalized forcings have mean {m:.3e} and std {s!r}")


# Galerkin ground truth must annihilate the weak form up to these levels
WEAK_FORM_BOUND = {CDE: 1e-16, HELMHOLTZ: 1e-16, BURGERS: 1e-14}


def worker_count() -> int:
    env = os.environ.get("LGNET_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _solve_rows(problem, forcings, basis, rule, params=None, n_jobs=1, **solver_kwargs):
    def one(i):
        try:
            return solve(problem, forcings[i], basis, rule, **solver_kwargs)
        except SolverError as exc:
            p = params[i] if params is not None else None
            raise GenerationError(f"sample {i} failed ({p}): {exc}", i, p) from exc

    idx = range(len(forcings))
    if n_jobs > 1 and len(forcings) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(one, idx))
    return [one(i) for i in idx]


def dataset_from_forcings(
    problem: ProblemSpec,
    forcings,
    P: int,
    n_modes: int | None = None,
    seed: int = 0,
    normalize: bool = False,
    forcing_family: str | None = None,
    n_jobs: int | None = None,
    params=None,
    **solver_kwargs,
) -> Dataset:
    """Solve for each physical forcing row and package the result.

    ``params`` (one entry per row) is only used to label failures.
    """
    n_modes = P - 2 if n_modes is None else n_modes
    rule = gauss_lobatto(P)
    basis = modal_basis(problem.bc, n_modes, rule)
    forcings = np.ascontiguousarray(forcings, dtype=np.float64).reshape(-1, P)
    sols = _solve_rows(problem, forcings, basis, rule, params, n_jobs or 1, **solver_kwargs)
    coeffs = np.array([s.coefficients for s in sols]).reshape(len(forcings), n_modes)
    extra = {"max_solver_residual": max((s.residual_norm for s in sols), default=0.0)}
    # residual_norm is the l2 norm over test functions, so this is MSE(LHS, RHS) over the whole set
    wf = float(sum(s.residual_norm**2 for s in sols) / max(1, len(sols) * n_modes))
    if wf > WEAK_FORM_BOUND[problem.kind]:
        raise InvariantViolationError(
            f"ground truth leaves a weak-form MSE of {wf:.3e} (bound {WEAK_FORM_BOUND[problem.kind]:.0e})")
    extra["weak_form_mse"] = wf
    if problem.kind == BURGERS:
        extra["max_picard_iterations"] = max((len(s.increments) for s in sols), default=0)
    ds = Dataset(
        problem=problem,
        P=P,
        n_modes=n_modes,
        forcings=forcings,
        solutions=coeffs @ basis.phi.T,
        coefficients=coeffs,
        seed=int(seed),
        forcing_family=forcing_family,
        extra=extra,
    )
    return ds.normalized() if normalize else ds


def generate_dataset(
    problem: ProblemSpec,
    n: int,
    P: int,
    n_modes: int | None = None,
    seed: int = 0,
    normalize: bool = False,
    family: str | None = None,
    n_jobs: int | None = None,
    **solver_kwargs,
) -> Dataset:
    """Sample ``n`` forcings, solve each, and return the dataset.

    Row ``i`` draws its parameters from ``row_rng(seed, i)``, so the result
    is bit-identical regardless of ``n_jobs``.
    """
    if n < 1:
        raise ValueError(f"dataset needs n >= 1, got {n}")
    family = family or default_family(problem)
    x = gauss_lobatto(P).nodes
    drawn = [sample_forcing(family, row_rng(seed, i), x) for i in range(n)]
    params = [p for p, _ in drawn]
    forcings = np.array([f for _, f in drawn])
    n_jobs = worker_count() if n_jobs is None else n_jobs
    return dataset_from_forcings(problem, forcings, P, n_modes, seed, normalize, family,
                                 n_jobs=n_jobs, params=params, **solver_kwargs)


def _meta(ds: Dataset) -> dict:
    meta = {
        "format_version": FORMAT_VERSION,
        "problem": ds.problem.to_dict(),
        "P": ds.P,
        "n_modes": ds.n_modes,
        "n": ds.n,
        "seed": ds.seed,
        "norm_stats": None if ds.norm_stats is None else {"mean": ds.norm_stats.mean, "std": ds.norm_stats.std},
        "forcing": None if ds.forcing_family is None else {
            "family": ds.forcing_family,
            "distribution": FORCING_DISTRIBUTIONS[ds.forcing_family],
        },
    }
    if ds.extra:
        meta["solver"] = ds.extra
    return meta


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(_meta(ds), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name in _BIN_FILES:
        np.ascontiguousarray(getattr(ds, name), dtype=_DTYPE).tofile(path / f"{name}.bin")
    return path


def _read_meta(path: Path) -> dict:
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MalformedHeaderError(f"{path}: missing meta.json") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"{path}/meta.json is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise MalformedHeaderError(f"{path}/meta.json must hold an object")
    if meta.get("format_version") != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format_version {meta.get('format_version')!r}")
    for key in ("problem", "P", "n_modes", "n", "seed"):
        if key not in meta:
            raise MalformedHeaderError(f"meta.json lacks {key!r}")
    for key in ("P", "n_modes", "n", "seed"):
        if not isinstance(meta[key], int) or isinstance(meta[key], bool):
            raise MalformedHeaderError(f"meta.json field {key!r} must be an integer")
    return meta


def load_dataset(path) -> Dataset:
    """Read a dataset directory and check every invariant."""
    path = Path(path)
    meta = _read_meta(path)
    try:
        problem = ProblemSpec.from_dict(meta["problem"])
    except (KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"bad problem block: {meta['problem']!r}") from exc
    except ValueError as exc:
        raise InvariantViolationError(str(exc)) from exc
    stats = None
    if meta.get("norm_stats") is not None:
        ns = meta["norm_stats"]
        try:
            stats = NormStats(float(ns["mean"]), float(ns["std"]))
        except (KeyError, TypeError) as exc:
            raise MalformedHeaderError(f"bad norm_stats block: {ns!r}") from exc
        except ValueError as exc:
            raise InvariantViolationError(str(exc)) from exc
    n, P, n_modes = meta["n"], meta["P"], meta["n_modes"]
    if n < 1 or n_modes < 1 or P < n_modes + 2:
        raise InvariantViolationError(f"inconsistent sizes n={n}, P={P}, n_modes={n_modes}")
    arrays = {}
    for name, width in zip(_BIN_FILES, (P, P, n_modes)):
        f = path / f"{name}.bin"
        if not f.exists():
            raise SizeMismatchError(f"{f} is missing")
        expected = n * width * _DTYPE.itemsize
        actual = f.stat().st_size
        if actual != expected:
            raise SizeMismatchError(f"{f} holds {actual} bytes, expected {expected}")
        arrays[name] = np.fromfile(f, dtype=_DTYPE).reshape(n, width).astype(np.float64)
    family = (meta.get("forcing") or {}).get("family")
    ds = Dataset(problem, P, n_modes, arrays["forcings"], arrays["solutions"], arrays["coefficients"],
                 meta["seed"], stats, family, meta.get("solver") or {})
    ds.validate()
    return ds
