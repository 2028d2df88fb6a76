"""Datasets, loss functions, run configuration and the constant initializer."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

Z_MAX = 36.0


class DatasetError(ValueError):
    """Raised for invalid or unreadable datasets."""


class LossDomainError(ValueError):
    """Raised when a response lies outside the domain of a classification loss."""


# --------------------------------------------------------------------------- #
# Dataset
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class Dataset:
    """Fixed design points in [0, 1]^p with real responses.

    The arrays are copied and frozen on construction.
    """

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.float64, copy=True).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DatasetError(f"features must be an n x p matrix with n, p >= 1, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DatasetError(f"{X.shape[0]} feature rows but {y.shape[0]} responses")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DatasetError("dataset contains non-finite values")
        if X.min() < 0.0 or X.max() > 1.0:
            raise DatasetError("feature values must lie in [0, 1]; rescale first (see min_max_scale)")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def sort_order(self) -> np.ndarray:
        """Per-coordinate stable argsort of X, shape (n, p)."""
        return np.argsort(self.X, axis=0, kind="stable")

    def with_responses(self, y) -> "Dataset":
        return Dataset(self.X, y)

    @classmethod
    def from_csv(cls, path, scale: bool = False) -> "Dataset":
        """Read a headerless CSV whose columns are x^1..x^p, y.

        With ``scale=True`` every feature column is min-max mapped onto [0, 1].
        """
        path = Path(path)
        if not path.is_file():
            raise DatasetError(f"{path}: no such file")
        rows: list[list[float]] = []
        width = None
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    vals = [float(c) for c in row]
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
                if width is None:
                    width = len(vals)
                    if width < 2:
                        raise DatasetError(f"{path}:{lineno}: need at least one feature and a response")
                elif len(vals) != width:
                    raise DatasetError(f"{path}:{lineno}: expected {width} columns, got {len(vals)}")
                if not all(math.isfinite(v) for v in vals):
                    raise DatasetError(f"{path}:{lineno}: non-finite value")
                rows.append(vals)
        if not rows:
            raise DatasetError(f"{path}: no data rows")
        arr = np.asarray(rows)
        X, y = arr[:, :-1], arr[:, -1]
        if scale:
            X = min_max_scale(X)
        elif X.min() < 0.0 or X.max() > 1.0:
            bad = int(np.argmax(np.any((X < 0) | (X > 1), axis=1)))
            raise DatasetError(f"{path}: feature outside [0, 1] (first at data row {bad + 1}); use scaling")
        return cls(X, y)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for xi, yi in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def min_max_scale(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((X - lo) / span, 0.0, 1.0)


def sine_regression_function(x) -> np.ndarray:
    return np.sin(np.pi / 4 + 1.5 * np.pi * np.asarray(x, dtype=np.float64))


def generate_sine_dataset(n: int, sigma: float, seed: int) -> Dataset:
    """Sample X ~ Unif[0, 1], Y = sin(pi/4 + 3 pi X / 2) + N(0, sigma^2)."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    if sigma < 0:
        raise DatasetError("sigma must be >= 0")
    gen = np.random.default_rng(seed)
    x = gen.uniform(0.0, 1.0, size=n)
    eps = gen.normal(0.0, 1.0, size=n) * sigma
    return Dataset(x.reshape(-1, 1), sine_regression_function(x) + eps)


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


class Loss:
    """A loss L(y, z) with derivatives in the prediction z; vectorized."""

    name = ""

    def check(self, y) -> None:
        pass

    def value(self, y, z):
        raise NotImplementedError

    def d1(self, y, z):
        raise NotImplementedError

    def d2(self, y, z):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class SquaredError(Loss):
    name = "squared"

    def value(self, y, z):
        return 0.5 * (np.asarray(y) - z) ** 2

    def d1(self, y, z):
        return np.asarray(z) - y

    def d2(self, y, z):
        return np.ones(np.broadcast(np.asarray(y), np.asarray(z)).shape)


class BinaryCrossEntropy(Loss):
    """L(y, z) = -y z + log(1 + e^z) for y in {0, 1}."""

    name = "bce"

    def check(self, y) -> None:
        y = np.asarray(y)
        if not np.all((y == 0) | (y == 1)):
            raise LossDomainError("binary cross entropy needs responses in {0, 1}")

    def value(self, y, z):
        return np.logaddexp(0.0, z) - np.asarray(y) * z

    def d1(self, y, z):
        z = np.asarray(z, dtype=np.float64)
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return p - y

    def d2(self, y, z):
        # written through e^{-|z|}; floored at the smallest normal float so
        # it stays positive once e^{-|z|} underflows (|z| > ~708)
        z = np.asarray(z, dtype=np.float64)
        e = np.exp(-np.abs(z))
        d2 = np.maximum(e / (1.0 + e) ** 2, np.finfo(np.float64).tiny)
        return np.broadcast_to(d2, np.broadcast(np.asarray(y), z).shape)


class ExponentialMargin(Loss):
    """L(y, z) = exp(-y z) for y in {-1, 1}."""

    name = "exponential"

    def check(self, y) -> None:
        y = np.asarray(y)
        if not np.all((y == -1) | (y == 1)):
            raise LossDomainError("exponential loss needs responses in {-1, 1}")

    def value(self, y, z):
        return np.exp(-np.asarray(y) * z)

    def d1(self, y, z):
        y = np.asarray(y)
        return -y * np.exp(-y * z)

    def d2(self, y, z):
        # floored like the cross-entropy curvature so it never underflows to 0
        return np.maximum(np.exp(-np.asarray(y) * z), np.finfo(np.float64).tiny)


LOSSES: dict[str, type[Loss]] = {
    SquaredError.name: SquaredError,
    BinaryCrossEntropy.name: BinaryCrossEntropy,
    ExponentialMargin.name: ExponentialMargin,
}


def get_loss(loss) -> Loss:
    if isinstance(loss, Loss):
        return loss
    try:
        return LOSSES[str(loss)]()
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; choose from {sorted(LOSSES)}") from None


def loss_eval(loss, y: float, z: float) -> tuple[float, float, float]:
    """Return (L(y, z), dL/dz, d2L/dz2)."""
    loss = get_loss(loss)
    loss.check(y)
    return float(loss.value(y, z)), float(loss.d1(y, z)), float(loss.d2(y, z))


def responses_for_loss(y, loss) -> np.ndarray:
    """Map real responses onto the label set a loss expects.

    Classification losses threshold at 0: {0, 1} for cross entropy and
    {-1, 1} for the exponential margin loss.
    """
    loss = get_loss(loss)
    y = np.asarray(y, dtype=np.float64)
    if isinstance(loss, BinaryCrossEntropy):
        return (y > 0).astype(np.float64)
    if isinstance(loss, ExponentialMargin):
        return np.where(y > 0, 1.0, -1.0)
    return y.copy()


def training_error(loss, y, F) -> float:
    """L_n(F) = sum_i L(y_i, F(x_i))."""
    return float(get_loss(loss).value(y, F).sum())


def init_constant(dataset: Dataset, loss, z_max: float = Z_MAX) -> tuple[float, bool]:
    """Constant minimizer of the empirical loss.

    Returns ``(z, clamped)``. When the minimizer escapes to infinity (pure
    classes) the result is clamped to ``+-z_max`` and ``clamped`` is True.
    """
    loss = get_loss(loss)
    y = dataset.y
    loss.check(y)
    n = y.shape[0]
    if isinstance(loss, SquaredError):
        return float(np.mean(y)), False

    def grad(z: float) -> float:
        return float(np.sum(loss.d1(y, z)))

    tol = 1e-12 * n
    lo, hi = -z_max, z_max
    g_lo, g_hi = grad(lo), grad(hi)
    if g_hi < 0:
        warnings.warn("empirical minimizer is at +infinity; clamping", RuntimeWarning, stacklevel=2)
        return z_max, True
    if g_lo > 0:
        warnings.warn("empirical minimizer is at -infinity; clamping", RuntimeWarning, stacklevel=2)
        return -z_max, True

    z = 0.0
    for _ in range(200):
        g = grad(z)
        if abs(g) <= tol:
            break
        if g > 0:
            hi = z
        else:
            lo = z
        h = float(np.sum(loss.d2(y, z)))
        step = z - g / h if h > 0 else math.nan
        z = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(z)):
            break
    return z, False


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Config:
    """Softmax tree parameters (beta, K, depth) plus boosting settings."""

    beta: float = 1.0
    K: int = 20
    depth: int = 1
    lam: float = 0.01
    steps: int = 100
    seed: int = 0
    loss: str = "squared"
    z_max: float = field(default=Z_MAX)

    def __post_init__(self):
        beta = float(self.beta)
        if math.isnan(beta) or beta < 0:
            raise ValueError("beta must be >= 0 (math.inf selects argmax)")
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if int(self.depth) < 1:
            raise ValueError("depth must be >= 1")
        if not float(self.lam) > 0:
            raise ValueError("learning rate must be > 0")
        if int(self.steps) < 0:
            raise ValueError("steps must be >= 0")
        get_loss(self.loss)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "depth", int(self.depth))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def loss_fn(self) -> Loss:
        return get_loss(self.loss)

    def replace(self, **changes) -> "Config":
        d = asdict(self)
        d.update(changes)
        return Config(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.beta):
            d["beta"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if isinstance(d.get("beta"), str):
            d["beta"] = float(d["beta"])
        return cls(**d)
