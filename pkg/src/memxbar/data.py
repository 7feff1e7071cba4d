"""Dataset ingestion and preprocessing."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, IngestionError

DIGITS_COLUMNS = [f"p{i}" for i in range(64)] + ["label"]
TRAJECTORY_COLUMNS = ["t", "x", "y", "theta", "v_cmd", "steer_cmd"]


# --- PCA / scaling -----------------------------------------------------------------------------


@dataclass
class PcaBasis:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (D, k), orthonormal columns
    variances: np.ndarray  # (k,), covariance eigenvalues, non-increasing

    def project(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.mean) @ self.components


def pca_fit(data, k: int = 8) -> PcaBasis:
    """Top-``k`` principal directions from the covariance eigendecomposition.

    Each direction's sign is fixed so its largest-magnitude loading is
    positive, which keeps results reproducible across LAPACK builds.
    """
    data = np.asarray(data, dtype=float)
    n, dim = data.shape
    if n < k or k > dim:
        raise DegenerateDataError(f"need at least {k} rows and columns for {k} components")
    if not np.all(np.isfinite(data)):
        raise DegenerateDataError("data contains non-finite values")
    mean = data.mean(axis=0)
    centered = data - mean
    if not np.any(centered):
        raise DegenerateDataError("all rows are identical")
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals, evecs = np.maximum(evals[order], 0.0), evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(k)])
    return PcaBasis(mean, evecs, evals)


def pca_project(data, k: int = 8) -> tuple[np.ndarray, PcaBasis]:
    basis = pca_fit(data, k)
    return basis.project(data), basis


@dataclass
class MinMaxScaler:
    """Min-max rescaling into [0, 1] with extremes taken from the fit data.

    ``per_feature=False`` uses one global min/max over every entry.
    Values outside the fitted range are clipped.
    """

    per_feature: bool = False
    lo: np.ndarray | float | None = None
    hi: np.ndarray | float | None = None

    def fit(self, data) -> "MinMaxScaler":
        data = np.asarray(data, dtype=float)
        axis = 0 if self.per_feature else None
        lo, hi = data.min(axis=axis), data.max(axis=axis)
        if np.any(hi <= lo):
            raise DegenerateDataError("min == max; nothing to rescale")
        self.lo, self.hi = lo, hi
        return self

    def transform(self, data) -> np.ndarray:
        data = np.asarray(data, dtype=float)
        return np.clip((data - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def to_dict(self):
        return {"per_feature": self.per_feature,
                "lo": np.asarray(self.lo).tolist(), "hi": np.asarray(self.hi).tolist()}


def min_max_rescale(vectors) -> np.ndarray:
    return MinMaxScaler().fit(vectors).transform(vectors)


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffled split; both parts sorted."""
    if not 0 < train_fraction < 1:
        raise DegenerateDataError(f"train fraction {train_fraction} not in (0, 1)")
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise DegenerateDataError(f"split {train_fraction} of {n} rows leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# --- CSV ingestion ----------------------------------------------------------------------------


def _read_numeric_csv(path, columns):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IngestionError(f"{path}: empty file") from None
    if header != columns:
        missing = [c for c in columns if c not in header]
        raise IngestionError(f"{path}: header mismatch (missing {missing[:5]}, got {header[:5]}...)")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(columns):
            raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, expected {len(columns)}")
        vals = []
        for col, cell in zip(columns, row):
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: row {lineno}, column {col!r}: not numeric: {cell!r}") from None
            if not math.isfinite(v):
                raise IngestionError(f"{path}: row {lineno}, column {col!r}: non-finite value")
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    return np.array(rows)


def bundled_digits_path() -> Path:
    return Path(str(resources.files("memxbar") / "data" / "digits.csv"))


def load_digits_csv(path=None, classes=(0, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Pixels (N x 64) and integer labels, filtered to ``classes``."""
    table = _read_numeric_csv(path or bundled_digits_path(), DIGITS_COLUMNS)
    labels = table[:, -1]
    if np.any(labels != np.round(labels)):
        raise IngestionError("label column must hold integers")
    keep = np.isin(labels, classes)
    return table[keep, :64], labels[keep].astype(int)


def load_trajectory_csv(path) -> np.ndarray:
    return _read_numeric_csv(path, TRAJECTORY_COLUMNS)


# --- synthetic robot trajectories ---------------------------------------------------------------


@dataclass(frozen=True)
class Arena:
    """Elliptical loop of waypoints enclosing rectangular obstacles."""

    half_w: float
    half_h: float
    obstacles: tuple[tuple[float, float, float, float], ...]  # (x0, y0, x1, y1)

    def path(self, n: int = 400) -> np.ndarray:
        """Counter-clockwise waypoints along the loop."""
        s = 2 * np.pi * np.arange(n) / n
        return np.stack([self.half_w * np.cos(s), self.half_h * np.sin(s)], axis=1)

    def clearance(self, x: float, y: float) -> float:
        """Distance from (x, y) to the nearest obstacle (0 inside one)."""
        best = np.inf
        for x0, y0, x1, y1 in self.obstacles:
            dx = max(x0 - x, 0.0, x - x1)
            dy = max(y0 - y, 0.0, y - y1)
            best = min(best, math.hypot(dx, dy))
        return best


WHEELBASE = 0.3
STEER_MAX = 0.6
V_MAX = 1.0
LOOKAHEAD = 1.5
POS_NOISE = 0.01
HEADING_NOISE = 0.01


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def pursuit_command(pose, path: np.ndarray) -> tuple[float, float]:
    """Pure-pursuit command for ``pose = (x, y, theta)``; a function of pose only."""
    x, y, theta = pose
    d2 = (path[:, 0] - x) ** 2 + (path[:, 1] - y) ** 2
    i = int(np.argmin(d2))
    seg = np.linalg.norm(np.diff(np.vstack([path, path[:1]]), axis=0), axis=1)
    j, dist = i, 0.0
    while dist < LOOKAHEAD:
        dist += seg[j]
        j = (j + 1) % len(path)
    tx, ty = path[j]
    alpha = float(wrap_angle(math.atan2(ty - y, tx - x) - theta))
    steer = float(np.clip(math.atan2(2 * WHEELBASE * math.sin(alpha), LOOKAHEAD), -STEER_MAX, STEER_MAX))
    v = V_MAX * (1.0 - 0.6 * abs(steer) / STEER_MAX)
    return v, steer


def _draw_arena(rng) -> Arena:
    half_w, half_h = rng.uniform(4.0, 6.0), rng.uniform(2.0, 3.0)
    box_w, box_h = 0.45 * half_w, 0.45 * half_h
    return Arena(half_w, half_h, ((-box_w, -box_h, box_w, box_h),))


def trajectory_arena(seed: int) -> Arena:
    """The arena that :func:`generate_trajectory_dataset` uses for ``seed``."""
    return _draw_arena(np.random.default_rng(seed))


def generate_trajectory_dataset(seed: int, n: int = 600, dt: float = 0.1):
    """Simulate a kinematic bicycle robot lapping a loop around an obstacle.

    Returns an ``(n, 6)`` array with columns ``t, x, y, theta, v_cmd,
    steer_cmd``.  Commands come from :func:`pursuit_command` evaluated on the
    logged pose; process noise perturbs the motion so the log covers poses
    off the nominal line.
    """
    if n < 100:
        raise ValueError("need n >= 100 samples")
    rng = np.random.default_rng(seed)
    path = _draw_arena(rng).path()
    start = path[int(rng.integers(len(path)))]
    x, y = start + rng.normal(0, 0.3, 2)
    theta = float(rng.uniform(-np.pi, np.pi))
    rows = []
    for k in range(n):
        v, steer = pursuit_command((x, y, theta), path)
        rows.append((k * dt, x, y, theta, v, steer))
        x += v * math.cos(theta) * dt + rng.normal(0, POS_NOISE)
        y += v * math.sin(theta) * dt + rng.normal(0, POS_NOISE)
        theta = float(wrap_angle(theta + v / WHEELBASE * math.tan(steer) * dt + rng.normal(0, HEADING_NOISE)))
    return np.array(rows)


def write_trajectory_csv(table, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    return path
