"""Accuracy metrics for landmark predictions: NRMSE, failure rate, CED, timing.

NRMSE here is the mean per-point Euclidean error divided by the ground-truth
inter-ocular distance (the distance between the two configured eye points).
Summation is sequential in input order; the reported mean equals the plain
arithmetic mean of the per-image values with that same order, so independent
reimplementations can match it bit for bit.
"""
import csv
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as dataio
from .errors import DegenerateGeometryError, ShapeMismatchError, SpecValidationError
from .model import LandmarkSet, forward, predict_landmarks

__all__ = [
    "EvalReport", "nrmse", "failure_rate", "ced_curve", "default_ced_grid",
    "time_forward", "evaluate_manifest", "write_errors_csv", "read_errors_csv",
    "write_ced_csv", "write_summary_csv",
]

DEFAULT_FAILURE_THRESHOLD = 0.10


def default_ced_grid():
    """Thresholds 0 to 0.10 inclusive in steps of 0.002."""
    return tuple(round(i * 0.002, 3) for i in range(51))


@dataclass
class EvalReport:
    per_image_errors: list
    mean_nrmse: float
    failure_threshold: float
    failure_count: int
    total_count: int
    ced: list
    sample_ids: list = field(default_factory=list)
    timing: dict = None

    @property
    def failure_rate(self):
        return 100.0 * self.failure_count / self.total_count


def _points_of(landmarks):
    if isinstance(landmarks, LandmarkSet):
        return landmarks.points
    return np.asarray(landmarks, dtype=np.float64)


def nrmse(pred, gt, left_idx, right_idx):
    """Mean per-point error over the ground-truth eye-corner distance.

    Both landmark sets must live in the same coordinate frame.  The loop is
    plain sequential Python on purpose: the exact summation order is part of
    the contract.
    """
    if isinstance(pred, LandmarkSet) and isinstance(gt, LandmarkSet) \
            and pred.frame is not gt.frame:
        raise SpecValidationError(
            f"pred frame {pred.frame.value} != gt frame {gt.frame.value}")
    p = _points_of(pred)
    g = _points_of(gt)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"pred has shape {p.shape}, gt has {g.shape}")
    n = p.shape[0]
    if not (0 <= left_idx < n and 0 <= right_idx < n):
        raise SpecValidationError(f"eye indices ({left_idx}, {right_idx}) out of "
                                  f"range for {n} points")
    denom = math.hypot(g[left_idx, 0] - g[right_idx, 0],
                       g[left_idx, 1] - g[right_idx, 1])
    if denom == 0.0:
        raise DegenerateGeometryError("ground-truth eye corners coincide")
    total = 0.0
    for i in range(n):
        total += math.hypot(p[i, 0] - g[i, 0], p[i, 1] - g[i, 1])
    return (total / n) / denom


def failure_rate(errors, threshold=DEFAULT_FAILURE_THRESHOLD):
    """Percentage of errors strictly above the threshold."""
    errors = list(errors)
    if not errors:
        raise SpecValidationError("failure_rate needs a nonempty error list")
    count = sum(1 for e in errors if e > threshold)
    return 100.0 * count / len(errors)


def ced_curve(errors, grid=None):
    """Cumulative error distribution: fraction of errors <= t per grid point."""
    errors = list(errors)
    if grid is None:
        grid = default_ced_grid()
    grid = list(grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise SpecValidationError("ced grid must be strictly increasing")
    n = len(errors)
    curve = []
    for t in grid:
        count = sum(1 for e in errors if e <= t)
        curve.append((t, count / n if n else 0.0))
    return curve


def time_forward(weights, n_warmup=3, n_runs=30, rng_seed=0):
    """Wall-clock per single-image forward pass, warmup runs excluded."""
    if n_runs < 1:
        raise SpecValidationError("n_runs must be >= 1")
    side = weights.spec.input_side
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((1, 1, side, side)).astype(np.float32)
    x -= x.mean()
    for _ in range(n_warmup):
        forward(weights, x)
    runs = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        forward(weights, x)
        runs.append((time.perf_counter() - t0) * 1000.0)
    return {
        "mean_ms": sum(runs) / len(runs),
        "median_ms": statistics.median(runs),
        "runs_ms": runs,
    }


def evaluate_manifest(weights, manifest, failure_threshold=DEFAULT_FAILURE_THRESHOLD,
                      ced_grid=None, with_timing=False):
    """Run inference over every manifest entry and aggregate the metrics.

    Predictions are mapped back to image pixels through each entry's crop
    transform, so NRMSE is computed in the frame the annotations live in.
    """
    if manifest.n_landmarks != weights.spec.n_landmarks:
        raise ShapeMismatchError(
            f"manifest has {manifest.n_landmarks} landmarks, "
            f"model expects {weights.spec.n_landmarks}")
    if not manifest.entries:
        raise SpecValidationError("cannot evaluate an empty manifest")
    errors = []
    ids = []
    for entry in manifest.entries:
        sample = manifest.to_sample(entry)
        crop = dataio.load_gray_crop(sample, entry.bbox, weights.spec.input_side,
                                     entry.warp())
        pred_unit = predict_landmarks(weights, crop.pixels)
        pred_img = dataio.to_image_frame(pred_unit, crop.crop_transform)
        errors.append(nrmse(pred_img, sample.landmarks,
                            manifest.left_eye, manifest.right_eye))
        ids.append(entry.sample_id)
    total = 0.0
    for e in errors:
        total += e
    report = EvalReport(
        per_image_errors=errors,
        mean_nrmse=total / len(errors),
        failure_threshold=failure_threshold,
        failure_count=sum(1 for e in errors if e > failure_threshold),
        total_count=len(errors),
        ced=ced_curve(errors, ced_grid),
        sample_ids=ids,
    )
    if with_timing:
        report.timing = time_forward(weights)
    return report


# --- CSV artifacts -----------------------------------------------------

def write_errors_csv(path, sample_ids, errors):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "nrmse"])
        for sid, e in zip(sample_ids, errors):
            w.writerow([sid, repr(float(e))])


def read_errors_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["sample_id", "nrmse"]:
        raise SpecValidationError(f"{path}: expected a 'sample_id,nrmse' header")
    ids, errors = [], []
    for row in rows[1:]:
        if len(row) != 2:
            raise SpecValidationError(f"{path}: malformed row {row!r}")
        ids.append(row[0])
        errors.append(float(row[1]))
    return ids, errors


def write_ced_csv(path, ced):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "fraction"])
        for t, frac in ced:
            w.writerow([repr(float(t)), repr(float(frac))])


def write_summary_csv(path, report: EvalReport):
    """One-row summary; NRMSE appears raw and x100, since both scales are
    common in published comparisons."""
    fps = ""
    if report.timing:
        fps = repr(1000.0 / report.timing["mean_ms"])
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mean_nrmse", "mean_nrmse_x100", "failure_rate_percent", "fps"])
        w.writerow([repr(report.mean_nrmse), repr(report.mean_nrmse * 100.0),
                    repr(report.failure_rate), fps])
