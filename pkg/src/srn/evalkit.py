"""Localization metrics and report artifacts.

Normalized mean error supports three face-scale normalizers plus an explicit
value; cumulative error distributions and failure rates share the boundary
convention that a failure strictly exceeds the threshold, so
``failure_rate(e, t) == 1 - ced fraction at t``.

Report writers emit per-image CSV rows; the CED path also renders a figure
next to the delimited output.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInput
from .geometry import FaceShape, LEFT_EYE, OUTER_EYE_CORNERS, RIGHT_EYE

NORMALIZATION_RULES = ("inter_ocular", "inter_pupil", "bbox_geomean")

DEFAULT_FAILURE_THRESHOLD = 0.08


def resolve_normalizer(gt: FaceShape, rule) -> float:
    """Map a rule name (or explicit positive number) to a distance."""
    if isinstance(rule, (int, float)) and not isinstance(rule, bool):
        value = float(rule)
    elif rule == "inter_ocular":
        a, b = OUTER_EYE_CORNERS
        value = float(np.linalg.norm(gt.points[a] - gt.points[b]))
    elif rule == "inter_pupil":
        left = gt.points[list(LEFT_EYE)].mean(axis=0)
        right = gt.points[list(RIGHT_EYE)].mean(axis=0)
        value = float(np.linalg.norm(left - right))
    elif rule == "bbox_geomean":
        spans = gt.points.max(axis=0) - gt.points.min(axis=0)
        value = float(np.sqrt(spans[0] * spans[1]))
    else:
        raise InvalidInput(f"unknown normalization rule {rule!r}")
    if not np.isfinite(value) or value <= 0.0:
        raise InvalidInput(f"normalizer for rule {rule!r} is not strictly positive")
    return value


def nme(pred: FaceShape, gt: FaceShape, rule="inter_ocular") -> float:
    """Mean per-landmark Euclidean error divided by the face normalizer."""
    if pred.n != gt.n:
        raise InvalidInput("prediction and ground truth differ in landmark count")
    norm = resolve_normalizer(gt, rule)
    dists = np.linalg.norm(pred.points - gt.points, axis=1)
    return float(dists.mean() / norm)


def ced(errors: Sequence[float], thresholds: Sequence[float]) -> list[tuple[float, float]]:
    """Fraction of errors <= threshold, per threshold."""
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise InvalidInput("ced of an empty error list")
    return [(float(t), float(np.mean(errs <= t))) for t in thresholds]


def failure_rate(errors: Sequence[float], threshold: float = DEFAULT_FAILURE_THRESHOLD) -> float:
    """Fraction of errors strictly greater than the threshold."""
    errs = np.asarray(list(errors), dtype=np.float64)
    if errs.size == 0:
        raise InvalidInput("failure_rate of an empty error list")
    return float(np.mean(errs > threshold))


def default_threshold_grid(upper: float = 0.2, count: int = 41) -> np.ndarray:
    return np.linspace(0.0, upper, count)


def evaluate_samples(predictor, samples, rule="inter_ocular") -> list[float]:
    """Final-iteration NME per sample."""
    return [nme(predictor.predict(s.image), s.gt, rule) for s in samples]


def iteration_errors(predictor, samples, rule="inter_ocular") -> np.ndarray:
    """NME per cascade level including the initialization: (S, I+1)."""
    rows = []
    for s in samples:
        traj = predictor.trajectory(s.image)
        rows.append([nme(shape, s.gt, rule) for shape in traj.shapes])
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# report artifacts


def write_report_csv(path, sample_ids: Sequence[str], errors: Sequence[float]) -> None:
    if len(sample_ids) != len(errors):
        raise InvalidInput("sample id and error counts differ")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "nme"])
        for sid, err in zip(sample_ids, errors):
            writer.writerow([sid, f"{err:.12g}"])


def read_report_csv(path) -> tuple[list[str], list[float]]:
    ids, errors = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["sample"])
            errors.append(float(row["nme"]))
    return ids, errors


def write_ced_csv(path, rows: Iterable[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fraction"])
        for t, frac in rows:
            writer.writerow([f"{t:.12g}", f"{frac:.12g}"])


def read_ced_csv(path) -> list[tuple[float, float]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((float(row["threshold"]), float(row["fraction"])))
    return rows


def plot_ced(rows: Sequence[tuple[float, float]], out_path, title: str = "Cumulative error distribution") -> None:
    """Render the CED curve to an image file next to the CSV artifacts."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    thresholds = [t for t, _ in rows]
    fractions = [f for _, f in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(thresholds, fractions, lw=2.0, color="tab:blue")
    ax.set_xlabel("NME threshold")
    ax.set_ylabel("fraction of images")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
