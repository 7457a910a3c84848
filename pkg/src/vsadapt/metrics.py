"""Dice, ASSD and the Fréchet distance between Gaussian feature statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import LabelVolume, ShapeError

CLASS_NAMES = {1: "VS", 2: "Cochlea"}

_FACE = ndimage.generate_binary_structure(3, 1)


class UndefinedMetricError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check_pair(pred: LabelVolume, truth: LabelVolume, spacing: bool = False) -> None:
    if pred.dims != truth.dims:
        raise ShapeError(f"prediction {pred.dims} and reference {truth.dims} differ")
    if spacing and not np.allclose(pred.spacing, truth.spacing, rtol=1e-6, atol=0):
        raise ShapeError(f"spacings differ: {pred.spacing} vs {truth.spacing}")


def dice_score(pred: LabelVolume, truth: LabelVolume, class_id: int) -> float:
    _check_pair(pred, truth)
    p = pred.data == class_id
    g = truth.data == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background face-neighbour or on the grid border."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_FACE, border_value=0)
    return mask & ~inner


def surface_points(lbl: LabelVolume, class_id: int) -> np.ndarray:
    """Boundary voxel centres of ``class_id`` in mm, shape (n, 3)."""
    idx = np.argwhere(boundary_mask(lbl.data == class_id))
    return idx * np.asarray(lbl.spacing, dtype=np.float64)


def assd(pred: LabelVolume, truth: LabelVolume, class_id: int) -> float:
    """Average symmetric surface distance in mm."""
    _check_pair(pred, truth, spacing=True)
    a = surface_points(pred, class_id)
    b = surface_points(truth, class_id)
    if len(a) == 0 or len(b) == 0:
        side = "prediction" if len(a) == 0 else "reference"
        raise UndefinedMetricError(f"class {class_id} is empty in the {side}; ASSD undefined")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = mu.shape[0]
        if mu.ndim != 1 or cov.shape != (d, d):
            raise ShapeError(f"mean {mu.shape} and covariance {cov.shape} are inconsistent")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-8):
            raise NumericError("covariance is not symmetric")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def feature_stats(features) -> FeatureStats:
    """Column means and sample covariance (divisor n - 1) of an n x d matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 feature vectors, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (n - 1)
    return FeatureStats(mu, (cov + cov.T) / 2, n)


def _psd_eigh(m: np.ndarray, what: str, tol: float) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise NumericError(f"{what} is indefinite (min eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), v


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``S_a^(1/2) S_b S_a^(1/2)``, which shares its spectrum
    with ``S_a S_b``.
    """
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    wa, va = _psd_eigh(a.covariance, "first covariance", 1e-8)
    _psd_eigh(b.covariance, "second covariance", 1e-8)
    root_a = (va * np.sqrt(wa)) @ va.T
    w, _ = _psd_eigh(root_a @ b.covariance @ root_a, "covariance product", 1e-6)
    tr_sqrt = float(np.sqrt(w).sum())
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    if fd < -1e-6 * max(1.0, abs(np.trace(a.covariance)) + abs(np.trace(b.covariance))):
        raise NumericError(f"Fréchet distance came out negative ({fd:.3g})")
    return max(fd, 0.0)


def evaluate_case(pred: LabelVolume, truth: LabelVolume, classes: Iterable[int] = (1, 2)) -> dict:
    """Dice and ASSD per class; an undefined ASSD is reported as ``None``."""
    out = {}
    for c in classes:
        try:
            surface = assd(pred, truth, c)
        except UndefinedMetricError:
            surface = None
        out[CLASS_NAMES.get(c, str(c))] = {"dice": dice_score(pred, truth, c), "assd": surface}
    return out


def _mean_std(values: Sequence[float | None]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def summarize(cases: dict[str, dict]) -> dict:
    """Table-style summary: mean and std per class and metric, plus the mean dice score."""
    names = list(dict.fromkeys(name for c in cases.values() for name in c))
    summary = {}
    for name in names:
        summary[name] = {
            metric: _mean_std([c[name][metric] for c in cases.values() if name in c])
            for metric in ("dice", "assd")
        }
    per_case_score = [
        float(np.mean([c[n]["dice"] for n in c])) for c in cases.values() if c
    ]
    summary["score"] = _mean_std(per_case_score)
    return summary


def metrics_report(pairs: dict[str, tuple[LabelVolume, LabelVolume]], classes=(1, 2)) -> dict:
    cases = {cid: evaluate_case(p, t, classes) for cid, (p, t) in sorted(pairs.items())}
    return {"cases": cases, "summary": summarize(cases)}


def format_table(report: dict) -> str:
    s = report["summary"]

    def cell(d):
        if d["mean"] is None:
            return "n/a"
        return f"{d['mean']:.2f}±{d['std']:.2f}"

    names = [n for n in s if n != "score"]
    header = ["Score"] + [f"{n} {m.upper() if m == 'assd' else 'Dice'}" for n in names for m in ("dice", "assd")]
    row = [cell(s["score"])] + [cell(s[n][m]) for n in names for m in ("dice", "assd")]
    return " | ".join(header) + "\n" + " | ".join(row)


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

