"""Depth accuracy metrics, least-squares affine alignment and total variation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateFit, DimensionMismatch, NoValidPixels
from .scene import DepthMap


def _joint(pred: DepthMap, gt: DepthMap):
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = pred.valid_mask & gt.valid_mask & (gt.data > 0)
    if not mask.any():
        raise NoValidPixels("no pixel is valid in both maps")
    return pred.data[mask], gt.data[mask]


def abs_rel(pred: DepthMap, gt: DepthMap) -> float:
    p, g = _joint(pred, gt)
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred: DepthMap, gt: DepthMap, threshold: float = 1.25) -> float:
    p, g = _joint(pred, gt)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < threshold))


def rmse(pred: DepthMap, gt: DepthMap) -> float:
    # root of the mean square, the usual benchmark definition
    p, g = _joint(pred, gt)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def affine_align(pred: DepthMap, gt: DepthMap):
    """Closed-form least squares ``a * pred + b ~ gt`` over jointly valid pixels."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = pred.valid_mask & gt.valid_mask
    p, g = pred.data[mask], gt.data[mask]
    if p.size < 2:
        raise DegenerateFit("need at least two valid pixels")
    p_mean, g_mean = p.mean(), g.mean()
    var = np.sum((p - p_mean) ** 2)
    if var <= 1e-12 * max(1.0, np.sum(p**2)):
        raise DegenerateFit("prediction is constant; scale is undetermined")
    a = float(np.sum((p - p_mean) * (g - g_mean)) / var)
    b = float(g_mean - a * p_mean)
    aligned = a * pred.data + b
    # alignment may push values through zero; those pixels can no longer be scored
    ok = pred.valid_mask & (aligned > 0)
    return a, b, DepthMap(np.where(ok, aligned, 0.0), ok)


def total_variation(depth: DepthMap) -> float:
    """Mean |forward difference| along x plus the same along y, over valid pairs."""
    d, m = depth.data, depth.valid_mask
    total = 0.0
    for diff, ok in (
        (np.diff(d, axis=1), m[:, 1:] & m[:, :-1]),
        (np.diff(d, axis=0), m[1:, :] & m[:-1, :]),
    ):
        if ok.any():
            total += float(np.mean(np.abs(diff[ok])))
    return total


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    delta1: float
    rmse: float
    n_pixels: int
    aligned: bool

    def to_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in asdict(self).items()) + "\n"

    def to_record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_record(cls, line: str) -> "MetricReport":
        return cls(**json.loads(line))


def report(pred: DepthMap, gt: DepthMap, aligned: bool = False) -> MetricReport:
    p, _ = _joint(pred, gt)
    return MetricReport(abs_rel(pred, gt), delta1(pred, gt), rmse(pred, gt), int(p.size), aligned)


def evaluate(pred: DepthMap, gt: DepthMap) -> tuple[MetricReport, MetricReport]:
    """Raw metric-depth report and the report after least-squares alignment."""
    raw = report(pred, gt)
    _, _, aligned_map = affine_align(pred, gt)
    return raw, report(aligned_map, gt, aligned=True)
