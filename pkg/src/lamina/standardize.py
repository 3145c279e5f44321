"""Piecewise-linear histogram-landmark intensity standardization.

Each subject's intensity percentiles inside its mask (1st, 10th, ..., 90th,
99th) are mapped onto a common scale learned from a training cohort.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError
from .grid import Volume, as_mask, check_geometry

PERCENTILES = (1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0)
SCALE = (0.0, 1000.0)


@dataclass
class LandmarkModel:
    percentiles: Tuple[float, ...] = PERCENTILES
    targets: Tuple[float, ...] = field(default_factory=tuple)
    scale: Tuple[float, float] = SCALE

    def __post_init__(self):
        p = np.asarray(self.percentiles, dtype=float)
        t = np.asarray(self.targets, dtype=float)
        if p.size != 11 or t.size != 11:
            raise DataError("landmark model needs exactly 11 landmarks")
        if np.any(np.diff(p) <= 0):
            raise DataError("landmark percentiles must be strictly increasing")
        if np.any(np.diff(t) < 0) or not np.all(np.isfinite(t)):
            raise DataError("landmark targets must be finite and non-decreasing")
        self.percentiles = tuple(float(x) for x in p)
        self.targets = tuple(float(x) for x in t)
        self.scale = (float(self.scale[0]), float(self.scale[1]))

    def to_json(self) -> str:
        return json.dumps({"scale": list(self.scale), "percentiles": list(self.percentiles),
                           "targets": list(self.targets)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LandmarkModel":
        try:
            d = json.loads(text)
            return cls(tuple(d["percentiles"]), tuple(d["targets"]), tuple(d["scale"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"landmark model: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "LandmarkModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def subject_landmarks(v: Volume, mask: Volume, percentiles=PERCENTILES) -> np.ndarray:
    """Percentiles of intensities inside the mask (linear interpolation)."""
    check_geometry(v, mask)
    vals = np.asarray(v.data, dtype=np.float64)[as_mask(mask)]
    if vals.size == 0:
        raise DataError("mask is empty")
    lm = np.percentile(vals, percentiles, method="linear")
    if lm[-1] <= lm[0]:
        raise DataError("degenerate intensity distribution: end landmarks coincide")
    return lm


def train_landmarks(volumes: Sequence[Volume], masks: Sequence[Volume],
                    scale=SCALE) -> LandmarkModel:
    if len(volumes) == 0 or len(volumes) != len(masks):
        raise DataError("need at least one subject and one mask per subject")
    lo, hi = scale
    mapped = []
    for v, m in zip(volumes, masks):
        lm = subject_landmarks(v, m)
        mapped.append(lo + (lm - lm[0]) * (hi - lo) / (lm[-1] - lm[0]))
    targets = np.maximum.accumulate(np.mean(mapped, axis=0))
    return LandmarkModel(PERCENTILES, tuple(targets), tuple(scale))


def transfer_function(landmarks: np.ndarray, targets: np.ndarray):
    """Breakpoints (xs, ys) of the non-decreasing piecewise-linear map.

    Coincident subject landmarks are merged; the map is extended linearly
    beyond the end landmarks with the slopes of the end segments.
    """
    xs, idx = np.unique(landmarks, return_index=True)
    ys = np.maximum.accumulate(np.asarray(targets, dtype=float)[idx])
    return xs, ys


def apply_transfer(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    out = np.interp(values, xs, ys)
    lo_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
    hi_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    below = values < xs[0]
    above = values > xs[-1]
    out[below] = ys[0] + (values[below] - xs[0]) * lo_slope
    out[above] = ys[-1] + (values[above] - xs[-1]) * hi_slope
    return out


def standardize(v: Volume, mask: Volume, model: LandmarkModel) -> Volume:
    """Map ``v`` onto the model's standard scale (applied to every voxel)."""
    lm = subject_landmarks(v, mask, model.percentiles)
    xs, ys = transfer_function(lm, np.asarray(model.targets))
    a = np.asarray(v.data, dtype=np.float64)
    return v.like(apply_transfer(a.ravel(), xs, ys).reshape(a.shape))


def standardize_cohort(volumes: List[Volume], masks: List[Volume], model: LandmarkModel = None):
    if model is None:
        model = train_landmarks(volumes, masks)
    return model, [standardize(v, m, model) for v, m in zip(volumes, masks)]
