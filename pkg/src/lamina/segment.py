"""EM-fitted Gaussian mixture tissue classification with voxelwise priors."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, ParameterError
from .grid import Volume, as_mask, check_geometry

log = logging.getLogger(__name__)

TISSUES = ("WM", "GM", "CSF", "other")
_LOG2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    means: np.ndarray
    variances: np.ndarray
    priors: List[Volume]
    flat_priors: bool = False
    degenerate: List[int] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0

    @property
    def K(self) -> int:
        return len(self.means)

    def to_dict(self) -> dict:
        return {"K": self.K, "means": [float(m) for m in self.means],
                "variances": [float(v) for v in self.variances],
                "flat_priors": self.flat_priors, "degenerate_classes": list(self.degenerate),
                "converged": self.converged, "n_iter": self.n_iter}


@dataclass
class PosteriorStack:
    volumes: List[Volume]

    def as_array(self) -> np.ndarray:
        return np.stack([v.data for v in self.volumes], axis=-1)


def flat_priors(mask: Volume, K: int) -> List[Volume]:
    return [mask.like(np.full(mask.dims, 1.0 / K)) for _ in range(K)]


def _log_gauss(x: np.ndarray, means, variances) -> np.ndarray:
    var = np.asarray(variances)[None, :]
    return -0.5 * (_LOG2PI + np.log(var) + (x[:, None] - np.asarray(means)[None, :]) ** 2 / var)


def _e_step(x, log_pi, means, variances):
    lw = log_pi + _log_gauss(x, means, variances)
    lse = logsumexp(lw, axis=1)
    return np.exp(lw - lse[:, None]), float(np.sum(lse))


def fit_em(v: Volume, mask: Volume, priors: Optional[Sequence[Volume]] = None, K: int = 4,
           tol: float = 1e-6, max_iter: int = 200):
    """Fit a K-class Gaussian mixture by EM with per-voxel class priors.

    Responsibilities are ``r_k(x) ∝ pi_k(x) N(v(x); mu_k, var_k)``; the
    priors stay fixed and only means and variances are re-estimated.
    Without priors every class gets 1/K and the fitted classes are reported
    in ascending-mean order.

    Returns
    -------
    model : GmmModel
    posteriors : PosteriorStack
    ll_trace : list of float
        Log-likelihood at the initial parameters followed by one value per
        EM round.
    """
    check_geometry(v, mask)
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    m = as_mask(mask)
    n = int(m.sum())
    if n <= 10 * K:
        raise DataError(f"mask has {n} voxels; need more than {10 * K}")
    flat = priors is None
    if flat:
        priors = flat_priors(mask, K)
    if len(priors) != K:
        raise DataError(f"got {len(priors)} prior volumes for K={K}")
    check_geometry(v, *priors)
    pi = np.stack([np.asarray(p.data, dtype=np.float64)[m] for p in priors], axis=1)
    if np.any(pi < 0) or not np.all(np.isfinite(pi)):
        raise DataError("priors must be finite and nonnegative")
    if np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-6:
        raise DataError("priors do not sum to 1 inside the mask")
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)

    x = np.asarray(v.data, dtype=np.float64)[m]
    rng = float(x.max() - x.min())
    floor = max((1e-3 * rng) ** 2, np.finfo(float).tiny)
    means = np.percentile(x, [100.0 * (k + 1) / (K + 1) for k in range(K)])
    variances = np.full(K, max(float(x.var()) / K, floor))

    r, ll = _e_step(x, log_pi, means, variances)
    trace = [ll]
    degenerate = set()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nk = r.sum(axis=0)
        new_means = means.copy()
        new_vars = variances.copy()
        for k in range(K):
            if nk[k] < 1e-6:
                # keep the previous parameters: still a valid (generalized) M-step
                degenerate.add(k)
                continue
            new_means[k] = np.sum(r[:, k] * x) / nk[k]
            new_vars[k] = max(np.sum(r[:, k] * (x - new_means[k]) ** 2) / nk[k], floor)
        means, variances = new_means, new_vars
        r, ll = _e_step(x, log_pi, means, variances)
        prev = trace[-1]
        trace.append(ll)
        if abs(ll - prev) < tol * abs(ll):
            converged = True
            break
    if degenerate:
        log.warning("degenerate classes %s: responsibility mass < 1e-6", sorted(degenerate))

    if flat:
        order = np.argsort(means, kind="stable")
        means, variances, r = means[order], variances[order], r[:, order]
        degenerate = {int(np.where(order == k)[0][0]) for k in degenerate}

    post = []
    for k in range(K):
        a = np.zeros(v.dims)
        a[m] = r[:, k]
        post.append(v.like(a))
    model = GmmModel(means, variances, list(priors), flat, sorted(degenerate), converged, it)
    return model, PosteriorStack(post), trace


def hard_segment(post: PosteriorStack, class_map: Dict[int, str], mask: Optional[Volume] = None):
    """Argmax labelling (ties go to the lowest class index) split into WM and GM masks."""
    K = len(post.volumes)
    missing = [k for k in range(K) if k not in class_map]
    if missing:
        raise ParameterError(f"class_map does not cover classes {missing}")
    for k, t in class_map.items():
        if t not in TISSUES:
            raise ParameterError(f"class_map: unknown tissue {t!r} for class {k}")
    P = post.as_array()
    lab = np.argmax(P, axis=-1)
    inside = as_mask(mask) if mask is not None else P.sum(axis=-1) > 0
    wm_classes = [k for k in range(K) if class_map[k] == "WM"]
    gm_classes = [k for k in range(K) if class_map[k] == "GM"]
    wm = np.isin(lab, wm_classes) & inside
    gm = np.isin(lab, gm_classes) & inside
    ref = post.volumes[0]
    return ref.like(wm), ref.like(gm)


def parse_class_map(d) -> Dict[int, str]:
    """Accepts ``{"0": "WM", ...}`` or a list ``["WM", "GM", ...]``."""
    if isinstance(d, (list, tuple)):
        return {i: str(t) for i, t in enumerate(d)}
    try:
        return {int(k): str(t) for k, t in dict(d).items()}
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"class_map: {exc}") from None
