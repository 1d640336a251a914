"""Gaussian process regression for occupancy, distance and surface properties.

A squared-exponential GP is fit to a cluster of surface points with a
constant latent occupancy target of 1. The posterior occupancy decays
with distance from the training set, so inverting the kernel profile
recovers the Euclidean distance to the cluster. Inference also yields
a propagated distance variance, an analytic distance gradient, and
regressed surface properties with their own latent variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

RATIO_EPS = 1e-12
# occupancy ratio above this counts as on-surface for variance purposes
SINGULAR_RATIO = 1.0 - 1e-9


class FactorizationFailure(RuntimeError):
    """Kernel matrix remained indefinite after jitter escalation."""


@dataclass
class KernelParams:
    """Squared-exponential kernel and reverting-function parameters.

    d_max caps reverted distances (default three length scales) and
    v_max bounds the propagated distance variance. When v_max is left
    unset it defaults to the variance a single-point model yields two
    length scales from its training point, which is where inferred
    distances stop being trustworthy.
    """

    sigma2: float = 1.0
    length_scale: float = 0.15
    noise2: float = 1e-4
    prop_noise2: float = 1e-2
    d_max: Optional[float] = None
    v_max: Optional[float] = None
    v_floor: float = 0.0
    grad_eps: float = 1e-8

    def __post_init__(self):
        if self.sigma2 <= 0 or self.length_scale <= 0:
            raise ValueError("sigma2 and length_scale must be positive")
        if self.noise2 < 0 or self.prop_noise2 < 0:
            raise ValueError("noise variances must be non-negative")
        if self.d_max is None:
            self.d_max = 3.0 * self.length_scale
        if self.v_max is None:
            self.v_max = reference_distance_variance(self)


def reference_distance_variance(params: KernelParams) -> float:
    """Propagated variance of a one-point model queried at 2 length scales."""
    e4 = np.exp(4.0)
    v = (params.length_scale ** 2 * params.noise2 ** 2
         * e4 * (1.0 - 1.0 / e4) / (4.0 * params.sigma2))
    return max(float(v), np.finfo(np.float64).tiny)


def se_kernel(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    """Squared-exponential covariance between two point sets.

    Accepts (n, 3) arrays or single points; returns the (n, m) Gram
    block (scalar for two single points).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d2 = cdist(a, b, "sqeuclidean")
    k = params.sigma2 * np.exp(-0.5 * d2 / params.length_scale ** 2)
    return k if k.size > 1 else float(k[0, 0])


def _kernel_matrix(a: np.ndarray, b: np.ndarray, params: KernelParams) -> np.ndarray:
    d2 = cdist(a, b, "sqeuclidean")
    return params.sigma2 * np.exp(-0.5 * d2 / params.length_scale ** 2)


def _cholesky_with_jitter(k: np.ndarray, noise2: float, sigma2: float) -> np.ndarray:
    n = k.shape[0]
    eye = np.eye(n)
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(k + (noise2 + jitter) * eye)
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = 1e-8 * sigma2
            else:
                jitter *= 10.0
            if jitter > 1e-2 * sigma2:
                raise FactorizationFailure(
                    f"kernel matrix of size {n} not positive definite "
                    f"after jitter escalation to {jitter:.3g}") from None


@dataclass
class GpLeafModel:
    """Trained GP over one cluster of surface points."""

    train_points: np.ndarray        # (J, 3)
    params: KernelParams
    chol: np.ndarray                # lower Cholesky of K + noise2*I
    alpha_occ: np.ndarray           # (J,) weights for the unit occupancy target
    centroid: np.ndarray            # (3,) mean of training points
    properties: Optional[np.ndarray] = None   # (J, P) training targets
    chol_prop: Optional[np.ndarray] = None
    alpha_prop: Optional[np.ndarray] = None   # (J, P)

    @property
    def n_train(self) -> int:
        return len(self.train_points)


def train(points: np.ndarray, params: KernelParams,
          properties: Optional[np.ndarray] = None) -> GpLeafModel:
    """Fit occupancy (and optional property) regressors to a point cluster.

    Args:
        points: (J, 3) training positions, J >= 1.
        params: kernel hyperparameters.
        properties: optional (J, P) per-point property targets.

    Raises:
        FactorizationFailure: if the Gram matrix cannot be factorized
            even after escalating diagonal jitter.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError("cannot train on an empty point set")
    k = _kernel_matrix(x, x, params)
    chol = _cholesky_with_jitter(k, params.noise2, params.sigma2)
    ones = np.ones(len(x))
    alpha = solve_triangular(chol.T, solve_triangular(chol, ones, lower=True),
                             lower=False)
    model = GpLeafModel(train_points=x, params=params, chol=chol,
                        alpha_occ=alpha, centroid=x.mean(axis=0))
    if properties is not None:
        p = np.asarray(properties, dtype=np.float64).reshape(len(x), -1)
        if params.prop_noise2 == params.noise2:
            cp = chol
        else:
            cp = _cholesky_with_jitter(k, params.prop_noise2, params.sigma2)
        model.properties = p
        model.chol_prop = cp
        model.alpha_prop = solve_triangular(
            cp.T, solve_triangular(cp, p, lower=True), lower=False)
    return model


def _as_queries(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 1
    return x.reshape(-1, 3), scalar


def infer_occupancy(model: GpLeafModel, x: np.ndarray):
    """Posterior latent occupancy mean and variance at query points.

    Returns (o_hat, u_hat); scalars for a single (3,) query.
    """
    q, scalar = _as_queries(x)
    kq = _kernel_matrix(q, model.train_points, model.params)
    o = kq @ model.alpha_occ
    v = solve_triangular(model.chol, kq.T, lower=True)
    u = model.params.sigma2 - np.einsum("ij,ij->j", v, v)
    u = np.clip(u, 0.0, model.params.sigma2)
    if scalar:
        return float(o[0]), float(u[0])
    return o, u


def revert_distance(o_hat, params: KernelParams):
    """Invert the kernel occupancy profile into a Euclidean distance.

    The ratio o_hat/sigma2 is clamped into [RATIO_EPS, 1] before the
    logarithm and the result is capped at params.d_max, so degenerate
    occupancies map to the far-field distance instead of inf/nan.
    """
    o = np.asarray(o_hat, dtype=np.float64)
    ratio = np.clip(o / params.sigma2, RATIO_EPS, 1.0)
    d = params.length_scale * np.sqrt(-2.0 * np.log(ratio))
    d = np.minimum(d, params.d_max)
    return float(d) if np.ndim(o_hat) == 0 else d


def propagate_variance(u_hat, o_hat, params: KernelParams):
    """First-order propagation of latent variance through the reverting map.

    The scale factor is the reverting function's sensitivity to the
    occupancy, weighted by the observation noise. On-surface queries
    (occupancy ratio -> 1) sit on the map's singularity and report
    params.v_floor; results are clamped to [0, params.v_max].
    """
    u = np.asarray(u_hat, dtype=np.float64)
    o = np.asarray(o_hat, dtype=np.float64)
    ratio = np.clip(o / params.sigma2, RATIO_EPS, 1.0)
    singular = ratio >= SINGULAR_RATIO
    safe = np.where(singular, 0.5, ratio)
    lam = (params.length_scale * params.noise2
           / (safe * params.sigma2 * np.sqrt(-2.0 * np.log(safe))))
    v = lam * lam * np.maximum(u, 0.0)
    v = np.where(singular, params.v_floor, v)
    v = np.clip(v, 0.0, params.v_max)
    return float(v) if np.ndim(u_hat) == 0 and np.ndim(o_hat) == 0 else v


def occupancy_gradient(model: GpLeafModel, x: np.ndarray):
    """Analytic gradient of the posterior occupancy mean."""
    q, scalar = _as_queries(x)
    kq = _kernel_matrix(q, model.train_points, model.params)
    w = kq * model.alpha_occ[None, :]
    diff = model.train_points[None, :, :] - q[:, None, :]
    g = np.einsum("ij,ijk->ik", w, diff) / model.params.length_scale ** 2
    return g[0] if scalar else g


def infer_distance_gradient(model: GpLeafModel, x: np.ndarray):
    """Unit gradient of the inferred distance at query points.

    The chain rule through the reverting function scales the occupancy
    gradient by a strictly negative factor, so the unit direction is
    the negated, normalized occupancy gradient. Queries where the raw
    gradient magnitude falls below params.grad_eps return a zero
    vector.
    """
    q, scalar = _as_queries(x)
    g = occupancy_gradient(model, q)
    norm = np.linalg.norm(g, axis=1)
    out = np.zeros_like(g)
    ok = norm > model.params.grad_eps
    out[ok] = -g[ok] / norm[ok, None]
    return out[0] if scalar else out


def distance_gradient_raw(model: GpLeafModel, x: np.ndarray):
    """Unnormalized distance gradient (chain rule applied, no unit scaling)."""
    q, scalar = _as_queries(x)
    o, _ = infer_occupancy(model, q)
    o = np.atleast_1d(o)
    g = occupancy_gradient(model, q)
    ratio = np.clip(o / model.params.sigma2, RATIO_EPS, 1.0 - 1e-15)
    d = model.params.length_scale * np.sqrt(-2.0 * np.log(ratio))
    # dr/do of the reverting function, strictly negative
    slope = -model.params.length_scale ** 2 / (ratio * model.params.sigma2 * d)
    out = slope[:, None] * g
    return out[0] if scalar else out


def infer_property(model: GpLeafModel, x: np.ndarray, clip_range=None):
    """Posterior property mean and shared latent variance at query points.

    Args:
        clip_range: optional (low, high) bounds applied per channel.

    Returns:
        (c_hat, w_hat) with c_hat of shape (n, P); scalars collapse for
        a single (3,) query. Raises ValueError if the model was trained
        without properties.
    """
    if model.alpha_prop is None:
        raise ValueError("model has no property regressor")
    q, scalar = _as_queries(x)
    kq = _kernel_matrix(q, model.train_points, model.params)
    c = kq @ model.alpha_prop
    v = solve_triangular(model.chol_prop, kq.T, lower=True)
    w = model.params.sigma2 - np.einsum("ij,ij->j", v, v)
    w = np.clip(w, 0.0, model.params.sigma2)
    if clip_range is not None:
        c = np.clip(c, clip_range[0], clip_range[1])
    if scalar:
        return c[0], float(w[0])
    return c, w
