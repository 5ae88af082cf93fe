"""
Zero-mean Gaussian-process regression on distribution (or feature) inputs.

The criterion minimized by :func:`fit_ml` is

    L(theta) = (1/n) log det R + (1/n) y' R^{-1} y

which is the Gaussian negative log-likelihood scaled by 2/n, without the
``log(2 pi)`` constant.  All pairwise input geometry (W2 distances, distances
to the fBm origin, or feature differences) is computed once per fit; each
likelihood evaluation then costs one Cholesky factorization.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from .dist_core import QuantileFunction, pairwise_w2, stack_quantiles
from .errors import IllConditionedError, InvalidInputError, NumericError
from .kernels import (FbmSpec, FeatureVector, KernelSpec, LegendreSpec, PcaBasis,
                      PcaSpec, PowExpSpec, _ProjectionSpec, fbm_derivatives,
                      fbm_matrix, feature_absdiff, powexp_derivatives,
                      powexp_matrix, projection_derivatives, projection_matrix,
                      spec_from_dict, spec_to_dict)

logger = logging.getLogger(__name__)

MAX_JITTER_ESCALATIONS = 3
MODEL_FORMAT = "wassgp-model/1"


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """Paired inputs and scalar targets.

    ``inputs`` holds QuantileFunctions for the W2 kernels and FeatureVectors
    for the projection kernels.  ``meta`` carries one provenance tag per
    input, e.g. ``"density"`` or ``"empirical(500)"``.
    """

    inputs: tuple
    targets: np.ndarray
    meta: tuple = ()

    def __post_init__(self):
        inputs = tuple(self.inputs)
        y = np.array(self.targets, dtype=float).ravel()
        if len(inputs) != y.size:
            raise InvalidInputError(
                f"{len(inputs)} inputs but {y.size} targets")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("targets must be finite")
        meta = tuple(self.meta) if self.meta else ("unknown",) * len(inputs)
        if len(meta) != len(inputs):
            raise InvalidInputError("meta must have one tag per input")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "meta", meta)

    def __len__(self):
        return len(self.inputs)


@dataclass
class FitConfig:
    """Options for :func:`fit_ml`.

    ``bounds`` overrides the scale-aware default boxes per parameter name
    (``sigma2``, ``ell``, ``H``, ``delta``, ``ell_<i>``).  ``nugget`` is
    ``"fit"``, ``"off"`` or a fixed non-negative value.
    """

    bounds: dict = field(default_factory=dict)
    n_starts: int = 10
    max_evals: int = 400
    seed: int = 0
    jitter: float = 1e-10
    nugget: object = "fit"
    center_targets: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.n_starts < 1:
            raise InvalidInputError("n_starts must be >= 1")
        if self.max_evals < 1:
            raise InvalidInputError("max_evals must be >= 1")
        if self.jitter < 0:
            raise InvalidInputError("jitter must be >= 0")
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise InvalidInputError(f"bounds for {name} are empty: [{lo}, {hi}]")
        if not (self.nugget in ("fit", "off") or
                (isinstance(self.nugget, (int, float)) and self.nugget >= 0)):
            raise InvalidInputError(f"invalid nugget setting {self.nugget!r}")


@dataclass(frozen=True, eq=False)
class InfoMatrix:
    """``(1/2n) Tr(R^-1 dR_i R^-1 dR_j)`` over the parameters in ``names``."""

    matrix: np.ndarray
    names: tuple
    eigenvalues: np.ndarray


# ---------------------------------------------------------------------------
# geometry: everything about the inputs a kernel needs, computed once
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Geometry:
    dist: np.ndarray | None = None
    same: np.ndarray | None = None
    d0a: np.ndarray | None = None
    d0b: np.ndarray | None = None
    absdiff: np.ndarray | None = None

    @property
    def shape(self):
        ref = self.dist if self.dist is not None else self.absdiff
        return ref.shape[:2]


def _feature_matrix(inputs) -> np.ndarray:
    if len(inputs) == 0:
        raise InvalidInputError("need at least one input")
    if any(not isinstance(x, (FeatureVector, np.ndarray, list, tuple)) for x in inputs):
        raise InvalidInputError("projection kernels need FeatureVector inputs")
    rows = [x.coeffs if isinstance(x, FeatureVector) else np.asarray(x, dtype=float).ravel()
            for x in inputs]
    if len({r.size for r in rows}) != 1:
        raise InvalidInputError("feature vectors differ in length")
    return np.vstack(rows)


def _check_quantile_inputs(inputs):
    for x in inputs:
        if not isinstance(x, QuantileFunction):
            raise InvalidInputError(
                f"W2 kernels need QuantileFunction inputs, got {type(x).__name__}")


def geometry(spec: KernelSpec, a: Sequence, b: Sequence | None = None) -> Geometry:
    """Pairwise structure between input lists ``a`` and ``b`` (default ``a``)."""
    if len(a) == 0 or (b is not None and len(b) == 0):
        raise InvalidInputError("need at least one input")
    if isinstance(spec, _ProjectionSpec):
        fa = _feature_matrix(a)
        fb = fa if b is None else _feature_matrix(b)
        return Geometry(absdiff=feature_absdiff(fa, fb))
    _check_quantile_inputs(a)
    if b is not None:
        _check_quantile_inputs(b)
    dist, same = pairwise_w2(a, b)
    if isinstance(spec, FbmSpec):
        d0a = pairwise_w2([spec.origin], a)[0][0]
        d0b = d0a if b is None else pairwise_w2([spec.origin], b)[0][0]
        return Geometry(dist=dist, same=same, d0a=d0a, d0b=d0b)
    return Geometry(dist=dist, same=same)


def gram_from_geometry(spec: KernelSpec, geo: Geometry) -> np.ndarray:
    if isinstance(spec, PowExpSpec):
        return powexp_matrix(spec, geo.dist, geo.same)
    if isinstance(spec, FbmSpec):
        return fbm_matrix(spec, geo.d0a, geo.d0b, geo.dist)
    if isinstance(spec, _ProjectionSpec):
        return projection_matrix(spec, geo.absdiff)
    raise InvalidInputError(f"unsupported kernel spec {type(spec).__name__}")


def gram_derivatives(spec: KernelSpec, geo: Geometry, names) -> list[np.ndarray]:
    if isinstance(spec, PowExpSpec):
        return powexp_derivatives(spec, geo.dist, geo.same, names)
    if isinstance(spec, FbmSpec):
        return fbm_derivatives(spec, geo.d0a, geo.d0b, geo.dist, names)
    if isinstance(spec, _ProjectionSpec):
        return projection_derivatives(spec, geo.absdiff, names)
    raise InvalidInputError(f"unsupported kernel spec {type(spec).__name__}")


def _check_finite(K):
    bad = np.argwhere(~np.isfinite(K))
    if bad.size:
        i, j = bad[0]
        raise NumericError(f"non-finite kernel value {K[i, j]!r} at pair ({i}, {j})")
    return K


def build_gram(spec: KernelSpec, inputs: Sequence) -> np.ndarray:
    """Covariance matrix ``[K(x_i, x_j)]`` of the inputs."""
    return _check_finite(gram_from_geometry(spec, geometry(spec, inputs)))


# ---------------------------------------------------------------------------
# factorization and likelihood
# ---------------------------------------------------------------------------

def _jitter_levels(R, jitter):
    scale = float(np.mean(np.diag(R)))
    if not scale > 0:
        scale = 1.0
    base = jitter if jitter > 0 else 1e-10
    levels = [base * scale * 10.0 ** k for k in range(MAX_JITTER_ESCALATIONS + 1)]
    if jitter == 0:
        levels = [0.0] + levels[:MAX_JITTER_ESCALATIONS]
    return levels


def cholesky_jitter(R: np.ndarray, jitter: float = 1e-10):
    """Lower Cholesky factor of ``R + j I`` with escalating ``j``.

    Returns ``(chol, j)``.  Raises IllConditionedError carrying the failing
    pivot if the last level still fails.
    """
    _check_finite(R)
    pivot = None
    levels = _jitter_levels(R, jitter)
    for j in levels:
        A = R + j * np.eye(R.shape[0]) if j else R
        c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
        if info == 0:
            return c, j
        if info > 0:
            pivot = float(c[info - 1, info - 1])
    raise IllConditionedError(
        f"covariance matrix not positive definite after jitter {levels[-1]:.3g} "
        f"(smallest pivot {pivot!r})", smallest_pivot=pivot, jitter=levels[-1])


def cholesky_fixed(R: np.ndarray, j: float):
    _check_finite(R)
    A = R + j * np.eye(R.shape[0]) if j else R
    c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        pivot = float(c[info - 1, info - 1]) if info > 0 else None
        raise IllConditionedError(
            f"covariance matrix not positive definite with jitter {j:.3g}",
            smallest_pivot=pivot, jitter=j)
    return c


@dataclass(frozen=True, eq=False)
class _LikState:
    value: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    grad: np.ndarray | None = None


def _lik_from_chol(chol, y):
    n = y.size
    z = solve_triangular(chol, y, lower=True, check_finite=False)
    return (2.0 / n) * float(np.sum(np.log(np.diag(chol)))) + float(z @ z) / n, z


def _likelihood(spec, geo, y, jitter, names=None, fixed_jitter=None) -> _LikState:
    R = _check_finite(gram_from_geometry(spec, geo))
    if fixed_jitter is None:
        chol, used = cholesky_jitter(R, jitter)
    else:
        chol, used = cholesky_fixed(R, fixed_jitter), fixed_jitter
    value, _ = _lik_from_chol(chol, y)
    alpha = cho_solve((chol, True), y, check_finite=False)
    grad = None
    if names:
        n = y.size
        Rinv = cho_solve((chol, True), np.eye(n), check_finite=False)
        grad = np.empty(len(names))
        for k, dR in enumerate(gram_derivatives(spec, geo, names)):
            grad[k] = (np.sum(Rinv * dR) - alpha @ dR @ alpha) / n
    return _LikState(value, chol, alpha, used, grad)


def _dataset_parts(spec, data):
    if isinstance(data, Dataset):
        return data.inputs, data.targets
    inputs, y = data
    return inputs, np.asarray(y, dtype=float).ravel()


def neg_log_lik(spec: KernelSpec, data, jitter: float = 1e-10,
                return_jitter: bool = False):
    """``(1/n) log det R + (1/n) y' R^-1 y`` via Cholesky.

    With ``return_jitter`` the diagonal jitter actually added is returned too.
    """
    inputs, y = _dataset_parts(spec, data)
    st = _likelihood(spec, geometry(spec, inputs), y, jitter)
    return (st.value, st.jitter) if return_jitter else st.value


def neg_log_lik_grad(spec: KernelSpec, data, names=None, jitter: float = 1e-10) -> np.ndarray:
    """Gradient of :func:`neg_log_lik` in the natural parameters ``names``.

    ``names`` defaults to ``spec.param_names``.
    """
    inputs, y = _dataset_parts(spec, data)
    names = tuple(spec.param_names if names is None else names)
    return _likelihood(spec, geometry(spec, inputs), y, jitter, names).grad


# ---------------------------------------------------------------------------
# parameter transforms
# ---------------------------------------------------------------------------

H_LOGIT_EDGE = 13.8  # logit(1 - 1e-6)


class _Transform:
    """Maps natural parameters to unconstrained optimizer coordinates.

    Positive parameters use ``log``; ``H`` uses a logit scaled to its box.
    """

    def __init__(self, names, bounds):
        self.names = tuple(names)
        self.bounds = {k: bounds[k] for k in self.names}

    def _h_box(self):
        return self.bounds["H"]

    def to_u(self, theta):
        u = np.empty(len(self.names))
        for k, name in enumerate(self.names):
            if name == "H":
                lo, hi = self._h_box()
                p = np.clip((theta[k] - lo) / (hi - lo), 1e-12, 1 - 1e-12)
                u[k] = np.clip(np.log(p / (1 - p)), -H_LOGIT_EDGE, H_LOGIT_EDGE)
            else:
                u[k] = np.log(theta[k])
        return u

    def from_u(self, u):
        theta = np.empty(len(self.names))
        jac = np.empty(len(self.names))
        for k, name in enumerate(self.names):
            if name == "H":
                lo, hi = self._h_box()
                s = 1.0 / (1.0 + np.exp(-u[k]))
                theta[k] = lo + (hi - lo) * s
                jac[k] = (hi - lo) * s * (1 - s)
            else:
                theta[k] = np.exp(u[k])
                jac[k] = theta[k]
        return theta, jac

    def u_bounds(self):
        out = []
        for name in self.names:
            if name == "H":
                out.append((-H_LOGIT_EDGE, H_LOGIT_EDGE))
            else:
                lo, hi = self.bounds[name]
                out.append((np.log(lo), np.log(hi)))
        return out

    def sample_starts(self, n, rng):
        """Scrambled Halton starts, log-uniform for scales and uniform for H.

        The sequence is nested: the first ``n`` starts do not depend on how
        many are requested, so more starts never give a worse optimum.
        """
        unit = qmc.Halton(d=len(self.names), scramble=True, seed=rng).random(n)
        theta = np.empty_like(unit)
        for k, name in enumerate(self.names):
            lo, hi = self.bounds[name]
            if name == "H":
                theta[:, k] = lo + (hi - lo) * unit[:, k]
            else:
                theta[:, k] = np.exp(np.log(lo) + (np.log(hi) - np.log(lo)) * unit[:, k])
        return np.vstack([self.to_u(t) for t in theta])


def free_parameter_names(variant: str, order: int | None, nugget) -> tuple:
    variant = variant.upper()
    if variant == "POWEXP":
        return ("sigma2", "ell", "H") + (("delta",) if nugget == "fit" else ())
    if variant == "FBM":
        return ("H",)
    if variant in ("LEGENDRE", "PCA"):
        return ("sigma2",) + tuple(f"ell_{i}" for i in range(order)) + ("H",)
    raise InvalidInputError(f"unknown kernel variant {variant!r}")


def default_bounds(variant: str, geo: Geometry, y: np.ndarray, order=None) -> dict:
    """Scale-aware parameter boxes.

    ``sigma2`` in ``[1e-6, 1e4] * var(y)``; ``delta`` in ``[1e-8, 10] * var(y)``;
    ``H`` in ``[0.01, 1]``; ``ell`` in ``[1e-3, 1e3]`` times the median
    pairwise ``W^2H`` (extremes over the H box); ``ell_i`` in ``[1e-3, 1e3]``
    times the median pairwise ``|da_i|``.
    """
    variant = variant.upper()
    vy = float(np.var(y))
    if not vy > 0:
        vy = 1.0
    b = {"sigma2": (1e-6 * vy, 1e4 * vy), "H": (0.01, 1.0),
         "delta": (1e-8 * vy, 10.0 * vy)}
    iu = np.triu_indices(geo.shape[0], k=1)
    if variant in ("POWEXP", "FBM"):
        d = geo.dist[iu]
        d = d[d > 0]
        med = float(np.median(d)) if d.size else 1.0
        scales = [med ** (2 * h) for h in b["H"]]
        b["ell"] = (1e-3 * min(scales), 1e3 * max(scales))
    else:
        for i in range(order):
            di = geo.absdiff[..., i][iu]
            med = float(np.median(di)) if di.size else 0.0
            if not med > 1e-12:
                med = 1.0
            b[f"ell_{i}"] = (1e-3 * med, 1e3 * med)
    return b


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GPModel:
    """A fitted GP: kernel spec, training inputs, Cholesky factor and weights.

    ``nll`` is the attained ``L(theta)``; ``loglik = -(n/2) * nll`` is the
    log-likelihood up to the ``-(n/2) log(2 pi)`` constant.
    """

    spec: KernelSpec
    inputs: tuple
    targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    nll: float
    jitter: float
    y_offset: float = 0.0
    free_params: tuple = ()
    fit_info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def loglik(self) -> float:
        return -0.5 * self.n * self.nll

    @property
    def centered_targets(self) -> np.ndarray:
        return self.targets - self.y_offset


def _start_spec(variant, names, theta, fixed, origin, basis, order):
    vals = dict(zip(names, theta))
    vals.update(fixed)
    if variant == "POWEXP":
        return PowExpSpec(vals["sigma2"], vals["ell"], vals["H"], vals.get("delta", 0.0))
    if variant == "FBM":
        return FbmSpec(vals["H"], origin)
    ells = tuple(vals[f"ell_{i}"] for i in range(order))
    if variant == "LEGENDRE":
        return LegendreSpec(vals["sigma2"], ells, vals["H"])
    return PcaSpec(vals["sigma2"], ells, vals["H"], basis)


PENALTY = 1e10


def make_model(spec: KernelSpec, data: Dataset, jitter: float = 1e-10,
               y_offset: float = 0.0, free_params=(), fit_info=None,
               fixed_jitter: float | None = None) -> GPModel:
    """Factor the covariance of ``data`` under ``spec`` and wrap it as a model."""
    y = data.targets - y_offset
    st = _likelihood(spec, geometry(spec, data.inputs), y, jitter, fixed_jitter=fixed_jitter)
    return GPModel(spec, data.inputs, data.targets.copy(), st.chol, st.alpha,
                   st.value, st.jitter, float(y_offset), tuple(free_params),
                   dict(fit_info or {}))


def fit_ml(data: Dataset, variant: str, config: FitConfig | None = None, *,
           origin: QuantileFunction | None = None, basis: PcaBasis | None = None) -> GPModel:
    """Maximum-likelihood fit over a box, by multi-start local optimization.

    POWEXP and projection variants use L-BFGS-B with analytic gradients in
    log/logit coordinates; FBM uses bounded Nelder-Mead.  The best start is
    chosen by ``(value, start index)`` so the result does not depend on
    ``config.threads``.
    """
    config = config or FitConfig()
    variant = variant.upper()
    if len(data) < 2:
        raise InvalidInputError("fitting needs at least 2 observations")
    y_offset = float(np.mean(data.targets)) if config.center_targets else 0.0
    y = data.targets - y_offset

    order = None
    if variant in ("LEGENDRE", "PCA"):
        order = _feature_matrix(data.inputs).shape[1]
        if variant == "PCA" and basis is not None and basis.order != order:
            raise InvalidInputError("PCA basis order differs from feature length")
    if variant == "FBM" and origin is None:
        m = data.inputs[0].grid_size
        origin = QuantileFunction(np.zeros(m))

    names = free_parameter_names(variant, order, config.nugget)
    fixed = {}
    if variant == "POWEXP" and config.nugget != "fit":
        fixed["delta"] = 0.0 if config.nugget == "off" else float(config.nugget)

    probe = _start_spec(variant, names, [1.0 if n != "H" else 0.5 for n in names],
                        fixed, origin, basis, order)
    geo = geometry(probe, data.inputs)
    bounds = default_bounds(variant, geo, y, order)
    bounds.update(config.bounds)
    tr = _Transform(names, bounds)
    use_grad = variant != "FBM"

    def objective(u):
        theta, jac = tr.from_u(u)
        try:
            spec = _start_spec(variant, names, theta, fixed, origin, basis, order)
            st = _likelihood(spec, geo, y, config.jitter, names if use_grad else None)
        except (NumericError, InvalidInputError):
            return (PENALTY, np.zeros_like(u)) if use_grad else PENALTY
        if not np.isfinite(st.value):
            return (PENALTY, np.zeros_like(u)) if use_grad else PENALTY
        if use_grad:
            return st.value, st.grad * jac
        return st.value

    rng = np.random.default_rng(config.seed)
    starts = tr.sample_starts(config.n_starts, rng)
    ub = tr.u_bounds()

    def run(k):
        u0 = starts[k]
        f0 = objective(u0)
        f0 = f0[0] if use_grad else f0
        if use_grad:
            res = minimize(objective, u0, jac=True, method="L-BFGS-B", bounds=ub,
                           options={"maxfun": config.max_evals, "ftol": 1e-12,
                                    "gtol": 1e-8})
        else:
            res = minimize(objective, u0, method="Nelder-Mead", bounds=ub,
                           options={"maxfev": config.max_evals, "xatol": 1e-8,
                                    "fatol": 1e-12})
        u_best, f_best = (res.x, float(res.fun)) if res.fun <= f0 else (u0, f0)
        return {"index": k, "start_value": float(f0), "value": float(f_best),
                "u": np.asarray(u_best), "nfev": int(res.nfev)}

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, range(config.n_starts)))
    else:
        results = [run(k) for k in range(config.n_starts)]

    ok = [r for r in results if r["value"] < PENALTY]
    if not ok:
        raise IllConditionedError(
            "every optimizer start failed to factor the covariance matrix")
    best = min(ok, key=lambda r: (r["value"], r["index"]))
    theta, _ = tr.from_u(best["u"])
    spec = _start_spec(variant, names, theta, fixed, origin, basis, order)
    info = {
        "start_values": [r["start_value"] for r in results],
        "final_values": [r["value"] for r in results],
        "best_start": best["index"],
        "nfev": sum(r["nfev"] for r in results),
        "bounds": {k: list(v) for k, v in bounds.items() if k in names},
        "centered": bool(config.center_targets),
    }
    return make_model(spec, data, config.jitter, y_offset, names, info)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

VARIANCE_CLAMP_REL = 1e-8


def predict_many(model: GPModel, queries: Sequence):
    """Posterior means and variances at several query inputs."""
    spec = model.spec
    geo_qt = geometry(spec, list(queries), list(model.inputs))
    r = _check_finite(gram_from_geometry(spec, geo_qt))
    if isinstance(spec, FbmSpec):
        kqq = np.power(geo_qt.d0a, 2.0 * spec.H)
    elif isinstance(spec, PowExpSpec):
        kqq = np.full(len(queries), spec.sigma2 + spec.delta)
    else:
        kqq = np.full(len(queries), spec.sigma2)
    mean = r @ model.alpha + model.y_offset
    w = solve_triangular(model.chol, r.T, lower=True, check_finite=False)
    var = kqq - np.sum(w * w, axis=0)
    neg = var < 0
    if np.any(neg):
        too_neg = var < -VARIANCE_CLAMP_REL * np.abs(kqq)
        if np.any(too_neg):
            i = int(np.argmax(too_neg))
            raise NumericError(
                f"posterior variance {var[i]!r} at query {i} is below "
                f"-{VARIANCE_CLAMP_REL}*K(x, x)")
        warnings.warn(f"clamped {int(neg.sum())} slightly negative posterior variances to 0",
                      RuntimeWarning, stacklevel=2)
        var = np.where(neg, 0.0, var)
    return mean, var


def predict(model: GPModel, query) -> tuple[float, float]:
    """Posterior mean and variance at one query input."""
    mean, var = predict_many(model, [query])
    return float(mean[0]), float(var[0])


# ---------------------------------------------------------------------------
# information matrix
# ---------------------------------------------------------------------------

def info_matrix_at(spec: KernelSpec, inputs: Sequence, names=None,
                   jitter: float = 1e-10) -> InfoMatrix:
    names = tuple(spec.param_names if names is None else names)
    geo = geometry(spec, inputs)
    R = _check_finite(gram_from_geometry(spec, geo))
    chol, _ = cholesky_jitter(R, jitter)
    n = R.shape[0]
    A = [cho_solve((chol, True), dR, check_finite=False)
         for dR in gram_derivatives(spec, geo, names)]
    p = len(names)
    M = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            # Tr(A_i A_j) with A = R^-1 dR
            M[i, j] = M[j, i] = np.sum(A[i] * A[j].T) / (2.0 * n)
    return InfoMatrix(M, names, np.linalg.eigvalsh(M))


def info_matrix(model: GPModel, data: Dataset | None = None) -> InfoMatrix:
    """Asymptotic information matrix at the fitted parameters."""
    inputs = model.inputs if data is None else data.inputs
    names = model.free_params or model.spec.param_names
    return info_matrix_at(model.spec, inputs, names, model.jitter or 1e-10)


# ---------------------------------------------------------------------------
# quality criteria
# ---------------------------------------------------------------------------

def rmse(preds, truths) -> float:
    preds = np.asarray(preds, dtype=float).ravel()
    truths = np.asarray(truths, dtype=float).ravel()
    if preds.shape != truths.shape:
        raise InvalidInputError("predictions and truths differ in length")
    return float(np.sqrt(np.mean((preds - truths) ** 2)))


def normal_quantile_for_level(alpha: float) -> float:
    """The ``(1/2 + alpha/2)`` standard-normal quantile."""
    return float(norm.ppf(0.5 + 0.5 * alpha))


def cir(preds, sds, truths, alpha: float = 0.9) -> float:
    """Fraction of truths inside the symmetric level-``alpha`` Gaussian intervals."""
    preds = np.asarray(preds, dtype=float).ravel()
    sds = np.asarray(sds, dtype=float).ravel()
    truths = np.asarray(truths, dtype=float).ravel()
    if not (preds.shape == sds.shape == truths.shape):
        raise InvalidInputError("predictions, sds and truths differ in length")
    if np.any(sds < 0):
        raise InvalidInputError("standard deviations must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError("alpha must lie in (0, 1)")
    q = normal_quantile_for_level(alpha)
    return float(np.mean(np.abs(truths - preds) <= q * sds))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def model_to_dict(model: GPModel) -> dict:
    if model.spec.on_features:
        kind = "feature"
        values = [list(map(float, x.coeffs if isinstance(x, FeatureVector) else x))
                  for x in model.inputs]
    else:
        kind = "quantile"
        values = stack_quantiles(model.inputs).tolist()
    return {
        "format": MODEL_FORMAT,
        "kernel": spec_to_dict(model.spec),
        "free_params": list(model.free_params),
        "estimates": {n: model.spec.get(n) for n in model.spec.param_names},
        "inputs": {"kind": kind, "values": values},
        "targets": model.targets.tolist(),
        "y_offset": model.y_offset,
        "alpha": model.alpha.tolist(),
        "jitter": model.jitter,
        "nll": model.nll,
    }


def dump_model(model: GPModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True)


def model_from_dict(d: dict) -> GPModel:
    if d.get("format") != MODEL_FORMAT:
        raise InvalidInputError(f"not a {MODEL_FORMAT} document")
    spec = spec_from_dict(d["kernel"])
    kind = d["inputs"]["kind"]
    if kind == "quantile":
        inputs = tuple(QuantileFunction(v) for v in d["inputs"]["values"])
    elif kind == "feature":
        inputs = tuple(FeatureVector(v) for v in d["inputs"]["values"])
    else:
        raise InvalidInputError(f"unknown input kind {kind!r}")
    data = Dataset(inputs, d["targets"])
    model = make_model(spec, data, y_offset=d["y_offset"], free_params=d["free_params"],
                       fixed_jitter=float(d["jitter"]))
    stored = float(d["nll"])
    if abs(model.nll - stored) > 1e-8 * max(1.0, abs(stored)):
        raise NumericError(
            f"recomputed likelihood {model.nll!r} differs from stored {stored!r}")
    return model


def load_model(text: str) -> GPModel:
    return model_from_dict(json.loads(text))
