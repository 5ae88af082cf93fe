"""
Covariance functions on distribution inputs.

Two families act on quantile functions through the W2 distance:

* fractional Brownian  ``K(a, b) = (W(o, a)^2H + W(o, b)^2H - W(a, b)^2H) / 2``
* power exponential    ``K(a, b) = s2 * exp(-W(a, b)^2H / ell) + delta * 1{a == b}``

and two baseline families act on finite feature vectors (Legendre
coefficients or PCA scores of the density):

* projection           ``K(a, b) = s2 * exp(-(sum_i |a_i - b_i| / ell_i)^H)``

Each family has a scalar form (``*_kernel``), a matrix form working on
precomputed distances, and analytic parameter derivatives of the matrix form.
Derivatives are with respect to the natural parameters in the order given by
``spec.param_names``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import ClassVar, Sequence

import numpy as np
from numpy.polynomial import legendre as npleg

from .dist_core import GridDensity, QuantileFunction, w2_distance
from .errors import InvalidInputError

VARIANTS = ("FBM", "POWEXP", "LEGENDRE", "PCA")


def _positive(name, value):
    value = float(value)
    if not (np.isfinite(value) and value > 0):
        raise InvalidInputError(f"{name} must be positive, got {value!r}")
    return value


def _exponent(value):
    value = float(value)
    if not (0.0 < value <= 1.0):
        raise InvalidInputError(f"H must lie in (0, 1], got {value!r}")
    return value


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

class KernelSpec:
    """Base for the tagged kernel parameter records."""

    variant: ClassVar[str] = ""
    on_features: ClassVar[bool] = False

    @property
    def param_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def param_values(self) -> np.ndarray:
        return np.array([self.get(n) for n in self.param_names], dtype=float)

    def get(self, name: str) -> float:
        if name.startswith("ell_"):
            return float(self.ells[int(name[4:])])
        return float(getattr(self, name))

    def with_params(self, values: dict) -> "KernelSpec":
        plain = {k: float(v) for k, v in values.items() if not k.startswith("ell_")}
        if any(k.startswith("ell_") for k in values):
            ells = list(self.ells)
            for k, v in values.items():
                if k.startswith("ell_"):
                    ells[int(k[4:])] = float(v)
            plain["ells"] = tuple(ells)
        return replace(self, **plain)


@dataclass(frozen=True, eq=False)
class FbmSpec(KernelSpec):
    H: float
    origin: QuantileFunction

    variant: ClassVar[str] = "FBM"

    def __post_init__(self):
        object.__setattr__(self, "H", _exponent(self.H))
        if not isinstance(self.origin, QuantileFunction):
            raise InvalidInputError("fBm origin must be a QuantileFunction")

    @property
    def param_names(self):
        return ("H",)


@dataclass(frozen=True)
class PowExpSpec(KernelSpec):
    sigma2: float
    ell: float
    H: float
    delta: float = 0.0

    variant: ClassVar[str] = "POWEXP"

    def __post_init__(self):
        object.__setattr__(self, "sigma2", _positive("sigma2", self.sigma2))
        object.__setattr__(self, "ell", _positive("ell", self.ell))
        object.__setattr__(self, "H", _exponent(self.H))
        delta = float(self.delta)
        if not (np.isfinite(delta) and delta >= 0):
            raise InvalidInputError(f"delta must be >= 0, got {delta!r}")
        object.__setattr__(self, "delta", delta)

    @property
    def param_names(self):
        return ("sigma2", "ell", "H", "delta")


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """Top principal directions of discretized densities (rows of ``components``)."""

    mean: np.ndarray
    components: np.ndarray
    center_projection: bool = False

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).ravel()
        comps = np.atleast_2d(np.array(self.components, dtype=float))
        if comps.shape[1] != mean.size:
            raise InvalidInputError("PCA components and mean differ in length")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-8, rtol=0):
            raise InvalidInputError("PCA components are not orthonormal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)

    @property
    def d(self) -> int:
        return self.mean.size

    @property
    def order(self) -> int:
        return self.components.shape[0]


@dataclass(frozen=True, eq=False)
class _ProjectionSpec(KernelSpec):
    sigma2: float
    ells: tuple
    H: float

    on_features: ClassVar[bool] = True

    def __post_init__(self):
        object.__setattr__(self, "sigma2", _positive("sigma2", self.sigma2))
        ells = tuple(_positive("ell_i", e) for e in np.ravel(self.ells))
        if len(ells) < 1:
            raise InvalidInputError("projection kernel needs order >= 1")
        object.__setattr__(self, "ells", ells)
        object.__setattr__(self, "H", _exponent(self.H))

    @property
    def order(self) -> int:
        return len(self.ells)

    @property
    def param_names(self):
        return ("sigma2",) + tuple(f"ell_{i}" for i in range(self.order)) + ("H",)


@dataclass(frozen=True, eq=False)
class LegendreSpec(_ProjectionSpec):
    variant: ClassVar[str] = "LEGENDRE"


@dataclass(frozen=True, eq=False)
class PcaSpec(_ProjectionSpec):
    basis: PcaBasis | None = None

    variant: ClassVar[str] = "PCA"

    def __post_init__(self):
        super().__post_init__()
        if self.basis is not None and self.basis.order != self.order:
            raise InvalidInputError("PCA basis order differs from number of ells")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("feature coefficients must be finite")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def __len__(self):
        return self.coeffs.size


# ---------------------------------------------------------------------------
# matrix forms and derivatives
# ---------------------------------------------------------------------------

def _pow2h(x, H):
    return np.power(x, 2.0 * H)


def _log_where_positive(x):
    out = np.zeros_like(x, dtype=float)
    np.log(x, out=out, where=x > 0)
    return out


def powexp_matrix(spec: PowExpSpec, dist, same) -> np.ndarray:
    K = spec.sigma2 * np.exp(-_pow2h(dist, spec.H) / spec.ell)
    if spec.delta:
        K = K + spec.delta * same
    return K


def powexp_derivatives(spec: PowExpSpec, dist, same, names=None) -> list[np.ndarray]:
    names = spec.param_names if names is None else names
    w = _pow2h(dist, spec.H)
    e = np.exp(-w / spec.ell)
    out = []
    for name in names:
        if name == "sigma2":
            out.append(e)
        elif name == "ell":
            out.append(spec.sigma2 * e * w / spec.ell ** 2)
        elif name == "H":
            out.append(-spec.sigma2 * e * w * 2.0 * _log_where_positive(dist) / spec.ell)
        elif name == "delta":
            out.append(same.astype(float))
        else:
            raise InvalidInputError(f"unknown POWEXP parameter {name!r}")
    return out


def fbm_matrix(spec: FbmSpec, d0a, d0b, dist) -> np.ndarray:
    d0a = np.asarray(d0a, dtype=float)
    d0b = np.asarray(d0b, dtype=float)
    return 0.5 * (_pow2h(d0a, spec.H)[:, None] + _pow2h(d0b, spec.H)[None, :]
                  - _pow2h(dist, spec.H))


def fbm_derivatives(spec: FbmSpec, d0a, d0b, dist, names=None) -> list[np.ndarray]:
    names = spec.param_names if names is None else names
    out = []
    for name in names:
        if name != "H":
            raise InvalidInputError(f"unknown FBM parameter {name!r}")

        def g(x):
            x = np.asarray(x, dtype=float)
            return 2.0 * _log_where_positive(x) * _pow2h(x, spec.H)

        out.append(0.5 * (g(d0a)[:, None] + g(d0b)[None, :] - g(dist)))
    return out


def feature_absdiff(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """``|fa[i, k] - fb[j, k]|`` as an ``(n_a, n_b, o)`` array."""
    fa = np.atleast_2d(fa)
    fb = np.atleast_2d(fb)
    if fa.shape[1] != fb.shape[1]:
        raise InvalidInputError(
            f"feature lengths differ: {fa.shape[1]} vs {fb.shape[1]}")
    return np.abs(fa[:, None, :] - fb[None, :, :])


def _scaled_sum(spec, absdiff):
    return absdiff @ (1.0 / np.asarray(spec.ells))


def projection_matrix(spec: _ProjectionSpec, absdiff) -> np.ndarray:
    if absdiff.shape[-1] != spec.order:
        raise InvalidInputError(
            f"feature length {absdiff.shape[-1]} differs from order {spec.order}")
    s = _scaled_sum(spec, absdiff)
    return spec.sigma2 * np.exp(-np.power(s, spec.H))


def projection_derivatives(spec: _ProjectionSpec, absdiff, names=None) -> list[np.ndarray]:
    names = spec.param_names if names is None else names
    s = _scaled_sum(spec, absdiff)
    sh = np.power(s, spec.H)
    e = np.exp(-sh)
    # d(s^H)/ds = H s^(H-1); taken as 0 at s = 0 where every |da_i| vanishes
    dsh = np.zeros_like(s)
    np.multiply(spec.H, np.power(s, spec.H - 1.0, out=np.zeros_like(s), where=s > 0),
                out=dsh, where=s > 0)
    ells = np.asarray(spec.ells)
    out = []
    for name in names:
        if name == "sigma2":
            out.append(e)
        elif name == "H":
            out.append(-spec.sigma2 * e * sh * _log_where_positive(s))
        elif name.startswith("ell_"):
            i = int(name[4:])
            out.append(spec.sigma2 * e * dsh * absdiff[..., i] / ells[i] ** 2)
        else:
            raise InvalidInputError(f"unknown projection parameter {name!r}")
    return out


# ---------------------------------------------------------------------------
# scalar forms
# ---------------------------------------------------------------------------

def fbm_kernel(spec: FbmSpec, a: QuantileFunction, b: QuantileFunction) -> float:
    da = w2_distance(spec.origin, a)
    db = w2_distance(spec.origin, b)
    dab = w2_distance(a, b)
    H2 = 2.0 * spec.H
    return 0.5 * (da ** H2 + db ** H2 - dab ** H2)


def powexp_kernel(spec: PowExpSpec, a: QuantileFunction, b: QuantileFunction) -> float:
    w = w2_distance(a, b)
    value = spec.sigma2 * np.exp(-w ** (2.0 * spec.H) / spec.ell)
    if spec.delta and a.same_as(b):
        value += spec.delta
    return float(value)


def projection_kernel(spec: _ProjectionSpec, fa: FeatureVector, fb: FeatureVector) -> float:
    a = fa.coeffs if isinstance(fa, FeatureVector) else np.asarray(fa, dtype=float)
    b = fb.coeffs if isinstance(fb, FeatureVector) else np.asarray(fb, dtype=float)
    if a.size != spec.order or b.size != spec.order:
        raise InvalidInputError(
            f"feature lengths {a.size}, {b.size} differ from order {spec.order}")
    s = float(np.sum(np.abs(a - b) / np.asarray(spec.ells)))
    return float(spec.sigma2 * np.exp(-s ** spec.H))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def shifted_legendre(i: int, t) -> np.ndarray:
    """Legendre polynomial of degree ``i`` moved to ``[0, 1]``, unit L2 norm there."""
    coef = np.zeros(i + 1)
    coef[i] = 1.0
    t = np.asarray(t, dtype=float)
    return np.sqrt(2.0 * i + 1.0) * npleg.legval(2.0 * t - 1.0, coef)


@lru_cache(maxsize=32)
def _legendre_weights(d: int, order: int) -> np.ndarray:
    """``W[i, j] = int_0^1 hat_j(t) p_i(t) dt`` for the hat functions of a d-point grid.

    Gauss-Legendre with ``order + 1`` nodes per cell is exact for the
    degree ``order`` integrands.
    """
    x = np.linspace(0.0, 1.0, d)
    h = x[1] - x[0]
    u, w = npleg.leggauss(order + 1)
    t = x[:-1, None] + 0.5 * h * (u[None, :] + 1.0)
    w = 0.5 * h * w
    left = (x[1:, None] - t) / h
    W = np.zeros((order, d))
    for i in range(order):
        p = shifted_legendre(i, t) * w
        W[i, :-1] += np.sum(p * left, axis=1)
        W[i, 1:] += np.sum(p * (1.0 - left), axis=1)
    W.flags.writeable = False
    return W


def legendre_features(g: GridDensity, order: int) -> FeatureVector:
    """Coefficients ``int_0^1 f p_i`` of the piecewise-linear interpolant of ``g``."""
    if order < 1:
        raise InvalidInputError("order must be >= 1")
    if g.support_lo != 0.0 or g.support_hi != 1.0:
        raise InvalidInputError(
            f"Legendre features need support [0, 1], got [{g.support_lo}, {g.support_hi}]")
    return FeatureVector(_legendre_weights(g.size, order) @ g.density)


def _density_matrix(densities, d=None) -> np.ndarray:
    rows = []
    for g in densities:
        v = g.density if isinstance(g, GridDensity) else np.asarray(g, dtype=float).ravel()
        if d is not None and v.size != d:
            raise InvalidInputError(f"density has {v.size} grid points, basis expects {d}")
        rows.append(v)
    if not rows:
        raise InvalidInputError("no densities given")
    d0 = rows[0].size
    if any(r.size != d0 for r in rows):
        raise InvalidInputError("densities are on grids of different sizes")
    return np.vstack(rows)


def pca_fit(densities: Sequence[GridDensity], order: int,
            center_projection: bool = False) -> PcaBasis:
    """Principal directions of the centered discretized densities.

    Signs are fixed so that each component's largest-magnitude entry is
    positive.  ``center_projection`` controls whether :func:`pca_features`
    subtracts the mean before projecting (default: raw projection).
    """
    V = _density_matrix(densities)
    if order < 1:
        raise InvalidInputError("order must be >= 1")
    if V.shape[0] < order:
        raise InvalidInputError(
            f"PCA of order {order} needs at least {order} densities, got {V.shape[0]}")
    if order > V.shape[1]:
        raise InvalidInputError("PCA order exceeds the grid length")
    mean = V.mean(axis=0)
    _, _, vt = np.linalg.svd(V - mean, full_matrices=False)
    comps = vt[:order].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaBasis(mean, comps, center_projection)


def pca_features(g: GridDensity, basis: PcaBasis) -> FeatureVector:
    v = _density_matrix([g], basis.d)[0]
    if basis.center_projection:
        v = v - basis.mean
    return FeatureVector(basis.components @ v / basis.d)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def spec_to_dict(spec: KernelSpec) -> dict:
    out = {"variant": spec.variant}
    if isinstance(spec, FbmSpec):
        out.update(H=spec.H, origin=spec.origin.values.tolist())
    elif isinstance(spec, PowExpSpec):
        out.update(sigma2=spec.sigma2, ell=spec.ell, H=spec.H, delta=spec.delta)
    elif isinstance(spec, _ProjectionSpec):
        out.update(order=spec.order, sigma2=spec.sigma2, ells=list(spec.ells), H=spec.H)
        if isinstance(spec, PcaSpec) and spec.basis is not None:
            out["basis"] = {
                "d": spec.basis.d,
                "mean": spec.basis.mean.tolist(),
                "components": spec.basis.components.tolist(),
                "center_projection": spec.basis.center_projection,
            }
    else:
        raise InvalidInputError(f"cannot serialize {type(spec).__name__}")
    return out


def spec_from_dict(d: dict) -> KernelSpec:
    try:
        variant = d["variant"]
        if variant == "FBM":
            return FbmSpec(d["H"], QuantileFunction(d["origin"]))
        if variant == "POWEXP":
            return PowExpSpec(d["sigma2"], d["ell"], d["H"], d.get("delta", 0.0))
        if variant == "LEGENDRE":
            return LegendreSpec(d["sigma2"], tuple(d["ells"]), d["H"])
        if variant == "PCA":
            basis = None
            if d.get("basis") is not None:
                b = d["basis"]
                basis = PcaBasis(b["mean"], b["components"], b.get("center_projection", False))
            return PcaSpec(d["sigma2"], tuple(d["ells"]), d["H"], basis)
    except KeyError as exc:
        raise InvalidInputError(f"kernel spec is missing field {exc}") from None
    raise InvalidInputError(f"unknown kernel variant {d.get('variant')!r}")
