"""
Numerical checks of kernel validity and of the asymptotic identifiability sums.

Nothing here proves anything: these are finite-dimensional quadratic forms and
eigenvalues evaluated on concrete input sets, with tolerances scaled to the
magnitude of the terms involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dist_core import QuantileFunction, pairwise_w2
from .errors import InvalidInputError
from .gp_core import build_gram, geometry, gram_derivatives, gram_from_geometry
from .kernels import KernelSpec, PowExpSpec


def negdef_form(inputs: Sequence[QuantileFunction], c, H: float) -> float:
    """``sum_ij c_i c_j W2(mu_i, mu_j)^(2H)`` for zero-sum weights ``c``."""
    c = np.asarray(c, dtype=float).ravel()
    if len(inputs) < 2:
        raise InvalidInputError("need at least two distributions")
    if c.size != len(inputs):
        raise InvalidInputError("one weight per distribution expected")
    if abs(c.sum()) > 1e-12:
        raise InvalidInputError(f"weights must sum to 0, got {c.sum()!r}")
    D, _ = pairwise_w2(inputs)
    return float(c @ np.power(D, 2.0 * H) @ c)


def negdef_scale(inputs, c, H: float) -> float:
    """Magnitude ``sum_ij |c_i c_j| * max W^2H`` used to scale tolerances."""
    c = np.asarray(c, dtype=float).ravel()
    D, _ = pairwise_w2(inputs)
    return float(np.sum(np.abs(np.outer(c, c))) * np.max(np.power(D, 2.0 * H)))


def gram_min_eig(spec: KernelSpec, inputs) -> float:
    return float(np.linalg.eigvalsh(build_gram(spec, inputs))[0])


def gram_eig_range(spec: KernelSpec, inputs) -> tuple[float, float]:
    ev = np.linalg.eigvalsh(build_gram(spec, inputs))
    return float(ev[0]), float(ev[-1])


def condition5_sum(spec_a: KernelSpec, spec_b: KernelSpec, inputs) -> float:
    """``(1/n) sum_ij (K_a - K_b)^2`` over the input set."""
    if spec_a.variant != spec_b.variant:
        raise InvalidInputError(
            f"kernel variants differ: {spec_a.variant} vs {spec_b.variant}")
    geo = geometry(spec_a, inputs)
    diff = gram_from_geometry(spec_a, geo) - gram_from_geometry(spec_b, geo)
    return float(np.sum(diff * diff) / len(inputs))


def condition8_sum(spec: KernelSpec, lam, inputs, names=None) -> float:
    """``(1/n) sum_ij (sum_k lam_k dK/dtheta_k)^2`` at ``spec``.

    ``lam`` must have unit Euclidean norm; ``names`` defaults to all
    parameters of the spec, in their documented order.
    """
    names = tuple(spec.param_names if names is None else names)
    lam = np.asarray(lam, dtype=float).ravel()
    if lam.size != len(names):
        raise InvalidInputError(f"expected {len(names)} weights, got {lam.size}")
    if abs(np.linalg.norm(lam) - 1.0) > 1e-10:
        raise InvalidInputError("lambda must have unit norm")
    derivs = gram_derivatives(spec, geometry(spec, inputs), names)
    S = sum(l * d for l, d in zip(lam, derivs))
    return float(np.sum(S * S) / len(inputs))


def condition8_form(spec: KernelSpec, inputs, names=None) -> np.ndarray:
    """The p x p matrix ``G`` with ``condition8_sum(lam) = lam' G lam``."""
    names = tuple(spec.param_names if names is None else names)
    derivs = gram_derivatives(spec, geometry(spec, inputs), names)
    n = len(inputs)
    p = len(names)
    G = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            G[i, j] = G[j, i] = np.sum(derivs[i] * derivs[j]) / n
    return G


def condition8_min(spec: KernelSpec, inputs, n_random: int = 100, seed=0, names=None) -> dict:
    """Smallest derivative-independence sum over random unit directions plus the axes.

    The exact minimum (smallest eigenvalue of the implied form) is reported
    alongside when there are at most 4 parameters.
    """
    names = tuple(spec.param_names if names is None else names)
    p = len(names)
    G = condition8_form(spec, inputs, names)
    rng = np.random.default_rng(seed)
    lams = rng.standard_normal((n_random, p))
    lams /= np.linalg.norm(lams, axis=1, keepdims=True)
    lams = np.vstack([lams, np.eye(p)])
    values = np.einsum("ki,ij,kj->k", lams, G, lams)
    out = {"names": list(names), "min_sampled": float(values.min()),
           "argmin": lams[int(np.argmin(values))].tolist()}
    if p <= 4:
        out["min_eigen"] = float(np.linalg.eigvalsh(G)[0])
    return out


def powexp_sweep_grid(theta0: PowExpSpec, steps=(-0.5, 0.0, 0.5)) -> list[PowExpSpec]:
    """Multiplicative grid around ``theta0`` (log scale, H clipped to (0, 1])."""
    out = []
    for a in steps:
        for b in steps:
            for c in steps:
                H = min(1.0, theta0.H * np.exp(c))
                out.append(PowExpSpec(theta0.sigma2 * np.exp(a), theta0.ell * np.exp(b), H,
                                      theta0.delta))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    test: str
    config: dict
    statistic: float
    threshold: float
    passed: bool

    def to_dict(self):
        return {"test": self.test, "config": self.config, "statistic": self.statistic,
                "threshold": self.threshold, "pass": bool(self.passed)}


@dataclass
class DiagnosticReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _random_quantiles(rng, n, m):
    """Random distributions: sorted normal samples with random location and scale."""
    out = []
    for _ in range(n):
        loc = rng.uniform(-3, 3)
        scale = rng.uniform(0.05, 2.0)
        kind = rng.integers(3)
        if kind == 0:
            v = loc + scale * rng.standard_normal(m)
        elif kind == 1:
            v = loc + scale * rng.exponential(size=m)
        else:
            v = np.full(m, loc)
        out.append(QuantileFunction(np.sort(v)))
    return out


def run_negdef_suite(n_configs: int = 50, Hs=(0.25, 0.5, 0.75, 1.0),
                     witness_Hs=(1.1, 1.5, 2.0), m: int = 64, seed=0,
                     rel_tol: float = 1e-8) -> DiagnosticReport:
    """Zero-sum quadratic forms of ``W^2H`` must be non-positive for H <= 1.

    The three Diracs at 0, 1, 2 with weights (1, -2, 1) give ``2 * 2^2H - 8``,
    which turns positive once H exceeds 1.
    """
    rng = np.random.default_rng(seed)
    report = DiagnosticReport()
    for k in range(n_configs):
        n = int(rng.integers(2, 13))
        inputs = _random_quantiles(rng, n, m)
        c = rng.standard_normal(n)
        c -= c.mean()
        c[-1] = -np.sum(c[:-1])
        for H in Hs:
            value = negdef_form(inputs, c, H)
            tol = rel_tol * negdef_scale(inputs, c, H)
            report.checks.append(CheckResult("negdef", {"config": k, "n": n, "H": H},
                                             value, tol, value <= tol))
    diracs = [QuantileFunction(np.full(m, x)) for x in (0.0, 1.0, 2.0)]
    for H in witness_Hs:
        value = negdef_form(diracs, [1.0, -2.0, 1.0], H)
        report.checks.append(CheckResult("negdef_witness", {"H": H}, value, 0.0, value > 0))
    return report


def run_nondegen_suite(n_sets: int = 30, Hs=(0.25, 0.5, 0.75), m: int = 64, seed=0,
                       n_max: int = 15) -> DiagnosticReport:
    """fBm and power-exponential Gram matrices at distinct inputs are positive definite."""
    from .kernels import FbmSpec
    rng = np.random.default_rng(seed)
    report = DiagnosticReport()
    origin = QuantileFunction(np.zeros(m))
    for k in range(n_sets):
        n = int(rng.integers(2, n_max + 1))
        inputs = _random_quantiles(rng, n, m)
        D, same = pairwise_w2(inputs)
        if np.any(same[~np.eye(n, dtype=bool)]):
            continue
        # fBm pins the origin to 0, so drop inputs equal to it
        fbm_inputs = [q for q in inputs if not q.same_as(origin)]
        for H in Hs:
            for spec, pts in ((FbmSpec(H, origin), fbm_inputs),
                              (PowExpSpec(1.0, 1.0, H, 0.0), inputs)):
                if len(pts) == 0:
                    continue
                lo, hi = gram_eig_range(spec, pts)
                report.checks.append(CheckResult(
                    "nondegen", {"set": k, "n": len(pts), "H": H, "kernel": spec.variant},
                    lo, 0.0, lo > 0))
    return report


def run_identifiability_suite(theta0: PowExpSpec | None = None, n: int = 100, L: float = 0.8,
                              seed=0, m: int = 512, n_random: int = 100) -> DiagnosticReport:
    """Kernel-separation sweep and derivative-independence minimum on shifted random measures."""
    from .dist_core import quantile_from_density
    from .simulation import shifted_random_measures
    theta0 = theta0 or PowExpSpec(1.0, 1.0, 0.5, 0.05)
    inputs = [quantile_from_density(g, m) for g in shifted_random_measures(n, L, seed=seed)]
    report = DiagnosticReport()
    base = tuple(theta0.param_values())
    off_base = []
    for spec in powexp_sweep_grid(theta0):
        value = condition5_sum(spec, theta0, inputs)
        is_base = tuple(spec.param_values()) == base
        if not is_base:
            off_base.append(value)
        report.checks.append(CheckResult(
            "condition5", {"theta": spec.param_values().tolist(), "n": n},
            value, 0.0, (value == 0.0) if is_base else (value > 0.0)))
    report.checks.append(CheckResult("condition5_min", {"n": n, "grid_points": len(off_base)},
                                     min(off_base), 0.0, min(off_base) > 0.0))
    c8 = condition8_min(theta0, inputs, n_random=n_random, seed=seed)
    report.checks.append(CheckResult("condition8", {"n": n, **c8}, c8["min_sampled"], 0.0,
                                     c8["min_sampled"] > 0.0))
    return report
