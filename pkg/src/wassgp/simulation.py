"""
Data generators and benchmark drivers for the simulation study.

Random streams come from counter-based Philox generators keyed by
``(seed, stream, index)`` so every distribution can be regenerated on its own
and the benchmarks are reproducible bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from .dist_core import (DEFAULT_GRID_SIZE, GridDensity, QuantileFunction,
                        density_inverse_cdf, moments_of, quantile_from_density,
                        quantile_from_samples)
from .errors import InvalidInputError
from .gp_core import (Dataset, FitConfig, cholesky_jitter, cir, fit_ml,
                      predict_many, rmse)
from .kernels import legendre_features, pca_features, pca_fit

# stream ids for the seeded generators
_TRAIN, _TEST, _SAMPLES_TRAIN, _SAMPLES_TEST, _BETA_A, _SPLIT, _PROP1 = range(7)


def make_rng(seed, *keys) -> np.random.Generator:
    """Philox generator for ``seed`` and an optional stream key path."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *keys])))


@dataclass
class SimConfig:
    n_train: int = 100
    n_test: int = 500
    d: int = 100
    m: int = DEFAULT_GRID_SIZE
    matern_sigma: float = 1.0
    matern_ell: float = 0.2
    seed: int = 0
    samples_per_dist: int = 500
    n_starts: int = 10
    max_evals: int = 400
    threads: int = 1
    orders: tuple = (5, 10, 15)
    beta_b: float = 3.0
    beta_a_range: tuple = (3.0, 20.0)
    center_targets: bool = True

    def __post_init__(self):
        for name in ("n_train", "n_test", "d", "m", "samples_per_dist", "n_starts"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.d < 2:
            raise InvalidInputError("density grid needs d >= 2")

    def fit_config(self, nugget="fit") -> FitConfig:
        return FitConfig(n_starts=self.n_starts, max_evals=self.max_evals,
                         seed=self.seed, nugget=nugget,
                         center_targets=self.center_targets, threads=self.threads)


def beta_config(**overrides) -> SimConfig:
    """Defaults of the Beta-skewness experiment (275 train, 50 test)."""
    return SimConfig(**{"n_train": 275, "n_test": 50, **overrides})


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def matern52(dist, ell: float, sigma: float):
    r = np.sqrt(5.0) * np.abs(dist) / ell
    return sigma ** 2 * (1.0 + r + r * r / 3.0) * np.exp(-r)


@lru_cache(maxsize=32)
def _matern_chol(grid_bytes: bytes, ell: float, sigma: float):
    grid = np.frombuffer(grid_bytes)
    C = matern52(grid[:, None] - grid[None, :], ell, sigma)
    chol, _ = cholesky_jitter(C, 1e-10)
    chol.flags.writeable = False
    return chol


def matern52_sample(grid, ell: float = 0.2, sigma: float = 1.0, seed=0) -> np.ndarray:
    """One zero-mean Matern-5/2 path on ``grid`` (Cholesky of the grid covariance)."""
    grid = np.ascontiguousarray(grid, dtype=float).ravel()
    if np.any(np.diff(grid) < 0):
        raise InvalidInputError("grid must be sorted")
    chol = _matern_chol(grid.tobytes(), float(ell), float(sigma))
    rng = make_rng(seed)
    return chol @ rng.standard_normal(grid.size)


def gen_learning_distribution(cfg: SimConfig, seed, perturb: bool = True,
                              mu: float | None = None, sd: float | None = None) -> GridDensity:
    """Gaussian pdf with random mean/sd, times ``exp(Z)``, renormalized on [0, 1].

    ``perturb=False`` sets ``Z = 0``; ``mu`` and ``sd`` override the draws
    (the draws still happen, so the Z stream is unchanged).
    """
    rng = make_rng(seed)
    mu_draw = rng.uniform(0.3, 0.7)
    sd_draw = rng.uniform(0.001, 0.2)
    mu = mu_draw if mu is None else float(mu)
    sd = sd_draw if sd is None else float(sd)
    x = np.linspace(0.0, 1.0, cfg.d)
    f = norm.pdf(x, mu, sd)
    if perturb:
        f = f * np.exp(matern52_sample(x, cfg.matern_ell, cfg.matern_sigma, rng))
    return GridDensity.normalized(0.0, 1.0, f)


def target_F(q: QuantileFunction) -> float:
    """``m1 / (0.05 + sd)`` of the distribution."""
    mom = moments_of(q)
    var = mom.variance
    if var < 0:
        if var < -1e-12:
            raise InvalidInputError(f"negative variance {var!r}")
        var = 0.0
    return mom.m1 / (0.05 + np.sqrt(var))


def sample_from_density(g: GridDensity, n: int, seed) -> np.ndarray:
    """Inverse-CDF sampling from the piecewise-linear CDF of ``g``."""
    rng = make_rng(seed)
    return density_inverse_cdf(g, rng.uniform(size=n))


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    return 1.06 * float(np.std(x, ddof=1)) * x.size ** (-0.2)


def kde_density(samples, bandwidth: float | None = None,
                grid: tuple = (0.0, 1.0, 100)) -> GridDensity:
    """Gaussian KDE evaluated at ``d`` grid points and renormalized on the grid.

    ``grid`` is ``(lo, hi, d)``.  The default bandwidth is Silverman's rule;
    a zero-variance sample falls back to ``1e-3``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InvalidInputError("KDE needs at least 2 samples")
    lo, hi, d = grid
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        h = 1e-3
    t = np.linspace(lo, hi, int(d))
    f = np.zeros_like(t)
    for chunk in np.array_split(x, max(1, x.size // 2000)):
        f += norm.pdf((t[:, None] - chunk[None, :]) / h).sum(axis=1)
    f /= x.size * h
    if not trapezoid(f, t) > 0:
        # every sample sits far from every node relative to h: bin instead
        idx = np.clip(np.rint((x - lo) / (hi - lo) * (d - 1)).astype(int), 0, d - 1)
        f = np.bincount(idx, minlength=int(d)).astype(float)
    return GridDensity.normalized(lo, hi, f)


def shifted_random_measures(n: int, L: float = 0.8, d: int = 100, ell: float = 0.2,
                            sigma: float = 1.0, seed=0, perturb: bool = True) -> list[GridDensity]:
    """``n`` measures, the i-th (1-based) with density ``exp(Z_i(t - i)) / M_i`` on ``[i, i + L]``."""
    if not L > 0:
        raise InvalidInputError("L must be positive")
    local = np.linspace(0.0, L, d)
    out = []
    for i in range(1, n + 1):
        z = (matern52_sample(local, ell, sigma, make_rng(seed, _PROP1, i))
             if perturb else np.zeros(d))
        out.append(GridDensity.normalized(float(i), float(i + L), np.exp(z)))
    return out


def beta_skewness(a, b):
    a = np.asarray(a, dtype=float)
    return 2.0 * (b - a) * np.sqrt(a + b + 1.0) / ((a + b + 2.0) * np.sqrt(a * b))


def beta_samples(a: float, b: float, n: int, seed) -> np.ndarray:
    """Beta(a, b) draws as ``X / (X + Y)`` with independent gamma variables."""
    rng = make_rng(seed)
    x = rng.standard_gamma(a, n)
    y = rng.standard_gamma(b, n)
    return x / (x + y)


# ---------------------------------------------------------------------------
# kernel-regression baseline
# ---------------------------------------------------------------------------

def l1_distances(A: Sequence[GridDensity], B: Sequence[GridDensity]) -> np.ndarray:
    """Trapezoid L1 distances between densities sharing one grid."""
    if not A or not B:
        raise InvalidInputError("need densities on both sides")
    x = A[0].x
    for g in list(A) + list(B):
        if g.size != x.size or g.support_lo != A[0].support_lo or g.support_hi != A[0].support_hi:
            raise InvalidInputError("densities must share one grid")
    FA = np.vstack([g.density for g in A])
    FB = np.vstack([g.density for g in B])
    return np.vstack([trapezoid(np.abs(fa[None, :] - FB), x, axis=1) for fa in FA])


def _nw(D, y, h):
    logw = -0.5 * (D / h) ** 2
    w = np.exp(logw)
    den = w.sum(axis=1)
    out = np.full(D.shape[0], float(np.mean(y)))
    ok = den > 0
    out[ok] = (w[ok] @ y) / den[ok]
    return out


def kernel_regression_predict(train: Sequence[tuple], test: Sequence[GridDensity],
                              bandwidth_grid: Sequence[float] | None = None,
                              split_seed=0, return_bandwidth: bool = False):
    """Nadaraya-Watson regression on densities with a Gaussian kernel of L1 distance.

    The bandwidth is picked from ``bandwidth_grid`` (default ``median(D) * 2^k``,
    ``k = -4..4``) by validation RMSE on a seeded 80/20 split of ``train``.
    Rows whose weights all underflow get the training mean.
    """
    if len(train) < 5:
        raise InvalidInputError("kernel regression needs at least 5 training points")
    dens = [g for g, _ in train]
    y = np.array([v for _, v in train], dtype=float)
    D_tt = l1_distances(dens, dens)
    if bandwidth_grid is None:
        med = float(np.median(D_tt[np.triu_indices(len(dens), 1)]))
        if not med > 0:
            med = 1.0
        bandwidth_grid = [med * 2.0 ** k for k in range(-4, 5)]
    perm = make_rng(split_seed, _SPLIT).permutation(len(dens))
    n_val = max(1, int(round(0.2 * len(dens))))
    val, fit = perm[:n_val], perm[n_val:]
    scores = [rmse(_nw(D_tt[np.ix_(val, fit)], y[fit], h), y[val]) for h in bandwidth_grid]
    h = float(bandwidth_grid[int(np.argmin(scores))])
    preds = _nw(l1_distances(list(test), dens), y, h)
    return (preds, h) if return_bandwidth else preds


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    name: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)

    def row(self, model: str) -> dict:
        for r in self.rows:
            if r["model"] == model:
                return r
        raise KeyError(model)

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable)

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "rmse", "cir_0.9", "seconds", "params"])
        for r in self.rows:
            w.writerow([r["model"], _fmt(r["rmse"]), _fmt(r.get("cir")),
                        f"{r['seconds']:.3f}", json.dumps(r.get("params", {}), sort_keys=True)])
        return buf.getvalue()

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["model", "index", "x", "truth", "pred", "sd"]
        w.writerow(keys)
        for p in self.pairs:
            w.writerow([p["model"], p["index"], _fmt(p.get("x")), _fmt(p["truth"]),
                        _fmt(p["pred"]), _fmt(p.get("sd"))])
        return buf.getvalue()

    def format_table(self) -> str:
        width = max([len("model")] + [len(r["model"]) for r in self.rows])
        lines = [f"{'model':<{width}}  {'RMSE':>10}  {'CIR_0.9':>8}  {'seconds':>8}"]
        for r in self.rows:
            c = "" if r.get("cir") is None else f"{r['cir']:.3f}"
            lines.append(f"{r['model']:<{width}}  {r['rmse']:>10.4f}  {c:>8}  {r['seconds']:>8.2f}")
        return "\n".join(lines)


def _fmt(v):
    if v is None:
        return ""
    return f"{float(v):.12g}"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _gp_row(name, variant, train_inputs, y_train, test_inputs, y_test, cfg, nugget="fit",
            basis=None, pairs=None, xs=None):
    t0 = time.perf_counter()
    model = fit_ml(Dataset(train_inputs, y_train), variant, cfg.fit_config(nugget), basis=basis)
    mean, var = predict_many(model, test_inputs)
    sd = np.sqrt(var)
    seconds = time.perf_counter() - t0
    if pairs is not None:
        for i, (yt, mu, s) in enumerate(zip(y_test, mean, sd)):
            pairs.append({"model": name, "index": i,
                          "x": None if xs is None else float(xs[i]),
                          "truth": float(yt), "pred": float(mu), "sd": float(s)})
    return {"model": name, "rmse": rmse(mean, y_test), "cir": cir(mean, sd, y_test, 0.9),
            "params": {n: model.spec.get(n) for n in model.spec.param_names},
            "nll": model.nll, "jitter": model.jitter, "seconds": seconds}


def _learning_set(cfg: SimConfig):
    train = [gen_learning_distribution(cfg, make_rng(cfg.seed, _TRAIN, i))
             for i in range(cfg.n_train)]
    test = [gen_learning_distribution(cfg, make_rng(cfg.seed, _TEST, i))
            for i in range(cfg.n_test)]
    q_train = [quantile_from_density(g, cfg.m) for g in train]
    q_test = [quantile_from_density(g, cfg.m) for g in test]
    y_train = np.array([target_F(q) for q in q_train])
    y_test = np.array([target_F(q) for q in q_test])
    return train, test, q_train, q_test, y_train, y_test


def _metadata(cfg, **extra):
    meta = {"config": asdict(cfg), "grid_sizes": {"density_d": cfg.d, "quantile_m": cfg.m},
            "seeds": {"base": cfg.seed},
            "density_construction": "Gaussian pdf times exp(Matern-5/2 path), renormalized on [0,1]",
            "targets_centered": cfg.center_targets}
    meta.update(extra)
    return meta


def table1_benchmark(cfg: SimConfig | None = None) -> BenchmarkReport:
    """Exact-density comparison: W2 power-exponential against projection kernels."""
    cfg = cfg or SimConfig()
    train, test, q_train, q_test, y_train, y_test = _learning_set(cfg)
    report = BenchmarkReport("table1", metadata=_metadata(cfg))
    report.rows.append(_gp_row("distribution", "POWEXP", q_train, y_train, q_test, y_test,
                               cfg, nugget="off", pairs=report.pairs))
    report.rows.append(_gp_row("distribution+nugget", "POWEXP", q_train, y_train, q_test,
                               y_test, cfg, nugget="fit", pairs=report.pairs))
    for o in cfg.orders:
        f_tr = [legendre_features(g, o) for g in train]
        f_te = [legendre_features(g, o) for g in test]
        report.rows.append(_gp_row(f"Legendre order {o}", "LEGENDRE", f_tr, y_train, f_te,
                                   y_test, cfg, pairs=report.pairs))
    for o in cfg.orders:
        basis = pca_fit(train, o)
        f_tr = [pca_features(g, basis) for g in train]
        f_te = [pca_features(g, basis) for g in test]
        report.rows.append(_gp_row(f"PCA order {o}", "PCA", f_tr, y_train, f_te, y_test,
                                   cfg, basis=basis, pairs=report.pairs))
    return report


def table2_benchmark(cfg: SimConfig | None = None) -> BenchmarkReport:
    """Two-stage comparison: every distribution seen only through samples."""
    cfg = cfg or SimConfig()
    train, test, _, _, y_train, y_test = _learning_set(cfg)
    k = cfg.samples_per_dist
    s_train = [sample_from_density(g, k, make_rng(cfg.seed, _SAMPLES_TRAIN, i))
               for i, g in enumerate(train)]
    s_test = [sample_from_density(g, k, make_rng(cfg.seed, _SAMPLES_TEST, i))
              for i, g in enumerate(test)]
    report = BenchmarkReport("table2", metadata=_metadata(
        cfg, kernel_regression={"kernel": "gaussian", "distance": "L1 between KDEs",
                                "kde_bandwidth": "silverman",
                                "bandwidth_selection": "80/20 validation over median(D)*2^k, k=-4..4"}))
    report.rows.append(_gp_row("distribution", "POWEXP",
                               [quantile_from_samples(s, cfg.m) for s in s_train], y_train,
                               [quantile_from_samples(s, cfg.m) for s in s_test], y_test,
                               cfg, nugget="fit", pairs=report.pairs))
    report.rows.append(_kr_row("kernel regression", s_train, y_train, s_test, y_test, cfg,
                               pairs=report.pairs))
    return report


def _kr_row(name, s_train, y_train, s_test, y_test, cfg, pairs=None, xs=None):
    t0 = time.perf_counter()
    grid = (0.0, 1.0, cfg.d)
    k_train = [kde_density(s, grid=grid) for s in s_train]
    k_test = [kde_density(s, grid=grid) for s in s_test]
    preds, h = kernel_regression_predict(list(zip(k_train, y_train)), k_test,
                                         split_seed=cfg.seed, return_bandwidth=True)
    if pairs is not None:
        for i, (yt, p) in enumerate(zip(y_test, preds)):
            pairs.append({"model": name, "index": i,
                          "x": None if xs is None else float(xs[i]),
                          "truth": float(yt), "pred": float(p), "sd": None})
    return {"model": name, "rmse": rmse(preds, y_test), "cir": None,
            "params": {"bandwidth": h}, "seconds": time.perf_counter() - t0}


def beta_skewness_experiment(cfg: SimConfig | None = None) -> BenchmarkReport:
    """Predict Beta(a, b) skewness from samples: W2 GP with nugget vs kernel regression."""
    cfg = cfg or beta_config()
    lo, hi = cfg.beta_a_range
    b = cfg.beta_b
    a_rng = make_rng(cfg.seed, _BETA_A)
    a_train = a_rng.uniform(lo, hi, cfg.n_train)
    a_test = a_rng.uniform(lo, hi, cfg.n_test)
    k = cfg.samples_per_dist
    s_train = [beta_samples(a, b, k, make_rng(cfg.seed, _SAMPLES_TRAIN, i))
               for i, a in enumerate(a_train)]
    s_test = [beta_samples(a, b, k, make_rng(cfg.seed, _SAMPLES_TEST, i))
              for i, a in enumerate(a_test)]
    y_train = beta_skewness(a_train, b)
    y_test = beta_skewness(a_test, b)
    report = BenchmarkReport("beta", metadata=_metadata(
        cfg, beta={"b": b, "a_range": [lo, hi], "sampler": "gamma ratio, Philox"}))
    report.rows.append(_gp_row("distribution", "POWEXP",
                               [quantile_from_samples(s, cfg.m) for s in s_train], y_train,
                               [quantile_from_samples(s, cfg.m) for s in s_test], y_test,
                               cfg, nugget="fit", pairs=report.pairs, xs=a_test))
    report.rows.append(_kr_row("kernel regression", s_train, y_train, s_test, y_test, cfg,
                               pairs=report.pairs, xs=a_test))
    return report
