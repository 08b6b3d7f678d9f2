"""Matrix-free Hessian spectrum estimates built on Hessian-vector products.

The analysed loss is the data-fit loss only; weight decay never enters it.
Random probes are keyed by ``(seed, stream, index)`` so that any subset of
probes can be recomputed independently of evaluation order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .diffcore import (
    EXACT,
    Batch,
    DifferentiableObjective,
    HvpBackend,
    HvpKind,
    hvp,
    value_and_grad,
)


class ZeroOperator(ArithmeticError):
    pass


class TooLarge(ValueError):
    pass


class ProbeDistribution(enum.Enum):
    GAUSSIAN_0_1 = "gaussian"
    RADEMACHER = "rademacher"


# arbitrary tags separating the RNG streams of the different estimators
_POWER_STREAM, _TRACE_STREAM, _CURV_STREAM = 1, 2, 3


def probe(m: int, distribution: ProbeDistribution, seed: int, index: int, stream: int = 0):
    rng = np.random.default_rng([seed, stream, index])
    if ProbeDistribution(distribution) is ProbeDistribution.RADEMACHER:
        return rng.choice(np.array([-1.0, 1.0]), size=m)
    return rng.standard_normal(m)


def concat_batches(batches: Sequence[Batch]) -> Batch:
    if len(batches) == 1:
        return batches[0]
    return Batch(
        np.concatenate([b.features for b in batches]),
        np.concatenate([b.labels for b in batches]),
    )


def top_eigenvalue(
    obj: DifferentiableObjective,
    w,
    batch: Batch,
    max_iters: int = 100,
    tol: float = 1e-6,
    backend: HvpBackend = EXACT,
    seed: int = 0,
) -> tuple[float, bool]:
    """Power iteration for the dominant-magnitude Hessian eigenvalue.

    Returns the signed Rayleigh quotient at the last iterate and whether
    successive quotients met the relative tolerance.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    m = obj.param_count
    for restart in range(4):
        v = probe(m, ProbeDistribution.GAUSSIAN_0_1, seed, restart, _POWER_STREAM)
        v /= np.linalg.norm(v)
        hv = hvp(obj, w, v, batch, backend)
        if np.linalg.norm(hv) > 0:
            break
    else:
        raise ZeroOperator("Hessian-vector product vanished for every start vector")

    rq = float(v @ hv)
    converged = False
    for _ in range(max_iters):
        n = np.linalg.norm(hv)
        if n == 0:
            break
        v = hv / n
        hv = hvp(obj, w, v, batch, backend)
        new_rq = float(v @ hv)
        if abs(new_rq - rq) < tol * max(abs(new_rq), 1e-30):
            rq, converged = new_rq, True
            break
        rq = new_rq
    return rq, converged


def trace_hutchinson(
    obj: DifferentiableObjective,
    w,
    batch: Batch,
    n_probes: int = 100,
    distribution: ProbeDistribution = ProbeDistribution.GAUSSIAN_0_1,
    backend: HvpBackend = EXACT,
    seed: int = 0,
) -> float:
    """Mean of ``v^T H v`` over seeded probes, an unbiased estimate of ``Tr(H)``."""
    return float(np.mean(hutchinson_samples(obj, w, batch, n_probes, distribution, backend, seed)))


def hutchinson_samples(obj, w, batch, n_probes, distribution, backend=EXACT, seed=0) -> np.ndarray:
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    out = np.empty(n_probes)
    for i in range(n_probes):
        v = probe(obj.param_count, distribution, seed, i, _TRACE_STREAM)
        out[i] = v @ hvp(obj, w, v, batch, backend)
    return out


def rayleigh_quotients(obj, w, batches, n_probes_per_batch=100, backend=EXACT, seed=0) -> np.ndarray:
    if len(batches) == 0:
        raise ValueError("need at least one batch")
    if n_probes_per_batch < 1:
        raise ValueError("n_probes_per_batch must be >= 1")
    out = []
    for b, batch in enumerate(batches):
        for i in range(n_probes_per_batch):
            v = probe(obj.param_count, ProbeDistribution.GAUSSIAN_0_1, seed, b * n_probes_per_batch + i, _CURV_STREAM)
            out.append((v @ hvp(obj, w, v, batch, backend)) / (v @ v))
    return np.asarray(out)


def curvature_stats(
    obj: DifferentiableObjective,
    w,
    batches: Sequence[Batch],
    n_probes_per_batch: int = 100,
    backend: HvpBackend = EXACT,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Mean, median and sample standard deviation of Gaussian-direction
    Rayleigh quotients pooled over all batches."""
    q = rayleigh_quotients(obj, w, batches, n_probes_per_batch, backend, seed)
    sd = float(np.std(q, ddof=1)) if q.size > 1 else 0.0
    return float(np.mean(q)), float(np.median(q)), sd


def explicit_hessian(
    obj: DifferentiableObjective,
    w,
    batch: Batch,
    step: Optional[float] = None,
    return_asymmetry: bool = False,
):
    """Dense Hessian from central differences of the gradient, symmetrised.

    Test oracle only, limited to 200 parameters.
    """
    m = obj.param_count
    if m > 200:
        raise TooLarge(f"explicit Hessian limited to m <= 200, got {m}")
    w = np.asarray(w, dtype=np.float64)
    h = step if step is not None else 1e-6 * (1.0 + float(np.max(np.abs(w))))
    H = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        gp = value_and_grad(obj, w + e, batch).grad
        gm = value_and_grad(obj, w - e, batch).grad
        H[:, j] = (gp - gm) / (2.0 * h)
    fro = np.linalg.norm(H)
    asym = float(np.linalg.norm(H - H.T) / fro) if fro > 0 else 0.0
    H = 0.5 * (H + H.T)
    return (H, asym) if return_asymmetry else H


@dataclass(frozen=True)
class SpectrumSettings:
    max_iters: int = 100
    tol: float = 1e-4
    n_probes: int = 100
    distribution: ProbeDistribution = ProbeDistribution.GAUSSIAN_0_1
    n_probes_per_batch: int = 100
    n_batches: Optional[int] = None  # None: every batch given
    backend: HvpBackend = EXACT
    seed: int = 0


PROBE_LAW = "unit-direction gaussian rayleigh quotients"

TABLE_KEYS = (
    "top_hessian_eigenvalue",
    "hessian_median",
    "hessian_mean",
    "hessian_sd",
    "hessian_trace",
)


@dataclass(frozen=True)
class SpectrumReport:
    top_eigenvalue: float
    trace: float
    curvature_mean: float
    curvature_median: float
    curvature_sd: float
    n_probes: int
    n_batches: int
    backend: HvpBackend = EXACT
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "top_hessian_eigenvalue": self.top_eigenvalue,
            "hessian_median": self.curvature_median,
            "hessian_mean": self.curvature_mean,
            "hessian_sd": self.curvature_sd,
            "hessian_trace": self.trace,
            "n_probes": self.n_probes,
            "n_batches": self.n_batches,
            "backend": self.backend.kind.value,
            "fd_step": self.backend.fd_step,
            "converged": self.converged,
            "probe_law": PROBE_LAW,
            "loss_includes_weight_decay": False,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectrumReport":
        return cls(
            top_eigenvalue=d["top_hessian_eigenvalue"],
            trace=d["hessian_trace"],
            curvature_mean=d["hessian_mean"],
            curvature_median=d["hessian_median"],
            curvature_sd=d["hessian_sd"],
            n_probes=d["n_probes"],
            n_batches=d["n_batches"],
            backend=HvpBackend(HvpKind(d.get("backend", "exact_second_order")), d.get("fd_step")),
            converged=d.get("converged", False),
        )


def full_report(
    obj: DifferentiableObjective,
    w,
    batches: Sequence[Batch],
    settings: SpectrumSettings = SpectrumSettings(),
) -> SpectrumReport:
    """Top eigenvalue and trace of the Hessian of the pooled batches, plus
    per-batch curvature statistics."""
    batches = list(batches)
    if settings.n_batches is not None:
        batches = batches[: settings.n_batches]
    if not batches:
        raise ValueError("need at least one batch")
    pooled = concat_batches(batches)
    s = settings
    top, converged = top_eigenvalue(obj, w, pooled, s.max_iters, s.tol, s.backend, s.seed)
    tr = trace_hutchinson(obj, w, pooled, s.n_probes, s.distribution, s.backend, s.seed)
    mean, median, sd = curvature_stats(obj, w, batches, s.n_probes_per_batch, s.backend, s.seed)
    return SpectrumReport(top, tr, mean, median, sd, s.n_probes, len(batches), s.backend, converged)
