"""SGD/Adam base steps and the sharpness-aware wrappers around them.

All wrappers share one convention: the gradient at ``w`` and the gradient at
the perturbed point are evaluated on the same batch, the perturbation is
treated as a constant (no gradient flows through it), and weight decay is
decoupled from the adaptive update.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .diffcore import Batch, DifferentiableObjective, HvpBackend, EXACT, hvp, value_and_grad
from .modelzoo import SpecError


class NonFiniteGradient(ArithmeticError):
    pass


class DegenerateNormalization(ArithmeticError):
    pass


class NormP(enum.Enum):
    L2 = "l2"


@dataclass(frozen=True)
class SharpnessConfig:
    rho: float = 0.05
    norm_p: NormP = NormP.L2
    weight_decay: float = 0.0
    asam_eta: float = 0.01
    gsam_alpha: float = 0.1
    wsam_gamma: float = 0.875
    cr_alpha: float = 2e-3
    cr_beta: float = 1e-3
    cr_trace_floor: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "norm_p", NormP(self.norm_p))
        if self.rho < 0:
            raise SpecError("rho must be >= 0")
        if self.weight_decay < 0:
            raise SpecError("weight_decay must be >= 0")
        if self.asam_eta < 0:
            raise SpecError("asam_eta must be >= 0")
        if self.gsam_alpha < 0:
            raise SpecError("gsam_alpha must be >= 0")
        if not 0 <= self.wsam_gamma < 1:
            raise SpecError("wsam_gamma must lie in [0, 1)")
        if not self.cr_alpha > self.cr_beta > 0:
            raise SpecError("CR-SAM needs cr_alpha > cr_beta > 0")
        if not self.cr_trace_floor > 0:
            raise SpecError("cr_trace_floor must be positive")


class BaseKind(enum.Enum):
    SGD = "SGD"
    ADAM = "ADAM"


@dataclass(frozen=True)
class BaseOptimizerState:
    kind: BaseKind = BaseKind.ADAM
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None
    step_count: int = 0

    @classmethod
    def init(cls, m: int, kind=BaseKind.ADAM, lr: float = 1e-4, **kw) -> "BaseOptimizerState":
        return cls(BaseKind(kind), lr, first_moment=np.zeros(m), second_moment=np.zeros(m), **kw)


@dataclass(frozen=True)
class StepReport:
    loss_at_w: float
    perturbed_loss: float
    epsilon_norm: float
    surrogate_gap: float = float("nan")
    extra_grad_evals: int = 0


def base_step(state: BaseOptimizerState, w, grad, weight_decay: float = 0.0):
    """One SGD or bias-corrected Adam update followed by decoupled weight decay.

    Returns ``(w_new, state_new)``. The input state is not modified.
    """
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != w.shape:
        raise SpecError(f"gradient shape {grad.shape} does not match parameters {w.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient has non-finite entries")

    t = state.step_count + 1
    if state.kind is BaseKind.SGD:
        w_new = w - state.lr * grad
        new_state = replace(state, step_count=t)
    else:
        m1 = state.first_moment if state.first_moment is not None else np.zeros_like(w)
        m2 = state.second_moment if state.second_moment is not None else np.zeros_like(w)
        m1 = state.adam_beta1 * m1 + (1.0 - state.adam_beta1) * grad
        m2 = state.adam_beta2 * m2 + (1.0 - state.adam_beta2) * grad * grad
        m1_hat = m1 / (1.0 - state.adam_beta1**t)
        m2_hat = m2 / (1.0 - state.adam_beta2**t)
        w_new = w - state.lr * m1_hat / (np.sqrt(m2_hat) + state.adam_eps)
        new_state = replace(state, first_moment=m1, second_moment=m2, step_count=t)
    if weight_decay:
        w_new = w_new - state.lr * weight_decay * w
    return w_new, new_state


def sam_perturbation(grad, cfg: SharpnessConfig) -> np.ndarray:
    """Linearised inner maximiser over the L2 ball: ``rho g / |g|``."""
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if cfg.rho == 0 or norm == 0:
        return np.zeros_like(grad)
    return cfg.rho * grad / norm


@dataclass(frozen=True)
class NormalizationOperator:
    """``T_w = diag(|w_i| + eta)``."""

    eta: float = 0.01
    kind: str = "ELEMENTWISE_ABS"

    def diag(self, w) -> np.ndarray:
        return np.abs(np.asarray(w, dtype=np.float64)) + self.eta

    def apply(self, w, v) -> np.ndarray:
        return self.diag(w) * v

    def apply_inverse(self, w, v) -> np.ndarray:
        return np.asarray(v) / self.diag(w)


def asam_perturbation(w, grad, op: NormalizationOperator, cfg: SharpnessConfig) -> np.ndarray:
    """Maximiser of the linearised loss over ``|T_w^-1 eps| <= rho``:
    ``rho T_w^2 g / |T_w g|``."""
    w = np.asarray(w, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if cfg.rho == 0 or not np.any(grad):
        return np.zeros_like(grad)
    t = op.diag(w)
    if op.eta == 0 and np.any((t == 0) & (grad != 0)):
        raise DegenerateNormalization(
            "normalization operator is singular on the gradient support (eta=0, zero weights)"
        )
    tg = t * grad
    return cfg.rho * t * tg / float(np.linalg.norm(tg))


def _epsilon_norm(eps) -> float:
    return float(np.linalg.norm(eps))


def plain_step(obj: DifferentiableObjective, w, batch: Batch, state, cfg: SharpnessConfig):
    """Base optimizer on the vanilla gradient, with the same report shape as the wrappers."""
    r = value_and_grad(obj, w, batch)
    w_new, state = base_step(state, w, r.grad, cfg.weight_decay)
    return w_new, state, StepReport(r.loss, r.loss, 0.0, 0.0, 0)


def sam_step(obj: DifferentiableObjective, w, batch: Batch, state, cfg: SharpnessConfig):
    w = np.asarray(w, dtype=np.float64)
    r = value_and_grad(obj, w, batch)
    eps = sam_perturbation(r.grad, cfg)
    rp = value_and_grad(obj, w + eps, batch)
    w_new, state = base_step(state, w, rp.grad, cfg.weight_decay)
    report = StepReport(r.loss, rp.loss, _epsilon_norm(eps), rp.loss - r.loss, 1)
    return w_new, state, report


def asam_step(obj: DifferentiableObjective, w, batch: Batch, state, cfg: SharpnessConfig):
    w = np.asarray(w, dtype=np.float64)
    r = value_and_grad(obj, w, batch)
    eps = asam_perturbation(w, r.grad, NormalizationOperator(cfg.asam_eta), cfg)
    rp = value_and_grad(obj, w + eps, batch)
    w_new, state = base_step(state, w, rp.grad, cfg.weight_decay)
    report = StepReport(r.loss, rp.loss, _epsilon_norm(eps), rp.loss - r.loss, 1)
    return w_new, state, report


def gsam_direction(g, g_p, alpha: float, exact_parallel: bool = False) -> np.ndarray:
    """``g_p - alpha * g_perp`` where ``g_perp`` is the part of ``g`` orthogonal to ``g_p``.

    Falls back to ``g_p`` when ``g_p`` vanishes (the projection is undefined).
    """
    gp_sq = float(np.dot(g_p, g_p))
    if gp_sq == 0 or exact_parallel:
        return g_p
    g_perp = g - (float(np.dot(g, g_p)) / gp_sq) * g_p
    return g_p - alpha * g_perp


def gsam_step(obj: DifferentiableObjective, w, batch: Batch, state, cfg: SharpnessConfig):
    w = np.asarray(w, dtype=np.float64)
    r = value_and_grad(obj, w, batch)
    eps = sam_perturbation(r.grad, cfg)
    rp = value_and_grad(obj, w + eps, batch)
    # with eps == 0 the two gradients are the same evaluation and g_perp is 0
    d = gsam_direction(r.grad, rp.grad, cfg.gsam_alpha, exact_parallel=not np.any(eps))
    w_new, state = base_step(state, w, d, cfg.weight_decay)
    report = StepReport(r.loss, rp.loss, _epsilon_norm(eps), rp.loss - r.loss, 1)
    return w_new, state, report


def wsam_step(obj: DifferentiableObjective, w, batch: Batch, state, cfg: SharpnessConfig):
    """Base optimizer on ``g``; the sharpness term ``c (g_p - g)``, with
    ``c = gamma / (1 - gamma)``, is applied outside the base optimizer."""
    gamma = cfg.wsam_gamma
    if not 0 <= gamma < 1:
        raise SpecError("wsam_gamma must lie in [0, 1)")
    w = np.asarray(w, dtype=np.float64)
    r = value_and_grad(obj, w, batch)
    eps = sam_perturbation(r.grad, cfg)
    rp = value_and_grad(obj, w + eps, batch)
    w_new, state = base_step(state, w, r.grad, cfg.weight_decay)
    w_new = w_new - state.lr * (gamma / (1.0 - gamma)) * (rp.grad - r.grad)
    report = StepReport(r.loss, rp.loss, _epsilon_norm(eps), rp.loss - r.loss, 1)
    return w_new, state, report


@dataclass(frozen=True)
class CurvatureTerms:
    """Pieces of the CR-SAM regularizer at one point (perturbation frozen)."""

    loss: float
    grad: np.ndarray
    eps: np.ndarray
    loss_plus: float
    grad_plus: np.ndarray
    loss_minus: float
    grad_minus: np.ndarray
    curvature: float  # floored finite-difference curvature along eps
    floor_active: bool
    reg_grad: np.ndarray


def fd_curvature(loss: float, loss_plus: float, loss_minus: float, rho: float) -> float:
    """Second difference of the loss along the perturbation, divided by ``rho^2``."""
    return (loss_plus + loss_minus - 2.0 * loss) / (rho * rho)


def crsam_terms(
    obj: DifferentiableObjective,
    w,
    batch: Batch,
    cfg: SharpnessConfig,
    eps: Optional[np.ndarray] = None,
    backend: HvpBackend = EXACT,
) -> CurvatureTerms:
    """Evaluate ``L, g`` at ``w`` and ``w +- eps`` and assemble ``grad R_c``.

    ``R_c = a log t + b log |g|`` with ``t`` the floored FD curvature along
    ``eps``. Differentiating with ``eps`` held fixed:

        grad(a log t)   = a (g+ + g- - 2g) / (rho^2 t)    (0 while the floor binds)
        grad(b log |g|) = b H g / |g|^2
    """
    w = np.asarray(w, dtype=np.float64)
    r = value_and_grad(obj, w, batch)
    if eps is None:
        eps = sam_perturbation(r.grad, cfg)
    rho = _epsilon_norm(eps)
    rp = value_and_grad(obj, w + eps, batch)
    rm = value_and_grad(obj, w - eps, batch)

    reg = np.zeros_like(w)
    if rho > 0:
        raw = fd_curvature(r.loss, rp.loss, rm.loss, rho)
        floor_active = raw <= cfg.cr_trace_floor
        t = cfg.cr_trace_floor if floor_active else raw
        if not floor_active:
            reg = reg + cfg.cr_alpha * (rp.grad + rm.grad - 2.0 * r.grad) / (rho * rho * t)
    else:
        raw, t, floor_active = 0.0, cfg.cr_trace_floor, True

    g_sq = float(np.dot(r.grad, r.grad))
    if g_sq > 0:
        reg = reg + cfg.cr_beta * hvp(obj, w, r.grad, batch, backend) / g_sq
    return CurvatureTerms(
        r.loss, r.grad, eps, rp.loss, rp.grad, rm.loss, rm.grad, t, floor_active, reg
    )


def crsam_regularizer(
    obj: DifferentiableObjective, w, batch: Batch, cfg: SharpnessConfig, eps
) -> float:
    """Value of ``R_c`` at ``w`` for a fixed perturbation ``eps``."""
    w = np.asarray(w, dtype=np.float64)
    rho = _epsilon_norm(eps)
    r = value_and_grad(obj, w, batch)
    lp = obj.eval(w + eps, batch)
    lm = obj.eval(w - eps, batch)
    t = max(fd_curvature(r.loss, lp, lm, rho), cfg.cr_trace_floor)
    return cfg.cr_alpha * np.log(t) + cfg.cr_beta * np.log(np.linalg.norm(r.grad))


def crsam_step(obj: DifferentiableObjective, w, batch: Batch, state, cfg: SharpnessConfig):
    terms = crsam_terms(obj, w, batch, cfg)
    d = terms.grad_plus + terms.reg_grad
    w_new, state = base_step(state, w, d, cfg.weight_decay)
    report = StepReport(
        terms.loss,
        terms.loss_plus,
        _epsilon_norm(terms.eps),
        terms.loss_plus - terms.loss,
        3,
    )
    return w_new, state, report


STEPS = {
    "ADAM": plain_step,
    "SGD": plain_step,
    "SAM": sam_step,
    "ASAM": asam_step,
    "GSAM": gsam_step,
    "WSAM": wsam_step,
    "CRSAM": crsam_step,
}


def measure_sharpness(
    obj: DifferentiableObjective,
    w,
    batch: Batch,
    cfg: SharpnessConfig,
    ascent_steps: int = 20,
    seed: int = 0,
) -> float:
    """Lower bound on ``max_{|eps|<=rho} L(w + eps) - L(w)``.

    Projected normalized-gradient ascent on ``eps`` starting from
    ``rho g / |g|``; a step is kept only if it raises the loss, otherwise the
    step length is halved. At a stationary point the start direction is a
    seeded random unit vector.
    """
    if ascent_steps < 1:
        raise SpecError("ascent_steps must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    rho = cfg.rho
    base = value_and_grad(obj, w, batch)
    if rho == 0:
        return 0.0

    def project(e):
        n = np.linalg.norm(e)
        return e if n <= rho else e * (rho / n)

    g = base.grad
    if np.linalg.norm(g) > 0:
        eps = rho * g / np.linalg.norm(g)
    else:
        d = np.random.default_rng(seed).standard_normal(w.shape)
        eps = rho * d / np.linalg.norm(d)
    cur = value_and_grad(obj, w + eps, batch)
    best = max(cur.loss - base.loss, 0.0)
    step = rho
    for _ in range(ascent_steps):
        gn = np.linalg.norm(cur.grad)
        if gn == 0 or step < 1e-12 * rho:
            break
        cand = project(eps + step * cur.grad / gn)
        nxt = value_and_grad(obj, w + cand, batch)
        if nxt.loss > cur.loss:
            eps, cur = cand, nxt
            best = max(best, cur.loss - base.loss)
        else:
            step *= 0.5
    return float(best)


def generalization_gap(train_loss: float, test_loss: float) -> float:
    return test_loss - train_loss
