"""Initial-value-problem solvers with function-evaluation accounting.

Two methods are provided: classical fixed-step RK4 and the adaptive
Dormand-Prince 5(4) pair. Both operate on tensors of any shape (the flow
layers pass flat vectors) and record every internal step on the autograd
tape when gradients are enabled, so losses can be differentiated through
the solve. Step-size control happens in plain Python floats and is
therefore treated as a constant by autograd.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import torch

Dynamics = Callable[[torch.Tensor, float], torch.Tensor]


class SolverError(RuntimeError):
    pass


class IntegrationDiverged(SolverError):
    def __init__(self, step: int, nfe: int):
        super().__init__(f"non-finite state at step {step} (nfe={nfe})")
        self.step = step
        self.nfe = nfe


class BudgetExhausted(SolverError):
    def __init__(self, nfe: int, max_evals: int):
        super().__init__(f"function-evaluation budget exhausted: {nfe} > {max_evals}")
        self.nfe = nfe
        self.max_evals = max_evals


class Method(str, enum.Enum):
    RK4_FIXED = "rk4"
    DOPRI5_ADAPTIVE = "dopri5"


@dataclass(frozen=True)
class OdeProblem:
    dynamics: Dynamics
    t_start: float
    t_end: float
    y0: torch.Tensor

    def __post_init__(self):
        if self.t_start == self.t_end:
            raise ValueError("t_start and t_end must differ")


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.DOPRI5_ADAPTIVE
    rtol: float = 1e-5
    atol: float = 1e-5
    n_steps: int = 20
    max_evals: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if self.n_steps < 1 or self.max_evals < 1:
            raise ValueError("n_steps and max_evals must be >= 1")

    @classmethod
    def adaptive(cls, tolerance: float, max_evals: int = 100_000) -> "SolverConfig":
        """A single tolerance knob applied to both rtol and atol."""
        return cls(Method.DOPRI5_ADAPTIVE, tolerance, tolerance, max_evals=max_evals)

    @classmethod
    def fixed(cls, n_steps: int) -> "SolverConfig":
        return cls(Method.RK4_FIXED, n_steps=n_steps)


@dataclass
class SolveResult:
    y_final: torch.Tensor
    nfe: int
    steps_accepted: int
    steps_rejected: int


def _check_finite(y: torch.Tensor, step: int, nfe: int) -> None:
    if not bool(torch.isfinite(y).all()):
        raise IntegrationDiverged(step, nfe)


def solve_fixed(problem: OdeProblem, config: SolverConfig) -> SolveResult:
    if config.method is not Method.RK4_FIXED:
        raise ValueError(f"solve_fixed needs {Method.RK4_FIXED}, got {config.method}")
    f = problem.dynamics
    n = config.n_steps
    h = (problem.t_end - problem.t_start) / n
    y = problem.y0
    for i in range(n):
        t = problem.t_start + i * h
        k1 = f(y, t)
        k2 = f(y + (0.5 * h) * k1, t + 0.5 * h)
        k3 = f(y + (0.5 * h) * k2, t + 0.5 * h)
        k4 = f(y + h * k3, t + h)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(y, i, 4 * (i + 1))
    return SolveResult(y, nfe=4 * n, steps_accepted=n, steps_rejected=0)


# Dormand-Prince 5(4) tableau.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
ORDER = 5


def _rms(x: torch.Tensor) -> float:
    return float(torch.sqrt(torch.mean(x.detach() ** 2)))


def _initial_step(f: Dynamics, t0: float, y0: torch.Tensor, f0: torch.Tensor,
                  direction: float, rtol: float, atol: float) -> tuple[float, int]:
    # Hairer, Norsett & Wanner first-step heuristic; costs one evaluation.
    scale = atol + rtol * y0.detach().abs()
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    with torch.no_grad():
        f1 = f(y0.detach() + direction * h0 * f0.detach(), t0 + direction * h0)
    d2 = _rms((f1 - f0.detach()) / scale) / h0
    dmax = max(d1, d2)
    if dmax <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / dmax) ** (1.0 / ORDER)
    return min(100 * h0, h1), 1


def solve_adaptive(problem: OdeProblem, config: SolverConfig) -> SolveResult:
    if config.method is not Method.DOPRI5_ADAPTIVE:
        raise ValueError(f"solve_adaptive needs {Method.DOPRI5_ADAPTIVE}, got {config.method}")
    f = problem.dynamics
    rtol, atol = config.rtol, config.atol
    t, t_end = problem.t_start, problem.t_end
    direction = 1.0 if t_end > t else -1.0
    span = abs(t_end - t)
    y = problem.y0

    k_first = f(y, t)
    nfe = 1
    _check_finite(k_first, 0, nfe)
    h, extra = _initial_step(f, t, y, k_first, direction, rtol, atol)
    nfe += extra
    accepted = rejected = 0

    while direction * (t_end - t) > 0:
        # Snap to the endpoint when the remainder is within rounding of it.
        remaining = abs(t_end - t)
        if h >= remaining or remaining - h < 1e-12 * span:
            h = remaining
        if nfe + 6 > config.max_evals:
            raise BudgetExhausted(nfe, config.max_evals)
        dt = direction * h
        ks = [k_first]
        for i in range(1, 7):
            yi = y
            for a, k in zip(_A[i], ks):
                if a != 0.0:
                    yi = yi + (dt * a) * k
            ks.append(f(yi, t + _C[i] * dt))
        nfe += 6
        # Stage 7 is evaluated at the order-5 solution (FSAL).
        y_new = yi
        err = sum((dt * e) * k for e, k in zip(_E, ks) if e != 0.0)

        if not bool(torch.isfinite(y_new).all()):
            # Treat as a failed step; shrink hard and give up once h underflows.
            rejected += 1
            h *= MIN_FACTOR
            if h < 1e-14 * max(span, 1.0):
                raise IntegrationDiverged(accepted + rejected, nfe)
            continue

        scale = atol + rtol * torch.maximum(y.detach().abs(), y_new.detach().abs())
        err_norm = _rms(err / scale)
        if err_norm == 0.0:
            factor = MAX_FACTOR
        else:
            factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** (-1.0 / ORDER)))

        if err_norm <= 1.0:
            t = t_end if h == remaining else t + dt
            y = y_new
            k_first = ks[6]
            accepted += 1
        else:
            rejected += 1
            factor = min(factor, 1.0)
        h *= factor
        if not math.isfinite(h) or h <= 0:
            raise IntegrationDiverged(accepted + rejected, nfe)

    return SolveResult(y, nfe=nfe, steps_accepted=accepted, steps_rejected=rejected)


def solve(problem: OdeProblem, config: SolverConfig) -> SolveResult:
    if config.method is Method.RK4_FIXED:
        return solve_fixed(problem, config)
    return solve_adaptive(problem, config)
