"""nmODE and nmODE^2 dynamics with fixed-step solvers.

    nmode:   dy/dt = -y + sin^2(y + gamma)
    nmode2:  dy/dt = -y + sin^2(y + cos^2(y + gamma))

Integration is unrolled; gradients are exact for the discrete solver.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import numcore as nc
from .numcore import ContractError, DimensionError, NumericError, Tensor


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverSpec:
    method: str = "rk4"
    step: float = 0.125
    t_end: float = 1.0

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ContractError(f"unknown solver method {self.method!r}")
        if not (self.step > 0 and self.t_end > 0):
            raise ContractError("step and t_end must be positive")
        n = round(self.t_end / self.step)
        if n < 1 or abs(n * self.step - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ContractError(f"t_end={self.t_end} is not a whole number of steps of {self.step}")

    @property
    def n_steps(self) -> int:
        return round(self.t_end / self.step)


ANALYSIS_SPEC = SolverSpec("rk4", 0.125, 20.0)


@dataclass
class OdeState:
    y: Tensor
    gamma: Tensor
    t: float = 0.0

    def __post_init__(self):
        if self.y.shape != self.gamma.shape:
            raise DimensionError(f"state y {self.y.shape} and gamma {self.gamma.shape} differ")


@dataclass
class PerceptualMap:
    """gamma = x @ w + b (affine) or conv1x1(x, w) + b (conv1x1)."""

    weight: Tensor
    bias: Tensor | None = None
    kind: str = "conv1x1"

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "affine":
            return nc.fully_connected(x, self.weight, self.bias)
        if self.kind == "conv1x1":
            return nc.conv2d(x, self.weight, self.bias)
        raise ContractError(f"unknown perceptual map kind {self.kind!r}")


# --- vector fields and their partials (numpy level) -----------------------

def _f_nmode(y, g):
    s = np.sin(y + g)
    return -y + s * s


def _df_nmode(y, g):
    s2 = np.sin(2 * (y + g))
    return -1 + s2, s2


def _f_nmode2(y, g):
    c = np.cos(y + g)
    s = np.sin(y + c * c)
    return -y + s * s


def _df_nmode2(y, g):
    u = y + g
    c = np.cos(u)
    v = y + c * c
    s2u = np.sin(2 * u)
    s2v = np.sin(2 * v)
    return -1 + s2v * (1 - s2u), -s2v * s2u


FIELDS = {"nmode": (_f_nmode, _df_nmode), "nmode2": (_f_nmode2, _df_nmode2)}


def nmode_deriv(y: Tensor, gamma: Tensor) -> Tensor:
    if y.shape != gamma.shape:
        raise DimensionError(f"nmode_deriv: y {y.shape} vs gamma {gamma.shape}")
    s = nc.sin(y + gamma)
    return nc.neg(y) + s * s


def nmode2_deriv(y: Tensor, gamma: Tensor) -> Tensor:
    if y.shape != gamma.shape:
        raise DimensionError(f"nmode2_deriv: y {y.shape} vs gamma {gamma.shape}")
    c = nc.cos(y + gamma)
    s = nc.sin(y + c * c)
    return nc.neg(y) + s * s


Deriv = Union[str, Callable[[Tensor, Tensor], Tensor]]


def _check_finite(y: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(y)):
        raise NumericError(f"ODE state became non-finite at step {step}")


def _rollout_fused(y0: Tensor, gamma: Tensor, name: str, spec: SolverSpec) -> Tensor:
    f, df = FIELDS[name]
    h = y0.dtype.type(spec.step)
    g = gamma.data
    y = y0.data
    stages = []
    for i in range(spec.n_steps):
        if spec.method == "euler":
            stages.append((y,))
            y = y + h * f(y, g)
        else:
            k1 = f(y, g)
            u2 = y + h / 2 * k1
            k2 = f(u2, g)
            u3 = y + h / 2 * k2
            k3 = f(u3, g)
            u4 = y + h * k3
            k4 = f(u4, g)
            stages.append((y, u2, u3, u4))
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(y, i)

    def bw(gy_out):
        gy = gy_out
        gg = np.zeros_like(g)
        for st in reversed(stages):
            if spec.method == "euler":
                a, c = df(st[0], g)
                gg = gg + h * gy * c
                gy = gy + h * gy * a
                continue
            y_i, u2, u3, u4 = st
            dk1 = h / 6 * gy
            dk2 = h / 3 * gy
            dk3 = h / 3 * gy
            dk4 = h / 6 * gy
            new_gy = gy.copy()
            a, c = df(u4, g)
            gu = dk4 * a
            gg = gg + dk4 * c
            dk3 = dk3 + h * gu
            new_gy += gu
            a, c = df(u3, g)
            gu = dk3 * a
            gg = gg + dk3 * c
            dk2 = dk2 + h / 2 * gu
            new_gy += gu
            a, c = df(u2, g)
            gu = dk2 * a
            gg = gg + dk2 * c
            dk1 = dk1 + h / 2 * gu
            new_gy += gu
            a, c = df(y_i, g)
            gg = gg + dk1 * c
            new_gy += dk1 * a
            gy = new_gy
        return gy, gg

    return nc.record(y, (y0, gamma), bw)


def _rollout_composed(y: Tensor, gamma: Tensor, f: Callable, spec: SolverSpec) -> Tensor:
    h = spec.step
    for i in range(spec.n_steps):
        if spec.method == "euler":
            y = y + f(y, gamma) * h
        else:
            k1 = f(y, gamma)
            k2 = f(y + k1 * (h / 2), gamma)
            k3 = f(y + k2 * (h / 2), gamma)
            k4 = f(y + k3 * h, gamma)
            y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6)
        _check_finite(y.data, i)
    return y


def integrate(state0: OdeState, deriv: Deriv, spec: SolverSpec) -> OdeState:
    """Roll the state forward to ``state0.t + spec.t_end``.

    ``deriv`` is "nmode", "nmode2" (fused op) or any callable ``(y, gamma) -> Tensor``
    built from numcore ops (differentiated through the recorded graph).
    """
    if isinstance(deriv, str):
        if deriv not in FIELDS:
            raise ContractError(f"unknown vector field {deriv!r}")
        y = _rollout_fused(state0.y, state0.gamma, deriv, spec)
    else:
        y = _rollout_composed(state0.y, state0.gamma, deriv, spec)
    return OdeState(y, state0.gamma, state0.t + spec.n_steps * spec.step)


def trajectory(y0: np.ndarray, gamma: np.ndarray, deriv: str, spec: SolverSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (times [T+1], states [T+1, ...]) including the initial state."""
    f = FIELDS[deriv][0]
    h = spec.step
    y = np.asarray(y0, dtype=np.float64)
    g = np.asarray(gamma, dtype=np.float64)
    ys = [y]
    for i in range(spec.n_steps):
        if spec.method == "euler":
            y = y + h * f(y, g)
        else:
            k1 = f(y, g)
            k2 = f(y + h / 2 * k1, g)
            k3 = f(y + h / 2 * k2, g)
            k4 = f(y + h * k3, g)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(y, i)
        ys.append(y)
    return np.arange(spec.n_steps + 1) * h, np.stack(ys)


def write_trajectory_csv(path, times: np.ndarray, states: np.ndarray) -> None:
    """CSV with columns t, index, y (one row per time and flat state index)."""
    flat = states.reshape(len(times), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "index", "y"])
        for t, row in zip(times, flat):
            for j, v in enumerate(row):
                w.writerow([repr(float(t)), j, repr(float(v))])


def nmode2_block(x: Tensor, pmap: PerceptualMap, spec: SolverSpec = SolverSpec()) -> Tensor:
    """gamma = conv1x1(x) + b, y(0) = 0, return y(t_end) under nmODE^2."""
    if pmap.kind != "conv1x1":
        raise ContractError("nmode2_block needs a conv1x1 perceptual map")
    gamma = pmap(x)
    if gamma.shape != x.shape:
        raise DimensionError(f"perceptual map output {gamma.shape} != input {x.shape}")
    y0 = Tensor(np.zeros(x.shape), dtype=x.dtype)
    return integrate(OdeState(y0, gamma), "nmode2", spec).y


def fixed_point(
    gamma: Tensor | np.ndarray,
    deriv: str,
    tol: float = 1e-10,
    y0: np.ndarray | None = None,
    step: float = 0.125,
    max_steps: int = 200_000,
) -> np.ndarray:
    """Integrate until ||dy/dt||_inf < tol and return the state."""
    if tol <= 0:
        raise ContractError("tol must be positive")
    f = FIELDS[deriv][0]
    g = np.asarray(gamma.data if isinstance(gamma, Tensor) else gamma, dtype=np.float64)
    y = np.zeros_like(g) if y0 is None else np.asarray(y0, dtype=np.float64).copy()
    h = step
    resid = np.inf
    for i in range(max_steps):
        k1 = f(y, g)
        resid = float(np.max(np.abs(k1))) if k1.size else 0.0
        if resid < tol:
            return y
        k2 = f(y + h / 2 * k1, g)
        k3 = f(y + h / 2 * k2, g)
        k4 = f(y + h * k3, g)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(y, i)
    raise ConvergenceError(f"no convergence after {max_steps} steps, residual {resid:.3e}")


def equilibria(gamma: float, deriv: str, lo: float = -0.5, hi: float = 1.5, grid: int = 20001) -> list[float]:
    """All roots of the scalar vector field on [lo, hi] by sign scan + bisection.

    Every equilibrium lies in [0, 1] since sin^2 is bounded there.
    """
    f = FIELDS[deriv][0]
    xs = np.linspace(lo, hi, grid)
    vals = f(xs, np.full_like(xs, gamma))
    roots = []
    for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]:
        a, b = xs[i], xs[i + 1]
        fa = f(np.array(a), np.array(gamma))
        if fa == 0:
            r = float(a)
        else:
            for _ in range(200):
                m = 0.5 * (a + b)
                fm = f(np.array(m), np.array(gamma))
                if np.sign(fm) == np.sign(fa):
                    a, fa = m, fm
                else:
                    b = m
            r = 0.5 * (a + b)
        if not roots or abs(r - roots[-1]) > 1e-6:
            roots.append(float(r))
    return roots


@dataclass
class AttractorReport:
    gammas: np.ndarray
    counterexamples: list = field(default_factory=list)

    @property
    def unique(self) -> bool:
        return not self.counterexamples


def attractor_uniqueness(
    gammas, deriv: str = "nmode2", starts: int = 8, seed: int = 0, tol: float = 1e-3
) -> AttractorReport:
    """Integrate from several y0 in [-2, 2] for each gamma; list gammas whose endpoints disagree."""
    rng = np.random.default_rng(seed)
    gammas = np.asarray(gammas, dtype=np.float64)
    report = AttractorReport(gammas)
    for g in gammas:
        ends = [
            float(fixed_point(np.array([g]), deriv, tol=1e-9, y0=rng.uniform(-2, 2, 1))[0])
            for _ in range(starts)
        ]
        if max(ends) - min(ends) > tol:
            report.counterexamples.append((float(g), ends))
    return report
