"""Inversion unbiasing of dilation-averaged power spectra.

The forward relation between the hidden power spectrum ``g`` and the data term
``d = 3 g_eta + w g_eta'`` is

    (I - L_{C0}) g = C1 L_{C2} d,      (L_C g)(w) = C**3 g(C w),

with ``C0 = (1 - s) / (1 + s)``, ``C1 = 2 s``, ``C2 = 1 / (1 + s)`` and
``s = sqrt(3) eta``. There is no closed form for ``(I - L_{C0})^-1`` so ``g`` is
obtained by minimising ``||(I - L_{C0}) g - C1 L_{C2} d||^2`` over nonnegative
``g``; with ``eta`` unknown the same loss is minimised jointly over
``(g, eta)``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from .grid import (
    FrequencyGrid,
    SampledSignal,
    SpatialGrid,
    SpectrumGrid,
    finite_difference_derivative,
    gaussian_smooth,
    gaussian_smooth_derivative,
    interpolate,
    interpolation_matrix,
    inverse_fourier_transform,
)

log = logging.getLogger(__name__)

__all__ = [
    "DilationConstants",
    "OptimizerConfig",
    "Candidate",
    "EstimateReport",
    "EtaEstimationError",
    "dilation_matrix",
    "dilation_apply",
    "apply_A",
    "apply_A_adjoint",
    "forward_B",
    "g_eta_oracle",
    "data_term",
    "InversionProblem",
    "invert_known_eta",
    "inverse_apply",
    "estimate_dilation",
    "estimate_noisy",
    "smoothed_data_term",
    "eta_interior",
    "choose_L",
    "joint_optimize",
    "recover_signal_real_positive",
]

SQRT3 = np.sqrt(3.0)
# C0 > 0 requires sqrt(3) eta < 1; the model itself only allows eta <= 12**-0.5
ETA_OPERATOR_MAX = 1 / SQRT3


@dataclass(frozen=True)
class DilationConstants:
    eta: float

    def __post_init__(self):
        if not 0 < self.eta < ETA_OPERATOR_MAX:
            raise ValueError(f"eta must lie in (0, 3**-0.5), got {self.eta}")

    @property
    def c0(self) -> float:
        s = SQRT3 * self.eta
        return (1 - s) / (1 + s)

    @property
    def c1(self) -> float:
        return 2 * SQRT3 * self.eta

    @property
    def c2(self) -> float:
        return 1 / (1 + SQRT3 * self.eta)


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for the descent solvers.

    ``parametrization`` is ``"sqrt"`` (optimise ``p`` with ``g = p**2``) or
    ``"direct"`` (projected descent on ``g >= 0``).
    """

    max_iters: int = 5000
    grad_tol: float = 1e-7
    armijo: float = 1e-4
    shrink: float = 0.5
    parametrization: str = "sqrt"
    eta_bounds: tuple[float, float] = (0.05, 0.40)
    eta_inits: tuple[float, ...] = (0.10, 0.15, 0.20, 0.25, 0.30, 0.35)
    boundary_margin: float = 0.02
    joint_iters: int = 100
    eta_step: float = 0.05
    eta_tol: float = 1e-3
    eta_fd_step: float = 0.01

    def __post_init__(self):
        if self.parametrization not in ("sqrt", "direct"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        lo, hi = self.eta_bounds
        if not 0 < lo < hi < ETA_OPERATOR_MAX:
            raise ValueError(f"invalid eta bounds {self.eta_bounds}")
        if not self.eta_inits or not all(lo < e < hi for e in self.eta_inits):
            raise ValueError("eta_inits must be nonempty and interior to eta_bounds")
        if self.max_iters < 1 or self.grad_tol <= 0:
            raise ValueError("max_iters and grad_tol must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Candidate:
    eta_init: float
    eta_learned: float
    final_loss: float
    converged: bool


@dataclass(frozen=True, eq=False)
class EstimateReport:
    pf_hat: SpectrumGrid
    eta_hat: float | str
    eta_used: float
    loss_trace: np.ndarray
    converged: bool
    iterations: int
    l_smooth: float | None = None
    candidates: tuple[Candidate, ...] = ()
    config_hash: str = ""
    seed: int | None = None

    @property
    def final_loss(self) -> float:
        return float(self.loss_trace[-1])


class EtaEstimationError(RuntimeError):
    pass


# --- operators ----------------------------------------------------------------

@lru_cache(maxsize=512)
def _dilation_csr(n: int, dw: float, c: float) -> sp.csr_matrix:
    grid = FrequencyGrid(n, dw)
    return (c**3 * interpolation_matrix(grid, c * grid.omega)).tocsr()


def dilation_matrix(grid: FrequencyGrid, c: float) -> sp.csr_matrix:
    """Sparse matrix of ``(L_c g)(w) = c**3 g(c w)`` (cubic, zero-extended)."""
    if not c > 0:
        raise ValueError("dilation factor must be positive")
    return _dilation_csr(grid.n_points, grid.dw, float(c))


def dilation_apply(s: SpectrumGrid, c: float) -> SpectrumGrid:
    return s.with_values(dilation_matrix(s.grid, c) @ s.values)


def _a_matrix(grid: FrequencyGrid, k: DilationConstants) -> sp.csr_matrix:
    return (sp.identity(grid.n_points, format="csr") - dilation_matrix(grid, k.c0)).tocsr()


def apply_A(s: SpectrumGrid, k: DilationConstants) -> SpectrumGrid:
    return s.with_values(s.values - dilation_apply(s, k.c0).values)


def apply_A_adjoint(s: SpectrumGrid, k: DilationConstants) -> SpectrumGrid:
    """Continuum adjoint ``h(w) - C0**2 h(w / C0)`` of ``A = I - L_{C0}``."""
    c0 = k.c0
    return s.with_values(s.values - c0**2 * interpolate(s, s.omega / c0))


def forward_B(s: SpectrumGrid, eta: float) -> SpectrumGrid:
    """``[(1+r)**3 g((1+r) w) - (1-r)**3 g((1-r) w)] / (2 r)`` with ``r = sqrt(3) eta``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    DilationConstants(eta)
    r = SQRT3 * eta
    up = dilation_apply(s, 1 + r).values
    down = dilation_apply(s, 1 - r).values
    return s.with_values((up - down) / (2 * r))


def _as_function(pf) -> Callable:
    if isinstance(pf, SpectrumGrid):
        return lambda w: interpolate(pf, np.ravel(w)).reshape(np.shape(w))
    return pf


def g_eta_oracle(pf, eta: float, n_quad: int = 128, grid: FrequencyGrid | None = None,
                 derivative: bool = False, fd_step: float = 1e-4):
    """Dilation average ``E[(1 - tau)^2 pf((1 - tau) w)]`` by Gauss-Legendre quadrature.

    ``pf`` is a :class:`SpectrumGrid` (cubic interpolation between nodes) or a
    vectorised callable, in which case ``grid`` must be given. With
    ``derivative=True`` the pair ``(g_eta, g_eta')`` is returned, the
    derivative being a central difference of the quadrature in ``w``.
    """
    if n_quad < 64:
        raise ValueError("n_quad must be at least 64")
    if not eta > 0:
        raise ValueError("eta must be positive")
    if grid is None:
        if not isinstance(pf, SpectrumGrid):
            raise ValueError("grid is required when pf is a callable")
        grid = pf.grid
    fn = _as_function(pf)
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    a = 1.0 - SQRT3 * eta * nodes

    def average(w):
        vals = fn(np.outer(a, w))
        return 0.5 * (weights * a**2) @ vals

    w = grid.omega
    g = SpectrumGrid(grid, average(w))
    if not derivative:
        return g
    dg = (average(w + fd_step) - average(w - fd_step)) / (2 * fd_step)
    return g, SpectrumGrid(grid, dg)


def data_term(g_smooth: SpectrumGrid, g_smooth_deriv: SpectrumGrid) -> SpectrumGrid:
    """``3 g(w) + w g'(w)``."""
    if g_smooth.grid != g_smooth_deriv.grid:
        raise ValueError("data_term inputs live on different grids")
    w = g_smooth.omega
    return g_smooth.with_values(3 * g_smooth.values + w * g_smooth_deriv.values)


# --- least squares ---------------------------------------------------------------

class InversionProblem:
    """``loss(g) = dw * ||A g - b||^2`` with ``A = I - L_{C0}``, ``b = C1 L_{C2} d``.

    The gradient uses the transpose of the discretised ``A``, i.e. it is the
    exact gradient of the discrete loss.
    """

    def __init__(self, d: SpectrumGrid, eta: float, form: str = "A"):
        self.d = d
        self.k = DilationConstants(eta)
        grid = d.grid
        self.dw = grid.dw
        if form == "A":
            self.A = _a_matrix(grid, self.k)
            self.b = self.k.c1 * (dilation_matrix(grid, self.k.c2) @ d.values)
        elif form == "B":
            # same continuum loss, C1**2 C2**5 ||B g - d||^2, but d is never resampled
            s = SQRT3 * eta
            w = self.k.c1 * self.k.c2**2.5
            B = (dilation_matrix(grid, 1 + s) - dilation_matrix(grid, 1 - s)) / (2 * s)
            self.A = (w * B).tocsr()
            self.b = w * d.values
        else:
            raise ValueError(f"unknown loss form {form!r}")
        self.AT = self.A.T.tocsr()

    def loss(self, g: np.ndarray) -> float:
        r = self.A @ g - self.b
        return float(self.dw * (r @ r))

    def loss_grad(self, g: np.ndarray):
        r = self.A @ g - self.b
        return float(self.dw * (r @ r)), 2 * self.dw * (self.AT @ r)


@dataclass
class _Descent:
    x: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    step: float | None = None


def _to_g(x, parametrization):
    return x * x if parametrization == "sqrt" else x


def _objective(problem: InversionProblem, parametrization: str):
    if parametrization == "sqrt":
        def fun(p):
            f, gg = problem.loss_grad(p * p)
            return f, 2 * p * gg
    else:
        fun = problem.loss_grad
    return fun


def _descend(fun, state: _Descent, max_iters: int, grad_tol_abs: float, cfg: OptimizerConfig,
             project: Callable | None = None):
    """Monotone gradient descent: Barzilai-Borwein trial steps, Armijo backtracking."""
    project = project or (lambda v: v)
    x = project(state.x)
    f, gr = fun(x)
    if not state.trace:
        state.trace.append(f)
    step = state.step or 1.0 / max(np.linalg.norm(gr), 1e-300)
    floor = 1e-28 * max(f, 1e-300)
    stalled = 0
    for _ in range(max_iters):
        pg = x - project(x - gr)
        if np.linalg.norm(pg) <= grad_tol_abs or f <= floor:
            state.converged = True
            break
        for _ in range(60):
            x_new = project(x - step * gr)
            dx = x_new - x
            f_new, gr_new = fun(x_new)
            if f_new <= f + cfg.armijo * (gr @ dx):
                break
            step *= cfg.shrink
        else:
            # no decrease representable in floating point
            state.converged = stalled > 0 or np.linalg.norm(pg) <= 1e3 * grad_tol_abs
            break
        yk = gr_new - gr
        sy = dx @ yk
        step = (dx @ dx) / sy if sy > 0 else 2 * step
        rel = (f - f_new) / max(abs(f), 1e-300)
        stalled = stalled + 1 if rel < 1e-15 else 0
        x, f, gr = x_new, f_new, gr_new
        state.trace.append(f)
        state.iterations += 1
        if stalled >= 20:
            state.converged = True
            break
    state.x, state.step = x, step
    return state


def _initial_x(problem: InversionProblem, parametrization: str) -> np.ndarray:
    g0 = np.maximum(problem.b, 0.0)
    if parametrization == "sqrt":
        top = g0.max()
        return np.sqrt(g0 + (1e-8 * top if top > 0 else 0.0))
    return g0


def _grad_tol_abs(problem: InversionProblem, x: np.ndarray, cfg: OptimizerConfig) -> float:
    # grad_tol * ||d||_2, expressed for raw partial derivatives of the discrete loss
    dnorm = np.sqrt(problem.dw * (problem.d.values @ problem.d.values))
    scale = np.sqrt(problem.dw)
    if cfg.parametrization == "sqrt":
        scale *= 2 * max(np.abs(x).max(), 1e-300)
    return cfg.grad_tol * dnorm * scale


def _project_for(parametrization: str):
    if parametrization == "direct":
        return lambda v: np.maximum(v, 0.0)
    return None


def invert_known_eta(d: SpectrumGrid, eta: float, cfg: OptimizerConfig | None = None,
                     oracle: bool = False, init: np.ndarray | None = None) -> EstimateReport:
    """Minimise ``||(I - L_{C0}) g - C1 L_{C2} d||^2`` over ``g >= 0`` at known ``eta``."""
    cfg = cfg or OptimizerConfig()
    problem = InversionProblem(d, eta)
    x0 = _initial_x(problem, cfg.parametrization) if init is None else init
    state = _Descent(x=x0)
    _descend(_objective(problem, cfg.parametrization), state, cfg.max_iters,
             _grad_tol_abs(problem, x0, cfg), cfg, _project_for(cfg.parametrization))
    if not state.converged:
        log.warning("inversion at eta=%g did not converge in %d iterations", eta, cfg.max_iters)
    g = _to_g(state.x, cfg.parametrization)
    return EstimateReport(
        pf_hat=d.with_values(g), eta_hat="oracle" if oracle else float(eta), eta_used=float(eta),
        loss_trace=np.asarray(state.trace), converged=state.converged,
        iterations=state.iterations, config_hash=cfg.digest())


def inverse_apply(s: SpectrumGrid, k: DilationConstants, cfg: OptimizerConfig | None = None,
                  tol: float = 1e-10) -> SpectrumGrid:
    """``(I - L_{C0})^-1 s`` for signed ``s``, by unconstrained least squares."""
    cfg = cfg or OptimizerConfig()
    grid = s.grid
    A = _a_matrix(grid, k)
    AT = A.T.tocsr()
    dw = grid.dw

    def fun(g):
        r = A @ g - s.values
        return float(dw * (r @ r)), 2 * dw * (AT @ r)

    state = _Descent(x=s.values.copy())
    tol_abs = tol * np.sqrt(dw) * np.sqrt(dw * (s.values @ s.values))
    _descend(fun, state, cfg.max_iters, tol_abs, cfg)
    return s.with_values(state.x)


def choose_L(sigma: float, m: int, dw: float | None = None) -> float:
    """Filter width balancing smoothing bias against noise: ``(sigma**4 / M)**(1/6)``
    for ``sigma >= 1`` and ``(sigma**2 / M)**(1/6)`` below, floored at ``dw``."""
    if m < 1:
        raise ValueError("m must be at least 1")
    power = 4 if sigma >= 1 else 2
    L = (sigma**power / m) ** (1 / 6)
    if dw is not None:
        L = max(L, dw)
    return float(L)


def estimate_dilation(g_mean: SpectrumGrid, eta: float | None, cfg: OptimizerConfig | None = None,
                      oracle: bool = True) -> EstimateReport:
    """Noise-free estimator: unsmoothed mean spectrum, finite-difference derivative.

    ``eta=None`` learns ``eta`` jointly.
    """
    d = data_term(g_mean, finite_difference_derivative(g_mean))
    if eta is None:
        return joint_optimize(d, cfg)
    return invert_known_eta(d, eta, cfg, oracle=oracle)


def smoothed_data_term(batch_mean: SpectrumGrid, L: float) -> SpectrumGrid:
    return data_term(gaussian_smooth(batch_mean, L), gaussian_smooth_derivative(batch_mean, L))


def estimate_noisy(batch_mean: SpectrumGrid, eta: float | None, sigma: float, m: int,
                   cfg: OptimizerConfig | None = None, L: float | None = None,
                   oracle: bool = True) -> EstimateReport:
    """Smoothed estimator for noisy data; ``eta=None`` learns ``eta`` jointly."""
    cfg = cfg or OptimizerConfig()
    if sigma < 0 or m < 1:
        raise ValueError("need sigma >= 0 and m >= 1")
    if L is None:
        L = choose_L(sigma, m, batch_mean.grid.dw)
    d = smoothed_data_term(batch_mean, L)
    if eta is None:
        report = joint_optimize(d, cfg)
    else:
        report = invert_known_eta(d, eta, cfg, oracle=oracle)
    return EstimateReport(**{**report.__dict__, "l_smooth": float(L)})


def _profile_solve(d: SpectrumGrid, eta: float, x0, cfg: OptimizerConfig):
    """Inner minimisation over ``g`` at fixed ``eta``, warm-started from ``x0``."""
    problem = InversionProblem(d, eta)
    if x0 is None:
        x0 = _initial_x(problem, cfg.parametrization)
    state = _Descent(x=x0)
    _descend(_objective(problem, cfg.parametrization), state, cfg.max_iters,
             _grad_tol_abs(problem, x0, cfg), cfg, _project_for(cfg.parametrization))
    return state.trace[-1], state


def _joint_single(d: SpectrumGrid, eta0: float, cfg: OptimizerConfig):
    """Descent in ``eta`` on the profile loss ``F(eta) = min_g L(g, eta)`` from ``eta0``.

    Resampling a noisy data term leaves narrow wells in ``F`` far narrower
    than the basin around the true ``eta``. The search therefore runs on the
    window average ``S(eta) = [F(eta - h) + 2 F(eta) + F(eta + h)] / 4`` with
    ``h = eta_fd_step``, whose slope is taken by central differences. Each
    profile value is a warm-started inner solve, so ``(g, eta)`` moves
    downhill and ``trace`` records ``F`` at the accepted iterates. A bounded
    scalar search on ``F`` within ``[eta - h, eta + h]`` gives the final ``eta``,
    so candidates are compared on the profile loss itself.
    """
    lo, hi = cfg.eta_bounds
    h = cfg.eta_fd_step
    # the profile is the same for both parametrizations; the convex projected
    # form evaluates it exactly and fast
    inner = replace(cfg, parametrization="direct")
    memo: dict[float, tuple[float, _Descent]] = {}
    iterations = 0

    def F(eta, x0):
        nonlocal iterations
        eta = float(np.clip(eta, lo, hi))
        if eta not in memo:
            f, st = _profile_solve(d, eta, x0, inner)
            iterations += st.iterations
            memo[eta] = (f, st)
        return memo[eta]

    def S(eta, x0):
        f0, st = F(eta, x0)
        return (F(eta - h, st.x)[0] + 2 * f0 + F(eta + h, st.x)[0]) / 4, st

    def slope_at(eta, x0):
        e_lo, e_hi = max(eta - h, lo), min(eta + h, hi)
        return (S(e_hi, x0)[0] - S(e_lo, x0)[0]) / (e_hi - e_lo)

    eta = eta0
    s, state = S(eta, None)
    trace = [F(eta, None)[0]]
    slope = slope_at(eta, state.x)
    gain = cfg.eta_step / max(abs(slope), 1e-300)
    converged = False
    for _ in range(cfg.joint_iters):
        if slope == 0 or (slope > 0 and eta <= lo) or (slope < 0 and eta >= hi):
            converged = True  # stationary or pinned at a bound
            break
        step = float(np.clip(-gain * slope, -cfg.eta_step, cfg.eta_step))
        accepted = False
        while abs(step) >= cfg.eta_tol:
            trial = float(np.clip(eta + step, lo, hi))
            st_val, st = S(trial, state.x)
            if trial != eta and st_val <= s + cfg.armijo * slope * (trial - eta):
                accepted = True
                break
            step *= cfg.shrink
        if not accepted:
            converged = True  # no descent step longer than eta_tol
            break
        new_slope = slope_at(trial, st.x)
        moved, dslope = trial - eta, new_slope - slope
        # one-dimensional Barzilai-Borwein gain
        gain = moved / dslope if moved * dslope > 0 else 2 * gain
        eta, s, state, slope = trial, st_val, st, new_slope
        trace.append(F(eta, state.x)[0])
    # S only locates the basin; polish on F itself within one window
    x0 = state.x
    res = minimize_scalar(lambda e: F(e, x0)[0], bounds=(max(eta - h, lo), min(eta + h, hi)),
                          method="bounded", options={"xatol": cfg.eta_tol / 10})
    if res.fun < F(eta, x0)[0]:
        eta = float(np.clip(res.x, lo, hi))
        state = F(eta, x0)[1]
        trace.append(F(eta, x0)[0])
    state = _Descent(x=state.x, trace=trace, iterations=iterations, converged=converged)
    return eta, state, converged


def joint_optimize(d_tilde: SpectrumGrid, cfg: OptimizerConfig | None = None) -> EstimateReport:
    """Learn ``(g, eta)`` from each ``eta`` initialisation and select a candidate.

    Learned values within ``boundary_margin`` of either bound are discarded; the
    remaining candidate with the smallest loss wins.
    """
    cfg = cfg or OptimizerConfig()
    lo, hi = cfg.eta_bounds
    runs = []
    for eta0 in cfg.eta_inits:
        if not np.any(d_tilde.values):
            # the loss vanishes for every (g, eta): the infimum sits on the eta -> 0 plateau
            state = _Descent(x=np.zeros(d_tilde.grid.n_points), trace=[0.0], converged=True)
            runs.append((Candidate(eta0, lo, 0.0, True), state))
            continue
        eta, state, converged = _joint_single(d_tilde, eta0, cfg)
        runs.append((Candidate(eta0, eta, float(state.trace[-1]), converged), state))
    candidates = tuple(c for c, _ in runs)
    interior = [(c, s) for c, s in runs
                if eta_interior(c.eta_learned, cfg)]
    if not interior:
        raise EtaEstimationError(
            "eta estimation failed; all candidates at boundary "
            f"({', '.join(f'{c.eta_learned:.3f}' for c in candidates)})")
    best, state = min(interior, key=lambda cs: cs[0].final_loss)
    g = state.x
    trace, iterations = list(state.trace), state.iterations
    if cfg.parametrization == "sqrt":
        # final pass in the configured parametrization, warm-started at the profile solution
        final = invert_known_eta(d_tilde, best.eta_learned, cfg, init=np.sqrt(g))
        g = final.pf_hat.values
        trace += list(final.loss_trace[1:])
        iterations += final.iterations
    return EstimateReport(
        pf_hat=d_tilde.with_values(g), eta_hat=best.eta_learned, eta_used=best.eta_learned,
        loss_trace=np.asarray(trace), converged=best.converged,
        iterations=iterations, candidates=candidates, config_hash=cfg.digest())


def eta_interior(eta: float, cfg: OptimizerConfig) -> bool:
    lo, hi = cfg.eta_bounds
    return eta - lo >= cfg.boundary_margin and hi - eta >= cfg.boundary_margin


def recover_signal_real_positive(pf: SpectrumGrid, grid: SpatialGrid):
    """Signal whose transform is ``sqrt(pf)``; valid only for real, positive transforms.

    Returns ``(signal, n_clamped)`` where ``n_clamped`` counts negative inputs set to 0.
    """
    vals = np.asarray(pf.values, dtype=float)
    neg = vals < 0
    n_clamped = int(neg.sum())
    if n_clamped:
        log.warning("clamped %d negative power-spectrum values", n_clamped)
    amp = np.sqrt(np.where(neg, 0.0, vals))
    back = inverse_fourier_transform(pf.with_values(amp.astype(complex)), grid)
    return SampledSignal(grid, back.values.real), n_clamped
