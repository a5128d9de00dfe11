"""Uniform spatial and frequency grids, continuous-normalised Fourier transforms,
power spectra, discrete L2 norms and Gaussian smoothing.

Conventions
-----------
The Fourier transform is the continuous one,

    f_hat(w) = int f(x) exp(-i x w) dx,

approximated on the box [-N/2, N/2) sampled at ``dx = 2**-ell``. Frequencies
are kept in ascending order ``w_k = k * dw`` for ``k = -n/2 .. n/2 - 1`` with
``dw = 2 pi / N``, so the Nyquist bin ``k = -n/2`` has no mirror partner.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SpatialGrid",
    "FrequencyGrid",
    "SampledSignal",
    "SpectrumGrid",
    "fourier_transform",
    "inverse_fourier_transform",
    "power_spectrum",
    "gaussian_kernel",
    "gaussian_smooth",
    "gaussian_smooth_derivative",
    "finite_difference_derivative",
    "l2_norm",
    "interior_window",
    "interpolation_matrix",
    "interpolate",
]


@dataclass(frozen=True)
class SpatialGrid:
    """Sampling grid ``x_k = -N/2 + k dx`` on the box ``[-N/2, N/2)``.

    Parameters
    ----------
    box : int
        Box length ``N`` (positive, even).
    ell : int
        Sampling exponent; ``dx = 2**-ell``.
    """

    box: int = 32
    ell: int = 5

    def __post_init__(self):
        if self.box <= 0 or self.box % 2:
            raise ValueError(f"box length must be a positive even integer, got {self.box}")
        if self.ell < 0:
            raise ValueError(f"ell must be nonnegative, got {self.ell}")
        n = self.n_points
        if n & (n - 1):
            raise ValueError(f"n_points = {n} is not a power of two")

    @property
    def n_points(self) -> int:
        return self.box * 2**self.ell

    @property
    def dx(self) -> float:
        return 2.0**-self.ell

    @property
    def half_width(self) -> float:
        return self.box / 2

    @cached_property
    def x(self) -> np.ndarray:
        return -self.half_width + self.dx * np.arange(self.n_points)

    def frequency_grid(self) -> "FrequencyGrid":
        return FrequencyGrid(n_points=self.n_points, dw=2 * np.pi / self.box)


@dataclass(frozen=True)
class FrequencyGrid:
    n_points: int
    dw: float

    def __post_init__(self):
        if self.n_points <= 0 or self.n_points % 2:
            raise ValueError("frequency grid needs a positive even number of points")
        if not self.dw > 0:
            raise ValueError("dw must be positive")

    @cached_property
    def omega(self) -> np.ndarray:
        k = np.arange(self.n_points) - self.n_points // 2
        return k * self.dw

    @property
    def band(self) -> tuple[float, float]:
        """Resolved band ``[-n dw / 2, n dw / 2]``."""
        half = self.n_points * self.dw / 2
        return (-half, half)

    @property
    def zero_index(self) -> int:
        return self.n_points // 2


@dataclass(frozen=True, eq=False)
class SampledSignal:
    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (self.grid.n_points,):
            raise ValueError(
                f"expected {self.grid.n_points} samples, got shape {values.shape}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class SpectrumGrid:
    """Samples of a function of frequency; ``values`` may be real or complex."""

    grid: FrequencyGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (self.grid.n_points,):
            raise ValueError(
                f"expected {self.grid.n_points} spectrum values, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def omega(self) -> np.ndarray:
        return self.grid.omega

    def with_values(self, values) -> "SpectrumGrid":
        return SpectrumGrid(self.grid, values)


def _origin_phase(n: int) -> np.ndarray:
    # exp(i w_k N/2) = (-1)**k for the box origin at -N/2
    return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)


def fourier_transform(sig: SampledSignal) -> SpectrumGrid:
    """Continuous-normalised Fourier transform of a sampled signal."""
    g = sig.grid
    raw = np.fft.fft(sig.values) * _origin_phase(g.n_points) * g.dx
    return SpectrumGrid(g.frequency_grid(), np.fft.fftshift(raw))


def inverse_fourier_transform(spec: SpectrumGrid, grid: SpatialGrid) -> SampledSignal:
    """Inverse of :func:`fourier_transform`; returns complex samples."""
    if spec.grid != grid.frequency_grid():
        raise ValueError("spectrum does not live on the grid's frequency lattice")
    raw = np.fft.ifftshift(spec.values) * _origin_phase(grid.n_points)
    return SampledSignal(grid, np.fft.ifft(raw) / grid.dx)


def power_spectrum(sig: SampledSignal) -> SpectrumGrid:
    ft = fourier_transform(sig)
    return ft.with_values(np.abs(ft.values) ** 2)


def gaussian_kernel(L: float, dw: float, derivative: bool = False) -> np.ndarray:
    """Sampled, renormalised Gaussian of width ``L`` (or its derivative).

    The smoothing kernel sums to one. The derivative kernel is the sampled
    ``-(w / L**2) phi_L(w)`` rescaled so that its first moment is exactly -1,
    which makes linear ramps differentiate exactly.
    """
    if L < dw * (1 - 1e-12):
        raise ValueError(
            f"kernel narrower than frequency resolution (L={L:g} < dw={dw:g})")
    half = int(np.ceil(8 * L / dw))
    w = dw * np.arange(-half, half + 1)
    phi = np.exp(-0.5 * (w / L) ** 2)
    phi /= phi.sum()
    if not derivative:
        return phi
    dphi = -w * phi
    return dphi / -(w * dphi).sum()


def _convolve(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # zero extension outside the band
    half = kernel.size // 2
    full = np.convolve(values, kernel, mode="full")
    return full[half:half + values.size]


def gaussian_smooth(s: SpectrumGrid, L: float) -> SpectrumGrid:
    return s.with_values(_convolve(s.values, gaussian_kernel(L, s.grid.dw)))


def gaussian_smooth_derivative(s: SpectrumGrid, L: float) -> SpectrumGrid:
    """``(s * phi_L)'`` computed as ``s * phi_L'``."""
    return s.with_values(_convolve(s.values, gaussian_kernel(L, s.grid.dw, derivative=True)))


def finite_difference_derivative(s: SpectrumGrid) -> SpectrumGrid:
    """Fourth-order centred differences, second order at the two edge pairs."""
    v = np.asarray(s.values, dtype=float)
    h = s.grid.dw
    out = np.gradient(v, h, edge_order=2)
    out[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    return s.with_values(out)


def interior_window(grid: FrequencyGrid, margin: float) -> tuple[float, float]:
    lo, hi = grid.omega[0], grid.omega[-1]
    return (lo + margin, hi - margin)


def _window_mask(grid: FrequencyGrid, window) -> np.ndarray:
    if window is None:
        return np.ones(grid.n_points, dtype=bool)
    lo, hi = window
    mask = (grid.omega >= lo) & (grid.omega <= hi)
    if not mask.any():
        raise ValueError(f"empty frequency window {window}")
    return mask


def l2_norm(s: SpectrumGrid, window: tuple[float, float] | None = None) -> float:
    """Discrete ``L2`` norm ``sqrt(sum |v|^2 dw)``, optionally on ``[lo, hi]``."""
    mask = _window_mask(s.grid, window)
    return float(np.sqrt(np.sum(np.abs(s.values[mask]) ** 2) * s.grid.dw))


def interpolation_matrix(grid: FrequencyGrid, points) -> sp.csr_matrix:
    """Sparse 4-point Lagrange (cubic) interpolation from grid nodes to ``points``.

    Nodes outside the grid count as zero and points outside the sampled range
    get an all-zero row, i.e. the function is zero-extended beyond the band.
    The operator is linear in the data, so its transpose is the exact discrete
    adjoint.
    """
    points = np.asarray(points, dtype=float)
    n = grid.n_points
    u = (points - grid.omega[0]) / grid.dw
    # snap round-off so that on-node points stay exact
    nearest = np.rint(u)
    u = np.where(np.abs(u - nearest) < 1e-9, nearest, u)
    i0 = np.floor(u).astype(np.int64)
    t = u - i0
    weights = np.stack([
        -t * (t - 1) * (t - 2) / 6,
        (t + 1) * (t - 1) * (t - 2) / 2,
        -(t + 1) * t * (t - 2) / 2,
        (t + 1) * t * (t - 1) / 6,
    ], axis=1)
    cols = i0[:, None] + np.arange(-1, 3)[None, :]
    rows = np.broadcast_to(np.arange(points.size)[:, None], cols.shape)
    inside = (u >= 0) & (u <= n - 1)
    keep = (cols >= 0) & (cols < n) & inside[:, None] & (weights != 0)
    return sp.csr_matrix(
        (weights[keep], (rows[keep], cols[keep])), shape=(points.size, n))


def interpolate(s: SpectrumGrid, points) -> np.ndarray:
    return interpolation_matrix(s.grid, points) @ s.values
