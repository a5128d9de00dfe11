"""Synthetic hidden signals ``f1`` .. ``f8`` and their SNR calibration.

``f4``, ``f6`` and ``f7`` are defined by their Fourier transforms; the rest are
defined in space and truncated to the hidden support ``|x| <= N/4``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from .grid import (
    SampledSignal,
    SpatialGrid,
    SpectrumGrid,
    _origin_phase,
    fourier_transform,
    interpolate,
    inverse_fourier_transform,
    power_spectrum,
)

__all__ = [
    "SIGNAL_IDS",
    "SignalSpec",
    "Evaluation",
    "get_signal",
    "zigzag",
    "evaluate",
    "calibrate_snr",
    "calibrated",
    "observation_values",
    "dilated_translated",
    "true_power_spectrum",
    "SupportError",
]

SIGNAL_IDS = ("f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8")


class SupportError(ValueError):
    """Raised when a dilated, translated copy does not fit in the box."""


def zigzag(u):
    """Triangle wave ``|u mod 2 - 1|`` restricted to three teeth, ``|u| <= 3``.

    Continuous everywhere (it vanishes at ``|u| = 3``) and not differentiable at
    the integers.
    """
    u = np.asarray(u, dtype=float)
    wave = np.abs(np.mod(u, 2.0) - 1.0)
    return np.where(np.abs(u) <= 3.0, wave, 0.0)


def _gabor(freq):
    return lambda x: np.exp(-5.0 * x**2) * np.cos(freq * x)


def _chirp(x):
    return np.exp(-0.04 * x**2) * np.cos(30.0 * x + 1.5 * x**2)


def _sinc_pair(w):
    return np.sinc(0.2 * (w - 32.0)) + np.sinc(0.2 * (-w - 32.0))


def _step_pair(w):
    w = np.asarray(w, dtype=float)
    return (((w >= -38.0) & (w <= -32.0)) | ((w >= 32.0) & (w <= 38.0))).astype(float)


def _zigzag_pair(w):
    return np.sqrt(zigzag(0.2 * (w + 40.0)) + zigzag(0.2 * (w - 40.0)))


def _zero(v):
    return np.zeros_like(np.asarray(v, dtype=float))


_SHAPES: dict[str, tuple[str, Callable]] = {
    "f1": ("spatial", _gabor(8.0)),
    "f2": ("spatial", _gabor(16.0)),
    "f3": ("spatial", _gabor(32.0)),
    "f4": ("frequency", _sinc_pair),
    "f5": ("spatial", _chirp),
    "f6": ("frequency", _step_pair),
    "f7": ("frequency", _zigzag_pair),
    "f8": ("spatial", _zero),
}


@dataclass(frozen=True)
class SignalSpec:
    """A hidden signal ``C * shape``.

    ``support`` is the hidden half-width (``N/4`` for the default box);
    spatially defined shapes are zero outside it.
    """

    id: str
    normalization: float = 1.0
    support: float = 8.0

    def __post_init__(self):
        if self.id not in _SHAPES:
            raise ValueError(f"unknown signal id {self.id!r}; expected one of {SIGNAL_IDS}")
        if self.id == "f8":
            object.__setattr__(self, "normalization", 0.0)
        elif not self.normalization > 0:
            raise ValueError("normalization must be positive")

    @property
    def definition_domain(self) -> str:
        return _SHAPES[self.id][0]

    @property
    def is_zero(self) -> bool:
        return self.id == "f8"

    def shape(self, v):
        """Unnormalised closed form in the signal's own domain."""
        domain, fn = _SHAPES[self.id]
        v = np.asarray(v, dtype=float)
        out = fn(v)
        if domain == "spatial":
            out = np.where(np.abs(v) <= self.support, out, 0.0)
        return out

    def __call__(self, v):
        return self.normalization * self.shape(v)


def get_signal(signal_id: str, grid: SpatialGrid | None = None, **kw) -> SignalSpec:
    grid = grid or SpatialGrid()
    return SignalSpec(signal_id, support=grid.box / 4, **kw)


class Evaluation(NamedTuple):
    values: np.ndarray
    domain: str
    approximate: bool


def evaluate(spec: SignalSpec, points, domain: str | None = None,
             grid: SpatialGrid | None = None) -> Evaluation:
    """Evaluate ``spec`` at ``points`` in ``domain`` (default: its own domain).

    Cross-domain requests go through the discrete transform on ``grid`` and
    are flagged ``approximate``; spatial values are linearly interpolated.
    """
    domain = domain or spec.definition_domain
    if domain not in ("spatial", "frequency"):
        raise ValueError(f"domain must be 'spatial' or 'frequency', got {domain!r}")
    points = np.asarray(points, dtype=float)
    if domain == spec.definition_domain:
        values = spec(points)
        if domain == "frequency":
            values = values.astype(complex)
        return Evaluation(values, domain, False)

    grid = grid or SpatialGrid(box=int(round(4 * spec.support)))
    if domain == "spatial":
        sig = observation_values(spec, np.zeros(1), np.zeros(1), grid)[0]
        return Evaluation(np.interp(points, grid.x, sig), domain, True)
    ft = fourier_transform(SampledSignal(grid, spec(grid.x)))
    return Evaluation(interpolate(ft, points), domain, True)


def _unit_energy(spec: SignalSpec, grid: SpatialGrid) -> float:
    unit = replace(spec, normalization=1.0)
    vals = observation_values(unit, np.zeros(1), np.zeros(1), grid)[0]
    return float(np.sum(vals**2) * grid.dx / grid.box)


def calibrate_snr(spec: SignalSpec, sigma: float, snr: float, grid: SpatialGrid) -> float:
    """Normalisation ``C`` with ``(1/N) sum f^2 dx / sigma^2 == snr`` on ``grid``."""
    if spec.is_zero:
        raise ValueError("zero signal has no SNR")
    if not sigma > 0 or not snr > 0:
        raise ValueError("sigma and snr must be positive")
    return float(np.sqrt(snr * sigma**2 / _unit_energy(spec, grid)))


def calibrated(signal_id: str, grid: SpatialGrid, sigma: float, snr: float) -> SignalSpec:
    spec = get_signal(signal_id, grid)
    if spec.is_zero:
        return spec
    return replace(spec, normalization=calibrate_snr(spec, sigma, snr, grid))


def _check_support(spec: SignalSpec, taus, ts, grid: SpatialGrid):
    reach = np.abs(ts) + spec.support * (1.0 - taus)
    bad = reach > grid.half_width * (1 + 1e-12)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise SupportError(
            f"observation leaves the box: tau={taus[j]:g}, t={ts[j]:g} reaches "
            f"{reach[j]:g} > {grid.half_width:g}")


def observation_values(spec: SignalSpec, taus, ts, grid: SpatialGrid) -> np.ndarray:
    """Samples of ``f((1 - tau)^-1 (x - t))`` for each ``(tau, t)``; shape ``(M, n)``."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(1.0 - taus <= 0):
        raise ValueError("dilation factor 1 - tau must be positive")
    _check_support(spec, taus, ts, grid)
    a = (1.0 - taus)[:, None]
    if spec.definition_domain == "spatial":
        return spec((grid.x[None, :] - ts[:, None]) / a)

    w = grid.frequency_grid().omega[None, :]
    spectra = a * spec(a * w) * np.exp(-1j * w * ts[:, None])
    # the unpaired Nyquist bin must be real for a real inverse transform
    spectra[:, 0] = spectra[:, 0].real
    raw = np.fft.ifftshift(spectra, axes=1) * _origin_phase(grid.n_points)
    vals = np.fft.ifft(raw, axis=1) / grid.dx
    return vals.real


def dilated_translated(spec: SignalSpec, tau: float, t: float, grid: SpatialGrid) -> SampledSignal:
    return SampledSignal(grid, observation_values(spec, [tau], [t], grid)[0])


def true_power_spectrum(spec: SignalSpec, grid: SpatialGrid) -> SpectrumGrid:
    """``Pf`` on the grid's frequency lattice (closed form for frequency-defined signals)."""
    if spec.definition_domain == "frequency":
        fgrid = grid.frequency_grid()
        return SpectrumGrid(fgrid, np.abs(spec(fgrid.omega)) ** 2)
    return power_spectrum(SampledSignal(grid, spec(grid.x)))


def inverse_check(spec: SignalSpec, grid: SpatialGrid) -> float:
    """Largest imaginary part of the inverse transform of a frequency-defined signal."""
    fgrid = grid.frequency_grid()
    back = inverse_fourier_transform(SpectrumGrid(fgrid, spec(fgrid.omega).astype(complex)), grid)
    return float(np.max(np.abs(back.values.imag)))
