"""Observation generators for (noisy) dilation MRA and mean power spectra.

Random streams
--------------
Observations are generated in fixed blocks of :data:`BLOCK_SIZE`. Block ``b``
draws from ``SeedSequence(seed, spawn_key=(b,))`` in the order: all dilations,
all translations, then all noise samples. Observation ``j`` therefore depends
only on ``(seed, j)`` and never on ``M`` or on the order blocks are processed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .grid import SampledSignal, SpatialGrid, SpectrumGrid
from .signals import SignalSpec, observation_values

__all__ = [
    "BLOCK_SIZE",
    "ModelParams",
    "ObservationBatch",
    "TailStats",
    "SpectrumAccumulator",
    "noise_sample_std",
    "white_noise",
    "generate",
    "iter_blocks",
    "power_spectra",
    "mean_power_spectrum",
    "accumulate",
    "write_batch",
    "read_batch",
    "BatchFormatError",
]

BLOCK_SIZE = 256
ETA_MAX = 12 ** -0.5


@dataclass(frozen=True)
class ModelParams:
    """Nuisance-parameter law for one simulated data set.

    ``translation_halfwidth=None`` selects the widest uniform translation law
    that keeps the worst-case dilated copy inside the box.
    """

    eta: float
    sigma: float
    m: int
    seed: int = 0
    translation_halfwidth: float | None = None

    def __post_init__(self):
        if not 0 <= self.eta <= ETA_MAX * (1 + 1e-12):
            raise ValueError(f"eta must lie in [0, 12**-0.5], got {self.eta}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.m < 1:
            raise ValueError("need at least one observation")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def tau_halfwidth(self) -> float:
        return np.sqrt(3.0) * self.eta

    def halfwidth(self, spec: SignalSpec, grid: SpatialGrid) -> float:
        if self.translation_halfwidth is not None:
            return float(self.translation_halfwidth)
        return max(grid.half_width - spec.support * (1 + self.tau_halfwidth), 0.0)


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    signal: SignalSpec
    grid: SpatialGrid
    params: ModelParams
    taus: np.ndarray
    ts: np.ndarray
    values: np.ndarray  # (M, n) real samples

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def observation(self, j: int) -> SampledSignal:
        return SampledSignal(self.grid, self.values[j])


def noise_sample_std(grid: SpatialGrid, sigma: float) -> float:
    """Per-sample standard deviation giving ``E[P eps] = sigma**2`` at every bin.

    With the continuous-normalised transform ``E|eps_hat|^2 = n dx**2 v`` for
    per-sample variance ``v``, so ``v = sigma**2 / (n dx**2) = sigma**2 / (N dx)``.
    """
    return sigma / np.sqrt(grid.box * grid.dx)


def white_noise(grid: SpatialGrid, sigma: float, rng: np.random.Generator, size: int | None = None):
    std = noise_sample_std(grid, sigma)
    if size is None:
        if sigma == 0:
            return SampledSignal(grid, np.zeros(grid.n_points))
        return SampledSignal(grid, std * rng.standard_normal(grid.n_points))
    return std * rng.standard_normal((size, grid.n_points))


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


def _draw_block(spec, params: ModelParams, grid, block: int):
    rng = _block_rng(params.seed, block)
    a = params.tau_halfwidth
    h = params.halfwidth(spec, grid)
    taus = rng.uniform(-a, a, BLOCK_SIZE)
    ts = rng.uniform(-h, h, BLOCK_SIZE)
    n_used = min(BLOCK_SIZE, params.m - block * BLOCK_SIZE)
    taus, ts = taus[:n_used], ts[:n_used]
    values = observation_values(spec, taus, ts, grid)
    if params.sigma > 0:
        noise = white_noise(grid, params.sigma, rng, size=BLOCK_SIZE)
        values = values + noise[:n_used]
    return taus, ts, values


def iter_blocks(spec: SignalSpec, params: ModelParams, grid: SpatialGrid,
                blocks: range | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(taus, ts, values)`` block by block."""
    n_blocks = -(-params.m // BLOCK_SIZE)
    for b in blocks if blocks is not None else range(n_blocks):
        yield _draw_block(spec, params, grid, b)


def generate(spec: SignalSpec, params: ModelParams, grid: SpatialGrid | None = None) -> ObservationBatch:
    """Materialise all ``M`` observations (for moderate ``M``)."""
    grid = grid or SpatialGrid()
    parts = list(iter_blocks(spec, params, grid))
    taus, ts, values = (np.concatenate(p) for p in zip(*parts))
    return ObservationBatch(spec, grid, params, taus, ts, values)


def power_spectra(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """Row-wise power spectra of real samples, in ascending-frequency order."""
    r = np.abs(np.fft.rfft(values, axis=-1)) ** 2 * grid.dx**2
    half = grid.n_points // 2
    return np.concatenate([r[..., half:half + 1], r[..., half - 1:0:-1], r[..., :half]], axis=-1)


@dataclass
class TailStats:
    """Running moments of samples outside the hidden-signal region."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def update(self, samples: np.ndarray):
        self.count += samples.size
        self.total += float(samples.sum())
        self.total_sq += float(np.square(samples).sum())

    def variance(self) -> float:
        if self.count < 2:
            raise ValueError("margin region empty: no tail samples to estimate sigma")
        mean = self.total / self.count
        return max(self.total_sq / self.count - mean**2, 0.0) * self.count / (self.count - 1)


@dataclass
class SpectrumAccumulator:
    """Mean raw power spectrum plus tail moments, accumulated block by block."""

    grid: SpatialGrid
    tail_threshold: float
    m: int = 0
    total: np.ndarray = field(default=None)
    tails: TailStats = field(default_factory=TailStats)

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.grid.n_points)
        self._tail_mask = np.abs(self.grid.x) > self.tail_threshold

    def add(self, values: np.ndarray):
        self.total += power_spectra(values, self.grid).sum(axis=0)
        self.m += values.shape[0]
        self.tails.update(values[:, self._tail_mask])

    def mean_raw(self) -> SpectrumGrid:
        return SpectrumGrid(self.grid.frequency_grid(), self.total / self.m)

    def mean_debiased(self, sigma: float) -> SpectrumGrid:
        return SpectrumGrid(self.grid.frequency_grid(), self.total / self.m - sigma**2)


def default_tail_threshold(grid: SpatialGrid) -> float:
    # hidden support N/4 stretched by the worst-case dilation factor 3/2
    return 1.5 * grid.box / 4


def accumulate(spec: SignalSpec, params: ModelParams, grid: SpatialGrid | None = None,
               tail_threshold: float | None = None) -> SpectrumAccumulator:
    """Stream all ``M`` observations into a :class:`SpectrumAccumulator`."""
    grid = grid or SpatialGrid()
    thr = default_tail_threshold(grid) if tail_threshold is None else tail_threshold
    acc = SpectrumAccumulator(grid, thr)
    for _, _, values in iter_blocks(spec, params, grid):
        acc.add(values)
    return acc


def mean_power_spectrum(batch: ObservationBatch, sigma: float | None = None) -> SpectrumGrid:
    """``(1/M) sum_j P y_j - sigma**2``; ``sigma`` defaults to the batch's own."""
    sigma = batch.params.sigma if sigma is None else sigma
    mean = power_spectra(batch.values, batch.grid).mean(axis=0)
    return SpectrumGrid(batch.grid.frequency_grid(), mean - sigma**2)


# --- binary container -------------------------------------------------------

MAGIC = b"SMRA"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQddQd8sdd")


class BatchFormatError(ValueError):
    pass


def write_batch(path, batch: ObservationBatch):
    """Write ``batch`` as header + little-endian float64 payload.

    Header (``<4sIIIQddQd8sdd``): magic ``SMRA``, version, box ``N``, ``ell``,
    ``M``, ``eta``, ``sigma``, seed, translation half-width, signal id (8 bytes,
    NUL padded), normalisation, hidden support. Payload: ``taus[M]``, ``ts[M]``,
    then ``values[M, n]`` row-major.
    """
    p = batch.params
    header = _HEADER.pack(
        MAGIC, VERSION, batch.grid.box, batch.grid.ell, batch.m, p.eta, p.sigma,
        p.seed, p.halfwidth(batch.signal, batch.grid), batch.signal.id.encode(),
        batch.signal.normalization, batch.signal.support)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (batch.taus, batch.ts, batch.values):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_batch(path) -> ObservationBatch:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise BatchFormatError("file too short for header")
    (magic, version, box, ell, m, eta, sigma, seed, halfwidth, sid,
     norm, support) = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BatchFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BatchFormatError(f"unsupported version {version}")
    try:
        grid = SpatialGrid(box, ell)
        signal_id = sid.rstrip(b"\0").decode()
        spec = SignalSpec(signal_id, normalization=norm if norm > 0 else 1.0, support=support)
        params = ModelParams(eta, sigma, int(m), int(seed), halfwidth)
    except ValueError as exc:
        raise BatchFormatError(f"invalid header: {exc}") from exc
    n = grid.n_points
    expected = _HEADER.size + 8 * (2 * m + m * n)
    if len(raw) != expected:
        raise BatchFormatError(f"payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    taus, ts, values = data[:m], data[m:2 * m], data[2 * m:].reshape(m, n)
    return ObservationBatch(spec, grid, params, taus, ts, values)
