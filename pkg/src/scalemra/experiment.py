"""Monte Carlo M-sweeps, error metrics, tail-based noise estimation and slopes.

Every (signal, M, trial) cell draws from its own seed, derived from the plan's
master seed, so results do not depend on execution order or worker count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .grid import SpatialGrid, SpectrumGrid, gaussian_smooth, interior_window, l2_norm
from .mra import (
    ModelParams,
    ObservationBatch,
    SpectrumAccumulator,
    TailStats,
    accumulate,
    default_tail_threshold,
)
from .signals import SIGNAL_IDS, calibrated, true_power_spectrum
from .unbias import (
    EtaEstimationError,
    OptimizerConfig,
    choose_L,
    estimate_dilation,
    estimate_noisy,
)

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentPlan",
    "ErrorRow",
    "Aggregate",
    "ErrorTable",
    "SchemaError",
    "relative_error",
    "absolute_error",
    "estimate_sigma_tails",
    "cell_seed",
    "run_cell",
    "run_sweep",
    "upper_half",
    "fit_slope",
    "smoothing_rate_probe",
    "write_rows_csv",
    "write_aggregates_csv",
    "read_aggregates_csv",
    "write_manifest",
]

ROW_COLUMNS = ("signal", "M", "trial", "error", "error_kind", "eta_mode", "eta_hat",
               "sigma_hat", "L", "seed", "wall_ms")
AGG_COLUMNS = ("signal", "M", "mean_error", "std_error", "n_trials")


@dataclass(frozen=True)
class ExperimentPlan:
    """One M-sweep.

    ``model`` is ``"noisy"`` (smoothed estimator) or ``"dilation"`` (noise
    free, unsmoothed estimator, ``sigma`` forced to 0). ``mode="empirical"``
    learns ``eta`` and estimates ``sigma`` from the observation tails.
    """

    signals: tuple[str, ...] = ("f1",)
    m_values: tuple[int, ...] = tuple(2**k for k in range(4, 17))
    trials: int = 10
    mode: str = "oracle"
    model: str = "noisy"
    eta: float = 12 ** -0.5
    sigma: float = math.sqrt(2.0)
    snr: float = 0.5
    seed: int = 0
    box: int = 32
    ell: int = 5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    window_factor: float = 4.0
    record_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "signals", tuple(self.signals))
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        bad = [s for s in self.signals if s not in SIGNAL_IDS]
        if bad or not self.signals:
            raise ValueError(f"unknown or missing signal ids: {bad}")
        m = self.m_values
        if not m or m[0] < 1 or any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError("m_values must be positive and strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.mode not in ("oracle", "empirical"):
            raise ValueError(f"mode must be 'oracle' or 'empirical', got {self.mode!r}")
        if self.model not in ("noisy", "dilation"):
            raise ValueError(f"model must be 'noisy' or 'dilation', got {self.model!r}")
        if self.model == "dilation":
            object.__setattr__(self, "sigma", 0.0)
        ModelParams(self.eta, self.sigma, 1, self.seed)

    @property
    def grid(self) -> SpatialGrid:
        return SpatialGrid(self.box, self.ell)

    @property
    def n_cells(self) -> int:
        return len(self.signals) * len(self.m_values) * self.trials

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ErrorRow:
    signal: str
    M: int
    trial: int
    error: float
    error_kind: str
    eta_mode: str
    eta_hat: float | None
    sigma_hat: float | None
    L: float | None
    seed: int
    wall_ms: float | None = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class Aggregate:
    signal: str
    M: int
    mean_error: float
    std_error: float
    n_trials: int


@dataclass(frozen=True, eq=False)
class ErrorTable:
    rows: tuple[ErrorRow, ...]

    @property
    def failures(self) -> tuple[ErrorRow, ...]:
        return tuple(r for r in self.rows if not r.ok)

    def aggregates(self) -> tuple[Aggregate, ...]:
        """Mean and standard error over the successful trials of each (signal, M)."""
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.signal, r.M), [])
            if r.ok:
                groups[(r.signal, r.M)].append(r.error)
        out = []
        for (sig, m), errs in groups.items():
            if not errs:
                continue
            e = np.asarray(errs)
            se = float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else 0.0
            out.append(Aggregate(sig, m, float(e.mean()), se, int(e.size)))
        return tuple(out)

    def signals(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(r.signal for r in self.rows))


class SchemaError(ValueError):
    pass


# --- metrics -------------------------------------------------------------------

def absolute_error(pf: SpectrumGrid, pf_hat: SpectrumGrid, window=None) -> float:
    if pf.grid != pf_hat.grid:
        raise ValueError("spectra live on different grids")
    return l2_norm(pf.with_values(pf.values - pf_hat.values), window)


def relative_error(pf: SpectrumGrid, pf_hat: SpectrumGrid, window=None) -> float:
    """``||pf - pf_hat|| / ||pf||`` on ``window``."""
    ref = l2_norm(pf, window)
    if ref == 0:
        raise ValueError("reference spectrum has zero norm; use absolute_error")
    return absolute_error(pf, pf_hat, window) / ref


def estimate_sigma_tails(source: ObservationBatch | TailStats | SpectrumAccumulator,
                         grid: SpatialGrid | None = None,
                         threshold: float | None = None) -> float:
    """Noise level from samples with ``|x| > threshold`` where no signal mass lies.

    The sample variance of the tails is the per-sample noise variance
    ``sigma**2 / (N dx)``, so ``sigma_hat = sqrt(N dx var)``.
    """
    if isinstance(source, SpectrumAccumulator):
        grid, stats = source.grid, source.tails
    elif isinstance(source, TailStats):
        if grid is None:
            raise ValueError("grid is required with TailStats")
        stats = source
    else:
        grid = source.grid
        thr = default_tail_threshold(grid) if threshold is None else threshold
        mask = np.abs(grid.x) > thr
        if not mask.any():
            raise ValueError("margin region empty: no tail samples to estimate sigma")
        stats = TailStats()
        stats.update(source.values[:, mask])
    return float(np.sqrt(stats.variance() * grid.box * grid.dx))


# --- sweeps --------------------------------------------------------------------

def cell_seed(master: int, signal: str, m: int, trial: int) -> int:
    """Independent 64-bit seed for one (signal, M, trial) cell."""
    ss = np.random.SeedSequence([master, SIGNAL_IDS.index(signal), m, trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _window(plan: ExperimentPlan, fgrid, L):
    if L is None:
        return None
    return interior_window(fgrid, plan.window_factor * L)


def run_cell(plan: ExperimentPlan, signal: str, m: int, trial: int) -> ErrorRow:
    t0 = time.perf_counter()
    grid = plan.grid
    fgrid = grid.frequency_grid()
    seed = cell_seed(plan.seed, signal, m, trial)
    # SNR normalisation refers to the nominal noise level even for sigma = 0 runs
    spec = calibrated(signal, grid, plan.sigma if plan.sigma > 0 else math.sqrt(2.0), plan.snr)
    truth = true_power_spectrum(spec, grid)
    kind = "absolute" if spec.is_zero else "relative"
    eta_mode = "oracle" if plan.mode == "oracle" else "learned"
    acc = accumulate(spec, ModelParams(plan.eta, plan.sigma, m, seed), grid)
    sigma_hat = plan.sigma if plan.mode == "oracle" else estimate_sigma_tails(acc)
    eta_in = plan.eta if plan.mode == "oracle" else None
    L = None
    try:
        if plan.model == "dilation":
            report = estimate_dilation(acc.mean_raw(), eta_in, plan.optimizer)
        else:
            L = choose_L(sigma_hat, m, fgrid.dw)
            report = estimate_noisy(acc.mean_debiased(sigma_hat), eta_in, sigma_hat, m,
                                    plan.optimizer, L=L)
    except EtaEstimationError as exc:
        return ErrorRow(signal, m, trial, math.nan, kind, eta_mode, None, sigma_hat, L, seed,
                        status=f"eta-failed: {exc}")
    window = _window(plan, fgrid, L)
    metric = absolute_error if spec.is_zero else relative_error
    err = metric(truth, report.pf_hat, window)
    eta_hat = None if plan.mode == "oracle" else float(report.eta_hat)
    wall = (time.perf_counter() - t0) * 1e3 if plan.record_wall_time else None
    return ErrorRow(signal, m, trial, float(err), kind, eta_mode, eta_hat, sigma_hat, L, seed, wall)


def _cells(plan: ExperimentPlan):
    return [(s, m, t) for s in plan.signals for m in plan.m_values for t in range(plan.trials)]


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(plan: ExperimentPlan, threads: int = 1,
              progress: Callable[[int, int, ErrorRow], None] | None = None) -> ErrorTable:
    """Run every cell of ``plan``; rows come back in (signal, M, trial) order."""
    cells = _cells(plan)
    rows = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            it = pool.map(_run_cell_args, [(plan, *c) for c in cells], chunksize=1)
            for i, row in enumerate(it):
                rows.append(row)
                if progress:
                    progress(i + 1, len(cells), row)
    else:
        for i, c in enumerate(cells):
            rows.append(run_cell(plan, *c))
            if progress:
                progress(i + 1, len(cells), rows[-1])
    return ErrorTable(tuple(rows))


def upper_half(m_values: Sequence[int]) -> tuple[int, int]:
    """``[M_lo, M_hi]`` covering the right half of a geometric M range in log scale."""
    lo, hi = np.log2(min(m_values)), np.log2(max(m_values))
    return int(round(2 ** ((lo + hi) / 2))), int(max(m_values))


def _ols_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def fit_slope(table: ErrorTable | Iterable[Aggregate], signal: str,
              m_range: tuple[int, int] | None = None) -> float:
    """OLS slope of ``log2(mean error)`` against ``log2(M)``.

    ``m_range`` defaults to the upper half of the table's M range.
    """
    aggs = table.aggregates() if isinstance(table, ErrorTable) else tuple(table)
    pts = sorted((a.M, a.mean_error) for a in aggs if a.signal == signal)
    if m_range is None and pts:
        m_range = upper_half([m for m, _ in pts])
    pts = [(m, e) for m, e in pts if m_range[0] <= m <= m_range[1] and e > 0]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points to fit a slope for {signal}, got {len(pts)}")
    m, e = zip(*pts)
    return _ols_slope(np.log2(m), np.log2(e))


def smoothing_rate_probe(h: SpectrumGrid, l_values) -> np.ndarray:
    """Rows ``(L, ||h - h * phi_L||_2)`` for each filter width."""
    l_values = np.asarray(l_values, dtype=float)
    if np.any(l_values < h.grid.dw * (1 - 1e-12)):
        raise ValueError("filter widths must be at least the frequency resolution")
    errs = [l2_norm(h.with_values(h.values - gaussian_smooth(h, L).values)) for L in l_values]
    return np.column_stack([l_values, errs])


# --- serialisation -------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _write_csv(path, header, records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rec in records:
        w.writerow([_fmt(v) for v in rec])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_rows_csv(path, table: ErrorTable):
    _write_csv(path, ROW_COLUMNS, (
        (r.signal, r.M, r.trial, r.error, r.error_kind, r.eta_mode, r.eta_hat,
         r.sigma_hat, r.L, r.seed, r.wall_ms) for r in table.rows))


def write_aggregates_csv(path, table: ErrorTable):
    _write_csv(path, AGG_COLUMNS, (
        (a.signal, a.M, a.mean_error, a.std_error, a.n_trials) for a in table.aggregates()))


def read_aggregates_csv(path) -> tuple[Aggregate, ...]:
    """Parse an aggregate CSV, raising :class:`SchemaError` naming the bad column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected columns {','.join(AGG_COLUMNS)}")
        missing = [c for c in AGG_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing column {missing[0]!r}")
        out = []
        for line, rec in enumerate(reader, start=2):
            cur = None
            try:
                cur = "M"
                m = int(rec["M"])
                cur = "mean_error"
                mean = float(rec["mean_error"])
                cur = "std_error"
                se = float(rec["std_error"])
                cur = "n_trials"
                n = int(rec["n_trials"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line}: bad value in column {cur!r}") from exc
            out.append(Aggregate(rec["signal"], m, mean, se, n))
    if not out:
        raise SchemaError(f"{path}: no data rows")
    return tuple(out)


def _git_stamp() -> str:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, plan: ExperimentPlan, extra: dict | None = None):
    from . import __version__

    doc = {"version": __version__, "git": _git_stamp(), "plan": plan.to_dict(),
           "optimizer_hash": plan.optimizer.digest()}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


def default_threads() -> int:
    env = os.environ.get("SCALEMRA_THREADS")
    if env:
        return max(int(env), 1)
    return os.cpu_count() or 1


def with_signals(plan: ExperimentPlan, signals) -> ExperimentPlan:
    return replace(plan, signals=tuple(signals))
