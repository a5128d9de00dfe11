"""Command-line interface: ``scalemra {generate,estimate,experiment,plot}``.

Settings come from an optional flat ``key = value`` config file (``#`` starts
a comment) and are overridden by command-line flags. Recognised keys:

    signal, signals, m, m_min, m_max, trials, eta, sigma, snr, seed, mode,
    model, box, ell, parametrization, max_iters, grad_tol, out, threads

``m_min``/``m_max`` are powers of two bounding the experiment sweep. Exit
codes: 0 success, 2 invalid configuration, 3 unreadable batch file, 4 every
experiment cell failed, 5 plot input does not match the CSV schema.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .experiment import (
    ExperimentPlan,
    SchemaError,
    default_threads,
    estimate_sigma_tails,
    fit_slope,
    read_aggregates_csv,
    run_sweep,
    upper_half,
    write_aggregates_csv,
    write_manifest,
    write_rows_csv,
)
from .mra import BatchFormatError, ModelParams, generate, mean_power_spectrum, read_batch, write_batch
from .signals import SIGNAL_IDS, calibrated
from .unbias import (
    EtaEstimationError,
    OptimizerConfig,
    choose_L,
    estimate_dilation,
    estimate_noisy,
)

log = logging.getLogger("scalemra")

KEYS = ("signal", "signals", "m", "m_min", "m_max", "trials", "eta", "sigma", "snr", "seed",
        "mode", "model", "box", "ell", "parametrization", "max_iters", "grad_tol", "out",
        "threads")
DEFAULTS = {
    "eta": "oracle", "sigma": "oracle", "snr": "0.5", "seed": "0", "mode": "oracle",
    "model": "noisy", "box": "32", "ell": "5", "trials": "10", "m_min": "16", "m_max": "65536",
    "parametrization": "sqrt", "out": ".",
}
NOMINAL_ETA = 12 ** -0.5
NOMINAL_SIGMA = math.sqrt(2.0)
# rough single-core cost of simulating and transforming one observation
SECONDS_PER_OBSERVATION = 6e-5
EMPIRICAL_EXCLUDED = ("f6", "f7")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


class RunConfig:
    """Merged, validated settings for one subcommand."""

    def __init__(self, values: dict[str, str]):
        self.raw = {**DEFAULTS, **values}

    def get(self, key: str, required: bool = False):
        value = self.raw.get(key)
        if value is None and required:
            raise ConfigError(f"missing required key: {key}")
        return value

    def integer(self, key: str, required: bool = False) -> int | None:
        value = self.get(key, required)
        if value is None:
            return None
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"key {key}: expected an integer, got {value!r}") from None

    def real(self, key: str, required: bool = False) -> float | None:
        value = self.get(key, required)
        if value is None:
            return None
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"key {key}: expected a number, got {value!r}") from None

    def choice(self, key: str, options) -> str:
        value = self.get(key, True)
        if value not in options:
            raise ConfigError(f"key {key}: expected one of {', '.join(options)}, got {value!r}")
        return value

    def eta(self) -> float | str:
        value = self.get("eta", True)
        if value in ("oracle", "learn"):
            return value
        return self._positive_real("eta", value)

    def sigma(self) -> float | str:
        value = self.get("sigma", True)
        if value in ("oracle", "estimate"):
            return value
        return self._positive_real("sigma", value, allow_zero=True)

    @staticmethod
    def _positive_real(key, value, allow_zero=False) -> float:
        try:
            x = float(value)
        except ValueError:
            raise ConfigError(f"key {key}: expected a number, got {value!r}") from None
        if x < 0 or (x == 0 and not allow_zero):
            raise ConfigError(f"key {key}: must be positive, got {value!r}")
        return x

    def optimizer(self) -> OptimizerConfig:
        kw = {"parametrization": self.choice("parametrization", ("sqrt", "direct"))}
        if self.get("max_iters") is not None:
            kw["max_iters"] = self.integer("max_iters")
        if self.get("grad_tol") is not None:
            kw["grad_tol"] = self.real("grad_tol")
        try:
            return OptimizerConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def signal(self) -> str:
        sid = self.get("signal", True)
        if sid not in SIGNAL_IDS:
            raise ConfigError(f"key signal: unknown id {sid!r}")
        return sid

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _flag_values(args) -> dict[str, str]:
    mapping = {"seed": "seed", "signal": "signal", "m": "m", "eta": "eta", "sigma": "sigma",
               "mode": "mode", "threads": "threads", "out": "out"}
    return {key: str(getattr(args, attr)) for attr, key in mapping.items()
            if getattr(args, attr, None) is not None}


def load_config(args) -> RunConfig:
    values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(_flag_values(args))
    return RunConfig(values)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.get("out", True))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x) -> str:
    return format(float(x), ".17g")


# --- subcommands ---------------------------------------------------------------

def _model_params(cfg: RunConfig, m: int) -> ModelParams:
    eta = cfg.eta()
    sigma = cfg.sigma()
    eta = NOMINAL_ETA if eta in ("oracle", "learn") else eta
    sigma = NOMINAL_SIGMA if sigma in ("oracle", "estimate") else sigma
    seed = cfg.integer("seed", True)
    try:
        return ModelParams(eta, sigma, m, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_generate(cfg: RunConfig) -> int:
    sid = cfg.signal()
    m = cfg.integer("m", True)
    params = _model_params(cfg, m)
    grid = _grid(cfg)
    spec = calibrated(sid, grid, params.sigma if params.sigma > 0 else NOMINAL_SIGMA,
                      cfg.real("snr", True))
    batch = generate(spec, params, grid)
    path = _out_dir(cfg) / f"batch_{sid}_M{m}_seed{params.seed}.smra"
    write_batch(path, batch)
    print(f"wrote {path}: signal={sid} M={m} eta={params.eta:.6g} sigma={params.sigma:.6g} "
          f"seed={params.seed}")
    return 0


def _grid(cfg: RunConfig):
    from .grid import SpatialGrid

    try:
        return SpatialGrid(cfg.integer("box", True), cfg.integer("ell", True))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_estimate(cfg: RunConfig, batch_path) -> int:
    try:
        batch = read_batch(batch_path)
    except (OSError, BatchFormatError) as exc:
        print(f"error: cannot read batch {batch_path}: {exc}", file=sys.stderr)
        return 3
    opt = cfg.optimizer()
    eta = cfg.eta()
    sigma = cfg.sigma()
    if sigma == "oracle":
        sigma = batch.params.sigma
    elif sigma == "estimate":
        sigma = estimate_sigma_tails(batch)
    oracle = eta == "oracle"
    if eta == "oracle":
        eta = batch.params.eta
    elif eta == "learn" or cfg.get("mode") == "empirical":
        eta = None
    if eta is not None and eta <= 0:
        raise ConfigError("eta must be positive for estimation (batch has eta = 0)")
    mean = mean_power_spectrum(batch, sigma)
    model = cfg.choice("model", ("noisy", "dilation"))
    try:
        if model == "dilation":
            report = estimate_dilation(mean, eta, opt, oracle=oracle)
        else:
            report = estimate_noisy(mean, eta, sigma, batch.m, opt,
                                    L=choose_L(sigma, batch.m, mean.grid.dw), oracle=oracle)
    except EtaEstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    out = _out_dir(cfg)
    stem = Path(batch_path).stem
    with open(out / f"{stem}_spectrum.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["omega", "value"])
        for om, v in zip(report.pf_hat.omega, report.pf_hat.values):
            w.writerow([_fmt(om), _fmt(v)])
    doc = {
        "batch": str(batch_path),
        "eta_hat": report.eta_hat if isinstance(report.eta_hat, str) else float(report.eta_hat),
        "eta_used": float(report.eta_used),
        "sigma_used": float(sigma),
        "L": report.l_smooth,
        "converged": bool(report.converged),
        "iterations": int(report.iterations),
        "loss_trace": [float(v) for v in report.loss_trace],
        "candidates": [c.__dict__ for c in report.candidates],
        "config_hash": cfg.digest(),
        "optimizer_hash": report.config_hash,
        "seed": batch.params.seed,
    }
    (out / f"{stem}_report.json").write_text(json.dumps(doc, indent=2, default=float) + "\n")
    print(f"estimated {stem}: eta_hat={doc['eta_hat']} converged={doc['converged']} "
          f"final_loss={report.final_loss:.6g}")
    return 0


def build_plan(cfg: RunConfig) -> ExperimentPlan:
    mode = cfg.choice("mode", ("oracle", "empirical"))
    model = cfg.choice("model", ("noisy", "dilation"))
    if cfg.get("signals"):
        signals = tuple(s.strip() for s in cfg.get("signals").split(",") if s.strip())
    elif cfg.get("signal"):
        signals = (cfg.signal(),)
    else:
        signals = tuple(s for s in SIGNAL_IDS
                        if mode == "oracle" or s not in EMPIRICAL_EXCLUDED)
    m_min, m_max = cfg.integer("m_min", True), cfg.integer("m_max", True)
    if cfg.get("m") is not None:
        m_values = (cfg.integer("m"),)
    else:
        if m_min < 1 or m_max < m_min or m_min & (m_min - 1) or m_max & (m_max - 1):
            raise ConfigError("m_min and m_max must be powers of two with m_min <= m_max")
        m_values = tuple(2**k for k in range(int(math.log2(m_min)), int(math.log2(m_max)) + 1))
    eta, sigma = cfg.eta(), cfg.sigma()
    try:
        return ExperimentPlan(
            signals=signals, m_values=m_values, trials=cfg.integer("trials", True),
            mode=mode, model=model,
            eta=NOMINAL_ETA if isinstance(eta, str) else eta,
            sigma=NOMINAL_SIGMA if isinstance(sigma, str) else sigma,
            snr=cfg.real("snr", True), seed=cfg.integer("seed", True),
            box=cfg.integer("box", True), ell=cfg.integer("ell", True),
            optimizer=cfg.optimizer())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _threads(cfg: RunConfig) -> int:
    n = cfg.integer("threads")
    return max(n, 1) if n is not None else default_threads()


def cmd_experiment(cfg: RunConfig, dry_run: bool = False) -> int:
    plan = build_plan(cfg)
    threads = _threads(cfg)
    observations = len(plan.signals) * plan.trials * sum(plan.m_values)
    cost = observations * SECONDS_PER_OBSERVATION / threads
    if dry_run:
        print(f"{plan.n_cells} cells ({len(plan.signals)} signals x {len(plan.m_values)} M "
              f"values x {plan.trials} trials), {observations} observations, "
              f"estimated simulation cost ~{cost:.0f} s on {threads} worker(s)")
        return 0

    def progress(done, total, row):
        status = "" if row.ok else f" FAILED ({row.status})"
        print(f"[{done}/{total}] {row.signal} M={row.M} trial={row.trial}{status}",
              file=sys.stderr)

    table = run_sweep(plan, threads=threads, progress=progress)
    out = _out_dir(cfg)
    write_rows_csv(out / "errors.csv", table)
    write_aggregates_csv(out / "aggregates.csv", table)
    aggs = table.aggregates()
    window = upper_half(plan.m_values)
    slopes = {}
    for sid in plan.signals:
        try:
            slopes[sid] = fit_slope(aggs, sid, window)
        except ValueError:
            slopes[sid] = None
    (out / "slopes.json").write_text(json.dumps(slopes, indent=2) + "\n")
    write_manifest(out / "manifest.json", plan,
                   {"config_hash": cfg.digest(), "slope_window": list(window)})
    n_fail = len(table.failures)
    if n_fail == len(table.rows):
        print("error: every experiment cell failed", file=sys.stderr)
        return 4
    if n_fail:
        print(f"warning: {n_fail} of {len(table.rows)} cells failed", file=sys.stderr)
    for sid, s in slopes.items():
        print(f"{sid}: slope {'n/a' if s is None else f'{s:.4f}'}")
    return 0


def _read_spectrum_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for c in ("omega", "value"):
            if c not in cols:
                raise SchemaError(f"{path}: missing column {c!r}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    cur = "omega"
    try:
        om = np.array([float(r["omega"]) for r in rows])
        cur = "value"
        val = np.array([float(r["value"]) for r in rows])
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: bad value in column {cur!r}") from None
    return om, val


def _header(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def cmd_plot(cfg: RunConfig, csv_files) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(cfg)
    try:
        decay, spectra = [], []
        for path in csv_files:
            header = _header(path)
            if "omega" in header:
                spectra.append((Path(path).stem, *_read_spectrum_csv(path)))
            else:
                decay.extend(read_aggregates_csv(path))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5

    signals = list(dict.fromkeys(a.signal for a in decay))
    written = []
    if signals:
        cols = min(4, len(signals))
        rows_n = -(-len(signals) // cols)
        panel, axes = plt.subplots(rows_n, cols, figsize=(3.2 * cols, 2.8 * rows_n), squeeze=False)
        for ax in axes.flat[len(signals):]:
            ax.set_visible(False)
        for sid, ax in zip(signals, axes.flat):
            pts = sorted((a.M, a.mean_error, a.std_error) for a in decay if a.signal == sid)
            m, e, se = (np.array(v, dtype=float) for v in zip(*pts))
            title = sid
            try:
                title += f" (slope = {fit_slope(decay, sid):.4f})"
            except ValueError:
                pass
            fig, solo = plt.subplots(figsize=(4, 3))
            for target in (ax, solo):
                lo = np.log2(np.maximum(e - se, e * 1e-3))
                target.errorbar(np.log2(m), np.log2(e), yerr=[np.log2(e) - lo, np.log2(e + se) - np.log2(e)],
                                fmt="o-", ms=3, capsize=2)
                target.set_xlabel("log2(M)")
                target.set_ylabel("log2(error)")
                target.set_title(title, fontsize=9)
            fig.tight_layout()
            path = out / f"decay_{sid}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
        panel.tight_layout()
        path = out / "decay_panel.png"
        panel.savefig(path, dpi=120)
        plt.close(panel)
        written.append(path)
    if spectra:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name, om, val in spectra:
            ax.plot(om, val, lw=1, label=name)
        ax.set_xlabel("omega")
        ax.set_ylabel("power")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / "spectra.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    for p in written:
        print(f"wrote {p}")
    return 0


# --- entry point -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--signal")
    common.add_argument("--m", type=int)
    common.add_argument("--eta", help="float, 'oracle' or 'learn'")
    common.add_argument("--sigma", help="float, 'oracle' or 'estimate'")
    common.add_argument("--mode", choices=("oracle", "empirical"))
    common.add_argument("--threads", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scalemra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate and store an observation batch")
    est = sub.add_parser("estimate", parents=[common], help="estimate the power spectrum of a batch")
    est.add_argument("batch")
    exp = sub.add_parser("experiment", parents=[common], help="run an M-sweep")
    exp.add_argument("--dry-run", action="store_true")
    plot = sub.add_parser("plot", parents=[common], help="render error-decay and spectrum figures")
    plot.add_argument("csv", nargs="+")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg, args.batch)
        if args.command == "experiment":
            return cmd_experiment(cfg, dry_run=args.dry_run)
        return cmd_plot(cfg, args.csv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
