import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalemra.experiment import (
    AGG_COLUMNS,
    Aggregate,
    ErrorRow,
    ErrorTable,
    ExperimentPlan,
    SchemaError,
    absolute_error,
    cell_seed,
    estimate_sigma_tails,
    fit_slope,
    read_aggregates_csv,
    relative_error,
    run_cell,
    run_sweep,
    smoothing_rate_probe,
    upper_half,
    write_aggregates_csv,
    write_rows_csv,
)
from scalemra.grid import FrequencyGrid, SpectrumGrid
from scalemra.mra import ModelParams, generate
from scalemra.signals import calibrated


def row(sig, m, trial, err, status="ok"):
    return ErrorRow(sig, m, trial, err, "relative", "oracle", None, 1.0, 0.2, 1, status=status)


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(signals=("f0",))
    with pytest.raises(ValueError):
        ExperimentPlan(m_values=(64, 32))
    with pytest.raises(ValueError):
        ExperimentPlan(mode="guess")
    assert ExperimentPlan(model="dilation").sigma == 0.0
    assert ExperimentPlan(signals=("f1", "f3"), m_values=(16, 32), trials=3).n_cells == 12


def test_cell_seed_distinct_and_stable():
    seeds = {cell_seed(0, s, m, t) for s in ("f1", "f2") for m in (16, 32) for t in range(5)}
    assert len(seeds) == 20
    assert cell_seed(0, "f1", 16, 0) == cell_seed(0, "f1", 16, 0)
    assert cell_seed(0, "f1", 16, 0) != cell_seed(1, "f1", 16, 0)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-3, 3), a=st.floats(-2, 2))
def test_fit_slope_recovers_power_law(c, a):
    aggs = [Aggregate("f1", 2**k, 2.0**(a + c * k), 0.0, 10) for k in range(4, 17)]
    assert fit_slope(aggs, "f1") == pytest.approx(c, abs=1e-9)
    assert fit_slope(aggs, "f1", (16, 2**16)) == pytest.approx(c, abs=1e-9)


def test_fit_slope_needs_points():
    aggs = [Aggregate("f1", 2**k, 1.0, 0.0, 1) for k in range(4, 8)]
    with pytest.raises(ValueError):
        fit_slope(aggs, "f1")
    with pytest.raises(ValueError):
        fit_slope(aggs, "f2", (16, 128))


def test_upper_half():
    assert upper_half([2**k for k in range(8, 17)]) == (2**12, 2**16)
    assert upper_half([2**k for k in range(6, 17)]) == (2**11, 2**16)


def test_aggregates_skip_failures():
    table = ErrorTable((row("f1", 16, 0, 1.0), row("f1", 16, 1, 3.0),
                        row("f1", 16, 2, math.nan, status="eta-failed: x")))
    (agg,) = table.aggregates()
    assert agg.mean_error == 2.0 and agg.n_trials == 2
    assert agg.std_error == pytest.approx(1.0)
    assert len(table.failures) == 1


def test_errors(fgrid):
    a = SpectrumGrid(fgrid, np.ones(fgrid.n_points))
    b = a.with_values(np.full(fgrid.n_points, 1.1))
    assert relative_error(a, b) == pytest.approx(0.1)
    assert absolute_error(a, b) == pytest.approx(0.1 * np.sqrt(fgrid.n_points * fgrid.dw))
    with pytest.raises(ValueError):
        relative_error(a.with_values(np.zeros(fgrid.n_points)), b)
    with pytest.raises(ValueError):
        absolute_error(a, SpectrumGrid(FrequencyGrid(1024, 0.5), np.ones(1024)))


def test_sigma_from_tails(grid):
    f1 = calibrated("f1", grid, np.sqrt(2), 0.5)
    batch = generate(f1, ModelParams(12 ** -0.5, np.sqrt(2), 512, seed=4), grid)
    assert estimate_sigma_tails(batch) == pytest.approx(np.sqrt(2), rel=0.01)
    with pytest.raises(ValueError):
        estimate_sigma_tails(batch, threshold=100.0)


def test_smoothing_probe_shapes():
    fg = FrequencyGrid(2048, 0.05)
    h = SpectrumGrid(fg, np.exp(-fg.omega**2 / 2))
    out = smoothing_rate_probe(h, [0.05, 0.1, 0.2])
    assert out.shape == (3, 2)
    assert np.all(np.diff(out[:, 1]) > 0)
    with pytest.raises(ValueError):
        smoothing_rate_probe(h, [0.01])


def test_run_cell_oracle_and_dilation():
    plan = ExperimentPlan(signals=("f1",), m_values=(64,), trials=1)
    r = run_cell(plan, "f1", 64, 0)
    assert r.ok and r.eta_mode == "oracle" and r.eta_hat is None
    assert r.L == pytest.approx(max((4 / 64) ** (1 / 6), 2 * np.pi / 32))
    assert 0 < r.error < 2
    d = run_cell(ExperimentPlan(model="dilation", m_values=(64,), trials=1), "f1", 64, 0)
    assert d.ok and d.L is None and d.sigma_hat == 0.0


def test_run_cell_zero_signal_uses_absolute_error():
    r = run_cell(ExperimentPlan(signals=("f8",), m_values=(64,), trials=1), "f8", 64, 0)
    assert r.error_kind == "absolute" and r.error > 0


def test_sweep_deterministic_and_csv_round_trip(tmp_path):
    plan = ExperimentPlan(signals=("f1",), m_values=(16, 32, 64), trials=2, seed=3)
    a, b = run_sweep(plan), run_sweep(plan)
    assert [r.error for r in a.rows] == [r.error for r in b.rows]
    write_rows_csv(tmp_path / "rows.csv", a)
    write_aggregates_csv(tmp_path / "agg.csv", a)
    header = (tmp_path / "rows.csv").read_text().splitlines()[0]
    assert header.startswith("signal,M,trial,error")
    back = read_aggregates_csv(tmp_path / "agg.csv")
    assert back == a.aggregates()


@pytest.mark.parametrize("text, column", [
    ("signal,M,mean_error,std_error\nf1,16,1,0\n", "n_trials"),
    ("signal,M,mean_error,std_error,n_trials\nf1,x,1,0,3\n", "M"),
    ("signal,M,mean_error,std_error,n_trials\nf1,16,nan?,0,3\n", "mean_error"),
])
def test_aggregate_schema_errors(tmp_path, text, column):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(SchemaError, match=column):
        read_aggregates_csv(p)


def test_agg_columns():
    assert AGG_COLUMNS == ("signal", "M", "mean_error", "std_error", "n_trials")
