import datetime as dt
import math

import numpy as np
import pytest
from scipy.special import ndtr

from precipfield import data as dm
from precipfield import estimation as est
from precipfield import fields as rf
from precipfield import transforms as tr
from precipfield.errors import (
    DegenerateOccurrence,
    InsufficientData,
    NoTrainingData,
    PrecipError,
    RangeUnidentifiable,
)

LIGHT_SEM = est.SemConfig(n_iterations=12, n_burn_iterations=4, gibbs_sweeps=20, seed=0)


def window_from_days(day_arrays):
    """Build a TrainingWindow from a list of (xy, obs, fcst) triples."""
    days = {}
    for i, (xy, obs, fcst) in enumerate(day_arrays):
        days[dt.date(2004, 1, 1) + dt.timedelta(days=i)] = {
            "xy": np.asarray(xy, dtype=float),
            "obs": np.asarray(obs, dtype=float),
            "fcst": np.asarray(fcst, dtype=float),
        }
    return est.TrainingWindow(days=days, M=len(days))


def pooled_window(obs, fcst):
    """One-day window of independent records (xy spread far apart)."""
    n = len(obs)
    xy = np.column_stack([np.arange(n) * 1e5, np.zeros(n)])
    return window_from_days([(xy, obs, fcst)])


class TestMakeWindow:
    def _dataset(self, n_dates, n_sites=2):
        recs = []
        for d in range(n_dates):
            for s in range(n_sites):
                recs.append(
                    dm.DailyRecord(f"s{s}", float(s), 0.0,
                                   dt.date(2004, 1, 1) + dt.timedelta(days=d),
                                   float(d % 3), float(s))
                )
        return dm.Dataset(recs)

    def test_most_recent_dates(self):
        ds = self._dataset(40)
        w = est.make_window(ds, dt.date(2004, 2, 15), 30)
        assert len(w.days) == 30
        # 40 days starting 2004-01-01 end on 2004-02-09.
        assert max(w.days) == dt.date(2004, 2, 9)
        assert min(w.days) == dt.date(2004, 1, 11)
        assert not w.short

    def test_short_window_flagged(self):
        ds = self._dataset(12)
        w = est.make_window(ds, dt.date(2004, 3, 1), 30)
        assert len(w.days) == 12
        assert w.short

    def test_no_history(self):
        ds = self._dataset(5)
        with pytest.raises(NoTrainingData):
            est.make_window(ds, dt.date(2003, 1, 1), 30)


class TestProbitTrend:
    def test_no_covariate_effect(self):
        rng = np.random.default_rng(5)
        n = 10_000
        fcst = rng.gamma(2.0, 5.0, size=n)
        fcst[rng.random(n) < 0.4] = 0.0
        obs = (rng.random(n) < 0.5).astype(float)  # independent of fcst
        params = est.fit_probit_trend(pooled_window(obs, fcst))
        assert abs(params.gamma0) < 0.05
        assert abs(params.gamma1) < 0.05
        assert abs(params.gamma2) < 0.05

    def test_recovers_generating_parameters(self):
        rng = np.random.default_rng(1)
        n = 10_000
        fcst_cr = rng.gamma(2.0, 1.0, size=n)
        fcst_cr[rng.random(n) < 0.3] = 0.0
        zero = fcst_cr == 0.0
        mu = 0.2 + 0.8 * fcst_cr - 0.5 * zero
        wet = rng.standard_normal(n) + mu > 0
        obs = np.where(wet, 1.0, 0.0)
        params = est.fit_probit_trend(pooled_window(obs, fcst_cr ** 3))
        assert params.gamma0 == pytest.approx(0.2, abs=0.07)
        assert params.gamma1 == pytest.approx(0.8, abs=0.07)
        assert params.gamma2 == pytest.approx(-0.5, abs=0.07)

    def test_all_wet_rejected(self):
        with pytest.raises(DegenerateOccurrence):
            est.fit_probit_trend(pooled_window(np.ones(20), np.ones(20)))

    def test_constant_indicator_dropped(self):
        # Every forecast nonzero: the indicator carries no contrast and its
        # coefficient is reported as zero.
        rng = np.random.default_rng(2)
        n = 2000
        fcst_cr = rng.gamma(2.0, 1.0, size=n) + 0.1
        wet = rng.standard_normal(n) + 0.5 * fcst_cr - 0.3 > 0
        params = est.fit_probit_trend(pooled_window(wet.astype(float), fcst_cr ** 3))
        assert params.gamma2 == 0.0


class TestGoldenSection:
    def test_quadratic_maximum(self):
        opt = est.golden_section_max(lambda x: -(x - 2.3) ** 2, 0.0, 10.0, tol=1e-6)
        assert opt == pytest.approx(2.3, abs=1e-5)

    def test_boundary_maximum(self):
        opt = est.golden_section_max(lambda x: x, 0.0, 1.0, tol=1e-6)
        assert opt == pytest.approx(1.0, abs=1e-3)


class TestOccurrenceRange:
    def test_single_site_days_rejected(self):
        w = window_from_days([(np.array([[0.0, 0.0]]), [1.0], [2.0])] * 5)
        trend = tr.OccurrenceTrendParams(0.0, 0.1, 0.0)
        with pytest.raises(RangeUnidentifiable):
            est.fit_occurrence_range(w, trend, LIGHT_SEM)

    def test_recovers_generating_range(self):
        spec = dm.SynthSpec(n_sites=50, n_days=30, rho_km=60.0, seed=7)
        ds = dm.synth_generate(spec)
        w = est.make_window(ds, max(ds.dates) + dt.timedelta(days=1), 30)
        trend = tr.OccurrenceTrendParams(*spec.gamma)
        rho = est.fit_occurrence_range(w, trend, est.SemConfig(seed=0))
        assert abs(rho - 60.0) / 60.0 < 0.30

    def test_shuffled_pattern_shrinks_range(self):
        spec = dm.SynthSpec(n_sites=40, n_days=25, rho_km=60.0, seed=8)
        ds = dm.synth_generate(spec)
        w = est.make_window(ds, max(ds.dates) + dt.timedelta(days=1), 25)
        trend = tr.OccurrenceTrendParams(*spec.gamma)
        rho = est.fit_occurrence_range(w, trend, LIGHT_SEM)
        rng = np.random.default_rng(0)
        shuffled = window_from_days(
            [(d["xy"], rng.permutation(d["obs"]), d["fcst"]) for d in w.days.values()]
        )
        rho_shuf = est.fit_occurrence_range(shuffled, trend, LIGHT_SEM)
        assert rho_shuf < rho


class TestGammaMean:
    def test_noise_free_without_indicator(self):
        fcst_cr = np.linspace(0.5, 3.0, 50)
        y = 1.0 + 2.0 * fcst_cr
        w = pooled_window(y ** 3, fcst_cr ** 3)
        eta = est.fit_gamma_mean(w)
        assert eta == (pytest.approx(1.0), pytest.approx(2.0), 0.0)

    def test_noise_free_with_indicator(self):
        fcst_cr = np.concatenate([np.linspace(0.5, 3.0, 40), np.zeros(10)])
        zero = fcst_cr == 0.0
        y = 1.0 + 2.0 * fcst_cr + 0.5 * zero
        w = pooled_window(y ** 3, fcst_cr ** 3)
        eta = est.fit_gamma_mean(w)
        assert eta[0] == pytest.approx(1.0)
        assert eta[1] == pytest.approx(2.0)
        assert eta[2] == pytest.approx(0.5)

    def test_noisy_recovery(self):
        rng = np.random.default_rng(3)
        n = 5000
        fcst_cr = rng.gamma(2.0, 1.0, size=n)
        fcst_cr[rng.random(n) < 0.3] = 0.0
        zero = fcst_cr == 0.0
        y = 0.5 + 0.9 * fcst_cr + 0.2 * zero + rng.normal(scale=0.3, size=n)
        y = np.maximum(y, 0.01)
        eta = est.fit_gamma_mean(pooled_window(y ** 3, fcst_cr ** 3))
        assert eta[0] == pytest.approx(0.5, abs=0.05)
        assert eta[1] == pytest.approx(0.9, abs=0.05)
        assert eta[2] == pytest.approx(0.2, abs=0.05)

    def test_too_few_wet(self):
        with pytest.raises(InsufficientData):
            est.fit_gamma_mean(pooled_window(np.array([1.0, 2.0, 0.0, 0.0]),
                                             np.ones(4)))


class TestGammaVariance:
    def test_constant_forecast_matches_grid_search(self):
        # nu1 is unidentified under a constant forecast; compare the fitted
        # nu0 against an independent 1-D grid search on the same likelihood.
        rng = np.random.default_rng(4)
        n = 3000
        m, v = 2.0, 0.4
        y = rng.gamma(m ** 2 / v, v / m, size=n)
        fcst = np.full(n, 8.0)
        w = pooled_window(y ** 3, fcst)
        (nu0, nu1), n_dropped = est.fit_gamma_variance(w, (2.0, 0.0, 0.0))
        assert n_dropped == 0
        grid = np.linspace(0.2, 0.8, 601)
        lls = [est._gamma_loglik(g, 0.0, y, np.full(n, m), fcst) for g in grid]
        v_grid = grid[int(np.argmax(lls))]
        # Only the implied total variance nu0 + nu1 * fcst is identified.
        assert abs((nu0 + nu1 * 8.0) - v_grid) / v_grid < 0.05

    def test_decreasing_variance_hits_boundary(self):
        # Sample variance decreasing in the forecast: the constrained
        # optimum sits at nu1 = 0 exactly.
        rng = np.random.default_rng(5)
        n = 2000
        fcst_cr = np.where(rng.random(n) < 0.5, 1.0, 3.0)
        v = np.where(fcst_cr > 2.0, 0.05, 0.6)  # variance shrinks with fcst
        m = 2.0
        y = rng.gamma(m ** 2 / v, v / m)
        w = pooled_window(y ** 3, fcst_cr ** 3)
        (nu0, nu1), _ = est.fit_gamma_variance(w, (m, 0.0, 0.0))
        assert nu1 == 0.0
        # Grid-search confirmation that the boundary is optimal.
        means = np.full(n, m)
        ll_boundary = est._gamma_loglik(nu0, 0.0, y, means, fcst_cr ** 3)
        ll_interior = est._gamma_loglik(nu0, 0.01, y, means, fcst_cr ** 3)
        assert ll_boundary > ll_interior

    def test_recovers_generating_parameters(self):
        rng = np.random.default_rng(6)
        n = 5000
        fcst_cr = rng.gamma(2.0, 0.8, size=n) + 0.2
        m = 1.0 + 0.8 * fcst_cr
        v = 0.4 + 0.15 * fcst_cr ** 3
        y = rng.gamma(m ** 2 / v, v / m)
        w = pooled_window(y ** 3, fcst_cr ** 3)
        (nu0, nu1), _ = est.fit_gamma_variance(w, (1.0, 0.8, 0.0))
        assert abs(nu0 - 0.4) / 0.4 < 0.20
        assert abs(nu1 - 0.15) / 0.15 < 0.20


class TestAmountRange:
    def test_no_multiwet_day_rejected(self):
        w = window_from_days(
            [(np.array([[0.0, 0.0], [50.0, 0.0]]), [4.0, 0.0], [3.0, 3.0])] * 4
        )
        with pytest.raises(RangeUnidentifiable):
            est.fit_amount_range(w, (1.0, 0.5, 0.0), (0.3, 0.0))

    def test_recovers_generating_range(self):
        spec = dm.SynthSpec(n_sites=50, n_days=30, r_km=40.0, seed=9)
        ds = dm.synth_generate(spec)
        w = est.make_window(ds, max(ds.dates) + dt.timedelta(days=1), 30)
        r_hat = est.fit_amount_range(w, spec.eta, spec.nu)
        assert abs(r_hat - 40.0) / 40.0 < 0.25

    def test_shuffled_amounts_shrink_range(self):
        spec = dm.SynthSpec(n_sites=40, n_days=25, r_km=40.0, seed=10)
        ds = dm.synth_generate(spec)
        w = est.make_window(ds, max(ds.dates) + dt.timedelta(days=1), 25)
        r_hat = est.fit_amount_range(w, spec.eta, spec.nu)
        rng = np.random.default_rng(0)
        shuffled = window_from_days(
            [(d["xy"], rng.permutation(d["obs"]), d["fcst"]) for d in w.days.values()]
        )
        r_shuf = est.fit_amount_range(shuffled, spec.eta, spec.nu)
        assert r_shuf < r_hat


class TestFitModel:
    def test_deterministic(self):
        spec = dm.SynthSpec(n_sites=20, n_days=15, seed=11)
        ds = dm.synth_generate(spec)
        w = est.make_window(ds, max(ds.dates) + dt.timedelta(days=1), 15)
        a = est.fit_model(w, LIGHT_SEM)
        b = est.fit_model(w, LIGHT_SEM)
        assert a.to_text() == b.to_text()

    def test_all_dry_fails_atomically(self):
        w = pooled_window(np.zeros(30), np.linspace(0, 5, 30))
        with pytest.raises(DegenerateOccurrence, match="probit"):
            est.fit_model(w, LIGHT_SEM)

    def test_diagnostics_present(self):
        spec = dm.SynthSpec(n_sites=20, n_days=15, seed=12)
        ds = dm.synth_generate(spec)
        w = est.make_window(ds, max(ds.dates) + dt.timedelta(days=1), 15)
        model = est.fit_model(w, LIGHT_SEM)
        assert model.diagnostics["probit_converged"] is True
        assert model.diagnostics["min_training_mean"] > 0
        assert model.diagnostics["n_wet_records"] > 0


class TestModelSerialization:
    def test_round_trip(self):
        model = est.FittedModel(
            occurrence=tr.OccurrenceTrendParams(0.123456789012345, -0.7, 0.0),
            rho=rf.ExpCorrelation(61.73),
            amount=tr.GammaCoeffs(1.5, 0.8, 0.4, 0.15, 0.05),
            r=rf.ExpCorrelation(24.9999999),
            diagnostics={"n_wet_records": 123, "min_training_mean": 0.07},
        )
        back = est.FittedModel.from_text(model.to_text())
        assert back.occurrence.gamma0 == pytest.approx(0.123456789012345, rel=1e-12)
        assert back.rho.range_km == pytest.approx(61.73, rel=1e-12)
        assert back.r.range_km == pytest.approx(24.9999999, rel=1e-12)
        assert back.amount.nu1 == pytest.approx(0.05, rel=1e-12)
        assert back.diagnostics["min_training_mean"] == pytest.approx(0.07)

    def test_comments_and_blanks_ignored(self):
        model = est.FittedModel(
            occurrence=tr.OccurrenceTrendParams(0.0, 0.4, -0.4),
            rho=rf.ExpCorrelation(35.0),
            amount=tr.GammaCoeffs(1.5, 0.8, 0.4, 0.15, 0.05),
            r=rf.ExpCorrelation(25.0),
        )
        text = "# fitted model\n\n" + model.to_text()
        back = est.FittedModel.from_text(text)
        assert back.rho.range_km == 35.0


class TestWindowSweep:
    def test_empty_valid_dates(self):
        ds = dm.synth_generate(dm.SynthSpec(n_sites=5, n_days=5, seed=0))
        assert est.window_sweep(ds, [], [10], LIGHT_SEM, 5, seed=0) == []

    def test_skipped_cells_counted(self):
        # Valid date with only dry history: fit fails, cell is skipped.
        recs = []
        for d in range(12):
            for s in range(3):
                recs.append(
                    dm.DailyRecord(f"s{s}", float(s * 10), 0.0,
                                   dt.date(2004, 1, 1) + dt.timedelta(days=d),
                                   0.0, 2.0)
                )
        ds = dm.Dataset(recs)
        rows = est.window_sweep(ds, [dt.date(2004, 1, 12)], [10], LIGHT_SEM, 5, seed=0)
        assert rows[0]["n_skipped"] == 1
        assert rows[0]["n_cases"] == 0
        assert math.isnan(rows[0]["mean_crps"])

    def test_produces_scores(self):
        ds = dm.synth_generate(dm.SynthSpec(n_sites=15, n_days=20, seed=13))
        valid = ds.dates[-2:]
        rows = est.window_sweep(ds, valid, [10], LIGHT_SEM, 10, seed=0)
        assert rows[0]["n_cases"] == 30
        assert rows[0]["mean_crps"] > 0
        assert rows[0]["se_crps"] > 0
