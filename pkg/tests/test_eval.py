import math

import numpy as np
import pytest

from conftest import make_dataset
from hawkfuse import em, fuse
from hawkfuse.data import Window
from hawkfuse.evaluate import (
    GridForecast,
    aic,
    auc,
    branching_ratio,
    compare_models,
    fit_baselines,
    forecast_series,
    grid_forecast,
    observed_loglik,
    resolve_groups,
)
from hawkfuse.kernels import KdeBackground, TriggerParams, kde_space, kde_time, kde_time_mass
from hawkfuse.model import Assignment, FitConfig, FittedModel, GroupParams
from hawkfuse.sim import four_group_config, simulate_dataset

WINDOW = Window(0.0, 10.0, 0.0, 1.0, 0.0, 1.0)


def single_group_model(dataset, k0=0.0, omega=1.0, sigma=0.05, b1=1.0, b2=0.2, weights=None, window=None):
    bg = KdeBackground(
        dataset.t, dataset.x, dataset.y,
        np.ones(len(dataset)) if weights is None else weights,
        b1, b2,
    )
    return FittedModel(
        n_groups=1,
        window=window or dataset.window,
        groups=[GroupParams(trigger=TriggerParams(k0, omega, sigma), mu0=bg.nb, background=bg)],
    )


class TestObservedLoglik:
    def test_homogeneous_poisson_closed_form(self):
        # one huge-bandwidth support point makes the intensity flat; the
        # likelihood then reduces to n*log(r) - r*Vol
        window = Window(0.0, 2.0, 0.0, 1.0, 0.0, 1.0)
        rows = [(i, 0.3 + 0.35 * i, 0.2 + 0.15 * i, 0.3 + 0.1 * i, "A", None) for i in range(5)]
        ds = make_dataset(rows, window)
        big1, big2 = 1e5, 1e5
        mu0 = 3e9  # keeps the flat intensity far above the evaluation floor
        bg = KdeBackground(np.array([1.0]), np.array([0.5]), np.array([0.5]), np.array([mu0]), big1, big2)
        model = FittedModel(
            n_groups=1,
            window=window,
            groups=[GroupParams(trigger=TriggerParams(0.0, 1.0, 0.05), mu0=mu0, background=bg)],
        )
        u0 = 1.0 / (2 * math.pi * big2**2)
        v0 = 1.0 / (math.sqrt(2 * math.pi) * big1)
        r = mu0 * u0 * v0
        vol_rate = mu0 * kde_time_mass(bg, 0.0, 2.0)  # = r * effective volume
        expected = 5 * math.log(r) - vol_rate
        got = observed_loglik(ds, model, window)
        assert got == pytest.approx(expected, rel=1e-9)

    def test_history_extension_invariant_for_pure_background(self):
        rows = [(i, 1.0 + i, 0.2 + 0.1 * i, 0.5, "B", 0) for i in range(4)]
        ds_b = make_dataset(rows, WINDOW, 1)
        extra = rows + [(10 + i, 0.5 + i, 0.8, 0.8, "A", None) for i in range(3)]
        ds_all = make_dataset(extra, WINDOW, 1)
        model = single_group_model(ds_b, k0=0.0)
        ll_b = observed_loglik(ds_b, model, WINDOW, subset="B")
        ll_all = observed_loglik(ds_all, model, WINDOW, subset="B")
        assert ll_all == pytest.approx(ll_b, rel=1e-12)

    def test_five_event_term_by_term(self):
        rows = [
            (0, 0.5, 0.20, 0.20, "B", 0),
            (1, 1.1, 0.25, 0.22, "A", None),
            (2, 1.9, 0.60, 0.70, "B", 1),
            (3, 2.4, 0.62, 0.71, "A", None),
            (4, 3.3, 0.30, 0.25, "B", 0),
        ]
        ds = make_dataset(rows, WINDOW, 2)
        rng = np.random.default_rng(0)
        groups = []
        for k in range(2):
            bg = KdeBackground(ds.t, ds.x, ds.y, rng.random(5) + 0.2, 0.9, 0.2)
            groups.append(
                GroupParams(
                    trigger=TriggerParams(0.6 + 0.1 * k, 0.8 + 0.3 * k, 0.05 + 0.02 * k),
                    mu0=bg.nb,
                    background=bg,
                )
            )
        model = FittedModel(
            n_groups=2,
            window=WINDOW,
            groups=groups,
            assignments=[Assignment(1, 1, 0.8), Assignment(3, 0, 0.7)],
        )
        got = observed_loglik(ds, model, WINDOW, subset="all")

        # independent summation: marked events use their group's intensity,
        # unmarked ones the sum over groups; history groups by mark/assignment
        hist_group = {0: 0, 1: 1, 2: 1, 3: 0, 4: 0}
        t, x, y = ds.t, ds.x, ds.y
        expected = 0.0
        for i in range(5):
            lam = 0.0
            use_groups = [ds.marks[i]] if ds.marks[i] >= 0 else [0, 1]
            for k in use_groups:
                gp = model.groups[k]
                lam += gp.mu0 * kde_space(x[i], y[i], gp.background) * kde_time(t[i], gp.background)
                for j in range(5):
                    if t[j] < t[i] and hist_group[int(ds.ids[j])] == k:
                        dt = t[i] - t[j]
                        r2 = (x[i] - x[j]) ** 2 + (y[i] - y[j]) ** 2
                        trig = gp.trigger
                        lam += (
                            trig.k0 * trig.omega * math.exp(-trig.omega * dt)
                            * math.exp(-r2 / (2 * trig.sigma**2)) / (2 * math.pi * trig.sigma**2)
                        )
            expected += math.log(lam)
        for k, gp in enumerate(model.groups):
            expected -= gp.mu0 * kde_time_mass(gp.background, WINDOW.t0, WINDOW.t1)
            for j in range(5):
                if hist_group[int(ds.ids[j])] == k:
                    expected -= gp.trigger.k0 * (1.0 - math.exp(-gp.trigger.omega * (WINDOW.t1 - t[j])))
        assert got == pytest.approx(expected, rel=1e-10)

    def test_unassigned_unlabeled_events_error(self):
        rows = [(0, 1.0, 0.5, 0.5, "A", None), (1, 2.0, 0.6, 0.6, "B", 0)]
        ds = make_dataset(rows, WINDOW, 2)
        rng = np.random.default_rng(1)
        groups = []
        for k in range(2):
            bg = KdeBackground(ds.t, ds.x, ds.y, rng.random(2) + 0.5, 1.0, 0.2)
            groups.append(GroupParams(trigger=TriggerParams(0.5, 1.0, 0.05), mu0=bg.nb, background=bg))
        model = FittedModel(n_groups=2, window=WINDOW, groups=groups, assignments=None)
        with pytest.raises(ValueError, match="no mark"):
            observed_loglik(ds, model, WINDOW, subset="A")

    def test_subset_calibration_identity(self):
        cfg = four_group_config(t_horizon=100.0, unlabeled_fraction=0.3, seed=3)
        res = simulate_dataset(cfg)
        ds = res.dataset
        model = fuse.fit_fused(ds, 4, FitConfig(max_iters=10))
        raw = observed_loglik(ds, model, subset="B", calibrate_subset=False)
        cal = observed_loglik(ds, model, subset="B", calibrate_subset=True)
        # compute the model integral independently and check
        # calibrated = raw + I - n + n*log(n/I)
        window = ds.window
        groups = resolve_groups(ds, model)
        integral = 0.0
        for k, gp in enumerate(model.groups):
            if gp.mu0 > 0 and gp.background.nb > 0:
                integral += gp.mu0 * kde_time_mass(gp.background, window.t0, window.t1)
            for j in np.flatnonzero(groups == k):
                if gp.trigger.k0 > 0:
                    integral += gp.trigger.k0 * (
                        1.0 - math.exp(-gp.trigger.omega * (window.t1 - ds.t[j]))
                    )
        n = int(ds.is_b.sum())
        expected_cal = raw + integral - n + n * math.log(n / integral)
        assert cal == pytest.approx(expected_cal, rel=1e-9)
        # the flag is a no-op when scoring everything
        all_raw = observed_loglik(ds, model, subset="all", calibrate_subset=False)
        all_cal = observed_loglik(ds, model, subset="all", calibrate_subset=True)
        assert all_raw == all_cal

    def test_locality_of_far_future_event(self):
        rows = [(i, 0.5 + 0.4 * i, 0.3 + 0.05 * i, 0.4, "A", None) for i in range(4)]
        ds1 = make_dataset(rows, WINDOW, 1)
        # far in time (past the excitation cutoff) but inside the KDE reach
        far = (99, 9.9, 0.7, 0.6, "A", None)
        ds2 = make_dataset(rows + [far], WINDOW, 1)
        model = single_group_model(ds1, k0=0.6, omega=20.0, sigma=0.02, b1=5.0)
        ll1 = observed_loglik(ds1, model, WINDOW)
        ll2 = observed_loglik(ds2, model, WINDOW)
        gp = model.groups[0]
        lam_far = gp.mu0 * kde_space(0.7, 0.6, gp.background) * kde_time(9.9, gp.background)
        tail_far = gp.trigger.k0 * (1.0 - math.exp(-gp.trigger.omega * (WINDOW.t1 - 9.9)))
        assert ll2 - ll1 == pytest.approx(math.log(lam_far) - tail_far, rel=1e-9)


class TestAic:
    def test_paper_scale_example(self):
        assert aic(49892.0, 4) == pytest.approx(-99776.0)

    def test_trivial(self):
        assert aic(0.0, 16) == 32.0

    def test_monotone_in_loglik(self):
        assert aic(10.0, 4) > aic(11.0, 4)

    def test_df_validated(self):
        with pytest.raises(ValueError):
            aic(1.0, 0)


class TestGridForecast:
    def test_flat_background_equal_scores(self):
        rows = [(0, 1.0, 0.5, 0.5, "A", None), (1, 2.0, 0.6, 0.6, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        bg = KdeBackground(np.array([5.0]), np.array([0.5]), np.array([0.5]), np.array([1.0]), 1e7, 1e7)
        model = FittedModel(
            n_groups=1, window=WINDOW,
            groups=[GroupParams(trigger=TriggerParams(0.0, 1.0, 0.05), mu0=1.0, background=bg)],
        )
        fc = grid_forecast(model, ds, day=3, grid=4)
        assert np.ptp(fc.scores) <= 1e-9 * fc.scores.max()

    def test_peaked_kernel_argmax_at_event(self):
        rows = [(0, 0.5, 0.31, 0.72, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds, k0=0.9, omega=0.5, sigma=0.005)
        fc = grid_forecast(model, ds, day=1, grid=10)
        ix, iy = np.unravel_index(np.argmax(fc.scores), fc.scores.shape)
        # the event at (0.31, 0.72) sits in cell (3, 7) of a 10x10 unit grid
        assert (ix, iy) == (3, 7)

    def test_three_by_three_direct_oracle(self):
        rows = [(0, 0.4, 0.25, 0.30, "A", None), (1, 1.3, 0.70, 0.65, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds, k0=0.7, omega=0.9, sigma=0.2, b1=2.0, b2=0.3)
        day = 2
        fc = grid_forecast(model, ds, day=day, grid=3)
        gp = model.groups[0]
        t_start = WINDOW.t0 + day * 1.0
        for ix in range(3):
            for iy in range(3):
                cx = WINDOW.x0 + (ix + 0.5) / 3.0
                cy = WINDOW.y0 + (iy + 0.5) / 3.0
                lam = gp.mu0 * kde_space(cx, cy, gp.background) * kde_time(t_start, gp.background)
                for j in range(2):
                    if ds.t[j] < t_start:
                        dt = t_start - ds.t[j]
                        r2 = (cx - ds.x[j]) ** 2 + (cy - ds.y[j]) ** 2
                        lam += (
                            gp.trigger.k0 * gp.trigger.omega * math.exp(-gp.trigger.omega * dt)
                            * math.exp(-r2 / (2 * gp.trigger.sigma**2))
                            / (2 * math.pi * gp.trigger.sigma**2)
                        )
                assert fc.scores[ix, iy] == pytest.approx(lam, rel=1e-10)

    def test_labels_mark_next_day_cells(self):
        rows = [(0, 2.5, 0.15, 0.85, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds, k0=0.0)
        fc = grid_forecast(model, ds, day=2, grid=10)
        assert fc.labels[1, 8] == 1.0
        assert fc.labels.sum() == 1.0

    def test_series_matches_single_days(self):
        cfg = four_group_config(t_horizon=30.0, unlabeled_fraction=0.3, seed=4)
        res = simulate_dataset(cfg)
        model = fuse.fit_fused(res.dataset, 4, FitConfig(max_iters=8))
        days = [0, 3, 7, 15, 29]
        scores, labels = forecast_series(model, res.dataset, days, grid=6)
        for pos, day in enumerate(days):
            fc = grid_forecast(model, res.dataset, day, grid=6)
            np.testing.assert_allclose(scores[pos], fc.scores.ravel(), rtol=1e-9, atol=1e-12)
            np.testing.assert_array_equal(labels[pos], fc.labels.ravel())

    def test_integrated_mode_series_consistency(self):
        cfg = four_group_config(t_horizon=20.0, unlabeled_fraction=0.3, seed=5)
        res = simulate_dataset(cfg)
        model = fuse.fit_fused(res.dataset, 4, FitConfig(max_iters=6))
        days = [1, 4, 9]
        scores, _ = forecast_series(model, res.dataset, days, grid=5, mode="integrated")
        for pos, day in enumerate(days):
            fc = grid_forecast(model, res.dataset, day, grid=5, mode="integrated")
            np.testing.assert_allclose(scores[pos], fc.scores.ravel(), rtol=1e-9, atol=1e-12)

    def test_empty_history_is_valid(self):
        rows = [(0, 8.0, 0.5, 0.5, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds, k0=0.5)
        fc = grid_forecast(model, ds, day=0, grid=4)
        assert np.all(np.isfinite(fc.scores))


def brute_force_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels != 1]
    wins2 = 2 * int((pos[:, None] > neg[None, :]).sum()) + int((pos[:, None] == neg[None, :]).sum())
    return wins2 / (2.0 * pos.size * neg.size)


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([4, 3, 2, 1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auc([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5

    def test_brute_force_exact(self):
        rng = np.random.default_rng(6)
        for n in (10, 100, 1000):
            scores = rng.integers(0, 20, size=n).astype(float)  # many ties
            labels = (rng.random(n) < 0.3).astype(int)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            assert auc(scores, labels) == brute_force_auc(scores, labels)
        scores = rng.normal(size=500)
        labels = (rng.random(500) < 0.5).astype(int)
        assert auc(scores, labels) == brute_force_auc(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(7)
        scores = rng.random(200)
        labels = (rng.random(200) < 0.4).astype(int)
        assert auc(scores, labels) == auc(np.exp(3 * scores), labels)

    def test_complement_identity(self):
        rng = np.random.default_rng(8)
        scores = rng.integers(0, 5, 64).astype(float)
        labels = (rng.random(64) < 0.5).astype(int)
        if labels.sum() in (0, 64):
            labels[0] = 1 - labels[0]
        assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_labels_error(self):
        with pytest.raises(ValueError, match="degenerate labels"):
            auc([1.0, 2.0], [1, 1])


class TestBranchingRatio:
    def test_returns_stored_k0(self):
        rows = [(0, 1.0, 0.5, 0.5, "A", None), (1, 2.0, 0.6, 0.6, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds, k0=0.73)
        out = branching_ratio(model)
        assert out == [(0.73, True)]

    def test_supercritical_flagged(self):
        rows = [(0, 1.0, 0.5, 0.5, "A", None)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds, k0=1.2)
        assert branching_ratio(model)[0] == (1.2, False)


class TestCompareModels:
    @pytest.fixture(scope="class")
    def fitted(self):
        cfg = four_group_config(t_horizon=150.0, unlabeled_fraction=0.3, seed=12)
        res = simulate_dataset(cfg)
        fit_cfg = FitConfig(max_iters=15)
        fused = fuse.fit_fused(res.dataset, 4, fit_cfg)
        bl_a, bl_b = fit_baselines(res.dataset, 4, fit_cfg)
        return res.dataset, fused, bl_a, bl_b

    def test_identical_model_identical_rows(self, fitted):
        ds, fused, _, _ = fitted
        rows = compare_models(ds, fused, fused, fused)
        by_subset = {}
        for r in rows:
            by_subset.setdefault(r.subset, []).append(r.loglik)
        for subset, vals in by_subset.items():
            assert all(v == vals[0] for v in vals)

    def test_aic_column_consistency(self, fitted):
        ds, fused, bl_a, bl_b = fitted
        for r in compare_models(ds, fused, bl_a, bl_b):
            assert r.aic == pytest.approx(2 * r.df - 2 * r.loglik, abs=1e-9)

    def test_df_convention(self, fitted):
        ds, fused, bl_a, bl_b = fitted
        rows = compare_models(ds, fused, bl_a, bl_b)
        df_by_model = {r.model: r.df for r in rows}
        assert df_by_model["fused"] == 16
        assert df_by_model["baseline_A"] == 4
        assert df_by_model["baseline_B"] == 16


class TestResolveGroups:
    def test_single_group_resolves_everything(self):
        rows = [(0, 1.0, 0.5, 0.5, "A", None), (1, 2.0, 0.6, 0.6, "B", 0)]
        ds = make_dataset(rows, WINDOW, 1)
        model = single_group_model(ds)
        np.testing.assert_array_equal(resolve_groups(ds, model), [0, 0])

    def test_assignments_fill_unlabeled(self):
        rows = [(0, 1.0, 0.5, 0.5, "A", None), (1, 2.0, 0.6, 0.6, "B", 1)]
        ds = make_dataset(rows, WINDOW, 2)
        rng = np.random.default_rng(2)
        groups = []
        for k in range(2):
            bg = KdeBackground(ds.t, ds.x, ds.y, rng.random(2) + 0.5, 1.0, 0.2)
            groups.append(GroupParams(trigger=TriggerParams(0.5, 1.0, 0.05), mu0=bg.nb, background=bg))
        model = FittedModel(n_groups=2, window=WINDOW, groups=groups, assignments=[Assignment(0, 1, 0.9)])
        np.testing.assert_array_equal(resolve_groups(ds, model), [1, 1])
