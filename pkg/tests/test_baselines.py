import numpy as np
import pytest

from mistr.baselines import (
    KIND_CONDITIONAL,
    KIND_MARGINAL,
    CensoringModel,
    complete_case_estimate,
    fit_censoring_model,
    ipcw_estimate,
    ipcw_weights,
)
from mistr.causal_forest import ForestParams
from mistr.data_model import OutcomeTransform, SurvivalCurve, SurvivalDataset
from mistr.errors import EstimationError


def _g(h):
    return OutcomeTransform(kind="rmst", horizon=h)


class TestCensoringModel:
    def test_no_censoring_gives_unit_survival(self, complete_dataset):
        for kind in (KIND_MARGINAL, KIND_CONDITIONAL):
            model = fit_censoring_model(complete_dataset, kind)
            s = model.survival_before(complete_dataset.time,
                                      complete_dataset.covariates,
                                      complete_dataset.treatment)
            assert np.all(s == 1.0)

    def test_all_censored_at_five_marginal_km(self, rng):
        n = 40
        ds = SurvivalDataset(covariates=rng.random((n, 2)),
                             treatment=(rng.random(n) < 0.5).astype(float),
                             time=np.full(n, 5.0), event=np.zeros(n))
        model = fit_censoring_model(ds, KIND_MARGINAL)
        assert model.marginal(4.99) == pytest.approx(1.0)
        assert model.marginal(5.0) == pytest.approx(0.0)

    def test_conditional_fit_on_hidden_driver_runs(self):
        # censoring driven by covariates the model never sees: misspecified
        # by construction, but it must still fit and produce valid curves
        from mistr.simulation import generate
        ds = generate("7", 800, seed=1).dataset
        model = fit_censoring_model(ds, KIND_CONDITIONAL)
        s = model.survival_before(ds.time, ds.covariates, ds.treatment)
        assert np.all((s >= 0) & (s <= 1))

    def test_conditional_predictions_monotone(self, small_censored_dataset, rng):
        model = fit_censoring_model(small_censored_dataset, KIND_CONDITIONAL)
        xw = np.column_stack([rng.random((50, 5)), (rng.random(50) < 0.5)])
        mat = model.forest.survival_matrix(xw)
        assert np.all(np.diff(mat, axis=1) <= 1e-12)


class TestIpcwWeights:
    def test_no_censoring_unit_weights(self, complete_dataset):
        model = fit_censoring_model(complete_dataset, KIND_MARGINAL)
        w, n_clamped = ipcw_weights(model, complete_dataset, _g(50.0))
        assert np.all(w == 1.0)
        assert n_clamped == 0

    def test_reciprocal_weight_at_half_survival(self):
        # unit A censored at 1 (a censoring event), unit B fails at 2:
        # the reversed-role product limit gives S_C(2-) = 1/2
        ds = SurvivalDataset(covariates=np.array([[0.0], [1.0]]),
                             treatment=np.array([0.0, 1.0]),
                             time=np.array([1.0, 2.0]),
                             event=np.array([0.0, 1.0]))
        model = fit_censoring_model(ds, KIND_MARGINAL)
        w, _ = ipcw_weights(model, ds, _g(3.0))
        assert w[0] == 0.0          # censored before the horizon
        assert w[1] == pytest.approx(2.0)

    def test_clamp_kicks_in(self):
        ds = SurvivalDataset(covariates=np.array([[0.0], [1.0]]),
                             treatment=np.array([0.0, 1.0]),
                             time=np.array([2.0, 2.0]),
                             event=np.array([1.0, 1.0]))
        tiny = CensoringModel(kind=KIND_MARGINAL,
                              marginal=SurvivalCurve(grid=np.array([1.0]),
                                                     values=np.array([0.01])))
        w, n_clamped = ipcw_weights(tiny, ds, _g(3.0))
        assert np.all(w == 20.0)
        assert n_clamped == 2

    def test_horizon_reachers_weighted_at_horizon_left_limit(self, rng):
        n = 30
        ds = SurvivalDataset(covariates=rng.random((n, 2)),
                             treatment=(rng.random(n) < 0.5).astype(float),
                             time=np.full(n, 7.0), event=np.zeros(n))
        curve = SurvivalCurve(grid=np.array([2.0, 6.0]),
                              values=np.array([0.8, 0.4]))
        model = CensoringModel(kind=KIND_MARGINAL, marginal=curve)
        w, _ = ipcw_weights(model, ds, _g(6.0))
        # t_eval = min(7, 6) = 6; S_C(6-) = 0.8
        assert np.allclose(w, 1.0 / 0.8)

    def test_effectively_censored_get_zero(self, small_censored_dataset):
        ds = small_censored_dataset
        model = fit_censoring_model(ds, KIND_MARGINAL)
        g = _g(3.0)
        w, _ = ipcw_weights(model, ds, g)
        uninformative = (ds.event == 0) & (ds.time < 3.0)
        assert np.all(w[uninformative] == 0.0)


class TestIpcwEstimate:
    def test_no_censoring_matches_complete_case_bitwise(self, complete_dataset, rng):
        g = _g(50.0)
        params = ForestParams(n_trees=32, ell=8, rng_seed=7)
        a = ipcw_estimate(complete_dataset, g, KIND_MARGINAL, params)
        b = complete_case_estimate(complete_dataset, g, params)
        xq = rng.random((30, 5))
        pa = a.predict(xq)
        pb = b.predict(xq)
        assert np.array_equal(pa.tau, pb.tau)
        assert np.array_equal(pa.var, pb.var)

    def test_recovers_effect_without_censoring(self, complete_dataset, rng):
        g = _g(50.0)
        params = ForestParams(n_trees=96, ell=8, rng_seed=3)
        model = complete_case_estimate(complete_dataset, g, params)
        xq = rng.random((100, 5))
        pred = model.predict(xq)
        mse = float(np.mean((pred.tau - 2.0 * xq[:, 0]) ** 2))
        assert mse < 0.1

    def test_all_uninformative_raises(self, rng):
        n = 30
        ds = SurvivalDataset(covariates=rng.random((n, 2)),
                             treatment=(rng.random(n) < 0.5).astype(float),
                             time=np.full(n, 1.0), event=np.zeros(n))
        with pytest.raises(EstimationError):
            complete_case_estimate(ds, _g(5.0), ForestParams(n_trees=8, ell=4))

    def test_weighted_fit_runs_under_heavy_censoring(self):
        from mistr.simulation import generate
        samp = generate("8", 600, seed=4)
        g = _g(6.0)
        model = ipcw_estimate(samp.dataset, g,
                              params=ForestParams(n_trees=48, ell=8, rng_seed=2))
        pred = model.predict(samp.dataset.covariates[:20])
        assert np.all(np.isfinite(pred.tau))
