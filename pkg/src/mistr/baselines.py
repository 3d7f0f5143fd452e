"""Comparator estimators built on censoring-probability reweighting.

The censoring process is fit with roles reversed (censoring as the event),
either marginally by the product-limit estimator or conditionally on
(X, W) with the same survival-tree ensemble used elsewhere. Units carrying
full information for the horizon are up-weighted by the inverse of their
probability of having remained uncensored; everything else gets weight
zero and drops out. A complete-case causal forest (unit weights on the
same subset) rounds out the comparator family.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._rng import derive_seed
from .causal_forest import (
    CausalForestModel,
    EffectPredictions,
    ForestParams,
    NuisanceEstimates,
    fit_causal_forest,
    fit_conditional_mean,
    fit_propensity,
    predict_effects,
)
from .data_model import (
    OutcomeTransform,
    SurvivalCurve,
    SurvivalDataset,
    effective_noncensoring,
    transform_outcome,
)
from .errors import EstimationError, ValidationError
from .survival_forest import ErtParams, SurvivalForest, fit_survival_forest, kaplan_meier

__all__ = [
    "CensoringModel",
    "IpcwModel",
    "fit_censoring_model",
    "ipcw_weights",
    "ipcw_estimate",
    "complete_case_estimate",
    "KIND_MARGINAL",
    "KIND_CONDITIONAL",
    "DEFAULT_WEIGHT_CLAMP",
]

KIND_MARGINAL = "km-marginal"
KIND_CONDITIONAL = "forest-conditional"
DEFAULT_WEIGHT_CLAMP = 20.0


@dataclass
class CensoringModel:
    """Estimator of the censoring survival Pr(C > t | X, W)."""

    kind: str
    marginal: SurvivalCurve | None = None
    forest: SurvivalForest | None = None

    def survival_before(self, t: np.ndarray, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Left limit S_C(t-) per unit, the probability of being uncensored
        just before each unit's own time."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == KIND_MARGINAL:
            return np.asarray(self.marginal.before(t))
        xw = np.column_stack([x, w])
        s_mat = self.forest.survival_matrix(xw)
        idx = np.searchsorted(self.forest.grid, t, side="left") - 1
        out = np.where(idx >= 0, s_mat[np.arange(t.size), np.maximum(idx, 0)], 1.0)
        return out


def fit_censoring_model(ds: SurvivalDataset, kind: str = KIND_CONDITIONAL,
                        params: ErtParams | None = None,
                        rng_seed: int = 0) -> CensoringModel:
    """Reversed-role survival fit: the censoring indicator becomes the event.

    With zero censored units the fitted survival is identically one, which
    makes downstream weights exactly one.
    """
    flipped = ds.with_outcomes(ds.time, 1.0 - ds.event)
    if kind == KIND_MARGINAL:
        if np.all(flipped.event == 0):
            curve = SurvivalCurve(grid=np.array([float(ds.time.max())]),
                                  values=np.array([1.0]))
        else:
            curve = kaplan_meier(flipped.time, flipped.event)
        return CensoringModel(kind=kind, marginal=curve)
    if kind == KIND_CONDITIONAL:
        if params is None:
            params = ErtParams(n_trees=200, k_try=max(1, ds.p // 2), n_min=6,
                               t_max=float(ds.time.max()), rng_seed=rng_seed)
        else:
            params = replace(params, t_max=min(params.t_max, float(ds.time.max())),
                             rng_seed=rng_seed)
        if int(flipped.event.sum()) < params.n_min:
            # too few censoring events to grow trees: marginal fallback
            return fit_censoring_model(ds, KIND_MARGINAL, rng_seed=rng_seed)
        forest = fit_survival_forest(flipped, params)
        return CensoringModel(kind=kind, forest=forest)
    raise ValidationError(f"unknown censoring model kind {kind!r}")


def ipcw_weights(model: CensoringModel, ds: SurvivalDataset, g: OutcomeTransform,
                 clamp: float = DEFAULT_WEIGHT_CLAMP) -> tuple[np.ndarray, int]:
    """Inverse-censoring weights per unit, zero where information is missing.

    Returns (weights, n_clamped). Weights exceeding ``clamp`` (including
    divisions by an estimated zero) are truncated and counted.
    """
    h = g.horizon
    informative = effective_noncensoring(ds.time, ds.event, h).astype(bool)
    t_eval = np.minimum(ds.time, h)
    s_before = model.survival_before(t_eval, ds.covariates, ds.treatment)
    with np.errstate(divide="ignore"):
        raw = np.where(s_before > 0, 1.0 / np.maximum(s_before, 1e-300), np.inf)
    w = np.where(informative, raw, 0.0)
    n_clamped = int(np.sum(informative & (raw > clamp)))
    return np.minimum(w, clamp), n_clamped


@dataclass
class IpcwModel:
    """Weighted (or complete-case) effect forest over informative units."""

    forest: CausalForestModel
    censoring: CensoringModel | None
    kept_idx: np.ndarray
    weights: np.ndarray             # over kept units
    n_clamped: int
    iv: bool

    def predict(self, x: np.ndarray) -> EffectPredictions:
        return predict_effects(self.forest, x)


def _weighted_effect_forest(ds_sub: SurvivalDataset, g: OutcomeTransform,
                            weights: np.ndarray, params: ForestParams,
                            iv: bool) -> CausalForestModel:
    e_seed = derive_seed(params.rng_seed, "nuisance-propensity")
    m_seed = derive_seed(params.rng_seed, "nuisance-mean")
    e_hat = fit_propensity(ds_sub.covariates, ds_sub.treatment, params, e_seed,
                           weights=weights)
    h_hat = None
    if iv:
        h_hat = fit_propensity(ds_sub.covariates, ds_sub.instrument, params, e_seed,
                               weights=weights)
    y = transform_outcome(g, ds_sub.time)
    m_hat = fit_conditional_mean(ds_sub.covariates, y, params, m_seed, weights=weights)
    nuis = NuisanceEstimates(e_hat=e_hat, m_hat=m_hat, h_hat=h_hat)
    return fit_causal_forest(ds_sub, g, nuis, params, sample_weight=weights, iv=iv)


def ipcw_estimate(ds: SurvivalDataset, g: OutcomeTransform,
                  censoring_kind: str = KIND_CONDITIONAL,
                  params: ForestParams = ForestParams(),
                  iv: bool = False,
                  clamp: float = DEFAULT_WEIGHT_CLAMP,
                  censoring_params: ErtParams | None = None) -> IpcwModel:
    """Fit the inverse-censoring-weighted causal (or instrumental) forest."""
    if iv and ds.instrument is None:
        raise ValidationError("instrumental weighting requires an instrument column")
    cens = fit_censoring_model(ds, censoring_kind, censoring_params,
                               rng_seed=derive_seed(params.rng_seed, "censoring"))
    w_all, n_clamped = ipcw_weights(cens, ds, g, clamp)
    kept = np.flatnonzero(w_all > 0)
    if kept.size == 0:
        raise EstimationError("no unit carries information for the horizon")
    ds_sub = ds.subset(kept)
    ds_sub = ds_sub.with_outcomes(np.minimum(ds_sub.time, g.horizon),
                                  np.ones(kept.size))
    forest = _weighted_effect_forest(ds_sub, g, w_all[kept], params, iv)
    return IpcwModel(forest=forest, censoring=cens, kept_idx=kept,
                     weights=w_all[kept], n_clamped=n_clamped, iv=iv)


def complete_case_estimate(ds: SurvivalDataset, g: OutcomeTransform,
                           params: ForestParams = ForestParams(),
                           iv: bool = False) -> IpcwModel:
    """Causal forest on informative units only, with unit weights."""
    informative = effective_noncensoring(ds.time, ds.event, g.horizon).astype(bool)
    kept = np.flatnonzero(informative)
    if kept.size == 0:
        raise EstimationError("no unit carries information for the horizon")
    ds_sub = ds.subset(kept)
    ds_sub = ds_sub.with_outcomes(np.minimum(ds_sub.time, g.horizon),
                                  np.ones(kept.size))
    forest = _weighted_effect_forest(ds_sub, g, np.ones(kept.size), params, iv)
    return IpcwModel(forest=forest, censoring=None, kept_idx=kept,
                     weights=np.ones(kept.size), n_clamped=0, iv=iv)
