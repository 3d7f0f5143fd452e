"""Recursively imputed survival trees.

The recursion alternates two moves: draw one event time for every
effectively censored unit from the current ensemble's conditional residual
distribution (giving M complete one-step datasets), then refit exactly one
tree per dataset. After Q rounds the final ensemble drives the production
of A complete imputed datasets for downstream effect estimation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_seed, derive_tree_seeds, spawn_generator
from .data_model import StudyConfig, SurvivalDataset
from .errors import ValidationError
from .survival_forest import (
    ErtParams,
    SurvivalForest,
    draw_imputed_times,
    effective_outcomes,
    fit_ensemble,
    _event_grid,
)

__all__ = ["RistParams", "RistModel", "ImputationResult", "rist_fit", "impute_datasets"]


@dataclass(frozen=True)
class RistParams:
    ert: ErtParams
    q_steps: int = 3
    n_imputations: int = 200
    study: StudyConfig = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.q_steps < 0:
            raise ValidationError("q_steps must be >= 0")
        if self.n_imputations < 1:
            raise ValidationError("n_imputations must be >= 1")
        if self.study is None:
            raise ValidationError("study config is required")
        if not np.isclose(self.ert.t_max, self.study.t_max):
            raise ValidationError("ert.t_max must equal study.t_max")


@dataclass
class RistModel:
    """Final ensemble plus per-step recursion diagnostics."""

    forest: SurvivalForest
    params: RistParams
    n_censored: int
    step_fallbacks: list[int] = field(default_factory=list)

    @property
    def grid(self) -> np.ndarray:
        return self.forest.grid


@dataclass
class ImputationResult:
    """A complete datasets plus the raw draws behind them.

    ``datasets`` hold horizon-capped times with every unit marked observed.
    ``raw_times`` keeps the pre-cap draws for the censored units (one row
    per unit in ``censored_idx``), which is what support checks care about.
    """

    datasets: list[SurvivalDataset]
    censored_idx: np.ndarray
    raw_times: np.ndarray            # (n_censored, A)
    n_fallback: int
    n_past_horizon: np.ndarray       # per imputation: count of T_{i,a} > h


def _censored_mask(ds: SurvivalDataset, t_max: float) -> np.ndarray:
    return (ds.event == 0) & (ds.time < t_max)


def rist_fit(ds: SurvivalDataset, params: RistParams) -> RistModel:
    """Run the Q-step recursion and return the final ensemble."""
    ert = params.ert
    pf = ds.p + 1
    if ert.k_try > pf:
        raise ValidationError(f"k_try={ert.k_try} exceeds p+1={pf}")
    xw = np.ascontiguousarray(np.column_stack([ds.covariates, ds.treatment]))
    t_eff, d_eff = effective_outcomes(ds.time, ds.event, ert.t_max)
    if int(d_eff.sum()) < ert.n_min:
        raise ValidationError(
            f"only {int(d_eff.sum())} observed events; need at least n_min={ert.n_min}"
        )
    grid = _event_grid(t_eff, d_eff, ert.t_max)
    m_trees = ert.n_trees
    seed = ert.rng_seed

    forest = fit_ensemble(
        xw, t_eff[None, :], d_eff[None, :],
        ds_of_tree=np.zeros(m_trees, dtype=np.int64),
        grid=grid, k_try=ert.k_try, n_min=ert.n_min,
        seeds=derive_tree_seeds(seed, "rist-step-0", m_trees),
        t_max=ert.t_max,
    )

    cmask = _censored_mask(ds, ert.t_max)
    cidx = np.flatnonzero(cmask)
    fallbacks: list[int] = []

    for q in range(1, params.q_steps + 1):
        if cidx.size == 0:
            # nothing to impute: refits would see the original data again
            fallbacks.append(0)
            forest = fit_ensemble(
                xw, t_eff[None, :], d_eff[None, :],
                ds_of_tree=np.zeros(m_trees, dtype=np.int64),
                grid=grid, k_try=ert.k_try, n_min=ert.n_min,
                seeds=derive_tree_seeds(seed, f"rist-step-{q}", m_trees),
                t_max=ert.t_max,
            )
            continue
        s_mat = forest.survival_matrix(xw[cidx])
        u = np.empty((cidx.size, m_trees))
        for m in range(m_trees):
            u[:, m] = spawn_generator(seed, "rist-draw", q, m).random(cidx.size)
        drawn, n_fb = draw_imputed_times(s_mat, t_eff[cidx], grid, ert.t_max, u)
        fallbacks.append(n_fb)

        T2 = np.tile(t_eff, (m_trees, 1))
        D2 = np.tile(d_eff, (m_trees, 1))
        T2[:, cidx] = drawn.T
        D2[:, cidx] = 1
        forest = fit_ensemble(
            xw, T2, D2,
            ds_of_tree=np.arange(m_trees, dtype=np.int64),
            grid=grid, k_try=ert.k_try, n_min=ert.n_min,
            seeds=derive_tree_seeds(seed, f"rist-step-{q}", m_trees),
            t_max=ert.t_max,
        )

    return RistModel(forest=forest, params=params, n_censored=int(cidx.size),
                     step_fallbacks=fallbacks)


def impute_datasets(model: RistModel, ds: SurvivalDataset, n_imputations: int,
                    study: StudyConfig, rng_seed: int) -> ImputationResult:
    """Produce A complete datasets from the fitted ensemble.

    Every effectively censored unit receives one independent draw per
    imputation, strictly above its censoring time and at most t_max; all
    times are then capped at the horizon and every unit is marked observed.
    """
    if ds.p + 1 != model.forest.n_features:
        raise ValidationError(
            f"dataset has p={ds.p}, model was fit with p={model.forest.n_features - 1}"
        )
    t_max = study.t_max
    h = study.horizon
    xw = np.column_stack([ds.covariates, ds.treatment])
    t_eff, _ = effective_outcomes(ds.time, ds.event, t_max)
    cmask = _censored_mask(ds, t_max)
    cidx = np.flatnonzero(cmask)

    a_n = n_imputations
    if cidx.size:
        s_mat = model.forest.survival_matrix(xw[cidx])
        u = np.empty((cidx.size, a_n))
        for a in range(a_n):
            u[:, a] = spawn_generator(rng_seed, "impute", a).random(cidx.size)
        raw, n_fb = draw_imputed_times(s_mat, t_eff[cidx], model.grid, t_max, u)
    else:
        raw = np.empty((0, a_n))
        n_fb = 0

    ones = np.ones(ds.n)
    datasets = []
    past_horizon = np.zeros(a_n, dtype=np.int64)
    for a in range(a_n):
        t_a = t_eff.copy()
        if cidx.size:
            t_a[cidx] = raw[:, a]
        past_horizon[a] = int((t_a > h).sum())
        datasets.append(ds.with_outcomes(np.minimum(t_a, h), ones))
    return ImputationResult(
        datasets=datasets, censored_idx=cidx, raw_times=raw,
        n_fallback=n_fb, n_past_horizon=past_horizon,
    )
