"""End-to-end pipeline: recursion-imputed trees feeding honest causal forests.

One master seed fans out to the recursion, the imputation draws, and the
forests. The forest stream is deliberately identical across imputations:
with no censoring all imputed datasets coincide, so the per-imputation
estimates must coincide too, and the spread across imputations then
measures exactly the information lost to censoring, which is what the
pooled variance decomposition attributes to its between component.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import derive_seed
from .causal_forest import (
    CausalForestModel,
    ForestParams,
    NuisanceEstimates,
    fit_causal_forest,
    fit_conditional_mean,
    fit_propensity,
    predict_effects,
)
from .data_model import OutcomeTransform, SurvivalDataset, transform_outcome
from .errors import EstimationError, ValidationError, VarianceUnavailableError
from .rist import ImputationResult, RistModel, RistParams, impute_datasets, rist_fit

__all__ = [
    "MistrConfig",
    "MistrModel",
    "MistrEstimate",
    "mistr_fit",
    "mistr_predict",
    "mistr_predict_batch",
    "variance_components",
    "subsample_imputations",
    "pool_imputations",
]

MODE_UNCONFOUNDED = "unconfounded"
MODE_IV = "iv"


@dataclass(frozen=True)
class MistrConfig:
    g: OutcomeTransform
    rist: RistParams
    forest: ForestParams
    mode: str = MODE_UNCONFOUNDED
    master_seed: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_UNCONFOUNDED, MODE_IV):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if not np.isclose(self.g.horizon, self.rist.study.horizon):
            raise ValidationError("outcome transform horizon must match the study horizon")
        if self.g.horizon > self.rist.study.t_max:
            raise ValidationError("horizon must not exceed t_max")


@dataclass
class MistrEstimate:
    """Pooled effect estimate with its multiple-imputation variance split.

    total_var = within_var + (1 + 1/A) * between_var over the A pooled
    imputations; variance fields are NaN when fewer than two imputations
    could be pooled.
    """

    tau: float
    within_var: float
    between_var: float
    total_var: float
    tau_a: np.ndarray
    n_excluded: int
    variance_available: bool


@dataclass
class MistrModel:
    config: MistrConfig
    rist_model: RistModel
    forests: list[CausalForestModel] | None
    imputation: ImputationResult | None
    derived_seeds: dict[str, int]
    n_train: int
    p: int
    # streaming mode: predictions captured at fit time for a fixed query set
    stored_queries: np.ndarray | None = None
    stored_tau: np.ndarray | None = None      # (A, m)
    stored_var: np.ndarray | None = None
    stored_status: np.ndarray | None = None
    active: np.ndarray | None = None          # imputation subset view

    @property
    def n_imputations(self) -> int:
        if self.active is not None:
            return int(self.active.size)
        if self.forests is not None:
            return len(self.forests)
        return int(self.stored_tau.shape[0])

    def _imputation_indices(self) -> np.ndarray:
        total = len(self.forests) if self.forests is not None else self.stored_tau.shape[0]
        return self.active if self.active is not None else np.arange(total)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if self.forests is None:
            raise ValidationError("streaming models do not retain forests to save")
        self.rist_model.forest.save(out / "rist.npz")
        for a, forest in enumerate(self.forests):
            forest.save(out / f"forest_{a:04d}.npz")
        meta = {
            "format_version": 1,
            "mode": self.config.mode,
            "master_seed": self.config.master_seed,
            "derived_seeds": self.derived_seeds,
            "n_imputations": len(self.forests),
            "n_train": self.n_train,
            "p": self.p,
            "g_kind": self.config.g.kind,
            "horizon": self.config.g.horizon,
            "t_max": self.config.rist.study.t_max,
            "rist": {
                "n_trees": self.config.rist.ert.n_trees,
                "k_try": self.config.rist.ert.k_try,
                "n_min": self.config.rist.ert.n_min,
                "q_steps": self.config.rist.q_steps,
            },
            "forest": {
                "n_trees": self.config.forest.n_trees,
                "min_node": self.config.forest.min_node,
                "ell": self.config.forest.ell,
                "honesty_fraction": self.config.forest.honesty_fraction,
                "subsample_fraction": self.config.forest.subsample_fraction,
            },
            "diagnostics": {
                "rist_step_fallbacks": self.rist_model.step_fallbacks,
                "n_censored": self.rist_model.n_censored,
                "imputation_fallbacks": (
                    self.imputation.n_fallback if self.imputation is not None else None
                ),
            },
        }
        (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, model_dir) -> "MistrModel":
        from .survival_forest import ErtParams, SurvivalForest
        from .data_model import StudyConfig

        out = Path(model_dir)
        meta = json.loads((out / "model.json").read_text())
        if meta.get("format_version") != 1:
            raise ValidationError(f"unsupported model format in {model_dir}")
        study = StudyConfig(t_max=meta["t_max"], horizon=meta["horizon"])
        ert = ErtParams(n_trees=meta["rist"]["n_trees"], k_try=meta["rist"]["k_try"],
                        n_min=meta["rist"]["n_min"], t_max=meta["t_max"],
                        rng_seed=meta["derived_seeds"]["rist"])
        rist_params = RistParams(ert=ert, q_steps=meta["rist"]["q_steps"],
                                 n_imputations=meta["n_imputations"], study=study)
        fp = meta["forest"]
        forest_params = ForestParams(
            n_trees=fp["n_trees"], min_node=fp["min_node"], ell=fp["ell"],
            honesty_fraction=fp["honesty_fraction"],
            subsample_fraction=fp["subsample_fraction"],
            rng_seed=meta["derived_seeds"]["forest"],
        )
        cfg = MistrConfig(
            g=OutcomeTransform(kind=meta["g_kind"], horizon=meta["horizon"]),
            rist=rist_params, forest=forest_params, mode=meta["mode"],
            master_seed=meta["master_seed"],
        )
        rist_forest = SurvivalForest.load(out / "rist.npz")
        rist_model = RistModel(
            forest=rist_forest, params=rist_params,
            n_censored=meta["diagnostics"]["n_censored"],
            step_fallbacks=list(meta["diagnostics"]["rist_step_fallbacks"]),
        )
        forests = [CausalForestModel.load(out / f"forest_{a:04d}.npz")
                   for a in range(meta["n_imputations"])]
        return cls(config=cfg, rist_model=rist_model, forests=forests,
                   imputation=None, derived_seeds=meta["derived_seeds"],
                   n_train=meta["n_train"], p=meta["p"])


def mistr_fit(ds: SurvivalDataset, cfg: MistrConfig,
              queries: np.ndarray | None = None,
              retain_forests: bool = True) -> MistrModel:
    """Fit the full pipeline on one right-censored dataset.

    With ``queries`` given and ``retain_forests=False`` the per-imputation
    forests are discarded after predicting the fixed query set, which keeps
    memory flat in the number of imputations.
    """
    if cfg.mode == MODE_IV and ds.instrument is None:
        raise ValidationError("instrumental mode requires an instrument column")
    if not retain_forests and queries is None:
        raise ValidationError("discarding forests requires an upfront query set")

    master = cfg.master_seed
    seeds = {
        "rist": derive_seed(master, "rist"),
        "imputations": derive_seed(master, "imputations"),
        # one forest stream shared by every imputation: identical imputed
        # datasets must produce identical per-imputation estimates
        "forest": derive_seed(master, "forest"),
    }
    rist_params = replace(cfg.rist, ert=replace(cfg.rist.ert, rng_seed=seeds["rist"]))
    forest_params = replace(cfg.forest, rng_seed=seeds["forest"])

    rist_model = rist_fit(ds, rist_params)
    imputation = impute_datasets(rist_model, ds, cfg.rist.n_imputations,
                                 cfg.rist.study, seeds["imputations"])

    # treatment (and instrument) propensities depend only on (X, W, Z):
    # identical across imputations, so they are fit once and shared
    e_seed = derive_seed(forest_params.rng_seed, "nuisance-propensity")
    m_seed = derive_seed(forest_params.rng_seed, "nuisance-mean")
    e_hat = fit_propensity(ds.covariates, ds.treatment, forest_params, e_seed)
    h_hat = None
    if ds.instrument is not None:
        h_hat = fit_propensity(ds.covariates, ds.instrument, forest_params, e_seed)

    iv = cfg.mode == MODE_IV
    forests: list[CausalForestModel] | None = [] if retain_forests else None
    a_n = cfg.rist.n_imputations
    qx = None
    tau_s = var_s = status_s = None
    if queries is not None:
        qx = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        tau_s = np.empty((a_n, qx.shape[0]))
        var_s = np.empty((a_n, qx.shape[0]))
        status_s = np.empty((a_n, qx.shape[0]), dtype=np.int8)

    for a, ds_a in enumerate(imputation.datasets):
        y_a = transform_outcome(cfg.g, ds_a.time)
        m_hat = fit_conditional_mean(ds_a.covariates, y_a, forest_params, m_seed)
        nuis = NuisanceEstimates(e_hat=e_hat, m_hat=m_hat, h_hat=h_hat)
        forest = fit_causal_forest(ds_a, cfg.g, nuis, forest_params, iv=iv)
        if qx is not None:
            pred = predict_effects(forest, qx)
            tau_s[a] = pred.tau
            var_s[a] = pred.var
            status_s[a] = pred.status
        if retain_forests:
            forests.append(forest)

    return MistrModel(
        config=cfg, rist_model=rist_model, forests=forests,
        imputation=imputation, derived_seeds=seeds,
        n_train=ds.n, p=ds.p,
        stored_queries=qx, stored_tau=tau_s, stored_var=var_s,
        stored_status=status_s,
    )


def pool_imputations(tau_a: np.ndarray, var_a: np.ndarray,
                     status_a: np.ndarray) -> MistrEstimate:
    """Combine per-imputation estimates by the multiple-imputation rule.

    Imputations whose point estimate is unavailable (degenerate
    neighborhood) are excluded and counted; pooling over the remaining
    subset stays valid. Imputations with a point estimate but no variance
    contribute to the mean and the between term only.
    """
    tau_a = np.asarray(tau_a, dtype=np.float64)
    var_a = np.asarray(var_a, dtype=np.float64)
    status_a = np.asarray(status_a)
    ok_tau = (status_a == 0) | (status_a == 3)
    ok_var = status_a == 0
    n_excluded = int((~ok_tau).sum())
    if not ok_tau.any():
        raise EstimationError("every imputation failed at this query point")
    taus = tau_a[ok_tau]
    a_n = taus.size
    tau = float(taus.mean())
    if a_n >= 2 and ok_var.any():
        between = float(taus.var(ddof=1))
        within = float(var_a[ok_var].mean())
        total = within + (1.0 + 1.0 / a_n) * between
        return MistrEstimate(tau=tau, within_var=within, between_var=between,
                             total_var=total, tau_a=taus, n_excluded=n_excluded,
                             variance_available=True)
    return MistrEstimate(tau=tau, within_var=float("nan"),
                         between_var=float("nan"), total_var=float("nan"),
                         tau_a=taus, n_excluded=n_excluded,
                         variance_available=False)


def _per_imputation_predictions(model: MistrModel, x: np.ndarray):
    xq = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    idx = model._imputation_indices()
    if model.forests is not None:
        tau = np.empty((idx.size, xq.shape[0]))
        var = np.empty((idx.size, xq.shape[0]))
        status = np.empty((idx.size, xq.shape[0]), dtype=np.int8)
        for j, a in enumerate(idx):
            pred = predict_effects(model.forests[a], xq)
            tau[j] = pred.tau
            var[j] = pred.var
            status[j] = pred.status
        return tau, var, status
    if model.stored_queries is None:
        raise ValidationError("model retains neither forests nor stored predictions")
    # match query rows against the stored set
    pos = []
    for row in xq:
        hits = np.flatnonzero(np.all(model.stored_queries == row, axis=1))
        if hits.size == 0:
            raise ValidationError("query point was not in the upfront query set")
        pos.append(hits[0])
    pos = np.asarray(pos)
    return (model.stored_tau[np.ix_(idx, pos)],
            model.stored_var[np.ix_(idx, pos)],
            model.stored_status[np.ix_(idx, pos)])


def mistr_predict(model: MistrModel, x) -> MistrEstimate:
    """Pooled estimate and variance decomposition at one query point."""
    tau, var, status = _per_imputation_predictions(model, np.asarray(x).reshape(1, -1))
    return pool_imputations(tau[:, 0], var[:, 0], status[:, 0])


def mistr_predict_batch(model: MistrModel, x: np.ndarray) -> list[MistrEstimate]:
    tau, var, status = _per_imputation_predictions(model, x)
    return [pool_imputations(tau[:, j], var[:, j], status[:, j])
            for j in range(tau.shape[1])]


def variance_components(model: MistrModel, x) -> tuple[float, float, float]:
    """(within, between, total) variance at x; errors when unavailable."""
    est = mistr_predict(model, x)
    if not est.variance_available:
        raise VarianceUnavailableError(
            "variance needs at least two pooled imputations with forest variances"
        )
    return est.within_var, est.between_var, est.total_var


def subsample_imputations(model: MistrModel, k: int,
                          rng: np.random.Generator) -> MistrModel:
    """View of the model pooling only k sampled imputations (no refit)."""
    total = (len(model.forests) if model.forests is not None
             else model.stored_tau.shape[0])
    if not (1 <= k <= total):
        raise ValidationError(f"k must lie in [1, {total}]")
    base = model._imputation_indices()
    chosen = np.sort(rng.choice(base, size=k, replace=False))
    return replace(model, active=chosen)
