"""Heterogeneous treatment effects from right-censored survival data.

Censored event times are imputed many times from recursively refit
survival-tree ensembles; each completed dataset feeds an honest causal
forest (or instrumental forest), and the per-imputation estimates are
pooled with the classic multiple-imputation variance rule.
"""
import warnings as _warnings

with _warnings.catch_warnings():
    # the pinned TBB in some environments predates numba's floor; the
    # fallback threading layer is equivalent for our kernels
    _warnings.filterwarnings("ignore", message=".*TBB.*")
    from . import _kernels  # noqa: F401  (force early kernel registration)

from .data_model import (
    CsvSchema,
    OutcomeTransform,
    StudyConfig,
    SurvivalCurve,
    SurvivalDataset,
    apply_extra_censoring,
    effective_noncensoring,
    load_dataset,
    save_dataset,
    transform_outcome,
)
from .survival_forest import (
    ErtParams,
    SurvivalForest,
    conditional_residual_survival,
    fit_survival_forest,
    kaplan_meier,
    predict_survival,
    sample_event_time,
)
from .rist import ImputationResult, RistModel, RistParams, impute_datasets, rist_fit
from .causal_forest import (
    CausalForestModel,
    EffectPredictions,
    ForestParams,
    NuisanceEstimates,
    estimate_tau,
    estimate_tau_iv,
    estimate_variance,
    fit_causal_forest,
    fit_nuisances,
    little_bags_variance,
    predict_effects,
    score_residual,
    weights_alpha,
)
from .mistr import (
    MistrConfig,
    MistrEstimate,
    MistrModel,
    mistr_fit,
    mistr_predict,
    mistr_predict_batch,
    subsample_imputations,
    variance_components,
)
from .baselines import (
    CensoringModel,
    IpcwModel,
    complete_case_estimate,
    fit_censoring_model,
    ipcw_estimate,
    ipcw_weights,
)
from .simulation import (
    LabeledSample,
    SettingSpec,
    SETTINGS,
    evaluate,
    generate,
    mimic_formula_sample,
    quantiles_test_set,
    true_cate,
    true_cate_batch,
)
from . import errors

__version__ = "0.1.0"
