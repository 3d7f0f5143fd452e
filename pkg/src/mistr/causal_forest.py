"""Honest causal and instrumental forests with closed-form score solutions.

Trees are grown on gradient-style pseudo-outcomes from residualized data,
with structure and leaf estimates taken from disjoint halves of each
subsample. Trees come in little bags that share a half-sample, which is
what the grouped variance estimator exploits. The instrumental variant is
the same machinery with the instrument residual in place of the treatment
residual on the score's left factor; with Z identical to W every formula
collapses to the unconfounded one, bit for bit.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._rng import derive_seed, derive_tree_seeds, spawn_generator
from .data_model import OutcomeTransform, SurvivalDataset, transform_outcome
from .errors import (
    EstimationError,
    NoOverlapError,
    NoTreatmentVariationError,
    ValidationError,
    VarianceUnavailableError,
    WeakInstrumentError,
)

__all__ = [
    "ForestParams",
    "NuisanceEstimates",
    "CausalForestModel",
    "EffectPredictions",
    "fit_nuisances",
    "fit_causal_forest",
    "weights_alpha",
    "estimate_tau",
    "estimate_tau_iv",
    "estimate_variance",
    "score_residual",
    "little_bags_variance",
]

PROPENSITY_CLAMP = (0.01, 0.99)
DENOM_TOL = 1e-12


@dataclass(frozen=True)
class ForestParams:
    """Size and honesty configuration of one causal forest."""

    n_trees: int = 2000
    min_node: int = 5
    ell: int = 8
    honesty_fraction: float = 0.5
    subsample_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.min_node < 1:
            raise ValidationError("min_node must be >= 1")
        if self.ell < 2:
            raise ValidationError("bag size ell must be >= 2")
        if self.n_trees % self.ell != 0:
            raise ValidationError(
                f"ell={self.ell} must divide n_trees={self.n_trees}"
            )
        if not (0 < self.honesty_fraction < 1):
            raise ValidationError("honesty_fraction must lie in (0, 1)")
        if not (0 < self.subsample_fraction <= 0.5):
            raise ValidationError(
                "subsample_fraction must lie in (0, 0.5]: trees subsample within half-samples"
            )


@dataclass
class NuisanceEstimates:
    """Cross-fitted propensity, conditional mean, and instrument propensity."""

    e_hat: np.ndarray
    m_hat: np.ndarray
    h_hat: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.e_hat, dtype=np.float64)
        m = np.asarray(self.m_hat, dtype=np.float64)
        if e.shape != m.shape or e.ndim != 1:
            raise ValidationError("e_hat and m_hat must be equal-length vectors")
        if np.any(e <= 0) or np.any(e >= 1):
            raise ValidationError("e_hat must lie strictly inside (0, 1)")
        if self.h_hat is not None:
            h = np.asarray(self.h_hat, dtype=np.float64)
            if h.shape != e.shape:
                raise ValidationError("h_hat length mismatch")
            if np.any(h <= 0) or np.any(h >= 1):
                raise ValidationError("h_hat must lie strictly inside (0, 1)")


@dataclass
class RegressionForest:
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_val: np.ndarray
    n_nodes: np.ndarray
    inbag: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
        out = np.empty(x.shape[0])
        K.regression_predict(x, self.feat, self.thr, self.left, self.right,
                             self.leaf_val, out)
        return out

    def oob_predict(self, x_train: np.ndarray) -> np.ndarray:
        x_train = np.ascontiguousarray(x_train, dtype=np.float64)
        out = np.empty(x_train.shape[0])
        cnt = np.empty(x_train.shape[0], dtype=np.int64)
        K.regression_oob(x_train, self.feat, self.thr, self.left, self.right,
                         self.leaf_val, self.inbag, out, cnt)
        never_oob = cnt == 0
        if never_oob.any():
            out[never_oob] = self.predict(x_train[never_oob])
        return out


def fit_regression_forest(x: np.ndarray, y: np.ndarray, weights: np.ndarray,
                          n_trees: int, min_leaf: int, subsample_fraction: float,
                          seed: int) -> RegressionForest:
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    n = x.shape[0]
    ssize = int(round(subsample_fraction * n))
    ssize = max(2, min(ssize, n - 1))  # keep every unit out-of-bag sometimes
    max_nodes = 2 * (ssize // max(min_leaf, 1)) + 3
    seeds = derive_tree_seeds(seed, "reg-tree", n_trees)
    feat = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    thr = np.zeros((n_trees, max_nodes))
    left = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    right = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    leaf_val = np.zeros((n_trees, max_nodes))
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=np.uint8)
    K.fit_regression_forest(x, y, weights, ssize, min_leaf, seeds,
                            feat, thr, left, right, leaf_val, n_nodes, inbag)
    used = int(n_nodes.max())
    return RegressionForest(
        feat=np.ascontiguousarray(feat[:, :used]),
        thr=np.ascontiguousarray(thr[:, :used]),
        left=np.ascontiguousarray(left[:, :used]),
        right=np.ascontiguousarray(right[:, :used]),
        leaf_val=np.ascontiguousarray(leaf_val[:, :used]),
        n_nodes=n_nodes, inbag=inbag,
    )


def _cross_fit_regression(x, y, weights, params: ForestParams, seed: int,
                          cross_fit: str, k_folds: int) -> np.ndarray:
    if cross_fit == "oob":
        forest = fit_regression_forest(
            x, y, weights, params.n_trees, params.min_node,
            params.subsample_fraction, seed,
        )
        return forest.oob_predict(x)
    if cross_fit == "kfold":
        n = x.shape[0]
        perm = spawn_generator(seed, "folds").permutation(n)
        out = np.empty(n)
        for k in range(k_folds):
            held = perm[k::k_folds]
            rest = np.setdiff1d(perm, held, assume_unique=True)
            forest = fit_regression_forest(
                x[rest], y[rest], weights[rest], params.n_trees,
                params.min_node, params.subsample_fraction,
                derive_seed(seed, "fold", k),
            )
            out[held] = forest.predict(x[held])
        return out
    raise ValidationError(f"unknown cross_fit mode {cross_fit!r}")


def fit_propensity(x, flags, params: ForestParams, seed: int,
                   weights=None, cross_fit: str = "oob", k_folds: int = 5) -> np.ndarray:
    """Cross-fitted propensity of a binary flag, clamped away from 0 and 1."""
    w = np.ones(len(flags)) if weights is None else weights
    raw = _cross_fit_regression(x, np.asarray(flags, dtype=np.float64), w,
                                params, seed, cross_fit, k_folds)
    return np.clip(raw, *PROPENSITY_CLAMP)


def fit_conditional_mean(x, y, params: ForestParams, seed: int,
                         weights=None, cross_fit: str = "oob", k_folds: int = 5) -> np.ndarray:
    w = np.ones(len(y)) if weights is None else weights
    return _cross_fit_regression(x, y, w, params, seed, cross_fit, k_folds)


def fit_nuisances(ds: SurvivalDataset, g: OutcomeTransform, params: ForestParams,
                  sample_weight: np.ndarray | None = None,
                  cross_fit: str = "oob", k_folds: int = 5) -> NuisanceEstimates:
    """Propensity, outcome mean, and (when an instrument is present) the
    instrument propensity, each cross-fitted on the training data."""
    w_arm = ds.treatment
    if np.all(w_arm == w_arm[0]):
        raise NoOverlapError("all units share one treatment arm")
    x = ds.covariates
    y = transform_outcome(g, ds.time)
    # the instrument propensity reuses the treatment-propensity stream so
    # that Z identical to W yields h_hat identical to e_hat
    e_seed = derive_seed(params.rng_seed, "nuisance-propensity")
    m_seed = derive_seed(params.rng_seed, "nuisance-mean")
    e_hat = fit_propensity(x, w_arm, params, e_seed, sample_weight, cross_fit, k_folds)
    m_hat = fit_conditional_mean(x, y, params, m_seed, sample_weight, cross_fit, k_folds)
    h_hat = None
    if ds.instrument is not None:
        h_hat = fit_propensity(x, ds.instrument, params, e_seed, sample_weight,
                               cross_fit, k_folds)
    return NuisanceEstimates(e_hat=e_hat, m_hat=m_hat, h_hat=h_hat)


@dataclass
class CausalForestModel:
    """Fitted honest forest plus everything the score equations need."""

    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_nodes: np.ndarray
    leaf_sw: np.ndarray
    leaf_szg: np.ndarray
    leaf_szw: np.ndarray
    leaf_cnt: np.ndarray
    est_units: np.ndarray
    est_leaf: np.ndarray
    n_est: np.ndarray
    params: ForestParams
    nuisances: NuisanceEstimates
    outcomes: np.ndarray             # g(T) on the training data
    rw: np.ndarray                   # W - e_hat
    rg: np.ndarray                   # g(T) - m_hat
    rz: np.ndarray                   # Z - h_hat (== rw when not instrumental)
    weights: np.ndarray
    iv: bool
    n_features: int

    FORMAT_VERSION = 1

    @property
    def n_trees(self) -> int:
        return self.feat.shape[0]

    @property
    def n_train(self) -> int:
        return self.rw.shape[0]

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            format_version=np.int64(self.FORMAT_VERSION),
            kind=np.array("causal_forest"),
            feat=self.feat, thr=self.thr, left=self.left, right=self.right,
            n_nodes=self.n_nodes, leaf_sw=self.leaf_sw, leaf_szg=self.leaf_szg,
            leaf_szw=self.leaf_szw, leaf_cnt=self.leaf_cnt,
            est_units=self.est_units, est_leaf=self.est_leaf, n_est=self.n_est,
            outcomes=self.outcomes, rw=self.rw, rg=self.rg, rz=self.rz,
            weights=self.weights, iv=np.int64(self.iv),
            n_features=np.int64(self.n_features),
            e_hat=self.nuisances.e_hat, m_hat=self.nuisances.m_hat,
            h_hat=(self.nuisances.h_hat if self.nuisances.h_hat is not None
                   else np.empty(0)),
            params=np.array([self.params.n_trees, self.params.min_node,
                             self.params.ell], dtype=np.int64),
            params_f=np.array([self.params.honesty_fraction,
                               self.params.subsample_fraction]),
            params_seed=np.uint64(self.params.rng_seed),
        )

    @classmethod
    def load(cls, path) -> "CausalForestModel":
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != cls.FORMAT_VERSION:
                raise ValidationError(f"unsupported forest format in {path}")
            pi = z["params"]
            pf = z["params_f"]
            params = ForestParams(
                n_trees=int(pi[0]), min_node=int(pi[1]), ell=int(pi[2]),
                honesty_fraction=float(pf[0]), subsample_fraction=float(pf[1]),
                rng_seed=int(z["params_seed"]),
            )
            h_hat = z["h_hat"]
            nuis = NuisanceEstimates(
                e_hat=z["e_hat"], m_hat=z["m_hat"],
                h_hat=None if h_hat.size == 0 else h_hat,
            )
            return cls(
                feat=z["feat"], thr=z["thr"], left=z["left"], right=z["right"],
                n_nodes=z["n_nodes"], leaf_sw=z["leaf_sw"], leaf_szg=z["leaf_szg"],
                leaf_szw=z["leaf_szw"], leaf_cnt=z["leaf_cnt"],
                est_units=z["est_units"], est_leaf=z["est_leaf"], n_est=z["n_est"],
                params=params, nuisances=nuis, outcomes=z["outcomes"],
                rw=z["rw"], rg=z["rg"], rz=z["rz"], weights=z["weights"],
                iv=bool(int(z["iv"])), n_features=int(z["n_features"]),
            )


@dataclass
class EffectPredictions:
    """Batch outputs of a causal forest: point estimates and variances.

    ``status`` is 0 when both are available, 1 with no contributing trees,
    2 when the score denominator vanishes, 3 when only the variance is
    unavailable (fewer than two usable bags).
    """

    tau: np.ndarray
    var: np.ndarray
    status: np.ndarray
    n_skipped_trees: np.ndarray


def fit_causal_forest(ds: SurvivalDataset, g: OutcomeTransform,
                      nuis: NuisanceEstimates, params: ForestParams,
                      sample_weight: np.ndarray | None = None,
                      iv: bool = False) -> CausalForestModel:
    """Grow an honest forest on residualized outcomes.

    ``iv=True`` grows an instrumental forest; the dataset must then carry
    an instrument and ``nuis.h_hat`` must be present.
    """
    n = ds.n
    if nuis.e_hat.shape[0] != n:
        raise ValidationError("nuisances were fit on a different sample size")
    if iv:
        if ds.instrument is None:
            raise ValidationError("instrumental forest requires an instrument column")
        if nuis.h_hat is None:
            raise ValidationError("instrumental forest requires h_hat nuisances")
    y = transform_outcome(g, ds.time)
    rw = np.ascontiguousarray(ds.treatment - nuis.e_hat)
    rg = np.ascontiguousarray(y - nuis.m_hat)
    rz = np.ascontiguousarray(ds.instrument - nuis.h_hat) if iv else rw
    w = np.ones(n) if sample_weight is None else np.ascontiguousarray(sample_weight, dtype=np.float64)
    if w.shape[0] != n or np.any(w < 0):
        raise ValidationError("sample_weight must be nonnegative with length n")

    x = np.ascontiguousarray(ds.covariates)
    n_half = n // 2
    ssize = int(round(params.subsample_fraction * n))
    ssize = max(2, min(ssize, n_half))
    n_j1 = int(round(params.honesty_fraction * ssize))
    n_j1 = max(1, min(n_j1, ssize - 1))
    n_j2 = ssize - n_j1
    max_nodes = 2 * (n_j1 // max(params.min_node, 1)) + 3

    b = params.n_trees
    n_bags = b // params.ell
    tree_seeds = derive_tree_seeds(params.rng_seed, "cf-tree", b)
    bag_seeds = derive_tree_seeds(params.rng_seed, "cf-bag", n_bags)

    feat = np.full((b, max_nodes), -1, dtype=np.int32)
    thr = np.zeros((b, max_nodes))
    left = np.full((b, max_nodes), -1, dtype=np.int32)
    right = np.full((b, max_nodes), -1, dtype=np.int32)
    n_nodes = np.zeros(b, dtype=np.int64)
    leaf_sw = np.zeros((b, max_nodes))
    leaf_szg = np.zeros((b, max_nodes))
    leaf_szw = np.zeros((b, max_nodes))
    leaf_cnt = np.zeros((b, max_nodes), dtype=np.int64)
    est_units = np.zeros((b, n_j2), dtype=np.int32)
    est_leaf = np.zeros((b, n_j2), dtype=np.int32)
    n_est = np.zeros(b, dtype=np.int64)

    K.fit_causal_forest_kernel(
        x, rw, rg, rz, w, params.ell, params.min_node, n_j1, ssize,
        tree_seeds, bag_seeds,
        feat, thr, left, right, n_nodes,
        leaf_sw, leaf_szg, leaf_szw, leaf_cnt, est_units, est_leaf, n_est,
    )
    if int(n_nodes.max()) == 1:
        warnings.warn("min_node too large to split: every tree is a single leaf",
                      stacklevel=2)
    used = int(n_nodes.max())
    return CausalForestModel(
        feat=np.ascontiguousarray(feat[:, :used]),
        thr=np.ascontiguousarray(thr[:, :used]),
        left=np.ascontiguousarray(left[:, :used]),
        right=np.ascontiguousarray(right[:, :used]),
        n_nodes=n_nodes,
        leaf_sw=np.ascontiguousarray(leaf_sw[:, :used]),
        leaf_szg=np.ascontiguousarray(leaf_szg[:, :used]),
        leaf_szw=np.ascontiguousarray(leaf_szw[:, :used]),
        leaf_cnt=np.ascontiguousarray(leaf_cnt[:, :used]),
        est_units=est_units, est_leaf=est_leaf, n_est=n_est,
        params=params, nuisances=nuis, outcomes=y,
        rw=rw, rg=rg, rz=rz, weights=w, iv=iv, n_features=ds.p,
    )


def predict_effects(model: CausalForestModel, x: np.ndarray) -> EffectPredictions:
    """Point estimate and little-bags variance for each query row."""
    xq = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    if xq.shape[1] != model.n_features:
        raise ValidationError(
            f"query has {xq.shape[1]} columns, model expects {model.n_features}"
        )
    mq = xq.shape[0]
    tau = np.empty(mq)
    var = np.empty(mq)
    status = np.zeros(mq, dtype=np.int8)
    n_skip = np.zeros(mq, dtype=np.int64)
    K.causal_predict(xq, model.feat, model.thr, model.left, model.right,
                     model.leaf_sw, model.leaf_szg, model.leaf_szw, model.leaf_cnt,
                     model.params.ell, model.iv, DENOM_TOL,
                     tau, var, status, n_skip)
    return EffectPredictions(tau=tau, var=var, status=status, n_skipped_trees=n_skip)


def _single(model: CausalForestModel, x) -> EffectPredictions:
    return predict_effects(model, np.asarray(x, dtype=np.float64).reshape(1, -1))


def weights_alpha(model: CausalForestModel, x) -> np.ndarray:
    """Similarity weights over training units; they sum to one."""
    xq = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    out = np.zeros((xq.shape[0], model.n_train))
    K.causal_alpha(xq, model.feat, model.thr, model.left, model.right,
                   model.leaf_sw, model.leaf_cnt, model.est_units,
                   model.est_leaf, model.n_est, model.weights, out)
    return out[0] if np.asarray(x).ndim == 1 else out


def estimate_tau(model: CausalForestModel, x) -> float:
    """Closed-form root of the weighted unconfounded score at x."""
    if model.iv:
        raise ValidationError("model is instrumental; use estimate_tau_iv")
    pred = _single(model, x)
    if pred.status[0] == 1:
        raise EstimationError("no tree contributed estimation units at x")
    if pred.status[0] == 2:
        raise NoTreatmentVariationError("no treatment variation near x")
    return float(pred.tau[0])


def estimate_tau_iv(model: CausalForestModel, x) -> float:
    """Closed-form root of the weighted instrumental score at x (complier effect)."""
    if not model.iv:
        raise ValidationError("model is not instrumental; use estimate_tau")
    pred = _single(model, x)
    if pred.status[0] == 1:
        raise EstimationError("no tree contributed estimation units at x")
    if pred.status[0] == 2:
        raise WeakInstrumentError("instrument moves treatment too little near x")
    return float(pred.tau[0])


def estimate_variance(model: CausalForestModel, x) -> float:
    """Grouped half-sample (little bags) variance of the estimate at x."""
    pred = _single(model, x)
    if pred.status[0] == 1:
        raise EstimationError("no tree contributed estimation units at x")
    if pred.status[0] == 2:
        err = WeakInstrumentError if model.iv else NoTreatmentVariationError
        raise err("score denominator vanishes at x")
    if pred.status[0] == 3:
        raise VarianceUnavailableError("fewer than two usable bags at x")
    return float(pred.var[0])


def score_residual(model: CausalForestModel, x, tau: float) -> float:
    """Value of the weighted score at (x, tau); near zero at the estimate."""
    alpha = weights_alpha(model, x)
    return float(np.sum(alpha * model.rz * (model.rg - tau * model.rw)))


def little_bags_variance(tau_g, within_vars, ell: int) -> float:
    """Between-bag spread of bag estimates, debiased by within-bag tree noise.

    ``tau_g`` holds one estimate per bag; ``within_vars`` per-bag sample
    variances of the tree-level estimates. Clipped at zero.
    """
    tau_g = np.asarray(tau_g, dtype=np.float64)
    between = float(np.mean((tau_g - tau_g.mean()) ** 2))
    within = float(np.mean(within_vars)) if len(within_vars) else 0.0
    return max(0.0, between - within / ell)
