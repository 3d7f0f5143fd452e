"""Extremely randomized survival trees with log-rank splitting.

Each tree sees the full sample; randomness enters only through the choice
of candidate (covariate, threshold) pairs. Terminal nodes carry the
Kaplan-Meier curve of their units, ensembles average leaf curves pointwise,
and the conditional residual distribution drives event-time imputation.

Treatment is appended to the covariates as one extra split candidate, so a
single ensemble estimates Pr(T > t | X, W). Observed times are capped at
``t_max``; censored units that reach ``t_max`` carry full information for
any horizon below it and are treated as events at the cap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from ._rng import derive_tree_seeds
from .data_model import SurvivalCurve, SurvivalDataset
from .errors import DegenerateConditioningError, ValidationError

__all__ = [
    "ErtParams",
    "SurvivalForest",
    "fit_survival_forest",
    "predict_survival",
    "conditional_residual_survival",
    "sample_event_time",
    "kaplan_meier",
]


@dataclass(frozen=True)
class ErtParams:
    """Ensemble size, split candidates per node, events per leaf, time cap."""

    n_trees: int = 1000
    k_try: int = 3
    n_min: int = 6
    t_max: float = float("inf")
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.k_try < 1:
            raise ValidationError("k_try must be >= 1")
        if self.n_min < 1:
            raise ValidationError("n_min must be >= 1")
        if not self.t_max > 0:
            raise ValidationError("t_max must be positive")


@dataclass
class SurvivalForest:
    """Fitted ensemble; all arrays are read-only after construction."""

    grid: np.ndarray                 # shared event-time grid, capped at t_max
    n_features: int                  # p + 1 (treatment appended)
    t_max: float
    feat: np.ndarray                 # (M, max_nodes) int32, -1 marks a leaf
    thr: np.ndarray                  # (M, max_nodes) float64
    left: np.ndarray
    right: np.ndarray
    n_nodes: np.ndarray              # (M,) int64
    jump_off: np.ndarray             # (M, max_nodes) int64 into jump arrays
    jump_cnt: np.ndarray             # (M, max_nodes) int32
    jump_gidx: np.ndarray            # (total_jumps,) int32
    jump_val: np.ndarray             # (total_jumps,) float64
    params: ErtParams | None = None

    FORMAT_VERSION = 1

    @property
    def n_trees(self) -> int:
        return self.feat.shape[0]

    def survival_matrix(self, xw: np.ndarray) -> np.ndarray:
        """Ensemble survival values on the grid, one row per query row."""
        xw = np.ascontiguousarray(np.atleast_2d(xw), dtype=np.float64)
        if xw.shape[1] != self.n_features:
            raise ValidationError(
                f"query has {xw.shape[1]} columns, forest expects {self.n_features}"
            )
        out = np.empty((xw.shape[0], self.grid.size))
        K.ensemble_survival(xw, self.feat, self.thr, self.left, self.right,
                            self.jump_off, self.jump_cnt, self.jump_gidx,
                            self.jump_val, self.grid.size, out)
        return out

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            format_version=np.int64(self.FORMAT_VERSION),
            kind=np.array("survival_forest"),
            grid=self.grid, n_features=np.int64(self.n_features),
            t_max=np.float64(self.t_max),
            feat=self.feat, thr=self.thr, left=self.left, right=self.right,
            n_nodes=self.n_nodes, jump_off=self.jump_off, jump_cnt=self.jump_cnt,
            jump_gidx=self.jump_gidx, jump_val=self.jump_val,
        )

    @classmethod
    def load(cls, path) -> "SurvivalForest":
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != cls.FORMAT_VERSION:
                raise ValidationError(f"unsupported forest format in {path}")
            return cls(
                grid=z["grid"], n_features=int(z["n_features"]),
                t_max=float(z["t_max"]),
                feat=z["feat"], thr=z["thr"], left=z["left"], right=z["right"],
                n_nodes=z["n_nodes"], jump_off=z["jump_off"], jump_cnt=z["jump_cnt"],
                jump_gidx=z["jump_gidx"], jump_val=z["jump_val"],
            )


def effective_outcomes(time: np.ndarray, event: np.ndarray, t_max: float):
    """Cap times at t_max; units at or beyond the cap count as events there."""
    t_eff = np.minimum(time, t_max)
    d_eff = ((event == 1) | (time >= t_max)).astype(np.uint8)
    return t_eff.astype(np.float64), d_eff


def _event_grid(t_eff: np.ndarray, d_eff: np.ndarray, t_max: float) -> np.ndarray:
    pts = np.unique(t_eff[d_eff == 1])
    if np.isfinite(t_max) and (pts.size == 0 or pts[-1] < t_max):
        pts = np.append(pts, t_max)
    if pts.size == 0:
        pts = np.array([np.max(t_eff)]) if t_eff.size else np.array([0.0])
    return np.ascontiguousarray(pts, dtype=np.float64)


def fit_ensemble(xw: np.ndarray, T2: np.ndarray, D2: np.ndarray,
                 ds_of_tree: np.ndarray, grid: np.ndarray, k_try: int,
                 n_min: int, seeds: np.ndarray, t_max: float) -> SurvivalForest:
    """Low-level fit: M trees over a bank of complete or censored datasets.

    ``T2``/``D2`` hold one dataset per row; tree m trains on row
    ``ds_of_tree[m]``. Shared by the initial fit and the recursive refits.
    """
    n = xw.shape[0]
    m_trees = seeds.shape[0]
    max_events = int(D2.sum(axis=1).max())
    max_nodes = max(1, 2 * (max_events // max(n_min, 1)) + 1)
    max_nodes = min(max_nodes, 2 * n + 1)

    ORD0 = np.argsort(T2, axis=1, kind="stable").astype(np.int32)
    GIDX = np.searchsorted(grid, T2).astype(np.int32)
    GIDX = np.minimum(GIDX, grid.size - 1)

    feat = np.full((m_trees, max_nodes), -1, dtype=np.int32)
    thr = np.zeros((m_trees, max_nodes))
    left = np.full((m_trees, max_nodes), -1, dtype=np.int32)
    right = np.full((m_trees, max_nodes), -1, dtype=np.int32)
    start = np.zeros((m_trees, max_nodes), dtype=np.int32)
    end = np.zeros((m_trees, max_nodes), dtype=np.int32)
    order = np.empty((m_trees, n), dtype=np.int32)
    n_nodes = np.zeros(m_trees, dtype=np.int64)

    K.fit_survival_trees(xw, T2, D2, ORD0, ds_of_tree, k_try, n_min, seeds,
                         feat, thr, left, right, start, end, order, n_nodes)

    used = int(n_nodes.max())
    feat = np.ascontiguousarray(feat[:, :used])
    thr = np.ascontiguousarray(thr[:, :used])
    left = np.ascontiguousarray(left[:, :used])
    right = np.ascontiguousarray(right[:, :used])
    start = np.ascontiguousarray(start[:, :used])
    end = np.ascontiguousarray(end[:, :used])

    jumps_per_node = np.zeros((m_trees, used), dtype=np.int32)
    K.count_leaf_jumps(D2, GIDX, ds_of_tree, feat, start, end, order, n_nodes,
                       jumps_per_node)
    flat = jumps_per_node.ravel()
    jump_off = np.zeros(flat.size, dtype=np.int64)
    np.cumsum(flat[:-1], out=jump_off[1:])
    total = int(flat.sum())
    jump_off = jump_off.reshape(jumps_per_node.shape)
    jump_gidx = np.zeros(total, dtype=np.int32)
    jump_val = np.zeros(total)
    K.fill_leaf_km(T2, D2, GIDX, ds_of_tree, feat, start, end, order, n_nodes,
                   jump_off, jump_gidx, jump_val)

    forest = SurvivalForest(
        grid=grid, n_features=xw.shape[1], t_max=t_max,
        feat=feat, thr=thr, left=left, right=right, n_nodes=n_nodes,
        jump_off=jump_off, jump_cnt=jumps_per_node,
        jump_gidx=jump_gidx, jump_val=jump_val,
    )
    return forest


def fit_survival_forest(ds: SurvivalDataset, params: ErtParams) -> SurvivalForest:
    """Fit extremely randomized survival trees on (X, W) with the log-rank rule."""
    pf = ds.p + 1
    if params.k_try > pf:
        raise ValidationError(f"k_try={params.k_try} exceeds p+1={pf}")
    xw = np.ascontiguousarray(np.column_stack([ds.covariates, ds.treatment]))
    t_eff, d_eff = effective_outcomes(ds.time, ds.event, params.t_max)
    if int(d_eff.sum()) < params.n_min:
        raise ValidationError(
            f"only {int(d_eff.sum())} observed events; need at least n_min={params.n_min}"
        )
    grid = _event_grid(t_eff, d_eff, params.t_max)
    seeds = derive_tree_seeds(params.rng_seed, "survival-tree", params.n_trees)
    forest = fit_ensemble(
        xw, t_eff[None, :], D2=d_eff[None, :],
        ds_of_tree=np.zeros(params.n_trees, dtype=np.int64),
        grid=grid, k_try=params.k_try, n_min=params.n_min, seeds=seeds,
        t_max=params.t_max,
    )
    forest.params = params
    return forest


def predict_survival(forest: SurvivalForest, x: np.ndarray, w) -> SurvivalCurve:
    """Ensemble survival curve at covariates x under treatment arm w."""
    x = np.asarray(x, dtype=np.float64).ravel()
    row = np.append(x, float(w))
    values = forest.survival_matrix(row[None, :])[0]
    return SurvivalCurve(grid=forest.grid, values=np.minimum.accumulate(np.clip(values, 0.0, 1.0)))


def conditional_residual_survival(curve: SurvivalCurve, c: float) -> SurvivalCurve:
    """Survival of T given T > c: S(t)/S(c) restricted to t >= c."""
    s_c = curve(c)
    if s_c <= 0.0:
        raise DegenerateConditioningError(
            f"survival already zero at conditioning time {c}"
        )
    keep = curve.grid > c
    grid = np.concatenate([[c], curve.grid[keep]])
    values = np.concatenate([[1.0], np.clip(curve.values[keep] / s_c, 0.0, 1.0)])
    return SurvivalCurve(grid=grid, values=values)


def sample_event_time(residual: SurvivalCurve, t_max: float, rng: np.random.Generator) -> float:
    """Inverse-CDF draw from a residual curve, truncated at t_max.

    Mass remaining beyond t_max collapses to a point mass at t_max; the
    draw is always strictly greater than the conditioning point.
    """
    c = float(residual.grid[0])
    if t_max < c:
        raise ValidationError("t_max must be >= the conditioning point")
    u = rng.random()
    limit = int(np.searchsorted(residual.grid, t_max, side="right"))
    vals = residual.values[1:limit]
    # values are nonincreasing: the first index with S <= u ends the search
    rev = vals[::-1]
    k = vals.size - int(np.searchsorted(rev, u, side="right"))
    if k >= vals.size:
        return float(t_max)
    return float(residual.grid[1 + k])


def draw_imputed_times(s_mat: np.ndarray, c_times: np.ndarray, grid: np.ndarray,
                       t_max: float, u: np.ndarray):
    """Vectorized residual-distribution draws for a batch of censored units.

    ``s_mat[i]`` is unit i's ensemble survival on ``grid``; ``u[i]`` its
    uniform draws. A unit whose survival already hit zero at its censoring
    time falls back to t_max (the conservative cap) and is counted.

    Returns (times with shape of u, fallback_count).
    """
    n_c, n_draws = u.shape
    out = np.full((n_c, n_draws), t_max, dtype=np.float64)
    idx_c = np.searchsorted(grid, c_times, side="right") - 1
    s_c = np.where(idx_c >= 0, s_mat[np.arange(n_c), np.maximum(idx_c, 0)], 1.0)
    fallback = 0
    for i in range(n_c):
        if s_c[i] <= 0.0:
            fallback += 1
            continue  # all draws stay at t_max
        row = s_mat[i]
        first = idx_c[i] + 1
        if first >= grid.size:
            continue
        tail = row[first:]
        rev = tail[::-1]
        thresh = u[i] * s_c[i]
        k = tail.size - np.searchsorted(rev, thresh, side="right")
        hit = k < tail.size
        out[i, hit] = grid[first + k[hit]]
    return out, fallback


def kaplan_meier(times: np.ndarray, events: np.ndarray) -> SurvivalCurve:
    """Product-limit estimate of Pr(T > t) from right-censored data."""
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events)
    order = np.argsort(t, kind="stable")
    t, d = t[order], d[order]
    uniq, first = np.unique(t, return_index=True)
    n = t.size
    surv = []
    grid = []
    s = 1.0
    for k, tk in enumerate(uniq):
        stop = first[k + 1] if k + 1 < uniq.size else n
        d_k = int(d[first[k]:stop].sum())
        if d_k == 0:
            continue
        at_risk = n - first[k]
        s *= 1.0 - d_k / at_risk
        grid.append(tk)
        surv.append(s)
    if not grid:
        grid = [float(t.max()) if n else 0.0]
        surv = [1.0]
    return SurvivalCurve(grid=np.array(grid), values=np.array(surv))
