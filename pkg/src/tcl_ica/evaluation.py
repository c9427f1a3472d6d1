"""Source-recovery evaluation: correlation matching and the affine
identifiability check.

Estimated components are matched to ground truth by maximizing total
absolute Pearson correlation with an exact assignment solve, so the score
is blind to the permutation and sign indeterminacies of ICA.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class EvalReport:
    """Per-run evaluation summary.

    classification fields are None for methods without a classifier;
    affine fields are None when the learned features were not evaluated.
    """

    mean_abs_corr: float
    per_component_corr: list
    assignment: list
    classification_accuracy: float | None = None
    chance_level: float | None = None
    affine_r2: list | None = None
    affine_cond: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class AffineCheck:
    r2: np.ndarray  # (n,) coefficient of determination per component
    matrix: np.ndarray  # (n, m) fitted linear map, intercept excluded
    intercept: np.ndarray  # (n,)
    cond: float  # condition number of the fitted map


def true_q_values(sources, family):
    """Modulated-function values of the true sources, standardized per row.

    Correlation is shift/scale invariant, so each row is centered and
    scaled to unit variance.
    """
    q = family.q(sources.values)
    q = q - q.mean(axis=1, keepdims=True)
    std = q.std(axis=1)
    if np.any(std == 0.0):
        raise ValueError("a q row is constant; cannot standardize")
    return q / std[:, None]


def _abs_corr_matrix(truth, est):
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    tc = truth - truth.mean(axis=1, keepdims=True)
    ec = est - est.mean(axis=1, keepdims=True)
    tn = np.linalg.norm(tc, axis=1)
    en = np.linalg.norm(ec, axis=1)
    bad_t, bad_e = tn == 0.0, en == 0.0
    if np.any(bad_t) or np.any(bad_e):
        warnings.warn(
            "constant rows have undefined correlation; treating them as 0",
            stacklevel=3,
        )
        tn = np.where(bad_t, 1.0, tn)
        en = np.where(bad_e, 1.0, en)
    corr = (tc / tn[:, None]) @ (ec / en[:, None]).T
    corr[bad_t, :] = 0.0
    corr[:, bad_e] = 0.0
    return np.abs(corr)


def match_components(truth, est):
    """Match estimates to true components by maximum-weight assignment.

    Builds the absolute Pearson correlation matrix and solves the
    assignment exactly (Hungarian method).  Returns (assignment, matched)
    where assignment[i] is the estimate row paired with truth row i and
    matched[i] its absolute correlation.
    """
    truth = np.asarray(truth, dtype=float)
    est = np.asarray(est, dtype=float)
    if truth.shape[1] != est.shape[1]:
        raise ValueError("truth and estimates must share the sample axis")
    if truth.shape[1] < 3:
        raise ValueError("need at least 3 samples for a meaningful correlation")
    weights = _abs_corr_matrix(truth, est)
    rows, cols = linear_sum_assignment(-weights)
    assignment = np.full(truth.shape[0], -1, dtype=int)
    assignment[rows] = cols
    matched = weights[rows, cols]
    return assignment, matched


def mean_abs_corr(truth, est):
    """Mean matched absolute correlation, the headline recovery score."""
    _, matched = match_components(truth, est)
    return float(matched.mean())


def affine_identifiability_check(q_true, h):
    """Least-squares fit of each true q row onto the learned features.

    Regresses q_true on [h; 1] and reports per-component R-squared plus the
    condition number of the fitted linear map; R-squared near one for every
    component certifies that the features span the q values up to an
    invertible affine transformation.
    """
    q_true = np.asarray(q_true, dtype=float)
    h = np.asarray(h, dtype=float)
    if q_true.shape[1] != h.shape[1]:
        raise ValueError("q_true and h must share the sample axis")
    n, n_samples = q_true.shape
    m = h.shape[0]
    if n_samples <= m + 1:
        raise ValueError("need more samples than features plus intercept")
    design = np.vstack([h, np.ones(n_samples)]).T  # (N, m+1)
    coef, _, rank, _ = np.linalg.lstsq(design, q_true.T, rcond=None)
    if rank < m + 1:
        raise ValueError(
            f"regressor matrix is rank deficient (rank {rank} < {m + 1})"
        )
    residual = q_true.T - design @ coef
    ss_res = np.sum(residual**2, axis=0)
    centered = q_true - q_true.mean(axis=1, keepdims=True)
    ss_tot = np.sum(centered**2, axis=1)
    r2 = 1.0 - ss_res / ss_tot
    matrix = coef[:m].T
    return AffineCheck(
        r2=r2,
        matrix=matrix,
        intercept=coef[m].copy(),
        cond=float(np.linalg.cond(matrix)),
    )


def save_report(report, path):
    Path(path).write_text(report.to_json())


def load_report(path):
    return EvalReport.from_json(Path(path).read_text())
