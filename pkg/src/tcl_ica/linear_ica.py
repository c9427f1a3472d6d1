"""Linear ICA stage: whitening, symmetric FastICA, and a
nonstationarity-of-variance baseline via orthogonal joint diagonalization
of per-segment covariances.

FastICA follows the fixed-point scheme of Hyvarinen (1999) with symmetric
orthogonalization; the joint diagonalizer uses Jacobi rotations as in
Cardoso & Souloumiac (1996).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DegenerateCovarianceError(RuntimeError):
    """Covariance too close to singular for a stable whitening transform."""


# E[G(nu)] for nu ~ N(0,1) with G = log cosh and G = y^4/4; used by the
# negentropy proxy that ranks restarts.
_GAUSS_LOGCOSH = 0.3745672075
_GAUSS_QUARTIC = 0.75


@dataclass
class WhiteningTransform:
    """Affine map to zero mean and identity covariance, with its inverse."""

    mean: np.ndarray  # (m,)
    matrix: np.ndarray  # (m, m)
    inverse: np.ndarray  # (m, m) dewhitening

    def apply(self, x):
        return self.matrix @ (np.asarray(x, dtype=float) - self.mean[:, None])

    def unapply(self, z):
        return self.inverse @ np.asarray(z, dtype=float) + self.mean[:, None]


@dataclass
class IcaConfig:
    nonlinearity: str = "logcosh"  # or "cube"
    tol: float = 1e-4
    max_iter: int = 200
    restarts: int = 5
    seed: int | None = 0

    def __post_init__(self):
        if self.nonlinearity not in ("logcosh", "cube"):
            raise ValueError(f"unknown contrast {self.nonlinearity!r}")
        if self.tol <= 0 or self.max_iter < 1 or self.restarts < 1:
            raise ValueError("tol, max_iter and restarts must be positive")


@dataclass
class IcaResult:
    unmixing: np.ndarray  # (m, m) orthogonal, acts on whitened data
    components: np.ndarray  # (m, N) unit-variance rows
    iterations: int
    converged: bool
    whitening: WhiteningTransform | None = None
    diagnostics: dict = field(default_factory=dict)


def whiten(data, eig_floor=1e-12):
    """Whiten an (m, N) matrix; returns (WhiteningTransform, whitened data).

    Covariance is the population (divide by N) second moment about the
    mean.  Eigenvalues below eig_floor times the largest one indicate a
    rank-deficient covariance and raise DegenerateCovarianceError.
    """
    data = np.asarray(data, dtype=float)
    m, n_samples = data.shape
    if n_samples <= m:
        raise ValueError("need more samples than dimensions to whiten")
    mean = data.mean(axis=1)
    centered = data - mean[:, None]
    cov = centered @ centered.T / n_samples
    eigvals, eigvecs = np.linalg.eigh(cov)
    bad = eigvals < eig_floor * eigvals.max()
    if np.any(bad):
        raise DegenerateCovarianceError(
            f"covariance eigenvalues {eigvals[bad].tolist()} at positions "
            f"{np.flatnonzero(bad).tolist()} are below the floor"
        )
    matrix = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    inverse = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    transform = WhiteningTransform(mean, matrix, inverse)
    return transform, matrix @ centered


def _sym_orth(w):
    """Symmetric orthogonalization: (W W^T)^(-1/2) W."""
    vals, vecs = np.linalg.eigh(w @ w.T)
    return (vecs / np.sqrt(vals)) @ vecs.T @ w


def _contrast(name):
    if name == "logcosh":
        def g(y):
            gy = np.tanh(y)
            return gy, 1.0 - gy**2
        return g, lambda y: np.log(np.cosh(y)), _GAUSS_LOGCOSH
    def g(y):
        return y**3, 3.0 * y**2
    return g, lambda y: 0.25 * y**4, _GAUSS_QUARTIC


def fastica(data, cfg=None):
    """Symmetric fixed-point ICA on internally whitened data.

    Runs cfg.restarts seeded attempts; converged ones are preferred, and
    among those the attempt with the lowest objective (negative summed
    squared negentropy proxy) wins, ties broken by restart index.  If no
    attempt converges the best is still returned, flagged converged=False.
    """
    cfg = cfg or IcaConfig()
    transform, z = whiten(data)
    m = z.shape[0]
    n_samples = z.shape[1]
    g, big_g, gauss_ref = _contrast(cfg.nonlinearity)

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    attempts = []
    for restart, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        w, _ = np.linalg.qr(rng.standard_normal((m, m)))
        converged = False
        iterations = cfg.max_iter
        for iteration in range(1, cfg.max_iter + 1):
            y = w @ z
            gy, gprime = g(y)
            w_new = gy @ z.T / n_samples - np.diag(gprime.mean(axis=1)) @ w
            w_new = _sym_orth(w_new)
            drift = np.min(np.abs(np.diag(w_new @ w.T)))
            w = w_new
            if drift > 1.0 - cfg.tol:
                converged = True
                iterations = iteration
                break
        proxy = (big_g(w @ z).mean(axis=1) - gauss_ref) ** 2
        objective = -float(proxy.sum())
        attempts.append((not converged, objective, restart, w, iterations))

    attempts.sort(key=lambda t: t[:3])
    failed, objective, _, w, iterations = attempts[0]
    components = w @ z
    return IcaResult(
        unmixing=w,
        components=components,
        iterations=iterations,
        converged=not failed,
        whitening=transform,
        diagnostics={
            "objective": objective,
            "restarts_converged": sum(1 for a in attempts if not a[0]),
        },
    )


def joint_diagonalize(matrices, threshold=1e-8, max_sweeps=100):
    """Orthogonal joint diagonalizer of a stack of symmetric matrices.

    Jacobi sweeps choose, for every index pair, the rotation angle that
    minimizes the summed squared off-diagonals of the whole stack; sweeps
    stop once every rotation sine falls below `threshold`.

    Returns (V, objective_history) with the rotated stack satisfying
    D_k = V^T A_k V; objective_history[0] is the initial off-diagonal mass
    and one entry is appended per sweep, non-increasing throughout.
    """
    stack = np.array(matrices, dtype=float)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ValueError("expected a stack of square matrices")
    m = stack.shape[1]
    v = np.eye(m)

    def off_mass(a):
        return float(np.sum(a**2) - np.sum(np.einsum("kii->ki", a) ** 2))

    history = [off_mass(stack)]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                d_pq = stack[:, p, p] - stack[:, q, q]
                o_pq = stack[:, p, q] + stack[:, q, p]
                ton = d_pq @ d_pq - o_pq @ o_pq
                toff = 2.0 * (d_pq @ o_pq)
                theta = 0.5 * np.arctan2(
                    toff, ton + np.hypot(ton, toff)
                )
                c, s = np.cos(theta), np.sin(theta)
                if abs(s) <= threshold:
                    continue
                rotated = True
                rot = np.array([[c, -s], [s, c]])
                stack[:, :, [p, q]] = stack[:, :, [p, q]] @ rot
                stack[:, [p, q], :] = np.einsum(
                    "ij,kjn->kin", rot.T, stack[:, [p, q], :]
                )
                v[:, [p, q]] = v[:, [p, q]] @ rot
        history.append(off_mass(stack))
        if not rotated:
            break
    return v, history


def nsvica(data, segment_of, threshold=1e-8, max_sweeps=100):
    """Separate a linear mixture by nonstationarity of variance.

    Whitens globally, forms per-segment second-moment matrices, and finds
    one orthogonal matrix jointly diagonalizing them.  Components are the
    rotated whitened signals.  A vanishing spread of the segment
    covariances means there is no nonstationarity to exploit; this is
    reported in diagnostics and warned about.
    """
    data = np.asarray(data, dtype=float)
    segment_of = np.asarray(segment_of)
    m = data.shape[0]
    segments = np.unique(segment_of)
    if len(segments) < 2:
        raise ValueError("need at least 2 segments")
    transform, z = whiten(data)
    covs = []
    for tau in segments:
        block = z[:, segment_of == tau]
        if block.shape[1] <= m:
            raise DegenerateCovarianceError(
                f"segment {tau} has {block.shape[1]} samples for {m} dimensions"
            )
        covs.append(block @ block.T / block.shape[1])
    covs = np.array(covs)
    spread = float(np.mean(np.linalg.norm(covs - covs.mean(axis=0), axis=(1, 2))))
    if spread < 1e-8:
        warnings.warn(
            "segment covariances are numerically equal; rotation is arbitrary",
            stacklevel=2,
        )
    v, history = joint_diagonalize(covs, threshold=threshold, max_sweeps=max_sweeps)
    unmixing = v.T
    return IcaResult(
        unmixing=unmixing,
        components=unmixing @ z,
        iterations=len(history) - 1,
        converged=len(history) - 1 < max_sweeps,
        whitening=transform,
        diagnostics={
            "objective_history": history,
            "covariance_spread": spread,
        },
    )


def save_ica_result(result, path, method=None):
    """Persist a result directory: JSON header plus flat float64 matrices."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "rows": result.components.shape[0],
        "cols": result.components.shape[1],
        "iterations": result.iterations,
        "converged": result.converged,
        "method": method,
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    result.components.astype("<f8").tofile(path / "components.bin")
    result.unmixing.astype("<f8").tofile(path / "unmixing.bin")


def load_ica_components(path):
    """Load (components, header) written by save_ica_result."""
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    components = np.fromfile(path / "components.bin", dtype="<f8").reshape(
        header["rows"], header["cols"]
    )
    return components, header


def amari_index(p):
    """Normalized cross-talk score of a performance matrix, in [0, 1].

    Zero iff p is a scaled permutation; invariant to row/column permutation
    and sign or scale changes.  The all-equal matrix attains 1.
    """
    p = np.abs(np.asarray(p, dtype=float))
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("performance matrix must be square")
    m = p.shape[0]
    row_max = p.max(axis=1)
    col_max = p.max(axis=0)
    if np.any(row_max == 0.0) or np.any(col_max == 0.0):
        raise ValueError("performance matrix has an all-zero row or column")
    if m == 1:
        return 0.0
    rows = (p / row_max[:, None]).sum(axis=1) - 1.0
    cols = (p / col_max[None, :]).sum(axis=0) - 1.0
    return float((rows.sum() + cols.sum()) / (2.0 * m * (m - 1)))
