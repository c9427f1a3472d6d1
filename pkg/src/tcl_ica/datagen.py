"""Nonstationary source generation and invertible nonlinear mixing.

Sources are drawn segment-wise from a variance-modulated family (Laplacian
or Gaussian), optionally standardized, and pushed through a stack of square
leaky-ReLU layers whose exact inverse is available for testing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LAPLACIAN = "laplacian"
GAUSSIAN = "gaussian"

_FLOAT = "<f8"  # little-endian float64, the on-disk matrix format


class RankCheckError(RuntimeError):
    """Differenced modulation matrix failed the full-column-rank check."""


class ConditioningError(RuntimeError):
    """A mixing layer could not be drawn within the condition bound."""


class SingularLayerError(RuntimeError):
    """A mixing layer turned out non-invertible during inversion."""


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class FamilySpec:
    """Scalar source family with a segment-modulated log-density term.

    The modulated term q is continuous, peaks at q(0) = 0, is even, and
    decays to -inf as |s| grows, so exp(lam * q) stays integrable for any
    positive modulation lam.
    """

    kind: str = LAPLACIAN

    def __post_init__(self):
        if self.kind not in (LAPLACIAN, GAUSSIAN):
            raise ValueError(f"unknown source family {self.kind!r}")

    def q(self, s):
        """Elementwise modulated function: -|s| (laplacian) or -s^2/2 (gaussian)."""
        s = np.asarray(s, dtype=float)
        if self.kind == LAPLACIAN:
            return -np.abs(s)
        return -0.5 * s * s


@dataclass(frozen=True)
class ModulationMatrix:
    """Per-segment positive modulation parameters, one column per component."""

    lambdas: np.ndarray  # (n_segments, n_components)

    @property
    def n_segments(self) -> int:
        return self.lambdas.shape[0]

    @property
    def n_components(self) -> int:
        return self.lambdas.shape[1]

    @property
    def differenced(self) -> np.ndarray:
        """Offsets from the first segment's parameters; first row is zero."""
        return self.lambdas - self.lambdas[0]

    def has_full_column_rank(self) -> bool:
        return np.linalg.matrix_rank(self.differenced) == self.n_components


@dataclass
class SourceTensor:
    """Ground-truth sources with their segment structure.

    values is (n_components, n_segments * seg_len); segment_of maps each
    time index to its 0-based segment label.  The trailing stationary_count
    components reuse the first segment's modulation in every segment.
    """

    values: np.ndarray
    seg_len: int
    segment_of: np.ndarray
    stationary_count: int = 0

    @property
    def n_components(self) -> int:
        return self.values.shape[0]

    @property
    def n_segments(self) -> int:
        return int(self.segment_of[-1]) + 1


@dataclass
class ObservationSeries:
    """Mixed observations plus the segment label of every sample."""

    values: np.ndarray  # (n, N)
    labels: np.ndarray  # (N,) 0-based segment indices
    n_segments: int

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


@dataclass
class MixingNetwork:
    """Stack of square affine layers with leaky-ReLU between them.

    The activation sits between layers (none after the last), so depth 1 is
    a plain linear map.  Each weight matrix is kept well conditioned, which
    makes the whole map bijective with an exact layer-by-layer inverse.
    """

    weights: list  # each (n, n)
    biases: list  # each (n,)
    leaky_slope: float = 0.2

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n(self) -> int:
        return self.weights[0].shape[0]


def leaky_relu(z, slope):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0.0, z, slope * z)


def leaky_relu_inverse(y, slope):
    y = np.asarray(y, dtype=float)
    return np.where(y >= 0.0, y, y / slope)


def sample_modulations(n, n_segments, lambda_min=0.1, seed=None, max_retries=50):
    """Draw per-segment modulation parameters uniformly from [lambda_min, 1].

    The differenced matrix must have full column rank for the separation
    theory to apply; draws failing the numerical rank check are rejected
    and resampled.  Rank n is only attainable with more segments than
    components, so the check is skipped (with a warning) when
    n_segments <= n.

    Parameters
    ----------
    n : int
        Number of source components.
    n_segments : int
        Number of segments (>= 2).
    lambda_min : float
        Positive lower clamp keeping the source variances bounded.
    seed : int, SeedSequence or None
    max_retries : int
        Draw budget before raising RankCheckError.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n_segments < 2:
        raise ValueError("n_segments must be >= 2")
    if not 0.0 < lambda_min < 1.0:
        raise ValueError("lambda_min must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    check_rank = n_segments > n
    if not check_rank:
        warnings.warn(
            f"n_segments={n_segments} <= n={n}: differenced modulations cannot "
            "reach full column rank; identifiability is not guaranteed",
            stacklevel=2,
        )
    for _ in range(max_retries):
        lam = rng.uniform(lambda_min, 1.0, size=(n_segments, n))
        mods = ModulationMatrix(lam)
        if not check_rank or mods.has_full_column_rank():
            return mods
    raise RankCheckError(
        f"differenced modulation matrix ({n_segments}x{n}) failed the "
        f"full-column-rank check in {max_retries} draws"
    )


def sample_sources(mods, family, seg_len, stationary_count=0, seed=None):
    """Sample segment-wise i.i.d. sources under the given family.

    Laplacian components in segment tau follow the double exponential with
    density proportional to exp(-lam * |s|) (scale 1/lam); Gaussian ones are
    zero-mean normal with precision lam.  The trailing stationary_count
    components reuse the first segment's lam throughout.
    """
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    n = mods.n_components
    if not 0 <= stationary_count < n:
        raise ValueError("stationary_count must lie in [0, n)")
    rng = np.random.default_rng(seed)
    lam = mods.lambdas.copy()
    if stationary_count:
        lam[:, n - stationary_count:] = lam[0, n - stationary_count:]
    n_segments = mods.n_segments
    values = np.empty((n, n_segments * seg_len))
    for tau in range(n_segments):
        block = slice(tau * seg_len, (tau + 1) * seg_len)
        if family.kind == LAPLACIAN:
            values[:, block] = rng.laplace(
                scale=1.0 / lam[tau][:, None], size=(n, seg_len)
            )
        else:
            values[:, block] = rng.normal(
                scale=1.0 / np.sqrt(lam[tau])[:, None], size=(n, seg_len)
            )
    segment_of = np.repeat(np.arange(n_segments), seg_len)
    return SourceTensor(values, seg_len, segment_of, stationary_count)


def standardize_sources(sources):
    """Rescale each component to unit variance over the whole series.

    Linear ICA is scale-blind, so the global per-component scale is
    arbitrary; fixing it keeps the mixing input well conditioned.
    """
    std = sources.values.std(axis=1, keepdims=True)
    if np.any(std == 0.0):
        raise ValueError("cannot standardize a constant source component")
    return SourceTensor(
        sources.values / std,
        sources.seg_len,
        sources.segment_of.copy(),
        sources.stationary_count,
    )


def build_mixing(n, depth, leaky_slope=0.2, cond_bound=1e4, seed=None, max_retries=50):
    """Draw an invertible mixing network of the given depth.

    Weights are uniform with Glorot scaling; any layer whose condition
    number exceeds cond_bound is redrawn.  Biases are zero.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not 0.0 < leaky_slope < 1.0:
        raise ValueError("leaky_slope must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (n + n))
    weights = []
    for layer in range(depth):
        for attempt in range(max_retries):
            w = rng.uniform(-bound, bound, size=(n, n))
            if np.linalg.cond(w) <= cond_bound:
                weights.append(w)
                break
        else:
            raise ConditioningError(
                f"mixing layer {layer} exceeded condition bound {cond_bound:g} "
                f"in {max_retries} draws"
            )
    biases = [np.zeros(n) for _ in range(depth)]
    return MixingNetwork(weights, biases, leaky_slope)


def mixing_forward(net, values):
    """Apply the mixing map column-wise to an (n, N) matrix."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != net.n:
        raise ValueError(
            f"input has {values.shape[0]} rows, mixing network expects {net.n}"
        )
    y = values
    last = net.depth - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        y = w @ y + b[:, None]
        if layer != last:
            y = leaky_relu(y, net.leaky_slope)
    return y


def apply_mixing(net, sources):
    """Mix a SourceTensor into an ObservationSeries, copying segment labels."""
    x = mixing_forward(net, sources.values)
    return ObservationSeries(x, sources.segment_of.copy(), sources.n_segments)


def invert_mixing(net, x):
    """Exact inverse of mixing_forward, layer by layer.

    Linear steps are undone by solving the square system; the leaky-ReLU
    steps coordinate-wise (divide negative coordinates by the slope).
    """
    y = np.asarray(x, dtype=float)
    if y.shape[0] != net.n:
        raise ValueError(
            f"input has {y.shape[0]} rows, mixing network expects {net.n}"
        )
    last = net.depth - 1
    for layer in reversed(range(net.depth)):
        if layer != last:
            y = leaky_relu_inverse(y, net.leaky_slope)
        try:
            y = np.linalg.solve(net.weights[layer], y - net.biases[layer][:, None])
        except np.linalg.LinAlgError as exc:
            raise SingularLayerError(f"mixing layer {layer} is singular") from exc
    return y


@dataclass
class GeneratedData:
    """One synthetic dataset: sources (as mixed), observations, and parameters."""

    sources: SourceTensor
    observations: ObservationSeries
    modulations: ModulationMatrix
    mixing: MixingNetwork | None
    family: FamilySpec
    seed: int | None = None


def make_dataset(
    n,
    n_segments,
    seg_len,
    depth,
    family=None,
    lambda_min=0.1,
    leaky_slope=0.2,
    cond_bound=1e4,
    stationary_count=0,
    seed=None,
):
    """Generate a full dataset: modulations -> sources -> standardize -> mix.

    All randomness is derived from a single seed, so identical arguments
    reproduce the dataset bit for bit.
    """
    family = family or FamilySpec(LAPLACIAN)
    ss = _seed_sequence(seed)
    mod_seed, src_seed, mix_seed = ss.spawn(3)
    mods = sample_modulations(n, n_segments, lambda_min, seed=mod_seed)
    raw = sample_sources(mods, family, seg_len, stationary_count, seed=src_seed)
    sources = standardize_sources(raw)
    net = build_mixing(n, depth, leaky_slope, cond_bound, seed=mix_seed)
    obs = apply_mixing(net, sources)
    return GeneratedData(
        sources, obs, mods, net, family, seed if isinstance(seed, int) else None
    )


def save_dataset(data, path):
    """Write a dataset directory: JSON header plus flat float64 matrices."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "n": data.sources.n_components,
        "n_segments": data.sources.n_segments,
        "seg_len": data.sources.seg_len,
        "stationary_count": data.sources.stationary_count,
        "depth": data.mixing.depth if data.mixing is not None else None,
        "leaky_slope": data.mixing.leaky_slope if data.mixing is not None else None,
        "family": data.family.kind,
        "seed": data.seed,
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    data.sources.values.astype(_FLOAT).tofile(path / "sources.bin")
    data.observations.values.astype(_FLOAT).tofile(path / "observations.bin")
    data.modulations.lambdas.astype(_FLOAT).tofile(path / "lambdas.bin")


def load_dataset(path):
    """Inverse of save_dataset.  The mixing network is not persisted."""
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    n = header["n"]
    n_segments = header["n_segments"]
    seg_len = header["seg_len"]
    n_samples = n_segments * seg_len
    sources = np.fromfile(path / "sources.bin", dtype=_FLOAT).reshape(n, n_samples)
    observations = np.fromfile(path / "observations.bin", dtype=_FLOAT).reshape(
        n, n_samples
    )
    lambdas = np.fromfile(path / "lambdas.bin", dtype=_FLOAT).reshape(n_segments, n)
    segment_of = np.repeat(np.arange(n_segments), seg_len)
    return GeneratedData(
        sources=SourceTensor(
            sources, seg_len, segment_of, header.get("stationary_count", 0)
        ),
        observations=ObservationSeries(observations, segment_of.copy(), n_segments),
        modulations=ModulationMatrix(lambdas),
        mixing=None,
        family=FamilySpec(header["family"]),
        seed=header.get("seed"),
    )
