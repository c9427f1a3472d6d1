"""Feature extractor and softmax classification head.

The extractor is an MLP with maxout hidden layers (coordinate-wise max over
G affine groups) and an output layer whose units are either fixed absolute
values or the adaptive max(x, a*x) with one learnable slope per unit.  The
multinomial head keeps class 0 as a frozen pivot (zero weights and bias) to
remove the softmax shift indeterminacy.  Gradients are exact, with
deterministic subgradient choices at the piecewise-linear kinks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ABS = "abs"
ADAPTIVE = "adaptive"


@dataclass
class MaxoutLayer:
    weights: np.ndarray  # (G, width, fan_in)
    biases: np.ndarray  # (G, width)

    @property
    def n_groups(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]


@dataclass
class OutputLayer:
    weights: np.ndarray  # (m, fan_in)
    bias: np.ndarray  # (m,)
    slopes: np.ndarray | None = None  # (m,), adaptive activation only


@dataclass
class FeatureExtractorParams:
    hidden: list  # of MaxoutLayer
    output: OutputLayer
    activation: str = ABS

    @property
    def n_inputs(self) -> int:
        if self.hidden:
            return self.hidden[0].weights.shape[2]
        return self.output.weights.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.output.weights.shape[0]

    @property
    def depth(self) -> int:
        """Total affine layers, hidden plus output."""
        return len(self.hidden) + 1


@dataclass
class MlrParams:
    """Softmax head; column 0 of weights and biases[0] are a frozen pivot."""

    weights: np.ndarray  # (m, n_classes)
    biases: np.ndarray  # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


@dataclass
class TclModel:
    features: FeatureExtractorParams
    mlr: MlrParams


def _glorot(rng, shape):
    fan_out, fan_in = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(layer_sizes, n_classes, n_groups=2, activation=ABS, seed=None):
    """Initialize a TclModel with Glorot-uniform weights and zero biases.

    layer_sizes runs (input, hidden..., output); each hidden entry becomes a
    maxout layer with n_groups affine groups.  The pivot column of the head
    is zeroed.  Adaptive output slopes start at -1, which reproduces the
    absolute-value unit exactly.
    """
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs at least input and output widths")
    if n_groups < 2:
        raise ValueError("maxout needs at least 2 groups")
    if activation not in (ABS, ADAPTIVE):
        raise ValueError(f"unknown output activation {activation!r}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    hidden = []
    for fan_in, width in zip(layer_sizes[:-2], layer_sizes[1:-1]):
        hidden.append(
            MaxoutLayer(
                weights=_glorot(rng, (n_groups, width, fan_in)),
                biases=np.zeros((n_groups, width)),
            )
        )
    m, fan_in = layer_sizes[-1], layer_sizes[-2]
    output = OutputLayer(
        weights=_glorot(rng, (m, fan_in)),
        bias=np.zeros(m),
        slopes=-np.ones(m) if activation == ADAPTIVE else None,
    )
    mlr_weights = _glorot(rng, (m, n_classes))
    mlr_weights[:, 0] = 0.0
    mlr = MlrParams(weights=mlr_weights, biases=np.zeros(n_classes))
    return TclModel(FeatureExtractorParams(hidden, output, activation), mlr)


def named_parameters(model):
    """Canonically ordered dict of live parameter arrays."""
    params = {}
    for i, layer in enumerate(model.features.hidden):
        params[f"hidden{i}.weights"] = layer.weights
        params[f"hidden{i}.biases"] = layer.biases
    params["output.weights"] = model.features.output.weights
    params["output.bias"] = model.features.output.bias
    if model.features.output.slopes is not None:
        params["output.slopes"] = model.features.output.slopes
    params["mlr.weights"] = model.mlr.weights
    params["mlr.biases"] = model.mlr.biases
    return params


def clone_model(model):
    hidden = [
        MaxoutLayer(layer.weights.copy(), layer.biases.copy())
        for layer in model.features.hidden
    ]
    out = model.features.output
    output = OutputLayer(
        out.weights.copy(),
        out.bias.copy(),
        None if out.slopes is None else out.slopes.copy(),
    )
    features = FeatureExtractorParams(hidden, output, model.features.activation)
    mlr = MlrParams(model.mlr.weights.copy(), model.mlr.biases.copy())
    return TclModel(features, mlr)


def _as_batch(x, n_inputs):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != n_inputs:
        raise ValueError(
            f"input must be ({n_inputs}, batch), got shape {x.shape}"
        )
    return x


def features_forward(x, params, return_cache=False):
    """Evaluate the feature extractor column-wise on an (n, B) batch.

    With return_cache=True also returns the pre-activations and argmax
    routing needed by the backward pass.
    """
    x = _as_batch(x, params.n_inputs)
    cache = {"inputs": [], "argmax": [], "out_pre": None, "out_mask": None}
    y = x
    for layer in params.hidden:
        groups, width, fan_in = layer.weights.shape
        # (G, width, B) pre-activations for all groups in one matmul
        pre = (layer.weights.reshape(groups * width, fan_in) @ y).reshape(
            groups, width, -1
        ) + layer.biases[:, :, None]
        best = np.argmax(pre, axis=0)  # first max wins ties
        cache["inputs"].append(y)
        cache["argmax"].append(best)
        y = np.take_along_axis(pre, best[None], axis=0)[0]
    cache["inputs"].append(y)
    pre = params.output.weights @ y + params.output.bias[:, None]
    cache["out_pre"] = pre
    if params.activation == ABS:
        h = np.abs(pre)
    else:
        a = params.output.slopes[:, None]
        identity = pre >= a * pre  # ties route to the identity branch
        cache["out_mask"] = identity
        h = np.where(identity, pre, a * pre)
    if return_cache:
        return h, cache
    return h


def mlr_logits(h, mlr):
    return mlr.weights.T @ h + mlr.biases[:, None]


def mlr_posterior(h, mlr):
    """Class posterior (n_classes, B); softmax with the pivot logit at zero.

    Logits are shifted by their per-column max before exponentiation, so
    arbitrarily large finite logits cannot overflow.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    logits = mlr_logits(h, mlr)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits in posterior computation")
    shifted = logits - logits.max(axis=0, keepdims=True)
    expl = np.exp(shifted)
    return expl / expl.sum(axis=0, keepdims=True)


def _check_labels(labels, n_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ValueError(f"labels must have shape ({batch},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.intp)


def _l2_penalty(features, mlr, l2_weight):
    if l2_weight == 0.0:
        return 0.0
    total = sum(np.sum(layer.weights**2) for layer in features.hidden)
    total += np.sum(features.output.weights**2)
    total += np.sum(mlr.weights**2)
    return l2_weight * total


def tcl_loss(x, labels, features, mlr, l2_weight=0.0):
    """Mean negative log-posterior of the true labels plus the l2 penalty.

    The penalty covers weights only; biases (and adaptive slopes) are
    exempt.
    """
    h = features_forward(x, features)
    labels = _check_labels(labels, mlr.n_classes, h.shape[1])
    logits = mlr_logits(h, mlr)
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0))
    log_post = shifted[labels, np.arange(h.shape[1])] - log_norm
    return float(-log_post.mean() + _l2_penalty(features, mlr, l2_weight))


def tcl_gradients(x, labels, features, mlr, l2_weight=0.0):
    """Loss and exact gradients for every trainable parameter.

    Returns (loss, grads) where grads matches named_parameters.  Pivot-class
    entries get exactly zero gradient; maxout routes through the first
    maximal group; the absolute value uses subgradient 0 at the kink.
    """
    h, cache = features_forward(x, features, return_cache=True)
    batch = h.shape[1]
    labels = _check_labels(labels, mlr.n_classes, batch)

    logits = mlr_logits(h, mlr)
    shifted = logits - logits.max(axis=0, keepdims=True)
    expl = np.exp(shifted)
    posterior = expl / expl.sum(axis=0, keepdims=True)
    log_post = shifted[labels, np.arange(batch)] - np.log(expl.sum(axis=0))
    loss = float(-log_post.mean() + _l2_penalty(features, mlr, l2_weight))

    dlogits = posterior.copy()
    dlogits[labels, np.arange(batch)] -= 1.0
    dlogits /= batch

    grads = {}
    g_mlr_w = h @ dlogits.T + 2.0 * l2_weight * mlr.weights
    g_mlr_b = dlogits.sum(axis=1)
    g_mlr_w[:, 0] = 0.0  # frozen pivot
    g_mlr_b[0] = 0.0
    grads["mlr.weights"] = g_mlr_w
    grads["mlr.biases"] = g_mlr_b

    dh = mlr.weights @ dlogits
    pre = cache["out_pre"]
    if features.activation == ABS:
        dz = dh * np.sign(pre)
    else:
        a = features.output.slopes[:, None]
        mask = cache["out_mask"]
        dz = dh * np.where(mask, 1.0, a)
        grads["output.slopes"] = np.where(mask, 0.0, dh * pre).sum(axis=1)
    y = cache["inputs"][-1]
    grads["output.weights"] = dz @ y.T + 2.0 * l2_weight * features.output.weights
    grads["output.bias"] = dz.sum(axis=1)
    dy = features.output.weights.T @ dz

    for i in reversed(range(len(features.hidden))):
        layer = features.hidden[i]
        groups, width, fan_in = layer.weights.shape
        routed = np.zeros((groups, width, batch))
        np.put_along_axis(routed, cache["argmax"][i][None], dy[None], axis=0)
        inp = cache["inputs"][i]
        flat = routed.reshape(groups * width, batch)
        grads[f"hidden{i}.weights"] = (flat @ inp.T).reshape(
            groups, width, fan_in
        ) + 2.0 * l2_weight * layer.weights
        grads[f"hidden{i}.biases"] = routed.sum(axis=2)
        dy = layer.weights.reshape(groups * width, fan_in).T @ flat

    ordered = named_parameters(TclModel(features, mlr))
    return loss, {name: grads[name] for name in ordered}


def save_model(model, path):
    """Checkpoint directory: JSON header plus one flat float64 payload.

    Arrays are concatenated in named_parameters order, so reload is
    bit-exact.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = named_parameters(model)
    layer_sizes = [model.features.n_inputs]
    layer_sizes += [layer.width for layer in model.features.hidden]
    layer_sizes.append(model.features.n_outputs)
    header = {
        "layer_sizes": layer_sizes,
        "n_classes": model.mlr.n_classes,
        "n_groups": model.features.hidden[0].n_groups if model.features.hidden else 2,
        "activation": model.features.activation,
        "arrays": {name: list(arr.shape) for name, arr in params.items()},
    }
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    payload = np.concatenate([arr.ravel() for arr in params.values()])
    payload.astype("<f8").tofile(path / "weights.bin")


def load_model(path):
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    model = init_params(
        header["layer_sizes"],
        header["n_classes"],
        n_groups=header["n_groups"],
        activation=header["activation"],
        seed=0,
    )
    payload = np.fromfile(path / "weights.bin", dtype="<f8")
    offset = 0
    for name, arr in named_parameters(model).items():
        size = arr.size
        arr[...] = payload[offset : offset + size].reshape(arr.shape)
        offset += size
    if offset != payload.size:
        raise ValueError("checkpoint payload size does not match the header")
    return model
