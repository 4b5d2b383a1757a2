"""Downstream models with exact forward passes and Jacobian oracles.

Two model families are supported: an affine map (OLS regression or a
softmax linear classifier head) and a two-hidden-layer MLP. Models are
trained on public data only and are immutable afterwards; ``forward``
and ``jacobian`` are pure functions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import DivergenceError, SingularSystemError
from .linalg import _as_matrix, sym_eig

__all__ = [
    "LinearModel",
    "MlpModel",
    "fit_ols",
    "train_classifier",
    "jacobian",
    "decompose_row_null",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
    "model_hash",
]

# Allowed epoch-over-epoch loss increase, relative to the initial loss.
# Fixed-step mini-batch descent oscillates near convergence, more so on
# non-smooth (ReLU) losses.
TRAIN_LOSS_TOLERANCE = 0.05

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    # Subgradient at the kink fixed to 0 for deterministic Jacobians.
    return (x > 0.0).astype(np.float64)


def _gelu(x):
    return x * ndtr(x)


def _gelu_grad(x):
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "gelu": (_gelu, _gelu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def _softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class LinearModel:
    """Affine map z -> W z + b with constant Jacobian W."""

    weights: np.ndarray  # (l, m)
    bias: np.ndarray  # (l,)
    loss_history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def input_dim(self):
        return self.weights.shape[1]

    @property
    def output_dim(self):
        return self.weights.shape[0]

    def forward(self, z):
        return self.weights @ np.asarray(z, dtype=np.float64) + self.bias

    def forward_batch(self, x):
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias

    def predict_labels(self, x):
        return np.argmax(self.forward_batch(x), axis=1)


@dataclass
class MlpModel:
    """Two-hidden-layer perceptron m -> h1 -> h2 -> l."""

    weights: list  # [(h1, m), (h2, h1), (l, h2)]
    biases: list  # [(h1,), (h2,), (l,)]
    activation: str
    loss_history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for w_out, w_in in zip(self.weights[1:], self.weights[:-1]):
            if w_out.shape[1] != w_in.shape[0]:
                raise ValueError("consecutive layer dimensions disagree")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    def _trace(self, z):
        """Forward pass keeping pre-activations for Jacobian chains."""
        act, _ = ACTIVATIONS[self.activation]
        a1 = self.weights[0] @ z + self.biases[0]
        a2 = self.weights[1] @ act(a1) + self.biases[1]
        logits = self.weights[2] @ act(a2) + self.biases[2]
        return logits, (a1, a2)

    def forward(self, z):
        return self._trace(np.asarray(z, dtype=np.float64))[0]

    def forward_batch(self, x):
        act, _ = ACTIVATIONS[self.activation]
        x = np.asarray(x, dtype=np.float64)
        h1 = act(x @ self.weights[0].T + self.biases[0])
        h2 = act(h1 @ self.weights[1].T + self.biases[1])
        return h2 @ self.weights[2].T + self.biases[2]

    def predict_labels(self, x):
        return np.argmax(self.forward_batch(x), axis=1)

    def pre_activations(self, z):
        return self._trace(np.asarray(z, dtype=np.float64))[1]


def jacobian(model, z, mode="logits"):
    """Exact reverse-mode Jacobian of the model outputs at ``z``.

    For classifiers the default differentiates the logits; pass
    ``mode="softmax"`` to differentiate the post-softmax probabilities
    instead.

    Args:
        model: LinearModel or MlpModel.
        z: Input vector of length ``model.input_dim``.
        mode: "logits" or "softmax".

    Returns:
        Matrix (l, m) of partial derivatives.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != model.input_dim:
        raise ValueError(
            f"input has shape {z.shape}, expected ({model.input_dim},)"
        )
    if not np.all(np.isfinite(z)):
        raise ValueError("input contains non-finite entries")
    if isinstance(model, LinearModel):
        jac = model.weights.copy()
    else:
        _, act_grad = ACTIVATIONS[model.activation]
        a1, a2 = model.pre_activations(z)
        inner = model.weights[1] @ (act_grad(a1)[:, None] * model.weights[0])
        jac = model.weights[2] @ (act_grad(a2)[:, None] * inner)
    if mode == "softmax":
        p = _softmax(model.forward(z))
        jac = (np.diag(p) - np.outer(p, p)) @ jac
    elif mode != "logits":
        raise ValueError(f"unknown jacobian mode {mode!r}")
    return jac


def fit_ols(x, y):
    """Least-squares affine fit via normal equations.

    The Gram system is solved through the symmetric eigendecomposition
    kernel, which doubles as a pseudo-solve when conditioning is poor.

    Args:
        x: Features (n, m) with n > m.
        y: Targets (n,).

    Returns:
        LinearModel with weights (1, m) and scalar bias.

    Raises:
        SingularSystemError: If the design matrix (with intercept) is
            numerically rank deficient; carries a condition estimate.
    """
    x = _as_matrix(x, "X")
    y = np.asarray(y, dtype=np.float64)
    n, m = x.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite entries")
    if n <= m:
        raise ValueError(f"need n > m rows, got n={n}, m={m}")
    design = np.hstack([x, np.ones((n, 1))])
    gram = design.T @ design
    eig = sym_eig(gram, rel_tol=1e-8)
    d = eig.eigenvalues
    if d[-1] <= d[0] * 1e-12:
        cond = np.inf if d[-1] <= 0 else float(d[0] / d[-1])
        raise SingularSystemError(
            f"design matrix numerically rank deficient (condition ~ {cond:.3e})",
            condition=cond,
        )
    rhs = design.T @ y
    beta = eig.eigenvectors @ ((eig.eigenvectors.T @ rhs) / d)
    return LinearModel(weights=beta[:m].reshape(1, m), bias=beta[m:].copy())


def _init_mlp(input_dim, hidden, n_classes, activation, rng):
    dims = [input_dim, hidden[0], hidden[1], n_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _cross_entropy(logits, labels):
    p = _softmax(logits)
    n = logits.shape[0]
    return float(-np.mean(np.log(p[np.arange(n), labels] + 1e-300)))


def train_classifier(
    x,
    labels,
    arch="linear",
    hidden=(10, 32),
    activation="relu",
    step_size=0.1,
    epochs=200,
    batch_size=32,
    seed=0,
):
    """Train a softmax classifier by mini-batch gradient descent.

    Plain fixed-step SGD; the recorded epoch losses (full-batch
    cross-entropy) are expected to be non-increasing up to
    TRAIN_LOSS_TOLERANCE relative slack. Deterministic given ``seed``.

    Args:
        x: Features (n, m).
        labels: Integer class ids in [0, n_classes).
        arch: "linear" or "mlp".
        hidden: (h1, h2) widths for the MLP arch.
        activation: MLP activation name.
        step_size, epochs, batch_size, seed: SGD hyperparameters.

    Returns:
        LinearModel or MlpModel with ``loss_history`` populated.

    Raises:
        ValueError: Fewer than two classes, or a class id out of range.
        DivergenceError: Non-finite loss during training.
    """
    x = _as_matrix(x, "X")
    labels = np.asarray(labels)
    n, m = x.shape
    if labels.shape != (n,):
        raise ValueError(f"labels have shape {labels.shape}, expected ({n},)")
    labels = labels.astype(np.int64)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("need at least two distinct classes")
    if present[0] < 0:
        raise ValueError("labels must be non-negative class ids")
    if present.size != n_classes:
        raise ValueError("every class id in [0, max] must be present")

    rng = np.random.default_rng(seed)
    if arch == "linear":
        weights = [rng.normal(0.0, 0.01, size=(n_classes, m))]
        biases = [np.zeros(n_classes)]
        act = act_grad = None
    elif arch == "mlp":
        weights, biases = _init_mlp(m, hidden, n_classes, activation, rng)
        act, act_grad = ACTIVATIONS[activation]
    else:
        raise ValueError(f"unknown arch {arch!r}")

    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0

    def full_logits():
        h = x
        for w, b in zip(weights[:-1], biases[:-1]):
            h = act(h @ w.T + b)
        return h @ weights[-1].T + biases[-1]

    losses = [_cross_entropy(full_logits(), labels)]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            xb, tb = x[idx], onehot[idx]
            # Forward with cached pre-activations.
            pre, hidden_out = [], [xb]
            h = xb
            for w, b in zip(weights[:-1], biases[:-1]):
                a = h @ w.T + b
                pre.append(a)
                h = act(a)
                hidden_out.append(h)
            logits = h @ weights[-1].T + biases[-1]
            delta = (_softmax(logits) - tb) / len(idx)
            # Backward, last layer first.
            grads_w = [delta.T @ hidden_out[-1]]
            grads_b = [delta.sum(axis=0)]
            for layer in range(len(weights) - 2, -1, -1):
                delta = (delta @ weights[layer + 1]) * act_grad(pre[layer])
                grads_w.append(delta.T @ hidden_out[layer])
                grads_b.append(delta.sum(axis=0))
            grads_w.reverse()
            grads_b.reverse()
            for w, b, gw, gb in zip(weights, biases, grads_w, grads_b):
                w -= step_size * gw
                b -= step_size * gb
        loss = _cross_entropy(full_logits(), labels)
        if not np.isfinite(loss):
            raise DivergenceError(
                "training loss diverged; try a smaller step size"
            )
        losses.append(loss)

    if arch == "linear":
        model = LinearModel(weights=weights[0], bias=biases[0])
    else:
        model = MlpModel(weights=weights, biases=biases, activation=activation)
    model.loss_history = losses
    return model


def decompose_row_null(w, z):
    """Split z into its row-space and null-space components w.r.t. W.

    Returns (z_r, z_n) with z = z_r + z_n, z_r in Row(W), W z_n = 0.
    """
    w = _as_matrix(w, "W")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != w.shape[1]:
        raise ValueError(f"z has shape {z.shape}, expected ({w.shape[1]},)")
    singular = np.linalg.svd(w, compute_uv=False)
    if singular[0] == 0.0:
        raise ValueError("W must be nonzero")
    _, s, vt = np.linalg.svd(w)
    rank = int(np.sum(s > s[0] * 1e-10))
    row_basis = vt[:rank]
    z_r = row_basis.T @ (row_basis @ z)
    return z_r, z - z_r


def model_to_dict(model):
    if isinstance(model, LinearModel):
        return {
            "kind": "linear",
            "input_dim": model.input_dim,
            "output_dim": model.output_dim,
            "weights": model.weights.tolist(),
            "bias": model.bias.tolist(),
        }
    if isinstance(model, MlpModel):
        return {
            "kind": "mlp",
            "activation": model.activation,
            "input_dim": model.input_dim,
            "output_dim": model.output_dim,
            "weights": [w.tolist() for w in model.weights],
            "biases": [b.tolist() for b in model.biases],
        }
    raise ValueError(f"unsupported model type {type(model).__name__}")


def model_from_dict(doc):
    if doc["kind"] == "linear":
        return LinearModel(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=np.asarray(doc["bias"], dtype=np.float64),
        )
    if doc["kind"] == "mlp":
        return MlpModel(
            weights=[np.asarray(w, dtype=np.float64) for w in doc["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in doc["biases"]],
            activation=doc["activation"],
        )
    raise ValueError(f"unknown model kind {doc.get('kind')!r}")


def save_model(model, path):
    """Write the model as JSON with exact-round-trip decimal floats."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def model_hash(model):
    """Stable SHA-256 of the model's canonical JSON serialization."""
    payload = json.dumps(model_to_dict(model), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
