"""Feed-forward ReLU classifier with explicit backpropagation, a convex
quadratic test problem, and the parameter snapshot file format.

Snapshot format (``zsharp-params``, version 1) is UTF-8 JSON::

    {"format": "zsharp-params", "version": 1,
     "tensors": [{"id": "fc1.weight", "shape": [2, 8], "values": [...]}, ...]}

``values`` are row-major; floats are written with Python's shortest
round-trip repr, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GradientSet, ParamSet, SeededRng, TensorSet, flatvec

SNAPSHOT_FORMAT = "zsharp-params"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_classes: int
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.n_classes)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.n_classes)

    def tensor_ids(self) -> tuple[str, ...]:
        ids = []
        for i in range(len(self.dims) - 1):
            ids += [f"fc{i + 1}.weight", f"fc{i + 1}.bias"]
        return tuple(ids)


def init_params(spec: MlpSpec) -> ParamSet:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases.

    Weights are stored as ``(fan_in, fan_out)`` so the forward pass is
    ``x @ W + b``.
    """
    rng = SeededRng(spec.seed)
    pairs = []
    dims = spec.dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(fan_in * fan_out, std=math.sqrt(2.0 / fan_in)).reshape(fan_in, fan_out)
        pairs.append((f"fc{i + 1}.weight", w))
        pairs.append((f"fc{i + 1}.bias", np.zeros(fan_out)))
    return TensorSet.from_pairs(pairs)


def _unpack(batch) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(batch, "features"):
        return batch.features, batch.labels
    x, y = batch
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _logits(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass; also returns the inputs of every affine layer."""
    ts = params.tensors
    n_layers = len(ts) // 2
    acts = []
    h = x
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_layers):
            acts.append(h)
            z = h @ ts[2 * i] + ts[2 * i + 1]
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return h, acts


def logits(params: ParamSet, x) -> np.ndarray:
    return _logits(params, np.asarray(x, dtype=np.float64))[0]


@dataclass
class Mlp:
    """Softmax cross-entropy classifier bound to an :class:`MlpSpec`."""

    spec: MlpSpec
    _ids: tuple[str, ...] = field(init=False, repr=False)

    def __post_init__(self):
        self._ids = self.spec.tensor_ids()

    def init_params(self) -> ParamSet:
        return init_params(self.spec)

    def loss_and_grad(self, params: ParamSet, batch) -> tuple[float, GradientSet]:
        """Mean cross-entropy over the batch and its gradient by backprop.

        Overflow is not warned about; a non-finite loss raises
        ``FloatingPointError`` and callers check the gradient.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            return self._loss_and_grad(params, batch)

    def _loss_and_grad(self, params: ParamSet, batch) -> tuple[float, GradientSet]:
        x, y = _unpack(batch)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        if x.shape[1] != self.spec.input_dim:
            raise ValueError(f"feature dim {x.shape[1]} != model input dim {self.spec.input_dim}")
        if params.ids != self._ids:
            raise ValueError("parameter ids do not match the model spec")
        out, acts = _logits(params, x)
        shifted = out - out.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        sum_exp = exp.sum(axis=1)
        rows = np.arange(n)
        loss = float(np.mean(np.log(sum_exp) - shifted[rows, y]))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite loss in forward pass")

        delta = exp / sum_exp[:, None]
        delta[rows, y] -= 1.0
        delta /= n

        ts = params.tensors
        n_layers = len(ts) // 2
        grads: list[np.ndarray] = [None] * len(ts)  # type: ignore[list-item]
        for i in reversed(range(n_layers)):
            a = acts[i]
            grads[2 * i] = a.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                # relu'(0) := 0; acts[i] == relu(z) so a > 0 is exactly z > 0
                delta = (delta @ ts[2 * i].T) * (a > 0.0)
        return loss, TensorSet(params.ids, tuple(grads))

    def loss(self, params: ParamSet, batch) -> float:
        x, y = _unpack(batch)
        out = _logits(params, x)[0]
        with np.errstate(over="ignore", invalid="ignore"):
            shifted = out - out.max(axis=1, keepdims=True)
            return float(np.mean(np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(len(y)), y]))


def predict(params: ParamSet, x) -> np.ndarray:
    """Argmax class per row; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(logits(params, x), axis=1)


def predict_accuracy(params: ParamSet, dataset) -> float:
    x, y = _unpack(dataset)
    if len(y) == 0:
        return 0.0
    return float(np.count_nonzero(predict(params, x) == y)) / len(y)


# -- analytic quadratic ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticProblem:
    """``L(w) = 0.5 * w^T A w`` with symmetric positive-definite ``A``."""

    A: np.ndarray
    beta: float = field(init=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(A).max()))):
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0.0:
            raise ValueError("A must be positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "beta", float(eig[-1]))

    @classmethod
    def diagonal(cls, diag) -> "QuadraticProblem":
        return cls(np.diag(np.asarray(diag, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def w_star(self) -> np.ndarray:
        return np.zeros(self.dim)

    def loss(self, w: np.ndarray) -> float:
        return 0.5 * float(w @ (self.A @ w))

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.A @ w


def quadratic_loss_grad(prob: QuadraticProblem, w) -> tuple[float, np.ndarray]:
    w = flatvec(w)
    if w.size != prob.dim:
        raise ValueError(f"w has dim {w.size}, problem has dim {prob.dim}")
    g = prob.A @ w
    return 0.5 * float(w @ g), g


@dataclass
class QuadraticModel:
    """Adapter so the quadratic plugs into ``sam_step`` (batch is ignored)."""

    prob: QuadraticProblem
    name: str = "w"

    def loss_and_grad(self, params: ParamSet, batch=None) -> tuple[float, GradientSet]:
        loss, g = quadratic_loss_grad(self.prob, params.flatten())
        return loss, params.unflatten(g)


# -- snapshots -------------------------------------------------------------


def save_params(params: ParamSet, path: str | Path) -> None:
    doc = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "tensors": [
            {"id": name, "shape": list(t.shape), "values": [float(v) for v in t.reshape(-1)]}
            for name, t in params
        ],
    }
    Path(path).write_text(json.dumps(doc, allow_nan=False) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> ParamSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ValueError("not a zsharp parameter snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    pairs = []
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        values = flatvec(entry["values"])
        if values.size != math.prod(shape):
            raise ValueError(f"tensor {entry['id']!r}: {values.size} values for shape {shape}")
        pairs.append((entry["id"], values.reshape(shape)))
    return TensorSet.from_pairs(pairs)
