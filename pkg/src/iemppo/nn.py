"""Small dense tanh networks with exact backprop, Adam, and portable checkpoints.

Everything here is float64 numpy.  Inputs may be a single vector ``(in,)`` or a
batch ``(N, in)``; batched backward passes return gradients *summed* over rows,
so a caller minimizing a mean loss scales its output gradient by ``1/N``.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CheckpointError, NonFiniteError, ShapeError

_ACTIVATIONS = {"tanh", "identity"}
_FORMAT = "iemppo-params/1"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ShapeError(f"all layer widths must be >= 1, got {dims}")
        if self.hidden_activation not in _ACTIVATIONS or self.output_activation not in _ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.hidden_activation!r}/{self.output_activation!r}"
            )

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """``(fan_in, fan_out)`` for every dense layer, input side first."""
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            int(d["input_dim"]),
            tuple(d["hidden_dims"]),
            int(d["output_dim"]),
            d.get("hidden_activation", "tanh"),
            d.get("output_activation", "identity"),
        )


class ParamSet:
    """Ordered ``(W, b)`` pairs; ``W`` has shape ``(out, in)``.

    All arrays are views into one contiguous ``flat`` buffer, which is what
    the optimizer and serializer operate on.
    """

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
        shapes = [(np.shape(w), np.shape(b)) for w, b in layers]
        flat = np.concatenate(
            [np.asarray(a, dtype=np.float64).ravel() for wb in layers for a in wb]
        ) if layers else np.zeros(0)
        self._bind(flat, shapes)

    def _bind(self, flat: np.ndarray, shapes) -> None:
        self.flat = flat
        self.shapes = shapes = tuple((tuple(ws), tuple(bs)) for ws, bs in shapes)
        self.layers: list[tuple[np.ndarray, np.ndarray]] = [
            (flat[p:p + nw].reshape(ws), flat[p + nw:p + nw + nb].reshape(bs))
            for ws, bs, p, nw, nb in _layout(shapes)
        ]

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes) -> "ParamSet":
        obj = cls.__new__(cls)
        obj._bind(flat, shapes)
        return obj

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ParamSet":
        it = iter(arrays)
        return cls([(w, next(it)) for w in it])

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def zeros_like(self) -> "ParamSet":
        return ParamSet.from_flat(np.zeros_like(self.flat), self.shapes)

    def copy(self) -> "ParamSet":
        return ParamSet.from_flat(self.flat.copy(), self.shapes)

    @property
    def size(self) -> int:
        return self.flat.size

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamSet) and self.shapes == other.shapes
                and np.array_equal(self.flat, other.flat))

    def __repr__(self) -> str:
        return f"ParamSet(shapes={self.shapes})"

    def check(self, spec: MlpSpec) -> None:
        if len(self.layers) != len(spec.layer_dims):
            raise ShapeError(f"expected {len(spec.layer_dims)} layers, got {len(self.layers)}")
        for i, ((w, b), (fan_in, fan_out)) in enumerate(zip(self.layers, spec.layer_dims)):
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeError(
                    f"layer {i}: expected W{(fan_out, fan_in)} b{(fan_out,)}, "
                    f"got W{w.shape} b{b.shape}"
                )


@functools.lru_cache(maxsize=None)
def _layout(shapes) -> tuple:
    out, pos = [], 0
    for ws, bs in shapes:
        nw, nb = math.prod(ws), math.prod(bs)
        out.append((ws, bs, pos, nw, nb))
        pos += nw + nb
    return tuple(out)


def _array_name(k: int) -> str:
    return f"layer {k // 2} {'weight' if k % 2 == 0 else 'bias'}"


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for fan_in, fan_out in spec.layer_dims:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ParamSet(layers)


def _trace(spec: MlpSpec, params: ParamSet, x: np.ndarray) -> list[np.ndarray]:
    """Forward pass returning every layer's post-activation, input first."""
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        if h.shape[-1] != w.shape[1]:
            raise ShapeError(f"layer {i}: expected input width {w.shape[1]}, got {h.shape[-1]}")
        h = h @ w.T + b
        if (spec.output_activation if i == last else spec.hidden_activation) == "tanh":
            np.tanh(h, out=h)
        acts.append(h)
    return acts


def mlp_forward(spec: MlpSpec, params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"layer 0: expected input width {spec.input_dim}, got {x.shape[-1]}")
    return _trace(spec, params, x)[-1]


def mlp_backward(
    spec: MlpSpec,
    params: ParamSet,
    x,
    output_grad,
    trace: list[np.ndarray] | None = None,
    input_grad: bool = True,
) -> tuple[ParamSet, np.ndarray | None]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

    ``trace`` may carry the activations from an earlier ``_trace`` call on the
    same ``x`` to skip recomputing the forward pass.  With ``input_grad=False``
    the input gradient is skipped and returned as None.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape[-1] != spec.output_dim or g.ndim != x.ndim:
        raise ShapeError(f"output_grad shape {g.shape} does not match output dim {spec.output_dim}")
    if trace is None:
        trace = _trace(spec, params, x)
    grads = params.zeros_like()
    batched = x.ndim == 2
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        act = spec.output_activation if i == last else spec.hidden_activation
        if act == "tanh":
            out = trace[i + 1]
            g = g - g * out * out
        gw, gb = grads.layers[i]
        if batched:
            np.dot(g.T, trace[i], out=gw)
            np.sum(g, axis=0, out=gb)
        else:
            np.outer(g, trace[i], out=gw)
            gb[:] = g
        if i > 0 or input_grad:
            g = g @ params.layers[i][0]
    return grads, (g if input_grad else None)


@dataclass
class AdamState:
    """Adam moments, stored flat in the same layout as ``ParamSet.flat``."""

    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: ParamSet, learning_rate: float, **kw) -> "AdamState":
        return cls(learning_rate, np.zeros_like(params.flat), np.zeros_like(params.flat), **kw)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam descent step.  Inputs are left untouched."""
    if grads.shapes != params.shapes:
        raise ShapeError(f"gradient layout {grads.shapes} does not match {params.shapes}")
    g = grads.flat
    if not np.isfinite(g).all():
        for k, a in enumerate(grads.arrays()):
            if not np.isfinite(a).all():
                raise NonFiniteError(f"non-finite gradient in {_array_name(k)}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = state.first_moment * b1
    m += (1.0 - b1) * g
    v = g * g
    v *= 1.0 - b2
    v += b2 * state.second_moment
    # lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections folded in
    denom = v * (1.0 / (1.0 - b2**t))
    np.sqrt(denom, out=denom)
    denom += state.epsilon
    step = np.divide(m, denom, out=denom)
    step *= state.learning_rate / (1.0 - b1**t)
    new_params = ParamSet.from_flat(params.flat - step, params.shapes)
    return new_params, AdamState(state.learning_rate, m, v, t, b1, b2, state.epsilon)


# -- checkpoints -------------------------------------------------------------


def params_to_dict(params: ParamSet, spec: MlpSpec) -> dict:
    params.check(spec)
    layers = []
    for w, b in params.layers:
        layers.append({
            "shape": list(w.shape),
            "w": [float(v).hex() for v in w.ravel()],
            "b": [float(v).hex() for v in b],
            "w_decimal": [repr(float(v)) for v in w.ravel()],
            "b_decimal": [repr(float(v)) for v in b],
        })
    return {"format": _FORMAT, "spec": spec.to_dict(), "layers": layers}


def params_from_dict(doc: dict, spec: MlpSpec | None = None) -> tuple[MlpSpec, ParamSet]:
    try:
        if doc.get("format") != _FORMAT:
            raise CheckpointError(f"unsupported format {doc.get('format')!r}")
        stored = MlpSpec.from_dict(doc["spec"])
        layers = []
        for entry, (fan_in, fan_out) in zip(doc["layers"], stored.layer_dims):
            w = np.array([float.fromhex(s) for s in entry["w"]], dtype=np.float64)
            b = np.array([float.fromhex(s) for s in entry["b"]], dtype=np.float64)
            if w.size != fan_in * fan_out or b.size != fan_out:
                raise CheckpointError(f"layer array sizes do not match spec {stored}")
            layers.append((w.reshape(fan_out, fan_in), b))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"corrupt parameter document: {exc}") from exc
    params = ParamSet(layers)
    try:
        params.check(stored)
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc
    if spec is not None and spec != stored:
        raise CheckpointError(f"document spec {stored} does not match expected {spec}")
    if not all(np.isfinite(a).all() for a in params.arrays()):
        raise CheckpointError("parameter document contains non-finite values")
    return stored, params


def save_params(params: ParamSet, spec: MlpSpec) -> bytes:
    return json.dumps(params_to_dict(params, spec), indent=1).encode("utf-8")


def load_params(doc: bytes | str, spec: MlpSpec | None = None) -> tuple[MlpSpec, ParamSet]:
    try:
        parsed = json.loads(doc)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"not a parameter document: {exc}") from exc
    if not isinstance(parsed, dict):
        raise CheckpointError("parameter document must be a mapping")
    return params_from_dict(parsed, spec)
