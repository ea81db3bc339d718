"""Dense networks over a flat parameter vector.

A network's parameters live in one float64 vector; :class:`ParamLayout` maps each
``(layer, kind)`` pair to a contiguous slice of it. Gradients are produced in the same
layout, so optimizers, checkpoints and finite-difference checks all work on flat arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import GdaFlowError
from .tensor import Tensor, relu, sigmoid, softplus, tanh

Activation = Literal["tanh", "softplus", "relu", "identity"]

_BN_EPS = 1e-5


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    width: int = Field(gt=0)
    activation: Activation = "tanh"


class MlpSpec(BaseModel):
    """Architecture of a fully connected network."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(gt=0)
    hidden: tuple[LayerSpec, ...] = ()
    output_dim: int = Field(gt=0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    output_activation: Activation = "identity"
    # both act after the last hidden layer; off unless asked for
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_norm: bool = False

    @classmethod
    def build(
        cls,
        input_dim: int,
        widths: tuple[int, ...] | list[int],
        output_dim: int,
        activation: Activation = "tanh",
        **kwargs: Any,
    ) -> MlpSpec:
        hidden = tuple(LayerSpec(width=w, activation=activation) for w in widths)
        return cls(input_dim=input_dim, hidden=hidden, output_dim=output_dim, **kwargs)

    @property
    def dense_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *(layer.width for layer in self.hidden), self.output_dim]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


@dataclass(frozen=True)
class ParamSlot:
    layer: str
    kind: str
    shape: tuple[int, ...]
    start: int
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class ParamLayout:
    slots: tuple[ParamSlot, ...]

    @property
    def size(self) -> int:
        return self.slots[-1].stop if self.slots else 0

    def slot(self, layer: str, kind: str) -> ParamSlot:
        for slot in self.slots:
            if slot.layer == layer and slot.kind == kind:
                return slot
        raise GdaFlowError(
            f"No parameter slot {layer}.{kind}",
            code="NOT_FOUND",
            context={"layer": layer, "kind": kind},
        )

    def has(self, layer: str, kind: str) -> bool:
        return any(s.layer == layer and s.kind == kind for s in self.slots)

    def locate(self, flat_index: int) -> tuple[str, str, tuple[int, ...]]:
        """Map a flat coordinate to ``(layer, kind, index-within-slot)``."""

        for slot in self.slots:
            if slot.start <= flat_index < slot.stop:
                local = np.unravel_index(flat_index - slot.start, slot.shape)
                return slot.layer, slot.kind, tuple(int(i) for i in local)
        raise GdaFlowError(
            "flat index out of range",
            code="INVALID_INPUT",
            context={"index": flat_index, "size": self.size},
        )

    def flat_index(self, layer: str, kind: str, index: tuple[int, ...]) -> int:
        slot = self.slot(layer, kind)
        return slot.start + int(np.ravel_multi_index(index, slot.shape))

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.size)
        for slot in self.slots:
            if slot.trainable:
                mask[slot.start : slot.stop] = 1.0
        return mask

    def shifted(self, prefix: str, offset: int) -> ParamLayout:
        return ParamLayout(
            tuple(
                ParamSlot(f"{prefix}{s.layer}", s.kind, s.shape, s.start + offset, s.trainable)
                for s in self.slots
            )
        )

    @staticmethod
    def join(*parts: tuple[str, ParamLayout]) -> ParamLayout:
        slots: list[ParamSlot] = []
        offset = 0
        for prefix, layout in parts:
            slots.extend(layout.shifted(prefix, offset).slots)
            offset += layout.size
        return ParamLayout(tuple(slots))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter values plus the layout that names their slices."""

    values: np.ndarray
    layout: ParamLayout = field(repr=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.shape[0] != self.layout.size:
            raise GdaFlowError(
                "parameter vector length does not match its layout",
                code="SHAPE_MISMATCH",
                context={"expected": self.layout.size, "got": list(values.shape)},
            )
        if not np.all(np.isfinite(values)):
            raise GdaFlowError("parameter vector contains non-finite values", code="NON_FINITE")

    def __len__(self) -> int:
        return self.values.shape[0]

    def view(self, layer: str, kind: str) -> np.ndarray:
        slot = self.layout.slot(layer, kind)
        return self.values[slot.start : slot.stop].reshape(slot.shape)

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self.values.copy(), requires_grad=requires_grad)


def mlp_layout(spec: MlpSpec) -> ParamLayout:
    slots: list[ParamSlot] = []
    offset = 0

    def add(layer: str, kind: str, shape: tuple[int, ...], trainable: bool = True) -> None:
        nonlocal offset
        slot = ParamSlot(layer, kind, shape, offset, trainable)
        slots.append(slot)
        offset = slot.stop

    for i, (fan_out, fan_in) in enumerate(spec.dense_shapes):
        add(f"dense{i}", "weight", (fan_out, fan_in))
        add(f"dense{i}", "bias", (fan_out,))
    if spec.batch_norm and spec.hidden:
        width = spec.hidden[-1].width
        add("norm", "scale", (width,))
        add("norm", "shift", (width,))
        add("norm", "running_mean", (width,), trainable=False)
        add("norm", "running_var", (width,), trainable=False)
    return ParamLayout(tuple(slots))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Scaled-normal weights (He for relu, LeCun otherwise), zero biases."""

    layout = mlp_layout(spec)
    values = np.zeros(layout.size)
    activations = [layer.activation for layer in spec.hidden] + [spec.output_activation]
    for i, (fan_out, fan_in) in enumerate(spec.dense_shapes):
        gain = 2.0 if activations[i] == "relu" else 1.0
        slot = layout.slot(f"dense{i}", "weight")
        values[slot.start : slot.stop] = rng.normal(0.0, np.sqrt(gain / fan_in), slot.size)
    if layout.has("norm", "scale"):
        for kind in ("scale", "running_var"):
            slot = layout.slot("norm", kind)
            values[slot.start : slot.stop] = 1.0
    return ParamVector(values, layout)


@dataclass(frozen=True)
class DenseWeights:
    weight: Tensor
    weight_t: Tensor
    bias: Tensor


def unpack(spec: MlpSpec, params: ParamVector | Tensor, offset: int = 0) -> list[DenseWeights]:
    """Slice the flat vector into per-layer tensors once per objective evaluation.

    ``offset`` locates this network inside a larger vector (one block of a flow).
    """

    layout = mlp_layout(spec)
    if isinstance(params, ParamVector):
        if offset == 0:
            _check_layout(spec, params)
        flat = params.tensor()
    else:
        flat = params
    layers = []
    for i in range(len(spec.dense_shapes)):
        w_slot = layout.slot(f"dense{i}", "weight")
        b_slot = layout.slot(f"dense{i}", "bias")
        weight = flat[offset + w_slot.start : offset + w_slot.stop].reshape(*w_slot.shape)
        bias = flat[offset + b_slot.start : offset + b_slot.stop]
        layers.append(DenseWeights(weight=weight, weight_t=weight.T, bias=bias))
    return layers


def _check_layout(spec: MlpSpec, params: ParamVector) -> None:
    expected = mlp_layout(spec)
    if params.layout != expected:
        raise GdaFlowError(
            "parameter layout does not match the network spec",
            code="SHAPE_MISMATCH",
            context={"expected_size": expected.size, "got_size": params.layout.size},
        )


def activate(name: Activation, a: Tensor) -> Tensor:
    if name == "tanh":
        return tanh(a)
    if name == "softplus":
        return softplus(a)
    if name == "relu":
        return relu(a)
    return a


def activation_slope(name: Activation, a: Tensor, out: Tensor) -> Tensor | None:
    """Derivative of the activation at ``a`` as a differentiable tensor (None means 1)."""

    if name == "tanh":
        return 1.0 - out * out
    if name == "softplus":
        return sigmoid(a)
    if name == "relu":
        return Tensor((a.data > 0).astype(np.float64))
    return None


def _as_batch(spec: MlpSpec, x: Tensor | np.ndarray) -> tuple[Tensor, bool]:
    x = Tensor.lift(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise GdaFlowError(
            f"input has shape {list(x.shape)}, network expects {spec.input_dim} features",
            code="SHAPE_MISMATCH",
            context={"expected": spec.input_dim, "got": list(x.shape)},
        )
    return x, single


def mlp_forward(
    spec: MlpSpec,
    params: ParamVector | Tensor,
    x: Tensor | np.ndarray,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    batch_stats: dict[str, np.ndarray] | None = None,
) -> Tensor:
    """Evaluate the network on a vector ``(input_dim,)`` or a batch ``(B, input_dim)``.

    In training mode dropout draws its mask from ``rng`` and batch normalization uses the
    batch moments, which are written into ``batch_stats`` for the caller's running update.
    """

    h, single = _as_batch(spec, x)
    layers = unpack(spec, params)
    for i, layer in enumerate(spec.hidden):
        h = activate(layer.activation, h @ layers[i].weight_t + layers[i].bias)
    if spec.hidden and spec.batch_norm:
        h = _batch_norm(spec, params, h, training, batch_stats)
    if spec.hidden and spec.dropout > 0.0 and training:
        if rng is None:
            raise GdaFlowError("dropout in training mode needs an rng", code="INVALID_INPUT")
        keep = (rng.random(h.shape) >= spec.dropout).astype(np.float64)
        h = h * (keep / (1.0 - spec.dropout))
    out = activate(spec.output_activation, h @ layers[-1].weight_t + layers[-1].bias)
    return out.reshape(-1) if single else out


def _batch_norm(
    spec: MlpSpec,
    params: ParamVector | Tensor,
    h: Tensor,
    training: bool,
    batch_stats: dict[str, np.ndarray] | None,
) -> Tensor:
    layout = mlp_layout(spec)
    flat = params.tensor() if isinstance(params, ParamVector) else params
    scale_slot = layout.slot("norm", "scale")
    shift_slot = layout.slot("norm", "shift")
    scale = flat[scale_slot.start : scale_slot.stop]
    shift = flat[shift_slot.start : shift_slot.stop]
    if training and h.shape[0] > 1:
        mean = h.mean(axis=0, keepdims=True)
        centered = h - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        if batch_stats is not None:
            batch_stats["mean"] = mean.data.reshape(-1).copy()
            batch_stats["var"] = var.data.reshape(-1).copy()
        normed = centered / ((var + _BN_EPS) ** 0.5)
    else:
        raw = flat.data
        mean_slot = layout.slot("norm", "running_mean")
        var_slot = layout.slot("norm", "running_var")
        running_mean = raw[mean_slot.start : mean_slot.stop]
        running_var = raw[var_slot.start : var_slot.stop]
        normed = (h - running_mean) / np.sqrt(running_var + _BN_EPS)
    return normed * scale + shift


def dense_forward(spec: MlpSpec, layers: list[DenseWeights], x: Tensor) -> Tensor:
    """Plain forward pass over pre-sliced weights (no normalization, no dropout)."""

    activations = [layer.activation for layer in spec.hidden] + [spec.output_activation]
    h = x
    for name, layer in zip(activations, layers, strict=True):
        h = activate(name, h @ layer.weight_t + layer.bias)
    return h


def mlp_jvp(
    spec: MlpSpec,
    layers: list[DenseWeights],
    x: Tensor,
    n_directions: int,
) -> tuple[Tensor, Tensor]:
    """Forward pass plus the Jacobian columns for the first ``n_directions`` inputs.

    Returns ``(y, J)`` with ``y`` of shape ``(B, output_dim)`` and ``J[b, :, i]`` equal to
    ``d y_b / d x_b[i]``. Both are differentiable with respect to the weights.
    """

    if spec.batch_norm or spec.dropout > 0.0:
        raise GdaFlowError(
            "Jacobian propagation supports plain dense networks only", code="INVALID_INPUT"
        )
    activations = [layer.activation for layer in spec.hidden] + [spec.output_activation]
    h = x
    jac: Tensor | None = None
    for i, layer in enumerate(layers):
        a = h @ layer.weight_t + layer.bias
        jac = layer.weight[:, :n_directions] if jac is None else layer.weight @ jac
        h = activate(activations[i], a)
        slope = activation_slope(activations[i], a, h)
        if slope is not None:
            jac = slope.reshape(slope.shape[0], slope.shape[1], 1) * jac
    assert jac is not None
    if jac.ndim == 2:
        jac = Tensor(np.zeros((x.shape[0], 1, 1))) + jac
    return h, jac


__all__ = [
    "Activation",
    "DenseWeights",
    "LayerSpec",
    "MlpSpec",
    "ParamLayout",
    "ParamSlot",
    "ParamVector",
    "activate",
    "activation_slope",
    "dense_forward",
    "init_params",
    "mlp_forward",
    "mlp_jvp",
    "mlp_layout",
    "unpack",
]
