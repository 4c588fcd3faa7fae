"""Fixed, dynamic and adaptive linear layers and their consolidation.

A :class:`DynamicLinear` (DCL) gates each of its output units with a
capacity fraction. An :class:`AdaptiveLinear` (ACL) reads the full-width
output of the DCL it is linked to; after training, :func:`consolidate`
drops low-capacity units from the DCL together with the matching ACL input
rows and folds the remaining gate scale into the weights, leaving only
:class:`FixedLinear` (FCL) layers.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gate import LAMBDA_MAX, GateState, gate_per_unit, update_sigma_ema
from .rng import RngStream

ACTIVATIONS = ("identity", "tanh", "sigmoid")
DEFAULT_THRESHOLD = 0.5


def _init_weight(rng: RngStream | None, in_dim: int, out_dim: int) -> np.ndarray:
    if rng is None:
        return np.zeros((in_dim, out_dim))
    bound = 1.0 / math.sqrt(in_dim)
    return (2.0 * rng.uniform((in_dim, out_dim)) - 1.0) * bound


def _check_activation(name: str) -> str:
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")
    return name


@dataclass(eq=False)
class FixedLinear:
    weight: Tensor
    bias: Tensor | None = None
    activation: str = "identity"

    kind = "FCL"

    @classmethod
    def create(cls, in_dim: int, out_dim: int, *, bias: bool = True, activation: str = "identity",
               rng: RngStream | None = None) -> FixedLinear:
        w = Tensor(_init_weight(rng and rng.child("w"), in_dim, out_dim), requires_grad=True, name="weight")
        b = Tensor(np.zeros(out_dim), requires_grad=True, name="bias") if bias else None
        return cls(w, b, _check_activation(activation))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass(eq=False)
class DynamicLinear(FixedLinear):
    gate: GateState = field(default=None)  # type: ignore[assignment]

    kind = "DCL"

    @classmethod
    def create(cls, in_dim: int, out_dim: int, *, bias: bool = False, activation: str = "identity",
               rng: RngStream | None = None, lambda_min: float = 0.0625, gate_mode: str = "per_unit") -> DynamicLinear:
        base = FixedLinear.create(in_dim, out_dim, bias=bias, activation=activation, rng=rng)
        gate = GateState(out_dim, lambda_min=lambda_min, mode=gate_mode)
        return cls(base.weight, base.bias, base.activation, gate)

    def __post_init__(self):
        if self.gate is None:
            self.gate = GateState(self.out_dim)
        if self.gate.width != self.out_dim:
            raise ad.ShapeError(f"gate width {self.gate.width} != layer width {self.out_dim}")


@dataclass(eq=False)
class AdaptiveLinear(FixedLinear):
    link: DynamicLinear = field(default=None)  # type: ignore[assignment]

    kind = "ACL"

    @classmethod
    def create(cls, link: DynamicLinear, out_dim: int, *, bias: bool = True, activation: str = "identity",
               rng: RngStream | None = None) -> AdaptiveLinear:
        base = FixedLinear.create(link.out_dim, out_dim, bias=bias, activation=activation, rng=rng)
        return cls(base.weight, base.bias, base.activation, link)


class ModelGraph:
    """Ordered chain of layers; each layer applies ``act(gate(x @ W + b))``."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._validate()

    def _validate(self) -> None:
        for i, layer in enumerate(self.layers):
            _check_activation(layer.activation)
            if i > 0 and layer.in_dim != self.layers[i - 1].out_dim:
                raise ad.ShapeError(
                    f"layer {i} expects width {layer.in_dim} but layer {i - 1} produces {self.layers[i - 1].out_dim}"
                )
            if isinstance(layer, AdaptiveLinear):
                if i == 0 or self.layers[i - 1] is not layer.link:
                    raise ValueError(f"adaptive layer {i} must follow the dynamic layer it links to")
            elif isinstance(layer, DynamicLinear) and i + 1 < len(self.layers):
                nxt = self.layers[i + 1]
                if not (isinstance(nxt, AdaptiveLinear) and nxt.link is layer):
                    raise ValueError(f"dynamic layer {i} must be followed by an adaptive layer linked to it")

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gates(self) -> list[GateState]:
        return [layer.gate for layer in self.layers if isinstance(layer, DynamicLinear)]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def _activate(h: Tensor, name: str) -> Tensor:
    if name == "tanh":
        return ad.tanh(h)
    if name == "sigmoid":
        return ad.sigmoid(h)
    return h


def forward(model: ModelGraph, x, training: bool = False, noise: RngStream | None = None, step: int = 0,
            track_sigma: bool = True) -> Tensor:
    """Run ``x`` (batch, in_dim) or (in_dim,) through the chain.

    In training mode gates inject noise addressed by ``(step, layer)`` from
    ``noise``; with ``noise=None`` they fall back to the noise-free path.
    ``track_sigma`` controls the per-unit feature-std update of each gate.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.shape[-1] != model.in_dim:
        raise ad.ShapeError(f"layer 0 expects width {model.in_dim}, input has shape {h.shape}")
    for i, layer in enumerate(model.layers):
        if h.shape[-1] != layer.in_dim:
            raise ad.ShapeError(f"layer {i} expects width {layer.in_dim}, got shape {h.shape}")
        h = ad.matmul(h, layer.weight)
        if layer.bias is not None:
            h = ad.add_row(h, layer.bias)
        if isinstance(layer, DynamicLinear):
            if training and track_sigma:
                update_sigma_ema(layer.gate, h)
            if training and noise is not None:
                h = gate_per_unit(h, layer.gate, noise.child("gate", i).at(step), training=True)
            else:
                h = gate_per_unit(h, layer.gate, training=False)
        h = _activate(h, layer.activation)
    return h


def active_units(layer: DynamicLinear, threshold: float = DEFAULT_THRESHOLD) -> int:
    return int(np.count_nonzero(layer.gate.values > threshold))


def _act0(name: str) -> float:
    return 0.5 if name == "sigmoid" else 0.0


def consolidate(model: ModelGraph, threshold: float = DEFAULT_THRESHOLD) -> ModelGraph:
    """Fixed-shape copy of ``model`` with gated units at or below ``threshold`` removed.

    Kept DCL columns (and bias entries) are scaled by ``sqrt(lam)``. A pruned
    unit is treated as silent; if its activation is nonzero at zero
    (sigmoid), that constant is folded into the linked layer's bias.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    out: list[FixedLinear] = []
    keep_prev: np.ndarray | None = None
    const_prev: np.ndarray | None = None
    for i, layer in enumerate(model.layers):
        W = layer.weight.numpy()
        b = layer.bias.numpy() if layer.bias is not None else None
        if isinstance(layer, AdaptiveLinear):
            assert keep_prev is not None
            if const_prev is not None and np.any(const_prev):
                shift = const_prev @ W
                b = shift if b is None else b + shift
            W = W[keep_prev]
        keep_prev, const_prev = None, None
        if isinstance(layer, DynamicLinear):
            lam = layer.gate.values
            keep = lam > threshold
            if not keep.any():
                raise ValueError(f"degenerate consolidation: every unit of layer {i} is pruned")
            s = np.sqrt(lam[keep])
            W = W[:, keep] * s
            if b is not None:
                b = b[keep] * s
            keep_prev = keep
            const_prev = np.where(keep, 0.0, _act0(layer.activation))
        out.append(
            FixedLinear(
                Tensor(W, requires_grad=True, name="weight"),
                None if b is None else Tensor(b, requires_grad=True, name="bias"),
                layer.activation,
            )
        )
    return ModelGraph(out)


# --------------------------------------------------------------------------
# serialization
#
# Little-endian container:
#   header  : 8s magic b"DYNCAPM\0", u32 version, u32 n_layers
#   per layer:
#     u8 kind (0 FCL, 1 DCL, 2 ACL), u8 activation (index into ACTIVATIONS),
#     u8 has_bias, u8 gate mode (0 per_unit, 1 ordered_K; 0 for non-DCL),
#     u32 in_dim, u32 out_dim, i32 link (-1 if none)
#     DCL only: f64 lambda_min, f64 lambda_max, f64[m] trainable fractions
#               (m = out for per_unit, 1 for ordered_K), f64[out] sigma_ema
#     f64[in*out] weight (row-major), then f64[out] bias if has_bias

MAGIC = b"DYNCAPM\x00"
FORMAT_VERSION = 1
_KINDS = {"FCL": 0, "DCL": 1, "ACL": 2}
_LAYER = struct.Struct("<BBBBIIi")
_GATE_MODES = ("per_unit", "ordered_K")


def dumps(model: ModelGraph) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(model.layers)))
    index = {id(layer): i for i, layer in enumerate(model.layers)}
    for layer in model.layers:
        link = index[id(layer.link)] if isinstance(layer, AdaptiveLinear) else -1
        mode = _GATE_MODES.index(layer.gate.mode) if isinstance(layer, DynamicLinear) else 0
        buf.write(_LAYER.pack(_KINDS[layer.kind], ACTIVATIONS.index(layer.activation), int(layer.has_bias), mode,
                              layer.in_dim, layer.out_dim, link))
        if isinstance(layer, DynamicLinear):
            g = layer.gate
            buf.write(struct.pack("<dd", g.lambda_min, g.lambda_max))
            buf.write(np.ascontiguousarray(g.lambdas.data, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(g.sigma_ema, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        if layer.bias is not None:
            buf.write(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> ModelGraph:
    try:
        return _loads(memoryview(blob))
    except (struct.error, IndexError) as exc:
        raise ValueError(f"corrupt model file: {exc}") from None


def _loads(view: memoryview) -> ModelGraph:
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a dyncap model file")
    version, n_layers = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    pos = 16

    def take(n: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return arr

    layers: list[FixedLinear] = []
    for _ in range(n_layers):
        kind, act, has_bias, mode, in_dim, out_dim, link = _LAYER.unpack_from(view, pos)
        pos += _LAYER.size
        gate = None
        if kind > 2:
            raise ValueError(f"unknown layer kind code {kind}")
        if kind == 1:
            lmin, lmax = struct.unpack_from("<dd", view, pos)
            pos += 16
            gate = GateState(out_dim, lambda_min=lmin, lambda_max=lmax, mode=_GATE_MODES[mode])
            gate.lambdas.assign(take(gate.lambdas.size))
            gate.sigma_ema = take(out_dim)
        w = Tensor(take(in_dim * out_dim).reshape(in_dim, out_dim), requires_grad=True, name="weight")
        b = Tensor(take(out_dim), requires_grad=True, name="bias") if has_bias else None
        activation = ACTIVATIONS[act]
        if kind == 0:
            layers.append(FixedLinear(w, b, activation))
        elif kind == 1:
            layers.append(DynamicLinear(w, b, activation, gate))
        else:
            layers.append(AdaptiveLinear(w, b, activation, layers[link]))
    if pos != len(view):
        raise ValueError(f"corrupt model file: {len(view) - pos} trailing bytes")
    return ModelGraph(layers)


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path) -> ModelGraph:
    return loads(Path(path).read_bytes())


def summary(model: ModelGraph, threshold: float = DEFAULT_THRESHOLD) -> str:
    lines = [f"{'#':>3}  {'kind':<4} {'in':>6} {'out':>6} {'bias':<5} {'activation':<10} {'params':>9}  gate"]
    for i, layer in enumerate(model.layers):
        gate = ""
        if isinstance(layer, DynamicLinear):
            lam = layer.gate.values
            gate = f"active={active_units(layer, threshold)}/{layer.out_dim} mean_lambda={lam.mean():.4f}"
        elif isinstance(layer, AdaptiveLinear):
            gate = f"linked to layer {model.layers.index(layer.link)}"
        n = sum(p.size for p in layer.parameters())
        lines.append(f"{i:>3}  {layer.kind:<4} {layer.in_dim:>6} {layer.out_dim:>6} {str(layer.has_bias):<5} "
                     f"{layer.activation:<10} {n:>9}  {gate}".rstrip())
    lines.append(f"total parameters: {model.n_params()}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ACTIVATIONS",
    "DEFAULT_THRESHOLD",
    "LAMBDA_MAX",
    "FixedLinear",
    "DynamicLinear",
    "AdaptiveLinear",
    "ModelGraph",
    "forward",
    "consolidate",
    "active_units",
    "dumps",
    "loads",
    "save_model",
    "load_model",
    "summary",
]
