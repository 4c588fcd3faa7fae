"""Parameter and FLOP accounting for linear layer chains.

One multiply-accumulate counts as 2 FLOPs; a bias add counts 1 FLOP per
output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .layers import DEFAULT_THRESHOLD, AdaptiveLinear, DynamicLinear, FixedLinear, ModelGraph, active_units

DEFAULT_FRAME_RATE = 62.5  # 16 kHz audio, 256-sample hop

HEADER_NOTE = "FLOP convention: 1 MAC = 2 FLOPs (multiply + accumulate); bias add = 1 FLOP per output"


@dataclass(frozen=True)
class LayerProfile:
    name: str
    in_dim: int
    out_dim: int
    params: int
    flops_per_frame: int


@dataclass
class ProfileReport:
    layers: list[LayerProfile] = field(default_factory=list)
    frame_rate: float = DEFAULT_FRAME_RATE

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.layers)

    @property
    def flops_per_frame(self) -> int:
        return sum(e.flops_per_frame for e in self.layers)

    @property
    def flops_per_second(self) -> float:
        return self.flops_per_frame * self.frame_rate

    def table(self) -> str:
        rows = [(e.name, e.in_dim, e.out_dim, e.params, e.flops_per_frame) for e in self.layers]
        rows.append(("total", "", "", self.total_params, self.flops_per_frame))
        lines = [HEADER_NOTE, f"frame rate: {self.frame_rate:g} frames/s",
                 f"{'layer':<12}{'in':>8}{'out':>8}{'params':>12}{'FLOP/frame':>14}"]
        lines += [f"{n:<12}{i:>8}{o:>8}{p:>12}{f:>14}" for n, i, o, p, f in rows]
        lines.append(f"FLOP/s: {self.flops_per_second:.1f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "in_dim", "out_dim", "params", "flops_per_frame", "flops_per_second"])
            for e in self.layers:
                w.writerow([e.name, e.in_dim, e.out_dim, e.params, e.flops_per_frame,
                            repr(e.flops_per_frame * self.frame_rate)])
            w.writerow(["total", "", "", self.total_params, self.flops_per_frame, repr(self.flops_per_second)])


def linear_cost(in_dim, out_dim, bias: bool):
    params = in_dim * out_dim + (out_dim if bias else 0)
    flops = 2 * in_dim * out_dim + (out_dim if bias else 0)
    return params, flops


def profile(model: ModelGraph, frame_rate: float = DEFAULT_FRAME_RATE, threshold: float | None = None) -> ProfileReport:
    """Static cost of ``model``.

    Gated layers count at full width unless ``threshold`` is given, in which
    case each DCL (and the ACL linked to it) counts only its active units.
    """
    report = ProfileReport(frame_rate=frame_rate)
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, FixedLinear):
            raise TypeError(f"cannot profile layer {i} of type {type(layer).__name__}")
        in_dim, out_dim = layer.in_dim, layer.out_dim
        if threshold is not None:
            if isinstance(layer, DynamicLinear):
                out_dim = active_units(layer, threshold)
            if isinstance(layer, AdaptiveLinear):
                in_dim = active_units(layer.link, threshold)
        params, flops = linear_cost(in_dim, out_dim, layer.has_bias)
        report.layers.append(LayerProfile(f"{i}:{layer.kind}", in_dim, out_dim, params, flops))
    return report


def effective_flops(model: ModelGraph) -> float:
    """FLOPs per frame with each gated unit weighted by its capacity fraction."""
    total = 0.0
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, FixedLinear):
            raise TypeError(f"cannot profile layer {i} of type {type(layer).__name__}")
        in_dim, out_dim = float(layer.in_dim), float(layer.out_dim)
        if isinstance(layer, DynamicLinear):
            out_dim = float(layer.gate.values.sum())
        if isinstance(layer, AdaptiveLinear):
            in_dim = float(layer.link.gate.values.sum())
        total += 2.0 * in_dim * out_dim + (out_dim if layer.has_bias else 0.0)
    return total


__all__ = [
    "DEFAULT_FRAME_RATE",
    "DEFAULT_THRESHOLD",
    "LayerProfile",
    "ProfileReport",
    "profile",
    "effective_flops",
    "linear_cost",
]
