"""Sequential layer graph with group and target metadata.

Nodes hold a dense :class:`ConvLayer`, a :class:`QuantizedLayer`, or an
:class:`OpaqueOp` that only carries MAC counts (for parts of a network that are
accounted for but not executed here, e.g. a detection head or a published
per-part figure).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import ConfigError, ShapeError
from .quantizer import QuantizedLayer, reconstruct_weights
from .tensor import ConvLayer, as_tensor4, conv_forward_im2col


@dataclass(frozen=True)
class OpaqueOp:
    macs: int
    accelerated_macs: int | None = None


Op = Union[ConvLayer, QuantizedLayer, OpaqueOp]


@dataclass
class Node:
    name: str
    op: Op
    group: str = ""
    target: bool = False
    input_hw: tuple[int, int] | None = None
    relu: bool = False

    @property
    def kind(self) -> str:
        if isinstance(self.op, ConvLayer):
            return "conv"
        if isinstance(self.op, QuantizedLayer):
            return "quantized"
        return "opaque"

    @property
    def output_hw(self) -> tuple[int, int] | None:
        if self.input_hw is None or isinstance(self.op, OpaqueOp):
            return None
        return self.op.output_hw(*self.input_hw)


@dataclass
class Model:
    name: str
    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        dupes = {x for x in names if names.count(x) > 1}
        if dupes:
            raise ConfigError(f"duplicate layer names: {sorted(dupes)}")

    def __getitem__(self, name: str) -> Node:
        for node in self.nodes:
            if node.name == name:
                return node
        raise ConfigError(f"unknown layer {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(n.name == name for n in self.nodes)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    @property
    def groups(self) -> list[str]:
        seen: list[str] = []
        for n in self.nodes:
            if n.group and n.group not in seen:
                seen.append(n.group)
        return seen

    def with_op(self, name: str, op: Op) -> "Model":
        """Copy of the model with one node's operator swapped."""
        self[name]
        return Model(self.name, [replace(n, op=op) if n.name == name else n for n in self.nodes])

    def copy(self) -> "Model":
        return Model(self.name, [replace(n) for n in self.nodes])

    def forward(self, x, accelerated: bool = True) -> np.ndarray:
        """Run the executable nodes in order (ReLU applied where flagged).

        Quantized nodes run through the lookup-table path when ``accelerated`` is
        set, otherwise as a dense convolution on their reconstructed weights.
        """
        from .accel import accelerated_forward

        h = as_tensor4(x, "input")
        for node in self.nodes:
            if isinstance(node.op, OpaqueOp):
                raise ShapeError(f"node {node.name!r} is opaque (MAC accounting only) and cannot be executed")
            if isinstance(node.op, QuantizedLayer):
                h = accelerated_forward(node.op, h) if accelerated else \
                    conv_forward_im2col(reconstruct_weights(node.op), h)
            else:
                h = conv_forward_im2col(node.op, h)
            if node.relu:
                h = np.maximum(h, 0)
        return h
