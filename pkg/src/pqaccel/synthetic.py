"""Synthetic structured conv weights: low-rank channel structure plus noise."""
from __future__ import annotations

import numpy as np

from .model import Model, Node, OpaqueOp
from .tensor import ConvLayer


def low_rank_weights(kernels: int, channels: int, kernel_size: int = 3, rank: int = 4,
                     noise: float = 0.05, seed: int = 0) -> np.ndarray:
    """(M, N, k, k) weights whose channel sub-vectors lie near a rank-``rank`` subspace."""
    rng = np.random.default_rng(seed)
    taps = kernel_size * kernel_size
    basis = rng.normal(size=(channels, rank)) / np.sqrt(rank)
    w = basis @ rng.normal(size=(rank, kernels * taps))
    w = w.reshape(channels, kernels, kernel_size, kernel_size).transpose(1, 0, 2, 3)
    return w + noise * rng.normal(size=w.shape)


def structured_layer(kernels: int = 32, channels: int = 32, rank: int = 4, noise: float = 0.05,
                     seed: int = 0, name: str = "toy") -> ConvLayer:
    w = low_rank_weights(kernels, channels, 3, rank, noise, seed)
    return ConvLayer(w, np.zeros(kernels), 1, 1, name)


def structured_model(seed: int = 0, input_hw: tuple[int, int] = (8, 8)) -> Model:
    """Single-layer model wrapping :func:`structured_layer`; the bundled ``toy`` model of the CLI."""
    return Model("toy-structured", [Node("toy", structured_layer(seed=seed), "feature-extraction", True, input_hw)])


def rollup_model(name: str, total_macs: float, share: float, part_reduction_pct: float) -> Model:
    """Opaque two-part model: a feature part holding ``share`` of the MACs, reduced by
    ``part_reduction_pct`` percent, and an untouched remainder."""
    part = int(round(share * total_macs))
    rest = int(round(total_macs)) - part
    reduced = int(round(part * (1 - part_reduction_pct / 100)))
    return Model(name, [Node("features", OpaqueOp(part, reduced), "feature-extraction", True),
                        Node("head", OpaqueOp(rest), "head")])
