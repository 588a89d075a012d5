"""Lookup-table convolution, MAC cost model, budget solver and MAC reports.

Cost convention (per image):

* dense layer: ``P_out * M * kh * kw * N`` with the true channel count N;
* VQ layer: ``P_in * S * K * d`` for the input/codeword tables plus
  ``P_out * M * kh * kw * S`` lookup-accumulates;
* DL layer: ``P_in * S * (L * d + K * rho)`` for atom and codeword tables plus
  the same lookup term.

``P_in`` counts positions of the zero-padded input, since tables are built once
per input position. A lookup-accumulate counts as one MAC unless
``count_lookups`` is off. Bias additions are never counted.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dictionary import DlCodebook
from .errors import ConfigError, InfeasibleBudgetError, ParameterError, ShapeError
from .quantizer import QuantizedLayer, QuantScheme
from .tensor import DTYPE, ConvLayer, SubspacePartition, as_tensor4, output_hw, pad_spatial

log = logging.getLogger(__name__)


@dataclass
class OpCounter:
    """Multiply-accumulates actually executed by :func:`accelerated_forward`."""

    table_macs: int = 0
    lookups: int = 0

    def total(self, count_lookups: bool = True) -> int:
        return self.table_macs + (self.lookups if count_lookups else 0)


def accelerated_forward(q: QuantizedLayer, x, counter: OpCounter | None = None) -> np.ndarray:
    """Convolution through per-subspace dot-product tables.

    For every padded input position and subspace the input sub-vector is dotted
    with each codeword once (for DL: with each atom, then combined into codeword
    values through the sparse coefficients). Outputs are then assembled by
    looking up the table entry of each (kernel, tap, subspace) assignment.
    """
    x = as_tensor4(x, "input")
    m, n_ch, kh, kw = q.shape
    if x.shape[1] != n_ch:
        raise ShapeError(f"accelerated_forward({q.name}): input shape {x.shape} has {x.shape[1]} channels, "
                         f"kernel shape {q.shape} expects {n_ch}")
    ho, wo = q.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(f"accelerated_forward({q.name}): input shape {x.shape} too small for kernel shape {q.shape}")
    st = q.stride
    part = q.partition
    d = part.dim
    xp = part.pad_channels(pad_spatial(x, q.padding))
    batch, _, hp, wp = xp.shape
    positions = batch * hp * wp
    out = np.zeros((batch, m, ho, wo), dtype=DTYPE)

    for s, cb in enumerate(q.codebooks):
        xs = xp[:, s * d:(s + 1) * d].transpose(1, 0, 2, 3).reshape(d, positions)
        if isinstance(cb, DlCodebook):
            atoms = cb.dictionary.astype(DTYPE).T @ xs
            table = np.zeros((cb.size, positions), dtype=DTYPE)
            coefs = cb.coefs.astype(DTYPE)
            for r in range(cb.rho):
                table += coefs[:, r, None] * atoms[cb.support[:, r]]
            macs = cb.atoms * d * positions + cb.size * cb.rho * positions
        else:
            table = cb.codewords.astype(DTYPE).T @ xs
            macs = cb.size * d * positions
        if counter is not None:
            counter.table_macs += macs

        table = table.reshape(-1, batch, hp, wp)
        assign = cb.assignments.reshape(m, kh, kw)
        for i in range(kh):
            for j in range(kw):
                window = table[:, :, i:i + st * (ho - 1) + 1:st, j:j + st * (wo - 1) + 1:st]
                out += window[assign[:, i, j]].transpose(1, 0, 2, 3)
                if counter is not None:
                    counter.lookups += m * batch * ho * wo
    out += q.bias.astype(DTYPE)[None, :, None, None]
    return out


def _positions(input_hw, kh, kw, stride, padding):
    h, w = input_hw
    ho, wo = output_hw(h, w, kh, kw, stride, padding)
    return (h + 2 * padding) * (w + 2 * padding), ho * wo


def mac_count_dense(layer: ConvLayer | QuantizedLayer, input_hw: tuple[int, int]) -> int:
    m, n, kh, kw = layer.shape
    _, p_out = _positions(input_hw, kh, kw, layer.stride, layer.padding)
    if p_out == 0:
        log.warning("layer %s has no output positions for input %s", layer.name, input_hw)
    return p_out * m * kh * kw * n


def pq_macs(kind: str, shape, stride: int, padding: int, input_hw, d: int, k: int,
            l_dl: int = 0, rho: int = 0, count_lookups: bool = True) -> int:
    """Accelerated MAC count from raw parameters (see module docstring)."""
    m, n, kh, kw = shape
    s = SubspacePartition(n, d).count
    p_in, p_out = _positions(input_hw, kh, kw, stride, padding)
    lookups = p_out * m * kh * kw * s if count_lookups else 0
    if kind == "vq":
        return p_in * s * k * d + lookups
    return p_in * s * (l_dl * d + k * rho) + lookups


def mac_count_quantized(q: QuantizedLayer, input_hw: tuple[int, int], count_lookups: bool = True) -> int:
    d = q.partition.dim
    m, _, kh, kw = q.shape
    p_in, p_out = _positions(input_hw, kh, kw, q.stride, q.padding)
    total = p_out * m * kh * kw * q.partition.count if count_lookups else 0
    for cb in q.codebooks:
        if isinstance(cb, DlCodebook):
            total += p_in * (cb.atoms * d + cb.size * cb.rho)
        else:
            total += p_in * cb.size * d
    return total


@dataclass
class BudgetSolution:
    scheme: QuantScheme
    ratio: float
    macs: int
    dense_macs: int


def _default_l_grid(limit: int) -> list[int]:
    grid, v = [], 2
    while v <= limit:
        grid.append(v)
        v *= 2
    return grid


def solve_budget(target_alpha: float, layer: ConvLayer, input_hw: tuple[int, int], d: int, kind: str,
                 count_lookups: bool = True, rhos=(2, 3, 4), l_grid=None, seed: int = 0,
                 strategy: str = "balanced", atom_share: float = 0.5) -> BudgetSolution:
    """Largest codebook whose acceleration ratio on ``layer`` is at least ``target_alpha``.

    VQ maximizes K_vq. DL searches L_dl over ``l_grid`` (powers of two by
    default) and rho over ``rhos``:

    * ``"max-k"`` keeps the (L_dl, rho) pair giving the largest K_dl, ties to the
      smaller L_dl then the smaller rho. This drives L_dl to its minimum.
    * ``"balanced"`` takes the largest L_dl whose atom table uses at most
      ``atom_share`` of the table budget, then the rho giving the largest K_dl.

    Codebook sizes are capped at the number of sub-vectors M*kh*kw.
    """
    if not target_alpha > 1:
        raise ParameterError(f"target acceleration must be > 1, got {target_alpha}")
    if strategy not in ("balanced", "max-k"):
        raise ParameterError(f"unknown budget strategy {strategy!r}")
    kind = kind.lower()
    m, n, kh, kw = layer.shape
    part = SubspacePartition(n, d)
    n_sub = m * kh * kw
    dense = mac_count_dense(layer, input_hw)
    if dense == 0:
        raise InfeasibleBudgetError(f"layer {layer.name} has no MACs at input {input_hw}")
    p_in, p_out = _positions(input_hw, kh, kw, layer.stride, layer.padding)
    lookups = p_out * m * kh * kw * part.count if count_lookups else 0
    allowed = dense / target_alpha - lookups
    geom = dict(shape=layer.shape, stride=layer.stride, padding=layer.padding, input_hw=input_hw, d=d,
                count_lookups=count_lookups)

    def _fits(macs):
        return macs >= 1 and dense / macs >= target_alpha

    if kind == "vq":
        k = min(n_sub, math.floor(allowed / (p_in * part.count * d)))
        while k >= 1 and not _fits(pq_macs("vq", k=k, **geom)):
            k -= 1
        if k < 1:
            raise InfeasibleBudgetError(f"VQ cannot reach acceleration {target_alpha} on layer {layer.name}")
        scheme = QuantScheme("vq", d, k_vq=k, seed=seed)
        macs = pq_macs("vq", k=k, **geom)
        return BudgetSolution(scheme, dense / macs, macs, dense)

    if kind != "dl":
        raise ParameterError(f"unknown scheme kind {kind!r}")
    table_budget = allowed / (p_in * part.count)
    grid = sorted(l_grid) if l_grid is not None else _default_l_grid(n_sub - 1)

    def _best_k(l_dl):
        best = None
        for rho in sorted(rhos):
            if rho > min(d, l_dl):
                continue
            k = min(n_sub, math.floor((table_budget - l_dl * d) / rho))
            while k > l_dl and not _fits(pq_macs("dl", k=k, l_dl=l_dl, rho=rho, **geom)):
                k -= 1
            if k > l_dl and (best is None or k > best[0]):
                best = (k, l_dl, rho)
        return best

    candidates = [c for c in map(_best_k, grid) if c is not None]
    if not candidates:
        raise InfeasibleBudgetError(f"DL cannot reach acceleration {target_alpha} on layer {layer.name}")
    if strategy == "max-k":
        k, l_dl, rho = max(candidates, key=lambda c: (c[0], -c[1], -c[2]))
    else:
        within = [c for c in candidates if c[1] * d <= atom_share * table_budget]
        k, l_dl, rho = max(within, key=lambda c: c[1]) if within else candidates[0]
    scheme = QuantScheme("dl", d, l_dl=l_dl, k_dl=k, rho=rho, seed=seed)
    macs = pq_macs("dl", k=k, l_dl=l_dl, rho=rho, **geom)
    return BudgetSolution(scheme, dense / macs, macs, dense)


# --------------------------------------------------------------------------- reports

def _pct(x: float) -> float:
    return round(x, 4)


@dataclass
class LayerMacs:
    name: str
    group: str
    original_macs: int
    accelerated_macs: int

    @property
    def ratio(self) -> float:
        return self.original_macs / max(self.accelerated_macs, 1)


@dataclass
class GroupRollup:
    name: str
    original_macs: int
    accelerated_macs: int
    share: float
    reduction: float

    def to_dict(self) -> dict:
        return {"name": self.name, "original_macs": self.original_macs,
                "accelerated_macs": self.accelerated_macs,
                "share_pct": _pct(100 * self.share), "reduction_pct": _pct(self.reduction),
                "ratio": _pct(self.original_macs / max(self.accelerated_macs, 1))}


@dataclass
class MacReport:
    model: str
    layers: list[LayerMacs]
    groups: list[GroupRollup] = field(default_factory=list)
    count_lookups: bool = True

    @property
    def total_original(self) -> int:
        return sum(e.original_macs for e in self.layers)

    @property
    def total_accelerated(self) -> int:
        return sum(e.accelerated_macs for e in self.layers)

    @property
    def total_reduction(self) -> float:
        orig = self.total_original
        return 0.0 if orig == 0 else 100.0 * (1 - self.total_accelerated / orig)

    def group(self, name: str) -> GroupRollup:
        for g in self.groups:
            if g.name == name:
                return g
        raise ConfigError(f"group {name!r} not in report")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "count_lookups": self.count_lookups,
            "layers": [{"name": e.name, "group": e.group, "original_macs": e.original_macs,
                        "accelerated_macs": e.accelerated_macs, "ratio": _pct(e.ratio)} for e in self.layers],
            "groups": [g.to_dict() for g in self.groups],
            "total": {"original_macs": self.total_original, "accelerated_macs": self.total_accelerated,
                      "reduction_pct": _pct(self.total_reduction),
                      "ratio": _pct(self.total_original / max(self.total_accelerated, 1))},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"MAC report for {self.model} (lookups counted: {'yes' if self.count_lookups else 'no'})",
                 f"{'layer':<24}{'group':<22}{'original':>16}{'accelerated':>16}{'ratio':>12}"]
        for e in self.layers:
            lines.append(f"{e.name:<24}{e.group:<22}{e.original_macs:>16d}{e.accelerated_macs:>16d}{e.ratio:>12.4f}")
        for g in self.groups:
            lines.append(f"group {g.name}: share {100 * g.share:.4f}%  reduction {g.reduction:.4f}%")
        lines.append(f"total: {self.total_original} -> {self.total_accelerated} MACs, "
                     f"reduction {self.total_reduction:.4f}%")
        return "\n".join(lines)


def acceleration_report(model, quantized_layers=None, layer_groups=(), count_lookups: bool = True) -> MacReport:
    """Per-layer and per-group MAC accounting for ``model``.

    ``quantized_layers`` maps node names to :class:`QuantizedLayer` replacing the
    model's own operator; quantized nodes already in the model are counted as
    such. Conv nodes need ``input_hw``.
    """
    from .model import OpaqueOp

    quantized_layers = dict(quantized_layers or {})
    unknown = set(quantized_layers) - set(model.names)
    if unknown:
        raise ConfigError(f"quantized layers not in model: {sorted(unknown)}")
    entries = []
    for node in model.nodes:
        op = quantized_layers.get(node.name, node.op)
        if isinstance(op, OpaqueOp):
            acc = op.macs if op.accelerated_macs is None else op.accelerated_macs
            entries.append(LayerMacs(node.name, node.group, int(op.macs), int(acc)))
            continue
        if node.input_hw is None:
            raise ConfigError(f"layer {node.name!r} has no input geometry; cannot count MACs")
        orig = mac_count_dense(op, node.input_hw)
        acc = mac_count_quantized(op, node.input_hw, count_lookups) if isinstance(op, QuantizedLayer) else orig
        entries.append(LayerMacs(node.name, node.group, orig, acc))

    report = MacReport(model.name, entries, count_lookups=count_lookups)
    total = report.total_original
    known = {e.group for e in entries}
    for g in layer_groups:
        if g not in known:
            raise ConfigError(f"unknown layer group {g!r} (model has {sorted(x for x in known if x)})")
        members = [e for e in entries if e.group == g]
        orig = sum(e.original_macs for e in members)
        acc = sum(e.accelerated_macs for e in members)
        red = 0.0 if orig == 0 else 100.0 * (1 - acc / orig)
        report.groups.append(GroupRollup(g, orig, acc, orig / total if total else 0.0, red))
    return report
