"""Per-layer product quantization: one codebook per channel subspace."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .dictionary import DlCodebook, dl_learn
from .errors import ParameterError
from .kmeans import VqCodebook, vq_quantize
from .tensor import DTYPE, ConvLayer, SubspacePartition, output_hw

Codebook = Union[VqCodebook, DlCodebook]


def thread_count() -> int:
    """Worker cap from ``PQACCEL_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PQACCEL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class QuantScheme:
    kind: str
    subspace_dim: int
    k_vq: int | None = None
    l_dl: int | None = None
    k_dl: int | None = None
    rho: int | None = None
    seed: int = 0
    max_iter: int = 100
    dl_iters: int = 30

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ("vq", "dl"):
            raise ParameterError(f"unknown scheme kind {self.kind!r} (expected 'vq' or 'dl')")
        if self.subspace_dim < 1:
            raise ParameterError("subspace_dim must be >= 1")
        if kind == "vq":
            if self.k_vq is None or self.k_vq < 1:
                raise ParameterError("VQ scheme needs k_vq >= 1")
        else:
            if None in (self.l_dl, self.k_dl, self.rho):
                raise ParameterError("DL scheme needs l_dl, k_dl and rho")
            if not 1 <= self.l_dl < self.k_dl:
                raise ParameterError(f"DL scheme needs 1 <= l_dl < k_dl, got {self.l_dl}, {self.k_dl}")
            if not 1 <= self.rho <= min(self.subspace_dim, self.l_dl):
                raise ParameterError(f"rho={self.rho} out of range for d={self.subspace_dim}, l_dl={self.l_dl}")

    @property
    def codebook_size(self) -> int:
        return self.k_vq if self.kind == "vq" else self.k_dl

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "subspace_dim": self.subspace_dim}
        if self.kind == "vq":
            out["k_vq"] = self.k_vq
        else:
            out.update(l_dl=self.l_dl, k_dl=self.k_dl, rho=self.rho)
        out.update(seed=self.seed, max_iter=self.max_iter, dl_iters=self.dl_iters)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "QuantScheme":
        return cls(**data)


@dataclass
class QuantizedLayer:
    name: str
    shape: tuple[int, int, int, int]
    stride: int
    padding: int
    bias: np.ndarray
    partition: SubspacePartition
    codebooks: list[Codebook]
    scheme: QuantScheme
    warnings: list[str] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.scheme.kind

    @property
    def kernels(self) -> int:
        return self.shape[0]

    @property
    def channels(self) -> int:
        return self.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.shape[2], self.shape[3]

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        return output_hw(height, width, *self.kernel_size, self.stride, self.padding)


def _clamped(scheme: QuantScheme, d: int, n: int, warnings: list[str], name: str) -> QuantScheme:
    if scheme.kind == "vq":
        if scheme.k_vq > n:
            warnings.append(f"{name}: k_vq={scheme.k_vq} clamped to sub-vector count {n}")
            return QuantScheme(**{**scheme.to_dict(), "k_vq": n})
        return scheme
    k, l, rho = scheme.k_dl, scheme.l_dl, scheme.rho
    if k > n:
        warnings.append(f"{name}: k_dl={k} clamped to sub-vector count {n}")
        k = n
    if l >= k:
        warnings.append(f"{name}: l_dl={l} clamped to {k - 1} to keep l_dl < k_dl")
        l = k - 1
    if rho > min(d, l):
        warnings.append(f"{name}: rho={rho} clamped to {min(d, l)}")
        rho = min(d, l)
    if (k, l, rho) == (scheme.k_dl, scheme.l_dl, scheme.rho):
        return scheme
    if l < 1:
        raise ParameterError(f"{name}: too few sub-vectors ({n}) for a DL codebook")
    return QuantScheme(**{**scheme.to_dict(), "k_dl": k, "l_dl": l, "rho": rho})


def _learn(W: np.ndarray, scheme: QuantScheme, seed: int) -> Codebook:
    if scheme.kind == "vq":
        return vq_quantize(W, scheme.k_vq, seed=seed, max_iter=scheme.max_iter)
    return dl_learn(W, scheme.l_dl, scheme.k_dl, scheme.rho, iters=scheme.dl_iters, seed=seed)


def quantize_layer(layer: ConvLayer, scheme: QuantScheme, threads: int | None = None) -> QuantizedLayer:
    """Learn one codebook per subspace on the layer's sub-vectors.

    Subspace ``s`` is learned with seed ``scheme.seed + s``. Codebook sizes larger
    than the number of sub-vectors are clamped and the clamp is recorded in
    ``warnings``.
    """
    partition = SubspacePartition(layer.channels, scheme.subspace_dim)
    blocks = partition.split(layer.weights)
    n = blocks[0].shape[1]
    warnings: list[str] = []
    effective = _clamped(scheme, scheme.subspace_dim, n, warnings, layer.name)

    threads = thread_count() if threads is None else threads
    jobs = [(b.astype(np.float64), effective, effective.seed + s) for s, b in enumerate(blocks)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            codebooks = list(pool.map(lambda job: _learn(*job), jobs))
    else:
        codebooks = [_learn(*job) for job in jobs]
    codebooks = [_as_stored(cb) for cb in codebooks]
    return QuantizedLayer(layer.name, layer.shape, layer.stride, layer.padding,
                          np.array(layer.bias, dtype=DTYPE), partition, codebooks, effective, warnings)


def _as_stored(cb: Codebook) -> Codebook:
    """Model parameters are kept in float32, like dense weights."""
    if isinstance(cb, VqCodebook):
        return VqCodebook(cb.codewords.astype(DTYPE), cb.assignments)
    return DlCodebook(cb.dictionary.astype(DTYPE), cb.support, cb.coefs.astype(DTYPE), cb.assignments,
                      cb.short_columns, cb.objective_history)


def subspace_reconstructions(q: QuantizedLayer) -> list[np.ndarray]:
    return [cb.reconstruct() for cb in q.codebooks]


def reconstruct_weights(q: QuantizedLayer) -> ConvLayer:
    """Dense layer whose weights are the codebook approximations."""
    m, _, kh, kw = q.shape
    w = q.partition.merge(subspace_reconstructions(q), m, (kh, kw))
    return ConvLayer(w.astype(DTYPE), q.bias, q.stride, q.padding, q.name)


def quantization_error(layer: ConvLayer, q: QuantizedLayer) -> float:
    """Frobenius error over all subspaces, accumulated in float64 from the stored codebooks."""
    blocks = SubspacePartition(layer.channels, q.partition.dim).split(layer.weights.astype(np.float64))
    sq = sum(float(np.sum((b - r) ** 2)) for b, r in zip(blocks, subspace_reconstructions(q)))
    return float(np.sqrt(sq))
