"""On-disk model format.

A model is a directory holding ``manifest.json`` and a ``blobs/`` folder. The
manifest is UTF-8 JSON with a fixed key order::

    {"format": "pqaccel-model", "version": 1, "name": ..., "layers": [...]}

Each layer entry has ``name``, ``type`` (``conv``, ``quantized`` or
``opaque``), ``group``, ``target``, ``input_hw``, ``relu`` and type-specific
fields; ``op_name`` appears only when the layer's own name differs from the node name. Array data lives in blobs described by ``{"file", "dtype", "shape"}``
where dtype is ``f32`` (little-endian IEEE float32) or ``i32`` (little-endian
int32), always row-major. Opaque layers carry ``macs`` and optionally
``accelerated_macs`` instead of tensors.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dictionary import DlCodebook
from .errors import DataError, MissingBlobError, SizeMismatchError, VersionMismatchError
from .kmeans import VqCodebook
from .model import Model, Node, OpaqueOp
from .quantizer import QuantizedLayer, QuantScheme
from .tensor import ConvLayer, SubspacePartition

FORMAT = "pqaccel-model"
VERSION = 1
MANIFEST = "manifest.json"
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


class _BlobWriter:
    def __init__(self, root: Path, layer_index: int):
        self.root = root
        self.prefix = f"L{layer_index:04d}"

    def __call__(self, key: str, arr, dtype: str) -> dict:
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
        rel = f"blobs/{self.prefix}.{key}.{dtype}"
        (self.root / rel).write_bytes(data.tobytes())
        return {"file": rel, "dtype": dtype, "shape": list(data.shape)}


def _layer_entry(node: Node, put: _BlobWriter) -> dict:
    entry = {"name": node.name, "type": node.kind, "group": node.group, "target": bool(node.target),
             "input_hw": list(node.input_hw) if node.input_hw is not None else None, "relu": bool(node.relu)}
    op = node.op
    if isinstance(op, OpaqueOp):
        entry["macs"] = int(op.macs)
        entry["accelerated_macs"] = None if op.accelerated_macs is None else int(op.accelerated_macs)
        return entry
    entry["shape"] = [int(v) for v in op.shape]
    if op.name != node.name:
        entry["op_name"] = op.name
    entry["stride"] = op.stride
    entry["padding"] = op.padding
    tensors = {"bias": put("bias", op.bias, "f32")}
    if isinstance(op, ConvLayer):
        tensors["weights"] = put("weights", op.weights, "f32")
        entry["tensors"] = tensors
        return entry
    entry["scheme"] = op.scheme.to_dict()
    entry["subspace_dim"] = op.partition.dim
    entry["warnings"] = list(op.warnings)
    books = []
    for s, cb in enumerate(op.codebooks):
        if isinstance(cb, VqCodebook):
            books.append({"kind": "vq",
                          "codewords": put(f"s{s}.codewords", cb.codewords, "f32"),
                          "assignments": put(f"s{s}.assignments", cb.assignments, "i32")})
        else:
            books.append({"kind": "dl",
                          "dictionary": put(f"s{s}.dictionary", cb.dictionary, "f32"),
                          "support": put(f"s{s}.support", cb.support, "i32"),
                          "coefs": put(f"s{s}.coefs", cb.coefs, "f32"),
                          "assignments": put(f"s{s}.assignments", cb.assignments, "i32"),
                          "short_columns": [int(i) for i in np.flatnonzero(cb.short_columns)],
                          "objective_history": [float(v) for v in cb.objective_history]})
    entry["tensors"] = tensors
    entry["codebooks"] = books
    return entry


def save_model(model: Model, path) -> Path:
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    for stale in (root / "blobs").glob("L*"):
        stale.unlink()
    layers = [_layer_entry(node, _BlobWriter(root, i)) for i, node in enumerate(model.nodes)]
    manifest = {"format": FORMAT, "version": VERSION, "name": model.name, "layers": layers}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return root


def _field(entry: dict, key: str, layer: str):
    try:
        return entry[key]
    except KeyError:
        raise DataError(f"layer {layer!r}: manifest entry lacks field {key!r}") from None


def _read_blob(root: Path, ref: dict, layer: str, key: str) -> np.ndarray:
    try:
        rel, dtype, shape = ref["file"], ref["dtype"], tuple(int(v) for v in ref["shape"])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"layer {layer!r}: malformed blob reference for {key!r}") from None
    if dtype not in _DTYPES:
        raise DataError(f"layer {layer!r}: unknown dtype {dtype!r} for {key!r}")
    file = root / rel
    if not file.is_file():
        raise MissingBlobError(f"layer {layer!r}: blob {rel} for {key!r} not found")
    raw = file.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise SizeMismatchError(f"layer {layer!r}: blob {rel} for {key!r} has {len(raw)} bytes, "
                                f"shape {list(shape)} needs {expected}")
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
    return arr.astype(np.float32 if dtype == "f32" else np.int64)


def _node_from_entry(root: Path, entry: dict) -> Node:
    name = _field(entry, "name", "?")
    kind = _field(entry, "type", name)
    hw = entry.get("input_hw")
    common = dict(group=entry.get("group", ""), target=bool(entry.get("target", False)),
                  input_hw=tuple(hw) if hw is not None else None, relu=bool(entry.get("relu", False)))
    if kind == "opaque":
        return Node(name, OpaqueOp(int(_field(entry, "macs", name)), entry.get("accelerated_macs")), **common)
    if kind not in ("conv", "quantized"):
        raise DataError(f"layer {name!r}: unknown layer type {kind!r}")
    shape = tuple(int(v) for v in _field(entry, "shape", name))
    tensors = _field(entry, "tensors", name)
    bias = _read_blob(root, _field(tensors, "bias", name), name, "bias")
    stride, padding = int(_field(entry, "stride", name)), int(_field(entry, "padding", name))
    op_name = entry.get("op_name", name)
    if kind == "conv":
        w = _read_blob(root, _field(tensors, "weights", name), name, "weights")
        if w.shape != shape:
            raise SizeMismatchError(f"layer {name!r}: weights blob shape {w.shape} != declared {shape}")
        return Node(name, ConvLayer(w, bias, stride, padding, op_name), **common)

    part = SubspacePartition(shape[1], int(_field(entry, "subspace_dim", name)))
    books = []
    for s, b in enumerate(_field(entry, "codebooks", name)):
        blob = lambda key: _read_blob(root, _field(b, key, name), name, f"s{s}.{key}")  # noqa: E731
        if b.get("kind") == "vq":
            books.append(VqCodebook(blob("codewords"), blob("assignments")))
        else:
            support = blob("support")
            short = np.zeros(support.shape[0], dtype=bool)
            short[list(b.get("short_columns", []))] = True
            books.append(DlCodebook(blob("dictionary"), support, blob("coefs"), blob("assignments"),
                                    short, list(b.get("objective_history", []))))
    if len(books) != part.count:
        raise DataError(f"layer {name!r}: {len(books)} codebooks for {part.count} subspaces")
    for cb in books:
        if cb.assignments.shape[0] != shape[0] * shape[2] * shape[3]:
            raise SizeMismatchError(f"layer {name!r}: assignment count {cb.assignments.shape[0]} "
                                    f"!= sub-vector count {shape[0] * shape[2] * shape[3]}")
    q = QuantizedLayer(op_name, shape, stride, padding, bias, part, books,
                       QuantScheme.from_dict(_field(entry, "scheme", name)), list(entry.get("warnings", [])))
    return Node(name, q, **common)


def load_model(path) -> Model:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise MissingBlobError(f"{mpath} not found")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: invalid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"{mpath}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise VersionMismatchError(f"{mpath}: format version {manifest.get('version')!r}, expected {VERSION}")
    nodes = [_node_from_entry(root, e) for e in _field(manifest, "layers", "<manifest>")]
    return Model(manifest.get("name", root.name), nodes)


def _arrays_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _ops_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, OpaqueOp):
        return a == b
    if isinstance(a, ConvLayer):
        return (a.name == b.name and a.stride == b.stride and a.padding == b.padding
                and _arrays_equal(a.weights, b.weights) and _arrays_equal(a.bias, b.bias))
    if (a.name, tuple(a.shape), a.stride, a.padding, a.partition, a.scheme, a.warnings) != \
            (b.name, tuple(b.shape), b.stride, b.padding, b.partition, b.scheme, b.warnings):
        return False
    if not _arrays_equal(a.bias, b.bias) or len(a.codebooks) != len(b.codebooks):
        return False
    for x, y in zip(a.codebooks, b.codebooks):
        if type(x) is not type(y):
            return False
        if isinstance(x, VqCodebook):
            ok = _arrays_equal(x.codewords, y.codewords) and _arrays_equal(x.assignments, y.assignments)
        else:
            ok = all(_arrays_equal(getattr(x, f), getattr(y, f))
                     for f in ("dictionary", "support", "coefs", "assignments", "short_columns")) \
                and x.objective_history == y.objective_history
        if not ok:
            return False
    return True


def models_equal(a: Model, b: Model) -> bool:
    """Bit-exact structural equality of two models."""
    if a.name != b.name or len(a.nodes) != len(b.nodes):
        return False
    for x, y in zip(a.nodes, b.nodes):
        if (x.name, x.group, x.target, x.input_hw, x.relu) != (y.name, y.group, y.target, y.input_hw, y.relu):
            return False
        if not _ops_equal(x.op, y.op):
            return False
    return True
