"""On-disk formats.

Models are a JSON manifest plus one blob of little-endian float32 values;
the manifest records each array's byte offset and shape. Batches are binary
tensors: magic ``QBT1``, uint32 element-type code, uint32 rank, rank uint32
extents, then the row-major little-endian data.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .nn import BatchNorm, Graph, LayerSpec, topo_validate
from .quant import LayerQuant, QuantGrid, QuantizedModel

FORMAT_VERSION = 1
BATCH_MAGIC = b"QBT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


class FormatError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- batches ---------------------------------------------------------------------


def encode_batch(arr):
    arr = np.asarray(arr)
    dtype = np.dtype("<i4") if np.issubdtype(arr.dtype, np.integer) else np.dtype("<f4")
    arr = np.ascontiguousarray(arr, dtype=dtype)
    header = BATCH_MAGIC + struct.pack("<II", _CODES[dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_batch(data):
    if data[:4] != BATCH_MAGIC:
        raise FormatError("not a batch file (bad magic)")
    code, rank = struct.unpack_from("<II", data, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown element type {code}")
    shape = struct.unpack_from(f"<{rank}I", data, 12)
    dtype = _DTYPES[code]
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(data) - offset != count * dtype.itemsize:
        raise FormatError("batch payload size does not match header")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(np.float64) if code == 0 else arr.astype(np.int64)


def save_batch(path, arr):
    atomic_write(path, encode_batch(arr))


def load_batch(path):
    return decode_batch(Path(path).read_bytes())


# --- models ----------------------------------------------------------------------


class _Blob:
    def __init__(self):
        self.parts = []
        self.size = 0

    def add(self, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        ref = {"offset": self.size, "shape": list(arr.shape)}
        self.parts.append(arr.tobytes())
        self.size += arr.nbytes
        return ref

    def bytes(self):
        return b"".join(self.parts)


def _read(blob, ref):
    count = int(np.prod(ref["shape"])) if ref["shape"] else 1
    end = ref["offset"] + 4 * count
    if end > len(blob):
        raise FormatError("blob reference past end of blob")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=ref["offset"]).reshape(ref["shape"]).astype(np.float64)


def _layer_to_dict(layer, blob):
    d = {"kind": layer.kind, "inputs": list(layer.inputs), "activation": layer.activation,
         "stride": layer.stride, "padding": layer.padding, "pool_size": layer.pool_size, "name": layer.name}
    if layer.weights is not None:
        d["weights"] = blob.add(layer.weights)
    if layer.bias is not None:
        d["bias"] = blob.add(layer.bias)
    if layer.bn is not None:
        d["bn"] = {k: blob.add(getattr(layer.bn, k)) for k in ("gamma", "beta", "mean", "var")}
        d["bn"]["eps"] = layer.bn.eps
    return d


def _layer_from_dict(d, blob):
    bn = None
    if "bn" in d:
        bn = BatchNorm(*(_read(blob, d["bn"][k]) for k in ("gamma", "beta", "mean", "var")), eps=d["bn"]["eps"])
    return LayerSpec(
        kind=d["kind"], inputs=list(d["inputs"]),
        weights=_read(blob, d["weights"]) if "weights" in d else None,
        bias=_read(blob, d["bias"]) if "bias" in d else None,
        activation=d["activation"], stride=d["stride"], padding=d["padding"],
        pool_size=d["pool_size"], bn=bn, name=d.get("name", ""),
    )


def _graph_to_dict(graph, blob):
    return {"input_shape": list(graph.input_shape), "output": graph.output,
            "layers": [_layer_to_dict(l, blob) for l in graph.layers]}


def _graph_from_dict(d, blob):
    graph = Graph([_layer_from_dict(l, blob) for l in d["layers"]], tuple(d["input_shape"]), d["output"])
    diag = topo_validate(graph)
    if diag is not None:
        raise FormatError(f"invalid graph in manifest: {diag.message}")
    return graph


def _dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_graph(directory, graph):
    blob = _Blob()
    manifest = {"format": "qbias-graph", "version": FORMAT_VERSION, "blob": "model.bin",
                "graph": _graph_to_dict(graph, blob)}
    atomic_write(Path(directory) / "model.bin", blob.bytes())
    atomic_write(Path(directory) / "model.json", _dumps(manifest))


def _load_manifest(directory, name, kind):
    path = Path(directory) / name
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if manifest.get("format") != kind:
        raise FormatError(f"{path} is not a {kind} manifest")
    blob = (Path(directory) / manifest["blob"]).read_bytes()
    return manifest, blob


def load_graph(directory):
    manifest, blob = _load_manifest(directory, "model.json", "qbias-graph")
    return _graph_from_dict(manifest["graph"], blob)


def save_qmodel(directory, qmodel):
    blob = _Blob()
    layers = []
    for lq in qmodel.layers:
        d = {"a_grid": lq.a_grid.to_dict()}
        if lq.w_grid is not None:
            d["w_grid"] = lq.w_grid.to_dict()
            d["w_codes"] = blob.add(lq.w_codes)
        if lq.b_grid is not None:
            d["b_grid"] = lq.b_grid.to_dict()
            d["b_codes"] = blob.add(lq.b_codes)
        if lq.bias_fp is not None:
            d["bias_fp"] = blob.add(lq.bias_fp)
        layers.append(d)
    manifest = {"format": "qbias-qmodel", "version": FORMAT_VERSION, "blob": "qmodel.bin",
                "graph": _graph_to_dict(qmodel.graph, blob),
                "input_grid": qmodel.input_grid.to_dict(), "layers": layers}
    atomic_write(Path(directory) / "qmodel.bin", blob.bytes())
    atomic_write(Path(directory) / "qmodel.json", _dumps(manifest))


def load_qmodel(directory):
    manifest, blob = _load_manifest(directory, "qmodel.json", "qbias-qmodel")
    graph = _graph_from_dict(manifest["graph"], blob)
    layers = []
    for d in manifest["layers"]:
        lq = LayerQuant(QuantGrid.from_dict(d["a_grid"]))
        if "w_grid" in d:
            lq.w_grid = QuantGrid.from_dict(d["w_grid"])
            lq.w_codes = _read(blob, d["w_codes"])
        if "b_grid" in d:
            lq.b_grid = QuantGrid.from_dict(d["b_grid"])
            lq.b_codes = _read(blob, d["b_codes"])
        if "bias_fp" in d:
            lq.bias_fp = _read(blob, d["bias_fp"])
        layers.append(lq)
    if len(layers) != len(graph.layers):
        raise FormatError("quantization entries do not match graph layers")
    return QuantizedModel(graph, QuantGrid.from_dict(manifest["input_grid"]), layers)
