"""Read tensor-container checkpoints and audit their query-key forms.

Container layout: an 8-byte little-endian header length ``n``, ``n`` bytes of
UTF-8 JSON mapping tensor names to ``{"dtype", "shape", "data_offsets"}``
(plus an optional ``"__metadata__"`` string map), then the raw buffer that
the offsets index into. Tensors are widened to float64 when read.

Files written here are canonical: tensors sorted by name, packed
back to back, compact JSON padded with spaces to a multiple of 8 bytes. A
load/save cycle of such a file reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics, scores
from .errors import ContainerParseError, PatternMatchError, ShapeError
from .transformer import LayerParams, ModelConfig, ModelParams

CSV_VERSION_LINE = "# attention-geometry v1"

_ITEMSIZE = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}
_NUMPY_DTYPE = {"F64": "<f8", "F32": "<f4", "F16": "<f2"}


def decode_tensor(dtype: str, shape: tuple[int, ...], data: bytes) -> np.ndarray:
    """Raw little-endian bytes to a float64 array."""
    if dtype == "BF16":
        # bfloat16 is the top half of a float32
        half = np.frombuffer(data, dtype="<u2").astype(np.uint32) << 16
        out = half.view(np.float32)
    else:
        out = np.frombuffer(data, dtype=_NUMPY_DTYPE[dtype])
    return out.astype(np.float64).reshape(shape)


def encode_tensor(array, dtype: str) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if dtype == "BF16":
        bits = a.astype(np.float32).view(np.uint32)
        # round to nearest even on the dropped 16 bits
        bits = bits + (0x7FFF + ((bits >> 16) & 1))
        return (bits >> 16).astype("<u2").tobytes()
    if dtype not in _NUMPY_DTYPE:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return a.astype(_NUMPY_DTYPE[dtype]).tobytes()


@dataclass(frozen=True)
class TensorEntry:
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if self.dtype not in _ITEMSIZE:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        expected = math.prod(self.shape) * _ITEMSIZE[self.dtype]
        if len(self.data) != expected:
            raise ValueError(f"buffer holds {len(self.data)} bytes, shape {self.shape} "
                             f"of {self.dtype} needs {expected}")

    def to_array(self) -> np.ndarray:
        return decode_tensor(self.dtype, self.shape, self.data)


@dataclass
class WeightContainer:
    tensors: dict[str, TensorEntry]
    metadata: dict[str, str] | None = None

    @classmethod
    def from_arrays(cls, arrays: dict, dtype: str = "F32",
                    metadata: dict[str, str] | None = None) -> "WeightContainer":
        return cls({name: TensorEntry(dtype, tuple(np.shape(a)), encode_tensor(a, dtype))
                    for name, a in arrays.items()}, metadata)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def array(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name].to_array()
        except KeyError:
            raise KeyError(f"no tensor named {name!r}") from None


def parse_container(blob: bytes) -> WeightContainer:
    total = len(blob)
    if total < 8:
        raise ContainerParseError(f"file is {total} bytes, too short for the header length", 0)
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > total - 8:
        raise ContainerParseError(
            f"header length {header_len} runs past the end of a {total}-byte file", 0)
    raw = blob[8:8 + header_len]
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ContainerParseError(f"header is not UTF-8: {exc.reason}", 8 + exc.start) from None
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        pos = 8 + len(text[: exc.pos].encode("utf-8"))
        raise ContainerParseError(f"header is not valid JSON: {exc.msg}", pos) from None
    if not isinstance(header, dict):
        raise ContainerParseError("header must be a JSON object", 8)

    data_start = 8 + header_len
    buffer_len = total - data_start
    metadata = header.pop("__metadata__", None)
    if metadata is not None and not (isinstance(metadata, dict)
                                     and all(isinstance(v, str) for v in metadata.values())):
        raise ContainerParseError("__metadata__ must map strings to strings", 8)

    spans = []
    tensors: dict[str, TensorEntry] = {}
    for name, info in header.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise ContainerParseError(f"tensor {name!r}: entry needs exactly dtype, shape, data_offsets", 8)
        dtype, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
        if dtype not in _ITEMSIZE:
            raise ContainerParseError(f"tensor {name!r}: unsupported dtype {dtype!r}", 8)
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise ContainerParseError(f"tensor {name!r}: shape must be a list of non-negative ints", 8)
        if not (isinstance(offsets, list) and len(offsets) == 2
                and all(isinstance(o, int) for o in offsets)):
            raise ContainerParseError(f"tensor {name!r}: data_offsets must be [begin, end]", 8)
        begin, end = offsets
        if not 0 <= begin <= end:
            raise ContainerParseError(f"tensor {name!r}: bad offsets {offsets}", data_start + max(begin, 0))
        if end > buffer_len:
            raise ContainerParseError(
                f"tensor {name!r}: ends at {end}, buffer has {buffer_len} bytes (truncated?)",
                data_start + buffer_len)
        expected = math.prod(shape) * _ITEMSIZE[dtype]
        if end - begin != expected:
            raise ContainerParseError(
                f"tensor {name!r}: {end - begin} bytes for shape {shape} of {dtype} (need {expected})",
                data_start + begin)
        spans.append((begin, end, name))
        tensors[name] = TensorEntry(dtype, tuple(shape), blob[data_start + begin:data_start + end])

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise ContainerParseError(f"tensors {n0!r} and {n1!r} overlap", data_start + b1)
    return WeightContainer(tensors, metadata)


def load_container(path) -> WeightContainer:
    return parse_container(Path(path).read_bytes())


def serialize_container(container: WeightContainer) -> bytes:
    header: dict = {}
    if container.metadata is not None:
        header["__metadata__"] = dict(sorted(container.metadata.items()))
    offset = 0
    chunks = []
    for name in container.names():
        entry = container.tensors[name]
        header[name] = {"dtype": entry.dtype, "shape": list(entry.shape),
                        "data_offsets": [offset, offset + len(entry.data)]}
        offset += len(entry.data)
        chunks.append(entry.data)
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def save_container(container: WeightContainer, path) -> None:
    Path(path).write_bytes(serialize_container(container))


# --------------------------------------------------------------------------
# model checkpoints


def params_to_container(params: ModelParams, dtype: str = "F64",
                        extra_metadata: dict[str, str] | None = None) -> WeightContainer:
    meta = {"model_config": json.dumps(asdict(params.config), sort_keys=True)}
    meta.update(extra_metadata or {})
    return WeightContainer.from_arrays(dict(params.named_tensors()), dtype, meta)


def save_params(params: ModelParams, path, dtype: str = "F64",
                extra_metadata: dict[str, str] | None = None) -> None:
    save_container(params_to_container(params, dtype, extra_metadata), path)


def params_from_container(container: WeightContainer) -> ModelParams:
    if not container.metadata or "model_config" not in container.metadata:
        raise ValueError("container has no model_config metadata")
    cfg = ModelConfig(**json.loads(container.metadata["model_config"]))
    get = container.array
    layers = []
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        layers.append(LayerParams(get(p + "W_q"), get(p + "W_k"), get(p + "W_v"),
                                  get(p + "W_1"), get(p + "W_2"),
                                  get(p + "W_o") if cfg.use_output_proj else None))
    return ModelParams(cfg, get("embed.W_e"), get("embed.W_p"), layers, get("unembed.W_u"))


def load_params(path) -> ModelParams:
    return params_from_container(load_container(path))


# --------------------------------------------------------------------------
# query-key extraction


# Pattern for checkpoints written by :func:`save_params` (input x output storage).
NATIVE_PATTERN_FIELDS = {"query_pattern": "layers.{layer}.W_q",
                         "key_pattern": "layers.{layer}.W_k",
                         "transpose_key": False}


@dataclass(frozen=True)
class LayerPattern:
    """Where each layer's query and key projections live in a container.

    ``transpose_key=True`` means tensors are stored ``output x input`` (the
    usual ``nn.Linear`` layout), so ``W_qk = Q_stored^T K_stored``. With
    ``False`` they are ``input x output`` and ``W_qk = Q K^T``.

    ``slices`` selects a range along the output axis of a packed tensor, as
    ``{"query": [start, stop], "key": [start, stop]}``.
    """
    query_pattern: str
    key_pattern: str
    num_heads: int = 1
    transpose_key: bool = True
    slices: dict | None = None

    def __post_init__(self):
        for p in (self.query_pattern, self.key_pattern):
            if p.count("{layer}") != 1:
                raise ValueError(f"pattern {p!r} needs exactly one '{{layer}}' placeholder")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.slices is not None:
            unknown = set(self.slices) - {"query", "key"}
            if unknown:
                raise ValueError(f"unknown slice keys {sorted(unknown)}")
            for rng in self.slices.values():
                if not (len(rng) == 2 and 0 <= rng[0] < rng[1]):
                    raise ValueError(f"bad slice range {rng}")

    @classmethod
    def native(cls, num_heads: int = 1) -> "LayerPattern":
        return cls(num_heads=num_heads, **NATIVE_PATTERN_FIELDS)

    @classmethod
    def from_dict(cls, data: dict) -> "LayerPattern":
        allowed = {"query_pattern", "key_pattern", "num_heads", "transpose_key", "slices"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown pattern keys {sorted(unknown)}")
        if "transpose_key" not in data:
            raise ValueError("pattern config must state transpose_key explicitly")
        return cls(**data)

    def layers_in(self, container: WeightContainer) -> list[int]:
        regex = re.compile(re.escape(self.query_pattern).replace(re.escape("{layer}"), r"(\d+)") + r"\Z")
        found = sorted({int(m.group(1)) for name in container.tensors
                        if (m := regex.match(name))})
        if not found:
            raise PatternMatchError(f"no tensor matches {self.query_pattern!r}")
        return found


def load_pattern(path) -> LayerPattern:
    return LayerPattern.from_dict(json.loads(Path(path).read_text()))


def _projection(container: WeightContainer, pattern: LayerPattern, role: str, layer: int) -> np.ndarray:
    template = pattern.query_pattern if role == "query" else pattern.key_pattern
    name = template.format(layer=layer)
    if name not in container.tensors:
        raise PatternMatchError(f"layer {layer}: missing tensor {name!r}")
    w = container.array(name)
    if w.ndim != 2:
        raise ShapeError(f"{name!r} has shape {w.shape}, expected a matrix")
    # normalize to input x output
    if pattern.transpose_key:
        w = w.T
    if pattern.slices and role in pattern.slices:
        start, stop = pattern.slices[role]
        if stop > w.shape[1]:
            raise ShapeError(f"slice {start}:{stop} exceeds output width {w.shape[1]} of {name!r}")
        w = w[:, start:stop]
    return w


def _layer_projections(container, pattern, layer) -> tuple[np.ndarray, np.ndarray]:
    wq = _projection(container, pattern, "query", layer)
    wk = _projection(container, pattern, "key", layer)
    if wq.shape != wk.shape:
        raise ShapeError(f"layer {layer}: query {wq.shape} and key {wk.shape} differ")
    if wq.shape[1] % pattern.num_heads:
        raise ShapeError(f"layer {layer}: width {wq.shape[1]} not divisible by {pattern.num_heads} heads")
    return wq, wk


def extract_wqk(container: WeightContainer, pattern: LayerPattern,
                per_head: bool = False) -> list:
    """Per layer ``W_q W_k^T`` (``input x input``), in layer order.

    With ``per_head=True`` each list item is the list of head forms, which
    sum to the layer form.
    """
    out = []
    for layer in pattern.layers_in(container):
        wq, wk = _layer_projections(container, pattern, layer)
        if per_head:
            dh = wq.shape[1] // pattern.num_heads
            out.append([wq[:, h * dh:(h + 1) * dh] @ wk[:, h * dh:(h + 1) * dh].T
                        for h in range(pattern.num_heads)])
        else:
            out.append(numerics.matmul(wq, wk.T))
    return out


def matrix_checksum(m: np.ndarray) -> str:
    """First 16 hex digits of SHA-256 over the row-major float64 bytes."""
    data = np.ascontiguousarray(m, dtype="<f8").tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


@dataclass
class InspectionRow:
    layer: int
    s: float
    d: float
    checksum: str


@dataclass
class InspectionResult:
    report: scores.ScoreReport
    rows: list[InspectionRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_VERSION_LINE + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "s", "d", "checksum"])
        for r in self.rows:
            w.writerow([r.layer, repr(r.s), repr(r.d), r.checksum])
        return buf.getvalue()

    def to_json(self) -> str:
        data = self.report.to_dict()
        data["rows"] = [asdict(r) for r in self.rows]
        return json.dumps(data, indent=2, sort_keys=True)


def _score_layer(args) -> InspectionRow:
    layer, m, gamma = args
    return InspectionRow(layer, scores.symmetry_score(m), scores.directionality_score(m, gamma),
                         matrix_checksum(m))


def inspect_report(container: WeightContainer, pattern: LayerPattern,
                   gamma: float = scores.DEFAULT_GAMMA, workers: int | None = None) -> InspectionResult:
    """Score every layer's full ``W_qk`` and aggregate across layers.

    Layers are scored on a thread pool (``ATTN_GEOM_THREADS`` caps it);
    results are collected in layer order so output does not depend on it.
    """
    layers = pattern.layers_in(container)
    mats = extract_wqk(container, pattern)
    n = workers if workers is not None else numerics.worker_count()
    jobs = [(layer, m, gamma) for layer, m in zip(layers, mats)]
    if n <= 1 or len(jobs) == 1:
        rows = [_score_layer(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(_score_layer, jobs))
    report = scores.summarize_scores([scores.LayerScore(r.layer, r.s, r.d) for r in rows], gamma)
    return InspectionResult(report, rows)
