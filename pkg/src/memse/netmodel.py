"""Network descriptions and their lowering to crossbar-executable stages.

A network is an ordered list of conv / linear / activation / average-pooling
layers.  Lowering converts every conv into an equivalent sparse block-Toeplitz
matrix and every pooling window into a row-stochastic averaging matrix, so
that downstream analysis only ever sees three stage kinds: linear maps,
elementwise activations, and linear averaging maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import sparse

from .errors import FormatError

ACTIVATION_KINDS = ("softplus", "identity")

NETWORK_FORMAT = "memse-network"
INPUTS_FORMAT = "memse-inputs"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """2-D convolution, square kernel, zero padding."""

    out_channels: int
    kernel_size: int
    stride: int
    padding: int
    weights: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class LinearSpec:
    weights: np.ndarray  # (out_features, in_features), row = output neuron
    bias: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class ActivationSpec:
    kind: str  # one of ACTIVATION_KINDS


@dataclass(frozen=True, eq=False)
class AvgPoolSpec:
    window: int  # non-overlapping s x s averaging, stride = s


LayerSpec = Union[ConvSpec, LinearSpec, ActivationSpec, AvgPoolSpec]


def _conv_out_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return ho, wo


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Validated network description.

    ``input_shape`` is (channels, height, width).  Shapes must chain
    consistently through the layer list and at least one conv/linear layer
    must be present.  Immutable after construction.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.input_shape) != 3 or any(int(d) <= 0 for d in self.input_shape):
            raise FormatError(f"input_shape must be 3 positive ints, got {self.input_shape}")
        self.output_shapes()  # raises on inconsistency
        if not any(isinstance(l, (ConvSpec, LinearSpec)) for l in self.layers):
            raise FormatError("network has no conv or linear layer")

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes; validates the whole chain."""
        shape: tuple[int, ...] = self.input_shape
        out: list[tuple[int, ...]] = []
        for idx, layer in enumerate(self.layers):
            shape = _layer_out_shape(layer, shape, idx)
            out.append(shape)
        return out


def _layer_out_shape(layer: LayerSpec, shape: tuple[int, ...], idx: int) -> tuple[int, ...]:
    def err(msg: str) -> FormatError:
        return FormatError(f"layer {idx}: {msg}")

    if isinstance(layer, ConvSpec):
        if len(shape) != 3:
            raise err(f"conv requires a (C,H,W) input, got {shape}")
        c, h, w = shape
        o, i, kh, kw = layer.weights.shape
        if kh != layer.kernel_size or kw != layer.kernel_size:
            raise err(f"kernel tensor {layer.weights.shape} vs kernel_size {layer.kernel_size}")
        if o != layer.out_channels:
            raise err(f"weight tensor has {o} filters, declared {layer.out_channels}")
        if i != c:
            raise err(f"conv expects {i} input channels, input has {c}")
        if layer.stride < 1 or layer.padding < 0:
            raise err("stride must be >= 1 and padding >= 0")
        if layer.bias is not None and layer.bias.shape != (o,):
            raise err(f"bias shape {layer.bias.shape} vs {o} filters")
        ho, wo = _conv_out_hw(h, w, layer.kernel_size, layer.stride, layer.padding)
        if ho < 1 or wo < 1:
            raise err(f"conv produces empty output for input {shape}")
        return (o, ho, wo)
    if isinstance(layer, LinearSpec):
        m, l = layer.weights.shape
        flat = int(np.prod(shape))
        if l != flat:
            raise err(f"linear expects {l} inputs, upstream provides {flat}")
        if layer.bias is not None and layer.bias.shape != (m,):
            raise err(f"bias shape {layer.bias.shape} vs {m} outputs")
        return (m,)
    if isinstance(layer, ActivationSpec):
        if layer.kind not in ACTIVATION_KINDS:
            raise err(f"unsupported activation {layer.kind!r}")
        return shape
    if isinstance(layer, AvgPoolSpec):
        if len(shape) != 3:
            raise err(f"avgpool requires a (C,H,W) input, got {shape}")
        c, h, w = shape
        s = layer.window
        if s < 1 or h % s or w % s:
            raise err(f"pool window {s} does not divide spatial dims {h}x{w}")
        return (c, h // s, w // s)
    raise err(f"unsupported layer kind {type(layer).__name__}")


# ---------------------------------------------------------------------------
# lowered form
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearStage:
    """One crossbar-executable matrix stage.

    ``matrix`` is (M, L) with row = output index; sparse for lowered convs,
    dense for native linear layers.  ``w_max`` is max |entry|, always > 0.
    """

    matrix: np.ndarray | sparse.csr_array
    w_max: float
    bias: np.ndarray | None
    out_shape: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True, eq=False)
class ActivationStage:
    kind: str
    out_shape: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PoolStage:
    """Averaging map: row-stochastic (M', M) matrix, s**2 entries of 1/s**2 per row."""

    matrix: sparse.csr_array
    window: int
    out_shape: tuple[int, ...]


Stage = Union[LinearStage, ActivationStage, PoolStage]


@dataclass(frozen=True, eq=False)
class LoweredNetwork:
    input_shape: tuple[int, int, int]
    stages: tuple[Stage, ...]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def linear_stages(self) -> list[LinearStage]:
        return [s for s in self.stages if isinstance(s, LinearStage)]


def _conv_matrix(w: np.ndarray, in_shape: tuple[int, int, int], stride: int, padding: int) -> sparse.csr_array:
    """Block-Toeplitz unrolling of a conv over a flattened (C,H,W) input."""
    o, i, kh, kw = w.shape
    c, h, wd = in_shape
    ho, wo = _conv_out_hw(h, wd, kh, stride, padding)
    n_pos = ho * wo
    oy = np.arange(ho) * stride - padding
    ox = np.arange(wo) * stride - padding
    pos = np.arange(n_pos).reshape(ho, wo)
    oc_off = np.arange(o) * n_pos

    rows, cols, vals = [], [], []
    for ic in range(i):
        for ky in range(kh):
            iy = oy + ky
            my = (iy >= 0) & (iy < h)
            for kx in range(kw):
                ix = ox + kx
                mx = (ix >= 0) & (ix < wd)
                mask = my[:, None] & mx[None, :]
                rpos = pos[mask]
                col = ((ic * h + iy)[:, None] * wd + ix[None, :])[mask]
                n = rpos.size
                if n == 0:
                    continue
                rows.append((oc_off[:, None] + rpos[None, :]).ravel())
                cols.append(np.tile(col, o))
                vals.append(np.repeat(w[:, ic, ky, kx], n))
    mat = sparse.csr_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(o * n_pos, c * h * wd),
    )
    mat.sum_duplicates()
    return mat


def _pool_matrix(in_shape: tuple[int, int, int], s: int) -> sparse.csr_array:
    c, h, w = in_shape
    ho, wo = h // s, w // s
    coef = 1.0 / (s * s)
    # row (ch, oy, ox) -> cols (ch, oy*s+dy, ox*s+dx)
    ch, oy, ox, dy, dx = np.meshgrid(
        np.arange(c), np.arange(ho), np.arange(wo), np.arange(s), np.arange(s), indexing="ij"
    )
    rows = (ch * ho + oy) * wo + ox
    cols = (ch * h + oy * s + dy) * w + ox * s + dx
    vals = np.full(rows.size, coef)
    return sparse.csr_array((vals, (rows.ravel(), cols.ravel())), shape=(c * ho * wo, c * h * w))


def lower(spec: NetworkSpec) -> LoweredNetwork:
    """Convert a validated spec into matrix / activation / averaging stages.

    Raises FormatError for an all-zero conv/linear layer: its weight scale
    would be undefined and the conductance mapping divides by it.
    """
    stages: list[Stage] = []
    shape: tuple[int, ...] = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        out_shape = _layer_out_shape(layer, shape, idx)
        if isinstance(layer, ConvSpec):
            mat = _conv_matrix(layer.weights.astype(np.float64), shape, layer.stride, layer.padding)
            w_max = float(np.max(np.abs(layer.weights)))
            if w_max == 0.0:
                raise FormatError(f"layer {idx}: all-zero conv layer, weight scale undefined")
            bias = None
            if layer.bias is not None:
                bias = np.repeat(layer.bias.astype(np.float64), out_shape[1] * out_shape[2])
            stages.append(LinearStage(mat, w_max, bias, out_shape))
        elif isinstance(layer, LinearSpec):
            mat = np.ascontiguousarray(layer.weights, dtype=np.float64)
            w_max = float(np.max(np.abs(mat)))
            if w_max == 0.0:
                raise FormatError(f"layer {idx}: all-zero linear layer, weight scale undefined")
            bias = None if layer.bias is None else layer.bias.astype(np.float64)
            stages.append(LinearStage(mat, w_max, bias, out_shape))
        elif isinstance(layer, ActivationSpec):
            stages.append(ActivationStage(layer.kind, out_shape))
        elif isinstance(layer, AvgPoolSpec):
            stages.append(PoolStage(_pool_matrix(shape, layer.window), layer.window, out_shape))
        shape = out_shape
    return LoweredNetwork(spec.input_shape, tuple(stages))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def apply_activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "softplus":
        return softplus(x)
    if kind == "identity":
        return x
    raise ValueError(f"unsupported activation {kind!r}")


def reference_forward(net: LoweredNetwork, x: np.ndarray) -> list[np.ndarray]:
    """Exact (noise-free, quantization-free) evaluation of the lowered network.

    Returns the output vector of every stage in order; the last entry is the
    network output.  This is the plain network function, without the readout
    gain applied by the analog implementation.
    """
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size != net.input_size:
        raise ValueError(f"input size {v.size}, network expects {net.input_size}")
    out: list[np.ndarray] = []
    for stage in net.stages:
        if isinstance(stage, LinearStage):
            v = stage.matrix @ v
            if stage.bias is not None:
                v = v + stage.bias
        elif isinstance(stage, ActivationStage):
            v = apply_activation(stage.kind, v)
        else:
            v = stage.matrix @ v
        out.append(v)
    return out


# ---------------------------------------------------------------------------
# manifest + blob file format
# ---------------------------------------------------------------------------
#
# A network on disk is a JSON manifest plus a sidecar blob of little-endian
# float32.  The manifest records, per layer, the element offset and count of
# its weights (and bias) inside the blob.  Conv weights are stored
# [out][in][kh][kw], linear weights row-major [out][in]; row = output neuron.


def _blob_slice(blob: np.ndarray, ref, what: str) -> np.ndarray:
    try:
        offset, count = int(ref["offset"]), int(ref["count"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{what}: malformed blob reference {ref!r}") from e
    if offset < 0 or count < 0 or offset + count > blob.size:
        raise FormatError(
            f"{what}: blob reference [{offset}:{offset + count}] outside blob of {blob.size} elements"
        )
    return blob[offset : offset + count].astype(np.float64)


def _load_json(path: Path, expect_format: str) -> dict:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: cannot read manifest: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != expect_format:
        raise FormatError(f"{path}: not a {expect_format} manifest")
    if int(doc.get("version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")
    return doc


def _load_blob(manifest_path: Path, doc: dict) -> np.ndarray:
    blob_name = doc.get("blob")
    if not isinstance(blob_name, str):
        raise FormatError(f"{manifest_path}: missing blob file name")
    blob_path = manifest_path.parent / blob_name
    try:
        raw = blob_path.read_bytes()
    except OSError as e:
        raise FormatError(f"{blob_path}: cannot read blob: {e}") from e
    if len(raw) % 4:
        raise FormatError(f"{blob_path}: blob length {len(raw)} is not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype="<f4")


def parse_network(path: str | Path) -> NetworkSpec:
    """Load and validate a network manifest + weight blob."""
    path = Path(path)
    doc = _load_json(path, NETWORK_FORMAT)
    blob = _load_blob(path, doc)
    try:
        input_shape = tuple(int(d) for d in doc["input_shape"])
        raw_layers = list(doc["layers"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed manifest: {e}") from e

    layers: list[LayerSpec] = []
    shape: tuple[int, ...] = input_shape
    for idx, entry in enumerate(raw_layers):
        kind = entry.get("kind") if isinstance(entry, dict) else None
        where = f"{path} layer {idx}"
        if kind == "conv":
            try:
                o = int(entry["out_channels"])
                k = int(entry["kernel_size"])
                stride = int(entry.get("stride", 1))
                padding = int(entry.get("padding", k // 2))
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{where}: malformed conv entry: {e}") from e
            if len(shape) != 3:
                raise FormatError(f"{where}: conv after flattening")
            i = shape[0]
            w = _blob_slice(blob, entry.get("weights"), where)
            if w.size != o * i * k * k:
                raise FormatError(f"{where}: weight count {w.size}, expected {o * i * k * k}")
            bias = None
            if entry.get("bias") is not None:
                bias = _blob_slice(blob, entry["bias"], where + " bias")
                if bias.size != o:
                    raise FormatError(f"{where}: bias count {bias.size}, expected {o}")
            layers.append(ConvSpec(o, k, stride, padding, w.reshape(o, i, k, k), bias))
        elif kind == "linear":
            try:
                m = int(entry["out_features"])
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{where}: malformed linear entry: {e}") from e
            l = int(entry.get("in_features", int(np.prod(shape))))
            if l != int(np.prod(shape)):
                raise FormatError(f"{where}: in_features {l} vs upstream size {int(np.prod(shape))}")
            w = _blob_slice(blob, entry.get("weights"), where)
            if w.size != m * l:
                raise FormatError(f"{where}: weight count {w.size}, expected {m * l}")
            bias = None
            if entry.get("bias") is not None:
                bias = _blob_slice(blob, entry["bias"], where + " bias")
                if bias.size != m:
                    raise FormatError(f"{where}: bias count {bias.size}, expected {m}")
            layers.append(LinearSpec(w.reshape(m, l), bias))
        elif kind == "activation":
            fn = entry.get("fn")
            if fn not in ACTIVATION_KINDS:
                raise FormatError(f"{where}: unsupported activation {fn!r}")
            layers.append(ActivationSpec(fn))
        elif kind == "avgpool":
            try:
                s = int(entry["window"])
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{where}: malformed avgpool entry: {e}") from e
            layers.append(AvgPoolSpec(s))
        else:
            raise FormatError(f"{where}: unsupported layer kind {kind!r}")
        layers_spec = layers[-1]
        shape = _layer_out_shape(layers_spec, shape, idx)
    return NetworkSpec(input_shape, tuple(layers))


def write_network(spec: NetworkSpec, manifest_path: str | Path, blob_name: str | None = None) -> None:
    """Serialize a NetworkSpec as manifest + float32 blob (inverse of parse_network)."""
    manifest_path = Path(manifest_path)
    if blob_name is None:
        blob_name = manifest_path.stem + ".bin"
    chunks: list[np.ndarray] = []
    offset = 0

    def push(arr: np.ndarray) -> dict:
        nonlocal offset
        flat = np.asarray(arr, dtype="<f4").ravel()
        ref = {"offset": offset, "count": int(flat.size)}
        chunks.append(flat)
        offset += flat.size
        return ref

    entries = []
    shape: tuple[int, ...] = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            entry = {
                "kind": "conv",
                "out_channels": layer.out_channels,
                "kernel_size": layer.kernel_size,
                "stride": layer.stride,
                "padding": layer.padding,
                "weights": push(layer.weights),
                "bias": None if layer.bias is None else push(layer.bias),
            }
        elif isinstance(layer, LinearSpec):
            entry = {
                "kind": "linear",
                "out_features": int(layer.weights.shape[0]),
                "in_features": int(layer.weights.shape[1]),
                "weights": push(layer.weights),
                "bias": None if layer.bias is None else push(layer.bias),
            }
        elif isinstance(layer, ActivationSpec):
            entry = {"kind": "activation", "fn": layer.kind}
        else:
            entry = {"kind": "avgpool", "window": layer.window}
        entries.append(entry)
        shape = _layer_out_shape(layer, shape, idx)

    doc = {
        "format": NETWORK_FORMAT,
        "version": FORMAT_VERSION,
        "input_shape": list(spec.input_shape),
        "blob": blob_name,
        "layers": entries,
    }
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    (manifest_path.parent / blob_name).write_bytes(blob.tobytes())


def parse_inputs(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Load an input batch: returns (batch array of shape (B,C,H,W), labels or None)."""
    path = Path(path)
    doc = _load_json(path, INPUTS_FORMAT)
    blob = _load_blob(path, doc)
    try:
        shape = tuple(int(d) for d in doc["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed shape: {e}") from e
    if len(shape) != 4 or any(d <= 0 for d in shape):
        raise FormatError(f"{path}: batch shape must be (B,C,H,W), got {shape}")
    if blob.size != int(np.prod(shape)):
        raise FormatError(f"{path}: blob has {blob.size} elements, shape needs {int(np.prod(shape))}")
    labels = None
    if doc.get("labels") is not None:
        labels = np.asarray(doc["labels"], dtype=np.int64)
        if labels.shape != (shape[0],):
            raise FormatError(f"{path}: {labels.size} labels for batch of {shape[0]}")
    return blob.reshape(shape).astype(np.float64), labels


def write_inputs(
    batch: np.ndarray, manifest_path: str | Path, labels: np.ndarray | None = None, blob_name: str | None = None
) -> None:
    manifest_path = Path(manifest_path)
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"batch must be (B,C,H,W), got shape {batch.shape}")
    if blob_name is None:
        blob_name = manifest_path.stem + ".bin"
    doc = {
        "format": INPUTS_FORMAT,
        "version": FORMAT_VERSION,
        "shape": [int(d) for d in batch.shape],
        "blob": blob_name,
        "labels": None if labels is None else [int(v) for v in labels],
    }
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (manifest_path.parent / blob_name).write_bytes(np.asarray(batch, dtype="<f4").tobytes())
