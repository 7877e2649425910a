"""Network roles, desk-scale architectures and the LANDET01 checkpoint format."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelRole(str, Enum):
    IMAGE_CLASSIFIER = "image_classifier_f1"
    TRANSFER_CLASSIFIER = "transfer_classifier_f1p"
    ATTENTION_NET = "attention_net_g"
    MASK_CLASSIFIER = "mask_classifier_f2"

    @property
    def is_classifier(self) -> bool:
        return self is not ModelRole.ATTENTION_NET


class UnsupportedGeometryError(ValueError):
    pass


class UntrainedModelError(RuntimeError):
    pass


def _conv(out, kernel, padding=0, stride=1):
    return {"kind": "conv", "out": out, "kernel": kernel, "stride": stride, "padding": padding}


def _pool(window=2):
    return {"kind": "maxpool", "window": window, "stride": window}


def _affine(out):
    return {"kind": "affine", "out": out}


RELU = {"kind": "relu"}
FLATTEN = {"kind": "flatten"}
SIGMOID = {"kind": "sigmoid"}


def architecture(role: ModelRole, input_dims, class_count: int) -> list[dict]:
    """Layer specs for ``role``."""
    role = ModelRole(role)
    if role is ModelRole.IMAGE_CLASSIFIER:
        return [
            _conv(16, 3, padding=1), RELU, _pool(),
            _conv(32, 3, padding=1), RELU, _pool(),
            FLATTEN, _affine(128), RELU, _affine(class_count),
        ]
    if role is ModelRole.TRANSFER_CLASSIFIER:
        return [
            _conv(32, 3, padding=1), RELU, _pool(),
            _conv(64, 3, padding=1), RELU, _pool(),
            _conv(128, 3, padding=1), RELU, _pool(),
            FLATTEN, _affine(128), RELU, _affine(class_count),
        ]
    if role is ModelRole.ATTENTION_NET:
        d = int(np.prod(input_dims))
        return [
            FLATTEN, _affine(256), RELU, _affine(256), RELU, _affine(d), SIGMOID,
            {"kind": "reshape", "shape": list(input_dims)},
        ]
    # LeNet-shaped: padding on the first conv keeps 16x16 inputs usable
    return [
        _conv(6, 5, padding=2), RELU, _pool(),
        _conv(16, 5), RELU, _pool(),
        FLATTEN, _affine(120), RELU, _affine(84), RELU, _affine(class_count),
    ]


def _infer_shapes(layers: list[dict], input_dims) -> tuple[list[tuple[str, tuple]], tuple]:
    """Walk the layer list, returning parameter (name, shape) pairs and the output shape."""
    shape = tuple(int(s) for s in input_dims)
    params = []
    for i, layer in enumerate(layers):
        kind = layer["kind"]
        if kind == "conv":
            if len(shape) != 3:
                raise UnsupportedGeometryError(f"layer {i}: conv needs C x H x W, got {shape}")
            c, h, w = shape
            k, s, p = layer["kernel"], layer["stride"], layer["padding"]
            ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if ho < 1 or wo < 1:
                raise UnsupportedGeometryError(f"layer {i}: conv output empty for {shape}")
            params += [(f"{i}.weight", (layer["out"], c, k, k)), (f"{i}.bias", (layer["out"],))]
            shape = (layer["out"], ho, wo)
        elif kind == "maxpool":
            c, h, w = shape
            win, s = layer["window"], layer["stride"]
            if h < win or w < win or (h - win) % s or (w - win) % s:
                raise UnsupportedGeometryError(f"layer {i}: pooling {win}/{s} does not tile {h}x{w}")
            shape = (c, (h - win) // s + 1, (w - win) // s + 1)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "affine":
            if len(shape) != 1:
                raise UnsupportedGeometryError(f"layer {i}: affine needs a vector, got {shape}")
            params += [(f"{i}.weight", (layer["out"], shape[0])), (f"{i}.bias", (layer["out"],))]
            shape = (layer["out"],)
        elif kind == "reshape":
            new = tuple(layer["shape"])
            if int(np.prod(new)) != int(np.prod(shape)):
                raise UnsupportedGeometryError(f"layer {i}: cannot reshape {shape} to {new}")
            shape = new
        elif kind not in ("relu", "sigmoid"):
            raise UnsupportedGeometryError(f"layer {i}: unknown layer kind {kind!r}")
    return params, shape


@dataclass
class Model:
    """A differentiable network with a fixed role.

    ``params`` maps names like ``"3.weight"`` to float32 arrays, ordered as
    the layers that own them. ``metadata`` holds the class count, input dims,
    seed and the number of epochs trained.
    """

    role: ModelRole
    layers: list[dict]
    input_dims: tuple[int, ...]
    class_count: int
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.role = ModelRole(self.role)
        self.input_dims = tuple(int(d) for d in self.input_dims)
        specs, out_shape = _infer_shapes(self.layers, self.input_dims)
        self.output_shape = out_shape
        if [n for n, _ in specs] != list(self.params):
            raise UnsupportedGeometryError("parameter names do not match the layer list")
        for name, shape in specs:
            if tuple(self.params[name].shape) != shape:
                raise UnsupportedGeometryError(
                    f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def trained(self) -> bool:
        return self.metadata.get("epochs_trained", 0) > 0

    def require_trained(self):
        if not self.trained:
            raise UntrainedModelError(f"{self.role.value} model has not been trained")

    def copy(self) -> "Model":
        return Model(self.role, copy.deepcopy(self.layers), self.input_dims, self.class_count,
                     {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.metadata))

    def param_tensors(self) -> dict[str, Tensor]:
        """Fresh trainable leaves sharing memory with ``params``."""
        return {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in self.params.items()}

    def forward(self, x, params: dict[str, Tensor] | None = None) -> Tensor:
        """Run the network on one input or a batch.

        Without ``params`` the weights enter the graph as constants, so only
        the input can receive gradients.
        """
        x = T.as_tensor(x)
        single = x.shape == self.input_dims
        if not single and x.shape[1:] != self.input_dims:
            raise T.ShapeError(f"{self.role.value} expects input {self.input_dims}, got {x.shape}")
        if single:
            x = T.reshape(x, (1,) + self.input_dims)
        if params is None:
            params = {k: Tensor(v, dtype=v.dtype) for k, v in self.params.items()}
        h = x
        n = x.shape[0]
        for i, layer in enumerate(self.layers):
            kind = layer["kind"]
            if kind == "conv":
                h = T.conv2d_apply(h, params[f"{i}.weight"], params[f"{i}.bias"],
                                   layer["stride"], layer["padding"])
            elif kind == "affine":
                h = T.affine_apply(h, params[f"{i}.weight"], params[f"{i}.bias"])
            elif kind == "relu":
                h = T.relu_apply(h)
            elif kind == "sigmoid":
                h = T.sigmoid_apply(h)
            elif kind == "maxpool":
                h = T.maxpool_apply(h, layer["window"], layer["stride"])
            elif kind == "flatten":
                h = T.reshape(h, (n, -1))
            elif kind == "reshape":
                h = T.reshape(h, (n,) + tuple(layer["shape"]))
        if single:
            h = T.reshape(h, self.output_shape)
        return h

    def __call__(self, x) -> np.ndarray:
        return self.forward(x).data


def build_model(role, input_dims, class_count: int, seed: int) -> Model:
    """Fresh model with He-uniform weights and zero biases, deterministic in ``seed``."""
    role = ModelRole(role)
    if any(int(d) < 1 for d in input_dims) or class_count < 1:
        raise UnsupportedGeometryError(f"invalid dims {input_dims} / class count {class_count}")
    layers = architecture(role, input_dims, class_count)
    specs, _ = _infer_shapes(layers, input_dims)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in specs:
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    meta = {"seed": int(seed), "epochs_trained": 0}
    return Model(role, layers, tuple(input_dims), class_count, params, meta)


def argmax_lowest(logits: np.ndarray) -> np.ndarray | int:
    """Argmax along the last axis; numpy already returns the first maximum."""
    out = np.argmax(logits, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def model_predict(model: Model, x) -> tuple[int, np.ndarray]:
    if not model.role.is_classifier:
        raise T.ShapeError("model_predict needs a classifier role")
    logits = model(x)
    if logits.ndim != 1:
        raise T.ShapeError(f"model_predict takes one input, got batch of {logits.shape[0]}")
    return argmax_lowest(logits), logits


def predict_batch(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward a stack of inputs in chunks, returning the stacked outputs."""
    outs = [model(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    if not outs:
        return np.zeros((0,) + tuple(model.output_shape), dtype=np.float32)
    return np.concatenate(outs)


def predict_labels(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.argmax(predict_batch(model, images, batch_size), axis=-1)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LANDET01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeInconsistencyError(CheckpointError):
    pass


def checkpoint_bytes(model: Model) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "role": model.role.value,
        "layers": model.layers,
        "input_dims": list(model.input_dims),
        "class_count": model.class_count,
        "metadata": model.metadata,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.params.values())
    return MAGIC + struct.pack("<I", len(head)) + head + blobs


def checkpoint_save(model: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def checkpoint_from_bytes(raw: bytes) -> Model:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a LANDET01 checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedCheckpointError("truncated before header length")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise TruncatedCheckpointError("truncated inside header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {header.get('format_version')} != supported {FORMAT_VERSION}")

    declared = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["params"])
    have = (len(raw) - pos) // 4
    if have < declared:
        raise TruncatedCheckpointError(f"header declares {declared} floats but {have} present")
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(
            np.float32).reshape(shape)
        pos += nbytes
    if pos != len(raw):
        raise ShapeInconsistencyError(f"{len(raw) - pos} trailing bytes after parameter blobs")
    try:
        return Model(header["role"], header["layers"], tuple(header["input_dims"]),
                     header["class_count"], params, header["metadata"])
    except UnsupportedGeometryError as exc:
        raise ShapeInconsistencyError(str(exc)) from exc


def checkpoint_load(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())
