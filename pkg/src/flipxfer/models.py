"""Architecture registry, initialization, and checkpoint serialization.

Two families are supported: plain MLPs (``depth`` affine layers of a fixed
hidden ``width``) and small CNNs (one 3x3 same-padded conv per entry of
``channels``, then global average pooling and an affine head).  Weights use
Kaiming-uniform fan-in scaling, biases start at zero, and all parameters are
float64 so checkpoints round-trip bit-exactly.

Checkpoint file layout: magic ``XFKZ``, one version byte, little-endian
uint32 header length, UTF-8 JSON header (spec, parameter names and shapes,
meta), then the raw little-endian float64 payload in header order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    affine,
    conv2d,
    dropout,
    global_avg_pool,
    relu,
    reshape,
)

MAGIC = b"XFKZ"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint (de)serialization failures."""


class NotACheckpointError(CheckpointError):
    """Magic bytes or version byte do not identify a checkpoint file."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the declared header or payload is complete."""


class HeaderMismatchError(CheckpointError):
    """Header contents disagree with the declared spec or payload."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the parameter count is derivable from it.

    depth counts affine layers for MLPs (depth 2 = one hidden layer) and conv
    layers for CNNs (the affine head is extra and always present).
    """

    family: str
    depth: int
    input_shape: tuple[int, ...]
    num_classes: int
    width: int | None = None
    channels: tuple[int, ...] | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.family not in ("mlp", "cnn"):
            raise ValueError(f"unsupported model family {self.family!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0,1)")
        if self.depth < 1:
            raise ValueError("depth must be positive")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if any(d <= 0 for d in self.input_shape):
            raise ValueError("input_shape extents must be positive")
        if self.family == "mlp":
            if self.width is None or self.width < 1:
                raise ValueError("mlp spec requires a positive width")
        else:
            if self.channels is None or len(self.channels) == 0:
                raise ValueError("cnn spec requires a channel sequence")
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
            if any(c < 1 for c in self.channels):
                raise ValueError("channel extents must be positive")
            if self.depth != len(self.channels):
                raise ValueError("cnn depth must equal len(channels)")
            if len(self.input_shape) != 3:
                raise ValueError("cnn input_shape must be (channels, height, width)")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "width": self.width,
            "channels": list(self.channels) if self.channels is not None else None,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            family=d["family"],
            depth=int(d["depth"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            width=d.get("width"),
            channels=tuple(d["channels"]) if d.get("channels") is not None else None,
            dropout=float(d.get("dropout", 0.0)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Named parameter shapes in forward order."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.family == "mlp":
            d_in = int(np.prod(self.input_shape))
            dims = [d_in] + [self.width] * (self.depth - 1) + [self.num_classes]
            for i in range(self.depth):
                shapes[f"fc{i + 1}.w"] = (dims[i], dims[i + 1])
                shapes[f"fc{i + 1}.b"] = (dims[i + 1],)
        else:
            cin = self.input_shape[0]
            for i, cout in enumerate(self.channels):
                shapes[f"conv{i + 1}.w"] = (cout, cin, 3, 3)
                shapes[f"conv{i + 1}.b"] = (cout,)
                cin = cout
            shapes["head.w"] = (cin, self.num_classes)
            shapes["head.b"] = (self.num_classes,)
        return shapes

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def feature_width(self) -> int:
        """Width of the pre-head representation (used by feature losses)."""
        if self.family == "mlp":
            return self.width if self.depth > 1 else int(np.prod(self.input_shape))
        return self.channels[-1]


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.digest().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].astype("<f8").tobytes())
        return h.hexdigest()[:16]


def build(spec: ModelSpec, seed: int) -> Checkpoint:
    """Initialize a checkpoint: Kaiming-uniform fan-in weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Checkpoint(spec, params, {"seed": int(seed)})


def model_forward(
    spec: ModelSpec,
    params: dict[str, Tensor],
    x: Tensor,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Forward a batch, returning (logits, pre-head features).

    Dropout fires only when train=True and the spec asks for it; eval-mode
    inference is a pure function of (params, input).
    """
    n = x.data.shape[0]
    use_drop = train and spec.dropout > 0.0
    if use_drop and dropout_rng is None:
        raise ValueError("train-mode dropout requires a seeded generator")
    if spec.family == "mlp":
        h = reshape(x, (n, int(np.prod(spec.input_shape))))
        feats = h
        for i in range(spec.depth - 1):
            h = relu(affine(h, params[f"fc{i + 1}.w"], params[f"fc{i + 1}.b"]))
            if use_drop:
                h = dropout(h, spec.dropout, dropout_rng)
            feats = h
        logits = affine(h, params[f"fc{spec.depth}.w"], params[f"fc{spec.depth}.b"])
    else:
        h = x
        for i in range(len(spec.channels)):
            h = relu(conv2d(h, params[f"conv{i + 1}.w"], params[f"conv{i + 1}.b"], stride=1))
            if use_drop:
                h = dropout(h, spec.dropout, dropout_rng)
        feats = global_avg_pool(h)
        logits = affine(feats, params["head.w"], params["head.b"])
    return logits, feats


def as_tensors(ck: Checkpoint, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=requires_grad) for k, v in ck.params.items()}


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != spec.input_shape:
        raise ShapeError("predict(batch)", batch.shape[1:], spec.input_shape)
    return batch


def predict_logits(ck: Checkpoint, batch: np.ndarray) -> np.ndarray:
    """Eval-mode logits (n x num_classes); no softmax, no dropout."""
    batch = _check_batch(ck.spec, batch)
    params = {k: Tensor(v) for k, v in ck.params.items()}
    logits, _ = model_forward(ck.spec, params, Tensor(batch), train=False)
    return logits.data


def predict_features(ck: Checkpoint, batch: np.ndarray) -> np.ndarray:
    """Eval-mode pre-head features (n x feature_width)."""
    batch = _check_batch(ck.spec, batch)
    params = {k: Tensor(v) for k, v in ck.params.items()}
    _, feats = model_forward(ck.spec, params, Tensor(batch), train=False)
    return feats.data


def accuracy(ck: Checkpoint, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties break toward the lowest class index."""
    preds = np.argmax(predict_logits(ck, inputs), axis=1)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# serialization


def save(ck: Checkpoint, path) -> None:
    names = list(ck.params.keys())
    header = {
        "spec": ck.spec.to_dict(),
        "names": names,
        "shapes": {k: list(ck.params[k].shape) for k in names},
        "meta": ck.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            f.write(ck.params[name].astype("<f8").tobytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint file")
    if raw[4] != VERSION:
        raise NotACheckpointError(f"{path}: unsupported checkpoint version {raw[4]}")
    if len(raw) < 9:
        raise TruncatedCheckpointError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderMismatchError(f"{path}: unreadable header ({e})") from e
    spec = ModelSpec.from_dict(header["spec"])
    names = header["names"]
    shapes = {k: tuple(v) for k, v in header["shapes"].items()}
    expected = spec.param_shapes()
    if set(names) != set(expected):
        raise HeaderMismatchError(f"{path}: parameter names disagree with spec")
    for name in names:
        if shapes[name] != expected[name]:
            raise HeaderMismatchError(
                f"{path}: shape of {name!r} is {shapes[name]}, spec says {expected[name]}"
            )
    payload = raw[9 + hlen :]
    total = sum(int(np.prod(shapes[n])) for n in names)
    if len(payload) != 8 * total:
        raise TruncatedCheckpointError(
            f"{path}: payload holds {len(payload) // 8} floats, header declares {total}"
        )
    params: dict[str, np.ndarray] = {}
    off = 0
    for name in names:
        cnt = int(np.prod(shapes[name]))
        arr = np.frombuffer(payload, dtype="<f8", count=cnt, offset=off).astype(np.float64)
        params[name] = arr.reshape(shapes[name])
        off += 8 * cnt
    return Checkpoint(spec, params, header.get("meta", {}))
