"""Network topology, loss, backprop and weight serialization.

The architecture is a stack of three layer groups -- two same-padded k x k
convolutions followed by a 2x2 max-pool -- then a tanh hidden
fully-connected layer and a linear output layer producing 2*N landmark
coordinates (x1, y1, ..., xN, yN) in the crop-relative unit frame.
"""
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nn
from .errors import (
    ShapeMismatchError,
    SpecValidationError,
    WeightChecksumError,
    WeightFormatError,
    WeightSpecMismatchError,
    WeightTruncationError,
    WeightVersionError,
)

__all__ = [
    "CoordFrame", "LandmarkSet", "GroupSpec", "NetworkSpec", "WeightStore",
    "default_spec", "build_network", "forward", "loss_and_grad", "backward",
    "receptive_field", "save_weights", "load_weights", "predict_landmarks",
]

_MAGIC = b"SDNW"
_FORMAT_VERSION = 1


class CoordFrame(Enum):
    CROP_UNIT = "crop_relative_unit"
    IMAGE = "image_pixels"


@dataclass
class LandmarkSet:
    """Ordered (x, y) points tagged with their coordinate frame."""
    points: np.ndarray
    frame: CoordFrame

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise SpecValidationError(
                f"landmarks must be an (n, 2) array, got shape {self.points.shape}")
        if self.points.shape[0] < 1:
            raise SpecValidationError("landmark set must contain at least one point")
        if not isinstance(self.frame, CoordFrame):
            self.frame = CoordFrame(self.frame)
        if self.frame is CoordFrame.CROP_UNIT and not np.all(np.isfinite(self.points)):
            raise SpecValidationError("crop-unit landmarks must be finite")

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class GroupSpec:
    kernel_size: int = 3
    channels_conv1: int = 32
    channels_conv2: int = 32


@dataclass(frozen=True)
class NetworkSpec:
    n_landmarks: int
    input_side: int = 64
    groups: tuple = (GroupSpec(3, 32, 32), GroupSpec(3, 64, 64), GroupSpec(3, 128, 128))
    fc_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.groups) != 3:
            raise SpecValidationError(
                f"exactly 3 groups required, got {len(self.groups)}")
        if self.n_landmarks < 1:
            raise SpecValidationError(f"n_landmarks must be >= 1, got {self.n_landmarks}")
        if self.fc_hidden < 1:
            raise SpecValidationError(f"fc_hidden must be >= 1, got {self.fc_hidden}")
        side = self.input_side
        for i, g in enumerate(self.groups, start=1):
            if g.kernel_size < 1 or g.kernel_size % 2 == 0:
                raise SpecValidationError(
                    f"group {i}: kernel_size must be odd and >= 1 to preserve the "
                    f"spatial size, got {g.kernel_size}")
            if g.channels_conv1 < 1 or g.channels_conv2 < 1:
                raise SpecValidationError(f"group {i}: channel counts must be >= 1")
            if side % 2:
                raise SpecValidationError(
                    f"group {i}: spatial size {side} is not divisible by 2 at pooling")
            side //= 2
        if side < 1:
            raise SpecValidationError("input_side too small for three pooling stages")

    @property
    def out_dim(self):
        return 2 * self.n_landmarks

    @property
    def final_side(self):
        return self.input_side // 8

    @property
    def flat_features(self):
        return self.groups[-1].channels_conv2 * self.final_side * self.final_side

    def to_dict(self):
        return {
            "n_landmarks": self.n_landmarks,
            "input_side": self.input_side,
            "groups": [[g.kernel_size, g.channels_conv1, g.channels_conv2]
                       for g in self.groups],
            "fc_hidden": self.fc_hidden,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_landmarks=d["n_landmarks"],
            input_side=d["input_side"],
            groups=tuple(GroupSpec(*g) for g in d["groups"]),
            fc_hidden=d["fc_hidden"],
            seed=d["seed"],
        )


def default_spec(n_landmarks, seed=7, input_side=64):
    return NetworkSpec(n_landmarks=n_landmarks, seed=seed, input_side=input_side)


def layer_ids(spec: NetworkSpec):
    ids = []
    for i in range(1, 4):
        ids += [f"group{i}.conv1", f"group{i}.conv2"]
    ids += ["fc1", "fc2"]
    return ids


@dataclass
class WeightStore:
    """Ordered (layer_id, params) pairs plus the spec that shaped them."""
    spec: NetworkSpec
    layers: dict
    iteration: int = 0

    def __post_init__(self):
        expected = layer_ids(self.spec)
        got = list(self.layers)
        if got != expected:
            raise SpecValidationError(
                f"layer ids {got} do not match the spec layout {expected}")

    def param_arrays(self):
        """Flat (name, array) view over every weight and bias, in layer order."""
        for lid, p in self.layers.items():
            yield f"{lid}.weights", p.weights
            yield f"{lid}.bias", p.bias

    def copy(self):
        layers = {}
        for lid, p in self.layers.items():
            if isinstance(p, nn.ConvParams):
                layers[lid] = nn.ConvParams(p.weights.copy(), p.bias.copy(),
                                            p.stride, p.padding)
            else:
                layers[lid] = nn.FcParams(p.weights.copy(), p.bias.copy())
        return WeightStore(spec=self.spec, layers=layers, iteration=self.iteration)


def _glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build_network(spec: NetworkSpec) -> WeightStore:
    """Initialize weights uniform in +/-sqrt(6/(fan_in+fan_out)), biases 0.

    Deterministic for a fixed spec.seed: layers are drawn in their canonical
    order from one seeded generator.
    """
    rng = np.random.default_rng(spec.seed)
    layers = {}
    in_ch = 1
    for i, g in enumerate(spec.groups, start=1):
        k = g.kernel_size
        pad = (k - 1) // 2
        for j, out_ch in enumerate((g.channels_conv1, g.channels_conv2), start=1):
            w = _glorot_uniform(rng, (out_ch, in_ch, k, k),
                                fan_in=in_ch * k * k, fan_out=out_ch * k * k)
            layers[f"group{i}.conv{j}"] = nn.ConvParams(
                weights=w, bias=np.zeros(out_ch, dtype=np.float32),
                stride=1, padding=pad)
            in_ch = out_ch
    w1 = _glorot_uniform(rng, (spec.fc_hidden, spec.flat_features),
                         fan_in=spec.flat_features, fan_out=spec.fc_hidden)
    layers["fc1"] = nn.FcParams(w1, np.zeros(spec.fc_hidden, dtype=np.float32))
    w2 = _glorot_uniform(rng, (spec.out_dim, spec.fc_hidden),
                         fan_in=spec.fc_hidden, fan_out=spec.out_dim)
    layers["fc2"] = nn.FcParams(w2, np.zeros(spec.out_dim, dtype=np.float32))
    return WeightStore(spec=spec, layers=layers)


def _check_batch(ws, batch):
    batch = np.asarray(batch)
    side = ws.spec.input_side
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (side, side):
        raise SpecValidationError(
            f"input batch must be [B, 1, {side}, {side}], got shape {batch.shape}")
    if batch.dtype not in (np.float32, np.float64):
        batch = batch.astype(np.float32)
    return np.ascontiguousarray(batch)


def _forward_trace(ws: WeightStore, batch):
    """Forward pass keeping every intermediate needed by backward."""
    x = _check_batch(ws, batch)
    trace = []
    for i in range(1, 4):
        for j in (1, 2):
            p = ws.layers[f"group{i}.conv{j}"]
            pre = nn.conv2d(x, p)
            act = nn.tanh_activation(pre)
            trace.append(("conv", f"group{i}.conv{j}", x, act))
            x = act
        pooled, record = nn.maxpool2x2(x)
        trace.append(("pool", f"group{i}.pool", record, None))
        x = pooled
    flat = np.ascontiguousarray(x.reshape(x.shape[0], -1))
    trace.append(("flatten", "flatten", x.shape, None))
    p = ws.layers["fc1"]
    hidden = nn.tanh_activation(nn.fully_connected(flat, p))
    trace.append(("fc_tanh", "fc1", flat, hidden))
    p = ws.layers["fc2"]
    out = nn.fully_connected(hidden, p)
    trace.append(("fc", "fc2", hidden, out))
    return out, trace


def forward(ws: WeightStore, batch):
    """Batch [B, 1, side, side] -> landmark vectors [B, 2N], unit crop frame."""
    out, _ = _forward_trace(ws, batch)
    return out


def loss_and_grad(pred, gt, squared=False):
    """Mean per-sample Euclidean norm of the residual (not squared).

    loss = (1/(2B)) * sum_i ||pred_i - gt_i||_2, with gradient
    (pred_i - gt_i) / (2B ||pred_i - gt_i||_2), zero at the kink.  Passing
    ``squared=True`` switches to the conventional (1/(2B)) sum ||.||^2
    variant for ablations.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"loss_and_grad: pred shape {pred.shape} != gt shape {gt.shape}")
    if pred.ndim == 1:
        pred = pred[None]
        gt = gt[None]
        squeeze = True
    else:
        squeeze = False
    b = pred.shape[0]
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    norms = np.sqrt(np.sum(diff * diff, axis=1))
    if squared:
        loss = float(np.sum(norms * norms) / (2.0 * b))
        d = diff / b
    else:
        loss = float(np.sum(norms) / (2.0 * b))
        safe = np.where(norms > 0.0, norms, 1.0)
        d = diff / (2.0 * b * safe[:, None])
        d[norms == 0.0] = 0.0
    d = d.astype(pred.dtype)
    return loss, (d[0] if squeeze else d)


def backward(ws: WeightStore, batch, gt, squared=False):
    """Loss plus exact gradients for every parameter, keyed by layer id."""
    out, trace = _forward_trace(ws, batch)
    loss, d = loss_and_grad(out, np.asarray(gt), squared=squared)
    grads = {}
    for kind, lid, a, b_ in reversed(trace):
        if kind == "fc":
            g = nn.fc_grad(a, ws.layers[lid], d)
            grads[lid] = g
            d = g.d_input
        elif kind == "fc_tanh":
            d = nn.tanh_grad(b_, d)
            g = nn.fc_grad(a, ws.layers[lid], d)
            grads[lid] = g
            d = g.d_input
        elif kind == "flatten":
            d = d.reshape(a)
        elif kind == "pool":
            d = nn.maxpool2x2_grad(a, d)
        elif kind == "conv":
            d = nn.tanh_grad(b_, d)
            g = nn.conv2d_grad(a, ws.layers[lid], d)
            grads[lid] = g
            d = g.d_input
    return loss, grads


def receptive_field(spec: NetworkSpec):
    """Per-group and cumulative receptive field in input pixels.

    Two stacked k x k stride-1 convolutions see (2k - 1) x (2k - 1); the
    cumulative field composes through the 2x2 stride-2 pools.
    """
    groups = []
    r, jump = 1, 1
    for g in spec.groups:
        k = g.kernel_size
        r += (k - 1) * jump  # conv1
        r += (k - 1) * jump  # conv2
        after_convs = r
        r += jump            # pool window extent
        jump *= 2
        groups.append({"local": 2 * k - 1, "cumulative": after_convs})
    return {"groups": groups, "total": r}


def predict_landmarks(ws: WeightStore, pixels):
    """Single [1, side, side] crop -> LandmarkSet in the unit crop frame."""
    out = forward(ws, np.asarray(pixels)[None])
    pts = out[0].astype(np.float64).reshape(ws.spec.n_landmarks, 2)
    return LandmarkSet(points=pts, frame=CoordFrame.CROP_UNIT)


# --- weight file: magic "SDNW", u16 version, length-prefixed JSON manifest,
# --- raw little-endian float32 payload per layer (weights then bias, in
# --- canonical order), trailing CRC32 over everything before it.

def save_weights(ws: WeightStore, path):
    manifest = json.dumps(
        {"spec": ws.spec.to_dict(), "iteration": ws.iteration},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_MAGIC, struct.pack("<H", _FORMAT_VERSION),
             struct.pack("<I", len(manifest)), manifest]
    for _, arr in ws.param_arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_weights(path, expected_landmarks=None) -> WeightStore:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _FORMAT_VERSION:
        raise WeightVersionError(
            f"{path}: format version {version}, expected {_FORMAT_VERSION}")
    (mlen,) = struct.unpack_from("<I", blob, 6)
    if len(blob) < 10 + mlen + 4:
        raise WeightTruncationError(f"{path}: truncated manifest")
    body, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise WeightChecksumError(f"{path}: checksum mismatch")
    try:
        manifest = json.loads(body[10:10 + mlen].decode("utf-8"))
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFormatError(f"{path}: unreadable manifest ({exc})") from exc
    if expected_landmarks is not None and spec.n_landmarks != expected_landmarks:
        raise WeightSpecMismatchError(
            f"{path}: stores a {spec.n_landmarks}-landmark network, "
            f"expected {expected_landmarks}")
    ws = build_network(spec)
    ws.iteration = int(manifest.get("iteration", 0))
    offset = 10 + mlen
    for name, arr in ws.param_arrays():
        nbytes = arr.size * 4
        if offset + nbytes > len(body):
            raise WeightTruncationError(f"{path}: payload truncated at {name}")
        arr[...] = np.frombuffer(body, dtype="<f4", count=arr.size,
                                 offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(body):
        raise WeightFormatError(
            f"{path}: {len(body) - offset} unexpected trailing payload bytes")
    return ws
