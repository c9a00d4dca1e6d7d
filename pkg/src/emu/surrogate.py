"""U-Net field surrogate: input encoding, network, training and checkpoints.

The network maps a single-channel tissue/antenna raster to two channels
(real and imaginary part of E_z divided by the model's scale ``s``).
"""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, PreconditionError, ShapeError, ValidationError
from .nn import Adam, Conv1x1, Conv3x3, MaxPool2x2, ReLU, UpConv2x2
from .phantom import BACKGROUND, MAX_LABEL
from .solver import FieldMap

log = logging.getLogger(__name__)

SENTINEL = 2.0
CHECKPOINT_MAGIC = b"EMUCKPT\x01"
CHECKPOINT_SCHEMA = 1


def encode_input(grid, antenna):
    """Tissue ids scaled to [0, 1] with the antenna cell set to ``SENTINEL``."""
    if not (0 <= antenna.i < grid.height and 0 <= antenna.j < grid.width):
        raise IndexError(f"antenna ({antenna.i}, {antenna.j}) outside "
                         f"{grid.height}x{grid.width} grid")
    enc = grid.labels.astype(np.float32) / MAX_LABEL
    enc[grid.labels == BACKGROUND] = 0.0
    enc[antenna.i, antenna.j] = SENTINEL
    return enc


class UNet:
    """Encoder/decoder with skip concatenation.

    Encoder stage ``k`` has ``base * 2**k`` channels and ends in a 2x2 max
    pool; the bottleneck keeps the deepest encoder width.
    """

    def __init__(self, stages=4, base_width=16, seed=0, dtype=np.float32, in_channels=1,
                 out_channels=2):
        if stages < 1 or base_width < 1:
            raise ConfigError("stages and base width must be >= 1")
        self.stages = stages
        self.base_width = base_width
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = [base_width * 2 ** k for k in range(stages)]
        self.layers = {}
        cin = in_channels
        for k, w in enumerate(widths):
            self.layers[f"enc{k}.conv1"] = Conv3x3(cin, w, rng, dtype, input_grad=k > 0)
            self.layers[f"enc{k}.conv2"] = Conv3x3(w, w, rng, dtype)
            cin = w
        self.layers["bottleneck.conv1"] = Conv3x3(cin, cin, rng, dtype)
        self.layers["bottleneck.conv2"] = Conv3x3(cin, cin, rng, dtype)
        for k in reversed(range(stages)):
            w = widths[k]
            self.layers[f"up{k}"] = UpConv2x2(cin, w, rng, dtype)
            self.layers[f"dec{k}.conv1"] = Conv3x3(2 * w, w, rng, dtype)
            self.layers[f"dec{k}.conv2"] = Conv3x3(w, w, rng, dtype)
            cin = w
        self.layers["head"] = Conv1x1(cin, out_channels, rng, dtype)
        self._relus = {}
        self._pools = {}

    @property
    def multiple(self):
        return 2 ** self.stages

    def parameters(self):
        return {f"{name}.{p}": arr for name, layer in self.layers.items()
                for p, arr in layer.params.items()}

    def gradients(self):
        return {f"{name}.{p}": arr for name, layer in self.layers.items()
                for p, arr in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers.values():
            layer.zero_grad()

    def _conv_relu(self, name, x, train):
        y = self.layers[name].forward(x, train)
        relu = self._relus.setdefault(name, ReLU())
        return relu.forward(y, train)

    def _conv_relu_back(self, name, dy):
        return self.layers[name].backward(self._relus[name].backward(dy))

    def forward(self, x, train=False):
        """``x`` is (N, H, W, C) with H and W multiples of ``self.multiple``."""
        n, h, w, _ = x.shape
        if h % self.multiple or w % self.multiple:
            raise ShapeError(f"spatial dims {h}x{w} are not multiples of {self.multiple}")
        x = x.astype(self.dtype, copy=False)
        skips = []
        for k in range(self.stages):
            x = self._conv_relu(f"enc{k}.conv1", x, train)
            x = self._conv_relu(f"enc{k}.conv2", x, train)
            skips.append(x)
            x = self._pools.setdefault(k, MaxPool2x2()).forward(x, train)
        x = self._conv_relu("bottleneck.conv1", x, train)
        x = self._conv_relu("bottleneck.conv2", x, train)
        for k in reversed(range(self.stages)):
            x = self.layers[f"up{k}"].forward(x, train)
            x = np.concatenate([x, skips[k]], axis=-1)
            x = self._conv_relu(f"dec{k}.conv1", x, train)
            x = self._conv_relu(f"dec{k}.conv2", x, train)
        return self.layers["head"].forward(x, train)

    def backward(self, dout):
        """Accumulate parameter gradients for the most recent training forward."""
        dx = self.layers["head"].backward(dout.astype(self.dtype, copy=False))
        dskips = [None] * self.stages
        for k in range(self.stages):
            dx = self._conv_relu_back(f"dec{k}.conv2", dx)
            dx = self._conv_relu_back(f"dec{k}.conv1", dx)
            w = dx.shape[-1] // 2
            dskips[k] = dx[..., w:]
            dx = self.layers[f"up{k}"].backward(np.ascontiguousarray(dx[..., :w]))
        dx = self._conv_relu_back("bottleneck.conv2", dx)
        dx = self._conv_relu_back("bottleneck.conv1", dx)
        for k in reversed(range(self.stages)):
            dx = self._pools[k].backward(dx) + dskips[k]
            dx = self._conv_relu_back(f"enc{k}.conv2", dx)
            dx = self._conv_relu_back(f"enc{k}.conv1", dx)
        return dx


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stages: int = 4
    base_width: int = 16
    # validation subjects are the manifest entries tagged "val"
    validation: str = "by_subject"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch size and epoch count must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SurrogateModel:
    net: UNet
    scale: float
    frequency: float
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("normalization scale must be positive")

    @property
    def weights(self):
        return self.net.parameters()

    def architecture(self):
        return {"kind": "unet", "stages": self.net.stages,
                "base_width": self.net.base_width, "in_channels": 1, "out_channels": 2,
                "sentinel": SENTINEL}


def _pad(batch, multiple):
    n, h, w = batch.shape
    hp = -(-h // multiple) * multiple
    wp = -(-w // multiple) * multiple
    out = np.zeros((n, hp, wp, 1), dtype=np.float32)
    out[:, :h, :w, 0] = batch
    return out


def predict(model, encodings):
    """Complex field predictions (N, H, W) in V/m for a stack of encodings."""
    enc = np.asarray(encodings, dtype=np.float32)
    single = enc.ndim == 2
    if single:
        enc = enc[None]
    if enc.ndim != 3:
        raise ShapeError(f"encodings must be (H, W) or (N, H, W), got {enc.shape}")
    h, w = enc.shape[1:]
    out = model.net.forward(_pad(enc, model.net.multiple), train=False)[:, :h, :w]
    field = (out[..., 0].astype(np.float64) + 1j * out[..., 1].astype(np.float64)) * model.scale
    return field[0] if single else field


def forward(model, encoding):
    enc = np.asarray(encoding)
    if enc.ndim != 2:
        raise ShapeError("forward takes a single (H, W) encoding")
    return FieldMap(predict(model, enc), model.frequency)


def _as_array(fields):
    if isinstance(fields, FieldMap):
        return fields.values[None]
    if isinstance(fields, (list, tuple)):
        return np.stack([f.values if isinstance(f, FieldMap) else np.asarray(f) for f in fields])
    arr = np.asarray(fields)
    return arr[None] if arr.ndim == 2 else arr


def loss(targets, predictions, scale=1.0):
    """Mean over samples and voxels of |y - y_hat|^2 / scale^2."""
    y = _as_array(targets)
    yh = _as_array(predictions)
    if y.shape != yh.shape:
        raise ShapeError(f"target shape {y.shape} != prediction shape {yh.shape}")
    d = (y - yh) / scale
    return float(np.mean(d.real ** 2 + d.imag ** 2))


def _targets_to_channels(targets, scale, shape, dtype):
    t = np.zeros(shape, dtype=dtype)
    y = np.asarray(targets) / scale
    h, w = y.shape[1:]
    t[:, :h, :w, 0] = y.real
    t[:, :h, :w, 1] = y.imag
    return t


def backward(model, encodings, targets):
    """Loss and exact gradients for one batch.

    ``targets`` are complex fields in V/m; the loss is computed on targets
    divided by ``model.scale``.  Returns ``(loss, {name: gradient})``.
    """
    net = model.net
    enc = np.asarray(encodings, dtype=np.float32)
    if enc.ndim == 2:
        enc = enc[None]
    tg = _as_array(targets)
    if tg.shape != enc.shape:
        raise ShapeError(f"targets {tg.shape} do not match inputs {enc.shape}")
    n, h, w = enc.shape
    x = _pad(enc, net.multiple).astype(net.dtype)
    net.zero_grad()
    out = net.forward(x, train=True)
    t = _targets_to_channels(tg, model.scale, out.shape, net.dtype)
    resid = out - t
    resid[:, h:] = 0
    resid[:, :, w:] = 0
    value = float(np.sum(resid.astype(np.float64) ** 2) / (n * h * w))
    net.backward(resid * (2.0 / (n * h * w)))
    return value, {k: v.copy() for k, v in net.gradients().items()}


def count_split(train_subjects, val_subjects, antennas):
    """Sample counts (N_train, N_val) for a split-by-subject protocol."""
    if train_subjects < 1 or val_subjects < 1 or antennas < 1:
        raise PreconditionError("subject and antenna counts must be >= 1")
    return train_subjects * antennas, val_subjects * antennas


def target_scale(targets):
    """Median over samples of the per-sample peak |y|."""
    peaks = np.abs(_as_array(targets)).reshape(len(targets), -1).max(axis=1)
    s = float(np.median(peaks))
    if not s > 0:
        raise ValidationError("training targets are identically zero")
    return s


def evaluate_mse(model, encodings, targets, batch_size=8):
    total = 0.0
    n = len(encodings)
    for start in range(0, n, batch_size):
        pred = predict(model, encodings[start:start + batch_size])
        d = (np.asarray(targets[start:start + batch_size]) - pred) / model.scale
        total += float(np.sum(d.real ** 2 + d.imag ** 2))
    return total / (n * np.asarray(encodings[0]).size)


def train(train_data, val_data, config: TrainConfig, frequency, callback=None):
    """Fit a surrogate; returns the model holding the best-validation weights.

    ``train_data`` and ``val_data`` are ``(encodings, targets)`` pairs of
    stacked arrays (N, H, W).  ``val_data`` may be None, in which case the
    final weights are returned and validation MSE is not recorded.
    """
    enc, tg = train_data
    enc = np.asarray(enc, dtype=np.float32)
    tg = np.asarray(tg)
    if len(enc) == 0:
        raise ConfigError("training split is empty")
    if val_data is not None and len(val_data[0]) == 0:
        raise ConfigError("validation split is empty")
    net = UNet(config.stages, config.base_width, seed=config.seed)
    model = SurrogateModel(net, target_scale(tg), float(frequency))
    opt = Adam(net.parameters(), config.learning_rate, config.beta1, config.beta2,
               config.adam_eps)
    order_rng = np.random.default_rng([config.seed, 1])
    best = (math.inf, None, -1)
    trace = []
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(enc))
        running = 0.0
        for start in range(0, len(perm), config.batch_size):
            idx = np.sort(perm[start:start + config.batch_size])
            value, _ = _step(model, opt, enc[idx], tg[idx])
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch)
            running += value * len(idx)
        entry = {"epoch": epoch, "train_mse": running / len(enc)}
        if val_data is not None:
            val_mse = evaluate_mse(model, val_data[0], val_data[1], config.batch_size)
            if not math.isfinite(val_mse):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}", epoch)
            entry["val_mse"] = val_mse
            if val_mse < best[0]:
                best = (val_mse, {k: v.copy() for k, v in net.parameters().items()}, epoch)
            entry["best_val_mse"] = best[0]
        trace.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if callback is not None:
            callback(entry)
    if best[1] is not None:
        _load_weights(net, best[1])
    model.trace = trace
    return model


def _step(model, opt, enc, tg):
    net = model.net
    n, h, w = enc.shape
    x = _pad(enc, net.multiple)
    net.zero_grad()
    out = net.forward(x, train=True)
    t = _targets_to_channels(tg, model.scale, out.shape, net.dtype)
    resid = out - t
    resid[:, h:] = 0
    resid[:, :, w:] = 0
    value = float(np.sum(np.square(resid, dtype=np.float64)) / (n * h * w))
    net.backward(resid * np.float32(2.0 / (n * h * w)))
    opt.step(net.parameters(), net.gradients())
    return value, None


def _load_weights(net, weights):
    params = net.parameters()
    for k, v in weights.items():
        if k not in params:
            raise ValidationError(f"unknown tensor {k!r}")
        if params[k].shape != v.shape:
            raise ValidationError(f"tensor {k!r} has shape {v.shape}, expected {params[k].shape}")
        params[k][...] = v


def save_checkpoint(model, path):
    params = model.net.parameters()
    names = sorted(params)
    tensors = []
    offset = 0
    blob = io.BytesIO()
    for name in names:
        data = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(params[name].shape),
                        "offset": offset, "nbytes": len(data)})
        blob.write(data)
        offset += len(data)
    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "architecture": model.architecture(),
        "frequency": model.frequency,
        "scale": model.scale,
        "dtype": "float32-le",
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob.getvalue())
    return Path(path)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path} is not a surrogate checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen)), len(CHECKPOINT_MAGIC) + 8 + hlen


def load_checkpoint(path):
    header, data_start = read_checkpoint_header(path)
    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValidationError(f"unsupported checkpoint schema {header.get('schema_version')}")
    arch = header["architecture"]
    net = UNet(arch["stages"], arch["base_width"])
    raw = Path(path).read_bytes()[data_start:]
    weights = {}
    for t in header["tensors"]:
        chunk = raw[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise ValidationError(f"checkpoint truncated in tensor {t['name']!r}")
        weights[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"])
    if set(weights) != set(net.parameters()):
        raise ValidationError("checkpoint tensor set does not match its architecture")
    _load_weights(net, weights)
    return SurrogateModel(net, float(header["scale"]), float(header["frequency"]))


def clone(model):
    return copy.deepcopy(model)
