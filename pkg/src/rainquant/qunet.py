"""The quantile-regression convolutional encoder-decoder, the pinball loss
and its gradient, Adam, and the training loop.

The network maps a normalized 4-channel brightness-temperature tile to 99
output planes, one per quantile level 0.01 ... 0.99.  The encoder applies
``depth`` stages of (two 3x3 convolutions + nonlinearity, 2x2 max-pool),
doubling the channel width per stage; the decoder mirrors it with nearest-
neighbor 2x upsampling followed by a 3x3 convolution, concatenation of the
matching encoder activation, and two more 3x3 convolutions; a final 1x1
convolution produces the raw (unclamped) quantile planes.

Training minimizes the total pinball loss

    L_q(y, yhat) = q * (y - yhat)        if y - yhat >= 0
                   (q - 1) * (y - yhat)  otherwise

averaged over valid pixels and summed over the 99 levels, with
bias-corrected Adam.  Runs are deterministic given the seeds.

Tensors flow through the network channels-last: inputs are
(batch, H, W, 4) and raw outputs (batch, H, W, 99); the loss functions
take the quantile axis last as well.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rainquant import nn
from rainquant.swath import (
    QUANTILE_LEVELS,
    BadMagicError,
    QuantileField,
    TbScene,
    TileSizeError,
    TruncatedFileError,
)

QuantileLevels = QUANTILE_LEVELS


class TrainingDivergedError(Exception):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch, message="non-finite training loss"):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture parameters.  ``depth`` is the number of 2x downsampling
    stages, so input tiles must be divisible by 2**depth (16 by default)."""

    depth: int = 4
    width: int = 8
    in_channels: int = 4
    out_channels: int = 99
    activation: str = "relu"
    seed: int = 0
    padding: str = "zero"
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError("activation must be 'relu' or 'leaky_relu'")
        if self.padding not in ("zero", "periodic"):
            raise ValueError("padding must be 'zero' or 'periodic'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def tile_multiple(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop parameters (bias-corrected Adam)."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class QuantileUNet:
    """Encoder-decoder quantile regressor built from explicit numpy ops."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        w0 = config.width
        widths = [w0 * 2 ** i for i in range(config.depth + 1)]
        self.enc = []
        c_prev = config.in_channels
        for i, w in enumerate(widths[:-1]):
            c1 = nn.Conv2D(f"enc{i}.conv1", c_prev, w, 3, rng, dtype)
            c2 = nn.Conv2D(f"enc{i}.conv2", w, w, 3, rng, dtype)
            self.enc.append((c1, c2))
            c_prev = w
        self.mid1 = nn.Conv2D("mid.conv1", widths[-2], widths[-1], 3, rng, dtype)
        self.mid2 = nn.Conv2D("mid.conv2", widths[-1], widths[-1], 3, rng, dtype)
        self.dec = []
        for i in reversed(range(config.depth)):
            w = widths[i]
            up = nn.Conv2D(f"dec{i}.up", widths[i + 1], w, 3, rng, dtype)
            c1 = nn.Conv2D(f"dec{i}.conv1", 2 * w, w, 3, rng, dtype)
            c2 = nn.Conv2D(f"dec{i}.conv2", w, w, 3, rng, dtype)
            self.dec.append((up, c1, c2))
        self.head = nn.Conv2D("head", w0, config.out_channels, 1, rng, dtype)
        self._convs = []
        for c1, c2 in self.enc:
            self._convs += [c1, c2]
        self._convs += [self.mid1, self.mid2]
        for up, c1, c2 in self.dec:
            self._convs += [up, c1, c2]
        self._convs.append(self.head)
        self._cache = None

    def params(self):
        """(name, array) pairs in checkpoint order."""
        out = []
        for conv in self._convs:
            out += conv.params()
        return out

    def grads(self):
        out = []
        for conv in self._convs:
            out += conv.grads()
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.params())

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[3] != self.config.in_channels:
            raise ValueError(
                f"input must be (batch, H, W, {self.config.in_channels}), got {x.shape}")
        m = self.config.tile_multiple
        if x.shape[1] % m or x.shape[2] % m:
            raise TileSizeError(
                f"spatial dims {x.shape[1]}x{x.shape[2]} not divisible by {m}; "
                "crop the tile first (crop_to_tile)")

    def forward(self, x, keep=False):
        """Raw quantile planes (batch, H, W, 99) for a normalized input tile."""
        cfg = self.config
        x = np.ascontiguousarray(x, dtype=np.dtype(cfg.dtype))
        self._check_input(x)
        act, pad = cfg.activation, cfg.padding
        caches = {"acts": [], "pools": []}
        h = x
        skips = []
        for c1, c2 in self.enc:
            a1 = c1.forward(h, pad, keep)
            h1 = nn.activation_forward(a1, act)
            a2 = c2.forward(h1, pad, keep)
            h2 = nn.activation_forward(a2, act)
            skips.append(h2)
            h, pool_cache = nn.maxpool2_forward(h2)
            if keep:
                caches["acts"].append((a1, a2))
                caches["pools"].append(pool_cache)
        am1 = self.mid1.forward(h, pad, keep)
        hm1 = nn.activation_forward(am1, act)
        am2 = self.mid2.forward(hm1, pad, keep)
        h = nn.activation_forward(am2, act)
        dec_acts = []
        for (up, c1, c2), skip in zip(self.dec, reversed(skips)):
            hu = nn.upsample2_forward(h)
            au = up.forward(hu, pad, keep)
            hu = nn.activation_forward(au, act)
            hc = nn.concat_channels(hu, skip)
            a1 = c1.forward(hc, pad, keep)
            h1 = nn.activation_forward(a1, act)
            a2 = c2.forward(h1, pad, keep)
            h = nn.activation_forward(a2, act)
            if keep:
                dec_acts.append((au, a1, a2))
        y = self.head.forward(h, pad, keep)
        if keep:
            caches["mid"] = (am1, am2)
            caches["dec"] = dec_acts
            self._cache = caches
        return y

    def backward(self, dy):
        """Backpropagate dL/dy; leaves dL/dparam on each conv's .dw/.db."""
        if self._cache is None:
            raise RuntimeError("call forward(..., keep=True) before backward")
        cfg = self.config
        act = cfg.activation
        caches = self._cache
        dh = self.head.backward(dy)
        dskips = []
        for (up, c1, c2), (au, a1, a2) in zip(reversed(self.dec), reversed(caches["dec"])):
            dh = nn.activation_backward(dh, a2, act)
            dh = c2.backward(dh)
            dh = nn.activation_backward(dh, a1, act)
            dhc = c1.backward(dh)
            dhu, dskip = nn.split_channels(dhc, up.c_out)
            dskips.append(dskip)
            dhu = nn.activation_backward(dhu, au, act)
            dhu = up.backward(dhu)
            dh = nn.upsample2_backward(dhu)
        am1, am2 = caches["mid"]
        dh = nn.activation_backward(dh, am2, act)
        dh = self.mid2.backward(dh)
        dh = nn.activation_backward(dh, am1, act)
        dh = self.mid1.backward(dh)
        # dskips were collected shallowest-first; the encoder walk below
        # runs deepest-first
        for (c1, c2), (a1, a2), pool_cache, dskip in zip(
                reversed(self.enc), reversed(caches["acts"]),
                reversed(caches["pools"]), reversed(dskips)):
            dh2 = nn.maxpool2_backward(dh, pool_cache) + dskip
            dh2 = nn.activation_backward(dh2, a2, act)
            dh1 = c2.backward(dh2)
            dh1 = nn.activation_backward(dh1, a1, act)
            dh = c1.backward(dh1)
        self._cache = None
        return dh


def _promote(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim != target.ndim + 1 or pred.shape[:-1] != target.shape:
        raise ValueError(
            f"pred must be target shape plus a trailing quantile axis: "
            f"pred {pred.shape}, target {target.shape}")
    return pred, target


def pinball_loss(pred, target, levels=QUANTILE_LEVELS) -> float:
    """Total pinball loss: per-level mean over valid pixels, summed over levels.

    ``pred`` carries the quantile axis last, e.g. (batch, H, W, 99) against
    a (batch, H, W) target.  NaN target pixels are excluded from the pixel
    count N.  Raises ValueError when every target pixel is NaN.
    """
    pred, target = _promote(pred, target)
    levels = np.asarray(levels, dtype=pred.dtype)
    if pred.shape[-1] != levels.size:
        raise ValueError(f"pred has {pred.shape[-1]} planes for {levels.size} levels")
    valid = np.isfinite(target)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("empty pinball loss: all target pixels are NaN")
    diff = np.where(valid, target, 0.0)[..., None] - pred
    # q*(y-yhat) on diff >= 0, (q-1)*(y-yhat) below: both equal diff*(q - [diff<0])
    elems = diff * (levels - (diff < 0))
    if not valid.all():
        elems = np.where(valid[..., None], elems, 0.0)
    per_level = elems.reshape(-1, levels.size).sum(axis=0, dtype=np.float64) / n
    return float(per_level.sum())


def pinball_grad(pred, target, levels=QUANTILE_LEVELS) -> np.ndarray:
    """Gradient of :func:`pinball_loss` with respect to ``pred``.

    Element value is (-q if y - yhat >= 0 else 1 - q) / N with N the count
    of valid pixels; the kink y == yhat takes the >= branch.  NaN target
    pixels get zero gradient.
    """
    pred, target = _promote(pred, target)
    levels = np.asarray(levels, dtype=pred.dtype)
    valid = np.isfinite(target)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("empty pinball loss: all target pixels are NaN")
    diff = np.where(valid, target, 0.0)[..., None] - pred
    # -q on the >= branch, (1-q) below: both equal (1-q) - [diff>=0]
    g = ((1.0 - levels) - (diff >= 0)) / n
    if not valid.all():
        g = np.where(valid[..., None], g, 0.0)
    return g.astype(pred.dtype)


def adam_init(params) -> dict:
    """Zeroed first/second-moment state for the given (name, array) pairs."""
    return {
        "t": 0,
        "m": [np.zeros_like(p) for _, p in params],
        "v": [np.zeros_like(p) for _, p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for (_, p), (_, g), m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_loss(model, samples, batch_size=8) -> float:
    """Mean pinball loss over (input, target) pairs, weighted by valid pixels."""
    total = 0.0
    n_total = 0
    for idx in _batches(len(samples), batch_size, np.arange(len(samples))):
        x = np.stack([samples[i][0] for i in idx])
        y = np.stack([samples[i][1] for i in idx])
        n = int(np.isfinite(y).sum())
        if n == 0:
            continue
        total += pinball_loss(model.forward(x), y) * n
        n_total += n
    return total / n_total if n_total else float("nan")


def train(model: QuantileUNet, train_set, val_set, cfg: TrainConfig,
          start_epoch: int = 0, optimizer_state=None, rng=None, on_epoch=None):
    """Train with Adam; returns (history, optimizer_state, rng).

    ``train_set``/``val_set`` are sequences of (input (H, W, 4), target
    (H, W)) pairs with identical tile shapes.  History holds one record per
    epoch with the running train loss and the validation loss.
    Deterministic given the seeds; raises :class:`TrainingDivergedError`
    on non-finite loss.
    """
    if not train_set:
        raise ValueError("empty training set")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    state = optimizer_state if optimizer_state is not None else adam_init(model.params())
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        n_sum = 0
        for idx in _batches(len(train_set), cfg.batch_size, order):
            x = np.stack([train_set[i][0] for i in idx])
            y = np.stack([train_set[i][1] for i in idx])
            pred = model.forward(x, keep=True)
            loss = pinball_loss(pred, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            model.backward(pinball_grad(pred, y))
            adam_step(model.params(), model.grads(), state,
                      cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            n = int(np.isfinite(y).sum())
            loss_sum += loss * n
            n_sum += n
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / n_sum if n_sum else float("nan"),
            "val_loss": evaluate_loss(model, val_set, cfg.batch_size) if val_set else float("nan"),
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history, state, rng


def scene_input(tb_planes) -> np.ndarray:
    """(4, S, P) channel planes -> contiguous (S, P, 4) network input."""
    return np.ascontiguousarray(np.transpose(tb_planes, (1, 2, 0)))


def retrieve_quantiles(model: QuantileUNet, scene: TbScene, planes) -> QuantileField:
    """Run the model on normalized (S, P, 4) planes and wrap the raw output."""
    y = model.forward(planes[None])[0]
    q = np.ascontiguousarray(np.transpose(y, (2, 0, 1)), dtype=np.float32)
    return QuantileField(scene.granule_id, q, scene.lat, scene.lon, scene.scan_time)


_CKPT_MAGIC = b"QNT1"


def save_checkpoint(model: QuantileUNet, path, train_cfg: TrainConfig | None = None,
                    optimizer_state=None, rng=None, epoch: int | None = None) -> None:
    """Serialize the model (and optionally the full training state).

    Layout: magic ``QNT1``, u32 JSON header length, JSON header, then an
    f32 blob of all parameters in the documented order (followed by Adam
    first/second moments when the optimizer state is included).
    """
    params = model.params()
    header = {
        "model": asdict(model.config),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "seed": model.config.seed,
        "param_count": model.param_count(),
        "params": [{"name": name, "shape": list(p.shape)} for name, p in params],
        "epoch": epoch,
        "has_optimizer_state": optimizer_state is not None,
        "adam_t": optimizer_state["t"] if optimizer_state is not None else None,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", len(head))
    blob += head
    for _, p in params:
        blob += np.ascontiguousarray(p, dtype="<f4").tobytes()
    if optimizer_state is not None:
        for key in ("m", "v"):
            for arr in optimizer_state[key]:
                blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, meta).

    ``meta`` carries the stored train config dict, epoch, optimizer state,
    and rng state (None when absent).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != _CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a QNT1 checkpoint")
    (head_len,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + head_len:
        raise TruncatedFileError(f"{path}: truncated header")
    header = json.loads(raw[8:8 + head_len].decode())
    model = QuantileUNet(ModelConfig(**header["model"]))
    params = model.params()
    names = [{"name": name, "shape": list(p.shape)} for name, p in params]
    if names != header["params"]:
        raise TruncatedFileError(f"{path}: parameter table mismatch")
    offset = 8 + head_len
    n_params = sum(p.size for _, p in params)
    n_state = 2 * n_params if header["has_optimizer_state"] else 0
    expected = offset + 4 * (n_params + n_state)
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: payload is {len(raw)} bytes, expected {expected}")

    def take(count):
        nonlocal offset
        flat = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return flat

    dtype = np.dtype(model.config.dtype)
    for _, p in params:
        p[...] = take(p.size).reshape(p.shape).astype(dtype)
    optimizer_state = None
    if header["has_optimizer_state"]:
        optimizer_state = {"t": header["adam_t"], "m": [], "v": []}
        for key in ("m", "v"):
            for _, p in params:
                optimizer_state[key].append(
                    take(p.size).reshape(p.shape).astype(dtype))
    rng = None
    if header.get("rng_state") is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    meta = {
        "train": header.get("train"),
        "epoch": header.get("epoch"),
        "optimizer_state": optimizer_state,
        "rng": rng,
        "param_count": header["param_count"],
    }
    return model, meta
