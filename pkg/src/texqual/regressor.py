"""Fully-convolutional patch regressor with GAP head, trained from scratch.

Architecture: four conv blocks (3x3 kernel, bias, ReLU), channel widths
(16, 32, 64, 64) by default, stride 2 in the first three blocks and 1
in the last, for a total downsample ratio of 8.  A global average pool
feeds a linear head and a sigmoid:

    score = sigmoid(A . GAP(psi) + b)

where psi is the last block's feature tensor.  The network is fully
convolutional and accepts any input of at least 32x32 pixels.

Training minimizes the Huber loss with Adam; the learning-rate schedule
multiplies by `lr_decay` every `decay_every` epochs.  Initialization is
a fixed He fan-in scheme drawn from the toolkit RNG, so identical seeds
give bit-identical parameters and training runs.

Parameters live in one flat float array; per-layer weight views alias
into it, which keeps the optimizer and finite-difference checks simple.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError, SizeError
from .image import ImageF, Rect, patch_positions
from .kernels import conv2d_backward, conv2d_forward
from .rng import derive_seed, make_rng

MIN_INPUT = 32
DEFAULT_WIDTHS = (16, 32, 64, 64)
DEFAULT_STRIDES = (2, 2, 2, 1)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    lr_decay: float = 0.1
    decay_every: int = 40
    epochs: int = 120
    batch_size: int = 32
    patches_per_image: int = 16
    huber_delta: float = 0.1
    patch_size: int = 64
    aug_noise_sigma: float = 0.005
    aug_exposure_ev: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.lr_decay, self.huber_delta) <= 0:
            raise ConfigError("lr, lr_decay and huber_delta must be positive")
        if min(self.epochs, self.batch_size, self.patches_per_image, self.decay_every) < 1:
            raise ConfigError("epochs, batch_size, patches_per_image, decay_every must be >= 1")
        if self.patch_size < MIN_INPUT:
            raise ConfigError(f"patch_size must be >= {MIN_INPUT}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


class RegressorNet:
    """Conv stack + GAP + linear head, parameters in one flat store."""

    def __init__(self, in_channels=1, widths=DEFAULT_WIDTHS, strides=DEFAULT_STRIDES,
                 dtype=np.float32, init_seed=0):
        if len(widths) != len(strides):
            raise ConfigError("widths and strides must have equal length")
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        self.strides = tuple(int(s) for s in strides)
        self.dtype = np.dtype(dtype)
        self.init_seed = int(init_seed)

        shapes = []
        cin = self.in_channels
        for cout in self.widths:
            shapes.append(((cout, cin, 3, 3), (cout,)))
            cin = cout
        self.head_dim = cin
        n = sum(np.prod(ws) + np.prod(bs) for ws, bs in shapes) + self.head_dim + 1
        self.theta = np.zeros(int(n), dtype=self.dtype)

        self.conv_w = []
        self.conv_b = []
        off = 0
        for ws, bs in shapes:
            k = int(np.prod(ws))
            self.conv_w.append(self.theta[off : off + k].reshape(ws))
            off += k
            k = int(np.prod(bs))
            self.conv_b.append(self.theta[off : off + k])
            off += k
        self.head_w = self.theta[off : off + self.head_dim]
        self.head_b = self.theta[off + self.head_dim : off + self.head_dim + 1]

        self._he_init()

    def _he_init(self):
        rng = make_rng(self.init_seed)
        for w, b in zip(self.conv_w, self.conv_b):
            fan_in = w.shape[1] * 9
            w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), w.shape)
            b[...] = 0.0
        self.head_w[...] = rng.normal(0.0, 1.0 / np.sqrt(self.head_dim), self.head_dim)
        self.head_b[...] = 0.0

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    def copy(self) -> "RegressorNet":
        dup = RegressorNet(self.in_channels, self.widths, self.strides,
                           self.dtype, self.init_seed)
        dup.theta[...] = self.theta
        return dup

    def astype(self, dtype) -> "RegressorNet":
        dup = RegressorNet(self.in_channels, self.widths, self.strides,
                           dtype, self.init_seed)
        dup.theta[...] = self.theta.astype(dup.dtype)
        return dup


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    eps = float(np.finfo(z.dtype).eps)
    return np.clip(out, eps, 1.0 - eps)


def forward_batch(net: RegressorNet, xb: np.ndarray):
    """Forward pass on a (N, Cin, H, W) batch.

    Returns (scores (N,), cache); the cache holds every activation
    needed by backward_batch.
    """
    if xb.ndim != 4 or xb.shape[1] != net.in_channels:
        raise SizeError(f"batch shape {xb.shape} incompatible with net")
    if xb.shape[2] < MIN_INPUT or xb.shape[3] < MIN_INPUT:
        raise SizeError(f"input {xb.shape[2]}x{xb.shape[3]} below minimum {MIN_INPUT}")
    a = np.ascontiguousarray(xb, dtype=net.dtype)
    acts = [a]
    for w, b, s in zip(net.conv_w, net.conv_b, net.strides):
        z = conv2d_forward(a, w, b, s)
        a = np.maximum(z, 0.0)
        acts.append(a)
    psi = acts[-1]
    g = psi.mean(axis=(2, 3))
    z_head = g @ net.head_w + net.head_b[0]
    scores = _sigmoid(z_head)
    return scores, {"acts": acts, "gap": g, "scores": scores}


def forward(net: RegressorNet, patch: ImageF):
    """Score one patch: returns (score in (0,1), psi (C, H', W'))."""
    if patch.channels != net.in_channels:
        raise SizeError(f"patch has {patch.channels} channels, net expects {net.in_channels}")
    xb = np.ascontiguousarray(patch.data.transpose(2, 0, 1)[None], dtype=net.dtype)
    scores, cache = forward_batch(net, xb)
    return float(scores[0]), cache["acts"][-1][0]


def huber(y: float, y_hat: float, delta: float):
    """Huber loss: quadratic within `delta` of the target, linear beyond."""
    r = np.abs(np.asarray(y, dtype=np.float64) - y_hat)
    out = np.where(r <= delta, 0.5 * r * r, delta * r - 0.5 * delta * delta)
    return float(out) if out.ndim == 0 else out


def _huber_grad_wrt_pred(y, y_hat, delta):
    r = y_hat - y
    return np.where(np.abs(r) <= delta, r, delta * np.sign(r))


def backward_batch(net: RegressorNet, cache: dict, ys: np.ndarray, delta: float):
    """Mean Huber loss over the batch and its gradient (flat, float64)."""
    scores = cache["scores"]
    n = scores.shape[0]
    ys = np.asarray(ys, dtype=scores.dtype)
    loss = float(np.mean(huber(ys, scores, delta)))

    dscore = _huber_grad_wrt_pred(ys, scores, delta) / n
    dz_head = (dscore * scores * (1.0 - scores)).astype(net.dtype)

    g = cache["gap"]
    grad = np.zeros(net.n_params, dtype=np.float64)
    gnet = RegressorNet(net.in_channels, net.widths, net.strides, net.dtype, 0)
    gnet.theta[...] = 0.0

    gnet.head_w[...] = dz_head @ g
    gnet.head_b[...] = dz_head.sum()

    acts = cache["acts"]
    psi = acts[-1]
    hp, wp = psi.shape[2], psi.shape[3]
    da = (dz_head[:, None] * net.head_w[None, :])[:, :, None, None]
    da = (da / (hp * wp)) * np.ones_like(psi)

    for li in range(len(net.widths) - 1, -1, -1):
        dz = np.ascontiguousarray(da * (acts[li + 1] > 0))
        dx, dw, db = conv2d_backward(
            acts[li], net.conv_w[li], dz, net.strides[li], need_dx=(li > 0)
        )
        gnet.conv_w[li][...] = dw
        gnet.conv_b[li][...] = db
        da = dx
    return loss, gnet.theta.astype(np.float64)


def backward(net: RegressorNet, patch: ImageF, y: float, delta: float) -> np.ndarray:
    """Gradient of huber(y, forward(net, patch).score) over all parameters."""
    xb = np.ascontiguousarray(patch.data.transpose(2, 0, 1)[None], dtype=net.dtype)
    _, cache = forward_batch(net, xb)
    _, grad = backward_batch(net, cache, np.array([y]), delta)
    return grad


class Adam:
    """Standard Adam with bias correction; a zero gradient from a fresh
    state leaves parameters exactly unchanged."""

    def __init__(self, n_params: int, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float):
        g = grad.astype(self.m.dtype, copy=False)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        theta -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(theta.dtype)


@dataclass
class TrainResult:
    net: RegressorNet
    loss_trace: list = field(default_factory=list)


def train(data, regions, cfg: TrainConfig, in_channels: int | None = None) -> TrainResult:
    """Train a fresh net on random patches from per-image regions.

    `regions` is a single Rect applied to every image or a sequence with
    one Rect per capture.  Patches are resampled every epoch and lightly
    augmented (Gaussian noise, exposure gain).  Deterministic given
    `cfg.seed`.
    """
    if len(data) == 0:
        raise ConfigError("training data is empty")
    if isinstance(regions, Rect):
        regions = [regions] * len(data)
    if len(regions) != len(data):
        raise ConfigError("need one region per capture")
    labels = np.array([c.label for c in data], dtype=np.float64)

    chans = in_channels or data[0].image.channels
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    net = RegressorNet(chans, dtype=dtype, init_seed=derive_seed(cfg.seed, "init"))
    # Start the head bias at the logit of the mean label: skewed label sets
    # otherwise drive the sigmoid into early saturation, where gradients
    # vanish and training occasionally never recovers.
    prior = float(np.clip(labels.mean(), 0.02, 0.98))
    net.head_b[...] = np.log(prior / (1.0 - prior))
    opt = Adam(net.n_params, dtype=np.float64)
    rng = make_rng(derive_seed(cfg.seed, "epochs"))

    p = cfg.patch_size
    ppi = cfg.patches_per_image
    n_img = len(data)
    trace = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        pos = [patch_positions(regions[i], p, ppi, rng) for i in range(n_img)]
        order = rng.permutation(n_img * ppi)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            xb = np.empty((sel.size, chans, p, p), dtype=dtype)
            ys = np.empty(sel.size, dtype=np.float64)
            for j, t in enumerate(sel):
                i, k = divmod(int(t), ppi)
                x, y = pos[i][k]
                xb[j] = data[i].image.data[y : y + p, x : x + p, :].transpose(2, 0, 1)
                ys[j] = labels[i]
            if cfg.aug_noise_sigma > 0:
                xb += cfg.aug_noise_sigma * rng.standard_normal(xb.shape, dtype=dtype)
            if cfg.aug_exposure_ev > 0:
                ev = (rng.random(sel.size, dtype=dtype) * 2 - 1) * cfg.aug_exposure_ev
                xb *= (2.0**ev)[:, None, None, None].astype(dtype)
            _, cache = forward_batch(net, xb)
            loss, grad = backward_batch(net, cache, ys, cfg.huber_delta)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {loss}"
                )
            opt.step(net.theta, grad, lr)
            epoch_loss += loss
            n_batches += 1
        trace.append(epoch_loss / max(n_batches, 1))
    return TrainResult(net=net, loss_trace=trace)


# --- checkpoint I/O ---------------------------------------------------------
# Layout (little endian): magic 'TXQN', u32 version, u32 in_channels,
# u32 n_layers, n_layers * u32 widths, n_layers * u32 strides,
# u64 n_params, u32 crc32(payload), payload = n_params float64.

_MAGIC = b"TXQN"
_VERSION = 1


def save_net(net: RegressorNet, path, meta: dict | None = None) -> None:
    payload = net.theta.astype("<f8").tobytes()
    head = bytearray()
    head += _MAGIC
    head += struct.pack("<III", _VERSION, net.in_channels, len(net.widths))
    head += struct.pack(f"<{len(net.widths)}I", *net.widths)
    head += struct.pack(f"<{len(net.strides)}I", *net.strides)
    head += struct.pack("<QI", net.n_params, zlib.crc32(payload))
    with open(path, "wb") as fh:
        fh.write(bytes(head))
        fh.write(payload)
    if meta is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def load_net(path) -> RegressorNet:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    version, in_ch, n_layers = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"corrupt checkpoint {path}: unsupported version {version}")
    off = 16
    try:
        widths = struct.unpack_from(f"<{n_layers}I", raw, off)
        off += 4 * n_layers
        strides = struct.unpack_from(f"<{n_layers}I", raw, off)
        off += 4 * n_layers
        n_params, crc = struct.unpack_from("<QI", raw, off)
        off += 12
    except struct.error as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated header") from exc
    payload = raw[off:]
    if len(payload) != 8 * n_params:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated payload")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"corrupt checkpoint {path}: checksum mismatch")
    net = RegressorNet(in_ch, widths, strides, dtype=np.float64, init_seed=0)
    theta = np.frombuffer(payload, dtype="<f8")
    if theta.size != net.n_params:
        raise CheckpointError(f"corrupt checkpoint {path}: parameter count mismatch")
    net.theta[...] = theta
    return net
