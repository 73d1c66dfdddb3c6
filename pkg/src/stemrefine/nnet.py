"""Minimal dense/conv network substrate with exact-gradient backpropagation.

Tensors are plain float64 numpy arrays, batch-first. Layers cache what they
need during forward and return input gradients from backward; parameter
gradients accumulate on the layer. Adam and decoupled-weight-decay AdamW are
provided, plus a versioned binary checkpoint format that round-trips
parameters, optimizer moments and the step counter bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DataError, NumericsError


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer: forward/backward plus named parameter access."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in, self.n_out = n_in, n_out
        limit = np.sqrt(6.0 / n_in)  # He-uniform
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, (n_out, n_in))
        self.b = np.zeros(n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"dense expects (B, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.dw = dy.T @ self._x
        self.db = dy.sum(axis=0)
        return dy @ self.w

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def spec(self):
        return {"kind": "dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv2D(Layer):
    """3x3 (or 1x1) convolution, stride 1, zero padding to preserve H and W."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int = 3,
                 rng: np.random.Generator | None = None):
        if ksize not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.in_ch, self.out_ch, self.ksize = in_ch, out_ch, ksize
        self.pad = ksize // 2
        fan_in = in_ch * ksize * ksize
        limit = np.sqrt(6.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.w = rng.uniform(-limit, limit, (out_ch, in_ch, ksize, ksize))
        self.b = np.zeros(out_ch)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cols = None
        self._shape = None

    def _im2col(self, x):
        b, c, h, w = x.shape
        k, pad = self.ksize, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        s = xp.strides
        win = as_strided(xp, (b, c, h, w, k, k), (s[0], s[1], s[2], s[3], s[2], s[3]))
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * k * k)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"conv expects (B, {self.in_ch}, H, W), got {x.shape}")
        self._shape = x.shape
        self._cols = self._im2col(x)
        b, _, h, w = x.shape
        y = self._cols @ self.w.reshape(self.out_ch, -1).T + self.b
        return y.transpose(0, 2, 1).reshape(b, self.out_ch, h, w)

    def backward(self, dy):
        b, _, h, w = self._shape
        k, pad = self.ksize, self.pad
        dmat = dy.reshape(b, self.out_ch, h * w).transpose(0, 2, 1)
        wmat = self.w.reshape(self.out_ch, -1)
        self.dw = np.tensordot(dmat, self._cols, axes=([0, 1], [0, 1])).reshape(self.w.shape)
        self.db = dmat.sum(axis=(0, 1))
        dcols = (dmat @ wmat).reshape(b, h, w, self.in_ch, k, k)
        dxp = np.zeros((b, self.in_ch, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pad:pad + h, pad:pad + w]

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def spec(self):
        return {"kind": "conv2d", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "ksize": self.ksize}


class ReLU(Layer):
    # Sub-gradient convention: derivative is 0 at exactly 0.
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask

    def spec(self):
        return {"kind": "relu"}


class Sigmoid(Layer):
    def forward(self, x):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)

    def spec(self):
        return {"kind": "sigmoid"}


class Log1p(Layer):
    """log(1 + x) for non-negative inputs (magnitude compression)."""

    def forward(self, x):
        self._x = x
        return np.log1p(x)

    def backward(self, dy):
        return dy / (1.0 + self._x)

    def spec(self):
        return {"kind": "log1p"}


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        self._in_shape = x.shape
        xr = (x[:, :, :h2 * 2, :w2 * 2]
              .reshape(b, c, h2, 2, w2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h2, w2, 4))
        self._idx = xr.argmax(axis=-1)
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        b, c, h, w = self._in_shape
        h2, w2 = h // 2, w // 2
        flat = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(flat, self._idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros((b, c, h, w))
        dx[:, :, :h2 * 2, :w2 * 2] = (flat.reshape(b, c, h2, w2, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(b, c, h2 * 2, w2 * 2))
        return dx

    def spec(self):
        return {"kind": "maxpool2"}


class AvgPool(Layer):
    """(ph, pw) average pooling; trailing remainder rows/columns are dropped."""

    def __init__(self, ph: int, pw: int):
        self.ph, self.pw = ph, pw

    def forward(self, x):
        b, c, h, w = x.shape
        ho, wo = h // self.ph, w // self.pw
        self._in_shape = x.shape
        xr = x[:, :, :ho * self.ph, :wo * self.pw].reshape(b, c, ho, self.ph, wo, self.pw)
        return xr.mean(axis=(3, 5))

    def backward(self, dy):
        b, c, h, w = self._in_shape
        ho, wo = h // self.ph, w // self.pw
        dx = np.zeros((b, c, h, w))
        block = dy[:, :, :, None, :, None] / (self.ph * self.pw)
        dx[:, :, :ho * self.ph, :wo * self.pw] = np.broadcast_to(
            block, (b, c, ho, self.ph, wo, self.pw)).reshape(b, c, ho * self.ph, wo * self.pw)
        return dx

    def spec(self):
        return {"kind": "avgpool", "ph": self.ph, "pw": self.pw}


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        b, c, h, w = self._in_shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (b, c, h, w)).copy()

    def spec(self):
        return {"kind": "gap"}


class TimeAvgFlatten(Layer):
    """Average over the time axis, flatten (C, F) into features.

    Keeps the frequency position visible to the dense head; a conv stack with
    full global pooling cannot distinguish identical textures at different
    absolute frequencies.
    """

    def forward(self, x):
        self._in_shape = x.shape
        b, c, h, w = x.shape
        return x.mean(axis=3).reshape(b, c * h)

    def backward(self, dy):
        b, c, h, w = self._in_shape
        return np.broadcast_to(dy.reshape(b, c, h, 1) / w, (b, c, h, w)).copy()

    def spec(self):
        return {"kind": "tmean_flat"}


_LAYER_KINDS = {
    "dense": lambda s, rng: Dense(s["n_in"], s["n_out"], rng),
    "conv2d": lambda s, rng: Conv2D(s["in_ch"], s["out_ch"], s["ksize"], rng),
    "relu": lambda s, rng: ReLU(),
    "sigmoid": lambda s, rng: Sigmoid(),
    "log1p": lambda s, rng: Log1p(),
    "maxpool2": lambda s, rng: MaxPool2(),
    "avgpool": lambda s, rng: AvgPool(s["ph"], s["pw"]),
    "gap": lambda s, rng: GlobalAvgPool(),
    "tmean_flat": lambda s, rng: TimeAvgFlatten(),
}


class Network:
    """A plain sequential stack of layers."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    @classmethod
    def from_spec(cls, specs: list[dict], seed: int) -> "Network":
        layers = []
        for i, s in enumerate(specs):
            if s["kind"] not in _LAYER_KINDS:
                raise DataError(f"unknown layer kind {s['kind']!r}")
            rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
            layers.append(_LAYER_KINDS[s["kind"]](s, rng))
        return cls(layers)

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x0 = x
        for layer in self.layers:
            x = layer.forward(x)
        if not np.all(np.isfinite(x)):
            raise NumericsError(f"non-finite activations after {self._first_bad_layer(x0)}")
        return x

    def _first_bad_layer(self, x: np.ndarray) -> str:
        # Failure path only: replay to name the first offending layer.
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if not np.all(np.isfinite(x)):
                return f"layer {i} ({layer.spec()['kind']})"
        return "output"

    def backward(self, dy: np.ndarray, to_input: bool = False) -> np.ndarray | None:
        """Backpropagate; unless to_input, the first layer's input gradient is
        skipped when that layer has no parameters (it would be discarded)."""
        for i in reversed(range(len(self.layers))):
            if i == 0 and not to_input and not self.layers[0].params():
                return None
            dy = self.layers[i].backward(dy)
        return dy

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((f"{i}.{name}", arr))
        return out

    def gradients(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.grads().items():
                out.append((f"{i}.{name}", arr))
        return out

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        idx, name = key.split(".")
        layer = self.layers[int(idx)]
        getattr(layer, name)[...] = value

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.parameters())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute loss and its gradient (sign convention: 0 at zero)."""
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    mode: str = "adam"  # "adam" or "adamw" (decoupled decay)

    def to_json(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay, "mode": self.mode}

    @classmethod
    def from_json(cls, rec: dict) -> "OptimizerConfig":
        return cls(**rec)


class Optimizer:
    """Adam / AdamW over a network's parameters, state kept per parameter."""

    def __init__(self, net: Network, cfg: OptimizerConfig):
        if cfg.mode not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer mode {cfg.mode!r}")
        self.cfg = cfg
        self.t = 0
        self.m = {key: np.zeros_like(arr) for key, arr in net.parameters()}
        self.v = {key: np.zeros_like(arr) for key, arr in net.parameters()}

    def step(self, net: Network) -> None:
        cfg = self.cfg
        grads = dict(net.gradients())
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {key}")
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for key, p in net.parameters():
            g = grads[key]
            if cfg.mode == "adamw" and cfg.weight_decay:
                p -= cfg.lr * cfg.weight_decay * p
            m = self.m[key]
            v = self.v[key]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# Train state + checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"SRN1"
_VERSION = 1


@dataclass
class TrainState:
    """A network plus everything needed to resume training deterministically."""

    net: Network
    opt: Optimizer
    step_count: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(state: TrainState, path) -> None:
    params = state.net.parameters()
    arrays: list[tuple[str, np.ndarray]] = []
    for key, arr in params:
        arrays.append((f"p:{key}", arr))
    for key in state.opt.m:
        arrays.append((f"m:{key}", state.opt.m[key]))
    for key in state.opt.v:
        arrays.append((f"v:{key}", state.opt.v[key]))
    header = {
        "net_spec": state.net.spec(),
        "opt_cfg": state.opt.cfg.to_json(),
        "opt_t": state.opt.t,
        "step_count": state.step_count,
        "seed": state.seed,
        "extra": state.extra,
        "arrays": [{"key": k, "shape": list(a.shape)} for k, a in arrays],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    if len(data) < 12 or data[:4] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc

    net = Network.from_spec(header["net_spec"], seed=header["seed"])
    opt = Optimizer(net, OptimizerConfig.from_json(header["opt_cfg"]))
    opt.t = header["opt_t"]
    state = TrainState(net=net, opt=opt, step_count=header["step_count"],
                       seed=header["seed"], extra=header.get("extra", {}))

    pos = 12 + hlen
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + count * 8
        if end > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end
        tag, key = meta["key"].split(":", 1)
        if tag == "p":
            net.set_parameter(key, arr)
        elif tag == "m":
            opt.m[key] = arr
        elif tag == "v":
            opt.v[key] = arr
        else:
            raise DataError(f"{path}: unknown array tag {tag!r}")
    return state


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Counter-style RNG: the stream for a given step is independent of how
    many steps ran before it, so checkpoint-resume reproduces training."""
    return np.random.default_rng(np.random.SeedSequence((seed, stream, step)))
