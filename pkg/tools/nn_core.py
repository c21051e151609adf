"""Small VGG-like binary classifier on numpy with hand-written reverse mode.

conv(16, 3x3) -> ReLU -> conv(32, 3x3) -> ReLU -> maxpool 2x2 -> flatten
-> dense(256) -> ReLU -> dense(1) -> sigmoid. Valid convolutions, stride 1,
float64 everywhere. Tensors are plain row-major numpy arrays; batched
activations are (N, C, H, W).
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from tools.gnss_synth import IQPair
from utils.config import OptimizerConfig
from utils.errors import PersistenceError, ShapeError

Tensor = np.ndarray

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
P_MIN = np.finfo(np.float64).tiny
P_MAX = 1.0 - np.finfo(np.float64).epsneg
BCE_CLAMP = 1e-7
DEFAULT_FLATTEN = 3872


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 2
    height: int = 26
    width: int = 26
    conv1: int = 16
    conv2: int = 32
    hidden: int = 256
    kernel: int = 3

    def __post_init__(self) -> None:
        k = self.kernel - 1
        h, w = self.height - 2 * k, self.width - 2 * k
        if h <= 0 or w <= 0 or h % 2 or w % 2:
            raise ShapeError(f"{self.height}x{self.width} input does not reduce to an even map before pooling")
        if (self.in_channels, self.height, self.width, self.conv2) == (2, 26, 26, 32) and self.flatten_dim != DEFAULT_FLATTEN:
            raise ShapeError(f"flatten dimension {self.flatten_dim} != {DEFAULT_FLATTEN}")

    def shape_chain(self) -> List[Tuple[int, ...]]:
        k = self.kernel - 1
        h1, w1 = self.height - k, self.width - k
        h2, w2 = h1 - k, w1 - k
        return [
            (self.in_channels, self.height, self.width),
            (self.conv1, h1, w1),
            (self.conv2, h2, w2),
            (self.conv2, h2 // 2, w2 // 2),
            (self.conv2 * (h2 // 2) * (w2 // 2),),
            (self.hidden,),
            (1,),
        ]

    @property
    def flatten_dim(self) -> int:
        return self.shape_chain()[4][0]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.kernel
        return {
            "conv1_w": (self.conv1, self.in_channels, k, k),
            "conv1_b": (self.conv1,),
            "conv2_w": (self.conv2, self.conv1, k, k),
            "conv2_b": (self.conv2,),
            "fc1_w": (self.hidden, self.flatten_dim),
            "fc1_b": (self.hidden,),
            "fc2_w": (1, self.hidden),
            "fc2_b": (1,),
        }


@dataclass
class ModelParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def arrays(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def map(self, fn: Callable[[Tensor], Tensor]) -> "ModelParams":
        return ModelParams(**{name: fn(arr) for name, arr in self.arrays().items()})

    def zip_map(self, other: "ModelParams", fn: Callable[[Tensor, Tensor], Tensor]) -> "ModelParams":
        return ModelParams(**{name: fn(arr, getattr(other, name)) for name, arr in self.arrays().items()})

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def validate(self, arch: Architecture) -> None:
        for name, shape in arch.param_shapes().items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} holds non-finite values")


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, cfg: Optional[OptimizerConfig] = None) -> "AdamState":
        cfg = cfg or OptimizerConfig()
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0, learning_rate=cfg.learning_rate,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """He-uniform for the ReLU layers, Glorot-uniform for the sigmoid output, zero biases."""
    shapes = arch.param_shapes()
    out: Dict[str, Tensor] = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name.endswith("_b"):
            out[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        if name == "fc2_w":
            limit = np.sqrt(6.0 / (fan_in + shape[0]))
        else:
            limit = np.sqrt(6.0 / fan_in)
        out[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(**out)


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a CxHxW or NxCxHxW tensor, got shape {x.shape}")


def conv2d_forward(x: Tensor, filters: Tensor, biases: Tensor) -> Tensor:
    xb, single = _batched(x)
    c_out, c_in, kh, kw = filters.shape
    if xb.shape[1] != c_in or biases.shape != (c_out,):
        raise ShapeError(f"input {xb.shape} / filters {filters.shape} / biases {biases.shape} mismatch")
    if xb.shape[2] < kh or xb.shape[3] < kw:
        raise ShapeError(f"input {xb.shape[2:]} smaller than kernel {(kh, kw)}")
    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, filters, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + biases[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(dout: Tensor, x: Tensor, filters: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients w.r.t. input, filters and biases of a valid stride-1 convolution."""
    db_, single = _batched(dout)
    xb, _ = _batched(x)
    _, _, kh, kw = filters.shape
    windows = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    dw = np.tensordot(db_, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = db_.sum(axis=(0, 2, 3))
    padded = np.pad(db_, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    dwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    dx = np.tensordot(dwin, filters[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return (dx[0] if single else dx), dw, db


def relu(z: Tensor) -> Tensor:
    return np.maximum(z, 0.0)


def relu_backward(dout: Tensor, z: Tensor) -> Tensor:
    return dout * (z > 0)


def maxpool2x2(x: Tensor) -> Tuple[Tensor, Tensor]:
    """2x2 max pooling; also returns the winning position (0..3) per window."""
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {h}x{w}")
    cells = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, argmax[..., None], axis=-1)[..., 0]
    return (out[0], argmax[0]) if single else (out, argmax)


def maxpool2x2_backward(dout: Tensor, argmax: Tensor) -> Tensor:
    db_, single = _batched(dout)
    am = np.asarray(argmax, dtype=np.intp)
    if single:
        am = am[None]
    n, c, h2, w2 = db_.shape
    cells = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(cells, am[..., None], db_[..., None], axis=-1)
    dx = cells.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return dx[0] if single else dx


def sigmoid(z: Tensor) -> Tensor:
    return np.clip(expit(z), P_MIN, P_MAX)


@dataclass
class ForwardTape:
    """Intermediate activations recorded by ``forward`` for ``backward``."""
    x: Tensor
    z1: Tensor
    a1: Tensor
    z2: Tensor
    a2: Tensor
    pool_argmax: Tensor
    flat: Tensor
    z3: Tensor
    a3: Tensor
    logits: Tensor
    p: Tensor


def _as_input(x: Union[IQPair, Tensor]) -> Tuple[Tensor, bool]:
    if isinstance(x, IQPair):
        return x.stack()[None], True
    return _batched(x)


def forward_tape(x: Union[IQPair, Tensor], params: ModelParams) -> ForwardTape:
    xb, _ = _as_input(x)
    arch_in = params.conv1_w.shape[1]
    if xb.shape[1] != arch_in:
        raise ShapeError(f"input has {xb.shape[1]} channels, model expects {arch_in}")
    z1 = conv2d_forward(xb, params.conv1_w, params.conv1_b)
    a1 = relu(z1)
    z2 = conv2d_forward(a1, params.conv2_w, params.conv2_b)
    a2 = relu(z2)
    pooled, argmax = maxpool2x2(a2)
    flat = pooled.reshape(pooled.shape[0], -1)
    if flat.shape[1] != params.fc1_w.shape[1]:
        raise ShapeError(f"flatten produced {flat.shape[1]} features, fc1 expects {params.fc1_w.shape[1]}")
    z3 = flat @ params.fc1_w.T + params.fc1_b
    a3 = relu(z3)
    logits = (a3 @ params.fc2_w.T + params.fc2_b)[:, 0]
    return ForwardTape(xb, z1, a1, z2, a2, argmax, flat, z3, a3, logits, sigmoid(logits))


def forward(x: Union[IQPair, Tensor], params: ModelParams) -> Union[float, Tensor]:
    """Multipath probability for one sample (float) or a batch (N,)."""
    _, single = _as_input(x)
    p = forward_tape(x, params).p
    return float(p[0]) if single else p


def backward(tape: ForwardTape, params: ModelParams, dloss_dp: Tensor) -> ModelParams:
    """Parameter gradients given dLoss/dp for every sample of the tape."""
    dp = np.asarray(dloss_dp, dtype=np.float64).reshape(-1)
    dlogits = (dp * tape.p * (1.0 - tape.p))[:, None]
    g_fc2_w = dlogits.T @ tape.a3
    g_fc2_b = dlogits.sum(axis=0)
    da3 = dlogits @ params.fc2_w
    dz3 = relu_backward(da3, tape.z3)
    g_fc1_w = dz3.T @ tape.flat
    g_fc1_b = dz3.sum(axis=0)
    dflat = dz3 @ params.fc1_w
    n, c, h2, w2 = tape.pool_argmax.shape
    da2 = maxpool2x2_backward(dflat.reshape(n, c, h2, w2), tape.pool_argmax)
    dz2 = relu_backward(da2, tape.z2)
    da1, g_conv2_w, g_conv2_b = conv2d_backward(dz2, tape.a1, params.conv2_w)
    dz1 = relu_backward(da1, tape.z1)
    _, g_conv1_w, g_conv1_b = conv2d_backward(dz1, tape.x, params.conv1_w)
    return ModelParams(g_conv1_w, g_conv1_b, g_conv2_w, g_conv2_b, g_fc1_w, g_fc1_b, g_fc2_w, g_fc2_b)


def bce_loss(p: Union[float, Tensor], y: Union[int, Tensor]) -> Union[float, Tensor]:
    pc = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    yy = np.asarray(y, dtype=np.float64)
    loss = -(yy * np.log(pc) + (1.0 - yy) * np.log1p(-pc))
    return float(loss) if loss.ndim == 0 else loss


def bce_grad(p: Tensor, y: Tensor) -> Tensor:
    """dBCE/dp of the clamped loss (zero where the clamp is active)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> Tuple[ModelParams, AdamState]:
    """Bias-corrected ADAM update; inputs are left untouched."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = state.m.zip_map(grads, lambda m_, g: b1 * m_ + (1.0 - b1) * g)
    v = state.v.zip_map(grads, lambda v_, g: b2 * v_ + (1.0 - b2) * g * g)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = ModelParams(**{
        name: theta - state.learning_rate * (getattr(m, name) / c1) / (np.sqrt(getattr(v, name) / c2) + state.eps)
        for name, theta in params.arrays().items()
    })
    new_state = AdamState(m=m, v=v, step=t, learning_rate=state.learning_rate, beta1=b1, beta2=b2, eps=state.eps)
    return new_params, new_state


def standardize(x: Tensor) -> Tensor:
    """Per-sample, per-channel zero mean and unit variance."""
    xb = np.asarray(x, dtype=np.float64)
    mean = xb.mean(axis=(-2, -1), keepdims=True)
    std = xb.std(axis=(-2, -1), keepdims=True)
    return (xb - mean) / np.where(std > 0, std, 1.0)


def save_checkpoint(params: ModelParams, directory: Path) -> Path:
    directory = Path(directory)
    arrays = params.arrays()
    manifest = {
        "order": list(PARAM_ORDER),
        "shapes": {name: list(arr.shape) for name, arr in arrays.items()},
        "dtype": "<f8",
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        flat = np.concatenate([arrays[name].ravel() for name in PARAM_ORDER]).astype("<f8")
        (directory / "model.f64").write_bytes(flat.tobytes())
        (directory / "model.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write checkpoint to {directory}: {e}") from e
    return directory


def load_checkpoint(directory: Path) -> ModelParams:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "model.json").read_text("utf-8"))
        flat = np.fromfile(directory / "model.f64", dtype="<f8")
    except (OSError, ValueError) as e:
        raise PersistenceError(f"cannot read checkpoint from {directory}: {e}") from e
    shapes = [tuple(manifest["shapes"][name]) for name in manifest["order"]]
    needed = sum(int(np.prod(shape)) for shape in shapes)
    if needed != flat.size:
        raise PersistenceError(f"model.f64 in {directory} has {flat.size} values, manifest needs {needed}")
    out: Dict[str, Tensor] = {}
    offset = 0
    for name, shape in zip(manifest["order"], shapes):
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    return ModelParams(**out)
