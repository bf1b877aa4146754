"""Small MLPs with hand-written reverse-mode gradients, Adam, and checkpoints.

Parameters live in one flat float64 vector.  Layer ``l`` occupies a
contiguous block: its ``(fan_in, fan_out)`` weight matrix in row-major order,
then its bias.  Layers are laid out first to last.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CheckpointError, NumericError, ShapeError

ACTIVATIONS = ("relu", "silu", "selu")

_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805


@dataclass(frozen=True)
class MlpArch:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "relu"
    time_conditioned: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ShapeError(f"all layer widths must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim + int(self.time_conditioned), *self.hidden, self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def offsets(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector for every layer."""
        out, pos = [], 0
        for i, o in self.layer_shapes:
            w = slice(pos, pos + i * o)
            b = slice(pos + i * o, pos + i * o + o)
            out.append((w, b))
            pos += i * o + o
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "time_conditioned": self.time_conditioned,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArch":
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden=tuple(d["hidden"]),
            activation=d["activation"],
            time_conditioned=bool(d["time_conditioned"]),
        )


@dataclass
class ParamVector:
    values: np.ndarray
    arch: MlpArch

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.n_params,):
            raise ShapeError(
                f"parameter vector has shape {self.values.shape}, arch needs ({self.arch.n_params},)"
            )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``values``; writing to them edits the vector."""
        return [
            (self.values[ws].reshape(i, o), self.values[bs])
            for (ws, bs), (i, o) in zip(self.arch.offsets(), self.arch.layer_shapes)
        ]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)

    def __call__(self, x, t=None):
        return forward(self, x, t)


def init_params(arch: MlpArch, rng: np.random.Generator) -> ParamVector:
    """Kaiming-uniform weights (LeCun-uniform for SELU), zero biases."""
    p = ParamVector(np.zeros(arch.n_params), arch)
    gain = 1.0 if arch.activation == "selu" else 2.0
    for W, _ in p.layers():
        bound = np.sqrt(3.0 * gain / W.shape[0])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return p


def zeros_like_arch(arch: MlpArch) -> ParamVector:
    return ParamVector(np.zeros(arch.n_params), arch)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z / (1.0 + np.exp(-z))
    neg = _SELU_ALPHA * np.expm1(np.minimum(z, 0.0))
    return _SELU_SCALE * np.where(z > 0, z, neg)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    # relu subgradient at exactly 0 is 0
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    return _SELU_SCALE * np.where(z > 0, 1.0, _SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


def _network_input(arch: MlpArch, x, t) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects (B, {arch.input_dim})")
    if arch.time_conditioned:
        if t is None:
            raise ShapeError("time-conditioned network needs t")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        return np.concatenate([x, t[:, None]], axis=1)
    if t is not None:
        raise ShapeError("network is not time-conditioned but t was given")
    return x


def _forward_cached(params: ParamVector, x, t):
    arch = params.arch
    h = _network_input(arch, x, t)
    layers = params.layers()
    inputs, pre = [], []
    for l, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if l < len(layers) - 1:
            pre.append(z)
            h = _act(arch.activation, z)
        else:
            h = z
    return h, (inputs, pre, layers)


def forward(params: ParamVector, x, t=None) -> np.ndarray:
    return _forward_cached(params, x, t)[0]


def _backward(params: ParamVector, cache, dout: np.ndarray, want_params=True):
    inputs, pre, layers = cache
    act = params.arch.activation
    grad = np.empty(params.arch.n_params) if want_params else None
    offsets = params.arch.offsets()
    dz = dout
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        if want_params:
            ws, bs = offsets[l]
            grad[ws] = (inputs[l].T @ dz).ravel()
            grad[bs] = dz.sum(axis=0)
        dh = dz @ W.T
        if l > 0:
            dz = dh * _act_grad(act, pre[l - 1])
    return grad, dh


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def loss_and_grad(params: ParamVector, x, t, loss_fn: LossFn) -> tuple[float, np.ndarray]:
    """Scalar loss of the network output and its exact gradient in the parameters.

    ``loss_fn`` maps the ``(B, output_dim)`` output to ``(loss, dloss/doutput)``.
    """
    out, cache = _forward_cached(params, x, t)
    loss, dout = loss_fn(out)
    loss = float(loss)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} (output range [{out.min()}, {out.max()}])")
    grad, _ = _backward(params, cache, np.asarray(dout, dtype=np.float64))
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return loss, grad


def grad_wrt_input(params: ParamVector, x, t=None) -> np.ndarray:
    """Per-row gradient of a scalar-output network with respect to its input ``x``."""
    if params.arch.output_dim != 1:
        raise ShapeError("grad_wrt_input needs a scalar-output network")
    out, cache = _forward_cached(params, x, t)
    _, dh = _backward(params, cache, np.ones_like(out), want_params=False)
    return dh[:, : params.arch.input_dim]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamVector, lr: float, **kw) -> "AdamState":
        n = params.values.size
        return cls(np.zeros(n), np.zeros(n), lr=lr, **kw)


def adam_step(params: ParamVector, grad: np.ndarray, state: AdamState) -> ParamVector:
    """One bias-corrected Adam descent step; updates ``state`` in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape or state.m.shape != grad.shape:
        raise ShapeError("gradient, moments and parameters must be aligned")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return ParamVector(params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), params.arch)


# --- checkpoint format -------------------------------------------------------
# b"FFMP" | u32 version | u32 header length | UTF-8 JSON header | f64 LE values
_MAGIC = b"FFMP"
FORMAT_VERSION = 1


def params_to_bytes(params: ParamVector, extra: dict | None = None) -> bytes:
    header = {"arch": params.arch.to_dict(), "n_params": params.arch.n_params}
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    return (
        _MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(hb))
        + hb
        + params.values.astype("<f8").tobytes()
    )


def read_checkpoint(buf: bytes, expected_arch: MlpArch | None = None) -> tuple[ParamVector, dict]:
    """Parse a checkpoint into its parameters and the ``extra`` header dict."""
    if len(buf) < 12 or buf[:4] != _MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode())
        arch = MlpArch.from_dict(header["arch"])
        n = int(header["n_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if n != arch.n_params:
        raise CheckpointError(f"header declares {n} parameters, arch implies {arch.n_params}")
    payload = buf[12 + hlen :]
    if len(payload) != 8 * n:
        raise CheckpointError(f"payload has {len(payload)} bytes, expected {8 * n}")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"checkpoint arch {arch} does not match expected {expected_arch}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParamVector(values, arch), header.get("extra", {})


def params_from_bytes(buf: bytes, expected_arch: MlpArch | None = None) -> ParamVector:
    return read_checkpoint(buf, expected_arch)[0]


def save_params(path, params: ParamVector, extra: dict | None = None) -> None:
    Path(path).write_bytes(params_to_bytes(params, extra))


def load_params(path, expected_arch: MlpArch | None = None) -> ParamVector:
    return params_from_bytes(Path(path).read_bytes(), expected_arch)
