"""Trainable classifier head, Adam, learning-rate schedule and checkpoints.

The head is an attentive-pooling MLP standing in for a graph-attention
back end:

    scores  = X @ att_w + att_b          (B, T, D), softmax over T per dim
    pooled  = sum_t softmax(scores) * X  (B, D)
    hidden  = tanh(pooled @ w1 + b1)     (B, H)
    embed   = tanh(hidden @ w2 + b2)     (B, E)   <- contrastive / reg tap
    logits  = embed @ w3 + b3            (B, 2)

Parameters live in a plain ``dict[str, np.ndarray]`` together with the
layer-aggregation kernel (key ``"kernel"``).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from racl.errors import CheckpointError, NumericError, ShapeError

HEAD_PARAMS = ("att_w", "att_b", "w1", "b1", "w2", "b2", "w3", "b3")
PARAM_ORDER = ("kernel",) + HEAD_PARAMS

MAGIC = b"RACL"
FORMAT_VERSION = 1


def init_head(dim: int, hidden: int = 64, embed: int = 32,
              rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    rng = rng if rng is not None else np.random.default_rng(0)

    def glorot(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, (fan_in, fan_out))

    return {
        "att_w": glorot(dim, dim),
        "att_b": np.zeros(dim),
        "w1": glorot(dim, hidden),
        "b1": np.zeros(hidden),
        "w2": glorot(hidden, embed),
        "b2": np.zeros(embed),
        "w3": glorot(embed, 2),
        "b3": np.zeros(2),
    }


@dataclass
class Tape:
    x: np.ndarray
    attn: np.ndarray
    pooled: np.ndarray
    hidden: np.ndarray
    embed: np.ndarray


def _softmax_time(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-2, keepdims=True)


def forward(agg: np.ndarray, params: dict[str, np.ndarray]):
    """Run the head on one (T, D) input or a batch (B, T, D); returns (logits, embedding, tape)."""
    x = np.asarray(agg, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in head input")
    attn = _softmax_time(x @ params["att_w"] + params["att_b"])
    pooled = np.sum(attn * x, axis=1)
    hidden = np.tanh(pooled @ params["w1"] + params["b1"])
    embed = np.tanh(hidden @ params["w2"] + params["b2"])
    logits = embed @ params["w3"] + params["b3"]
    tape = Tape(x, attn, pooled, hidden, embed)
    if single:
        return logits[0], embed[0], tape
    return logits, embed, tape


def backward(tape: Tape, params: dict[str, np.ndarray], grad_logits: np.ndarray,
             grad_embedding: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse pass; the embedding gradient is injected at the tap before the tanh."""
    g_logits = np.asarray(grad_logits, dtype=np.float64).reshape(tape.embed.shape[0], -1)
    g_embed = np.asarray(grad_embedding, dtype=np.float64).reshape(tape.embed.shape)
    if g_logits.shape[1] != params["w3"].shape[1]:
        raise ShapeError(f"grad_logits has {g_logits.shape[1]} columns, expected {params['w3'].shape[1]}")

    grads = {}
    grads["w3"] = tape.embed.T @ g_logits
    grads["b3"] = g_logits.sum(axis=0)
    g_e = g_logits @ params["w3"].T + g_embed

    g_a2 = g_e * (1.0 - tape.embed**2)
    grads["w2"] = tape.hidden.T @ g_a2
    grads["b2"] = g_a2.sum(axis=0)
    g_h = g_a2 @ params["w2"].T

    g_a1 = g_h * (1.0 - tape.hidden**2)
    grads["w1"] = tape.pooled.T @ g_a1
    grads["b1"] = g_a1.sum(axis=0)
    g_pooled = g_a1 @ params["w1"].T  # (B, D)

    g_pooled_t = g_pooled[:, None, :]
    g_attn = g_pooled_t * tape.x
    g_x = g_pooled_t * tape.attn
    g_scores = tape.attn * (g_attn - np.sum(tape.attn * g_attn, axis=1, keepdims=True))
    grads["att_w"] = np.einsum("btd,bte->de", tape.x, g_scores)
    grads["att_b"] = g_scores.sum(axis=(0, 1))
    g_x = g_x + g_scores @ params["att_w"].T
    return grads, g_x


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam with L2 weight decay folded into the gradient. Updates in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def lr_at(epoch: int, base_lr: float = 5e-4, factor: float = 0.5, every: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * factor ** (epoch // every)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    epoch: int
    params: dict[str, np.ndarray]
    val_loss: float
    config_hash: str = ""
    config: dict = field(default_factory=dict)


def _ordered(params: dict[str, np.ndarray]) -> list[str]:
    known = [n for n in PARAM_ORDER if n in params]
    return known + sorted(n for n in params if n not in PARAM_ORDER)


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    """Container layout (little endian):

    magic 'RACL' | u16 version | u16 reserved | i32 epoch | f64 val_loss
    | u16 hash_len + ascii hash | u32 json_len + utf-8 resolved config
    | u32 n_params | per param: u16 name_len, name, u16 ndim, u32 dims...
    | concatenated float64 payloads in shape-table order
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHid", FORMAT_VERSION, 0, ckpt.epoch, ckpt.val_loss))
    h = ckpt.config_hash.encode("ascii")
    buf.write(struct.pack("<H", len(h)) + h)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    names = _ordered(ckpt.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = ckpt.params[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<H", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        buf.write(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize_checkpoint(data: bytes) -> Checkpoint:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError("not a RACL checkpoint (bad magic)")
        pos = 4
        version, _, epoch, val_loss = struct.unpack_from("<HHid", data, pos)
        pos += struct.calcsize("<HHid")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        config_hash = data[pos : pos + hlen].decode("ascii")
        pos += hlen
        (clen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        config = json.loads(data[pos : pos + clen].decode("utf-8"))
        pos += clen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        table = []
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<H", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            table.append((name, shape))
        params = {}
        for name, shape in table:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            params[name] = arr.reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(epoch, params, val_loss, config_hash, config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(serialize_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    return deserialize_checkpoint(path.read_bytes())


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def average_checkpoints(ckpts: list[Checkpoint]) -> dict[str, np.ndarray]:
    if not ckpts:
        raise CheckpointError("cannot average an empty checkpoint list")
    names = _ordered(ckpts[0].params)
    for c in ckpts[1:]:
        if _ordered(c.params) != names or any(c.params[n].shape != ckpts[0].params[n].shape for n in names):
            raise ShapeError("checkpoints to average have mismatched parameter shapes")
    out = {}
    for n in names:
        acc = np.zeros_like(ckpts[0].params[n])
        for c in ckpts:
            acc = acc + c.params[n]
        out[n] = acc / len(ckpts)
    return out


def averaging_window(val_losses: list[float], window: int = 5) -> list[int]:
    """Indices of the lowest-loss epoch and up to ``window - 1`` epochs before it."""
    if not val_losses:
        raise CheckpointError("no epochs to choose from")
    best = int(np.argmin(val_losses))
    return list(range(max(0, best - window + 1), best + 1))
