"""Knowledge injection: instruction augmentation and the knowledge-guided
attention block that fuses an observation with retrieved event features.

The block, per query row ``o`` and knowledge rows ``F``::

    q  = (o + m_obs) W_Q + b_Q
    k  = (F + m_kg)  W_K + b_K
    v  = (F + m_kg)  W_V + b_V
    a  = concat_h softmax(q_h k_h^T / sqrt(d_h)) v_h
    y  = LayerNorm(o + a W_O + b_O)

with an optional feed-forward sublayer ``LN0(y + GELU(y W_1 + b_1) W_2 + b_2)``
where ``LN0`` carries no affine parameters. Everything runs in float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import crc32c
import numpy as np

from .core import EventKind
from .errors import CorruptStore, DimMismatch, EmptyKnowledge, FormatError, InvalidShape, InvalidVector

EVENT_TOKEN = "<EVENT>"
SCENE_TOKEN = "<SCENE>"
LN_EPS = 1e-5
DEFAULT_DIM = 768
DEFAULT_HEADS = 8

CKPT_MAGIC = b"EKGP"
CKPT_VERSION = 1

_ATTN_NAMES = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln_gain", "ln_bias", "m_obs", "m_kg")
_FFN_NAMES = ("w_1", "b_1", "w_2", "b_2")


@dataclass(frozen=True)
class AugmentedInstruction:
    text: str
    parts: tuple[tuple[EventKind, str], ...]


def augment_instruction(instruction: str, hits: Sequence[tuple[EventKind, str]]) -> AugmentedInstruction:
    """Append retrieved descriptions, events first then scenes, each after
    its marker token. Within a kind the given (score) order is kept."""
    ordered = [h for h in hits if EventKind.parse(h[0]) is EventKind.EVENT]
    ordered += [h for h in hits if EventKind.parse(h[0]) is EventKind.SCENE]
    parts = tuple((EventKind.parse(k), d) for k, d in ordered)
    pieces = [instruction]
    for kind, desc in parts:
        pieces.append(f"{EVENT_TOKEN if kind is EventKind.EVENT else SCENE_TOKEN} {desc}")
    return AugmentedInstruction(" ".join(pieces), parts)


@dataclass(frozen=True)
class AstffParams:
    d: int
    heads: int
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    m_obs: np.ndarray
    m_kg: np.ndarray
    w_1: np.ndarray | None = None
    b_1: np.ndarray | None = None
    w_2: np.ndarray | None = None
    b_2: np.ndarray | None = None

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise InvalidShape(f"d={self.d} is not divisible by H={self.heads}")
        for name, shape in param_shapes(self.d, self.include_ffn).items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidShape(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise InvalidVector(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    @property
    def include_ffn(self) -> bool:
        return self.w_1 is not None

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def tensors(self) -> dict[str, np.ndarray]:
        """Learnable tensors in checkpoint order."""
        names = _ATTN_NAMES + (_FFN_NAMES if self.include_ffn else ())
        return {n: getattr(self, n) for n in names}


def param_shapes(d: int, include_ffn: bool) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"w_{p}"] = (d, d)
        shapes[f"b_{p}"] = (d,)
    shapes.update(ln_gain=(d,), ln_bias=(d,), m_obs=(d,), m_kg=(d,))
    if include_ffn:
        shapes.update(w_1=(d, 4 * d), b_1=(4 * d,), w_2=(4 * d, d), b_2=(d,))
    return shapes


def astff_param_count(d: int = DEFAULT_DIM, heads: int = DEFAULT_HEADS, include_ffn: bool = False) -> int:
    if d < 1 or heads < 1 or d % heads:
        raise InvalidShape(f"d={d} is not divisible by H={heads}")
    n = 4 * d * d + 4 * d + 2 * d + 2 * d
    if include_ffn:
        n += 8 * d * d + 5 * d
    return n


def init_params(d: int = DEFAULT_DIM, heads: int = DEFAULT_HEADS, include_ffn: bool = False,
                seed: int = 0) -> AstffParams:
    """Xavier-uniform projections, zero biases, N(0, 0.02) type embeddings,
    identity layer normalization."""
    if heads < 1 or d % heads:
        raise InvalidShape(f"d={d} is not divisible by H={heads}")
    rng = np.random.default_rng(seed)

    def xavier(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    kw = {}
    for p in ("q", "k", "v", "o"):
        kw[f"w_{p}"] = xavier(d, d)
        kw[f"b_{p}"] = np.zeros(d)
    kw.update(ln_gain=np.ones(d), ln_bias=np.zeros(d),
              m_obs=rng.normal(0.0, 0.02, d), m_kg=rng.normal(0.0, 0.02, d))
    if include_ffn:
        kw.update(w_1=xavier(d, 4 * d), b_1=np.zeros(4 * d), w_2=xavier(4 * d, d), b_2=np.zeros(d))
    return AstffParams(d=d, heads=heads, **kw)


def _layernorm(x, gain=None, bias=None):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    y = xhat if gain is None else xhat * gain + bias
    return y, (xhat, inv)


def _layernorm_backward(dy, cache, gain=None):
    xhat, inv = cache
    dxhat = dy if gain is None else dy * gain
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(s):
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(params: AstffParams, obs, knowledge):
    obs = np.asarray(obs, dtype=np.float64)
    kn = np.asarray(knowledge, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :]
    if kn.ndim != 2 or kn.shape[0] == 0:
        raise EmptyKnowledge("ASTFF needs at least one knowledge row")
    if obs.ndim != 2 or obs.shape[1] != params.d or kn.shape[1] != params.d:
        raise DimMismatch(f"expected width {params.d}, got obs {obs.shape} and knowledge {kn.shape}")
    return obs, kn


def _split(x, heads):
    # (rows, d) -> (heads, rows, d_h)
    return x.reshape(x.shape[0], heads, -1).transpose(1, 0, 2)


def _merge(x):
    return x.transpose(1, 0, 2).reshape(x.shape[1], -1)


def astff_forward(params: AstffParams, obs, knowledge, return_cache: bool = False):
    """Fuse each observation row with the knowledge set.

    ``obs`` is ``(B, d)`` (a single ``(d,)`` row is accepted), ``knowledge``
    is ``(n, d)``. With ``return_cache`` the second value holds intermediate
    activations, including the attention weights under ``"attn"``
    (shape ``(H, B, n)``).
    """
    p = params
    obs, kn = _check_inputs(p, obs, knowledge)
    x_q = obs + p.m_obs
    x_kv = kn + p.m_kg
    q = _split(x_q @ p.w_q + p.b_q, p.heads)
    k = _split(x_kv @ p.w_k + p.b_k, p.heads)
    v = _split(x_kv @ p.w_v + p.b_v, p.heads)
    scale = 1.0 / math.sqrt(p.head_dim)
    attn = _softmax(q @ k.transpose(0, 2, 1) * scale)
    ctx = _merge(attn @ v)
    r = obs + ctx @ p.w_o + p.b_o
    y, ln1 = _layernorm(r, p.ln_gain, p.ln_bias)
    cache = dict(obs=obs, kn=kn, x_q=x_q, x_kv=x_kv, q=q, k=k, v=v, attn=attn, ctx=ctx, ln1=ln1, y=y)
    out = y
    if p.include_ffn:
        h = y @ p.w_1 + p.b_1
        g, t = _gelu(h)
        z = y + g @ p.w_2 + p.b_2
        out, ln2 = _layernorm(z)
        cache.update(h=h, g=g, t=t, ln2=ln2)
    return (out, cache) if return_cache else out


def astff_backward(params: AstffParams, obs, knowledge, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * forward(...))`` for every parameter plus
    ``"obs"`` and ``"knowledge"``."""
    p = params
    out, c = astff_forward(p, obs, knowledge, return_cache=True)
    dout = np.asarray(upstream, dtype=np.float64).reshape(out.shape)
    grads: dict[str, np.ndarray] = {}

    dy = dout
    if p.include_ffn:
        dz = _layernorm_backward(dout, c["ln2"])
        grads["w_2"] = c["g"].T @ dz
        grads["b_2"] = dz.sum(axis=0)
        dh = (dz @ p.w_2.T) * _gelu_grad(c["h"], c["t"])
        grads["w_1"] = c["y"].T @ dh
        grads["b_1"] = dh.sum(axis=0)
        dy = dz + dh @ p.w_1.T

    xhat = c["ln1"][0]
    grads["ln_gain"] = (dy * xhat).sum(axis=0)
    grads["ln_bias"] = dy.sum(axis=0)
    dr = _layernorm_backward(dy, c["ln1"], p.ln_gain)

    dobs = dr.copy()
    grads["w_o"] = c["ctx"].T @ dr
    grads["b_o"] = dr.sum(axis=0)
    dctx = _split(dr @ p.w_o.T, p.heads)

    attn, q, k, v = c["attn"], c["q"], c["k"], c["v"]
    dattn = dctx @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dctx
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / math.sqrt(p.head_dim)
    dq = _merge(ds @ k)
    dk = _merge(ds.transpose(0, 2, 1) @ q)
    dv = _merge(dv)

    grads["w_q"] = c["x_q"].T @ dq
    grads["b_q"] = dq.sum(axis=0)
    grads["w_k"] = c["x_kv"].T @ dk
    grads["b_k"] = dk.sum(axis=0)
    grads["w_v"] = c["x_kv"].T @ dv
    grads["b_v"] = dv.sum(axis=0)
    dx_q = dq @ p.w_q.T
    dx_kv = dk @ p.w_k.T + dv @ p.w_v.T
    grads["m_obs"] = dx_q.sum(axis=0)
    grads["m_kg"] = dx_kv.sum(axis=0)
    grads["obs"] = dobs + dx_q
    grads["knowledge"] = dx_kv
    return grads


def sgd_step(params: AstffParams, grads: dict[str, np.ndarray], lr: float) -> AstffParams:
    return replace(params, **{n: t - lr * grads[n] for n, t in params.tensors().items()})


_CKPT_HEAD = struct.Struct("<4sIIIBI")


def params_to_bytes(params: AstffParams) -> bytes:
    """Checkpoint container: header, then per tensor ``u16`` name length,
    UTF-8 name, ``u8`` rank, ``u32`` dims and a float32 payload; a CRC32C of
    everything before it closes the file."""
    tensors = params.tensors()
    buf = bytearray(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, params.d, params.heads,
                                    int(params.include_ffn), len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", crc32c.crc32c(bytes(buf)))
    return bytes(buf)


def params_from_bytes(data: bytes) -> AstffParams:
    if len(data) < _CKPT_HEAD.size + 4:
        raise FormatError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic, version, d, heads, ffn, count = _CKPT_HEAD.unpack_from(body, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FormatError("not an ASTFF checkpoint")
    if crc32c.crc32c(body) != crc:
        raise CorruptStore("checkpoint checksum mismatch")
    off = _CKPT_HEAD.size
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise FormatError("trailing bytes in checkpoint")
    expected = set(param_shapes(d, bool(ffn)))
    if set(tensors) != expected:
        raise FormatError(f"checkpoint tensors {sorted(tensors)} do not match the declared shape")
    return AstffParams(d=d, heads=heads, **tensors)


def save_params(params: AstffParams, path: str | Path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: str | Path) -> AstffParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return params_from_bytes(data)

