"""SpecBPP network: spectral encoder, permutation head, regression head.

Encoder pipeline for a patch stack (n, H, W, B):

  1. spectral self-attention over band tokens (per pixel, bands are the
     token sequence; scalar tokens collapse the head projections to one
     coupling and one mixing scalar per head, evaluated exactly),
  2. learned per-band weighting alpha,
  3. three depthwise-separable conv scales (3/5/7) fused by a linear
     map to the embedding width d,
  4. dual attention: sigmoid channel gate from a bottleneck MLP and a
     sigmoid spatial gate from a 7x7 conv over channel-pooled maps,
  5. global average pooling to the embedding z (n, d).

The permutation head maps z to an N x N row-stochastic matrix P where
row i scores which input segment sits at shuffled position i; training
minimizes the mean negative log-probability of the true inverse
permutation. The regression head is a small MLP for fine-tuning.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "PermHeadParams",
    "RegressionHeadParams",
    "spectral_attention",
    "band_weighting",
    "multiscale_block",
    "attention_gates",
    "dual_attention",
    "encode",
    "perm_head",
    "decode_argmax",
    "decode_greedy",
    "pretext_loss",
    "regression_forward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture sizes; defaults are desk-scale."""

    n_bands: int
    embed_dim: int = 64
    n_heads: int = 4
    scale_channels: int = 32
    bottleneck_ratio: int = 4
    kernel_sizes: tuple = (3, 5, 7)
    attention_gain: float = 2.0

    def __post_init__(self):
        if self.n_bands < 1:
            raise ValueError(f"n_bands must be >= 1, got {self.n_bands}")
        if self.attention_gain <= 0:
            raise ValueError(f"attention_gain must be positive, got {self.attention_gain}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % self.bottleneck_ratio != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by bottleneck ratio {self.bottleneck_ratio}")
        for k in self.kernel_sizes:
            if k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")

    @property
    def d_k(self) -> int:
        return self.embed_dim // self.n_heads


def _uniform(rng, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    # variance-preserving fan-in scaling: Var = gain^2 / fan_in
    limit = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class EncoderParams:
    """All encoder weights as trainable Tensors.

    Attention stores per-head query/key/value/output projection vectors
    (scalar band tokens make each a d_k vector); alpha starts at ones;
    matrices and kernels use fan-in-scaled uniform init, biases zeros.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        b, d, heads, dk = config.n_bands, config.embed_dim, config.n_heads, config.d_k
        ch, ratio = config.scale_channels, config.bottleneck_ratio

        def p(arr):
            return Tensor(arr, requires_grad=True)

        # scalar band tokens give the q/k projections fan-in 1; the extra
        # gain keeps the per-head coupling c_h large enough that softmax
        # rows stay selective instead of averaging every band together
        g = config.attention_gain
        self.wq = p(_uniform(rng, (heads, dk), 1, gain=g))
        self.wk = p(_uniform(rng, (heads, dk), 1, gain=g))
        self.wv = p(_uniform(rng, (heads, dk), 1))
        self.wo = p(_uniform(rng, (heads, dk), d))
        self.alpha = p(np.ones(b, dtype=np.float32))
        self.dw = [p(_uniform(rng, (k, k, b), k * k)) for k in config.kernel_sizes]
        self.pw = [p(_uniform(rng, (b, ch), b)) for _ in config.kernel_sizes]
        self.fusion_w = p(_uniform(rng, (len(config.kernel_sizes) * ch, d), len(config.kernel_sizes) * ch))
        self.fusion_b = p(np.zeros(d, dtype=np.float32))
        self.ca_w1 = p(_uniform(rng, (d, d // ratio), d))
        self.ca_w2 = p(_uniform(rng, (d // ratio, d), d // ratio))
        self.sa_kernel = p(_uniform(rng, (7, 7, 2), 7 * 7))

    def named(self) -> list:
        out = [
            ("wq", self.wq),
            ("wk", self.wk),
            ("wv", self.wv),
            ("wo", self.wo),
            ("alpha", self.alpha),
        ]
        for i, k in enumerate(self.config.kernel_sizes):
            out.append((f"dw{k}", self.dw[i]))
            out.append((f"pw{k}", self.pw[i]))
        out += [
            ("fusion_w", self.fusion_w),
            ("fusion_b", self.fusion_b),
            ("ca_w1", self.ca_w1),
            ("ca_w2", self.ca_w2),
            ("sa_kernel", self.sa_kernel),
        ]
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named()]


class PermHeadParams:
    """Linear map d -> N*N logits, reshaped to N rows of N scores."""

    def __init__(self, embed_dim: int, n_segments: int, rng: np.random.Generator):
        if n_segments < 1:
            raise ValueError(f"n_segments must be >= 1, got {n_segments}")
        self.embed_dim = embed_dim
        self.n_segments = n_segments
        self.wp = Tensor(_uniform(rng, (embed_dim, n_segments * n_segments), embed_dim), requires_grad=True)
        self.bp = Tensor(np.zeros(n_segments * n_segments, dtype=np.float32), requires_grad=True)

    def named(self) -> list:
        return [("wp", self.wp), ("bp", self.bp)]

    def tensors(self) -> list:
        return [self.wp, self.bp]


class RegressionHeadParams:
    """Two-layer MLP d -> d/2 -> 1 with ReLU."""

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        half = max(embed_dim // 2, 1)
        self.embed_dim = embed_dim
        self.w1 = Tensor(_uniform(rng, (embed_dim, half), embed_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(half, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor(_uniform(rng, (half, 1), half), requires_grad=True)
        self.b2 = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)

    def named(self) -> list:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def tensors(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


# ------------------------------------------------------------- encoder


def spectral_attention(x: Tensor, params: EncoderParams) -> Tensor:
    """Multi-head self-attention across the band axis, shape preserved.

    Scalar band tokens make Q_i = x_i wq_h etc., so the per-head map is
    softmax(c_h x xT) with c_h = (wq_h . wk_h)/sqrt(d_k), and the output
    projection reduces to the scalar beta_h = wv_h . wo_h.
    """
    inv_sqrt_dk = 1.0 / np.sqrt(params.config.d_k)
    c = T.scale(T.sum_last(T.mul(params.wq, params.wk)), inv_sqrt_dk)
    beta = T.sum_last(T.mul(params.wv, params.wo))
    return T.band_attention(x, c, beta)


def band_weighting(x: Tensor, alpha: Tensor) -> Tensor:
    """Scale each band by its learned weight: F' = F * alpha."""
    if x.data.shape[-1] != alpha.data.shape[-1] or alpha.data.ndim != 1:
        raise T.ShapeError(f"band_weighting: alpha {alpha.data.shape} must match band axis of {x.data.shape}")
    return T.mul(x, alpha)


def multiscale_block(x: Tensor, params: EncoderParams) -> Tensor:
    """Per-scale depthwise+pointwise convs, concatenated, fused to d channels."""
    feats = []
    for dw, pw in zip(params.dw, params.pw):
        feats.append(T.matmul(T.dwconv(x, dw), pw))
    cat = T.concat(feats, axis=-1)
    return T.add(T.matmul(cat, params.fusion_w), params.fusion_b)


def attention_gates(x: Tensor, params: EncoderParams) -> tuple:
    """Channel gate (..., C) and spatial gate (..., H, W, 1), both sigmoid.

    Channel gate: bottleneck MLP on the globally pooled features. Spatial
    gate: 7x7 conv over the channel-max and channel-mean maps stacked as
    two channels, summed to one map.
    """
    pooled = T.global_avg_pool(x)
    ca = T.sigmoid(T.matmul(T.relu(T.matmul(pooled, params.ca_w1)), params.ca_w2))
    squeezed = T.concat([T.channel_max_pool(x), T.channel_avg_pool(x)], axis=-1)
    maps = T.dwconv(squeezed, params.sa_kernel)
    ones = Tensor(np.ones((2, 1), dtype=maps.data.dtype))
    sa = T.sigmoid(T.matmul(maps, ones))
    return ca, sa


def dual_attention(x: Tensor, params: EncoderParams, force_open: bool = False) -> Tensor:
    """Gate features by channel and spatial attention, then pool to z.

    ``force_open`` replaces both sigmoid gates with exact ones; used to
    verify that z then equals plain global average pooling.
    """
    if force_open:
        ca = Tensor(np.ones(x.data.shape[:-3] + x.data.shape[-1:], dtype=x.data.dtype))
        sa = Tensor(np.ones(x.data.shape[:-1] + (1,), dtype=x.data.dtype))
    else:
        ca, sa = attention_gates(x, params)
    gated = T.mul(x, T.reshape(ca, ca.data.shape[:-1] + (1, 1, ca.data.shape[-1])))
    return T.global_avg_pool(T.mul(gated, sa))


def encode(x: Tensor, params: EncoderParams, force_open: bool = False) -> Tensor:
    """Full encoder: patches (n, H, W, B) -> embeddings (n, d)."""
    att = spectral_attention(x, params)
    weighted = band_weighting(att, params.alpha)
    fused = multiscale_block(weighted, params)
    return dual_attention(fused, params, force_open=force_open)


# ---------------------------------------------------------------- heads


def perm_head(z: Tensor, params: PermHeadParams, n: int) -> Tensor:
    """Row-stochastic (n, N, N) score matrix from embeddings (n, d)."""
    if n != params.n_segments:
        raise ValueError(f"head is sized for N={params.n_segments}, got n={n}")
    if z.data.shape[-1] != params.embed_dim:
        raise T.ShapeError(f"perm_head: embedding width {z.data.shape[-1]} != {params.embed_dim}")
    logits = T.add(T.matmul(z, params.wp), params.bp)
    logits = T.reshape(logits, logits.data.shape[:-1] + (n, n))
    return T.softmax_rows(logits)


def decode_argmax(p: np.ndarray) -> np.ndarray:
    """Per-row argmax assignment (ties -> lowest index); may repeat columns."""
    p = np.asarray(p)
    return np.argmax(p, axis=-1)


def decode_greedy(p: np.ndarray) -> np.ndarray:
    """Bijective assignment: repeatedly take the largest remaining score
    with both its row and column unused."""
    p = np.asarray(p)
    single = p.ndim == 2
    if single:
        p = p[None]
    n = p.shape[-1]
    out = np.empty(p.shape[:-1], dtype=np.int64)
    for b in range(p.shape[0]):
        mat = p[b].copy()
        for _ in range(n):
            i, j = np.unravel_index(np.argmax(mat), mat.shape)
            out[b, i] = j
            mat[i, :] = -np.inf
            mat[:, j] = -np.inf
    return out[0] if single else out


def pretext_loss(p: Tensor, provenance) -> Tensor:
    """Mean negative log-probability of the true segment origins.

    ``provenance`` is an int array (..., N) whose entry i names the
    original position of the segment now sitting at position i; for a
    map applied as output_i = input_map[i] that is the map itself.
    Accepts a Permutation for single samples.
    """
    if hasattr(provenance, "map"):
        targets = np.asarray(provenance.map)
    else:
        targets = np.asarray(provenance)
    if targets.shape != p.data.shape[:-1]:
        raise T.ShapeError(f"pretext_loss: targets {targets.shape} must index rows of {p.data.shape}")
    picked = T.take_along_last(p, targets.astype(np.int64))
    return T.neg(T.mean_all(T.log(T.clamp_min(picked, 1e-12))))


def regression_forward(z: Tensor, params: RegressionHeadParams) -> Tensor:
    """MLP prediction per embedding: (n, d) -> (n,)."""
    h = T.relu(T.add(T.matmul(z, params.w1), params.b1))
    out = T.add(T.matmul(h, params.w2), params.b2)
    return T.reshape(out, out.data.shape[:-1])


# ------------------------------------------------------------ checkpoint

_CKPT_MAGIC = b"SBPC"
_CKPT_VERSION = 1
_KIND_ARRAY = 0
_KIND_JSON = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path, sections: dict, meta: dict) -> None:
    """Write named parameter arrays plus one JSON metadata section.

    ``sections`` maps name -> Tensor or ndarray. Layout: magic, version
    u16, count u32, then per section: name (u16 length + UTF-8), kind
    u8 (0 array / 1 JSON), payload u32 length + bytes. Arrays embed the
    dataset container encoding.
    """
    from .data import pack_array

    items = list(sections.items()) + [("meta", meta)]
    blob = _CKPT_MAGIC + struct.pack("<HI", _CKPT_VERSION, len(items))
    for name, value in items:
        encoded = name.encode("utf-8")
        if isinstance(value, dict):
            kind, payload = _KIND_JSON, json.dumps(value, sort_keys=True).encode("utf-8")
        else:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            kind, payload = _KIND_ARRAY, pack_array(arr)
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<BI", kind, len(payload)) + payload
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path) -> tuple:
    """Read a checkpoint: returns (arrays dict, meta dict)."""
    from .data import unpack_array

    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("unrecognized checkpoint: bad magic bytes")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 10
    arrays = {}
    meta = {}
    for _ in range(count):
        if len(buf) < offset + 2:
            raise CheckpointError("truncated checkpoint section header")
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        if len(buf) < offset + 5:
            raise CheckpointError(f"truncated section '{name}'")
        kind, plen = struct.unpack_from("<BI", buf, offset)
        offset += 5
        if len(buf) < offset + plen:
            raise CheckpointError(f"truncated payload for section '{name}'")
        payload = buf[offset : offset + plen]
        offset += plen
        if kind == _KIND_ARRAY:
            arrays[name], _ = unpack_array(payload)
        elif kind == _KIND_JSON:
            meta = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"unknown section kind {kind} for '{name}'")
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after checkpoint content")
    return arrays, meta


def encoder_state(params: EncoderParams) -> dict:
    """Named arrays for checkpointing, prefixed 'enc.'."""
    return {f"enc.{name}": t for name, t in params.named()}


def restore_encoder(arrays: dict, config: EncoderConfig) -> EncoderParams:
    """Rebuild EncoderParams from checkpoint arrays (overwrites init)."""
    params = EncoderParams(config, np.random.default_rng(0))
    for name, t in params.named():
        key = f"enc.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing section '{key}'")
        arr = arrays[key]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"section '{key}' has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(np.float32, copy=True)
    return params
