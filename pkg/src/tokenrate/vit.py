"""A small pre-norm Vision Transformer with a compression hook per block.

Compression runs between the attention residual and the MLP residual of each
block.  A *compressor* object decides what happens there; see
``tokens.ScheduleCompressor`` (tokens are physically removed) and
``search.SearchCompressor`` (tokens are masked out of attention).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .proxy import attention_mask

MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    embed_dim: int = 32
    heads: int = 4
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    classes: int = 10
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("depth", "embed_dim", "heads", "patch_size", "image_size", "channels", "classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        """Image tokens plus the class token."""
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        n = d.pop("token_count", None)
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        if n is not None and n != cfg.token_count:
            raise ValueError(f"token_count {n} inconsistent with image/patch sizes ({cfg.token_count})")
        return cfg


# --- parameters ----------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, n = cfg.embed_dim, cfg.token_count
    hidden = cfg.mlp_ratio * d

    def tn(*shape, std=0.02):
        return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)

    p: dict[str, np.ndarray] = {
        "patch.w": rng.normal(0.0, 1.0 / math.sqrt(cfg.patch_dim), size=(cfg.patch_dim, d)),
        "patch.b": np.zeros(d),
        "cls": tn(d),
        "pos": tn(n, d),
    }
    for l in range(cfg.depth):
        pre = f"blocks.{l}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in ("q", "k", "v", "o"):
            p[pre + f"attn.w{w}"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
            p[pre + f"attn.b{w}"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "mlp.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, hidden))
        p[pre + "mlp.b1"] = np.zeros(hidden)
        p[pre + "mlp.w2"] = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, d))
        p[pre + "mlp.b2"] = np.zeros(d)
    p["norm.g"] = np.ones(d)
    p["norm.b"] = np.zeros(d)
    p["head.w"] = tn(d, cfg.classes)
    p["head.b"] = np.zeros(cfg.classes)
    return p


def check_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    ref = init_params(cfg, seed=0)
    missing = sorted(set(ref) - set(params))
    if missing:
        raise ShapeError(f"missing parameters: {missing}")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ShapeError(f"parameter {k}: shape {params[k].shape}, expected {v.shape}")


def block_params(params: dict, l: int) -> dict:
    pre = f"blocks.{l}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# --- checkpoint I/O --------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    meta: dict | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    """Write the DRCK container: magic, u32 version, JSON config block, f64 records."""
    header = json.dumps({"model": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    records = dict(params)
    for k, v in (extra or {}).items():
        records[k] = v
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(header)) + header
    buf += struct.pack("<I", len(records))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        buf += struct.pack("<I", len(raw_name)) + raw_name
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path):
    """Return ``(cfg, params, meta, extra)``; ``extra`` holds non-model records."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a DRCK checkpoint")
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(raw):
            raise ValueError(f"{path}: truncated at offset {pos}")
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hlen = u32()
    header = json.loads(raw[pos : pos + hlen].decode())
    pos += hlen
    cfg = ModelConfig.from_dict(header["model"])
    count = u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = u32()
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated at offset {pos}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    names = set(init_params(cfg, 0))
    params = {k: v for k, v in arrays.items() if k in names}
    extra = {k: v for k, v in arrays.items() if k not in names}
    check_params(cfg, params)
    return cfg, params, header.get("meta", {}), extra


# --- forward pieces ------------------------------------------------------------


@dataclass
class AttentionState:
    """Per-block attention by-products (numpy, batch-major)."""

    probs: np.ndarray  # (B, H, N, N) masked post-softmax
    class_attn: np.ndarray  # (B, N) class-token row averaged over heads
    image_attn: np.ndarray  # (B, N) mean attention received from live image-token queries
    value_norm: np.ndarray  # (B, N) L2 norm of each token's value vector
    token_mask: np.ndarray | None = None  # (N,) mask in effect, None = all live

    def importance(self, metric: str = "class_attn", rng: np.random.Generator | None = None) -> np.ndarray:
        """Sorting metric with masked tokens at -inf."""
        if metric == "class_attn":
            score = self.class_attn.copy()
        elif metric == "class_attn_value":
            score = self.class_attn * self.value_norm
        elif metric == "image_attn":
            score = self.image_attn.copy()
        elif metric == "random":
            if rng is None:
                raise ValueError("random metric needs an rng")
            score = rng.random(self.class_attn.shape)
        else:
            raise ValueError(f"unknown importance metric {metric!r}")
        if self.token_mask is not None:
            score[:, self.token_mask < 0.5] = -np.inf
        return score


class Compressor(Protocol):
    def attention_mask(self) -> Tensor | None: ...

    def __call__(self, block: int, xhat: Tensor, state: AttentionState) -> Tensor: ...


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(
            f"images of shape {np.shape(images)} do not match "
            f"{cfg.image_size}x{cfg.image_size}x{cfg.channels}"
        )
    b, g, p = imgs.shape[0], cfg.grid, cfg.patch_size
    x = imgs.reshape(b, g, p, g, p, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, cfg.patch_dim)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = x @ w
    return y + ag.broadcast_to(b, y.shape)


def patch_embed(images: np.ndarray, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, H, W, C) images -> (B, N, D) tokens; row 0 is the class token."""
    patches = Tensor(patchify(images, cfg))
    b = patches.shape[0]
    tok = _linear(patches, p["patch.w"], p["patch.b"])
    cls = ag.broadcast_to(ag.reshape(p["cls"], (1, 1, cfg.embed_dim)), (b, 1, cfg.embed_dim))
    x = ag.concat([cls, tok], axis=1)
    return x + ag.broadcast_to(p["pos"], x.shape)


def attention(
    x: Tensor, p: dict[str, Tensor], heads: int, token_mask: Tensor | None = None
) -> tuple[Tensor, AttentionState]:
    """Pre-norm multi-head self-attention with residual: ``x + Attn(LN(x))``."""
    bsz, n, d = x.shape
    dh = d // heads
    h = ag.layer_norm(x, p["ln1.g"], p["ln1.b"])

    def split(t):
        return ag.transpose(ag.reshape(t, (bsz, n, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(h, p["attn.wq"], p["attn.bq"]))
    k = split(_linear(h, p["attn.wk"], p["attn.bk"]))
    v = split(_linear(h, p["attn.wv"], p["attn.bv"]))
    s = ag.scale(q @ ag.transpose(k), 1.0 / math.sqrt(dh))
    if token_mask is None:
        a = ag.softmax(s)
        live = None
    else:
        if token_mask.shape != (n,):
            raise ShapeError(f"mask length {token_mask.shape} != token count {n}")
        a = ag.masked_softmax(s, ag.broadcast_to(attention_mask(token_mask), s.shape))
        live = token_mask.data
    o = ag.reshape(ag.transpose(a @ v, (0, 2, 1, 3)), (bsz, n, d))
    xhat = x + _linear(o, p["attn.wo"], p["attn.bo"])

    probs = a.data
    class_attn = probs[:, :, 0, :].mean(axis=1)
    rows = np.ones(n) if live is None else (live > 0.5).astype(np.float64)
    rows[0] = 0.0
    denom = max(rows.sum(), 1.0)
    image_attn = np.einsum("bhij,i->bj", probs, rows) / (denom * heads)
    vals = np.transpose(v.data, (0, 2, 1, 3)).reshape(bsz, n, d)
    state = AttentionState(
        probs=probs,
        class_attn=class_attn,
        image_attn=image_attn,
        value_norm=np.linalg.norm(vals, axis=-1),
        token_mask=None if live is None else live.copy(),
    )
    return xhat, state


def mlp_residual(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    h = ag.layer_norm(x, p["ln2.g"], p["ln2.b"])
    h = ag.gelu(_linear(h, p["mlp.w1"], p["mlp.b1"]))
    return x + _linear(h, p["mlp.w2"], p["mlp.b2"])


def block_forward(
    x: Tensor,
    p: dict[str, Tensor],
    heads: int,
    token_mask: Tensor | None = None,
    hook=None,
) -> tuple[Tensor, AttentionState]:
    """One transformer block; ``hook(xhat, state)`` may transform tokens before the MLP."""
    with ag.mac_section("blocks"):
        xhat, state = attention(x, p, heads, token_mask)
    if hook is not None:
        with ag.mac_section("compress"):
            xhat = hook(xhat, state)
    with ag.mac_section("blocks"):
        out = mlp_residual(xhat, p)
    return out, state


def classify(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Final norm and linear head applied to the class token."""
    with ag.mac_section("head"):
        cls = ag.layer_norm(x[:, 0, :], p["norm.g"], p["norm.b"])
        return _linear(cls, p["head.w"], p["head.b"])


def as_tensors(params, requires_grad: bool = False) -> dict[str, Tensor]:
    if params and isinstance(next(iter(params.values())), Tensor):
        return params
    return ag.parameters_like(params, requires_grad)


@dataclass
class ForwardResult:
    logits: Tensor
    states: list[AttentionState]
    final_mask: np.ndarray | None


def model_forward(
    images: np.ndarray,
    params,
    cfg: ModelConfig,
    compressor: Compressor | None = None,
) -> ForwardResult:
    """Classify a batch; the compressor (if any) acts after each block's attention."""
    p = as_tensors(params)
    if compressor is not None and hasattr(compressor, "reset"):
        compressor.reset()
    with ag.mac_section("embed"):
        x = patch_embed(images, p, cfg)
    states = []
    for l in range(cfg.depth):
        bp = block_params(p, l)
        mask = compressor.attention_mask() if compressor is not None else None
        hook = None if compressor is None else (lambda xh, st, _l=l: compressor(_l, xh, st))
        x, st = block_forward(x, bp, cfg.heads, mask, hook)
        states.append(st)
    logits = classify(x, p)
    final = None
    if compressor is not None:
        m = compressor.attention_mask()
        final = None if m is None else m.data.copy()
    return ForwardResult(logits, states, final)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - Tensor(np.broadcast_to(shift, (b, c)))
    lse = ag.log(ag.sum_(ag.exp(z), axis=1))
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = ag.sum_(z * Tensor(onehot), axis=1)
    return ag.mean(lse - picked)


def predict(images: np.ndarray, params, cfg: ModelConfig, compressor=None, batch_size: int = 500) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            res = model_forward(images[i : i + batch_size], params, cfg, compressor)
            out.append(res.logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def accuracy(images, labels, params, cfg: ModelConfig, compressor=None, batch_size: int = 500) -> float:
    pred = predict(images, params, cfg, compressor, batch_size)
    return float((pred == np.asarray(labels)).mean()) if len(pred) else 0.0
