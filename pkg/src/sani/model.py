"""Small two-variant transformer with an addressable final linear layer.

Both variants share one body: learned token + position embeddings,
pre-norm blocks (multi-head attention, GELU feed-forward), a final
layer norm, and an untied LM head.  The bidirectional variant ("mlm")
attends everywhere except padding keys; the causal variant ("clm")
additionally masks future positions.

The head is stored as weight [vocab, d_model] plus bias [vocab], so one
"output unit" of the model is one weight row and its bias entry; that
is the unit the erasure phase zeroes.

Checkpoints are little-endian binary: magic "SANI", format version,
JSON metadata (config, epoch, seed), one record per tensor, and a
trailing CRC64 over everything before it.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, CorruptFile, FormatVersionMismatch, SequenceTooLong

MLM = "mlm"
CLM = "clm"

HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"

CHECKPOINT_MAGIC = b"SANI"
CHECKPOINT_VERSION = 1

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    max_seq: int
    vocab_size: int
    seed: int

    def __post_init__(self):
        if self.variant not in (MLM, CLM):
            raise ConfigError(f"variant must be '{MLM}' or '{CLM}', got {self.variant!r}")
        for k in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size"):
            if getattr(self, k) < 1:
                raise ConfigError(f"ModelConfig.{k} must be >= 1")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "ModelConfig":
        return ModelConfig(
            variant=str(obj["variant"]),
            n_layers=int(obj["n_layers"]),
            n_heads=int(obj["n_heads"]),
            d_model=int(obj["d_model"]),
            d_ff=int(obj["d_ff"]),
            max_seq=int(obj["max_seq"]),
            vocab_size=int(obj["vocab_size"]),
            seed=int(obj["seed"]),
        )


class ModelParams:
    """Config plus a stable, ordered name -> Tensor map."""

    def __init__(self, cfg: ModelConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: T.Tensor(v.data.copy(), name=k) for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.data.size for v in self.tensors.values())


def init(cfg: ModelConfig) -> ModelParams:
    """Deterministic init from cfg.seed: N(0, 0.02^2) weights, unit layer
    norm gains, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    d, f, v, s = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq

    def w(shape):
        return rng.normal(0.0, 0.02, size=shape)

    order: list[tuple[str, np.ndarray]] = [("tok_emb", w((v, d))), ("pos_emb", w((s, d)))]
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        order += [
            (f"{p}.ln1.gain", np.ones(d)),
            (f"{p}.ln1.bias", np.zeros(d)),
            (f"{p}.attn.wq", w((d, d))),
            (f"{p}.attn.bq", np.zeros(d)),
            (f"{p}.attn.wk", w((d, d))),
            (f"{p}.attn.bk", np.zeros(d)),
            (f"{p}.attn.wv", w((d, d))),
            (f"{p}.attn.bv", np.zeros(d)),
            (f"{p}.attn.wo", w((d, d))),
            (f"{p}.attn.bo", np.zeros(d)),
            (f"{p}.ln2.gain", np.ones(d)),
            (f"{p}.ln2.bias", np.zeros(d)),
            (f"{p}.ff.w1", w((d, f))),
            (f"{p}.ff.b1", np.zeros(f)),
            (f"{p}.ff.w2", w((f, d))),
            (f"{p}.ff.b2", np.zeros(d)),
        ]
    order += [
        ("ln_f.gain", np.ones(d)),
        ("ln_f.bias", np.zeros(d)),
        (HEAD_WEIGHT, w((v, d))),
        (HEAD_BIAS, np.zeros(v)),
    ]
    return ModelParams(cfg, {name: T.Tensor(arr, name=name) for name, arr in order})


_CAUSAL_CACHE: dict = {}


def attention_bias(mode: str, pads: np.ndarray | None, batch: int, seq: int, n_heads: int) -> np.ndarray | None:
    """Additive [batch*heads, seq, seq] score bias, or None if no masking.

    Causal mode blocks future keys; padded key positions are blocked in
    both modes.  Finite large negatives avoid inf-inf NaNs.  The pure
    causal mask is cached per (batch, seq, heads).
    """
    need_pad = pads is not None and bool(pads.any())
    if mode == MLM and not need_pad:
        return None
    if mode == CLM:
        key = (batch, seq, n_heads)
        causal = _CAUSAL_CACHE.get(key)
        if causal is None:
            causal = np.broadcast_to(
                np.triu(np.full((seq, seq), NEG_INF), k=1), (batch * n_heads, seq, seq)
            ).copy()
            _CAUSAL_CACHE[key] = causal
        if not need_pad:
            return causal
        pad_bias = np.where(pads[:, None, :], NEG_INF, 0.0)
        return causal + np.repeat(pad_bias, n_heads, axis=0)
    pad_bias = np.where(pads[:, None, :], NEG_INF, 0.0)
    return np.repeat(pad_bias, n_heads, axis=0)


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    B, S, D = x.shape
    y = T.add(T.matmul(T.reshape(x, (B * S, D)), w), b)
    return T.reshape(y, (B, S, w.shape[1]))


def _attention(params: ModelParams, layer: int, x: T.Tensor, bias: np.ndarray | None) -> T.Tensor:
    cfg = params.cfg
    B, S, D = x.shape
    H = cfg.n_heads
    hd = D // H
    p = f"layer{layer}.attn"
    q = _linear(x, params[f"{p}.wq"], params[f"{p}.bq"])
    k = _linear(x, params[f"{p}.wk"], params[f"{p}.bk"])
    v = _linear(x, params[f"{p}.wv"], params[f"{p}.bv"])

    def heads(u):
        return T.reshape(T.swap_axes(T.reshape(u, (B, S, H, hd)), 1, 2), (B * H, S, hd))

    qs, ks, vs = heads(q), heads(k), heads(v)
    scores = T.scale(T.matmul(qs, T.swap_axes(ks, 1, 2)), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = T.add_const(scores, bias)
    ctx = T.matmul(T.softmax_rows(scores), vs)
    ctx = T.reshape(T.swap_axes(T.reshape(ctx, (B, H, S, hd)), 1, 2), (B, S, D))
    return _linear(ctx, params[f"{p}.wo"], params[f"{p}.bo"])


def forward_hidden(
    params: ModelParams,
    ids: np.ndarray,
    attention_mode: str | None = None,
    pads: np.ndarray | None = None,
) -> T.Tensor:
    """Final-norm hidden states [B, T, d_model] for a batch of id rows."""
    cfg = params.cfg
    mode = attention_mode or cfg.variant
    ids = np.asarray(ids, dtype=np.int64)
    B, S = ids.shape
    if S > cfg.max_seq:
        raise SequenceTooLong(f"sequence length {S} > max_seq {cfg.max_seq}")
    x = T.add(T.embed(ids, params["tok_emb"]), T.embed(np.arange(S), params["pos_emb"]))
    bias = attention_bias(mode, pads, B, S, cfg.n_heads)
    for i in range(cfg.n_layers):
        a = T.layer_norm(x, params[f"layer{i}.ln1.gain"], params[f"layer{i}.ln1.bias"])
        x = T.add(x, _attention(params, i, a, bias))
        m = T.layer_norm(x, params[f"layer{i}.ln2.gain"], params[f"layer{i}.ln2.bias"])
        h = T.gelu(_linear(m, params[f"layer{i}.ff.w1"], params[f"layer{i}.ff.b1"]))
        x = T.add(x, _linear(h, params[f"layer{i}.ff.w2"], params[f"layer{i}.ff.b2"]))
    return T.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])


def logits_from_hidden(params: ModelParams, hidden: T.Tensor) -> T.Tensor:
    B, S, D = hidden.shape
    flat = T.reshape(hidden, (B * S, D))
    y = T.add(T.matmul(flat, T.swap_axes(params[HEAD_WEIGHT], 0, 1)), params[HEAD_BIAS])
    return T.reshape(y, (B, S, params.cfg.vocab_size))


def forward_batch(
    params: ModelParams,
    ids: np.ndarray,
    attention_mode: str | None = None,
    pads: np.ndarray | None = None,
) -> T.Tensor:
    return logits_from_hidden(params, forward_hidden(params, ids, attention_mode, pads))


def forward(params: ModelParams, token_ids, attention_mode: str | None = None) -> np.ndarray:
    """Logits [seq, vocab] for a single sequence (tape-free)."""
    ids = np.asarray(token_ids, dtype=np.int64)[None, :]
    return forward_batch(params, ids, attention_mode).data[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CRC64_POLY = 0xC96C5795D7870F42  # reflected ECMA-182


def _crc64_table():
    table = []
    for b in range(256):
        crc = b
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    opt_m: dict
    opt_v: dict
    opt_step: int
    epoch: int
    seed: int
    meta: dict

    def to_params(self) -> ModelParams:
        return ModelParams(self.config, {k: T.Tensor(v.copy(), name=k) for k, v in self.tensors.items()})


def save_checkpoint(path, params: ModelParams, opt_state=None, epoch: int = 0, seed: int = 0, meta: dict | None = None):
    records: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in params.tensors.items()]
    opt_step = 0
    if opt_state is not None:
        opt_step = opt_state.step
        records += [(f"opt.m.{k}", v) for k, v in opt_state.m.items()]
        records += [(f"opt.v.{k}", v) for k, v in opt_state.v.items()]
    header = {
        "config": params.cfg.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
        "opt_step": int(opt_step),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(hbytes)), hbytes]
    for name, arr in records:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<Q", crc64(body)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    body, (stored_crc,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if crc64(body) != stored_crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    version = struct.unpack("<I", body[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(f"{path}: format version {version} != {CHECKPOINT_VERSION}")
    hlen = struct.unpack("<I", body[8:12])[0]
    header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    pos = 12 + hlen
    tensors: dict = {}
    opt_m: dict = {}
    opt_v: dict = {}
    while pos < len(body):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr
        else:
            tensors[name] = arr
    return Checkpoint(
        config=cfg,
        tensors=tensors,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=int(header["opt_step"]),
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
        meta=header.get("meta", {}),
    )


def ensure_variant(cfg: ModelConfig, expected_variant: str):
    if cfg.variant != expected_variant:
        raise ConfigError(f"checkpoint variant {cfg.variant!r} incompatible with {expected_variant!r} run")
