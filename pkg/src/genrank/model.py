"""Decoder-only transformer: next-token logits and conditional question likelihood.

Pre-layer-norm blocks, learned positional embeddings, causal masking via an
additive -1e9 on future positions. The likelihood of a question given a
passage is the sum of target log-probabilities over the loss-bearing
positions of an :class:`~genrank.textcodec.EncodedPair` (question tokens
plus the terminator).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, UsageError
from .tensor import Tensor
from .textcodec import PAD_ID, EncodedPair

CHECKPOINT_MAGIC = b"GRNK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    dropout: float = 0.0
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32, scale: float = 0.02) -> dict[str, Tensor]:
    """Fresh parameters: N(0, scale) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)

    def normal(*shape):
        return T.param(rng.normal(0.0, scale, size=shape).astype(dtype))

    def zeros(*shape):
        return T.param(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return T.param(np.ones(shape, dtype=dtype))

    d, f, v = config.d_model, config.d_ff, config.vocab_size
    params: dict[str, Tensor] = {
        "tok_emb": normal(v, d),
        "pos_emb": normal(config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = ones(d)
        params[p + "ln1.b"] = zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + w] = normal(d, d)
        for b in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + b] = zeros(d)
        params[p + "ln2.g"] = ones(d)
        params[p + "ln2.b"] = zeros(d)
        params[p + "ffn.w1"] = normal(d, f)
        params[p + "ffn.b1"] = zeros(f)
        params[p + "ffn.w2"] = normal(f, d)
        params[p + "ffn.b2"] = zeros(d)
    params["ln_f.g"] = ones(d)
    params["ln_f.b"] = zeros(d)
    if not config.tie_embeddings:
        params["out_proj"] = normal(d, v)
    return params


_MASK_CACHE: dict[tuple[int, str], T.Tensor] = {}
_POS_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int, dtype) -> T.Tensor:
    """Cached additive-mask constant; reuse across graphs is safe because a
    constant never accumulates gradient."""
    key = (t, np.dtype(dtype).name)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = T.constant(np.triu(np.full((t, t), T.NEG_MASK, dtype=dtype), k=1))
        _MASK_CACHE[key] = mask
    return mask


def _positions(t: int) -> np.ndarray:
    pos = _POS_CACHE.get(t)
    if pos is None:
        pos = np.arange(t)
        _POS_CACHE[t] = pos
    return pos


def forward_logits(params: dict[str, Tensor], config: ModelConfig, ids, dropout_rng=None) -> Tensor:
    """Next-token logits for every position; position i sees only ids[0..i].

    ``ids`` is a 1-d sequence or a (batch, time) array; the output adds a
    trailing vocab axis. Padding must sit at the end of a row: the causal
    mask then keeps real positions unaffected. Dropout is applied only when
    a generator is passed and config.dropout > 0.
    """
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"ids must be 1-d or 2-d, got shape {ids.shape}")
    b, t = ids.shape
    if t > config.max_seq_len:
        raise InputError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError("token id out of vocabulary range")

    dtype = params["tok_emb"].dtype
    rate = config.dropout if dropout_rng is not None else 0.0

    def drop(x):
        return T.dropout(x, rate, dropout_rng) if rate > 0.0 else x

    x = T.embedding(params["tok_emb"], ids) + T.embedding(params["pos_emb"], _positions(t))
    x = drop(x)
    mask = _causal_mask(t, dtype)
    h_dim = config.d_model // config.n_heads
    inv_sqrt = 1.0 / np.sqrt(h_dim)

    def split_heads(y):
        return y.reshape((b, t, config.n_heads, h_dim)).swapaxes(1, 2)

    for i in range(config.n_layers):
        p = f"l{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = split_heads(h @ params[p + "attn.wq"] + params[p + "attn.bq"])
        k = split_heads(h @ params[p + "attn.wk"] + params[p + "attn.bk"])
        v = split_heads(h @ params[p + "attn.wv"] + params[p + "attn.bv"])
        scores = (q @ k.swapaxes(2, 3)) * inv_sqrt + mask
        attn = drop(T.softmax(scores, axis=-1))
        ctx = (attn @ v).swapaxes(1, 2).reshape((b, t, config.d_model))
        x = x + drop(ctx @ params[p + "attn.wo"] + params[p + "attn.bo"])
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        f = T.gelu(h @ params[p + "ffn.w1"] + params[p + "ffn.b1"])
        x = x + drop(f @ params[p + "ffn.w2"] + params[p + "ffn.b2"])

    x = T.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    if config.tie_embeddings:
        logits = x @ params["tok_emb"].swapaxes(0, 1)
    else:
        logits = x @ params["out_proj"]
    return logits[0] if squeeze else logits


def batch_arrays(pairs: list[EncodedPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-padded (inputs, targets, loss_mask) arrays for a batch of pairs.

    Row i holds pair i's ids[:-1] as inputs and ids[1:] as targets; the float
    mask is 1 exactly on the question_len loss-bearing positions.
    """
    if not pairs:
        raise UsageError("empty batch")
    t = max(len(p.ids) - 1 for p in pairs)
    inputs = np.full((len(pairs), t), PAD_ID, dtype=np.int64)
    targets = np.full((len(pairs), t), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(pairs), t), dtype=np.float64)
    for i, pair in enumerate(pairs):
        n = len(pair.ids) - 1
        inputs[i, :n] = pair.ids[:-1]
        targets[i, :n] = pair.ids[1:]
        mask[i, pair.loss_start : pair.loss_start + pair.question_len] = 1.0
    return inputs, targets, mask


def target_log_probs(params: dict[str, Tensor], config: ModelConfig, pairs: list[EncodedPair],
                     dropout_rng=None) -> tuple[Tensor, np.ndarray]:
    """Per-position log p(target | prefix) for a batch, plus the loss mask.

    Entries outside the mask (passage positions, padding) are present but
    must be ignored by callers.
    """
    inputs, targets, mask = batch_arrays(pairs)
    logits = forward_logits(params, config, inputs, dropout_rng=dropout_rng)
    lp = T.log_softmax(logits, axis=-1)
    return T.take_along_last(lp, targets), mask.astype(np.dtype(params["tok_emb"].dtype).type)


def cond_log_likelihood(params: dict[str, Tensor], config: ModelConfig, pair: EncodedPair) -> Tensor:
    """log p(question | passage): sum of the question_len target log-probs; <= 0."""
    if pair.question_len == 0:
        raise InputError("pair has no loss-bearing tokens")
    lp, mask = target_log_probs(params, config, [pair])
    return (lp * T.constant(mask)).sum()


def per_token_log_probs(params: dict[str, Tensor], config: ModelConfig, pair: EncodedPair) -> Tensor:
    """The question_len individual target log-probs, in order (ends at <eoq>)."""
    if pair.question_len == 0:
        raise InputError("pair has no loss-bearing tokens")
    lp, _ = target_log_probs(params, config, [pair])
    return lp[0, pair.loss_start : pair.loss_start + pair.question_len]


def score_pairs(params: dict[str, Tensor], config: ModelConfig, pairs: list[EncodedPair],
                batch_size: int = 64) -> np.ndarray:
    """Summed question log-likelihood per pair, computed without building a graph."""
    out = np.empty(len(pairs), dtype=np.float64)
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            lp, mask = target_log_probs(params, config, chunk)
            out[start : start + len(chunk)] = (lp.data * mask).sum(axis=1)
    return out


# -- checkpoint io -----------------------------------------------------------


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor]) -> None:
    """Write magic "GRNK", u32 version, u32 header length, a JSON header
    (config + tensor directory with shapes/offsets), then the raw
    little-endian float32 arrays."""
    directory = []
    blobs = []
    offset = 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(config), "tensors": directory}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelConfig, dict[str, Tensor]]:
    """Read a checkpoint written by save_checkpoint; unknown versions are rejected."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"not a checkpoint file (magic {magic!r})")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    config = ModelConfig(**header["config"])
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(data[start : start + nbytes], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = T.param(arr.astype(dtype))
    return config, params
