"""Autoregressive sampling with combined top-k and nucleus filtering.

Filtering composes sequentially: temperature, then keep the top_k most
probable tokens, then keep the smallest high-probability prefix of the
survivors whose mass reaches top_p, then renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import ModelConfig, forward_logits
from .tensor import Tensor, no_grad
from .textcodec import BOQ_ID, BOS_ID, EOQ_ID, Vocabulary


@dataclass
class SamplerConfig:
    top_k: int = 50
    top_p: float = 0.95
    temperature: float = 1.0
    max_new_tokens: int = 32
    seed: int = 0

    def validate(self) -> None:
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature!r}")
        if int(self.max_new_tokens) != self.max_new_tokens or self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be a positive integer, "
                              f"got {self.max_new_tokens!r}")


def filter_logits(logits: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Full-vocabulary probability vector; tokens outside the filtered
    support carry exactly 0. At least one token always survives."""
    config.validate()
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise InputError(f"filter_logits expects a 1-D logit vector, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise InputError("filter_logits requires finite logits")
    scaled = logits / config.temperature
    scaled = scaled - scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    # stable sort keeps equal-probability ordering deterministic
    order = np.argsort(-probs, kind="stable")
    keep = order[: min(config.top_k, probs.size)]
    mass = np.cumsum(probs[keep])
    cutoff = int(np.searchsorted(mass, config.top_p * mass[-1] - 1e-12)) + 1
    keep = keep[:max(cutoff, 1)]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    out /= out.sum()
    return out


def sample_tokens(params: dict[str, Tensor], model_config: ModelConfig,
                  prefix_ids: list[int], config: SamplerConfig, stop_id: int,
                  rng: np.random.Generator, trace: list | None = None) -> list[int]:
    """Sample up to max_new_tokens continuations of prefix_ids, halting at
    stop_id (which is not returned) or at the model's context limit."""
    config.validate()
    if len(prefix_ids) >= model_config.max_seq_len:
        raise InputError(f"prefix of {len(prefix_ids)} tokens leaves no room to generate "
                         f"within max_seq_len={model_config.max_seq_len}")
    ids = list(prefix_ids)
    out: list[int] = []
    with no_grad():
        for _ in range(config.max_new_tokens):
            logits = forward_logits(params, model_config, np.array(ids, dtype=np.int64))
            probs = filter_logits(logits.data[-1], config)
            if trace is not None:
                trace.append(probs.copy())
            token = int(rng.choice(probs.size, p=probs))
            if token == stop_id:
                break
            out.append(token)
            ids.append(token)
            if len(ids) >= model_config.max_seq_len:
                break
    return out


def sample_question(params: dict[str, Tensor], model_config: ModelConfig,
                    vocab: Vocabulary, passage: str, config: SamplerConfig) -> str:
    """Sample a question conditioned on the passage; deterministic per seed."""
    passage_ids = vocab.encode_text(passage)
    prefix = [BOS_ID, *passage_ids, BOQ_ID]
    if len(prefix) >= model_config.max_seq_len:
        raise InputError(f"passage of {len(passage_ids)} tokens exceeds the "
                         f"max_seq_len={model_config.max_seq_len} generation budget")
    rng = np.random.default_rng(config.seed)
    tokens = sample_tokens(params, model_config, prefix, config, EOQ_ID, rng)
    return vocab.decode(tokens)


def sample_passage(params: dict[str, Tensor], model_config: ModelConfig,
                   vocab: Vocabulary, question: str, config: SamplerConfig) -> str:
    """Flipped direction: sample a passage from a model trained on
    question-conditioned passages (the a_given_q encoding)."""
    return sample_question(params, model_config, vocab, question, config)
