"""The three fine-tuning losses over conditional question likelihood.

- mle_loss: mean negative log-likelihood per loss-bearing token, positives only.
- lul_loss: positives contribute -log p, negatives -log(1 - p) per token
  (probabilities clamped away from 1 so the negative term stays bounded).
- rll_loss: hinge on the gap between the summed log-likelihood of a question
  under its relevant passage and under a non-relevant one.

MLE/LUL use a mean-per-token reduction, so reported values are comparable
across batch shapes; corpus-level sums are recoverable by multiplying by the
token count. RLL averages over triples and uses raw summed log-likelihoods.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import UsageError
from .model import ModelConfig, target_log_probs
from .tensor import Tensor
from .textcodec import EncodedPair

PROB_CLAMP = 1e-12  # p is kept inside [PROB_CLAMP, 1 - PROB_CLAMP] before log(1 - p)


@dataclass(frozen=True)
class LabeledPair:
    pair: EncodedPair
    y: int

    def __post_init__(self):
        if self.y not in (0, 1):
            raise UsageError(f"label must be 0 or 1, got {self.y}")


@dataclass(frozen=True)
class RankTriple:
    positive: EncodedPair
    negative: EncodedPair
    margin: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise UsageError("margin must be nonnegative")
        if self.positive.question_ids != self.negative.question_ids:
            raise UsageError("positive and negative encodings must share the question tokens")


def mle_loss(params: dict[str, Tensor], config: ModelConfig, batch: list[EncodedPair],
             dropout_rng=None) -> Tensor:
    """Mean over loss-bearing tokens of -log p(token | prefix); >= 0."""
    if not batch:
        raise UsageError("mle_loss: empty batch")
    lp, mask = target_log_probs(params, config, batch, dropout_rng=dropout_rng)
    total = float(mask.sum())
    return -(lp * T.constant(mask)).sum() * (1.0 / total)


def lul_loss(params: dict[str, Tensor], config: ModelConfig, batch: list[LabeledPair],
             dropout_rng=None) -> Tensor:
    """Per-token likelihood on positives plus unlikelihood -log(1-p) on negatives."""
    if not batch:
        raise UsageError("lul_loss: empty batch")
    lp, mask = target_log_probs(params, config, [lb.pair for lb in batch], dropout_rng=dropout_rng)
    dtype = lp.dtype
    y = T.constant([[float(lb.y)] for lb in batch], dtype=dtype)
    p = T.clamp(lp.exp(), PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_token = y * (-lp) + (1.0 - y) * (-(1.0 - p).log())
    total = float(mask.sum())
    return (per_token * T.constant(mask)).sum() * (1.0 / total)


def rll_loss(params: dict[str, Tensor], config: ModelConfig, triples: list[RankTriple],
             dropout_rng=None) -> Tensor:
    """Mean over triples of max(0, margin - ll_positive + ll_negative).

    Log-likelihoods are raw sums over question tokens; both sides score the
    same question, so no length normalization is involved. Satisfied triples
    contribute zero loss and zero gradient.
    """
    if not triples:
        raise UsageError("rll_loss: empty batch")
    for tr in triples:
        if tr.positive.question_ids != tr.negative.question_ids:
            raise UsageError("triple encodings must share the question tokens")
    n = len(triples)
    pairs = [tr.positive for tr in triples] + [tr.negative for tr in triples]
    lp, mask = target_log_probs(params, config, pairs, dropout_rng=dropout_rng)
    ll = (lp * T.constant(mask)).sum(axis=1)
    ll_pos, ll_neg = ll[:n], ll[n:]
    margins = T.constant([tr.margin for tr in triples], dtype=lp.dtype)
    return T.relu(margins - ll_pos + ll_neg).mean()
