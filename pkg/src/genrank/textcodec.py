"""Word-level tokenizer, vocabulary, and prompt encoding for (passage, question) pairs.

A pair is laid out as ``<bos> passage <boq> question <eoq>``. Only the
question tokens (and the closing ``<eoq>``) carry loss: the passage is a
conditioning prompt. ``EncodedPair.loss_start`` is the index of the
position whose *input* is ``<boq>``, i.e. the first position predicting a
question token.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import InputError, UsageError

PAD, UNK, BOS, BOQ, EOQ = "<pad>", "<unk>", "<bos>", "<boq>", "<eoq>"
RESERVED = (PAD, UNK, BOS, BOQ, EOQ)
PAD_ID, UNK_ID, BOS_ID, BOQ_ID, EOQ_ID = range(5)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, peel leading/trailing punctuation.

    Punctuation attached to a word becomes separate tokens ("x?" -> "x", "?");
    internal punctuation is kept ("don't" stays one token).
    """
    tokens: list[str] = []
    for chunk in text.lower().split():
        head: list[str] = []
        while chunk and _is_punct(chunk[0]):
            head.append(chunk[0])
            chunk = chunk[1:]
        tail: list[str] = []
        while chunk and _is_punct(chunk[-1]):
            tail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(head)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(tail))
    return tokens


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


class Vocabulary:
    """Bijective token<->id map with five reserved ids at the front."""

    def __init__(self, tokens: list[str]):
        for i, tok in enumerate(RESERVED):
            if i >= len(tokens) or tokens[i] != tok:
                raise InputError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def decode(self, ids, skip_reserved: bool = True) -> str:
        parts = []
        for i in ids:
            tok = self.id_to_token[int(i)]
            if skip_reserved and tok in RESERVED:
                continue
            parts.append(tok)
        return " ".join(parts)

    def save(self, path) -> None:
        """One token per line, line number = id, reserved tokens first."""
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(corpus, max_size: int = 50000, min_freq: int = 1) -> Vocabulary:
    """Most frequent tokens win; frequency ties go to the lexicographically smaller.

    ``max_size`` caps the total size including the five reserved tokens.
    """
    counts: Counter[str] = Counter()
    n_records = 0
    for record in corpus:
        n_records += 1
        counts.update(tokenize(record))
    if n_records == 0:
        raise InputError("cannot build a vocabulary from an empty corpus")
    if max_size <= len(RESERVED):
        raise InputError(f"max_size must exceed the {len(RESERVED)} reserved tokens")
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    kept = kept[: max_size - len(RESERVED)]
    return Vocabulary(list(RESERVED) + kept)


@dataclass(frozen=True)
class EncodedPair:
    """Token ids ``<bos> P <boq> Q <eoq>`` plus the loss-mask boundary.

    ids[loss_start] is the ``<boq>`` position (it predicts the first question
    token); the final ``question_len`` targets, ending at ``<eoq>``, are the
    loss-bearing ones.
    """

    ids: tuple[int, ...]
    loss_start: int
    question_len: int

    def validate(self) -> None:
        ids = self.ids
        if not ids or ids[0] != BOS_ID:
            raise InputError("encoded pair must start with <bos>")
        if ids.count(BOQ_ID) != 1:
            raise InputError("encoded pair must contain exactly one <boq>")
        if ids[-1] != EOQ_ID:
            raise InputError("encoded pair must end with <eoq>")
        if ids[self.loss_start] != BOQ_ID:
            raise InputError("loss_start must index the <boq> position")
        if self.question_len != len(ids) - 1 - self.loss_start:
            raise InputError("question_len must count targets from first question token through <eoq>")

    @property
    def question_ids(self) -> tuple[int, ...]:
        """The loss-bearing target ids (question tokens plus <eoq>)."""
        return self.ids[self.loss_start + 1 :]


def encode_pair(passage: str, question: str, vocab: Vocabulary, max_len: int = 256) -> EncodedPair:
    """Encode to ``<bos> P <boq> Q <eoq>``, truncating passage tokens (never
    question tokens) from the right when the total exceeds ``max_len``."""
    q_ids = vocab.encode_text(question)
    if not q_ids:
        raise UsageError("question must be nonempty")
    if len(q_ids) > max_len - 3:
        raise InputError(f"question ({len(q_ids)} tokens) cannot fit in max_len={max_len}")
    p_ids = vocab.encode_text(passage)
    budget = max_len - 3 - len(q_ids)
    if len(p_ids) > budget:
        p_ids = p_ids[:budget]
    ids = [BOS_ID, *p_ids, BOQ_ID, *q_ids, EOQ_ID]
    pair = EncodedPair(ids=tuple(ids), loss_start=1 + len(p_ids), question_len=len(q_ids) + 1)
    pair.validate()
    return pair
