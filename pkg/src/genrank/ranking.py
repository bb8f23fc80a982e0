"""Candidate scoring and trec_eval-compatible MAP / MRR / P@1.

Scores stay in log space end to end (raw likelihoods underflow for long
questions). Ties are broken by passage id descending, which is what
trec_eval does with equal scores, so rankings recomputed from a written run
file agree with the official tool.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, UsageError
from .model import ModelConfig, score_pairs
from .tensor import Tensor
from .textcodec import Vocabulary, encode_pair

logger = logging.getLogger("genrank.ranking")

SCORERS = ("q_given_a", "a_given_q_lennorm")


@dataclass
class RunRecord:
    """One query's ranked candidates: (passage id, score) sorted by score desc."""

    qid: str
    entries: list[tuple[str, float]]
    scorer: str = "q_given_a"

    def __post_init__(self):
        pids = [pid for pid, _ in self.entries]
        if len(set(pids)) != len(pids):
            raise InputError(f"duplicate passage ids in run for query {self.qid}")
        self.entries = rank_order(self.entries)


def rank_order(entries: list[tuple[str, float]]) -> list[tuple[str, float]]:
    """Sort by score descending, ties by passage id descending."""
    return sorted(entries, key=lambda e: (-e[1], _desc_key(e[0])))


class _desc_key(str):
    """Inverts string comparison so an ascending sort places larger ids first."""

    def __lt__(self, other):  # noqa: D105
        return str.__gt__(self, other)


class Qrels:
    """Binary relevance judgments keyed by (query id, passage id)."""

    def __init__(self, judgments: dict[str, dict[str, int]] | None = None):
        self._by_query: dict[str, dict[str, int]] = {}
        if judgments:
            for qid, pids in judgments.items():
                for pid, rel in pids.items():
                    self.add(qid, pid, rel)

    def add(self, qid: str, pid: str, rel: int) -> None:
        rel = int(rel)
        if rel not in (0, 1):
            raise InputError(f"relevance must be binary, got {rel} for ({qid}, {pid})")
        self._by_query.setdefault(qid, {})[pid] = rel

    def __contains__(self, qid: str) -> bool:
        return qid in self._by_query

    def judged(self, qid: str) -> dict[str, int]:
        return self._by_query[qid]

    def num_relevant(self, qid: str) -> int:
        return sum(self._by_query.get(qid, {}).values())

    def query_ids(self) -> list[str]:
        return list(self._by_query)


@dataclass
class MetricsReport:
    map: float
    mrr: float
    p_at_1: float
    evaluated: int
    skipped: int

    def as_dict(self) -> dict:
        return {"map": self.map, "mrr": self.mrr, "p_at_1": self.p_at_1,
                "evaluated": self.evaluated, "skipped": self.skipped}


def average_precision(labels) -> float:
    """Mean over relevant ranks k of (relevant in top k) / k.

    The list is a ranking of binary labels, best first. At least one label
    must be relevant: queries with no relevant candidate are skipped by
    evaluate(), not scored.
    """
    hits = 0
    precisions = []
    for i, lab in enumerate(labels, start=1):
        if lab:
            hits += 1
            precisions.append(hits / i)
    if not precisions:
        raise UsageError("average_precision is undefined without a relevant label")
    return sum(precisions) / len(precisions)


def evaluate(runs: list[RunRecord], qrels: Qrels) -> MetricsReport:
    """MAP / MRR / P@1 averaged over queries that have at least one relevant
    judged passage; others are skipped and counted (trec_eval convention)."""
    ap_sum = rr_sum = p1_sum = 0.0
    evaluated = skipped = 0
    for run in runs:
        if run.qid not in qrels:
            raise InputError(f"query {run.qid} missing from qrels")
        judged = qrels.judged(run.qid)
        total_rel = sum(judged.values())
        if total_rel == 0:
            skipped += 1
            continue
        labels = []
        for pid, _ in run.entries:
            if pid not in judged:
                raise InputError(f"run references unknown passage id {pid} for query {run.qid}")
            labels.append(judged[pid])
        # denominator is the count of relevant passages in the qrels, so a
        # run that fails to retrieve one is penalized (trec_eval semantics)
        hits = 0
        precisions = []
        rr = 0.0
        for i, lab in enumerate(labels, start=1):
            if lab:
                hits += 1
                precisions.append(hits / i)
                if rr == 0.0:
                    rr = 1.0 / i
        ap_sum += sum(precisions) / total_rel
        rr_sum += rr
        p1_sum += 1.0 if labels and labels[0] else 0.0
        evaluated += 1
    if evaluated == 0:
        raise UsageError("no evaluable queries (every query had zero relevant passages)")
    return MetricsReport(map=ap_sum / evaluated, mrr=rr_sum / evaluated,
                         p_at_1=p1_sum / evaluated, evaluated=evaluated, skipped=skipped)


# -- model-based scoring -------------------------------------------------------


def score_candidates(params: dict[str, Tensor], config: ModelConfig, vocab: Vocabulary,
                     qid: str, query: str, passages: list[tuple[str, str]],
                     scorer: str = "q_given_a", batch_size: int = 64) -> RunRecord:
    """Rank a query's candidate passages.

    q_given_a scores log p(question | passage), summed over question tokens.
    a_given_q_lennorm conditions on the question instead and scores
    log p(passage | question) divided by the number of scored passage tokens
    (terminator included); longer passages are otherwise always unlikelier.
    """
    if not passages:
        raise InputError(f"no candidate passages for query {qid}")
    if scorer not in SCORERS:
        raise UsageError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
    if scorer == "q_given_a":
        pairs = [encode_pair(text, query, vocab, config.max_seq_len) for _, text in passages]
        scores = score_pairs(params, config, pairs, batch_size=batch_size)
    else:
        pairs = [encode_pair(query, text, vocab, config.max_seq_len) for _, text in passages]
        scores = score_pairs(params, config, pairs, batch_size=batch_size)
        scores = scores / np.array([p.question_len for p in pairs], dtype=np.float64)
    entries = [(pid, float(s)) for (pid, _), s in zip(passages, scores)]
    return RunRecord(qid=qid, entries=entries, scorer=scorer)


def rank_questions(params, config, vocab, questions: list[tuple[str, str, list[tuple[str, str]]]],
                   scorer: str = "q_given_a", batch_size: int = 64, workers: int = 1) -> list[RunRecord]:
    """Score many (qid, query text, candidates) at once; order is preserved."""
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        # params are immutable during scoring, so fan-out over queries is safe
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(
                lambda q: score_candidates(params, config, vocab, q[0], q[1], q[2],
                                           scorer=scorer, batch_size=batch_size),
                questions))
    return [score_candidates(params, config, vocab, qid, text, cands,
                             scorer=scorer, batch_size=batch_size)
            for qid, text, cands in questions]


# -- trec-format files ---------------------------------------------------------


def write_run(path, runs: list[RunRecord], tag: str = "genrank") -> None:
    """TREC run lines: qid Q0 pid rank score tag (scores with 6 decimals)."""
    with open(path, "w", encoding="utf-8") as fh:
        for run in runs:
            for rank, (pid, score) in enumerate(run.entries, start=1):
                fh.write(f"{run.qid} Q0 {pid} {rank} {score:.6f} {tag}\n")


def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def read_run(path) -> list[RunRecord]:
    """Parse a TREC run file; rankings are recomputed from the stored scores."""
    by_query: dict[str, list[tuple[str, float]]] = {}
    order: list[str] = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise InputError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
        qid, _, pid, _, score, _ = fields
        try:
            value = float(score)
        except ValueError as err:
            raise InputError(f"{path}:{lineno}: bad score {score!r}") from err
        if qid not in by_query:
            by_query[qid] = []
            order.append(qid)
        by_query[qid].append((pid, value))
    return [RunRecord(qid=qid, entries=by_query[qid]) for qid in order]


def write_qrels(path, qrels: Qrels) -> None:
    """Qrels lines: qid 0 pid rel."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels.query_ids():
            for pid, rel in qrels.judged(qid).items():
                fh.write(f"{qid} 0 {pid} {rel}\n")


def read_qrels(path) -> Qrels:
    qrels = Qrels()
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise InputError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        qid, _, pid, rel = fields
        try:
            qrels.add(qid, pid, int(rel))
        except ValueError as err:
            raise InputError(f"{path}:{lineno}: bad relevance {rel!r}") from err
    return qrels
