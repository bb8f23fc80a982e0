"""Dataset model, JSONL/TSV ingestion, and a synthetic QA-corpus generator.

One record per judgment: {qid, question, pid, passage, label, split}. Text is
repeated across records on purpose; the flat shape maps directly onto the
common answer-selection datasets so converters stay one-liners.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .ranking import Qrels

logger = logging.getLogger("genrank.corpus")

SPLITS = ("train", "dev", "test")
_SPLIT_ALIASES = {"validation": "dev", "valid": "dev", "val": "dev"}

FIELDS = ("qid", "question", "pid", "passage", "label", "split")


@dataclass(frozen=True)
class Candidate:
    pid: str
    text: str
    label: int


@dataclass(frozen=True)
class QuestionGroup:
    """One question and its judged candidate pool (all in one split)."""

    qid: str
    text: str
    split: str
    candidates: tuple[Candidate, ...]

    def positives(self) -> list[Candidate]:
        return [c for c in self.candidates if c.label == 1]

    def negatives(self) -> list[Candidate]:
        return [c for c in self.candidates if c.label == 0]


class QaDataset:
    """Questions, passages, and binary judgments with per-question split tags."""

    def __init__(self):
        self.questions: dict[str, str] = {}
        self.passages: dict[str, str] = {}
        self.judgments: list[tuple[str, str, int]] = []
        self.splits: dict[str, str] = {}
        self._seen: set[tuple[str, str]] = set()

    def add(self, qid: str, question: str, pid: str, passage: str, label: int,
            split: str, where: str = "") -> None:
        split = _SPLIT_ALIASES.get(split, split)
        if split not in SPLITS:
            raise InputError(f"{where}unknown split {split!r} for question {qid}")
        if not question.strip():
            raise InputError(f"{where}judgment references question id {qid} with no text")
        if not passage.strip():
            raise InputError(f"{where}judgment references passage id {pid} with no text")
        label = int(label)
        if label not in (0, 1):
            raise InputError(f"{where}label must be 0 or 1, got {label} for ({qid}, {pid})")
        if (qid, pid) in self._seen:
            raise InputError(f"{where}duplicate judgment for ({qid}, {pid})")
        if qid in self.questions and self.questions[qid] != question:
            raise InputError(f"{where}conflicting text for question id {qid}")
        if pid in self.passages and self.passages[pid] != passage:
            raise InputError(f"{where}conflicting text for passage id {pid}")
        if qid in self.splits and self.splits[qid] != split:
            raise InputError(f"{where}question {qid} appears in multiple splits")
        self.questions.setdefault(qid, question)
        self.passages.setdefault(pid, passage)
        self.splits.setdefault(qid, split)
        self.judgments.append((qid, pid, label))
        self._seen.add((qid, pid))

    def question_ids(self, split: str | None = None) -> list[str]:
        out, seen = [], set()
        for qid, _, _ in self.judgments:
            if qid in seen:
                continue
            seen.add(qid)
            if split is None or self.splits[qid] == split:
                out.append(qid)
        return out

    def groups(self, split: str | None = None) -> list[QuestionGroup]:
        by_q: dict[str, list[Candidate]] = {}
        for qid, pid, label in self.judgments:
            by_q.setdefault(qid, []).append(Candidate(pid, self.passages[pid], label))
        return [QuestionGroup(qid, self.questions[qid], self.splits[qid], tuple(by_q[qid]))
                for qid in self.question_ids(split)]

    def to_qrels(self, split: str | None = None) -> Qrels:
        qrels = Qrels()
        keep = None if split is None else {q for q, s in self.splits.items() if s == split}
        for qid, pid, label in self.judgments:
            if keep is None or qid in keep:
                qrels.add(qid, pid, label)
        return qrels

    def texts(self, split: str | None = None) -> list[str]:
        """Question and passage texts, for vocabulary building."""
        out = []
        for group in self.groups(split):
            out.append(group.text)
            out.extend(c.text for c in group.candidates)
        return out

    def log_stats(self) -> None:
        for split in SPLITS:
            groups = self.groups(split)
            if not groups:
                continue
            pools = [len(g.candidates) for g in groups]
            pos = [len(g.positives()) for g in groups]
            logger.info("split=%s questions=%d passages=%d mean_pool=%.2f mean_positives=%.2f",
                        split, len(groups), len({c.pid for g in groups for c in g.candidates}),
                        float(np.mean(pools)), float(np.mean(pos)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, QaDataset):
            return NotImplemented
        return (self.questions == other.questions and self.passages == other.passages
                and self.judgments == other.judgments and self.splits == other.splits)


# -- file formats ---------------------------------------------------------------


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".json"):
        return "jsonl"
    if suffix == ".tsv":
        return "tsv"
    raise InputError(f"cannot infer dataset format from {path.name!r}; pass format explicitly")


def load_dataset(path, format: str | None = None) -> QaDataset:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset file not found: {path}")
    fmt = format or _infer_format(path)
    if fmt not in ("jsonl", "tsv"):
        raise InputError(f"unknown dataset format {fmt!r}; expected jsonl or tsv")
    dataset = QaDataset()
    lines = path.read_text(encoding="utf-8").splitlines()
    start = 0
    if fmt == "tsv":
        header = "\t".join(FIELDS)
        if not lines or lines[0] != header:
            raise InputError(f"{path}:1: expected TSV header {header!r}")
        start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}: "
        if fmt == "jsonl":
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise InputError(f"{where}malformed JSON: {err.msg}") from err
            if not isinstance(record, dict):
                raise InputError(f"{where}expected a JSON object")
            missing = [k for k in FIELDS if k not in record]
            if missing:
                raise InputError(f"{where}missing fields {missing}")
        else:
            cells = line.split("\t")
            if len(cells) != len(FIELDS):
                raise InputError(f"{where}expected {len(FIELDS)} columns, got {len(cells)}")
            record = dict(zip(FIELDS, cells))
        try:
            label = int(record["label"])
        except (TypeError, ValueError) as err:
            raise InputError(f"{where}bad label {record['label']!r}") from err
        dataset.add(str(record["qid"]), str(record["question"]), str(record["pid"]),
                    str(record["passage"]), label, str(record["split"]), where=where)
    dataset.log_stats()
    return dataset


def save_dataset(dataset: QaDataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _infer_format(path)
    rows = []
    for qid, pid, label in dataset.judgments:
        rows.append((qid, dataset.questions[qid], pid, dataset.passages[pid],
                     label, dataset.splits[qid]))
    with open(path, "w", encoding="utf-8") as fh:
        if fmt == "jsonl":
            for qid, question, pid, passage, label, split in rows:
                fh.write(json.dumps({"qid": qid, "question": question, "pid": pid,
                                     "passage": passage, "label": label, "split": split},
                                    ensure_ascii=False) + "\n")
        elif fmt == "tsv":
            fh.write("\t".join(FIELDS) + "\n")
            for row in rows:
                cells = [str(c) for c in row]
                for cell in cells:
                    if "\t" in cell or "\n" in cell:
                        raise InputError("TSV output cannot contain tabs or newlines; use jsonl")
                fh.write("\t".join(cells) + "\n")
        else:
            raise InputError(f"unknown dataset format {fmt!r}; expected jsonl or tsv")


# -- synthetic generator ----------------------------------------------------------

_ATTRIBUTE_WORDS = ["color", "size", "shape", "origin", "owner", "age", "weight",
                    "sound", "flavor", "height", "texture", "price", "rank", "mood",
                    "style", "depth", "speed", "smell"]
_VALUE_WORDS = ["blue", "red", "green", "amber", "ivory", "small", "large", "round",
                "square", "soft", "loud", "sweet", "bitter", "old", "new", "heavy",
                "light", "smooth", "rough", "bright", "dark", "warm", "cold", "rare",
                "common", "tall", "short", "wide", "narrow", "plain"]

DISTRACTOR_STRATEGIES = ("uniform", "share_attribute")


@dataclass
class SynthSpec:
    """Knobs for the synthetic QA corpus.

    Entities are shared across splits; each entity's attributes are divided
    into three split-specific groups (rotated per entity so every attribute
    word is trained on). Facts about an entity therefore never leak between
    splits, while every token a held-out question uses appears in training
    text. Each question has exactly one relevant passage.
    """

    n_entities: int = 170
    n_attributes: int = 9
    n_values: int = 24
    train_questions: int = 500
    dev_questions: int = 100
    test_questions: int = 100
    candidates_per_question: int = 8
    distractor_strategy: str = "uniform"
    seed: int = 0

    def validate(self) -> None:
        counts = {"n_entities": self.n_entities, "n_attributes": self.n_attributes,
                  "n_values": self.n_values, "train_questions": self.train_questions,
                  "dev_questions": self.dev_questions, "test_questions": self.test_questions,
                  "candidates_per_question": self.candidates_per_question}
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_attributes % len(SPLITS) != 0:
            raise ConfigError(f"n_attributes must be divisible by {len(SPLITS)} "
                              f"(one attribute group per split), got {self.n_attributes}")
        if self.candidates_per_question > self.n_entities:
            raise ConfigError(f"candidates_per_question={self.candidates_per_question} exceeds "
                              f"the {self.n_entities} passages available per split")
        capacity = self.n_entities * (self.n_attributes // len(SPLITS))
        wanted = {"train": self.train_questions, "dev": self.dev_questions,
                  "test": self.test_questions}
        for split, count in wanted.items():
            if count > capacity:
                raise ConfigError(f"{split} needs {count} questions but the vocabulary supports "
                                  f"only {capacity} distinct facts per split; raise n_entities "
                                  f"or n_attributes")
        if self.distractor_strategy not in DISTRACTOR_STRATEGIES:
            raise ConfigError(f"distractor_strategy must be one of {DISTRACTOR_STRATEGIES}, "
                              f"got {self.distractor_strategy!r}")

    def question_count(self, split: str) -> int:
        return {"train": self.train_questions, "dev": self.dev_questions,
                "test": self.test_questions}[split]


def _word_pool(base: list[str], prefix: str, n: int) -> list[str]:
    pool = list(base)
    j = 0
    while len(pool) < n:
        pool.append(f"{prefix}{j}")
        j += 1
    return pool[:n]


def generate_synthetic(spec: SynthSpec) -> QaDataset:
    """Deterministic synthetic corpus of attribute-lookup questions.

    Passages read "the color of ent12 is blue . the size of ent12 is small .
    ..."; questions read "what is the color of ent12 ?". The queried fact
    appears in exactly one passage of the question's split.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    attrs = _word_pool(_ATTRIBUTE_WORDS, "attr", spec.n_attributes)
    values = _word_pool(_VALUE_WORDS, "val", spec.n_values)
    entities = [f"ent{i}" for i in range(spec.n_entities)]
    group_size = spec.n_attributes // len(SPLITS)

    # fact table: value index per (entity, attribute)
    val_idx = rng.integers(0, spec.n_values, size=(spec.n_entities, spec.n_attributes))

    def split_attrs(entity: int, split_pos: int) -> list[int]:
        # rotate attribute groups per entity so every attribute word trains
        segment = (split_pos - entity) % len(SPLITS)
        return list(range(segment * group_size, (segment + 1) * group_size))

    dataset = QaDataset()
    for split_pos, split in enumerate(SPLITS):
        pids, texts, entity_attrs = [], {}, {}
        for e in range(spec.n_entities):
            owned = split_attrs(e, split_pos)
            facts = [f"the {attrs[j]} of {entities[e]} is {values[val_idx[e, j]]} ."
                     for j in owned]
            pid = f"p-{split}-{e:04d}"
            pids.append(pid)
            texts[pid] = " ".join(facts)
            entity_attrs[pid] = set(owned)
        pool = [(e, j) for e in range(spec.n_entities) for j in split_attrs(e, split_pos)]
        order = rng.permutation(len(pool))[: spec.question_count(split)]
        for k, pick in enumerate(order):
            e, j = pool[int(pick)]
            qid = f"q-{split}-{k:04d}"
            question = f"what is the {attrs[j]} of {entities[e]} ?"
            positive = f"p-{split}-{e:04d}"
            others = [p for p in pids if p != positive]
            n_distract = spec.candidates_per_question - 1
            if spec.distractor_strategy == "share_attribute":
                # hard negatives: prefer passages whose entity owns the queried
                # attribute this split, so surface overlap alone cannot win
                sharing = [p for p in others if j in entity_attrs[p]]
                rest = [p for p in others if j not in entity_attrs[p]]
                take = min(n_distract, len(sharing))
                chosen = [sharing[i] for i in rng.choice(len(sharing), size=take, replace=False)]
                if n_distract - take:
                    chosen += [rest[i] for i in
                               rng.choice(len(rest), size=n_distract - take, replace=False)]
            else:
                chosen = [others[i] for i in rng.choice(len(others), size=n_distract, replace=False)]
            cands = [(positive, 1)] + [(p, 0) for p in chosen]
            for idx in rng.permutation(len(cands)):
                pid, label = cands[int(idx)]
                dataset.add(qid, question, pid, texts[pid], label, split)
    return dataset
