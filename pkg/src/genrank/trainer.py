"""Fine-tuning loops: negative sampling, hardest-negative mining, early stopping.

One epoch visits every train question once (question order reshuffled per
epoch). Validation MAP is computed after each epoch with the question-
likelihood scorer; the best checkpoint is kept and restored at the end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Candidate, QaDataset, QuestionGroup
from .errors import ConfigError, NumericError, UsageError
from .model import ModelConfig, save_checkpoint, score_pairs
from .objectives import LabeledPair, RankTriple, lul_loss, mle_loss, rll_loss
from .optim import AdamState, adam_step, clip_global_norm
from .ranking import evaluate, rank_questions
from .tensor import Tensor
from .textcodec import EncodedPair, Vocabulary, encode_pair

logger = logging.getLogger("genrank.trainer")

OBJECTIVES = ("mle", "lul", "rll")
_METRIC_FIELDS = {"map": "map", "mrr": "mrr", "p_at_1": "p_at_1"}
_DEFAULT_BATCH = {"mle": 32, "lul": 32, "rll": 8}

CHECKPOINT_NAME = "model.grnk"
REPORT_NAME = "train_report.txt"


@dataclass
class TrainConfig:
    objective: str = "mle"
    max_epochs: int = 10
    batch_size: int | None = None
    negatives_per_positive: int = 5
    rll_sample_size: int = 15
    learning_rate: float = 1e-4
    margin: float = 1.0
    early_stop_metric: str = "map"
    patience: int = 2
    grad_clip: float = 1.0
    seed: int = 0
    eval_batch_size: int = 64
    workers: int = 1

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("max_epochs", "negatives_per_positive", "rll_sample_size",
                     "patience", "eval_batch_size", "workers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.batch_size is not None and (int(self.batch_size) != self.batch_size
                                            or self.batch_size < 1):
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.margin < 0:
            raise ConfigError(f"margin must be nonnegative, got {self.margin!r}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip!r}")
        if self.early_stop_metric not in _METRIC_FIELDS:
            raise ConfigError(f"early_stop_metric must be one of {tuple(_METRIC_FIELDS)}, "
                              f"got {self.early_stop_metric!r}")

    @property
    def resolved_batch_size(self) -> int:
        # RLL batches count questions per step (each question yields one
        # triple); MLE/LUL batches count encoded pairs per step
        return self.batch_size if self.batch_size is not None else _DEFAULT_BATCH[self.objective]


@dataclass
class TrainReport:
    objective: str
    seed: int
    train_losses: list[float] = field(default_factory=list)
    val_metrics: list[float] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint_path: str = ""
    metric_name: str = "map"
    stopped_early: bool = False

    def as_text(self) -> str:
        """Reproducible structured-text form (checkpoint stored by file name)."""
        lines = [f"objective={self.objective}",
                 f"seed={self.seed}",
                 f"epochs_run={len(self.train_losses)}",
                 f"best_epoch={self.best_epoch}",
                 f"stopped_early={str(self.stopped_early).lower()}",
                 f"checkpoint={Path(self.checkpoint_path).name}"]
        for i, (loss, val) in enumerate(zip(self.train_losses, self.val_metrics), start=1):
            lines.append(f"epoch={i} loss={loss!r} val_{self.metric_name}={val!r}")
        return "\n".join(lines) + "\n"


class _PairCache:
    """Encodes each (question, passage) pair once per training run."""

    def __init__(self, vocab: Vocabulary, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self._cache: dict[tuple[str, str], EncodedPair] = {}

    def __call__(self, group: QuestionGroup, cand: Candidate) -> EncodedPair:
        key = (group.qid, cand.pid)
        if key not in self._cache:
            self._cache[key] = encode_pair(cand.text, group.text, self.vocab, self.max_len)
        return self._cache[key]


def sample_lul_batch(group: QuestionGroup, rng: np.random.Generator, encode,
                     negatives_per_positive: int = 5) -> list[LabeledPair]:
    """Pair each positive with up to `negatives_per_positive` negatives drawn
    uniformly without replacement from the question's own pool."""
    positives = group.positives()
    if not positives:
        raise UsageError(f"question {group.qid} has no positive passage")
    negatives = group.negatives()
    out: list[LabeledPair] = []
    for pos in positives:
        out.append(LabeledPair(encode(group, pos), 1))
        take = min(negatives_per_positive, len(negatives))
        if take:
            picks = rng.choice(len(negatives), size=take, replace=False)
            out.extend(LabeledPair(encode(group, negatives[int(i)]), 0) for i in picks)
    return out


def hardest_negative(params: dict[str, Tensor], config: ModelConfig, group: QuestionGroup,
                     negatives: list[Candidate], encode, batch_size: int = 64) -> Candidate:
    """Negative with the highest current-model log p(q|a); ties go to the
    smallest passage id so mining is deterministic."""
    if not negatives:
        raise UsageError(f"question {group.qid} has no negative passages to mine")
    pairs = [encode(group, neg) for neg in negatives]
    scores = score_pairs(params, config, pairs, batch_size=batch_size)
    best = min(range(len(negatives)), key=lambda i: (-scores[i], negatives[i].pid))
    return negatives[best]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for name, t in params.items():
        t.data[...] = snap[name]


def _mle_batches(groups, order, encode, batch, rng):
    pairs = []
    for gi in order:
        group = groups[int(gi)]
        pairs.extend(encode(group, pos) for pos in group.positives())
    perm = rng.permutation(len(pairs))
    pairs = [pairs[int(i)] for i in perm]
    return [pairs[i:i + batch] for i in range(0, len(pairs), batch)]


def _lul_batches(groups, order, encode, batch, rng, ratio):
    labeled: list[LabeledPair] = []
    skipped = 0
    for gi in order:
        group = groups[int(gi)]
        if not group.positives():
            skipped += 1
            continue
        labeled.extend(sample_lul_batch(group, rng, encode, negatives_per_positive=ratio))
    if skipped:
        logger.info("skipped %d questions with no positive passage", skipped)
    return [labeled[i:i + batch] for i in range(0, len(labeled), batch)]


def _rll_triples(params, config, group, encode, rng, sample_size, margin, batch_size):
    positives = group.positives()
    negatives = group.negatives()
    if not positives or not negatives:
        return None
    pos = positives[int(rng.integers(len(positives)))]
    take = min(sample_size, len(negatives))
    picks = rng.choice(len(negatives), size=take, replace=False)
    sampled = [negatives[int(i)] for i in picks]
    hard = hardest_negative(params, config, group, sampled, encode, batch_size=batch_size)
    return RankTriple(encode(group, pos), encode(group, hard), margin=margin)


def _train_step(params, config, loss_tensor, grad_clip, state):
    for p in params.values():
        p.grad = None
    loss_tensor.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    clip_global_norm(grads, grad_clip)
    adam_step(params, grads, state)
    return float(loss_tensor.data)


def train(params: dict[str, Tensor], model_config: ModelConfig, dataset: QaDataset,
          vocab: Vocabulary, config: TrainConfig, out_dir) -> TrainReport:
    """Fine-tune in place and return the report; the best-validation
    checkpoint is written under out_dir and restored into params."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = dataset.groups("train")
    dev_groups = dataset.groups("dev")
    if not groups:
        raise UsageError("dataset has no train split")
    if not dev_groups:
        raise UsageError("dataset has no dev split (needed for early stopping)")
    dev_qrels = dataset.to_qrels("dev")
    dev_questions = [(g.qid, g.text, [(c.pid, c.text) for c in g.candidates])
                     for g in dev_groups]

    rng = np.random.default_rng(config.seed)
    encode = _PairCache(vocab, model_config.max_seq_len)
    state = AdamState(learning_rate=config.learning_rate)
    batch = config.resolved_batch_size
    ckpt_path = out_dir / CHECKPOINT_NAME
    report = TrainReport(objective=config.objective, seed=config.seed,
                         metric_name=config.early_stop_metric,
                         checkpoint_path=str(ckpt_path))
    metric_field = _METRIC_FIELDS[config.early_stop_metric]
    best_value = -1.0
    best_snap = None

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(groups))
        if config.objective == "mle":
            batches = _mle_batches(groups, order, encode, batch, rng)
            step = lambda b: mle_loss(params, model_config, b)
        elif config.objective == "lul":
            batches = _lul_batches(groups, order, encode, batch, rng,
                                   config.negatives_per_positive)
            step = lambda b: lul_loss(params, model_config, b)
        else:
            batches = []
            for i in range(0, len(order), batch):
                triples = []
                for gi in order[i:i + batch]:
                    t = _rll_triples(params, model_config, groups[int(gi)], encode, rng,
                                     config.rll_sample_size, config.margin,
                                     config.eval_batch_size)
                    if t is not None:
                        triples.append(t)
                if triples:
                    batches.append(triples)
            step = lambda b: rll_loss(params, model_config, b)
        if not batches:
            raise UsageError("no trainable questions in the train split")

        losses = []
        for step_idx, b in enumerate(batches, start=1):
            try:
                losses.append(_train_step(params, model_config, step(b),
                                          config.grad_clip, state))
            except NumericError as err:
                kept = str(ckpt_path) if best_snap is not None else "none"
                raise NumericError(f"non-finite loss at epoch {epoch} step {step_idx}; "
                                   f"last good checkpoint: {kept}") from err
        epoch_loss = float(np.mean(losses))

        runs = rank_questions(params, model_config, vocab, dev_questions,
                              scorer="q_given_a", batch_size=config.eval_batch_size,
                              workers=config.workers)
        val = float(getattr(evaluate(runs, dev_qrels), metric_field))
        report.train_losses.append(epoch_loss)
        report.val_metrics.append(val)
        logger.info("epoch=%d loss=%.6f val_%s=%.6f", epoch, epoch_loss,
                    config.early_stop_metric, val)

        if val > best_value:
            best_value = val
            report.best_epoch = epoch
            best_snap = _snapshot(params)
            save_checkpoint(ckpt_path, model_config, params)
        elif epoch - report.best_epoch >= config.patience:
            report.stopped_early = True
            break

    if best_snap is not None:
        _restore(params, best_snap)
    (out_dir / REPORT_NAME).write_text(report.as_text(), encoding="utf-8")
    return report
