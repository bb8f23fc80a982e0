"""Ranking by generation: a small causal LM scores passages by question likelihood.

Pipeline: build or load a QA dataset, fine-tune with one of three objectives
(MLE, likelihood+unlikelihood, or a pairwise hinge on likelihoods), rank
candidate passages by conditional question log-likelihood, and evaluate with
trec_eval-compatible MAP / MRR / P@1.
"""

from .corpus import (Candidate, QaDataset, QuestionGroup, SynthSpec, generate_synthetic,
                     load_dataset, save_dataset)
from .errors import (ConfigError, GenrankError, InputError, NumericError, ShapeMismatch,
                     UsageError)
from .generation import SamplerConfig, filter_logits, sample_question, sample_tokens
from .gradcheck import run_suite
from .model import (ModelConfig, cond_log_likelihood, forward_logits, init_params,
                    load_checkpoint, per_token_log_probs, save_checkpoint, score_pairs)
from .objectives import LabeledPair, RankTriple, lul_loss, mle_loss, rll_loss
from .optim import AdamState, adam_step, clip_global_norm
from .ranking import (MetricsReport, Qrels, RunRecord, average_precision, evaluate,
                      rank_questions, read_qrels, read_run, score_candidates, write_qrels,
                      write_run)
from .tensor import Tensor, no_grad
from .textcodec import EncodedPair, Vocabulary, build_vocab, encode_pair, tokenize
from .trainer import TrainConfig, TrainReport, hardest_negative, sample_lul_batch, train

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Candidate", "ConfigError", "EncodedPair", "GenrankError", "InputError",
    "LabeledPair", "MetricsReport", "ModelConfig", "NumericError", "QaDataset", "Qrels",
    "QuestionGroup", "RankTriple", "RunRecord", "SamplerConfig", "ShapeMismatch",
    "SynthSpec", "Tensor", "TrainConfig", "TrainReport", "UsageError", "Vocabulary",
    "adam_step", "average_precision", "build_vocab", "clip_global_norm",
    "cond_log_likelihood", "encode_pair", "evaluate", "filter_logits", "forward_logits",
    "generate_synthetic", "hardest_negative", "init_params", "load_checkpoint",
    "load_dataset", "lul_loss", "mle_loss", "no_grad", "per_token_log_probs",
    "rank_questions", "read_qrels", "read_run", "rll_loss", "run_suite",
    "sample_lul_batch", "sample_question", "sample_tokens", "save_checkpoint",
    "save_dataset", "score_candidates", "score_pairs", "tokenize", "train", "write_qrels",
    "write_run",
]
