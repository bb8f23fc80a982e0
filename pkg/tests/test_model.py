"""Transformer forward pass, likelihood scoring, and checkpoint format."""

import math

import numpy as np
import pytest

from genrank.errors import ConfigError, InputError, UsageError
from genrank.model import (
    CHECKPOINT_MAGIC,
    ModelConfig,
    batch_arrays,
    cond_log_likelihood,
    forward_logits,
    init_params,
    load_checkpoint,
    per_token_log_probs,
    save_checkpoint,
    score_pairs,
    target_log_probs,
)
from genrank.tensor import no_grad
from genrank.textcodec import BOQ_ID, BOS_ID, EOQ_ID, EncodedPair


def tiny_config(**overrides):
    base = dict(vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=16)
    base.update(overrides)
    return ModelConfig(**base)


def make_pair(p_ids, q_ids):
    ids = (BOS_ID, *p_ids, BOQ_ID, *q_ids, EOQ_ID)
    pair = EncodedPair(ids=ids, loss_start=1 + len(p_ids), question_len=len(q_ids) + 1)
    pair.validate()
    return pair


# -- forward pass -------------------------------------------------------------


def test_logits_shape_and_dtype():
    config = tiny_config()
    params = init_params(config, seed=0)
    with no_grad():
        out = forward_logits(params, config, np.array([5, 6, 7]))
        assert out.shape == (3, 32)
        out2 = forward_logits(params, config, np.array([[5, 6], [7, 8]]))
        assert out2.shape == (2, 2, 32)
        assert out2.dtype == np.float32


def test_causal_mask_blocks_future_positions():
    # changing a suffix token must not move any earlier position's logits
    config = tiny_config()
    params = init_params(config, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    with no_grad():
        for _ in range(5):
            ids = rng.integers(5, 32, size=10)
            j = int(rng.integers(1, 10))
            altered = ids.copy()
            altered[j:] = rng.integers(5, 32, size=10 - j)
            a = forward_logits(params, config, ids).data
            b = forward_logits(params, config, altered).data
            assert np.array_equal(a[:j], b[:j])


def test_padding_rows_do_not_leak_into_real_positions():
    config = tiny_config()
    params = init_params(config, seed=3, dtype=np.float64)
    short = make_pair([7, 8], [9])
    long = make_pair([10, 11, 12, 13, 14], [15, 16])
    solo = score_pairs(params, config, [short])
    batched = score_pairs(params, config, [short, long])
    assert solo[0] == batched[0]


def test_batch_order_does_not_change_scores():
    config = tiny_config()
    params = init_params(config, seed=4, dtype=np.float64)
    pairs = [make_pair([6, 7], [8]), make_pair([9], [10, 11]), make_pair([12, 13, 14], [15])]
    fwd = score_pairs(params, config, pairs)
    rev = score_pairs(params, config, pairs[::-1])
    np.testing.assert_array_equal(fwd, rev[::-1])


def test_uniform_model_oracle():
    # zeroed token embeddings force all logits to zero, so every target
    # has probability exactly 1/V and the likelihood is -q_len * ln(V)
    config = tiny_config()
    params = init_params(config, seed=5, dtype=np.float64)
    params["tok_emb"].data[:] = 0.0
    pair = make_pair([6, 7, 8], [9, 10])
    with no_grad():
        ll = float(cond_log_likelihood(params, config, pair).data)
    assert ll == pytest.approx(-pair.question_len * math.log(config.vocab_size), abs=1e-12)
    per_tok = per_token_log_probs(params, config, pair).data
    np.testing.assert_allclose(per_tok, -math.log(config.vocab_size), atol=1e-12)


def test_per_token_log_probs_sum_to_likelihood():
    config = tiny_config()
    params = init_params(config, seed=6, dtype=np.float64)
    pair = make_pair([6, 7, 8, 9], [10, 11, 12])
    with no_grad():
        total = float(cond_log_likelihood(params, config, pair).data)
        per_tok = per_token_log_probs(params, config, pair).data
    assert per_tok.shape == (pair.question_len,)
    assert per_tok.max() <= 0.0
    assert total == pytest.approx(per_tok.sum(), rel=1e-12)


def test_score_pairs_matches_single_likelihoods():
    config = tiny_config()
    params = init_params(config, seed=7, dtype=np.float64)
    rng = np.random.default_rng(8)
    pairs = [make_pair(rng.integers(5, 32, size=rng.integers(1, 6)).tolist(),
                       rng.integers(5, 32, size=rng.integers(1, 4)).tolist())
             for _ in range(9)]
    batched = score_pairs(params, config, pairs, batch_size=4)
    with no_grad():
        singles = np.array([float(cond_log_likelihood(params, config, p).data) for p in pairs])
    np.testing.assert_allclose(batched, singles, rtol=1e-12, atol=1e-12)


def test_untied_embeddings_path():
    config = tiny_config(tie_embeddings=False)
    params = init_params(config, seed=9)
    assert "out_proj" in params
    with no_grad():
        out = forward_logits(params, config, np.array([5, 6]))
    assert out.shape == (2, 32)


def test_dropout_train_vs_eval():
    config = tiny_config(dropout=0.5)
    params = init_params(config, seed=10, dtype=np.float64)
    ids = np.array([5, 6, 7])
    with no_grad():
        eval_a = forward_logits(params, config, ids).data
        eval_b = forward_logits(params, config, ids).data
        train = forward_logits(params, config, ids, dropout_rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(eval_a, eval_b)
    assert not np.allclose(eval_a, train)


def test_init_is_deterministic_per_seed():
    config = tiny_config()
    a = init_params(config, seed=11)
    b = init_params(config, seed=11)
    c = init_params(config, seed=12)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


# -- batching -----------------------------------------------------------------


def test_batch_arrays_layout():
    p1 = make_pair([7, 8], [9])       # ids: 2 7 8 3 9 4
    p2 = make_pair([10], [11, 12])    # ids: 2 10 3 11 12 4
    inputs, targets, mask = batch_arrays([p1, p2])
    assert inputs.shape == (2, 5)
    np.testing.assert_array_equal(inputs[0], [2, 7, 8, 3, 9])
    np.testing.assert_array_equal(targets[0], [7, 8, 3, 9, 4])
    np.testing.assert_array_equal(mask[0], [0, 0, 0, 1, 1])
    np.testing.assert_array_equal(inputs[1], [2, 10, 3, 11, 12])
    np.testing.assert_array_equal(targets[1], [10, 3, 11, 12, 4])
    np.testing.assert_array_equal(mask[1], [0, 0, 1, 1, 1])
    assert mask[0].sum() == p1.question_len
    assert mask[1].sum() == p2.question_len


def test_batch_arrays_rejects_empty():
    with pytest.raises(UsageError):
        batch_arrays([])


def test_target_log_probs_mask_dtype_follows_params():
    config = tiny_config()
    params = init_params(config, seed=13, dtype=np.float64)
    with no_grad():
        lp, mask = target_log_probs(params, config, [make_pair([5], [6])])
    assert lp.dtype == np.float64
    assert mask.dtype == np.float64


# -- validation ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(d_model=15)  # not divisible by heads
    with pytest.raises(ConfigError):
        tiny_config(n_layers=0)
    with pytest.raises(ConfigError):
        tiny_config(dropout=1.0)


def test_forward_input_validation():
    config = tiny_config()
    params = init_params(config, seed=14)
    with no_grad():
        with pytest.raises(InputError):
            forward_logits(params, config, np.zeros((2, 2, 2), dtype=np.int64))
        with pytest.raises(InputError):
            forward_logits(params, config, np.arange(17, dtype=np.int64) % 5)
        with pytest.raises(InputError):
            forward_logits(params, config, np.array([5, 99]))


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    config = tiny_config()
    params = init_params(config, seed=15)
    path = tmp_path / "model.grnk"
    save_checkpoint(path, config, params)
    config2, params2 = load_checkpoint(path)
    assert config2 == config
    assert set(params2) == set(params)
    for name in params:
        np.testing.assert_array_equal(params[name].data, params2[name].data)
    pair = make_pair([6, 7], [8])
    np.testing.assert_allclose(score_pairs(params, config, [pair]),
                               score_pairs(params2, config2, [pair]), rtol=1e-6)


def test_checkpoint_loads_as_f64_on_request(tmp_path):
    config = tiny_config()
    params = init_params(config, seed=16)
    path = tmp_path / "model.grnk"
    save_checkpoint(path, config, params)
    _, params64 = load_checkpoint(path, dtype=np.float64)
    assert all(p.dtype == np.float64 for p in params64.values())


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.grnk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    config = tiny_config()
    params = init_params(config, seed=17)
    path = tmp_path / "model.grnk"
    save_checkpoint(path, config, params)
    blob = bytearray(path.read_bytes())
    blob[4] = 99  # bump the little-endian version field
    path.write_bytes(bytes(blob))
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_checkpoint_magic_constant():
    assert CHECKPOINT_MAGIC == b"GRNK"
