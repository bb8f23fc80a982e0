"""Loss definitions: closed-form identities between the three objectives."""

import numpy as np
import pytest

from genrank.errors import UsageError
from genrank.model import ModelConfig, init_params, per_token_log_probs, score_pairs
from genrank.objectives import LabeledPair, RankTriple, lul_loss, mle_loss, rll_loss
from genrank.tensor import no_grad
from genrank.textcodec import BOQ_ID, BOS_ID, EOQ_ID, EncodedPair


def tiny_config():
    return ModelConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32,
                       max_seq_len=16)


def make_pair(p_ids, q_ids):
    ids = (BOS_ID, *p_ids, BOQ_ID, *q_ids, EOQ_ID)
    pair = EncodedPair(ids=ids, loss_start=1 + len(p_ids), question_len=len(q_ids) + 1)
    pair.validate()
    return pair


def random_pairs(rng, n, shared_q=None):
    out = []
    for _ in range(n):
        p = rng.integers(5, 32, size=rng.integers(1, 6)).tolist()
        q = shared_q if shared_q is not None else rng.integers(5, 32, size=rng.integers(1, 4)).tolist()
        out.append(make_pair(p, q))
    return out


@pytest.fixture()
def setup():
    config = tiny_config()
    params = init_params(config, seed=0, dtype=np.float64)
    return params, config, np.random.default_rng(1)


# -- mle ------------------------------------------------------------------


def test_mle_matches_per_token_mean(setup):
    params, config, rng = setup
    pairs = random_pairs(rng, 4)
    with no_grad():
        loss = float(mle_loss(params, config, pairs).data)
        toks = np.concatenate([per_token_log_probs(params, config, p).data for p in pairs])
    assert loss == pytest.approx(-toks.mean(), rel=1e-12)
    assert loss > 0.0


def test_mle_mean_reduction_is_batch_shape_invariant(setup):
    params, config, rng = setup
    pair = random_pairs(rng, 1)[0]
    with no_grad():
        one = float(mle_loss(params, config, [pair]).data)
        dup = float(mle_loss(params, config, [pair, pair]).data)
    assert dup == pytest.approx(one, rel=1e-12)


def test_mle_empty_batch_rejected(setup):
    params, config, _ = setup
    with pytest.raises(UsageError):
        mle_loss(params, config, [])


# -- lul ------------------------------------------------------------------


def test_lul_equals_mle_on_all_positives(setup):
    params, config, rng = setup
    pairs = random_pairs(rng, 4)
    with no_grad():
        a = float(mle_loss(params, config, pairs).data)
        b = float(lul_loss(params, config, [LabeledPair(p, 1) for p in pairs]).data)
    assert abs(a - b) <= 1e-12


def test_lul_negatives_use_unlikelihood(setup):
    params, config, rng = setup
    pairs = random_pairs(rng, 3)
    with no_grad():
        got = float(lul_loss(params, config, [LabeledPair(p, 0) for p in pairs]).data)
        toks = np.concatenate([per_token_log_probs(params, config, p).data for p in pairs])
    expect = -np.log1p(-np.exp(toks)).mean()
    assert got == pytest.approx(expect, rel=1e-10)


def test_lul_mixed_batch_decomposes(setup):
    params, config, rng = setup
    pos = random_pairs(rng, 2)
    neg = random_pairs(rng, 2)
    batch = [LabeledPair(p, 1) for p in pos] + [LabeledPair(p, 0) for p in neg]
    with no_grad():
        got = float(lul_loss(params, config, batch).data)
        pos_toks = np.concatenate([per_token_log_probs(params, config, p).data for p in pos])
        neg_toks = np.concatenate([per_token_log_probs(params, config, p).data for p in neg])
    expect = (-pos_toks.sum() - np.log1p(-np.exp(neg_toks)).sum()) / (len(pos_toks) + len(neg_toks))
    assert got == pytest.approx(expect, rel=1e-10)


def test_lul_label_validation():
    pair = make_pair([5], [6])
    with pytest.raises(UsageError):
        LabeledPair(pair, 2)


# -- rll ------------------------------------------------------------------


def test_rll_matches_hand_hinge(setup):
    params, config, rng = setup
    q = [7, 8, 9]
    triples = [RankTriple(make_pair(rng.integers(5, 32, size=4).tolist(), q),
                          make_pair(rng.integers(5, 32, size=3).tolist(), q),
                          margin=0.5)
               for _ in range(4)]
    with no_grad():
        got = float(rll_loss(params, config, triples).data)
    ll_pos = score_pairs(params, config, [t.positive for t in triples])
    ll_neg = score_pairs(params, config, [t.negative for t in triples])
    expect = np.maximum(0.0, 0.5 - ll_pos + ll_neg).mean()
    assert got == pytest.approx(expect, rel=1e-12)


def test_rll_zero_when_margin_satisfied(setup):
    params, config, rng = setup
    q = [6, 7]
    pos = make_pair([8, 9], q)
    neg = make_pair([10, 11], q)
    ll = score_pairs(params, config, [pos, neg])
    gap = float(ll[0] - ll[1])
    if gap <= 0:
        pos, neg, gap = neg, pos, -gap
    # margin strictly inside the gap: hinge inactive, loss exactly zero
    triple = RankTriple(pos, neg, margin=gap * 0.5)
    loss = rll_loss(params, config, [triple])
    assert float(loss.data) == 0.0
    loss.backward()
    assert all(p.grad is None or not p.grad.any() for p in params.values())


def test_rll_requires_shared_question():
    with pytest.raises(UsageError):
        RankTriple(make_pair([5], [6, 7]), make_pair([8], [6, 9]))


def test_rll_margin_validation():
    q = [6]
    with pytest.raises(UsageError):
        RankTriple(make_pair([5], q), make_pair([7], q), margin=-0.1)


def test_rll_empty_batch_rejected(setup):
    params, config, _ = setup
    with pytest.raises(UsageError):
        rll_loss(params, config, [])


# -- training signal sanity -------------------------------------------------


def test_mle_gradient_descends(setup):
    params, config, rng = setup
    pairs = random_pairs(rng, 2)
    before = float(mle_loss(params, config, pairs).data)
    loss = mle_loss(params, config, pairs)
    loss.backward()
    for p in params.values():
        if p.grad is not None:
            p.data -= 0.05 * p.grad
    after = float(mle_loss(params, config, pairs).data)
    assert after < before


def test_rll_gradient_widens_margin(setup):
    params, config, rng = setup
    q = [6, 7, 8]
    triples = [RankTriple(make_pair([9, 10], q), make_pair([11, 12], q), margin=5.0)]
    def gap():
        ll = score_pairs(params, config, [triples[0].positive, triples[0].negative])
        return float(ll[0] - ll[1])
    before = gap()
    for _ in range(5):
        loss = rll_loss(params, config, triples)
        loss.backward()
        for p in params.values():
            if p.grad is not None:
                p.data -= 0.05 * p.grad
                p.grad = None
    assert gap() > before
