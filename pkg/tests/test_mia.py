import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from oracles import bigram_counts, bigram_model
from privbench.dp_train import TrainConfig, train
from privbench.errors import ConfigError, FitError
from privbench.metrics import auc
from privbench.mia import (
    LiraFit,
    assign_shadows,
    collect_shadow_scores,
    fit_lira,
    lira_log_score,
    lira_score,
    offline_lira,
    online_lira,
    read_score_dump,
    sample_score,
    sample_scores,
    write_score_dump,
)
from privbench.tinylm import ModelConfig, TinyLM

IDS = [f"s{i}" for i in range(300)]


def one_fit(mu_in, var_in, mu_out, var_out):
    arr = lambda v: np.array([float(v)])
    return LiraFit(arr(mu_in), arr(var_in), arr(mu_out), arr(var_out), arr(2), arr(2))


# -- assignment --------------------------------------------------------------------------


def test_assignment_bounds_and_determinism():
    a = assign_shadows(IDS, 128, seed=0)
    counts = a.membership.sum(1)
    assert counts.min() >= 2 and counts.max() <= 126
    assert abs(counts.mean() - 64) < 5 * math.sqrt(32 / len(IDS))
    assert np.array_equal(a.membership, assign_shadows(IDS, 128, seed=0).membership)
    col = a.membership.sum(0)
    assert np.all(np.abs(col - len(IDS) / 2) <= 5 * math.sqrt(len(IDS) / 4))


def test_assignment_constraint_with_few_shadows():
    a = assign_shadows(IDS, 4, seed=1)
    assert np.all(a.membership.sum(1) == 2)
    with pytest.raises(ConfigError):
        assign_shadows(IDS, 3)


# -- scores --------------------------------------------------------------------------------


def test_uniform_model_score():
    model = bigram_model(np.full((6, 6), math.log(1 / 6)))
    assert sample_score(model, [2, 3, 4, 1]) == pytest.approx(4 * math.log(1 / 6), abs=1e-9)


def test_bigram_oracle_scores():
    V, bos = 6, 1
    corpus = [[2, 3, 4, 1], [3, 3, 5, 1], [4, 2, 1], [5, 5, 3, 2, 1], [2, 1]]
    probs = bigram_counts(corpus, V, bos)
    model = bigram_model(np.log(probs))
    for seq, got in zip(corpus, sample_scores(model, corpus)):
        prev, expected = bos, 0.0
        for t in seq:
            expected += math.log(probs[prev, t])
            prev = t
        assert got == pytest.approx(expected, abs=1e-9)


def test_overfit_score_approaches_zero():
    cfg = ModelConfig(vocab_size=8, embedding_dim=16, context_length=8, hidden_width=32)
    model = TinyLM(cfg, torch.Generator().manual_seed(0))
    seq = [3, 5, 7, 1]
    before = sample_score(model, seq)
    train(model, [seq], TrainConfig(epochs=300, virtual_batch_size=1, micro_batch_size=1,
                                    learning_rate=1e-2, lr_schedule="constant"))
    after = sample_score(model, seq)
    assert before < after < 0 and after > -0.05


# -- fitting ---------------------------------------------------------------------------------


def test_fit_hand_example():
    scores = np.array([[1.0, 3.0, 10.0, 14.0]])
    member = np.array([[True, True, False, False]])
    fit = fit_lira(scores, member)
    assert (fit.mu_in[0], fit.var_in[0], fit.mu_out[0], fit.var_out[0]) == (2.0, 1.0, 12.0, 4.0)


def test_degenerate_variance_hits_floor():
    fit = fit_lira(np.full((1, 6), -3.0), np.array([[1, 1, 1, 0, 0, 0]], bool))
    assert fit.var_in[0] == fit.var_out[0] == 1e-8


def test_fit_is_permutation_invariant():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(20, 16))
    m = assign_shadows([str(i) for i in range(20)], 16, seed=3).membership
    perm = rng.permutation(16)
    a, b = fit_lira(s, m), fit_lira(s[:, perm], m[:, perm])
    for name in ("mu_in", "var_in", "mu_out", "var_out"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-12)


def test_fit_error_names_sample():
    m = np.array([[True, True, False, False], [True, False, False, False]])
    with pytest.raises(FitError, match="s1"):
        fit_lira(np.zeros((2, 4)), m, sample_ids=["s0", "s1"])


def test_pooled_variance_option():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(10, 8))
    m = assign_shadows([str(i) for i in range(10)], 8, seed=0).membership
    fit = fit_lira(s, m, pooled=True)
    assert np.all(fit.var_in == fit.var_in[0])
    assert fit.var_in[0] == pytest.approx(fit_lira(s, m).var_in.mean())


def test_fit_consistency():
    rng = np.random.default_rng(4)
    n, S = 200, 256
    m = assign_shadows([str(i) for i in range(n)], S, seed=5).membership
    s = np.where(m, rng.normal(-10, 2, (n, S)), rng.normal(-14, 3, (n, S)))
    fit = fit_lira(s, m)
    se_mu = 3 / math.sqrt(S / 2)
    assert np.mean(np.abs(fit.mu_out + 14) < 3 * se_mu) > 0.98
    se_var = 9 * math.sqrt(2 / (S / 2))
    assert np.mean(np.abs(fit.var_out - 9) < 3 * se_var) > 0.98
    assert abs(fit.mu_in.mean() + 10) < 0.1


# -- ratio ------------------------------------------------------------------------------------


def test_identical_gaussians_ratio_one():
    assert lira_score(one_fit(3, 2, 3, 2), np.array([17.0]))[0] == 1.0


def test_closed_form_ratio():
    assert lira_score(one_fit(0, 1, 2, 1), np.array([0.0]))[0] == pytest.approx(math.exp(2), rel=1e-12)


def test_ratio_against_scipy_density():
    rng = np.random.default_rng(2)
    n = 500
    fit = LiraFit(rng.normal(size=n), rng.uniform(0.1, 5, n), rng.normal(size=n), rng.uniform(0.1, 5, n),
                  np.full(n, 2), np.full(n, 2))
    x = rng.normal(size=n) * 2
    expected = (norm.logpdf(x, fit.mu_in, np.sqrt(fit.var_in))
                - norm.logpdf(x, fit.mu_out, np.sqrt(fit.var_out)))
    np.testing.assert_allclose(lira_log_score(fit, x), expected, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 10), st.floats(-50, 50), st.floats(-100, 100))
def test_shift_invariance_at_matched_variance(mu_in, mu_out, var, x, shift):
    base = lira_log_score(one_fit(mu_in, var, mu_out, var), np.array([x]))[0]
    moved = lira_log_score(one_fit(mu_in + shift, var, mu_out + shift, var), np.array([x + shift]))[0]
    assert moved == pytest.approx(base, abs=1e-6 * max(1.0, abs(base)))


def test_same_distribution_gives_chance_auc():
    rng = np.random.default_rng(7)
    n, S = 2000, 32
    a = assign_shadows([str(i) for i in range(n)], S, seed=1)
    center = rng.normal(-20, 3, (n, 1))
    shadow = center + rng.normal(0, 1, (n, S))
    target = center[:, 0] + rng.normal(0, 1, n)
    labels = rng.random(n) < 0.5
    result = online_lira(shadow, a, target, labels)
    assert 0.45 <= auc(result.scores, result.labels) <= 0.55


# -- offline variant and orchestration ----------------------------------------------------------


def tiny(seed):
    cfg = ModelConfig(vocab_size=10, embedding_dim=16, context_length=10, hidden_width=32)
    return TinyLM(cfg, torch.Generator().manual_seed(seed))


def test_offline_self_ratio_and_antisymmetry():
    seqs = [[2, 3, 4, 1], [5, 6, 1], [7, 8, 9, 1]]
    a, b = tiny(0), tiny(1)
    same = offline_lira(a, a, seqs, ["x", "y", "z"], [1, 0, 1])
    assert np.all(same.scores == 0)
    ab = offline_lira(a, b, seqs, ["x", "y", "z"], [1, 0, 1]).scores
    ba = offline_lira(b, a, seqs, ["x", "y", "z"], [1, 0, 1]).scores
    np.testing.assert_array_equal(ab, -ba)
    other = TinyLM(ModelConfig(vocab_size=11, embedding_dim=16, context_length=10, hidden_width=32))
    with pytest.raises(ConfigError):
        offline_lira(a, other, seqs, ["x", "y", "z"], [1, 0, 1])


def test_offline_overfit_members_score_higher():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(2, 10, 6)) + [1] for _ in range(40)]
    members, others = seqs[:20], seqs[20:]
    reference = tiny(3)
    target = TinyLM.from_base(reference, "full")
    train(target, members, TrainConfig(epochs=100, virtual_batch_size=10, micro_batch_size=10,
                                       learning_rate=1e-2))
    res = offline_lira(target, reference, seqs, [str(i) for i in range(40)], [True] * 20 + [False] * 20)
    assert res.scores[:20].min() > res.scores[20:].mean()


def test_collect_and_dump_round_trip(tmp_path):
    seqs = [[2, 3, 1], [4, 5, 1], [6, 7, 1], [8, 9, 1], [2, 9, 1]]
    ids = [f"s{i}" for i in range(5)]
    a = assign_shadows(ids, 4, seed=0)
    seen = []

    def train_shadow(members, j):
        seen.append((j, members))
        model = tiny(j)
        train(model, [seqs[i] for i in members], TrainConfig(epochs=2, virtual_batch_size=2,
                                                             micro_batch_size=2, seed=j))
        return model

    scores = collect_shadow_scores(train_shadow, seqs, a)
    assert scores.shape == (5, 4)
    assert [members for _, members in seen] == [a.members_of(j).tolist() for j in range(4)]
    write_score_dump(tmp_path / "shadow.jsonl", ids, scores, a.membership)
    got_ids, got_scores, got_m = read_score_dump(tmp_path / "shadow.jsonl")
    assert got_ids == tuple(ids)
    np.testing.assert_array_equal(got_scores, scores)
    np.testing.assert_array_equal(got_m, a.membership)
    write_score_dump(tmp_path / "target.jsonl", ids, scores[:, 0], a.membership[:, 0])
    _, t_scores, t_m = read_score_dump(tmp_path / "target.jsonl")
    np.testing.assert_array_equal(t_scores, scores[:, 0])
    assert t_scores.ndim == 1
