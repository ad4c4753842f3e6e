import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import (
    bigram_counts,
    bigram_model,
    chain_log_table,
    np_hidden_states,
    np_next_logprobs,
)
from privbench.errors import DomainError, SequenceLengthError, ShapeError, VocabularyError
from privbench.tinylm import (
    ModelConfig,
    TinyLM,
    decode_with_embedding_prefix,
    embed,
    embed_batch,
    forward,
    greedy_decode,
    load_checkpoint,
    log_perplexity,
    save_checkpoint,
    scoring_batch,
    sequence_loss,
)


def make_model(mode="full", seed=0, dtype=torch.float64, **kw):
    cfg = dict(vocab_size=7, embedding_dim=8, num_layers=2, context_length=16,
               hidden_width=12, tuning_mode=mode, num_virtual_tokens=3)
    cfg.update(kw)
    model = TinyLM(ModelConfig(**cfg), torch.Generator().manual_seed(seed), dtype=dtype)
    with torch.no_grad():
        # non-trivial biases and norm gains so the oracle exercises every term
        g = torch.Generator().manual_seed(seed + 100)
        for name, p in model.named_parameters():
            if name.endswith(("_b", "b_q", "b_k", "b_v", "b_o", "b_fc", "b_proj")) or "ln" in name:
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=dtype))
            else:
                p.mul_(20.0)
    return model


def test_zero_head_gives_uniform_rows():
    model = make_model()
    with torch.no_grad():
        model.head_w.zero_()
        model.head_b.zero_()
    table = forward(model, [2, 3, 4, 5])
    np.testing.assert_allclose(table, math.log(1 / 7), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(mode=st.sampled_from(["full", "prompt", "prefix"]),
       tokens=st.lists(st.integers(0, 6), min_size=1, max_size=12),
       seed=st.integers(0, 50))
def test_rows_are_normalized(mode, tokens, seed):
    table = forward(make_model(mode, seed, dtype=torch.float32), tokens)
    lse = np.log(np.exp(table).sum(axis=1))
    assert np.all(np.abs(lse) < 1e-6)


def test_two_token_vocab_matches_hand_computed_forward():
    model = make_model(vocab_size=2, embedding_dim=2, num_layers=1, hidden_width=2,
                       pad_id=0, eos_id=1)
    tokens = [0, 1, 1]
    # inputs are [bos, 0, 1]
    expected = np_next_logprobs(model, [1, 0, 1])
    np.testing.assert_allclose(forward(model, tokens), expected, atol=1e-10)


@pytest.mark.parametrize("mode", ["full", "prompt", "prefix"])
def test_forward_matches_loop_oracle(mode):
    model = make_model(mode, seed=3)
    tokens = [4, 2, 6, 0, 3]
    expected = np_next_logprobs(model, [model.config.eos_id] + tokens[:-1])
    np.testing.assert_allclose(forward(model, tokens), expected, atol=1e-9)


@pytest.mark.parametrize("mode", ["full", "prompt", "prefix"])
def test_embedding_matches_loop_oracle(mode):
    model = make_model(mode, seed=4)
    tokens = [5, 3]
    np.testing.assert_allclose(embed(model, tokens), np_hidden_states(model, tokens).mean(axis=0),
                               atol=1e-9)


def test_forward_errors():
    model = make_model()
    with pytest.raises(SequenceLengthError):
        forward(model, [2] * 17)
    with pytest.raises(VocabularyError):
        forward(model, [2, 7])
    prompt = make_model("prompt")
    # prompt mode reserves room for the virtual tokens
    with pytest.raises(SequenceLengthError):
        forward(prompt, [2] * 14)


def test_forward_is_deterministic():
    model = make_model("prefix")
    assert np.array_equal(forward(model, [1, 2, 3]), forward(model, [1, 2, 3]))


def test_prompt_with_zero_virtual_tokens_is_base_model():
    base = make_model("full", seed=5)
    prompt = TinyLM.from_base(base, "prompt", num_virtual_tokens=0)
    assert np.array_equal(forward(base, [3, 4, 5, 6]), forward(prompt, [3, 4, 5, 6]))


def test_prefix_with_zero_virtual_tokens_is_base_model():
    base = make_model("full", seed=5)
    prefix = TinyLM.from_base(base, "prefix", num_virtual_tokens=0)
    assert np.array_equal(forward(base, [3, 4, 5, 6]), forward(prefix, [3, 4, 5, 6]))


def test_tuning_parameters_are_small():
    base = TinyLM(ModelConfig(vocab_size=200, embedding_dim=32), torch.Generator().manual_seed(0))
    for mode in ("prompt", "prefix"):
        m = TinyLM.from_base(base, mode, 15)
        params = dict(m.named_parameters())
        n_tune = sum(params[n].numel() for n in m.tuning_parameter_names())
        n_base = sum(params[n].numel() for n in m.base_parameter_names())
        assert n_tune * 10 < n_base
        assert set(m.trainable_parameter_names()) == set(m.tuning_parameter_names())


def test_prompt_init_copies_embedding_rows():
    base = make_model("full")
    m = TinyLM.from_base(base, "prompt", 4, generator=torch.Generator().manual_seed(1))
    rows = {tuple(r) for r in base.tok_emb.detach().numpy().round(12)}
    for r in m.prompt.detach().numpy().round(12):
        assert tuple(r) in rows


# -- log-perplexity -------------------------------------------------------------


def test_uniform_model_log_perplexity():
    model = bigram_model(np.full((4, 4), math.log(0.25)))
    assert log_perplexity(model, [0, 3, 2]) == pytest.approx(6.0, abs=1e-9)


def test_deterministic_model_has_zero_log_perplexity():
    V = 6
    chain = {1: 2, 2: 3, 3: 4, 4: 5, 5: 1}
    model = bigram_model(chain_log_table(V, chain))
    assert log_perplexity(model, [2, 3, 4, 5, 1]) == pytest.approx(0.0, abs=1e-12)


def test_bigram_log_perplexity_matches_counting():
    V, bos = 5, 1
    corpus = [[2, 3, 4], [3, 3, 0, 2], [4, 2], [0, 0, 3], [2, 4, 4, 1]]
    probs = bigram_counts(corpus, V, bos)
    model = bigram_model(np.log(probs))
    for seq in corpus:
        prev, expected = bos, 0.0
        for t in seq:
            expected -= math.log2(probs[prev, t])
            prev = t
        assert log_perplexity(model, seq) == pytest.approx(expected, abs=1e-9)


def test_log_perplexity_additive_under_preserved_conditioning():
    # with a bigram model, conditioning on the last token suffices
    V, bos = 5, 1
    probs = bigram_counts([[2, 3, 4, 0]], V, bos)
    model = bigram_model(np.log(probs))
    a, b = [2, 3], [4, 0]
    whole = log_perplexity(model, a + b)
    tail = -math.log2(probs[a[-1], b[0]]) - math.log2(probs[b[0], b[1]])
    assert whole == pytest.approx(log_perplexity(model, a) + tail, abs=1e-9)


def test_log_perplexity_empty_is_domain_error():
    with pytest.raises(DomainError):
        log_perplexity(make_model(), [])


# -- embeddings -----------------------------------------------------------------


def test_single_token_embedding_is_hidden_state():
    model = make_model(seed=7)
    h = model.hidden_states(torch.tensor([[3]]))[0, 0].detach().numpy()
    assert np.array_equal(embed(model, [3]), h)


def test_pad_suffix_does_not_change_embedding():
    model = make_model(seed=8)
    pad = model.config.pad_id
    batch = embed_batch(model, [[3, 4, 5], [3, 4, 5, 6, 2]])
    padded = embed_batch(model, [[3, 4, 5, pad, pad], [3, 4, 5, 6, 2]])
    np.testing.assert_allclose(batch[0], padded[0], atol=1e-12)
    assert np.all(np.isfinite(batch))
    assert batch.shape == (2, model.config.embedding_dim)


def test_two_token_embedding_matches_hand_mean():
    model = make_model(vocab_size=3, embedding_dim=2, num_layers=1, hidden_width=2)
    states = np_hidden_states(model, [2, 1])
    np.testing.assert_allclose(embed(model, [2, 1]), (states[0] + states[1]) / 2, atol=1e-10)


# -- decoding ---------------------------------------------------------------------


def test_greedy_decode_recovers_memorized_suffix():
    V = 8
    # "<eos> 2 3 4 5 6 7 <eos>" memorized as a chain
    chain = {1: 2, 2: 3, 3: 4, 4: 5, 5: 6, 6: 7, 7: 1}
    model = bigram_model(chain_log_table(V, chain))
    assert greedy_decode(model, [2, 3], max_len=10) == [4, 5, 6, 7, 1]


def test_greedy_decode_zero_max_len():
    assert greedy_decode(make_model(), [2, 3], 0) == []


def test_greedy_decode_matches_argmax_trace():
    model = make_model(seed=11)
    prefix = [3, 5]
    context = [model.config.eos_id] + prefix
    expected = []
    for _ in range(6):
        nxt = int(np.argmax(np_next_logprobs(model, context)[-1]))
        expected.append(nxt)
        context.append(nxt)
        if nxt == model.config.eos_id:
            break
    assert greedy_decode(model, prefix, 6) == expected


def test_decode_with_embedding_prefix_shape_error():
    with pytest.raises(ShapeError):
        decode_with_embedding_prefix(make_model(), np.zeros(5), 4)


def test_zero_embedding_decodes_unconditional_chain():
    model = make_model(seed=12)
    zero = np.zeros(model.config.embedding_dim)
    context = [model.config.eos_id]
    expected = []
    for _ in range(5):
        nxt = int(np.argmax(np_next_logprobs(model, context, first_embedding=zero)[-1]))
        expected.append(nxt)
        if nxt == model.config.eos_id:
            break
        context.append(nxt)
    assert decode_with_embedding_prefix(model, zero, 5) == expected


# -- gradients ----------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["full", "prompt", "prefix"])
def test_gradient_matches_finite_differences(mode):
    model = make_model(mode, seed=13, vocab_size=5, embedding_dim=4, num_layers=1,
                       hidden_width=4, context_length=8, num_virtual_tokens=2)
    model.train()
    params = model.trainable_parameters()
    assert sum(p.numel() for p in model.parameters()) <= 500
    batch = scoring_batch(model, [[2, 3, 4, 0], [4, 4, 2]])

    def loss():
        return sequence_loss(model, *batch).mean()

    loss().backward()
    h = 1e-6
    for name, p in params.items():
        grad = p.grad.detach().clone()
        fd = torch.zeros_like(p)
        with torch.no_grad():
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
        err = (grad - fd).norm() / max(fd.norm().item(), grad.norm().item(), 1e-12)
        assert err < 1e-4, (name, float(err))


# -- checkpoints ----------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["full", "prompt", "prefix"])
def test_checkpoint_roundtrip(tmp_path, mode):
    model = make_model(mode, dtype=torch.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    data = path.read_bytes()
    assert data[:8] == b"TLMCKPT\x00"
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    assert np.array_equal(forward(model, [1, 2, 3]), forward(loaded, [1, 2, 3]))
