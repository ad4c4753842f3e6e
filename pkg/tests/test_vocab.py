import pytest
from hypothesis import given, strategies as st

from privbench.errors import VocabularyError
from privbench.vocab import EOS, SEP, SPECIAL_TOKENS, Vocabulary, char_tokenize, word_tokenize


def test_word_tokenizer_splits_punctuation_and_keeps_specials():
    assert word_tokenize("I live in Tokyo, Japan. <SEP> x<eos>") == [
        "I", "live", "in", "Tokyo", ",", "Japan", ".", "<SEP>", "x", "<eos>"]


def test_char_tokenizer_keeps_specials_whole():
    assert char_tokenize("ab <SEP>c") == ["a", "b", " ", "<SEP>", "c"]


def test_build_is_dense_and_has_specials_once():
    v = Vocabulary.build(["the cat <SEP> sat", "the dog"])
    assert v.tokens[: len(SPECIAL_TOKENS)] == list(SPECIAL_TOKENS)
    assert sorted(v._index.values()) == list(range(len(v)))
    for tok in SPECIAL_TOKENS:
        assert v.tokens.count(tok) == 1


@given(st.lists(st.sampled_from(["the", "cat", "sat", ",", "<SEP>", "<eos>", "dog"]), max_size=20))
def test_encode_decode_identity(tokens):
    v = Vocabulary.build(["the cat sat , dog"])
    ids = v.encode_tokens(tokens)
    assert v.encode(v.decode(ids)) == ids


@given(st.text(alphabet="abc xyz.", max_size=30))
def test_char_encode_decode_identity(text):
    v = Vocabulary.build(["abc xyz."], kind="char")
    assert v.decode(v.encode(text)) == text


def test_unknown_token_strict_and_lenient():
    v = Vocabulary.build(["a b"])
    with pytest.raises(VocabularyError):
        v.encode("a zzz")
    assert v.encode("a zzz", strict=False)[1] == v.unk_id


def test_save_load_roundtrip(tmp_path):
    v = Vocabulary.build(["héllo wörld , <SEP>"])
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()
    assert lines == v.tokens
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


def test_duplicate_or_missing_specials_rejected():
    with pytest.raises(VocabularyError):
        Vocabulary(["a", "a", *SPECIAL_TOKENS])
    with pytest.raises(VocabularyError):
        Vocabulary([SEP, EOS])
