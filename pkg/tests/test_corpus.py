import pytest
from hypothesis import given, settings, strategies as st

from privbench.corpus import (
    RawSample,
    detokenize,
    read_jsonl,
    read_split_manifest,
    read_templated_corpus,
    read_tsv,
    split_auxiliary,
    templatize,
    write_jsonl,
    write_split_manifest,
    write_templated_corpus,
)
from privbench.errors import DataError
from privbench.synthetic import NliGenerator, lexicon


def test_pair_template():
    t = templatize(RawSample("s", "a", "b", 0))
    assert t.tokens == ("a", "<SEP>", "b", "<SEP>", "The", "relation", "is", "0", "<eos>")
    assert t.tokens[t.label_position] == "0"


def test_single_sentence_template():
    t = templatize(RawSample("s", "x", None, 1))
    assert " ".join(t.tokens) == "x <SEP> The relation is 1 <eos>"


def test_bad_label_and_double_wrap():
    with pytest.raises(DataError):
        templatize(RawSample("s", "a", "b", 3))
    t = templatize(RawSample("s", "a", "b", 0))
    with pytest.raises(DataError):
        templatize(t)
    with pytest.raises(DataError):
        templatize(RawSample("s", "a <SEP> b", None, 0))


words = st.text(alphabet="abcdefghij", min_size=1, max_size=6)
sentences = st.lists(words, min_size=1, max_size=6).map(" ".join)


@settings(max_examples=200, deadline=None)
@given(sentences, st.one_of(st.none(), sentences), st.integers(0, 2))
def test_round_trip_contains_premise_and_label(premise, hypothesis, label):
    text = detokenize(templatize(RawSample("s", premise, hypothesis, label)).tokens)
    assert premise in text
    assert text.endswith(str(label))


@pytest.mark.parametrize("n,sizes", [(10, (4, 6)), (5, (2, 3)), (1000, (400, 600))])
def test_split_sizes(n, sizes):
    aux, train = split_auxiliary(list(range(n)), seed=0)
    assert (len(aux), len(train)) == sizes
    assert sorted(aux + train) == list(range(n))
    assert not set(aux) & set(train)


def test_split_determinism():
    data = list(range(200))
    assert split_auxiliary(data, 3) == split_auxiliary(data, 3)
    assert split_auxiliary(data, 3) != split_auxiliary(data, 4)
    with pytest.raises(DataError):
        split_auxiliary([1, 2, 3, 4], 0)


def test_ingestion_round_trip(tmp_path):
    samples = NliGenerator(0).generate(20)
    write_jsonl(samples, tmp_path / "d.jsonl")
    assert read_jsonl(tmp_path / "d.jsonl") == samples
    tsv = tmp_path / "d.tsv"
    tsv.write_text("idx\tsentence1\tsentence2\tgold\n7\tthe cat\tthe dog\t2\n8\tone\t\t0\n")
    got = read_tsv(tsv, {"id": "idx", "premise": "sentence1", "hypothesis": "sentence2", "label": "gold"})
    assert got == [RawSample("7", "the cat", "the dog", 2), RawSample("8", "one", None, 0)]
    tsv.write_text("id\tpremise\tlabel\n1\tx\tnotanint\n")
    with pytest.raises(DataError):
        read_tsv(tsv)


def test_corpus_and_manifest_files(tmp_path):
    seqs = [[3, 4, 1], [5, 1]]
    write_templated_corpus(seqs, tmp_path / "c.txt")
    assert read_templated_corpus(tmp_path / "c.txt") == seqs
    roles = {"a": "train", "b": "auxiliary"}
    write_split_manifest(roles, tmp_path / "m.csv")
    assert read_split_manifest(tmp_path / "m.csv") == roles


def test_generator_labels_and_vocabulary():
    samples = NliGenerator(1).generate(300)
    assert {s.label for s in samples} == {0, 1, 2}
    vocab = set(lexicon()) | {"the", "a", "while", "does", "not", "never"}
    for s in samples:
        assert set((s.premise + " " + s.hypothesis).split()) <= vocab
    assert NliGenerator(1).generate(300) == samples
