from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from privbench.canary import (
    FILLER_WORDS,
    FORMAT_NAMES,
    CanaryFormat,
    InsertionPlan,
    build_formats,
    build_insertion_plan,
    inject,
    read_plans,
    write_injection_manifest,
    write_plans,
)
from privbench.errors import ConfigError, DataError, DomainError
from privbench.synthetic import NliGenerator, lexicon

DECLARED = {"Name": 80, "City": 80, "Email": 70, "Phone": 100, "Letters": 100, "OneWord": 100, "ThreeWords": 100}


@pytest.fixture(scope="module")
def formats():
    return {f.name: f for f in build_formats(lexicon(), seed=0)}


def test_declared_counts_and_distinct_surfaces(formats):
    assert tuple(formats) == FORMAT_NAMES
    for name, fmt in formats.items():
        assert fmt.size == DECLARED[name]
        surfaces = {fmt.instantiate(c) for c in fmt.candidates}
        assert len(surfaces) == fmt.size


def test_instantiate_examples(formats):
    assert formats["City"].instantiate("Tokyo, Japan") == "I live in Tokyo, Japan. It is a beautiful city"
    phone = CanaryFormat("Phone", formats["Phone"].template, ("9 0 5 8 4",))
    assert phone.instantiate("9 0 5 8 4") == "My phone number is 9 0 5 8 4. You can call me by this number."


def test_round_trip_over_every_candidate(formats):
    for fmt in formats.values():
        for c in fmt.candidates:
            assert fmt.extract(fmt.instantiate(c)) == c


def test_unknown_candidate_rejected(formats):
    with pytest.raises(DomainError):
        formats["Name"].instantiate("Nobody Atall")
    with pytest.raises(DomainError):
        formats["Name"].extract("Hello there")


def test_generated_candidate_shapes(formats):
    for c in formats["Phone"].candidates:
        digits = c.split(" ")
        assert len(digits) == 5 and all(d.isdigit() and len(d) == 1 for d in digits)
    for c in formats["Letters"].candidates:
        letters = c.split(" ")
        assert len(letters) == 6 and all(ch.isalpha() and len(ch) == 1 for ch in letters)
    vocab = set(lexicon())
    assert set(formats["OneWord"].candidates) <= vocab
    for c in formats["ThreeWords"].candidates:
        assert len(c.split()) == 3 and set(c.split()) <= vocab
    assert not vocab & set(FILLER_WORDS)


def test_too_small_vocabulary_rejected():
    with pytest.raises(ConfigError):
        build_formats(["cat", "dog"], seed=0, names=["OneWord"])


@pytest.mark.parametrize("name,inserted", [("Phone", 40), ("Email", 28), ("Name", 32)])
def test_plan_sizes(formats, name, inserted):
    plan = build_insertion_plan(formats[name], seed=1)
    assert len(plan.inserted) == inserted
    assert len(plan.held_out) == DECLARED[name] - inserted
    assert set(plan.inserted) | set(plan.held_out) == set(formats[name].candidates)
    assert not set(plan.inserted) & set(plan.held_out)
    assert plan.repetitions == tuple(10 * (k + 1) for k in range(inserted))


def test_plan_total_lines(formats):
    plan = build_insertion_plan(formats["Phone"], seed=1)
    assert plan.total_lines == 10 * (40 * 41 // 2) == 8200
    lines = inject(["x"], [plan], seed=0)
    assert sum(1 for l in lines if l.canary_id is not None) == 8200


def test_plan_determinism_and_shape(formats):
    a = build_insertion_plan(formats["OneWord"], seed=5)
    assert a == build_insertion_plan(formats["OneWord"], seed=5)
    b = build_insertion_plan(formats["OneWord"], seed=6)
    assert a.inserted != b.inserted
    assert a.repetitions == b.repetitions


def test_plan_config_errors(formats):
    with pytest.raises(ConfigError):
        build_insertion_plan(formats["Name"], fraction=0.001)
    with pytest.raises(ConfigError):
        build_insertion_plan(formats["Name"], fraction=1.0)


def test_inject_empty_plan_and_empty_corpus():
    corpus = ["a", "b", "c"]
    assert [l.text for l in inject(corpus, [], seed=0)] == corpus
    with pytest.raises(DataError):
        inject([], [], seed=0)


def test_inject_single_canary():
    fmt = CanaryFormat("Name", "My name is {slot}", ("Ann Lee",))
    plan = InsertionPlan(fmt, ("Ann Lee",), (10,), ())
    corpus = [f"sample {i}" for i in range(90)]
    out = inject(corpus, [plan], seed=0)
    assert len(out) == 100
    assert sum(l.text == "My name is Ann Lee" for l in out) == 10
    assert sorted(l.text for l in out if l.canary_id is None) == sorted(corpus)


def test_full_plan_occurrence_counts(formats, tmp_path):
    corpus = [f"{s.premise} {s.hypothesis}" for s in NliGenerator(0).generate(500)]
    plans = [build_insertion_plan(f, seed=i) for i, f in enumerate(formats.values())]
    out = inject(corpus, plans, seed=3)
    counts = Counter(l.text for l in out)
    for plan in plans:
        for c in plan.inserted:
            assert counts[plan.format.instantiate(c)] == plan.repetitions_of(c)
        for c in plan.held_out:
            assert counts[plan.format.instantiate(c)] == 0
    write_injection_manifest(out, tmp_path / "manifest.csv")
    rows = (tmp_path / "manifest.csv").read_text().splitlines()
    assert rows[0] == "line,kind,ref" and len(rows) == len(out) + 1


def test_plan_jsonl_round_trip(formats, tmp_path):
    plans = [build_insertion_plan(f, seed=2) for f in formats.values()]
    write_plans(plans, tmp_path / "plans.jsonl")
    back = read_plans(tmp_path / "plans.jsonl")
    for a, b in zip(plans, back):
        assert a.inserted == b.inserted and a.repetitions == b.repetitions
        assert set(a.held_out) == set(b.held_out)
        assert set(a.format.candidates) == set(b.format.candidates)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.floats(0.01, 0.99), st.integers(1, 20), st.integers(0, 10**6))
def test_plan_partition_property(size, fraction, base, seed):
    fmt = CanaryFormat("Name", "My name is {slot}", tuple(f"n{i}" for i in range(size)))
    k = int(fraction * size + 1e-9)
    if k == 0:
        with pytest.raises(ConfigError):
            build_insertion_plan(fmt, fraction, base, seed)
        return
    plan = build_insertion_plan(fmt, fraction, base, seed)
    assert len(plan.inserted) == k
    assert sorted(plan.inserted + plan.held_out) == sorted(fmt.candidates)
    assert plan.total_lines == base * k * (k + 1) // 2
