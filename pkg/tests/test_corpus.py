import pytest

from sparsevcd.corpus import (GeneratorSpec, gen_corpus, load_corpus,
                              write_corpus)
from sparsevcd.errors import ConfigError, CorpusError


def test_regeneration_is_byte_identical(tmp_path):
    spec = GeneratorSpec()
    a_path = tmp_path / "a.jsonl"
    b_path = tmp_path / "b.jsonl"
    write_corpus(a_path, gen_corpus(spec, seed=9, n=25))
    write_corpus(b_path, gen_corpus(spec, seed=9, n=25))
    assert a_path.read_bytes() == b_path.read_bytes()


def test_single_example_deterministic(tmp_path):
    spec = GeneratorSpec()
    p = tmp_path / "one.jsonl"
    write_corpus(p, gen_corpus(spec, seed=1, n=1))
    first = p.read_bytes()
    write_corpus(p, gen_corpus(spec, seed=1, n=1))
    assert p.read_bytes() == first


def test_prior_rate_zero_no_cooccurrence():
    spec = GeneratorSpec(prior_rate=0.0)
    corpus = gen_corpus(spec, seed=4, n=200)
    d = spec.distractor_id
    for ex in corpus.examples:
        assert d not in ex.report


def test_prior_rate_binomial_bound():
    spec = GeneratorSpec(prior_rate=0.8)
    corpus = gen_corpus(spec, seed=7, n=1000)
    t, d = spec.trigger_id, spec.distractor_id
    triggered = [ex for ex in corpus.examples if t in ex.image.finding_ids]
    assert triggered
    rate = sum(1 for ex in triggered if d in ex.report) / len(triggered)
    assert 0.74 <= rate <= 0.86


def test_reports_subset_of_image_plus_distractor():
    spec = GeneratorSpec()
    corpus = gen_corpus(spec, seed=2, n=100)
    for ex in corpus.examples:
        allowed = set(ex.image.finding_ids) | {spec.distractor_id}
        assert set(ex.report) <= allowed
    ids = [ex.id for ex in corpus.examples]
    assert len(set(ids)) == len(ids)


def test_questions_and_labels():
    spec = GeneratorSpec(include_questions=True)
    corpus = gen_corpus(spec, seed=3, n=50)
    for ex in corpus.examples:
        assert ex.question is not None
        asked = ex.question[-1]
        expected = "yes" if asked in ex.image.finding_ids else "no"
        assert ex.label == expected


def test_roundtrip(tmp_path):
    spec = GeneratorSpec(include_questions=True)
    corpus = gen_corpus(spec, seed=11, n=10)
    p = tmp_path / "c.jsonl"
    write_corpus(p, corpus)
    loaded = load_corpus(p)
    assert loaded.meta["n_findings"] == spec.n_findings
    assert len(loaded.examples) == 10
    for a, b in zip(corpus.examples, loaded.examples):
        assert a.id == b.id
        assert a.image.finding_ids == b.image.finding_ids
        assert a.report == b.report
        assert a.question == b.question


def test_load_errors(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    with pytest.raises(CorpusError):
        load_corpus(bad)
    no_meta = tmp_path / "nometa.jsonl"
    no_meta.write_text('{"type":"example","id":"x","image":{"finding_ids":[4],'
                       '"tokens_per_finding":1},"report":[4]}\n')
    with pytest.raises(CorpusError, match="meta"):
        load_corpus(no_meta)


def test_generator_validation():
    with pytest.raises(ConfigError):
        GeneratorSpec(n_findings=3).validate()
    with pytest.raises(ConfigError):
        GeneratorSpec(findings_per_image=16).validate()
    with pytest.raises(ConfigError):
        GeneratorSpec(prior_rate=1.5).validate()
    with pytest.raises(ConfigError):
        gen_corpus(GeneratorSpec(), seed=1, n=0)
