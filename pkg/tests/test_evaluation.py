import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from hallguard.evaluation.corpus import (
    CORRUPTIONS, EvalRecord, contains_marker, generate_corrupted_corpus, parse_mix, read_jsonl,
    standard_corpus, synthesize_documents, write_jsonl,
)
from hallguard.evaluation.flight import ACTIONS, TrafficRecord, read_traffic, run_flight, traffic_from_records, write_traffic
from hallguard.evaluation.judge import LexicalJudge, OracleJudge, judge_text
from hallguard.evaluation.metrics import (
    Confusion, MitigationMetrics, evaluate_detection, evaluate_mitigation, format_table, tabulate_disagreements,
)
from hallguard.ner import extract_entities
from hallguard.service.config import PipelineConfig, Variant
from hallguard.service.runtime import GuardPipeline
from hallguard.stubs import IdentityRewriter
from hallguard.training import featurize_records

from oracles import RATER_JUDGE, RATER_REFERENCE, RATER_TRUTH, confusion_counts


@pytest.fixture(scope="module")
def docs():
    return synthesize_documents(3, 12)


class TestCorpus:
    def test_documents_have_three_sentences_and_entities(self, docs):
        from hallguard.segmentation import split_sentences

        for _, text in docs:
            assert len(split_sentences(text)) >= 3
            assert extract_entities(text)

    def test_entity_swap_span_is_the_new_mention(self, docs):
        recs = generate_corrupted_corpus(5, docs, 4, mix="entity_swap=1", positive_fraction=1.0)
        assert recs and all(r.corruption == "entity_swap" for r in recs)
        for r in recs:
            (span,) = r.spans
            assert span.text(r.response) == r.markers[0]
            assert not contains_marker(r.document, r.markers[0])

    def test_zero_per_doc(self, docs):
        assert generate_corrupted_corpus(1, docs, 0) == []

    def test_byte_identical_files(self, docs, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(generate_corrupted_corpus(9, docs, 4), a)
        write_jsonl(generate_corrupted_corpus(9, synthesize_documents(3, 12), 4), b)
        assert a.read_bytes() == b.read_bytes()

    def test_jsonl_round_trip(self, docs, tmp_path):
        recs = generate_corrupted_corpus(2, docs, 4)
        write_jsonl(recs, tmp_path / "c.jsonl")
        assert read_jsonl(tmp_path / "c.jsonl") == recs

    def test_labels_and_corruptions(self, docs):
        recs = generate_corrupted_corpus(4, docs, 6, positive_fraction=0.5)
        for r in recs:
            assert (r.label == 1) == (r.corruption is not None) == bool(r.spans)
            assert r.corruption is None or r.corruption in CORRUPTIONS
        assert {r.corruption for r in recs if r.label} == set(CORRUPTIONS)

    def test_every_corruption_has_its_span_in_bounds(self, docs):
        for kind in CORRUPTIONS:
            for r in generate_corrupted_corpus(6, docs, 2, mix={kind: 1}, positive_fraction=1.0):
                (span,) = r.spans
                assert 0 <= span.start < span.end <= len(r.response)

    def test_gold_span_validation(self):
        from hallguard.core import CharSpan

        with pytest.raises(ValueError):
            EvalRecord("x", "doc", "short", 1, (CharSpan(0, 50),))
        with pytest.raises(ValueError):
            EvalRecord("x", "doc", "short", 2)

    def test_mix_parsing(self):
        assert parse_mix("entity_swap=2,number") == {"entity_swap": 2.0, "number": 1.0}
        assert set(parse_mix(None)) == set(CORRUPTIONS)
        with pytest.raises(ValueError):
            parse_mix("typo=1")
        with pytest.raises(ValueError):
            parse_mix({"number": 0})

    def test_oracle_reproduces_gold_labels(self, corpus):
        judge = OracleJudge(corpus)
        assert [judge_text(judge, r.document, r.response) for r in corpus] == [r.label for r in corpus]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_generator_gold_coherence(seed):
    recs = standard_corpus(seed, 3, 4)
    judge = OracleJudge(recs)
    assert all(judge_text(judge, r.document, r.response) == r.label for r in recs)


class TestDetectionMetrics:
    def test_precision_half(self):
        c = Confusion(tp=5, fp=5)
        assert c.precision == 0.5

    def test_all_negative_recall_zero(self):
        c = Confusion.of([0] * 6, [1, 0, 1, 0, 1, 1])
        assert c.recall == 0.0 and c.precision == 0.0 and c.f1 == 0.0

    def test_twenty_record_fixture(self):
        rng = random.Random(20)
        pred = [rng.randint(0, 1) for _ in range(20)]
        gold = [rng.randint(0, 1) for _ in range(20)]
        c = Confusion.of(pred, gold)
        assert (c.tp, c.fp, c.fn, c.tn) == confusion_counts(pred, gold)
        tp, fp, fn, _ = confusion_counts(pred, gold)
        assert c.precision == tp / (tp + fp) and c.recall == tp / (tp + fn)

    def test_evaluate_detection(self, corpus, model):
        X, _ = featurize_records(corpus)
        m = evaluate_detection(corpus, model, X=X)
        assert set(m.methods) == {"ner", "nli", "sbd", "ensemble"}
        gold = [r.label for r in corpus]
        pred = (model.predict_proba(X) >= model.thresholds["detection"]).astype(int)
        assert m["ensemble"] == Confusion.of(pred, gold)
        assert m.table().splitlines()[0].split() == ["method", "precision", "recall", "f1", "tp", "fp", "fn", "tn"]

    def test_empty_records(self, model):
        with pytest.raises(ValueError):
            evaluate_detection([], model)

    def test_format_table_alignment(self):
        text = format_table(("a", "bb"), [("x", 1.0), ("yyy", None)])
        assert text.splitlines() == ["a    bb", "---  ------", "x    1.0000", "yyy     n/a"]


class _FlakyJudge:
    def __init__(self, inner, bad_document):
        self.inner, self.bad = inner, bad_document

    def judge(self, document, sentence):
        if document == self.bad:
            raise TimeoutError("judge timed out")
        return self.inner.judge(document, sentence)


class TestMitigation:
    def test_rate_arithmetic(self):
        m = MitigationMetrics(n=10, detected=10, judged=10, fixed=6)
        assert m.mitigation_rate == 0.6

    def test_zero_detected_not_applicable(self, model):
        docs = synthesize_documents(8, 3)
        clean = generate_corrupted_corpus(8, docs, 2, positive_fraction=0.0)
        pipe = GuardPipeline(PipelineConfig(), model)
        m = evaluate_mitigation(clean, pipe, OracleJudge(clean))
        assert m.detected == 0 and m.mitigation_rate is None
        assert "n/a" in m.table()

    def test_entity_swap_fully_mitigated(self, model, docs):
        recs = generate_corrupted_corpus(11, docs, 3, mix="entity_swap=1", positive_fraction=1.0)
        m = evaluate_mitigation(recs, GuardPipeline(PipelineConfig(), model), OracleJudge(recs))
        assert m.detected > 0 and m.mitigation_rate == 1.0

    def test_identity_rewriter_fixes_nothing(self, model, docs):
        recs = generate_corrupted_corpus(11, docs, 2, mix="entity_swap=1", positive_fraction=1.0)
        m = evaluate_mitigation(recs, GuardPipeline(PipelineConfig(), model, IdentityRewriter()), OracleJudge(recs))
        assert m.mitigation_rate == 0.0 and m.blocked == m.detected

    def test_judge_failure_counted(self, model, corpus):
        recs = corpus[:12]
        judge = _FlakyJudge(OracleJudge(recs), recs[0].document)
        m = evaluate_mitigation(recs, GuardPipeline(PipelineConfig(), model), judge)
        bad = [r.id for r in recs if r.document == recs[0].document]
        assert m.judge_failures == len(bad) and m.failed_ids == bad
        assert m.n == len(recs) and m.judged + m.judge_failures >= m.detected

    def test_empty(self, model):
        with pytest.raises(ValueError):
            evaluate_mitigation([], GuardPipeline(PipelineConfig(), model), LexicalJudge())


class TestDisagreements:
    def test_fixture(self):
        out = tabulate_disagreements(RATER_JUDGE, RATER_REFERENCE, RATER_TRUTH)
        assert out["reference"] == {"false_positives": 1, "false_negatives": 10, "total": 11}
        assert out["judge"] == {"false_positives": 4, "false_negatives": 5, "total": 9}

    def test_identical_rater(self):
        truth = [1, 0, 1, 1, 0]
        out = tabulate_disagreements(truth, truth, truth)
        assert out["judge"] == out["reference"] == {"false_positives": 0, "false_negatives": 0, "total": 0}

    def test_negated_rater(self):
        truth = [1, 1, 0, 0]
        neg = [1 - t for t in truth]
        assert tabulate_disagreements(neg, truth, truth)["judge"] == \
            {"false_positives": 2, "false_negatives": 2, "total": 4}

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            tabulate_disagreements([1], [1, 0], [1, 0])


@pytest.fixture(scope="module")
def traffic(corpus):
    return traffic_from_records(corpus[:40])


def _cfg(name, variant=Variant.DETECT_AND_MITIGATE):
    return PipelineConfig(name=name, variant=variant)




class TestFlight:
    def test_identical_variants(self, traffic, corpus, model):
        rep = run_flight(traffic, [_cfg("a"), _cfg("b")], OracleJudge(corpus), model)
        a, b = rep.rows(include_latency=False)
        a.pop("variant"), b.pop("variant")
        assert a == b

    def test_rates_sum_to_one_exactly(self, traffic, corpus, model):
        rep = run_flight(traffic, [_cfg("m"), _cfg("d", Variant.DETECT_ONLY)], OracleJudge(corpus), model)
        for v in rep.variants.values():
            assert sum(v.rate(a) for a in ACTIONS) == Fraction(1)
            assert all(0 <= v.rate(a) <= 1 for a in ACTIONS)

    def test_order_independence(self, traffic, corpus, model):
        judge = OracleJudge(corpus)
        one = run_flight(traffic, [_cfg("m"), _cfg("d", Variant.DETECT_ONLY)], judge, model)
        two = run_flight(traffic, [_cfg("d", Variant.DETECT_ONLY), _cfg("m")], judge, model)
        assert one.rows(False) == two.rows(False)

    def test_mitigation_lowers_block_rate(self, traffic, corpus, model):
        rep = run_flight(traffic, [_cfg("m"), _cfg("d", Variant.DETECT_ONLY)], OracleJudge(corpus), model)
        assert rep["m"].rate("blocked") < rep["d"].rate("blocked")
        assert rep["m"].hallucination_rate == rep["d"].hallucination_rate

    def test_empty_inputs(self, traffic, model):
        with pytest.raises(ValueError):
            run_flight(traffic, [], LexicalJudge(), model)
        with pytest.raises(ValueError):
            run_flight([], [_cfg("a")], LexicalJudge(), model)
        with pytest.raises(ValueError):
            run_flight(traffic, [_cfg("a"), _cfg("a")], LexicalJudge(), model)

    def test_crash_is_error_outcome(self, traffic, corpus, model, monkeypatch):
        bad = traffic[0].document
        original = GuardPipeline.handle

        def handle(self, req):
            if self.config.name == "fragile" and req.document == bad:
                raise RuntimeError("boom")
            return original(self, req)

        monkeypatch.setattr(GuardPipeline, "handle", handle)
        rep = run_flight(traffic, [_cfg("fragile"), _cfg("solid")], OracleJudge(corpus), model)
        n_bad = sum(t.document == bad for t in traffic)
        assert rep["fragile"].counts["error"] == n_bad and rep["solid"].counts["error"] == 0
        assert rep["fragile"].n == rep["solid"].n == len(traffic)

    def test_concurrent_mode_marks_latency(self, traffic, corpus, model):
        judge = OracleJudge(corpus)
        seq = run_flight(traffic, [_cfg("m")], judge, model)
        par = run_flight(traffic, [_cfg("m")], judge, model, workers=4)
        assert not par.latency_comparable and "not comparable" in par.table()
        assert seq.rows(False)[0] | {"latency_comparable": None} == par.rows(False)[0] | {"latency_comparable": None}

    def test_report_files(self, traffic, corpus, model, tmp_path):
        rep = run_flight(traffic[:5], [_cfg("m")], OracleJudge(corpus), model)
        rep.write_jsonl(tmp_path / "r.jsonl", tmp_path / "o.jsonl")
        assert len((tmp_path / "r.jsonl").read_text().splitlines()) == 1
        assert len((tmp_path / "o.jsonl").read_text().splitlines()) == 5

    def test_traffic_round_trip(self, traffic, tmp_path):
        write_traffic(traffic, tmp_path / "t.jsonl")
        assert read_traffic(tmp_path / "t.jsonl") == list(traffic)
        assert TrafficRecord.from_dict({"id": 1, "document": "d", "response": "r"}).timestamp == 0.0
