import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from halluaudio.backbone import BackboneSpec
from halluaudio.episodes import EpisodeSpec, build_test_episodes
from halluaudio.evaluation import (AccuracyAccumulator, AccuracySummary, EvalRecord, ImportanceCounts,
                                   accuracy_summary, embed_clips, evaluate, export_results, frequency_importance,
                                   gain_table, read_records_csv, write_importance_csv)
from halluaudio.fewshot import ExtractorBank, compute_prototypes, make_masks, score
from halluaudio.synthetic import band_corpus

SMALL = BackboneSpec((64, 64), (4, 4, 4))


def records_from(bits, per_query=1):
    return [EvalRecord(i, f"q{i // per_query}", 0, 0 if b else 1, (0, 1), (0.0, -1.0)) for i, b in enumerate(bits)]


def test_all_correct():
    s = accuracy_summary(records_from([1] * 50))
    assert (round(s.mean, 2), round(s.half_width, 2)) == (100.0, 0.0)


def test_alternating_ten_thousand():
    s = accuracy_summary(records_from([i % 2 for i in range(10000)]))
    # 1.96 * 0.5 / sqrt(10000) * 100, sample std of an even 0/1 split
    oracle = 1.96 * np.std([i % 2 for i in range(10000)], ddof=1) / 100 * 100
    assert str(s) == "50.00 ± 0.98"
    assert s.half_width == pytest.approx(oracle, rel=1e-12)


def test_thirty_thousand_episode_half_width():
    bits = (np.random.default_rng(0).random(30000) < 0.72).astype(int)
    assert accuracy_summary(records_from(bits)).half_width == pytest.approx(0.51, abs=0.02)


def test_empty_records_rejected():
    with pytest.raises(ValueError):
        accuracy_summary([])


def test_per_query_ci_keeps_mean():
    bits = np.random.default_rng(1).random(600) < 0.6
    a = accuracy_summary(records_from(bits, per_query=50))
    b = accuracy_summary(records_from(bits, per_query=50), per="query")
    assert a.mean == pytest.approx(b.mean, abs=1e-9)
    assert a.half_width != b.half_width


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=2, max_size=300), st.randoms(use_true_random=False))
def test_summary_order_invariant(bits, rnd):
    recs = records_from(bits)
    shuffled = recs[:]
    rnd.shuffle(shuffled)
    assert accuracy_summary(recs) == accuracy_summary(shuffled)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.booleans(), min_size=2, max_size=200), st.lists(st.booleans(), min_size=2, max_size=200))
def test_accumulator_merge(a, b):
    x, y, both = AccuracyAccumulator(), AccuracyAccumulator(), AccuracyAccumulator()
    for v in a:
        x.add(float(v))
        both.add(float(v))
    for v in b:
        y.add(float(v))
        both.add(float(v))
    m = x.merge(y).summary()
    assert m.mean == pytest.approx(both.summary().mean, abs=1e-9)
    assert m.half_width == pytest.approx(both.summary().half_width, abs=1e-9)


def test_half_width_shrinks_with_sqrt_n():
    rng = np.random.default_rng(2)
    bits = rng.random(40000) < 0.7
    small = accuracy_summary(records_from(bits[:2500])).half_width
    big = accuracy_summary(records_from(bits)).half_width
    assert small / big == pytest.approx(4.0, rel=0.05)


def cells(**means):
    return {k: AccuracySummary(v, 0.6, 30000) for k, v in means.items()}


def test_gain_examples():
    t = gain_table({"baseline": cells(a=69.77, b=83.47), "freq.": cells(a=71.88, b=84.0),
                    "time": cells(a=70.0, b=82.89)})
    assert t.gains["freq."]["a"] == 2.11
    assert t.gains["time"]["b"] == -0.58
    assert "Gain(freq.)" in t.format()


def test_gain_identical_runs_zero():
    t = gain_table({"baseline": cells(a=70.1, b=80.2), "copy": cells(a=70.1, b=80.2)})
    assert all(v == 0 for v in t.gains["copy"].values())


def test_gain_mismatched_grid():
    with pytest.raises(ValueError):
        gain_table({"baseline": cells(a=1.0), "other": cells(b=1.0)})


# ----------------------------------------------------------- scored episodes


@pytest.fixture(scope="module")
def corpus():
    index, clips = band_corpus(6, 8, shape=(64, 64), band="high", seed=0)
    masks = make_masks("frequency", (64, 64))
    bank = ExtractorBank.create(SMALL, masks, 0)
    return index, clips, masks, bank


def test_table_scoring_matches_direct_score(corpus):
    index, clips, masks, bank = corpus
    novel = index.by_class()
    spec = EpisodeSpec(5, 2, 1, 2)
    table = embed_clips(bank, masks, clips)
    recs = evaluate(table, novel, spec, 0)
    for r, ep in zip(recs[:12], build_test_episodes(novel, spec, 0)):
        sx = np.stack([clips[c] for c in ep.support_ids])
        protos = compute_prototypes(sx, ep.support_labels, bank.eval(), masks)
        direct = score(clips[ep.query_ids[0]], protos, bank, masks)
        np.testing.assert_allclose(r.logits, direct, rtol=1e-4)
        assert r.episode_id == ep.episode_id


def test_threads_do_not_change_records(corpus):
    index, clips, masks, bank = corpus
    table = embed_clips(bank, masks, clips)
    spec = EpisodeSpec(5, 1, 1, 3)
    one = evaluate(table, index.by_class(), spec, 4, threads=1)
    three = evaluate(table, index.by_class(), spec, 4, threads=3)
    assert one == three
    assert embed_clips(bank, masks, clips, threads=3).embeddings[1].tobytes() == table.embeddings[1].tobytes()


def test_export_roundtrip_and_determinism(corpus, tmp_path):
    index, clips, masks, bank = corpus
    table = embed_clips(bank, masks, clips)
    spec = EpisodeSpec(5, 1, 1, 2)
    recs = evaluate(table, index.by_class(), spec, 0, concepts=True)
    s = accuracy_summary(recs)
    csv_a, json_a = export_results(recs, s, tmp_path / "a" / "cell", {"seed": 0})
    csv_b, _ = export_results(evaluate(table, index.by_class(), spec, 0, concepts=True), s, tmp_path / "b" / "cell")
    assert read_records_csv(csv_a) == recs
    assert csv_a.read_bytes() == csv_b.read_bytes()
    assert '"schema": 1' in json_a.read_text()


def test_importance_near_one_when_untrained():
    rng = np.random.default_rng(0)
    clips = {f"c{c}_{i}": rng.standard_normal((64, 64)).astype(np.float32) for c in range(5) for i in range(10)}
    novel = {c: [f"c{c}_{i}" for i in range(10)] for c in range(5)}
    masks = make_masks("frequency", (64, 64))
    bank = ExtractorBank.create(SMALL, masks, 1)
    counts = frequency_importance(embed_clips(bank, masks, clips), novel, masks, spec=EpisodeSpec(5, 5, 1, 20))
    q_high = sum(c.q_high for c in counts)
    q_low = sum(c.q_low for c in counts)
    for c in counts:
        assert c.q_high <= c.episodes and c.q_low <= c.episodes
    assert q_high / q_low == pytest.approx(1.0, abs=0.3)


def test_importance_high_band_corpus_favours_high(corpus):
    index, clips, masks, bank = corpus
    counts = frequency_importance(embed_clips(bank, masks, clips), index.by_class(), masks,
                                  spec=EpisodeSpec(5, 5, 1, 10))
    assert sum(c.q_high for c in counts) > 1.5 * sum(c.q_low for c in counts)


def test_importance_undefined_ratio(tmp_path):
    c = ImportanceCounts("thunderstorm", 3, 7, 0, 10)
    assert c.ratio is None
    write_importance_csv([c, ImportanceCounts("rooster", 4, 6, 3, 10)], tmp_path / "imp.csv")
    rows = (tmp_path / "imp.csv").read_text().splitlines()
    assert rows[1].endswith(",undefined")
    assert rows[2].endswith(",2.0000")


def test_importance_needs_frequency_masks(corpus):
    index, clips, _, _ = corpus
    masks = make_masks("time", (64, 64))
    bank = ExtractorBank.create(SMALL, masks, 0)
    with pytest.raises(ValueError):
        frequency_importance(embed_clips(bank, masks, clips), index.by_class(), masks)
