import logging
import math
from fractions import Fraction

import numpy as np
import pytest

from oracles import (
    auc_oracle,
    eer_oracle,
    random_score_set,
    rank1_oracle,
    score_set,
    sweep_oracle,
    vr_oracle,
)
from xsface import container
from xsface.backbone import BackboneConfig, build_backbone
from xsface.errors import DegenerateInputError, ProtocolError
from xsface.metrics import (
    FAR_TARGETS,
    ScoreRecord,
    ScoreSet,
    aggregate_folds,
    auc,
    cosine_matrix,
    cross_modal_scores,
    eer,
    embed_entries,
    export_embeddings,
    export_scores,
    format_scores,
    load_scores,
    parse_scores,
    rank1,
    rank1_from_scores,
    retention_scores,
    roc_points,
    score_matrix,
    verification_report,
    vr_at_far,
)
from xsface.synthdata import BenchmarkConfig, Modality, generate_benchmark


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------

def test_eer_worked_example():
    value, _ = eer(score_set([0.9, 0.8, 0.7], [0.75, 0.6, 0.2]))
    assert value == pytest.approx(1 / 3, abs=1e-12)
    assert eer_oracle([0.9, 0.8, 0.7], [0.75, 0.6, 0.2])[0] == Fraction(1, 3)


def test_eer_separated_and_symmetric():
    assert eer(score_set([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    value, _ = eer(score_set([0.1, 0.5, 0.9], [0.1, 0.5, 0.9]))
    assert abs(value - 0.5) <= 1 / 3


def test_auc_worked_example():
    assert auc(score_set([0.9, 0.4], [0.5, 0.1])) == 0.75
    assert auc(score_set([0.9, 0.8], [0.1, 0.2])) == 1.0
    assert auc(score_set([0.3, 0.6], [0.3, 0.6])) == 0.5


def test_vr_worked_example():
    scores = score_set([0.9, 0.8, 0.7, 0.6], [0.65, 0.5, 0.3, 0.1])
    # FAR <= 0.25 admits one impostor: the lowest such threshold is the 0.5/0.6 midpoint
    tar, t = vr_at_far(scores, 0.25)
    assert (tar, t) == (1.0, pytest.approx(0.55))
    # below one impostor in four, every impostor must be rejected
    tar, t = vr_at_far(scores, 0.2)
    assert tar == 0.75 and t == pytest.approx(0.675)


def test_vr_boundaries():
    scores = score_set([0.9, 0.8], [0.85, 0.1])
    assert vr_at_far(scores, 0.99)[0] == 1.0  # all-accept boundary reachable at FAR 1/2
    tar, t = vr_at_far(score_set([0.5, 0.4], [0.9, 0.8]), 0.01)
    assert tar == 0.0 and t > 0.9


def test_vr_warns_when_unresolvable(caplog):
    with caplog.at_level(logging.WARNING):
        vr_at_far(score_set([0.9], [0.1, 0.2]), 0.01)
    assert "cannot resolve" in caplog.text


@pytest.mark.parametrize("target", [0.0, 1.0, -0.5])
def test_vr_bad_target(target):
    with pytest.raises(ProtocolError):
        vr_at_far(score_set([0.9], [0.1]), target)


@pytest.mark.parametrize("fn", [eer, auc, lambda s: vr_at_far(s, 0.1), verification_report])
def test_single_class_rejected(fn):
    with pytest.raises(ProtocolError):
        fn(score_set([0.9, 0.8], []))
    with pytest.raises(ProtocolError):
        fn(score_set([], [0.1]))


def test_non_finite_rejected():
    with pytest.raises(ProtocolError):
        eer(score_set([float("nan")], [0.1]))


# ---------------------------------------------------------------------------
# oracle equivalence
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force(seed):
    scores = random_score_set(np.random.default_rng(seed))
    gen = [r.score for r in scores.records if r.genuine]
    imp = [r.score for r in scores.records if not r.genuine]

    value, t = eer(scores)
    o_value, o_t = eer_oracle(gen, imp)
    assert value == float(o_value) and t == o_t

    assert auc(scores) == float(auc_oracle(gen, imp))

    for target in FAR_TARGETS + (0.1, 0.25, 0.5):
        tar, t = vr_at_far(scores, target)
        o_tar, o_t = vr_oracle(gen, imp, target)
        assert tar == float(o_tar) and t == o_t

    assert rank1_from_scores(scores) == float(rank1_oracle(scores.records))


@pytest.mark.parametrize("seed", range(20))
def test_roc_is_monotone(seed):
    _, far, tar = roc_points(random_score_set(np.random.default_rng(seed)))
    order = np.lexsort((tar, far))
    assert np.all(np.diff(far[order]) >= 0)
    assert np.all(np.diff(tar[order]) >= 0)
    # and, along the sweep, both fall as the threshold rises
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(tar) <= 0)


def test_vr_nondecreasing_in_target(rng):
    report = verification_report(random_score_set(rng))
    values = [report.vr_at_far[f] for f in FAR_TARGETS]
    assert values == sorted(values)


def test_label_permutation_drives_auc_to_half(rng):
    scores = np.sort(rng.normal(size=1000))
    labels = rng.permutation(np.arange(1000) < 500)
    s = ScoreSet([ScoreRecord(str(i), "g", bool(labels[i]), float(scores[i])) for i in range(1000)])
    assert abs(auc(s) - 0.5) <= 0.1


@pytest.mark.parametrize("seed", range(10))
def test_similarity_distance_duality(seed):
    scores = random_score_set(np.random.default_rng(seed))
    gen = [r.score for r in scores.records if r.genuine]
    imp = [r.score for r in scores.records if not r.genuine]
    dgen, dimp = [1 - s for s in gen], [1 - s for s in imp]
    # distance rule: accept iff d <= t, swept over the same points mapped through 1 - s
    thresholds = sorted({1 - t for t in sweep_oracle(gen, imp)}, reverse=True)
    by_distance, _ = eer_oracle(dgen, dimp, accept=lambda d, t: d <= t, thresholds=thresholds)
    assert eer(scores)[0] == pytest.approx(float(by_distance), abs=1e-12)
    # AUC: a genuine "wins" when its distance is smaller
    wins = sum(1 if g < i else 0.5 if g == i else 0 for g in dgen for i in dimp)
    assert auc(scores) == pytest.approx(wins / (len(dgen) * len(dimp)), abs=1e-12)


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

def test_rank1_gallery_equals_probes(rng):
    emb = rng.normal(size=(6, 4))
    ids = [0, 0, 1, 1, 2, 2]
    assert rank1(emb, emb, ids, ids) == 1.0


def test_rank1_adversarial_probe():
    gallery = np.array([[1.0, 0.0], [0.0, 1.0]])
    probes = np.array([[0.9, 0.1], [0.8, 0.2]])
    assert rank1(gallery, probes, [0, 1], [0, 1]) == 0.5


def test_rank1_hand_built():
    gallery = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    probes = np.array([[0.9, 0.1, 0], [0.2, 0.1, 0.0],   # id 0: right, right
                       [0.1, 0.9, 0.3], [0.5, 0.4, 0],    # id 1: right, wrong
                       [0, 1, 1], [0, 0, 2]])              # id 2: tie goes to gallery index 1 (wrong), right
    ids = [0, 0, 1, 1, 2, 2]
    sims = cosine_matrix(probes, gallery)
    oracle = np.mean([int(np.argmax(row)) == i for row, i in zip(sims, ids)])
    assert rank1(gallery, probes, [0, 1, 2], ids) == oracle == pytest.approx(4 / 6)


def test_rank1_missing_identity():
    with pytest.raises(ProtocolError):
        rank1(np.eye(2), np.eye(2), [0, 1], [0, 5])


def test_zero_norm_embedding():
    with pytest.raises(DegenerateInputError):
        rank1(np.eye(2), np.zeros((1, 2)), [0, 1], [0])


# ---------------------------------------------------------------------------
# scoring against a model
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    cfg = BenchmarkConfig(num_identities=3, variations=2, pretrain_ids=0, adapt_ids=0, eval_ids=3)
    model = build_backbone(BackboneConfig(stem_channels=8, stage_channels=(8, 16, 16), embed_dim=16))
    return model, generate_benchmark(cfg)


def test_score_matrix_shape_and_self_match(toy):
    model, ds = toy
    gallery = [ds.entries[i] for i in ds.select([0, 1], Modality.SOURCE)]
    scores = score_matrix(model, gallery, gallery[:1])
    assert len(scores) == len(gallery)
    assert scores.records[0].score == pytest.approx(1.0, abs=1e-6)
    assert [r.genuine for r in scores.records] == [True, True, False, False]


def test_score_matrix_scalar_oracle(toy):
    model, ds = toy
    gallery = [ds.entries[i] for i in ds.indices(0, Modality.SOURCE)]
    probes = [ds.entries[i] for i in ds.indices(1, Modality.TARGET)]
    g, p = embed_entries(model, gallery).astype(np.float64), embed_entries(model, probes).astype(np.float64)
    scores = score_matrix(model, gallery, probes)
    k = 0
    for i in range(2):
        for j in range(2):
            dot = sum(p[i, d] * g[j, d] for d in range(g.shape[1]))
            expected = dot / math.sqrt(sum(v * v for v in p[i]) * sum(v * v for v in g[j]))
            assert scores.records[k].score == pytest.approx(expected, abs=1e-6)
            assert (scores.records[k].probe_id, scores.records[k].reference_id) == (probes[i].path, gallery[j].path)
            k += 1


def test_score_matrix_empty(toy):
    model, ds = toy
    with pytest.raises(ProtocolError):
        score_matrix(model, [], ds.entries[:1])


def test_protocol_helpers(toy):
    model, ds = toy
    cross = cross_modal_scores(model, ds, [0, 1, 2])
    assert len(cross) == 6 * 6
    assert all(r.probe_id.startswith("target/") and r.reference_id.startswith("source/") for r in cross.records)
    ret = retention_scores(model, ds, [0, 1, 2])
    assert len(ret) == 3 * 3
    assert {r.reference_id[-8:] for r in ret.records} == {"v000.xst"}
    assert {r.probe_id[-8:] for r in ret.records} == {"v001.xst"}


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def report_with_eer(value):
    r = verification_report(score_set([0.9, 0.8], [0.1, 0.2]))
    r.eer = value
    return r


def test_aggregate_two_folds():
    agg = aggregate_folds([report_with_eer(0.1), report_with_eer(0.3)])
    assert agg.mean["eer"] == pytest.approx(0.2)
    assert agg.std["eer"] == pytest.approx(math.sqrt(0.02), abs=1e-12)
    assert agg.std["eer"] == pytest.approx(0.1414, abs=1e-4)


def test_aggregate_single_and_identical():
    one = aggregate_folds([report_with_eer(0.25)])
    assert one.mean["eer"] == 0.25 and one.std["eer"] == 0.0
    same = aggregate_folds([report_with_eer(0.25)] * 3)
    assert all(v == 0.0 for v in same.std.values())


def test_aggregate_empty():
    with pytest.raises(ProtocolError):
        aggregate_folds([])


def test_fold_report_formats():
    agg = aggregate_folds([report_with_eer(0.1), report_with_eer(0.3)])
    tsv = agg.to_tsv().splitlines()
    assert tsv[1].split("\t") == ["eer", "0.200000", "0.141421"]
    assert "eer.mean=0.200000" in agg.to_text().splitlines()


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def test_score_csv_round_trip(tmp_path, rng):
    scores = random_score_set(rng)
    text = format_scores(scores)
    assert text.splitlines()[0] == "probe_id,reference_id,label,score"
    assert len(text.splitlines()) == len(scores) + 1
    assert format_scores(parse_scores(text)) == text
    export_scores(scores, tmp_path / "s.csv")
    export_scores(load_scores(tmp_path / "s.csv"), tmp_path / "t.csv")
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "t.csv").read_bytes()


def test_reloaded_scores_reproduce_metrics(tmp_path, rng):
    s = ScoreSet([ScoreRecord(str(i), "g", bool(i % 3 == 0), float(np.tanh(rng.normal()))) for i in range(300)])
    export_scores(s, tmp_path / "s.csv")
    reloaded = load_scores(tmp_path / "s.csv")
    assert eer(reloaded)[0] == pytest.approx(eer(s)[0], abs=1e-6)
    assert auc(reloaded) == pytest.approx(auc(s), abs=1e-6)


def test_malformed_score_csv():
    with pytest.raises(ProtocolError):
        parse_scores("a,b,c\n")
    with pytest.raises(ProtocolError):
        parse_scores("probe_id,reference_id,label,score\nx,y,2,0.5\n")


def test_export_scores_bad_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        export_scores(score_set([0.9], [0.1]), tmp_path / "missing" / "s.csv")


def test_export_embeddings(tmp_path, toy):
    model, ds = toy
    entries = ds.entries[:4]
    export_embeddings(entries, model, tmp_path / "e.xst")
    header, records = container.read(tmp_path / "e.xst")
    assert "kind=embeddings" in header
    assert [r.name for r in records] == [e.path for e in entries]
    np.testing.assert_array_equal(np.stack([r.array for r in records]), embed_entries(model, entries))
