"""Two-stage pipeline: mining, inference against brute-force oracles,
NMS semantics, the metric suite, and end-to-end determinism."""

import numpy as np
import pytest

from vcmr import corpus as C
from vcmr import pipeline as P
from vcmr import retriever as R
from vcmr.spans import enumerate_spans, iou, nms

SPEC = C.SyntheticSpec(video_count=8, clips_per_video=8, queries_per_video=1, seed=2)
SMALL_TRAIN = P.TrainConfig(seed=0, retriever_epochs=2, localizer_epochs=1,
                            negatives_per_query=2, learning_rate=1e-3)
ICFG = P.InferenceConfig(top_k_videos=4, moment_max_len=8, results_per_query=20)


def small_models(corpus):
    rcfg = R.RetrieverConfig(hidden=16, intermediate=32, heads=2)
    retr, _ = P.train_retriever(corpus, SMALL_TRAIN, model_config=rcfg)
    from vcmr.localizer import LocalizerConfig
    lcfg = LocalizerConfig(hidden=16, intermediate=32, heads=2)
    loc, _, negs = P.train_localizer(corpus, retr, SMALL_TRAIN, ICFG, model_config=lcfg)
    return retr, loc, negs


# ---------------------------------------------------------------------------
# config validation


def test_config_validation():
    with pytest.raises(ValueError):
        P.TrainConfig(retriever_epochs=0).validate()
    with pytest.raises(ValueError):
        P.TrainConfig(temperature=0.0).validate()
    with pytest.raises(ValueError):
        P.InferenceConfig(moment_min_len=3, moment_max_len=2).validate()
    with pytest.raises(ValueError):
        P.InferenceConfig(nms_threshold=0.0).validate()


# ---------------------------------------------------------------------------
# NMS and span enumeration


def test_nms_suppresses_at_threshold_and_keeps_best():
    moments = [((0, 3), 1.0), ((1, 3), 0.9), ((5, 6), 0.8)]
    kept = nms(moments, threshold=0.7)
    assert kept == [((0, 3), 1.0), ((5, 6), 0.8)]  # IoU((0,3),(1,3))=0.75 >= 0.7
    kept_loose = nms(moments, threshold=0.8)
    assert kept_loose == [((0, 3), 1.0), ((1, 3), 0.9), ((5, 6), 0.8)]


def test_nms_keep_cap_and_tie_break():
    moments = [((i, i), 1.0) for i in range(5)]
    kept = nms(moments, threshold=0.7, keep=3)
    assert kept == [((0, 0), 1.0), ((1, 1), 1.0), ((2, 2), 1.0)]


def test_enumerate_spans_respects_limits():
    spans = enumerate_spans(5, 2, 3)
    assert all(2 <= ed - st + 1 <= 3 for st, ed in spans)
    assert len(spans) == 4 + 3
    # limits clamp to the available range instead of going empty
    assert enumerate_spans(2, 5, 9) == [(0, 1)]


# ---------------------------------------------------------------------------
# hard-negative mining


def test_mined_negatives_are_valid_and_deterministic():
    corpus = C.generate(SPEC)
    model = R.RetrieverModel(corpus.d_txt, corpus.d_img, corpus.d_sub,
                             R.RetrieverConfig(hidden=16, intermediate=32, heads=2), seed=0)
    negs = P.mine_hard_negatives(model, corpus, SMALL_TRAIN)
    again = P.mine_hard_negatives(model, corpus, SMALL_TRAIN)
    assert negs == again
    for q in corpus.queries:
        picked = negs[q.id]
        assert len(picked) == SMALL_TRAIN.negatives_per_query
        assert len(set(picked)) == len(picked)
        assert q.target_video not in picked
        ranked = [v for v, _ in P.rank_videos(model, corpus, q) if v != q.target_video]
        pool = ranked[: SMALL_TRAIN.mining_pool]
        assert all(v in pool for v in picked)


def test_mining_rejects_too_small_corpus():
    corpus = C.generate(C.SyntheticSpec(video_count=2, clips_per_video=8, seed=3))
    model = R.RetrieverModel(corpus.d_txt, corpus.d_img, corpus.d_sub, seed=0)
    with pytest.raises(ValueError):
        P.mine_hard_negatives(model, corpus, P.TrainConfig(negatives_per_query=4))


# ---------------------------------------------------------------------------
# inference oracles


def brute_force_infer(retr, loc, corpus, query, icfg):
    """Independent re-derivation of two-stage inference."""
    reps = R.encode_query(retr, query)
    scored = sorted(
        ((v.id, R.score_video(reps, R.encode_video(retr, v)).score) for v in corpus.videos),
        key=lambda it: (-it[1], it[0]),
    )[: icfg.top_k_videos]
    out = []
    for vid, s_r in scored:
        video = corpus.video(vid)
        l_st, l_ed = P.localize_scores(loc, query, [video], corpus.d_sub)
        cands = [
            ((st, ed), s_r / icfg.score_temperature + float(l_st[0, st] + l_ed[0, ed]))
            for st, ed in enumerate_spans(len(video), icfg.moment_min_len, icfg.moment_max_len)
        ]
        # independent greedy NMS
        cands.sort(key=lambda m: (-m[1], m[0]))
        kept = []
        for span, score in cands:
            if all(iou(span, k) < icfg.nms_threshold for k, _ in kept):
                kept.append((span, score))
            if len(kept) >= icfg.results_per_query:
                break
        out.extend((vid, span, score) for span, score in kept)
    out.sort(key=lambda m: (-m[2], m[0], m[1]))
    return out[: icfg.results_per_query]


def test_infer_matches_brute_force_bit_exact():
    corpus = C.generate(SPEC)
    retr, loc, _ = small_models(corpus)
    for q in corpus.queries[:4]:
        got = P.infer(retr, loc, corpus, q, ICFG)
        ref = brute_force_infer(retr, loc, corpus, q, ICFG)
        assert [(m.video_id, m.span, m.score) for m in got] == ref


def test_infer_single_video_stays_on_target():
    corpus = C.generate(SPEC)
    retr, loc, _ = small_models(corpus)
    for q in corpus.queries[:4]:
        preds = P.infer_single_video(retr, loc, corpus, q, ICFG)
        assert preds and all(m.video_id == q.target_video for m in preds)
        st, ed = zip(*(m.span for m in preds))
        assert min(st) >= 0 and max(ed) < len(corpus.video(q.target_video))
        assert all(preds[i].score >= preds[i + 1].score for i in range(len(preds) - 1))


# ---------------------------------------------------------------------------
# metrics


def independent_moment_recall(predictions, corpus, k, p):
    hits = 0
    for q in corpus.queries:
        for m in predictions.get(q.id, [])[:k]:
            if m.video_id == q.target_video and iou(m.span, q.span) >= p:
                hits += 1
                break
    return 100.0 * hits / len(corpus.queries)


def test_metrics_match_independent_implementation():
    corpus = C.generate(SPEC)
    retr, loc, _ = small_models(corpus)
    preds = {q.id: P.infer(retr, loc, corpus, q, ICFG) for q in corpus.queries}
    report = P.evaluate(preds, corpus, task="vcmr")
    for k in (1, 10, 100):
        for p in (0.5, 0.7):
            assert report.vcmr[f"R@{k},IoU={p}"] == independent_moment_recall(preds, corpus, k, p)


def test_vr_metric_matches_hand_count():
    corpus = C.generate(SPEC)
    # rank the true video first for exactly half the queries
    ids = [v.id for v in corpus.videos]
    rankings = {}
    for i, q in enumerate(corpus.queries):
        others = [v for v in ids if v != q.target_video]
        rankings[q.id] = [q.target_video] + others if i % 2 == 0 else others + [q.target_video]
    report = P.evaluate(rankings, corpus, task="vr")
    expected_r1 = 100.0 * ((len(corpus.queries) + 1) // 2) / len(corpus.queries)
    assert report.vr["R@1"] == expected_r1
    assert report.vr["R@100"] == 100.0


def test_recall_nondecreasing_in_k():
    corpus = C.generate(SPEC)
    retr, loc, _ = small_models(corpus)
    report = P.evaluate_pipeline(retr, loc, corpus, ICFG)
    assert report.vr["R@1"] <= report.vr["R@5"] <= report.vr["R@10"] <= report.vr["R@100"]
    for p in (0.5, 0.7):
        seq = [report.vcmr[f"R@{k},IoU={p}"] for k in (1, 10, 100)]
        assert seq == sorted(seq)
        assert all(0.0 <= v <= 100.0 for v in seq)


def test_missing_predictions_count_as_miss_with_warning():
    corpus = C.generate(SPEC)
    rankings = {corpus.queries[0].id: [corpus.queries[0].target_video]}
    with pytest.warns(UserWarning):
        report = P.evaluate(rankings, corpus, task="vr")
    assert report.vr["R@1"] == 100.0 / len(corpus.queries)


def test_evaluate_rejects_unknown_task():
    corpus = C.generate(SPEC)
    with pytest.raises(ValueError):
        P.evaluate({}, corpus, task="nope")


# ---------------------------------------------------------------------------
# determinism and loss curves


def test_training_and_inference_deterministic():
    corpus = C.generate(SPEC)

    def run():
        retr, loc, negs = small_models(corpus)
        preds = P.infer(retr, loc, corpus, corpus.queries[0], ICFG)
        return (
            {n: t.data.copy() for n, t in retr.params.items()},
            {n: t.data.copy() for n, t in loc.params.items()},
            negs,
            [(m.video_id, m.span, m.score) for m in preds],
        )

    r1, l1, n1, p1 = run()
    r2, l2, n2, p2 = run()
    assert all(np.array_equal(r1[k], r2[k]) for k in r1)
    assert all(np.array_equal(l1[k], l2[k]) for k in l1)
    assert n1 == n2 and p1 == p2


def test_loss_curves_record_both_stages():
    corpus = C.generate(SPEC)
    retr, curve = P.train_retriever(corpus, SMALL_TRAIN,
                                    model_config=R.RetrieverConfig(hidden=16, intermediate=32, heads=2),
                                    val_corpus=corpus)
    splits = {s for _, s, _ in curve}
    assert splits == {"train", "val"}
    epochs = [e for e, s, _ in curve if s == "train"]
    assert epochs == [1, 2]


def test_localizer_loss_decreases_over_epochs():
    corpus = C.generate(SPEC)
    rcfg = R.RetrieverConfig(hidden=16, intermediate=32, heads=2)
    retr, _ = P.train_retriever(corpus, SMALL_TRAIN, model_config=rcfg)
    from vcmr.localizer import LocalizerConfig
    cfg = P.TrainConfig(seed=0, retriever_epochs=2, localizer_epochs=5,
                        negatives_per_query=2, learning_rate=1e-3)
    _, curve, _ = P.train_localizer(corpus, retr, cfg, ICFG,
                                    model_config=LocalizerConfig(hidden=16, intermediate=32, heads=2))
    values = [v for _, _, v in curve]
    assert values[4] < values[0]
