"""Two-stage orchestration: train retriever, mine hard negatives, train
localizer, then retrieve-and-localize inference with combined scoring, NMS,
and the VR / SVMR / VCMR recall metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import localizer as loc_mod
from . import retriever as ret_mod
from .autodiff import Tape
from .localizer import LocalizerConfig, LocalizerModel
from .nn import MASK_NEG
from .optim import AdamW
from .retriever import RetrieverConfig, RetrieverModel
from .spans import enumerate_spans, iou, nms, top_spans


@dataclass
class TrainConfig:
    retriever_epochs: int = 30
    retriever_batch: int = 32
    localizer_epochs: int = 15
    localizer_batch: int = 32
    negatives_per_query: int = 4
    mining_pool: int = 100
    lam: float = 0.5
    gamma: float = 0.8
    temperature: float = 0.01
    learning_rate: float = 3e-3  # desk-scale default; 1e-4 at full scale
    weight_decay: float = 0.01
    use_adversarial: bool = True
    seed: int = 0

    def validate(self):
        for name in ("retriever_epochs", "retriever_batch", "localizer_epochs", "localizer_batch",
                     "negatives_per_query", "mining_pool"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class InferenceConfig:
    top_k_videos: int = 10
    moment_min_len: int = 1
    moment_max_len: int = 24
    nms_threshold: float = 0.7
    results_per_query: int = 100
    score_temperature: float = 0.01  # divisor applied to the retrieval score

    def validate(self):
        if not (1 <= self.moment_min_len <= self.moment_max_len):
            raise ValueError("moment length limits must satisfy 1 <= min <= max")
        if not (0 < self.nms_threshold <= 1):
            raise ValueError("nms_threshold must lie in (0, 1]")
        if self.top_k_videos < 1 or self.results_per_query < 1:
            raise ValueError("top_k_videos and results_per_query must be positive")


@dataclass
class MomentPrediction:
    video_id: str
    span: tuple[int, int]
    score: float


@dataclass
class MetricsReport:
    vr: dict[str, float] = field(default_factory=dict)
    svmr: dict[str, float] = field(default_factory=dict)
    vcmr: dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        return {"vr": dict(self.vr), "svmr": dict(self.svmr), "vcmr": dict(self.vcmr)}


VR_KS = (1, 5, 10, 100)
MOMENT_KS = (1, 10, 100)
MOMENT_PS = (0.5, 0.7)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# stage 1: retriever


def _param_grads(tape, params):
    return {name: tape.grad(t) for name, t in params.items()}


def train_retriever(corpus, config: TrainConfig, model_config: RetrieverConfig | None = None,
                    val_corpus=None, epochs=None):
    """Train the retriever with in-batch contrastive learning.

    Returns (model, loss_curve) where loss_curve is a list of
    (epoch, split, value) rows; validation rows hold VR R@10. The model is
    left at the epoch with the best validation R@10 (or the final epoch when
    no validation corpus is given). Deterministic given config.seed.
    """
    config.validate()
    model = RetrieverModel(corpus.d_txt, corpus.d_img, corpus.d_sub, model_config, seed=config.seed)
    opt = AdamW(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    n_epochs = config.retriever_epochs if epochs is None else epochs
    curve = []
    best = None  # (r10, state)
    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(len(corpus.queries))
        losses = []
        for start in range(0, len(order), config.retriever_batch):
            idx = order[start : start + config.retriever_batch]
            if len(idx) < 2:
                continue
            batch = ret_mod.make_batch(corpus, idx)
            try:
                with Tape() as tape:
                    loss = ret_mod.contrastive_loss(
                        model, batch, temperature=config.temperature, lam=config.lam,
                        use_subtitles=corpus.has_subtitles,
                    )
                    tape.backward(loss)
                    grads = _param_grads(tape, model.params)
            except ad.NonFiniteError as exc:
                raise DivergenceError(
                    f"retriever loss became non-finite at epoch {epoch}, step {start // config.retriever_batch}"
                ) from exc
            losses.append(loss.item())
            opt.step(grads)
        curve.append((epoch, "train", float(np.mean(losses)) if losses else 0.0))
        if val_corpus is not None:
            report = evaluate_retrieval(model, val_corpus)
            r10 = report.vr["R@10"]
            curve.append((epoch, "val", r10))
            if best is None or r10 > best[0]:
                best = (r10, model.params.state_dict())
    if best is not None:
        model.params.load_state_dict(best[1])
    return model, curve


def rank_videos(model: RetrieverModel, corpus, query, index=None):
    ranked = ret_mod.retrieve_topk(model, corpus, query, k=len(corpus.videos), index=index)
    return ranked


def evaluate_retrieval(model: RetrieverModel, corpus, ks=VR_KS):
    index = ret_mod.encode_corpus(model, corpus)
    rankings = {
        q.id: [vid for vid, _ in rank_videos(model, corpus, q, index=index)] for q in corpus.queries
    }
    return evaluate(rankings, corpus, task="vr", ks=ks)


# ---------------------------------------------------------------------------
# hard-negative mining


def mine_hard_negatives(model: RetrieverModel, corpus, config: TrainConfig, index=None):
    """Per query: rank the corpus, drop the ground-truth video, then sample
    `negatives_per_query` uniformly without replacement from the top of the
    ranking (pool capped at `mining_pool`). Seed-deterministic."""
    n = config.negatives_per_query
    if len(corpus.videos) < n + 1:
        raise ValueError(f"corpus of {len(corpus.videos)} videos cannot supply {n} negatives per query")
    if index is None:
        index = ret_mod.encode_corpus(model, corpus)
    out = {}
    for qi, query in enumerate(corpus.queries):
        ranked = [vid for vid, _ in rank_videos(model, corpus, query, index=index) if vid != query.target_video]
        pool = ranked[: min(config.mining_pool, len(ranked))]
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2, qi)))
        picks = rng.choice(len(pool), size=n, replace=False)
        out[query.id] = [pool[i] for i in sorted(picks)]
    return out


# ---------------------------------------------------------------------------
# stage 2: localizer


def _localizer_rows(corpus, queries, negatives):
    """Stack (query, video) rows: for each query its ground-truth video first,
    then its mined negative videos."""
    rows = []  # (query, video)
    groups = []  # per query: list of row indices, gt first
    for q in queries:
        vids = [q.target_video] + list(negatives.get(q.id, ()))
        start = len(rows)
        rows.extend((q, corpus.video(v)) for v in vids)
        groups.append(list(range(start, len(rows))))
    r = len(rows)
    max_tok = max(q.tokens.shape[0] for q, _ in rows)
    n = max(len(v) for _, v in rows)
    tokens = np.zeros((r, max_tok, corpus.d_txt))
    token_mask = np.zeros((r, max_tok))
    images = np.zeros((r, n, corpus.d_img))
    subs = np.zeros((r, n, corpus.d_sub))
    clip_mask = np.zeros((r, n))
    for i, (q, v) in enumerate(rows):
        lt = q.tokens.shape[0]
        tokens[i, :lt] = q.tokens
        token_mask[i, :lt] = 1.0
        lv = len(v)
        images[i, :lv] = v.image_matrix()
        subs[i, :lv] = v.subtitle_matrix(corpus.d_sub)
        clip_mask[i, :lv] = 1.0
    return rows, groups, tokens, token_mask, images, subs, clip_mask


def localizer_batch_loss(model: LocalizerModel, corpus, queries, negatives, config: TrainConfig,
                         icfg: InferenceConfig):
    """Boundary loss (shared-norm across the positive and negative videos)
    plus the adversarial moment-classification loss for one batch."""
    rows, groups, tokens, token_mask, images, subs, clip_mask = _localizer_rows(corpus, queries, negatives)
    r, n = clip_mask.shape
    with_adv = config.use_adversarial and config.gamma != 0.0
    fwd = model.forward_rows(tokens, token_mask, images, subs, clip_mask=clip_mask, with_adv=with_adv)
    l_st, l_ed = fwd["l_st"], fwd["l_ed"]

    q_count = len(groups)
    member = np.zeros((q_count, r * n))
    pos_st_idx = np.zeros(q_count, dtype=np.intp)
    pos_ed_idx = np.zeros(q_count, dtype=np.intp)
    for gi, (query, row_ids) in enumerate(zip(queries, groups)):
        scope = row_ids if model.config.shared_norm else row_ids[:1]
        for ri in scope:
            member[gi, ri * n : (ri + 1) * n] = clip_mask[ri]
        gt_row = row_ids[0]
        pos_st_idx[gi] = gt_row * n + query.span[0]
        pos_ed_idx[gi] = gt_row * n + query.span[1]

    boundary = 0.0
    for scores, pos_idx in ((l_st, pos_st_idx), (l_ed, pos_ed_idx)):
        flat = ad.reshape(scores, (r * n,))
        logits = ad.add(ad.reshape(flat, (1, r * n)), (1.0 - member) * MASK_NEG)
        lse = ad.logsumexp(logits, axis=1)
        picked = ad.take(flat, pos_idx)
        boundary = ad.add(boundary, ad.mean(ad.sub(lse, picked)))

    if not with_adv:
        return boundary

    positives = []
    negatives_items = []
    for query, row_ids in zip(queries, groups):
        gt_row = row_ids[0]
        video_len = int(clip_mask[gt_row].sum())
        for span in loc_mod.sample_positive_spans(query.span, video_len):
            positives.append((gt_row, span))
        for ri in row_ids[1:]:
            vlen = int(clip_mask[ri].sum())
            mined = top_spans(
                l_st.data[ri, :vlen], l_ed.data[ri, :vlen],
                icfg.moment_min_len, icfg.moment_max_len, k=5,
            )
            negatives_items.extend((ri, span) for span in mined)
    if not negatives_items:
        return boundary
    adv = loc_mod.adversarial_loss(model, fwd["adv_out"], positives, negatives_items)
    return loc_mod.total_loss(boundary, adv, gamma=config.gamma)


def train_localizer(corpus, retriever_model: RetrieverModel, config: TrainConfig, icfg: InferenceConfig,
                    model_config: LocalizerConfig | None = None, negatives=None, epochs=None):
    """Second training stage. Hard negatives are mined once from the trained
    retriever and stay fixed across epochs; the adversarial negative moments
    inside each step are re-mined from the current boundary scores."""
    config.validate()
    icfg.validate()
    if negatives is None:
        negatives = mine_hard_negatives(retriever_model, corpus, config)
    model = LocalizerModel(corpus.d_txt, corpus.d_img, corpus.d_sub, model_config, seed=config.seed + 1)
    opt = AdamW(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(3,)))
    curve = []
    n_epochs = config.localizer_epochs if epochs is None else epochs
    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(len(corpus.queries))
        losses = []
        for start in range(0, len(order), config.localizer_batch):
            idx = order[start : start + config.localizer_batch]
            batch_queries = [corpus.queries[i] for i in idx]
            try:
                with Tape() as tape:
                    loss = localizer_batch_loss(model, corpus, batch_queries, negatives, config, icfg)
                    tape.backward(loss)
                    grads = _param_grads(tape, model.params)
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"localizer loss became non-finite at epoch {epoch}") from exc
            losses.append(loss.item())
            opt.step(grads)
        curve.append((epoch, "train", float(np.mean(losses)) if losses else 0.0))
    return model, curve, negatives


# ---------------------------------------------------------------------------
# inference


def localize_scores(model: LocalizerModel, query, videos, d_sub):
    """Boundary scores for one query over several videos; no gradients."""
    r = len(videos)
    max_tok = query.tokens.shape[0]
    n = max(len(v) for v in videos)
    tokens = np.repeat(query.tokens[None], r, axis=0)
    token_mask = np.ones((r, max_tok))
    images = np.zeros((r, n, videos[0].clips[0].image.shape[0]))
    subs = np.zeros((r, n, d_sub))
    clip_mask = np.zeros((r, n))
    for i, v in enumerate(videos):
        lv = len(v)
        images[i, :lv] = v.image_matrix()
        subs[i, :lv] = v.subtitle_matrix(d_sub)
        clip_mask[i, :lv] = 1.0
    fwd = model.forward_rows(tokens, token_mask, images, subs, clip_mask=clip_mask, with_adv=False)
    return fwd["l_st"].data, fwd["l_ed"].data


def _moments_for_video(video_id, n_clips, retrieval_score, l_st, l_ed, icfg: InferenceConfig):
    cands = enumerate_spans(n_clips, icfg.moment_min_len, icfg.moment_max_len)
    base = retrieval_score / icfg.score_temperature
    moments = [(span, base + float(l_st[span[0]] + l_ed[span[1]])) for span in cands]
    kept = nms(moments, icfg.nms_threshold, keep=icfg.results_per_query)
    return [MomentPrediction(video_id=video_id, span=span, score=score) for span, score in kept]


def infer(retriever_model: RetrieverModel, localizer_model: LocalizerModel, corpus, query,
          icfg: InferenceConfig, index=None):
    """Two-stage inference: retrieve top-K videos, score every admissible
    span as retrieval/temperature + start + end, NMS per video, then merge."""
    icfg.validate()
    ranked = ret_mod.retrieve_topk(
        retriever_model, corpus, query, k=icfg.top_k_videos, index=index,
        use_subtitles=corpus.has_subtitles,
    )
    videos = [corpus.video(vid) for vid, _ in ranked]
    l_st, l_ed = localize_scores(localizer_model, query, videos, corpus.d_sub)
    preds = []
    for i, (vid, score) in enumerate(ranked):
        n_clips = len(videos[i])
        preds.extend(_moments_for_video(vid, n_clips, score, l_st[i, :n_clips], l_ed[i, :n_clips], icfg))
    preds.sort(key=lambda m: (-m.score, m.video_id, m.span))
    return preds[: icfg.results_per_query]


def infer_single_video(retriever_model: RetrieverModel, localizer_model: LocalizerModel, corpus, query,
                       icfg: InferenceConfig, index=None):
    """Moment predictions restricted to the query's ground-truth video."""
    icfg.validate()
    video = corpus.video(query.target_video)
    if index is not None and query.target_video in index:
        enc = index[query.target_video]
    else:
        enc = ret_mod.encode_video(retriever_model, video)
    reps = ret_mod.encode_query(retriever_model, query)
    score = ret_mod.score_video(reps, enc, use_subtitles=corpus.has_subtitles).score
    l_st, l_ed = localize_scores(localizer_model, query, [video], corpus.d_sub)
    preds = _moments_for_video(video.id, len(video), score, l_st[0], l_ed[0], icfg)
    preds.sort(key=lambda m: (-m.score, m.video_id, m.span))
    return preds[: icfg.results_per_query]


# ---------------------------------------------------------------------------
# metrics


def _recall_vr(rankings, corpus, ks):
    hits = {k: 0 for k in ks}
    for q in corpus.queries:
        ranked = rankings.get(q.id)
        if not ranked:
            warnings.warn(f"query {q.id} has no ranking; counted as miss")
            continue
        for k in ks:
            if q.target_video in ranked[:k]:
                hits[k] += 1
    total = len(corpus.queries)
    return {f"R@{k}": 100.0 * hits[k] / total for k in ks}


def _recall_moments(predictions, corpus, ks, ps):
    hits = {(k, p): 0 for k in ks for p in ps}
    for q in corpus.queries:
        preds = predictions.get(q.id)
        if not preds:
            warnings.warn(f"query {q.id} has no predictions; counted as miss")
            continue
        for k in ks:
            top = preds[:k]
            for p in ps:
                if any(m.video_id == q.target_video and iou(m.span, q.span) >= p for m in top):
                    hits[(k, p)] += 1
    total = len(corpus.queries)
    return {f"R@{k},IoU={p}": 100.0 * hits[(k, p)] / total for k in ks for p in ps}


def evaluate(predictions, corpus, task, ks=None, ps=MOMENT_PS) -> MetricsReport:
    """task 'vr' expects per-query ranked video-id lists; 'svmr'/'vcmr'
    expect per-query ranked MomentPrediction lists (svmr predictions must
    already be restricted to the ground-truth video)."""
    report = MetricsReport()
    if task == "vr":
        report.vr = _recall_vr(predictions, corpus, ks or VR_KS)
    elif task == "svmr":
        report.svmr = _recall_moments(predictions, corpus, ks or MOMENT_KS, ps)
    elif task == "vcmr":
        report.vcmr = _recall_moments(predictions, corpus, ks or MOMENT_KS, ps)
    else:
        raise ValueError(f"unknown task {task!r}")
    return report


def evaluate_pipeline(retriever_model, localizer_model, corpus, icfg: InferenceConfig,
                      tasks=("vr", "svmr", "vcmr")) -> MetricsReport:
    """Run full inference for every query and compute all requested metrics."""
    index = ret_mod.encode_corpus(retriever_model, corpus)
    report = MetricsReport()
    if "vr" in tasks:
        rankings = {q.id: [v for v, _ in rank_videos(retriever_model, corpus, q, index=index)]
                    for q in corpus.queries}
        report.vr = evaluate(rankings, corpus, "vr").vr
    if "svmr" in tasks:
        preds = {q.id: infer_single_video(retriever_model, localizer_model, corpus, q, icfg, index=index)
                 for q in corpus.queries}
        report.svmr = evaluate(preds, corpus, "svmr").svmr
    if "vcmr" in tasks:
        preds = {q.id: infer(retriever_model, localizer_model, corpus, q, icfg, index=index)
                 for q in corpus.queries}
        report.vcmr = evaluate(preds, corpus, "vcmr").vcmr
    return report
