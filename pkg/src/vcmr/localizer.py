"""Focus-then-fuse moment localizer.

Early-fusion design with its own encoders (no parameter sharing with the
retriever): modality-specific gates emphasize query-relevant content per
channel, a fully-connected layer fuses the gated image/subtitle streams per
clip, a two-layer transformer with cross-attention to the query tokens
contextualizes the clips, and two convolutional heads emit per-clip start
and end boundary scores. Boundary training uses shared normalization across
the positive and all mined negative videos; an auxiliary adversarial branch
classifies moment features as relevant/irrelevant (never used at inference).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .nn import MASK_NEG, Params, TransformerLayer, xavier_uniform
from .spans import sample_positive_spans, top_spans  # noqa: F401  (re-exported)


@dataclass
class LocalizerConfig:
    hidden: int = 32
    intermediate: int = 128
    heads: int = 4
    max_positions: int = 64
    fusion_layers: int = 2
    use_gates: bool = True
    shared_norm: bool = True


class LocalizerModel:
    def __init__(self, d_txt, d_img, d_sub, config: LocalizerConfig | None = None, seed=0):
        self.config = config or LocalizerConfig()
        self.d_txt, self.d_img, self.d_sub = d_txt, d_img, d_sub
        d = self.config.hidden
        rng = np.random.default_rng(seed)
        p = Params()
        p.add("q_proj.w", xavier_uniform(rng, d_txt, d))
        p.add("q_proj.b", np.zeros(d))
        p.add("img_proj.w", xavier_uniform(rng, d_img, d))
        p.add("img_proj.b", np.zeros(d))
        p.add("sub_proj.w", xavier_uniform(rng, d_sub, d))
        p.add("sub_proj.b", np.zeros(d))
        p.add("pos_emb", rng.normal(0.0, 0.02, size=(self.config.max_positions, d)))
        p.add("mod_emb", rng.normal(0.0, 0.02, size=(2, d)))
        self.q_layer = TransformerLayer(p, "qtrans", d, self.config.intermediate, self.config.heads, rng)
        self.v_layer = TransformerLayer(p, "vtrans", d, self.config.intermediate, self.config.heads, rng)
        p.add("pool.w_img", xavier_uniform(rng, d, 1))
        p.add("pool.w_sub", xavier_uniform(rng, d, 1))
        p.add("gate.w_img", xavier_uniform(rng, d, d))
        p.add("gate.w_sub", xavier_uniform(rng, d, d))
        p.add("fuse.w", xavier_uniform(rng, 2 * d, d))
        p.add("fuse.b", np.zeros(d))
        self.fusion = [
            TransformerLayer(p, f"fusion{i}", d, self.config.intermediate, self.config.heads, rng, cross=True)
            for i in range(self.config.fusion_layers)
        ]
        for head in ("st", "ed"):
            p.add(f"head.{head}.k1", xavier_uniform(rng, 3 * d, d, shape=(3, d, d)))
            p.add(f"head.{head}.b1", np.zeros(d))
            p.add(f"head.{head}.k2", xavier_uniform(rng, 3 * d, d, shape=(3, d, d)))
            p.add(f"head.{head}.b2", np.zeros(d))
            p.add(f"head.{head}.w", xavier_uniform(rng, d, 1))
            p.add(f"head.{head}.b", np.zeros(1))
        self.adv_layer = TransformerLayer(p, "adv.trans", d, self.config.intermediate, self.config.heads, rng)
        p.add("adv.fc1.w", xavier_uniform(rng, d, d))
        p.add("adv.fc1.b", np.zeros(d))
        p.add("adv.fc2.w", xavier_uniform(rng, d, d))
        p.add("adv.fc2.b", np.zeros(d))
        p.add("adv.fc3.w", xavier_uniform(rng, d, 1))
        p.add("adv.fc3.b", np.zeros(1))
        self.params = p

    # -- encoders ------------------------------------------------------------

    def encode_query_batch(self, tokens, token_mask):
        """-> (token reps [B, L, D], q_img [B, D], q_sub [B, D])."""
        p = self.params
        b, length, _ = tokens.shape
        h = nn.linear(tokens, p["q_proj.w"], p["q_proj.b"])
        h = ad.add(h, ad.slice_axis(p["pos_emb"], 0, 0, length))
        h = self.q_layer(h, mask=nn.self_attention_mask(token_mask))
        valid = np.asarray(token_mask, dtype=np.float64)
        reps = []
        for w_name in ("pool.w_img", "pool.w_sub"):
            o = ad.reshape(ad.matmul(h, p[w_name]), (b, length))
            alpha = ad.softmax(ad.add(o, (1.0 - valid) * MASK_NEG), axis=-1)
            reps.append(ad.reshape(ad.matmul(ad.reshape(alpha, (b, 1, length)), h), (b, self.config.hidden)))
        return h, reps[0], reps[1]

    def encode_video_batch(self, images, subtitles, clip_mask=None):
        p = self.params
        b, n, _ = images.shape
        pos = ad.slice_axis(p["pos_emb"], 0, 0, n)
        h_img = ad.add(nn.linear(images, p["img_proj.w"], p["img_proj.b"]), pos)
        h_img = ad.add(h_img, ad.slice_axis(p["mod_emb"], 0, 0, 1))
        h_sub = ad.add(nn.linear(subtitles, p["sub_proj.w"], p["sub_proj.b"]), pos)
        h_sub = ad.add(h_sub, ad.slice_axis(p["mod_emb"], 0, 1, 2))
        seq = ad.concat([h_img, h_sub], axis=1)
        mask = None
        if clip_mask is not None:
            mask = nn.self_attention_mask(np.concatenate([clip_mask, clip_mask], axis=1))
        out = self.v_layer(seq, mask=mask)
        return ad.slice_axis(out, 1, 0, n), ad.slice_axis(out, 1, n, 2 * n)

    # -- focus-then-fuse ------------------------------------------------------

    def apply_gates(self, img_r, sub_r, q_img, q_sub):
        """Gate each clip by its modality's query representation.

        gate = l2norm((W_d * clip) . q_d); output = gate . clip. An all-zero
        query vector annihilates the stream (zero-vector normalization).
        """
        b = img_r.shape[0]
        d = self.config.hidden
        out = []
        for clips, q, w_name in ((img_r, q_img, "gate.w_img"), (sub_r, q_sub, "gate.w_sub")):
            proj = ad.matmul(clips, self.params[w_name])
            gate = ad.l2_normalize(ad.mul(proj, ad.reshape(q, (b, 1, d))))
            out.append(ad.mul(gate, clips))
        return out[0], out[1]

    def fuse_clips(self, gated_img, gated_sub):
        """Per-clip fully-connected fusion, concatenation order image-then-subtitle."""
        if gated_img.shape != gated_sub.shape:
            raise ad.ShapeError(f"gated streams disagree: {gated_img.shape} vs {gated_sub.shape}")
        both = ad.concat([gated_img, gated_sub], axis=-1)
        return nn.linear(both, self.params["fuse.w"], self.params["fuse.b"])

    def fuse_with_query(self, fused, token_reps, token_mask=None, clip_mask=None):
        """Contextualize clips with self-attention plus cross-attention to tokens."""
        b, n, _ = fused.shape
        self_mask = None if clip_mask is None else nn.self_attention_mask(clip_mask)
        cross_mask = None
        if token_mask is not None:
            cross_mask = np.repeat(np.asarray(token_mask, dtype=np.float64)[:, None, :], n, axis=1)
        x = fused
        for layer in self.fusion:
            x = layer(x, mask=self_mask, kv=token_reps, kv_mask=cross_mask)
        return x

    def boundary_scores(self, ctx):
        """-> (l_st [B, N], l_ed [B, N]); conv -> ReLU -> conv -> linear per head."""
        p = self.params
        b, n, _ = ctx.shape
        out = []
        for head in ("st", "ed"):
            h = ad.relu(ad.conv1d(ctx, p[f"head.{head}.k1"], p[f"head.{head}.b1"]))
            h = ad.conv1d(h, p[f"head.{head}.k2"], p[f"head.{head}.b2"])
            s = nn.linear(h, p[f"head.{head}.w"], p[f"head.{head}.b"])
            out.append(ad.reshape(s, (b, n)))
        return out[0], out[1]

    def adv_encode(self, fused, clip_mask=None):
        """Adversarial-branch transformer over the fused clip sequence."""
        mask = None if clip_mask is None else nn.self_attention_mask(clip_mask)
        return self.adv_layer(fused, mask=mask)

    def adv_classify(self, features):
        """Three-layer classifier head; features [S, D] -> logits [S]."""
        p = self.params
        h = ad.relu(nn.linear(features, p["adv.fc1.w"], p["adv.fc1.b"]))
        h = ad.relu(nn.linear(h, p["adv.fc2.w"], p["adv.fc2.b"]))
        logits = nn.linear(h, p["adv.fc3.w"], p["adv.fc3.b"])
        return ad.reshape(logits, (features.shape[0],))

    def forward_rows(self, tokens, token_mask, images, subs, clip_mask=None, with_adv=True):
        """Full forward over a stack of (query, video) rows.

        tokens/token_mask carry each row's owning query. Returns boundary
        scores, the fused clip sequence, and (optionally) the adversarial
        branch outputs.
        """
        token_reps, q_img, q_sub = self.encode_query_batch(tokens, token_mask)
        img_r, sub_r = self.encode_video_batch(images, subs, clip_mask=clip_mask)
        if self.config.use_gates:
            img_g, sub_g = self.apply_gates(img_r, sub_r, q_img, q_sub)
        else:
            img_g, sub_g = img_r, sub_r
        fused = self.fuse_clips(img_g, sub_g)
        ctx = self.fuse_with_query(fused, token_reps, token_mask=token_mask, clip_mask=clip_mask)
        l_st, l_ed = self.boundary_scores(ctx)
        adv_out = self.adv_encode(fused, clip_mask=clip_mask) if with_adv else None
        return {"l_st": l_st, "l_ed": l_ed, "fused": fused, "adv_out": adv_out}


# ---------------------------------------------------------------------------
# losses


def shared_norm_loss(pos_st, pos_ed, neg_st, neg_ed, gt_span):
    """Boundary cross-entropy normalized over the positive video's clips and
    all negative videos' clips jointly.

    pos_st/pos_ed: Tensor [N] for the ground-truth video; neg_st/neg_ed:
    lists of Tensors (one per negative video). Returns L_st + L_ed.
    """
    n = pos_st.shape[0]
    st, ed = gt_span
    if not (0 <= st <= ed < n):
        raise ValueError(f"ground-truth span {gt_span} out of range for {n} clips")
    total = 0.0
    for pos, negs, target in ((pos_st, neg_st, st), (pos_ed, neg_ed, ed)):
        flat = ad.concat([pos] + list(negs), axis=0) if negs else pos
        lse = ad.logsumexp(ad.reshape(flat, (1, flat.shape[0])), axis=1)
        picked = ad.take(pos, np.array([target]))
        total = ad.add(total, ad.sum_(ad.sub(lse, picked)))
    return total


def span_max_features(adv_out, items):
    """Max-pool adversarial representations over span positions.

    adv_out: Tensor [R, N, D]; items: list of (row, (st, ed)). Returns [S, D].
    """
    rows = [r for r, _ in items]
    n = adv_out.shape[1]
    sel = ad.take(adv_out, np.asarray(rows, dtype=np.intp), axis=0)
    mask = np.zeros((len(items), n))
    for i, (_, (st, ed)) in enumerate(items):
        mask[i, st : ed + 1] = 1.0
    vals, _ = ad.max_over_axis(ad.add(sel, ((1.0 - mask) * MASK_NEG)[:, :, None]), axis=1)
    return vals


def adversarial_loss(model: LocalizerModel, adv_out, positives, negatives):
    """Binary cross-entropy over span features: label 1 for spans overlapping
    the ground truth, 0 for mined negative-video moments. Mean reduction."""
    if not positives or not negatives:
        raise ValueError("adversarial loss needs at least one positive and one negative span")
    feats = span_max_features(adv_out, list(positives) + list(negatives))
    logits = model.adv_classify(feats)
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    return ad.mean(ad.bce_with_logits(logits, labels))


def total_loss(boundary, adversarial=None, gamma=0.8):
    """Weighted sum of the boundary loss and the adversarial loss."""
    if adversarial is None or gamma == 0.0:
        return boundary if adversarial is None else ad.add(boundary, ad.mul(adversarial, 0.0))
    return ad.add(boundary, ad.mul(adversarial, gamma))


def mine_negative_moments(l_st_values, l_ed_values, min_len, max_len, k=5, cap=512):
    """Top-k spans per negative video by current boundary scores.

    Value-only selection: no gradients flow through the ranking.
    """
    return top_spans(l_st_values, l_ed_values, min_len, max_len, k, cap=cap)
