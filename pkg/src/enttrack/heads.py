"""Heads mapping encoder states to per-(entity, step) predictions.

Two post-conditioning heads consume an entity-independent encoding: the
concat head joins the anchor state with a summed entity embedding, and
the bilinear-attention head pools all token states weighted by their
similarity to the entity. Entity-conditioned encodings instead read each
anchor state directly, emitting class probabilities or CRF tag potentials.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .templating import TemplateEncoding
from .transformer import ForwardTrace, softmax


class HeadMode(str, Enum):
    CLASS_PROBS = "class-probs"
    TAG_POTENTIALS = "tag-potentials"


@dataclass
class HeadParams:
    """Task projection plus the optional bilinear similarity matrix.

    w_task maps the head representation (d or 2d wide) to class or tag
    scores; w_sim is only used by the attention head.
    """

    w_task: np.ndarray
    w_sim: np.ndarray | None = None


def entity_embedding(tok_emb: np.ndarray, entity_ids) -> np.ndarray:
    """Sum of the embedding rows of an entity's tokens."""
    entity_ids = np.asarray(entity_ids, dtype=np.int64)
    if entity_ids.size == 0:
        raise ValueError("entity has no tokens")
    return tok_emb[entity_ids].sum(axis=0)


def indep_logits(h_cls: np.ndarray, g_e: np.ndarray, head: HeadParams) -> np.ndarray:
    c = np.concatenate([h_cls, g_e])
    if head.w_task.shape[0] != c.shape[0]:
        raise ValueError(
            f"w_task expects width {head.w_task.shape[0]}, got {c.shape[0]} from [h_cls; g_e]"
        )
    return c @ head.w_task


def indep_backward(
    h_cls: np.ndarray, g_e: np.ndarray, head: HeadParams, d_logits: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = np.concatenate([h_cls, g_e])
    d_w_task = np.outer(c, d_logits)
    dc = head.w_task @ d_logits
    d = h_cls.shape[0]
    return dc[:d], dc[d:], d_w_task


def predict_indep(h_cls: np.ndarray, g_e: np.ndarray, head: HeadParams) -> np.ndarray:
    """Class distribution from the concatenated [anchor; entity] features."""
    return softmax(indep_logits(h_cls, g_e, head))


def attn_forward(
    X: np.ndarray, g_e: np.ndarray, head: HeadParams, valid: np.ndarray | None = None
) -> tuple[np.ndarray, dict]:
    """Bilinear-attention head: scores a_i = g_e' W_sim h_i, pooled states.

    valid masks padded positions out of the attention (True = usable).
    """
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty (positions, d_model) matrix")
    if head.w_sim is None:
        raise ValueError("attention head requires w_sim")
    key = g_e @ head.w_sim
    a = X @ key
    if valid is not None:
        a = np.where(valid, a, -np.inf)
    alpha = softmax(a)
    c = alpha @ X
    logits = c @ head.w_task
    return logits, {"X": X, "g_e": g_e, "alpha": alpha, "c": c, "key": key}


def attn_backward(
    head: HeadParams, cache: dict, d_logits: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    X, g_e, alpha, c, key = cache["X"], cache["g_e"], cache["alpha"], cache["c"], cache["key"]
    d_w_task = np.outer(c, d_logits)
    dc = head.w_task @ d_logits
    d_alpha = X @ dc
    dX = np.outer(alpha, dc)
    da = alpha * (d_alpha - float(alpha @ d_alpha))
    dX += np.outer(da, key)
    d_key = X.T @ da
    d_g_e = head.w_sim @ d_key
    d_w_sim = np.outer(g_e, d_key)
    return dX, d_g_e, d_w_sim, d_w_task


def predict_attn(
    X: np.ndarray, g_e: np.ndarray, head: HeadParams, valid: np.ndarray | None = None
) -> np.ndarray:
    """Class distribution from entity-similarity-weighted token states."""
    logits, _ = attn_forward(X, g_e, head, valid)
    return softmax(logits)


def anchor_scores(X: np.ndarray, positions, w_task: np.ndarray) -> np.ndarray:
    """Raw scores h_p W_task for each anchor position p."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= X.shape[0]):
        raise ValueError("anchor position out of range of the trace")
    return X[positions] @ w_task


def anchor_backward(
    X: np.ndarray, positions, w_task: np.ndarray, d_scores: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scatter score gradients back to a full dX and accumulate dW_task."""
    positions = np.asarray(positions, dtype=np.int64)
    dX = np.zeros_like(X)
    np.add.at(dX, positions, d_scores @ w_task.T)
    d_w_task = X[positions].T @ d_scores
    return dX, d_w_task


@dataclass
class AnchorPrediction:
    entity_index: int
    step: int
    values: np.ndarray  # class distribution or raw tag potentials


def predict_conditioned(
    trace: ForwardTrace,
    enc: TemplateEncoding,
    head: HeadParams,
    mode: HeadMode = HeadMode.CLASS_PROBS,
) -> list[AnchorPrediction]:
    """Per-anchor outputs for an entity-conditioned encoding.

    CLASS_PROBS rows are softmax-normalized; TAG_POTENTIALS rows are the
    unnormalized scores consumed by the CRF.
    """
    if not enc.anchors:
        raise ValueError("encoding has no anchors")
    X = trace.X
    if X.ndim != 2:
        raise ValueError("predict_conditioned expects a single-sequence trace")
    if len(enc.token_ids) != X.shape[0]:
        raise ValueError("trace was not computed over this encoding")
    positions = [pos for pos, _, _ in enc.anchors]
    rows = anchor_scores(X, positions, head.w_task)
    if mode is HeadMode.CLASS_PROBS:
        rows = softmax(rows, axis=-1)
    return [
        AnchorPrediction(entity_index=e, step=t, values=rows[i])
        for i, (_, e, t) in enumerate(enc.anchors)
    ]
