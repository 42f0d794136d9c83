"""Gradient attribution over input tokens and input-ablation transforms."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import transformer
from .corpus import UNK, Process, Step
from .heads import anchor_backward
from .templating import TemplateEncoding
from .transformer import ModelConfig, TransformerParams, softmax_cross_entropy

# Coarse and Penn-style tags treated as verbs by drop_verbs.
VERB_POS_TAGS = frozenset({"V", "VERB", "VB", "VBD", "VBG", "VBN", "VBP", "VBZ", "MD"})

GRAD_NORM = "l2"
GRAD_X_INPUT = "grad-x-input"


@dataclass
class AblationSpec:
    drop_verbs: bool = False
    drop_other_entities: bool = False

    def __post_init__(self):
        if not (self.drop_verbs or self.drop_other_entities):
            raise ValueError("ablation spec must set at least one flag")


def _filter_step(step: Step, remove_tokens: frozenset[str], drop_verbs: bool) -> Step:
    kept_tokens = []
    kept_pos = [] if step.pos is not None else None
    for i, tok in enumerate(step.tokens):
        if drop_verbs and step.pos is not None and step.pos[i] in VERB_POS_TAGS:
            continue
        if tok in remove_tokens:
            continue
        kept_tokens.append(tok)
        if kept_pos is not None:
            kept_pos.append(step.pos[i])
    if not kept_tokens:
        kept_tokens = [UNK]
        kept_pos = ["X"] if kept_pos is not None else None
    return Step(text=" ".join(kept_tokens), tokens=kept_tokens, pos=kept_pos)


def ablate_for_entity(p: Process, entity_index: int, spec: AblationSpec) -> Process:
    """One process as seen when conditioning on one entity.

    Removes verb-tagged tokens and/or tokens belonging to other entities'
    names (never the conditioned entity's own tokens). Gold labels are
    untouched; steps emptied by the filter are replaced with one UNK token.
    """
    if spec.drop_verbs:
        missing = [i + 1 for i, s in enumerate(p.steps) if s.pos is None]
        if missing:
            raise ValueError(f"process {p.id!r}: drop_verbs requires pos tags (missing on step {missing[0]})")
    remove: frozenset[str] = frozenset()
    if spec.drop_other_entities:
        target = p.entities[entity_index]
        own = set(target.name_tokens)
        remove = frozenset(
            tok
            for j, e in enumerate(p.entities)
            if j != entity_index
            for tok in e.name_tokens
            if tok not in own
        )
    steps = [_filter_step(s, remove, spec.drop_verbs) for s in p.steps]
    return Process(id=p.id, steps=steps, entities=p.entities, task_kind=p.task_kind)


def ablate(corpus: list[Process], spec: AblationSpec) -> list[Process]:
    """Apply an ablation to a whole corpus.

    drop_verbs alone keeps the corpus shape. drop_other_entities is
    entity-dependent, so multi-entity processes are expanded into one
    single-entity process per conditioned entity; re-applying the same
    spec to the result is then a no-op.
    """
    out = []
    for p in corpus:
        if spec.drop_other_entities and len(p.entities) > 1:
            for i, e in enumerate(p.entities):
                view = ablate_for_entity(p, i, spec)
                out.append(
                    Process(
                        id=f"{p.id}::{e.name}",
                        steps=view.steps,
                        entities=[p.entities[i]],
                        task_kind=p.task_kind,
                    )
                )
        else:
            view = ablate_for_entity(p, 0, spec) if p.entities else Process(
                id=p.id,
                steps=[_filter_step(s, frozenset(), spec.drop_verbs) for s in p.steps],
                entities=[],
                task_kind=p.task_kind,
            )
            out.append(view)
    return out


@dataclass
class Attribution:
    """Per-position relevance of the input to one anchored prediction."""

    scores: np.ndarray
    target_class: int
    norm: str
    tokens: list[str] | None = None

    def __len__(self) -> int:
        return len(self.scores)

    def to_json(self) -> str:
        toks = self.tokens if self.tokens is not None else [""] * len(self.scores)
        return json.dumps(
            [{"token": t, "score": float(s)} for t, s in zip(toks, self.scores)]
        )

    def top_k(self, k: int = 10) -> list[tuple[int, float]]:
        order = np.argsort(-self.scores)[:k]
        return [(int(i), float(self.scores[i])) for i in order]


def attribute(
    params: TransformerParams,
    config: ModelConfig,
    w_task: np.ndarray,
    enc: TemplateEncoding,
    anchor_index: int,
    target_class: int,
    norm: str = GRAD_NORM,
    tokens: list[str] | None = None,
) -> Attribution:
    """Relevance of each input position to the loss of one anchored class.

    Scores are L2 norms of the loss gradient with respect to each position's
    summed input embedding; grad-x-input is the flagged alternative.
    """
    if norm not in (GRAD_NORM, GRAD_X_INPUT):
        raise ValueError(f"unknown attribution norm {norm!r}")
    for name, tensor in params.items():
        if not np.all(np.isfinite(tensor)):
            raise ValueError(f"parameter {name!r} contains non-finite values")
    if not np.all(np.isfinite(w_task)):
        raise ValueError("w_task contains non-finite values")
    if not 0 <= anchor_index < len(enc.anchors):
        raise ValueError(f"anchor index {anchor_index} out of range")
    trace = transformer.forward(params, config, enc.token_ids)
    pos = enc.anchors[anchor_index][0]
    logits = trace.X[pos] @ w_task
    _, d_logits = softmax_cross_entropy(logits, target_class)
    dX, _ = anchor_backward(trace.X, [pos], w_task, d_logits[None, :])
    _, d_input = transformer.backward(trace, params, d_states=dX)
    if norm == GRAD_NORM:
        scores = np.linalg.norm(d_input, axis=-1)
    else:
        E = trace.caches["E"][0]
        scores = (d_input * E).sum(axis=-1)
    return Attribution(scores=scores, target_class=target_class, norm=norm, tokens=tokens)


def save_attribution(attribution: Attribution, path: str | Path):
    Path(path).write_text(attribution.to_json(), encoding="utf-8")
