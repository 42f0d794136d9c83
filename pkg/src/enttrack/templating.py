"""Input templates that condition the encoder on a target entity.

Four entity-conditioned layouts plus the entity-independent one:

    doc-first:  [START] e [SEP] s1 [CLS] s2 [CLS] ... sT [CLS]
    doc-last:   [START] s1 [SEP] e [CLS] ... sT [SEP] e [CLS]
    sent-first: [START] e [SEP] s1 [SEP] ... [SEP] st [CLS]
    sent-last:  [START] s1 [SEP] ... [SEP] st [SEP] e [CLS]
    post:       [START] s1 [SEP] ... [SEP] st [CLS]        (no entity)

Each [CLS] anchors the prediction for one (entity, step) pair; history
steps are joined by single [SEP] tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .corpus import CLS_ID, SEP, START, CLS, Process, Vocabulary

# Sentinel for "encode every step" (document-level variants).
ALL = None

# Anchors for entity-independent encodings carry this entity index.
NO_ENTITY = -1

DEFAULT_MAX_LEN = 512


class TemplateVariant(str, Enum):
    SENT_FIRST = "sent-first"
    SENT_LAST = "sent-last"
    DOC_FIRST = "doc-first"
    DOC_LAST = "doc-last"
    POST_COND = "post"

    @property
    def document_level(self) -> bool:
        return self in (TemplateVariant.DOC_FIRST, TemplateVariant.DOC_LAST)

    @property
    def entity_conditioned(self) -> bool:
        return self is not TemplateVariant.POST_COND


@dataclass
class TemplateEncoding:
    """A token-id sequence with [CLS] anchor positions mapped to predictions.

    anchors holds (position, entity_index, step) triples in increasing
    position order; entity_token_positions lists the index span of each
    occurrence of the conditioned entity.
    """

    token_ids: list[int]
    anchors: list[tuple[int, int, int]]
    variant: TemplateVariant
    entity_token_positions: list[list[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


# Internal token roles; protected tokens survive truncation.
_ROLE_START = "start"
_ROLE_ENTITY = "entity"
_ROLE_SEP = "sep"
_ROLE_STEP = "step"
_ROLE_CLS = "cls"


def _assemble(
    items: list[tuple[int, str, tuple | None]],
    variant: TemplateVariant,
    max_len: int,
) -> TemplateEncoding:
    """Drop oldest unprotected tokens until the sequence fits, then index."""
    if len(items) > max_len:
        protected = {_ROLE_START, _ROLE_ENTITY, _ROLE_CLS}
        budget = len(items) - max_len
        kept = []
        for item in items:
            if budget > 0 and item[1] not in protected:
                budget -= 1
                continue
            kept.append(item)
        if budget > 0:
            raise ValueError(
                f"encoding cannot fit in {max_len} positions without dropping anchors or entity tokens"
            )
        items = kept
    token_ids = [tid for tid, _, _ in items]
    anchors = [(i, meta[0], meta[1]) for i, (_, role, meta) in enumerate(items) if role == _ROLE_CLS]
    entity_positions: list[list[int]] = []
    for i, (_, role, meta) in enumerate(items):
        if role == _ROLE_ENTITY:
            occurrence = meta[0]
            while len(entity_positions) <= occurrence:
                entity_positions.append([])
            entity_positions[occurrence].append(i)
    return TemplateEncoding(
        token_ids=token_ids,
        anchors=anchors,
        variant=variant,
        entity_token_positions=entity_positions,
    )


def encode_entity_conditioned(
    p: Process,
    entity_index: int,
    step: int | None,
    variant: TemplateVariant,
    v: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
) -> TemplateEncoding:
    """Build one entity-conditioned encoding.

    step is ALL for document-level variants (one anchor per step) and a
    1-based step number for sentence-level variants (single anchor).
    """
    if variant is TemplateVariant.POST_COND:
        raise ValueError("post-conditioned encodings carry no entity; use encode_post_conditioned")
    if not 0 <= entity_index < len(p.entities):
        raise ValueError(f"process {p.id!r} has no entity index {entity_index}")
    if variant.document_level:
        if step is not ALL:
            raise ValueError(f"{variant.value} encodes all steps; pass step=ALL")
    else:
        if step is ALL or not 1 <= step <= p.n_steps:
            raise ValueError(f"step {step} out of range for process {p.id!r} (T={p.n_steps})")

    entity_ids = v.encode(p.entities[entity_index].name_tokens)
    start_id, sep_id = v.encode_token(START), v.encode_token(SEP)
    cls_id = v.encode_token(CLS)
    step_ids = [v.encode(s.tokens) for s in p.steps]

    items: list[tuple[int, str, tuple | None]] = [(start_id, _ROLE_START, None)]
    occurrence = 0

    def put_entity():
        nonlocal occurrence
        for tid in entity_ids:
            items.append((tid, _ROLE_ENTITY, (occurrence,)))
        occurrence += 1

    if variant is TemplateVariant.DOC_FIRST:
        put_entity()
        items.append((sep_id, _ROLE_SEP, None))
        for t, ids in enumerate(step_ids, start=1):
            items.extend((tid, _ROLE_STEP, None) for tid in ids)
            items.append((cls_id, _ROLE_CLS, (entity_index, t)))
    elif variant is TemplateVariant.DOC_LAST:
        for t, ids in enumerate(step_ids, start=1):
            items.extend((tid, _ROLE_STEP, None) for tid in ids)
            items.append((sep_id, _ROLE_SEP, None))
            put_entity()
            items.append((cls_id, _ROLE_CLS, (entity_index, t)))
    elif variant is TemplateVariant.SENT_FIRST:
        put_entity()
        items.append((sep_id, _ROLE_SEP, None))
        for t in range(1, step + 1):
            items.extend((tid, _ROLE_STEP, None) for tid in step_ids[t - 1])
            if t < step:
                items.append((sep_id, _ROLE_SEP, None))
        items.append((cls_id, _ROLE_CLS, (entity_index, step)))
    else:  # SENT_LAST
        for t in range(1, step + 1):
            items.extend((tid, _ROLE_STEP, None) for tid in step_ids[t - 1])
            items.append((sep_id, _ROLE_SEP, None))
        put_entity()
        items.append((cls_id, _ROLE_CLS, (entity_index, step)))

    return _assemble(items, variant, max_len)


def encode_post_conditioned(
    p: Process, step: int, v: Vocabulary, max_len: int = DEFAULT_MAX_LEN
) -> TemplateEncoding:
    """Entity-independent encoding of steps 1..step with a single anchor."""
    if not 1 <= step <= p.n_steps:
        raise ValueError(f"step {step} out of range for process {p.id!r} (T={p.n_steps})")
    start_id, sep_id = v.encode_token(START), v.encode_token(SEP)
    items: list[tuple[int, str, tuple | None]] = [(start_id, _ROLE_START, None)]
    for t in range(1, step + 1):
        items.extend((tid, _ROLE_STEP, None) for tid in v.encode(p.steps[t - 1].tokens))
        if t < step:
            items.append((sep_id, _ROLE_SEP, None))
    items.append((v.encode_token(CLS), _ROLE_CLS, (NO_ENTITY, step)))
    return _assemble(items, TemplateVariant.POST_COND, max_len)


def instances_for_task(
    p: Process,
    variant: TemplateVariant,
    v: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[TemplateEncoding]:
    """All encodings a variant needs for one process.

    Sentence-level variants yield T*m encodings (entity-major order),
    document-level variants one per entity with T anchors each, and the
    post-conditioned variant T entity-independent encodings.
    """
    if variant is TemplateVariant.POST_COND:
        return [encode_post_conditioned(p, t, v, max_len) for t in range(1, p.n_steps + 1)]
    out = []
    for e in range(len(p.entities)):
        if variant.document_level:
            out.append(encode_entity_conditioned(p, e, ALL, variant, v, max_len))
        else:
            out.extend(
                encode_entity_conditioned(p, e, t, variant, v, max_len)
                for t in range(1, p.n_steps + 1)
            )
    return out


def render(enc: TemplateEncoding, v: Vocabulary) -> str:
    """Human-readable token string with anchor slots marked."""
    by_pos = {pos: (e, t) for pos, e, t in enc.anchors}
    parts = []
    for i, tid in enumerate(enc.token_ids):
        tok = v.id_to_token[tid]
        if i in by_pos:
            e, t = by_pos[i]
            tok = f"{tok}<e{e},t{t}>"
        parts.append(tok)
    return " ".join(parts)


def check_anchor_invariants(enc: TemplateEncoding):
    """Raise if anchors are out of order or not sitting on [CLS] tokens."""
    last = -1
    for pos, _, _ in enc.anchors:
        if not 0 <= pos < len(enc.token_ids):
            raise ValueError("anchor out of range")
        if enc.token_ids[pos] != CLS_ID:
            raise ValueError("anchor does not sit on a [CLS] token")
        if pos <= last:
            raise ValueError("anchors must be strictly increasing")
        last = pos
