import pytest

from enttrack.corpus import (
    CLS,
    SEP,
    START,
    EntityTrack,
    Process,
    Step,
    TaskKind,
    build_vocab,
    tokenize,
)
from enttrack.templating import (
    ALL,
    NO_ENTITY,
    TemplateVariant,
    check_anchor_invariants,
    encode_entity_conditioned,
    encode_post_conditioned,
    instances_for_task,
    render,
)


def make_process(step_texts, entity_names, task=TaskKind.RECIPES):
    steps = [Step(text=t, tokens=tokenize(t)) for t in step_texts]
    entities = [
        EntityTrack(
            name=n,
            name_tokens=tokenize(n),
            labels=[0] * len(steps) if task is TaskKind.RECIPES else ["O"] * len(steps),
        )
        for n in entity_names
    ]
    return Process(id="p", steps=steps, entities=entities, task_kind=task)


@pytest.fixture
def two_step():
    p = make_process(["boil water", "add pasta now"], ["water", "pasta"])
    return p, build_vocab([p], 1)


def toks(enc, v):
    return [v.id_to_token[i] for i in enc.token_ids]


def test_doc_first_golden_layout(two_step):
    p, v = two_step
    enc = encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v)
    assert toks(enc, v) == [
        START, "water", SEP, "boil", "water", CLS, "add", "pasta", "now", CLS,
    ]
    assert [(e, t) for _, e, t in enc.anchors] == [(0, 1), (0, 2)]
    assert [pos for pos, _, _ in enc.anchors] == [5, 9]


def test_doc_last_golden_layout(two_step):
    p, v = two_step
    enc = encode_entity_conditioned(p, 1, ALL, TemplateVariant.DOC_LAST, v)
    assert toks(enc, v) == [
        START, "boil", "water", SEP, "pasta", CLS, "add", "pasta", "now", SEP, "pasta", CLS,
    ]
    assert [(e, t) for _, e, t in enc.anchors] == [(1, 1), (1, 2)]
    # entity reinserted before every step's anchor
    assert len(enc.entity_token_positions) == 2


def test_sent_first_golden_layout(two_step):
    p, v = two_step
    enc = encode_entity_conditioned(p, 0, 2, TemplateVariant.SENT_FIRST, v)
    assert toks(enc, v) == [
        START, "water", SEP, "boil", "water", SEP, "add", "pasta", "now", CLS,
    ]
    assert enc.anchors == [(9, 0, 2)]


def test_sent_first_single_step_collapses_history(two_step):
    p, v = two_step
    enc = encode_entity_conditioned(p, 0, 1, TemplateVariant.SENT_FIRST, v)
    assert toks(enc, v) == [START, "water", SEP, "boil", "water", CLS]


def test_sent_last_golden_layout(two_step):
    p, v = two_step
    enc = encode_entity_conditioned(p, 0, 2, TemplateVariant.SENT_LAST, v)
    assert toks(enc, v) == [
        START, "boil", "water", SEP, "add", "pasta", "now", SEP, "water", CLS,
    ]


def test_sent_level_excludes_future_steps():
    p = make_process(["one alpha", "two beta", "three gamma"], ["alpha"])
    v = build_vocab([p], 1)
    enc = encode_entity_conditioned(p, 0, 2, TemplateVariant.SENT_LAST, v)
    rendered = toks(enc, v)
    assert "three" not in rendered and "gamma" not in rendered
    assert "two" in rendered


def test_post_conditioned_golden_layout(two_step):
    p, v = two_step
    enc = encode_post_conditioned(p, 1, v)
    assert toks(enc, v) == [START, "boil", "water", CLS]
    assert enc.anchors == [(3, NO_ENTITY, 1)]
    assert enc.entity_token_positions == []


def test_post_conditioned_sep_count():
    p = make_process(["a b", "c", "d e"], ["a"])
    v = build_vocab([p], 1)
    enc = encode_post_conditioned(p, 3, v)
    assert toks(enc, v).count(SEP) == 2


def test_post_conditioned_prefix_property():
    p = make_process(["a b", "c", "d e"], ["a"])
    v = build_vocab([p], 1)
    enc2 = encode_post_conditioned(p, 2, v)
    enc3 = encode_post_conditioned(p, 3, v)
    # dropping the trailing [CLS], step-2 encoding is a prefix of step-3's
    assert enc3.token_ids[: len(enc2.token_ids) - 1] == enc2.token_ids[:-1]


def test_instance_counts_sentence_level():
    p = make_process(["s one", "s two", "s three"], ["e1", "e2"])
    v = build_vocab([p], 1)
    encs = instances_for_task(p, TemplateVariant.SENT_FIRST, v)
    assert len(encs) == 6  # T x m
    assert all(len(e.anchors) == 1 for e in encs)


def test_instance_counts_document_level():
    p = make_process(["s one", "s two", "s three"], ["e1", "e2"])
    v = build_vocab([p], 1)
    encs = instances_for_task(p, TemplateVariant.DOC_FIRST, v)
    assert len(encs) == 2
    assert all(len(e.anchors) == 3 for e in encs)


def test_instance_counts_post_cond():
    p = make_process(["s one", "s two", "s three"], ["e1", "e2"])
    v = build_vocab([p], 1)
    encs = instances_for_task(p, TemplateVariant.POST_COND, v)
    assert len(encs) == 3


def test_anchor_label_bijection():
    p = make_process(["s one", "s two", "s three"], ["e1", "e2"])
    v = build_vocab([p], 1)
    for variant in (TemplateVariant.SENT_FIRST, TemplateVariant.SENT_LAST,
                    TemplateVariant.DOC_FIRST, TemplateVariant.DOC_LAST):
        encs = instances_for_task(p, variant, v)
        slots = [(e, t) for enc in encs for _, e, t in enc.anchors]
        expected = {(e, t) for e in range(2) for t in range(1, 4)}
        assert len(slots) == len(expected)
        assert set(slots) == expected


def test_causal_visibility_doc_first():
    p = make_process(["one alpha", "two beta", "three gamma"], ["alpha"])
    v = build_vocab([p], 1)
    enc = encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v)
    rendered = toks(enc, v)
    for anchor_idx, (pos, _, t) in enumerate(enc.anchors):
        for later_step in p.steps[t:]:
            for tok in later_step.tokens:
                later_positions = [i for i, r in enumerate(rendered) if r == tok]
                assert all(i > pos for i in later_positions), (t, tok)


def test_entity_presence(two_step):
    p, v = two_step
    for variant in (TemplateVariant.SENT_FIRST, TemplateVariant.SENT_LAST,
                    TemplateVariant.DOC_FIRST, TemplateVariant.DOC_LAST):
        step = ALL if variant.document_level else 1
        enc = encode_entity_conditioned(p, 1, step, variant, v)
        assert enc.entity_token_positions
        for occ in enc.entity_token_positions:
            assert [v.id_to_token[enc.token_ids[i]] for i in occ] == ["pasta"]
    post = encode_post_conditioned(p, 1, v)
    assert post.entity_token_positions == []


def test_anchor_invariants_hold(two_step):
    p, v = two_step
    for variant in TemplateVariant:
        encs = instances_for_task(p, variant, v)
        for enc in encs:
            check_anchor_invariants(enc)


def test_multiword_entity_inserted_verbatim():
    p = make_process(["add olive oil"], ["olive oil"])
    v = build_vocab([p], 1)
    enc = encode_entity_conditioned(p, 0, 1, TemplateVariant.SENT_FIRST, v)
    assert toks(enc, v)[:4] == [START, "olive", "oil", SEP]
    assert enc.entity_token_positions == [[1, 2]]


def test_truncation_preserves_anchors_and_entity():
    long_steps = [f"word{i} filler{i} extra{i} pad{i}" for i in range(6)]
    p = make_process(long_steps, ["word0"])
    v = build_vocab([p], 1)
    full = encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v)
    cap = len(full.token_ids) - 5
    enc = encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v, max_len=cap)
    assert len(enc.token_ids) == cap
    assert len(enc.anchors) == 6
    check_anchor_invariants(enc)
    assert enc.token_ids[0] == v.encode_token(START)
    assert enc.entity_token_positions  # conditioned entity span survives


def test_truncation_impossible_raises():
    p = make_process(["a b c"], ["a"])
    v = build_vocab([p], 1)
    with pytest.raises(ValueError, match="cannot fit"):
        encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v, max_len=2)


def test_step_out_of_range_and_bad_entity(two_step):
    p, v = two_step
    with pytest.raises(ValueError, match="entity"):
        encode_entity_conditioned(p, 5, 1, TemplateVariant.SENT_FIRST, v)
    with pytest.raises(ValueError, match="out of range"):
        encode_entity_conditioned(p, 0, 3, TemplateVariant.SENT_FIRST, v)
    with pytest.raises(ValueError, match="out of range"):
        encode_post_conditioned(p, 0, v)


def test_render_marks_anchors(two_step):
    p, v = two_step
    enc = encode_post_conditioned(p, 1, v)
    out = render(enc, v)
    assert out.startswith(START)
    assert "<e-1,t1>" in out
