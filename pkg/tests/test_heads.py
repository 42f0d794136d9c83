import numpy as np
import pytest

from conftest import fd_check, make_process
from enttrack import transformer as tr
from enttrack.corpus import build_vocab
from enttrack.heads import (
    HeadMode,
    HeadParams,
    anchor_backward,
    anchor_scores,
    attn_backward,
    attn_forward,
    entity_embedding,
    indep_backward,
    indep_logits,
    predict_attn,
    predict_conditioned,
    predict_indep,
)
from enttrack.templating import ALL, TemplateVariant, encode_entity_conditioned
from enttrack.transformer import ModelConfig, softmax_cross_entropy


@pytest.fixture
def rng():
    return np.random.default_rng(13)


def test_entity_embedding_single_token(rng):
    emb = rng.normal(size=(10, 4))
    np.testing.assert_array_equal(entity_embedding(emb, [3]), emb[3])


def test_entity_embedding_sum_commutative(rng):
    emb = rng.normal(size=(10, 4))
    np.testing.assert_allclose(
        entity_embedding(emb, [2, 5]), emb[2] + emb[5], atol=1e-15
    )
    np.testing.assert_allclose(
        entity_embedding(emb, [2, 5]), entity_embedding(emb, [5, 2]), atol=1e-15
    )


def test_entity_embedding_duplicates(rng):
    emb = rng.normal(size=(10, 4))
    np.testing.assert_allclose(entity_embedding(emb, [1, 1]), 2 * emb[1], atol=1e-15)


def test_entity_embedding_empty_raises(rng):
    with pytest.raises(ValueError, match="no tokens"):
        entity_embedding(rng.normal(size=(10, 4)), [])


def test_indep_zero_w_task_uniform(rng):
    head = HeadParams(w_task=np.zeros((8, 3)))
    probs = predict_indep(rng.normal(size=4), rng.normal(size=4), head)
    np.testing.assert_allclose(probs, np.ones(3) / 3, atol=1e-15)


def test_indep_prediction_can_ignore_entity(rng):
    # both class columns share identical weights on the g_e half, so the
    # class-score difference depends on h_cls alone
    d = 4
    w = np.zeros((2 * d, 2))
    w[:d, 0] = rng.normal(size=d)
    w[:d, 1] = rng.normal(size=d)
    shared = rng.normal(size=d)
    w[d:, 0] = shared
    w[d:, 1] = shared
    head = HeadParams(w_task=w)
    h = rng.normal(size=d)
    p1 = predict_indep(h, rng.normal(size=d), head)
    p2 = predict_indep(h, rng.normal(size=d), head)
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_indep_probabilities_normalize(rng):
    for _ in range(25):
        head = HeadParams(w_task=rng.normal(size=(8, 5)))
        probs = predict_indep(rng.normal(size=4), rng.normal(size=4), head)
        assert abs(probs.sum() - 1.0) < 1e-12


def test_indep_width_mismatch(rng):
    head = HeadParams(w_task=np.zeros((7, 2)))
    with pytest.raises(ValueError, match="width"):
        predict_indep(rng.normal(size=4), rng.normal(size=4), head)


def test_attn_single_state_gets_full_weight(rng):
    d = 5
    head = HeadParams(w_task=rng.normal(size=(d, 2)), w_sim=rng.normal(size=(d, d)))
    X = rng.normal(size=(1, d))
    g = rng.normal(size=d)
    logits, cache = attn_forward(X, g, head)
    np.testing.assert_allclose(cache["alpha"], [1.0], atol=1e-15)
    np.testing.assert_allclose(cache["c"], X[0], atol=1e-15)


def test_attn_zero_w_sim_uniform_pooling(rng):
    d = 5
    head = HeadParams(w_task=rng.normal(size=(d, 2)), w_sim=np.zeros((d, d)))
    X = rng.normal(size=(7, d))
    _, cache = attn_forward(X, rng.normal(size=d), head)
    np.testing.assert_allclose(cache["alpha"], np.ones(7) / 7, atol=1e-15)
    np.testing.assert_allclose(cache["c"], X.mean(axis=0), atol=1e-14)


def test_attn_saturation_selects_single_state(rng):
    # with W_sim = I and g = ones, a_i is X[i]'s coordinate sum; shift the
    # rows so one score exceeds the rest by 40
    d = 6
    head = HeadParams(w_task=rng.normal(size=(d, 2)), w_sim=np.eye(d))
    g = np.ones(d)
    X = rng.normal(size=(4, d))
    targets = np.array([0.0, 0.0, 40.0, 0.0])
    for i in range(4):
        X[i] += (targets[i] - X[i].sum()) / d
    logits, cache = attn_forward(X, g, head)
    np.testing.assert_allclose(cache["c"], X[2], atol=1e-12)


def test_attn_invariant_to_masked_state(rng):
    d = 5
    head = HeadParams(w_task=rng.normal(size=(d, 3)), w_sim=rng.normal(size=(d, d)))
    X = rng.normal(size=(6, d))
    g = rng.normal(size=d)
    base = predict_attn(X, g, head)
    X_ext = np.vstack([X, rng.normal(size=d)])
    valid = np.array([True] * 6 + [False])
    np.testing.assert_allclose(predict_attn(X_ext, g, head, valid=valid), base, atol=1e-12)


def test_predict_conditioned_rows_and_modes(rng):
    p = make_process(["mix a b", "pour a"], ["a"])
    v = build_vocab([p], 1)
    cfg = ModelConfig(vocab_size=len(v), d_model=8, n_heads=2, n_layers=1, d_ff=12,
                      max_positions=32, precision="f64")
    params = tr.init_params(cfg, rng)
    enc = encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v)
    trace = tr.forward(params, cfg, enc.token_ids)
    head = HeadParams(w_task=rng.normal(size=(8, 5)))
    probs = predict_conditioned(trace, enc, head, HeadMode.CLASS_PROBS)
    pots = predict_conditioned(trace, enc, head, HeadMode.TAG_POTENTIALS)
    assert [(r.entity_index, r.step) for r in probs] == [(0, 1), (0, 2)]
    assert len(probs) == len(enc.anchors)
    for pr, po in zip(probs, pots):
        e = np.exp(po.values - po.values.max())
        np.testing.assert_allclose(pr.values, e / e.sum(), atol=1e-12)
        assert abs(pr.values.sum() - 1) < 1e-9


def test_conditioned_potentials_causal_under_future_edits(rng):
    p1 = make_process(["mix a b", "pour a", "rest now"], ["a"])
    p2 = make_process(["mix a b", "pour a", "boil b"], ["a"])
    v = build_vocab([p1, p2], 1)
    cfg = ModelConfig(vocab_size=len(v), d_model=8, n_heads=2, n_layers=2, d_ff=12,
                      max_positions=64, precision="f64")
    params = tr.init_params(cfg, rng)
    head = HeadParams(w_task=rng.normal(size=(8, 5)))
    rows = {}
    for key, p in (("a", p1), ("b", p2)):
        enc = encode_entity_conditioned(p, 0, ALL, TemplateVariant.DOC_FIRST, v)
        trace = tr.forward(params, cfg, enc.token_ids)
        rows[key] = predict_conditioned(trace, enc, head, HeadMode.TAG_POTENTIALS)
    for t in (0, 1):  # steps 1 and 2 precede the edited step 3
        np.testing.assert_array_equal(rows["a"][t].values, rows["b"][t].values)


def test_anchor_out_of_range(rng):
    X = rng.normal(size=(4, 8))
    with pytest.raises(ValueError, match="out of range"):
        anchor_scores(X, [7], rng.normal(size=(8, 2)))


def test_indep_backward_fd(rng):
    d, k = 5, 3
    h = rng.normal(size=d)
    g = rng.normal(size=d)
    head = HeadParams(w_task=rng.normal(size=(2 * d, k)))
    target = 1

    def loss_fn():
        return softmax_cross_entropy(indep_logits(h, g, head), target)[0]

    _, d_logits = softmax_cross_entropy(indep_logits(h, g, head), target)
    dh, dg, dw = indep_backward(h, g, head, d_logits)
    params = {"h": h, "g": g, "w": head.w_task}
    analytic = {"h": dh, "g": dg, "w": dw}
    fd_check(loss_fn, params, analytic, max_entries=6)


def test_attn_backward_fd(rng):
    d, k, m = 5, 3, 4
    X = rng.normal(size=(m, d))
    g = rng.normal(size=d)
    head = HeadParams(w_task=rng.normal(size=(d, k)), w_sim=rng.normal(size=(d, d)))
    target = 2

    def loss_fn():
        logits, _ = attn_forward(X, g, head)
        return softmax_cross_entropy(logits, target)[0]

    logits, cache = attn_forward(X, g, head)
    _, d_logits = softmax_cross_entropy(logits, target)
    dX, dg, dws, dwt = attn_backward(head, cache, d_logits)
    params = {"X": X, "g": g, "w_sim": head.w_sim, "w_task": head.w_task}
    analytic = {"X": dX, "g": dg, "w_sim": dws, "w_task": dwt}
    fd_check(loss_fn, params, analytic, max_entries=6)


def test_end_to_end_gradients_through_heads(rng):
    """Loss through both post-conditioning heads back to the embeddings."""
    p = make_process(["mix a b", "pour a"], ["b a"])
    v = build_vocab([p], 1)
    cfg = ModelConfig(vocab_size=len(v), d_model=8, n_heads=2, n_layers=2, d_ff=12,
                      max_positions=32, precision="f64")
    params = tr.init_params(cfg, rng)
    ent_ids = v.encode(p.entities[0].name_tokens)
    from enttrack.templating import encode_post_conditioned

    enc = encode_post_conditioned(p, 2, v)
    pos = enc.anchors[0][0]
    w_indep = rng.normal(size=(16, 2))
    w_attn = rng.normal(size=(8, 2))
    w_sim = rng.normal(size=(8, 8))

    def make_loss(kind):
        def loss_fn():
            trace = tr.forward(params, cfg, enc.token_ids)
            g_e = entity_embedding(params["tok_emb"], ent_ids)
            if kind == "indep":
                logits = indep_logits(trace.X[pos], g_e, HeadParams(w_task=w_indep))
            else:
                logits, _ = attn_forward(trace.X, g_e, HeadParams(w_task=w_attn, w_sim=w_sim))
            return softmax_cross_entropy(logits, 1)[0]
        return loss_fn

    for kind in ("indep", "attn"):
        trace = tr.forward(params, cfg, enc.token_ids)
        g_e = entity_embedding(params["tok_emb"], ent_ids)
        if kind == "indep":
            head = HeadParams(w_task=w_indep)
            logits = indep_logits(trace.X[pos], g_e, head)
            _, d_logits = softmax_cross_entropy(logits, 1)
            dh, dg, _ = indep_backward(trace.X[pos], g_e, head, d_logits)
            dX = np.zeros_like(trace.X)
            dX[pos] = dh
        else:
            head = HeadParams(w_task=w_attn, w_sim=w_sim)
            logits, cache = attn_forward(trace.X, g_e, head)
            _, d_logits = softmax_cross_entropy(logits, 1)
            dX, dg, _, _ = attn_backward(head, cache, d_logits)
        grads, _ = tr.backward(trace, params, d_states=dX)
        np.add.at(grads["tok_emb"], np.asarray(ent_ids), dg)
        fd_check(make_loss(kind), params, grads, max_entries=4,
                 names=["tok_emb", "pos_emb", "l0.attn.wq", "l1.ffn.w2", "lnf.g"])
