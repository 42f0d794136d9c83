"""Small trainable transformer encoder with explicit backward passes.

Pre-normalization residual blocks, GELU feed-forward layers, learned
absolute position embeddings, and a tied-nothing linear LM head. The
forward pass caches activations so gradients for every parameter tensor
can be computed by hand-written reverse passes; the finite-difference
suite in the tests is the correctness oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
INIT_SCALE = 0.02
MASK_FILL = -1e30


class MaskMode(str, Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


class Precision(str, Enum):
    F32 = "f32"
    F64 = "f64"


class UnsupportedObjective(ValueError):
    """Objective undefined for the configured masking mode."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_positions: int = 512
    mask_mode: MaskMode = MaskMode.CAUSAL
    dropout: float = 0.0
    precision: Precision = Precision.F32

    def __post_init__(self):
        self.mask_mode = MaskMode(self.mask_mode)
        self.precision = Precision(self.precision)
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff) < 1:
            raise ValueError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def dtype(self):
        return np.float64 if self.precision is Precision.F64 else np.float32

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_positions": self.max_positions,
            "mask_mode": self.mask_mode.value,
            "dropout": self.dropout,
            "precision": self.precision.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Parameter bundles are plain name->array dicts so optimizers and the
# checkpoint writer can treat every tensor uniformly.
TransformerParams = dict[str, np.ndarray]


def param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        prefix = f"l{i}."
        names += [prefix + n for n in (
            "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
            "attn.wv", "attn.bv", "attn.wo", "attn.bo",
            "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
        )]
    names += ["lnf.g", "lnf.b", "lm_head"]
    return names


def init_params(config: ModelConfig, rng: np.random.Generator) -> TransformerParams:
    """Fresh parameters: N(0, 0.02) weights, zero biases, unit layer-norm gains."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    dt = config.dtype

    def w(*shape):
        return (rng.normal(0.0, INIT_SCALE, size=shape)).astype(dt)

    params: TransformerParams = {
        "tok_emb": w(v, d),
        "pos_emb": w(config.max_positions, d),
    }
    for i in range(config.n_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=dt)
        params[p + "ln1.b"] = np.zeros(d, dtype=dt)
        params[p + "attn.wq"] = w(d, d)
        params[p + "attn.bq"] = np.zeros(d, dtype=dt)
        params[p + "attn.wk"] = w(d, d)
        params[p + "attn.bk"] = np.zeros(d, dtype=dt)
        params[p + "attn.wv"] = w(d, d)
        params[p + "attn.bv"] = np.zeros(d, dtype=dt)
        params[p + "attn.wo"] = w(d, d)
        params[p + "attn.bo"] = np.zeros(d, dtype=dt)
        params[p + "ln2.g"] = np.ones(d, dtype=dt)
        params[p + "ln2.b"] = np.zeros(d, dtype=dt)
        params[p + "ffn.w1"] = w(d, f)
        params[p + "ffn.b1"] = np.zeros(f, dtype=dt)
        params[p + "ffn.w2"] = w(f, d)
        params[p + "ffn.b2"] = np.zeros(d, dtype=dt)
    params["lnf.g"] = np.ones(d, dtype=dt)
    params["lnf.b"] = np.zeros(d, dtype=dt)
    params["lm_head"] = w(d, v)
    return params


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Scalar cross-entropy of one row of logits and its exact gradient."""
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad


def _gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u / np.sqrt(2.0)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u / np.sqrt(2.0))) + u * np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


@dataclass
class ForwardTrace:
    """Activations of one forward pass, enough for exact backpropagation."""

    config: ModelConfig
    ids: np.ndarray                 # (B, T) int64
    pad_mask: np.ndarray            # (B, T) bool, True = real token
    states: np.ndarray              # (B, T, d) final representations
    lm_logits: np.ndarray           # (B, T, V)
    hidden: list[np.ndarray]        # per-layer post-block states
    caches: dict | None             # None when cache=False
    single: bool                    # input was a single sequence

    @property
    def X(self) -> np.ndarray:
        return self.states[0] if self.single else self.states

    @property
    def logits(self) -> np.ndarray:
        return self.lm_logits[0] if self.single else self.lm_logits


def _as_batch(token_ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(token_ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ValueError("token_ids must be a sequence or a batch of sequences")


def forward(
    params: TransformerParams,
    config: ModelConfig,
    token_ids,
    pad_mask: np.ndarray | None = None,
    cache: bool = True,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> ForwardTrace:
    """Run the encoder over one sequence or a padded batch.

    pad_mask marks real tokens (True); padded key positions are excluded
    from attention and the LM loss. Dropout is active only when train is
    set, config.dropout > 0, and an rng is supplied.
    """
    ids, single = _as_batch(token_ids)
    B, T = ids.shape
    if T > config.max_positions:
        raise ValueError(f"input length {T} exceeds max_positions {config.max_positions}")
    if T == 0:
        raise ValueError("empty input")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    if pad_mask is None:
        keep = np.ones((B, T), dtype=bool)
    else:
        keep = np.asarray(pad_mask, dtype=bool)
        if single and keep.ndim == 1:
            keep = keep[None, :]
        if keep.shape != (B, T):
            raise ValueError("pad_mask shape mismatch")

    dt = config.dtype
    H = config.n_heads
    hd = config.d_model // H
    drop_p = config.dropout if (train and rng is not None) else 0.0

    # Additive attention bias: 0 for visible pairs, MASK_FILL otherwise.
    bias = np.zeros((B, 1, T, T), dtype=dt)
    if config.mask_mode is MaskMode.CAUSAL:
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        bias[:, :, causal] = MASK_FILL
    bias = np.where(keep[:, None, None, :], bias, dt(MASK_FILL))

    x = params["tok_emb"][ids] + params["pos_emb"][:T][None, :, :]
    E = x.copy()
    layer_caches = []
    hidden = []
    for i in range(config.n_layers):
        p = f"l{i}."
        a, ln1_cache = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = a @ params[p + "attn.wq"] + params[p + "attn.bq"]
        k = a @ params[p + "attn.wk"] + params[p + "attn.bk"]
        v = a @ params[p + "attn.wv"] + params[p + "attn.bv"]
        Q = q.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        K = k.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        V = v.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        S = Q @ K.transpose(0, 1, 3, 2) / np.sqrt(hd) + bias
        P = softmax(S, axis=-1)
        O = (P @ V).transpose(0, 2, 1, 3).reshape(B, T, config.d_model)
        attn_out = O @ params[p + "attn.wo"] + params[p + "attn.bo"]
        if drop_p > 0.0:
            m1 = (rng.random(attn_out.shape) >= drop_p).astype(dt) / (1.0 - drop_p)
            attn_out = attn_out * m1
        else:
            m1 = None
        x = x + attn_out
        f, ln2_cache = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = f @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        g_act = _gelu(u)
        ffn_out = g_act @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        if drop_p > 0.0:
            m2 = (rng.random(ffn_out.shape) >= drop_p).astype(dt) / (1.0 - drop_p)
            ffn_out = ffn_out * m2
        else:
            m2 = None
        x = x + ffn_out
        hidden.append(x)
        if cache:
            layer_caches.append(
                {"a": a, "ln1": ln1_cache, "P": P, "Q": Q, "K": K, "V": V, "O": O,
                 "ln2": ln2_cache, "f": f, "u": u, "g_act": g_act, "m1": m1, "m2": m2}
            )
    states, lnf_cache = _layer_norm(x, params["lnf.g"], params["lnf.b"])
    lm_logits = states @ params["lm_head"]
    caches = None
    if cache:
        caches = {"E": E, "layers": layer_caches, "lnf": lnf_cache}
    return ForwardTrace(
        config=config, ids=ids, pad_mask=keep, states=states, lm_logits=lm_logits,
        hidden=hidden, caches=caches, single=single,
    )


def backward(
    trace: ForwardTrace,
    params: TransformerParams,
    d_states: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> tuple[TransformerParams, np.ndarray]:
    """Exact reverse pass from upstream gradients on states and/or LM logits.

    Returns gradients for every parameter tensor plus the gradient with
    respect to the summed input embeddings, rank-matched to the input.
    """
    if trace.caches is None:
        raise ValueError("forward was run without cache=True; gradients unavailable")
    config = trace.config
    B, T = trace.ids.shape
    d, H = config.d_model, config.n_heads
    hd = d // H
    dt = config.dtype

    def lift(g):
        if g is None:
            return None
        g = np.asarray(g, dtype=dt)
        return g[None, ...] if (trace.single and g.ndim == 2) else g

    d_states = lift(d_states)
    d_logits = lift(d_logits)
    dX = np.zeros_like(trace.states)
    grads: TransformerParams = {name: np.zeros_like(params[name]) for name in params}
    if d_states is not None:
        dX = dX + d_states
    if d_logits is not None:
        dX = dX + d_logits @ params["lm_head"].T
        grads["lm_head"] = np.einsum("btd,btv->dv", trace.states, d_logits).astype(dt)

    dx, dg, db = _layer_norm_backward(dX, trace.caches["lnf"], params["lnf.g"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for i in range(config.n_layers - 1, -1, -1):
        p = f"l{i}."
        c = trace.caches["layers"][i]
        # FFN sublayer
        d_ffn = dx if c["m2"] is None else dx * c["m2"]
        grads[p + "ffn.w2"] += np.einsum("btf,btd->fd", c["g_act"], d_ffn)
        grads[p + "ffn.b2"] += d_ffn.sum(axis=(0, 1))
        du = (d_ffn @ params[p + "ffn.w2"].T) * _gelu_grad(c["u"])
        grads[p + "ffn.w1"] += np.einsum("btd,btf->df", c["f"], du)
        grads[p + "ffn.b1"] += du.sum(axis=(0, 1))
        df = du @ params[p + "ffn.w1"].T
        dxi, dg, db = _layer_norm_backward(df, c["ln2"], params[p + "ln2.g"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + dxi
        # attention sublayer
        d_attn = dx if c["m1"] is None else dx * c["m1"]
        grads[p + "attn.wo"] += np.einsum("btd,bte->de", c["O"], d_attn)
        grads[p + "attn.bo"] += d_attn.sum(axis=(0, 1))
        dO = (d_attn @ params[p + "attn.wo"].T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        dP = dO @ c["V"].transpose(0, 1, 3, 2)
        dV = c["P"].transpose(0, 1, 3, 2) @ dO
        dS = c["P"] * (dP - (dP * c["P"]).sum(axis=-1, keepdims=True))
        dQ = dS @ c["K"] / np.sqrt(hd)
        dK = dS.transpose(0, 1, 3, 2) @ c["Q"] / np.sqrt(hd)
        dq = dQ.transpose(0, 2, 1, 3).reshape(B, T, d)
        dk = dK.transpose(0, 2, 1, 3).reshape(B, T, d)
        dv = dV.transpose(0, 2, 1, 3).reshape(B, T, d)
        grads[p + "attn.wq"] += np.einsum("btd,bte->de", c["a"], dq)
        grads[p + "attn.bq"] += dq.sum(axis=(0, 1))
        grads[p + "attn.wk"] += np.einsum("btd,bte->de", c["a"], dk)
        grads[p + "attn.bk"] += dk.sum(axis=(0, 1))
        grads[p + "attn.wv"] += np.einsum("btd,bte->de", c["a"], dv)
        grads[p + "attn.bv"] += dv.sum(axis=(0, 1))
        da = dq @ params[p + "attn.wq"].T + dk @ params[p + "attn.wk"].T + dv @ params[p + "attn.wv"].T
        dxi, dg, db = _layer_norm_backward(da, c["ln1"], params[p + "ln1.g"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + dxi

    dE = dx
    np.add.at(grads["tok_emb"], trace.ids, dE)
    grads["pos_emb"][:T] += dE.sum(axis=0)
    d_input = dE[0] if trace.single else dE
    return grads, d_input


def lm_loss(trace: ForwardTrace, token_ids=None) -> float:
    """Mean next-token cross-entropy, ignoring PAD targets."""
    loss, _ = lm_loss_and_grad(trace, token_ids)
    return loss


def lm_loss_and_grad(trace: ForwardTrace, token_ids=None) -> tuple[float, np.ndarray]:
    """Next-token loss plus its gradient w.r.t. the LM logits.

    The gradient is rank-matched to the trace input and already divided by
    the number of scored positions.
    """
    if trace.config.mask_mode is not MaskMode.CAUSAL:
        raise UnsupportedObjective("next-token loss requires causal masking")
    ids = trace.ids if token_ids is None else _as_batch(token_ids)[0]
    if ids.shape != trace.ids.shape:
        raise ValueError("target ids shape mismatch")
    B, T = ids.shape
    logits = trace.lm_logits
    d_logits = np.zeros_like(logits)
    if T < 2:
        return 0.0, d_logits[0] if trace.single else d_logits
    valid = trace.pad_mask[:, 1:] & trace.pad_mask[:, :-1]
    n = int(valid.sum())
    if n == 0:
        return 0.0, d_logits[0] if trace.single else d_logits
    logp = log_softmax(logits[:, :-1, :], axis=-1)
    targets = ids[:, 1:]
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / n)
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    d_logits[:, :-1, :] = (probs - onehot) * valid[..., None] / n
    return loss, d_logits[0] if trace.single else d_logits


def save_tensors(path: str | Path, header: dict, tensors: dict[str, np.ndarray]):
    """Write a checkpoint: one-line JSON header, then float32 LE payload."""
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    head = dict(header)
    head["format_version"] = 1
    head["manifest"] = manifest
    with open(path, "wb") as f:
        f.write(json.dumps(head, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for v in tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        head = json.loads(f.readline().decode("utf-8"))
        if head.get("format_version") != 1:
            raise ValueError("unsupported checkpoint format version")
        payload = f.read()
    tensors = {}
    offset = 0
    for entry in head["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
        offset += count * 4
    if offset != len(payload):
        raise ValueError("checkpoint payload size does not match manifest")
    return head, tensors
