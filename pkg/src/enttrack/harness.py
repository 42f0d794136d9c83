"""Training loops, configuration, checkpointing, and evaluation orchestration.

Two routes cover all model variants: entity-conditioned templates read
predictions off [CLS] anchors (class probabilities for presence bits, tag
potentials plus constrained Viterbi for state changes), while the
post-conditioned route encodes each step once and conditions on the
entity only at the head. Fine-tuning optimizes the task loss plus
lm_lambda times the next-token loss on the same inputs.

Determinism: with dropout 0 and a fixed seed, runs are reproducible in
single-threaded mode.
"""

from __future__ import annotations

import copy
import hashlib
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import crf, transformer
from .baselines import BaselineKind, majority_label, predict_baseline
from .corpus import (
    START,
    SEP,
    PAD_ID,
    Process,
    TaskKind,
    Vocabulary,
    build_vocab,
)
from .heads import (
    HeadParams,
    attn_forward,
    attn_backward,
    entity_embedding,
    indep_logits,
    indep_backward,
)
from .metrics import (
    ProParaReport,
    RecipesReport,
    SliceReport,
    score_propara,
    score_recipes,
    slice_challenges,
)
from .templating import (
    ALL,
    TemplateEncoding,
    TemplateVariant,
    encode_entity_conditioned,
    encode_post_conditioned,
)
from .transformer import MaskMode, ModelConfig, Precision, softmax_cross_entropy


class ConfigError(ValueError):
    """Invalid or incompatible run configuration."""


HEAD_CONDITIONED = "conditioned"
HEAD_INDEP = "indep"
HEAD_ATTN = "attn"
HEAD_KINDS = (HEAD_CONDITIONED, HEAD_INDEP, HEAD_ATTN)

# CLI spelling -> (template variant, head kind).
VARIANT_CHOICES = {
    "sent-first": (TemplateVariant.SENT_FIRST, HEAD_CONDITIONED),
    "sent-last": (TemplateVariant.SENT_LAST, HEAD_CONDITIONED),
    "doc-first": (TemplateVariant.DOC_FIRST, HEAD_CONDITIONED),
    "doc-last": (TemplateVariant.DOC_LAST, HEAD_CONDITIONED),
    "post-indep": (TemplateVariant.POST_COND, HEAD_INDEP),
    "post-attn": (TemplateVariant.POST_COND, HEAD_ATTN),
}


@dataclass
class TrainConfig:
    task: str = "recipes"
    variant: str = "doc-first"
    head: str = HEAD_CONDITIONED
    lm_lambda: float = 0.5
    lr: float = 3e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 1.0
    patience: int = 0
    max_len: int = 512
    min_count: int = 1
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_positions: int = 512
    dropout: float = 0.0
    precision: str = "f32"
    mask_mode: str = "causal"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in ("recipes", "propara"):
            raise ConfigError(f"unknown task {self.task!r}")
        try:
            variant = TemplateVariant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown template variant {self.variant!r}") from None
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.head!r}")
        if variant is TemplateVariant.POST_COND and self.head == HEAD_CONDITIONED:
            raise ConfigError("post-conditioned template requires the indep or attn head")
        if variant is not TemplateVariant.POST_COND and self.head != HEAD_CONDITIONED:
            raise ConfigError(f"{self.variant} template requires the conditioned head")
        if self.lm_lambda < 0:
            raise ConfigError("lm_lambda must be non-negative")
        if self.lm_lambda > 0 and self.mask_mode != "causal":
            raise ConfigError("the next-token loss requires causal masking")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    @property
    def template_variant(self) -> TemplateVariant:
        return TemplateVariant(self.variant)

    @property
    def task_kind(self) -> TaskKind:
        return TaskKind(self.task)

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "recipes" else crf.N_SURFACE

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            max_positions=self.max_positions,
            mask_mode=MaskMode(self.mask_mode),
            dropout=self.dropout,
            precision=Precision(self.precision),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ModelBundle:
    """Every trainable tensor plus the context needed to rerun it.

    tensors holds the transformer parameters together with head.w_task,
    head.w_sim (attention head only), and crf.transitions (state-change
    task only), all under one flat namespace so the optimizer and the
    checkpoint writer treat them uniformly.
    """

    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    vocab: Vocabulary
    task: TaskKind | None = None
    variant: TemplateVariant | None = None
    head_kind: str | None = None
    max_len: int = 512

    @property
    def head(self) -> HeadParams:
        return HeadParams(
            w_task=self.tensors["head.w_task"],
            w_sim=self.tensors.get("head.w_sim"),
        )

    @property
    def crf_transitions(self) -> np.ndarray | None:
        return self.tensors.get("crf.transitions")

    def save(self, path: str | Path):
        header = {
            "model_config": self.model_config.to_dict(),
            "vocab": self.vocab.id_to_token,
            "task": self.task.value if self.task else None,
            "variant": self.variant.value if self.variant else None,
            "head": self.head_kind,
            "max_len": self.max_len,
        }
        transformer.save_tensors(path, header, self.tensors)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        header, tensors = transformer.load_tensors(path)
        config = ModelConfig.from_dict(header["model_config"])
        tensors = {k: v.astype(config.dtype) for k, v in tensors.items()}
        vocab = Vocabulary(
            id_to_token=list(header["vocab"]),
            token_to_id={t: i for i, t in enumerate(header["vocab"])},
        )
        return cls(
            model_config=config,
            tensors=tensors,
            vocab=vocab,
            task=TaskKind(header["task"]) if header.get("task") else None,
            variant=TemplateVariant(header["variant"]) if header.get("variant") else None,
            head_kind=header.get("head"),
            max_len=header.get("max_len", 512),
        )


def init_bundle(config: TrainConfig, vocab: Vocabulary, rng: np.random.Generator) -> ModelBundle:
    mcfg = config.model_config(len(vocab))
    tensors = transformer.init_params(mcfg, rng)
    d = mcfg.d_model
    in_dim = 2 * d if config.head == HEAD_INDEP else d
    dt = mcfg.dtype
    tensors["head.w_task"] = rng.normal(0.0, transformer.INIT_SCALE, (in_dim, config.n_classes)).astype(dt)
    if config.head == HEAD_ATTN:
        tensors["head.w_sim"] = rng.normal(0.0, transformer.INIT_SCALE, (d, d)).astype(dt)
    if config.task == "propara":
        tensors["crf.transitions"] = np.zeros((crf.N_EXPANDED, crf.N_EXPANDED), dtype=dt)
    return ModelBundle(
        model_config=mcfg,
        tensors=tensors,
        vocab=vocab,
        task=config.task_kind,
        variant=config.template_variant,
        head_kind=config.head,
        max_len=config.max_len,
    )


class Adam:
    """Adaptive moment estimation with bias correction and global-norm clipping."""

    def __init__(self, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 1.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        if self.clip > 0:
            total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if total > self.clip:
                scale = self.clip / total
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
        bc1 = 1 - self.b1 ** self.t
        bc2 = 1 - self.b2 ** self.t
        for name in grads:
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            params[name] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params[name].dtype)


# ---------------------------------------------------------------------------
# Case construction: the unit of loss computation per route.
# ---------------------------------------------------------------------------


@dataclass
class EntityCase:
    """All encodings needed to score one entity's full track."""

    process_index: int
    entity_index: int
    encodings: list[TemplateEncoding]  # one (doc-level) or T (sent-level)
    labels: list


@dataclass
class ProcessCase:
    """Per-step entity-independent encodings shared by all entities."""

    process_index: int
    encodings: list[TemplateEncoding]
    entity_ids: list[list[int]]
    labels: list[list]


def build_entity_cases(
    corpus: list[Process], variant: TemplateVariant, vocab: Vocabulary, max_len: int
) -> list[EntityCase]:
    cases = []
    for pi, p in enumerate(corpus):
        for ei in range(len(p.entities)):
            if variant.document_level:
                encs = [encode_entity_conditioned(p, ei, ALL, variant, vocab, max_len)]
            else:
                encs = [
                    encode_entity_conditioned(p, ei, t, variant, vocab, max_len)
                    for t in range(1, p.n_steps + 1)
                ]
            cases.append(
                EntityCase(
                    process_index=pi,
                    entity_index=ei,
                    encodings=encs,
                    labels=list(p.entities[ei].labels),
                )
            )
    return cases


def build_process_cases(
    corpus: list[Process], vocab: Vocabulary, max_len: int
) -> list[ProcessCase]:
    cases = []
    for pi, p in enumerate(corpus):
        encs = [encode_post_conditioned(p, t, vocab, max_len) for t in range(1, p.n_steps + 1)]
        cases.append(
            ProcessCase(
                process_index=pi,
                encodings=encs,
                entity_ids=[vocab.encode(e.name_tokens) for e in p.entities],
                labels=[list(e.labels) for e in p.entities],
            )
        )
    return cases


def pad_batch(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def _anchor_sequence(case: EntityCase) -> list[tuple[int, int]]:
    """(encoding row offset, anchor position) per step, in step order."""
    slots = {}
    for enc_idx, enc in enumerate(case.encodings):
        for pos, _, step in enc.anchors:
            slots[step] = (enc_idx, pos)
    return [slots[t] for t in range(1, len(case.labels) + 1)]


# ---------------------------------------------------------------------------
# Loss and prediction for the entity-conditioned route.
# ---------------------------------------------------------------------------


def _conditioned_batch_pass(
    bundle: ModelBundle,
    cases: list[EntityCase],
    lm_lambda: float,
    rng: np.random.Generator | None,
    train: bool,
) -> tuple[float, float, dict[str, np.ndarray] | None, list[list]]:
    """One forward (and optional backward) pass over a batch of cases.

    Returns (task loss, lm loss, grads or None, per-case predictions).
    """
    rows: list[list[int]] = []
    offsets: list[int] = []
    for case in cases:
        offsets.append(len(rows))
        rows.extend(enc.token_ids for enc in case.encodings)
    ids, mask = pad_batch(rows)
    trace = transformer.forward(
        bundle.tensors, bundle.model_config, ids, pad_mask=mask,
        cache=train, rng=rng, train=train,
    )
    X = trace.states
    w_task = bundle.tensors["head.w_task"]
    dX = np.zeros_like(X) if train else None
    d_w_task = np.zeros_like(w_task) if train else None
    d_trans = None
    task_loss_total = 0.0
    n_units = 0
    preds: list[list] = []
    recipes = bundle.task is TaskKind.RECIPES
    if not recipes and train:
        d_trans = np.zeros_like(bundle.tensors["crf.transitions"])

    for case, offset in zip(cases, offsets):
        anchor_seq = _anchor_sequence(case)
        if recipes:
            case_pred = []
            for t, (enc_idx, pos) in enumerate(anchor_seq):
                row = offset + enc_idx
                h = X[row, pos]
                logits = h @ w_task
                case_pred.append(int(np.argmax(logits)))
                if train:
                    loss, d_logits = softmax_cross_entropy(logits, int(case.labels[t]))
                    task_loss_total += loss
                    dX[row, pos] += w_task @ d_logits
                    d_w_task += np.outer(h, d_logits)
                n_units += 1
        else:
            scores = np.stack(
                [X[offset + enc_idx, pos] @ w_task for enc_idx, pos in anchor_seq]
            ).astype(np.float64)
            lattice = crf.TagLattice(
                potentials=crf.expand_emissions(scores),
                transitions=bundle.tensors["crf.transitions"].astype(np.float64),
            )
            tags, _ = crf.viterbi(lattice)
            case_pred = tags
            if train:
                loss, d_pot, d_tr = crf.nll_loss(lattice, [str(t) for t in case.labels])
                task_loss_total += loss
                d_surface = crf.collapse_emission_grads(d_pot)
                for t, (enc_idx, pos) in enumerate(anchor_seq):
                    row = offset + enc_idx
                    dX[row, pos] += (w_task @ d_surface[t]).astype(X.dtype)
                    d_w_task += np.outer(X[row, pos], d_surface[t]).astype(w_task.dtype)
                d_trans += d_tr.astype(d_trans.dtype)
            n_units += len(anchor_seq)
        preds.append(case_pred)

    task_loss = task_loss_total / max(n_units, 1)
    lm_value = 0.0
    grads = None
    if train:
        dX /= max(n_units, 1)
        d_w_task /= max(n_units, 1)
        if d_trans is not None:
            d_trans /= max(n_units, 1)
        d_logits = None
        if lm_lambda > 0:
            lm_value, d_logits = transformer.lm_loss_and_grad(trace)
            d_logits = d_logits * lm_lambda
        grads, _ = transformer.backward(trace, bundle.tensors, d_states=dX, d_logits=d_logits)
        grads["head.w_task"] += d_w_task
        if d_trans is not None:
            grads["crf.transitions"] += d_trans
    elif lm_lambda > 0:
        lm_value = transformer.lm_loss(trace)
    return task_loss, lm_value, grads, preds


# ---------------------------------------------------------------------------
# Loss and prediction for the post-conditioned route.
# ---------------------------------------------------------------------------


def _post_batch_pass(
    bundle: ModelBundle,
    cases: list[ProcessCase],
    lm_lambda: float,
    rng: np.random.Generator | None,
    train: bool,
) -> tuple[float, float, dict[str, np.ndarray] | None, list[list[list]]]:
    rows: list[list[int]] = []
    offsets: list[int] = []
    for case in cases:
        offsets.append(len(rows))
        rows.extend(enc.token_ids for enc in case.encodings)
    ids, mask = pad_batch(rows)
    trace = transformer.forward(
        bundle.tensors, bundle.model_config, ids, pad_mask=mask,
        cache=train, rng=rng, train=train,
    )
    X = trace.states
    tok_emb = bundle.tensors["tok_emb"]
    head = bundle.head
    attn = bundle.head_kind == HEAD_ATTN
    recipes = bundle.task is TaskKind.RECIPES

    dX = np.zeros_like(X) if train else None
    d_w_task = np.zeros_like(head.w_task) if train else None
    d_w_sim = np.zeros_like(head.w_sim) if (train and attn) else None
    d_tok_extra = np.zeros_like(tok_emb) if train else None
    d_trans = None
    if not recipes and train:
        d_trans = np.zeros_like(bundle.tensors["crf.transitions"])
    task_loss_total = 0.0
    n_units = 0
    preds: list[list[list]] = []

    for case, offset in zip(cases, offsets):
        anchor_pos = [enc.anchors[0][0] for enc in case.encodings]
        case_preds: list[list] = []
        for ent_ids, labels in zip(case.entity_ids, case.labels):
            g_e = entity_embedding(tok_emb, ent_ids)
            step_logits = []
            step_caches = []
            for t, pos in enumerate(anchor_pos):
                row = offset + t
                if attn:
                    logits, cache = attn_forward(X[row], g_e, head, valid=mask[row])
                else:
                    logits, cache = indep_logits(X[row, pos], g_e, head), None
                step_logits.append(logits)
                step_caches.append(cache)

            if recipes:
                ent_pred = [int(np.argmax(lg)) for lg in step_logits]
                d_step_logits = []
                if train:
                    for t, lg in enumerate(step_logits):
                        loss, d_lg = softmax_cross_entropy(lg, int(labels[t]))
                        task_loss_total += loss
                        d_step_logits.append(d_lg)
                        n_units += 1
                else:
                    n_units += len(step_logits)
            else:
                scores = np.stack(step_logits).astype(np.float64)
                lattice = crf.TagLattice(
                    potentials=crf.expand_emissions(scores),
                    transitions=bundle.tensors["crf.transitions"].astype(np.float64),
                )
                ent_pred, _ = crf.viterbi(lattice)
                d_step_logits = []
                if train:
                    loss, d_pot, d_tr = crf.nll_loss(lattice, [str(t) for t in labels])
                    task_loss_total += loss
                    d_surface = crf.collapse_emission_grads(d_pot)
                    d_step_logits = [d_surface[t] for t in range(len(anchor_pos))]
                    d_trans += d_tr.astype(d_trans.dtype)
                n_units += len(anchor_pos)

            if train:
                for t, d_lg in enumerate(d_step_logits):
                    row = offset + t
                    if attn:
                        dX_row, d_g_e, dws, dwt = attn_backward(head, step_caches[t], d_lg)
                        dX[row] += dX_row.astype(X.dtype)
                        d_w_sim += dws.astype(d_w_sim.dtype)
                    else:
                        dh, d_g_e, dwt = indep_backward(X[row, anchor_pos[t]], g_e, head, d_lg)
                        dX[row, anchor_pos[t]] += dh.astype(X.dtype)
                    d_w_task += dwt.astype(d_w_task.dtype)
                    np.add.at(d_tok_extra, np.asarray(ent_ids, dtype=np.int64), d_g_e.astype(d_tok_extra.dtype))
            case_preds.append(ent_pred)
        preds.append(case_preds)

    task_loss = task_loss_total / max(n_units, 1)
    lm_value = 0.0
    grads = None
    if train:
        dX /= max(n_units, 1)
        d_w_task /= max(n_units, 1)
        if d_w_sim is not None:
            d_w_sim /= max(n_units, 1)
        d_tok_extra /= max(n_units, 1)
        if d_trans is not None:
            d_trans /= max(n_units, 1)
        d_logits = None
        if lm_lambda > 0:
            lm_value, d_logits = transformer.lm_loss_and_grad(trace)
            d_logits = d_logits * lm_lambda
        grads, _ = transformer.backward(trace, bundle.tensors, d_states=dX, d_logits=d_logits)
        grads["head.w_task"] += d_w_task
        if d_w_sim is not None:
            grads["head.w_sim"] += d_w_sim
        grads["tok_emb"] += d_tok_extra
        if d_trans is not None:
            grads["crf.transitions"] += d_trans
    elif lm_lambda > 0:
        lm_value = transformer.lm_loss(trace)
    return task_loss, lm_value, grads, preds


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    task: TaskKind
    report: RecipesReport | ProParaReport
    slices: SliceReport | None
    preds: list[list[list]]  # [process][entity][step]

    def report_dict(self) -> dict:
        d = {"task": self.task.value, "report": self.report.to_dict()}
        if self.slices is not None:
            d["slices"] = self.slices.to_dict()
        return d


def _chunk(seq: list, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def predict_corpus(
    bundle: ModelBundle, corpus: list[Process], batch_size: int = 16
) -> list[list[list]]:
    """Predicted label grids, [process][entity][step], for any variant."""
    if bundle.variant is None or bundle.head_kind is None or bundle.task is None:
        raise ConfigError("bundle has no task head; train or finetune first")
    preds: list[list[list]] = [[None] * len(p.entities) for p in corpus]
    if bundle.variant is TemplateVariant.POST_COND:
        cases = build_process_cases(corpus, bundle.vocab, bundle.max_len)
        for batch in _chunk(cases, max(1, batch_size // 4)):
            _, _, _, batch_preds = _post_batch_pass(bundle, batch, 0.0, None, train=False)
            for case, case_preds in zip(batch, batch_preds):
                preds[case.process_index] = case_preds
    else:
        cases = build_entity_cases(corpus, bundle.variant, bundle.vocab, bundle.max_len)
        for batch in _chunk(cases, batch_size):
            _, _, _, batch_preds = _conditioned_batch_pass(bundle, batch, 0.0, None, train=False)
            for case, case_pred in zip(batch, batch_preds):
                preds[case.process_index][case.entity_index] = case_pred
    return preds


def _build_report(
    task: TaskKind, corpus: list[Process], preds: list[list[list]]
) -> tuple[RecipesReport | ProParaReport, SliceReport | None]:
    gold_rows = [e.labels for p in corpus for e in p.entities]
    pred_rows = [row for grid in preds for row in grid]
    if task is TaskKind.RECIPES:
        combined = [e.combined for p in corpus for e in p.entities]
        has_flags = all(c is not None for c in combined) and combined
        report = score_recipes(gold_rows, pred_rows, combined if has_flags else None)
        slices = slice_challenges(corpus, preds) if has_flags else None
        return report, slices
    return score_propara(gold_rows, pred_rows), None


def evaluate(
    bundle: ModelBundle, corpus: list[Process], batch_size: int = 16
) -> EvalResult:
    """Run the bundle's template/head/decoder path and score the corpus."""
    if bundle.task is not None and corpus and corpus[0].task_kind is not bundle.task:
        raise ConfigError(
            f"bundle was trained for {bundle.task.value}, corpus is {corpus[0].task_kind.value}"
        )
    preds = predict_corpus(bundle, corpus, batch_size)
    report, slices = _build_report(bundle.task, corpus, preds)
    return EvalResult(task=bundle.task, report=report, slices=slices, preds=preds)


def evaluate_baseline(
    kind: BaselineKind, corpus: list[Process], train_corpus: list[Process] | None = None
) -> EvalResult:
    """Rule-based predictions routed through the same report schema."""
    majority = majority_label(train_corpus) if train_corpus else 0
    preds = [predict_baseline(kind, p, majority) for p in corpus]
    report, slices = _build_report(TaskKind.RECIPES, corpus, preds)
    return EvalResult(task=TaskKind.RECIPES, report=report, slices=slices, preds=preds)


def dev_metric_value(result: EvalResult) -> float:
    """Model-selection metric: F1 for recipes, micro average for state changes."""
    if result.task is TaskKind.RECIPES:
        if result.report.f1 is not None:
            return result.report.f1
        return result.report.accuracy or 0.0
    return result.report.micro_avg or 0.0


# ---------------------------------------------------------------------------
# Training drivers.
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None
    manifest_path: str | None = None


def corpus_fingerprint(corpus: list[Process]) -> str:
    blob = "\n".join(json.dumps(p.to_record(), sort_keys=True) for p in corpus)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_outputs(
    out_dir: str | Path | None,
    config: TrainConfig,
    bundle: ModelBundle,
    history: list[dict],
    hashes: dict[str, str],
    final_report: dict | None,
) -> tuple[str | None, str | None]:
    if out_dir is None:
        return None, None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt"
    bundle.save(ckpt_path)
    manifest = {
        "config": config.to_dict(),
        "corpus_hashes": hashes,
        "checkpoint": str(ckpt_path),
        "epochs": history,
        "final_report": final_report,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return str(ckpt_path), str(manifest_path)


def _lm_rows(p: Process, vocab: Vocabulary, max_len: int) -> list[int]:
    ids = [vocab.encode_token(START)]
    sep = vocab.encode_token(SEP)
    for t, step in enumerate(p.steps):
        if t > 0:
            ids.append(sep)
        ids.extend(vocab.encode(step.tokens))
    if len(ids) > max_len:
        ids = [ids[0]] + ids[-(max_len - 1):]
    return ids


def pretrain_lm(
    config: TrainConfig,
    corpus: list[Process],
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Next-token training over step text; emits a task-free checkpoint."""
    if config.mask_mode != "causal":
        raise ConfigError("LM pretraining requires causal masking")
    if config.lm_lambda > 0:
        warnings.warn("lm_lambda is ignored during LM pretraining (no task loss)")
    rng = np.random.default_rng(config.seed)
    vocab = build_vocab(corpus, config.min_count)
    bundle = init_bundle(config, vocab, rng)
    bundle.task = None
    bundle.variant = None
    bundle.head_kind = None
    bundle.tensors.pop("head.w_task", None)
    bundle.tensors.pop("head.w_sim", None)
    bundle.tensors.pop("crf.transitions", None)
    opt = Adam(lr=config.lr, clip=config.grad_clip)
    rows_all = [_lm_rows(p, vocab, config.max_len) for p in corpus]
    order = np.arange(len(rows_all))
    history = []
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        losses = []
        for batch_idx in _chunk(list(order), config.batch_size):
            rows = [rows_all[i] for i in batch_idx]
            ids, mask = pad_batch(rows)
            trace = transformer.forward(
                bundle.tensors, bundle.model_config, ids, pad_mask=mask,
                cache=True, rng=rng, train=True,
            )
            loss, d_logits = transformer.lm_loss_and_grad(trace)
            grads, _ = transformer.backward(trace, bundle.tensors, d_logits=d_logits)
            opt.step(bundle.tensors, grads)
            losses.append(loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses))})
    hashes = {"train": corpus_fingerprint(corpus)}
    ckpt, manifest = _write_outputs(out_dir, config, bundle, history, hashes, None)
    return TrainResult(bundle=bundle, history=history, checkpoint_path=ckpt, manifest_path=manifest)


def finetune(
    config: TrainConfig,
    train_corpus: list[Process],
    dev_corpus: list[Process] | None = None,
    init: str | Path | ModelBundle | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Fine-tune on labelled processes, tracking a dev metric per epoch.

    The task loss (anchor cross-entropy, or CRF negative log-likelihood for
    state changes) is combined with lm_lambda times the next-token loss.
    The best-scoring epoch's parameters are kept.
    """
    if not train_corpus:
        raise ConfigError("empty training corpus")
    if train_corpus[0].task_kind is not config.task_kind:
        raise ConfigError(
            f"corpus task {train_corpus[0].task_kind.value!r} does not match config {config.task!r}"
        )
    rng = np.random.default_rng(config.seed)

    if init is not None:
        src = init if isinstance(init, ModelBundle) else ModelBundle.load(init)
        if src.task is not None and src.task is not config.task_kind:
            raise ConfigError(f"checkpoint was trained for task {src.task.value!r}")
        if src.head_kind is not None and src.head_kind != config.head:
            raise ConfigError(
                f"checkpoint head {src.head_kind!r} does not match config head {config.head!r}"
            )
        vocab = src.vocab
        fresh = init_bundle(config, vocab, rng)
        if src.model_config.to_dict() != fresh.model_config.to_dict():
            raise ConfigError("checkpoint model dimensions do not match the training config")
        bundle = fresh
        for name, tensor in src.tensors.items():
            if name in bundle.tensors and bundle.tensors[name].shape == tensor.shape:
                bundle.tensors[name] = tensor.astype(bundle.model_config.dtype).copy()
    else:
        vocab = build_vocab(train_corpus, config.min_count)
        bundle = init_bundle(config, vocab, rng)

    dev = dev_corpus if dev_corpus is not None else train_corpus
    conditioned = bundle.variant is not TemplateVariant.POST_COND
    if conditioned:
        train_cases = build_entity_cases(train_corpus, bundle.variant, vocab, config.max_len)
        pass_fn = _conditioned_batch_pass
    else:
        train_cases = build_process_cases(train_corpus, vocab, config.max_len)
        pass_fn = _post_batch_pass
    if not train_cases:
        raise ConfigError("training corpus produced no cases")

    opt = Adam(lr=config.lr, clip=config.grad_clip)
    history = []
    best_metric = -np.inf
    best_tensors = None
    stale = 0
    order = np.arange(len(train_cases))
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        task_losses, lm_losses = [], []
        for batch_idx in _chunk(list(order), config.batch_size):
            batch = [train_cases[i] for i in batch_idx]
            task_loss, lm_value, grads, _ = pass_fn(bundle, batch, config.lm_lambda, rng, True)
            opt.step(bundle.tensors, grads)
            task_losses.append(task_loss)
            lm_losses.append(lm_value)
        dev_result = evaluate(bundle, dev, config.batch_size)
        metric = dev_metric_value(dev_result)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(task_losses) + config.lm_lambda * np.mean(lm_losses)),
                "task_loss": float(np.mean(task_losses)),
                "lm_loss": float(np.mean(lm_losses)),
                "dev_metric": metric,
            }
        )
        if metric > best_metric:
            best_metric = metric
            best_tensors = {k: v.copy() for k, v in bundle.tensors.items()}
            stale = 0
        else:
            stale += 1
            if config.patience > 0 and stale >= config.patience:
                break
    if best_tensors is not None:
        bundle.tensors = best_tensors
    final = evaluate(bundle, dev, config.batch_size)
    hashes = {"train": corpus_fingerprint(train_corpus), "dev": corpus_fingerprint(dev)}
    ckpt, manifest = _write_outputs(
        out_dir, config, bundle, history, hashes, final.report_dict()
    )
    return TrainResult(bundle=bundle, history=history, checkpoint_path=ckpt, manifest_path=manifest)
