"""Evaluation measures and challenging-case slices.

Recipes reports carry precision/recall/F1/accuracy over presence bits plus
recall split by whether the gold-present ingredient was explicitly
mentioned (uncombined, UR) or part of a mixture (combined, CR). State
change reports answer two question families per entity and event type
C/M/D: does the event happen (Cat-1), and at exactly which steps (Cat-2).

Ratios with empty denominators are reported as None, never 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .baselines import match
from .corpus import Process

EVENTS = ("C", "M", "D")


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


@dataclass
class RecipesReport:
    precision: float | None
    recall: float | None
    f1: float | None
    accuracy: float | None
    ur: float | None
    cr: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    n_uncombined_pos: int
    n_combined_pos: int
    tp_uncombined: int
    tp_combined: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "accuracy": self.accuracy, "ur": self.ur, "cr": self.cr,
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
            "n_uncombined_pos": self.n_uncombined_pos,
            "n_combined_pos": self.n_combined_pos,
            "tp_uncombined": self.tp_uncombined, "tp_combined": self.tp_combined,
        }


@dataclass
class ProParaReport:
    cat1_accuracy: float | None
    cat2_accuracy: float | None
    macro_avg: float | None
    micro_avg: float | None
    cat1_correct: int
    cat1_total: int
    cat2_correct: int
    cat2_total: int
    cat1_by_event: dict = field(default_factory=dict)  # event -> (correct, total)
    cat2_by_event: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cat1_accuracy": self.cat1_accuracy, "cat2_accuracy": self.cat2_accuracy,
            "macro_avg": self.macro_avg, "micro_avg": self.micro_avg,
            "cat1_correct": self.cat1_correct, "cat1_total": self.cat1_total,
            "cat2_correct": self.cat2_correct, "cat2_total": self.cat2_total,
            "cat1_by_event": {k: list(v) for k, v in self.cat1_by_event.items()},
            "cat2_by_event": {k: list(v) for k, v in self.cat2_by_event.items()},
        }


@dataclass
class SliceReport:
    """Intermediate-composition bigrams and hypernymy-style mention gaps."""

    composition_hist: dict  # predicted bigram "0->1" etc. -> count
    composition_accuracy: float | None
    composition_count: int
    hypernymy_recall: float | None
    hypernymy_count: int
    hypernymy_correct: int

    def to_dict(self) -> dict:
        return {
            "composition_hist": dict(self.composition_hist),
            "composition_accuracy": self.composition_accuracy,
            "composition_count": self.composition_count,
            "hypernymy_recall": self.hypernymy_recall,
            "hypernymy_count": self.hypernymy_count,
            "hypernymy_correct": self.hypernymy_correct,
        }


def score_recipes(
    gold: list[list[int]],
    pred: list[list[int]],
    combined: list[list[int] | None] | None = None,
) -> RecipesReport:
    """Presence metrics over all (entity, step) cells.

    gold/pred are parallel per-entity bit rows; combined, when given, holds
    per-entity mixture flags (or None rows for entities without them).
    """
    if len(gold) != len(pred):
        raise ValueError("gold and pred differ in entity count")
    tp = fp = fn = tn = 0
    n_u = n_c = tp_u = tp_c = 0
    for i, (g_row, p_row) in enumerate(zip(gold, pred)):
        if len(g_row) != len(p_row):
            raise ValueError(f"row {i}: gold and pred differ in step count")
        c_row = combined[i] if combined is not None else None
        if c_row is not None and len(c_row) != len(g_row):
            raise ValueError(f"row {i}: combined flags differ in step count")
        for t, (g, q) in enumerate(zip(g_row, p_row)):
            if g == 1 and q == 1:
                tp += 1
            elif g == 0 and q == 1:
                fp += 1
            elif g == 1 and q == 0:
                fn += 1
            else:
                tn += 1
            if g == 1 and c_row is not None:
                if c_row[t] == 1:
                    n_c += 1
                    tp_c += q == 1
                else:
                    n_u += 1
                    tp_u += q == 1
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return RecipesReport(
        precision=precision, recall=recall, f1=f1,
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        ur=_ratio(tp_u, n_u), cr=_ratio(tp_c, n_c),
        tp=tp, fp=fp, fn=fn, tn=tn,
        n_uncombined_pos=n_u, n_combined_pos=n_c,
        tp_uncombined=tp_u, tp_combined=tp_c,
    )


def _event_steps(tags: list[str], event: str) -> frozenset[int]:
    return frozenset(t for t, tag in enumerate(tags, start=1) if tag == event)


def score_propara(gold: list[list[str]], pred: list[list[str]]) -> ProParaReport:
    """Event-presence (Cat-1) and exact-step (Cat-2) accuracy per entity.

    A Cat-2 query exists for every (entity, event) the gold contains and is
    correct only when the predicted step set matches exactly.
    """
    if len(gold) != len(pred):
        raise ValueError("gold and pred differ in entity count")
    cat1 = {e: [0, 0] for e in EVENTS}
    cat2 = {e: [0, 0] for e in EVENTS}
    for i, (g_tags, p_tags) in enumerate(zip(gold, pred)):
        if len(g_tags) != len(p_tags):
            raise ValueError(f"entity {i}: gold and pred differ in length")
        for event in EVENTS:
            g_steps = _event_steps(g_tags, event)
            p_steps = _event_steps(p_tags, event)
            cat1[event][1] += 1
            cat1[event][0] += bool(g_steps) == bool(p_steps)
            if g_steps:
                cat2[event][1] += 1
                cat2[event][0] += g_steps == p_steps
    c1_correct = sum(v[0] for v in cat1.values())
    c1_total = sum(v[1] for v in cat1.values())
    c2_correct = sum(v[0] for v in cat2.values())
    c2_total = sum(v[1] for v in cat2.values())
    c1_acc = _ratio(c1_correct, c1_total)
    c2_acc = _ratio(c2_correct, c2_total)
    macro = None
    if c1_acc is not None and c2_acc is not None:
        macro = (c1_acc + c2_acc) / 2
    return ProParaReport(
        cat1_accuracy=c1_acc, cat2_accuracy=c2_acc,
        macro_avg=macro, micro_avg=_ratio(c1_correct + c2_correct, c1_total + c2_total),
        cat1_correct=c1_correct, cat1_total=c1_total,
        cat2_correct=c2_correct, cat2_total=c2_total,
        cat1_by_event={e: tuple(v) for e, v in cat1.items()},
        cat2_by_event={e: tuple(v) for e, v in cat2.items()},
    )


BIGRAMS = ("0->0", "0->1", "1->0", "1->1")


def slice_challenges(
    processes: list[Process], preds: list[list[list[int]]]
) -> SliceReport:
    """Challenging recipes slices, computed from gold labels and flags.

    Composition cases are gold 0->1 transitions whose target step is a
    combined (mixture) use; the report histograms the predicted bigram.
    Hypernymy cases are gold-present uncombined steps with no literal
    entity mention; the report gives recall over them.
    """
    hist = {b: 0 for b in BIGRAMS}
    comp_total = comp_correct = 0
    hyp_total = hyp_correct = 0
    for p, p_grid in zip(processes, preds):
        for e_idx, e in enumerate(p.entities):
            if e.combined is None:
                raise ValueError(
                    f"process {p.id!r}, entity {e.name!r}: combined flags required for slices"
                )
            row = p_grid[e_idx]
            for t in range(p.n_steps):
                if e.labels[t] == 1 and e.combined[t] == 0 and match(e, p.steps[t]) == 0:
                    hyp_total += 1
                    hyp_correct += row[t] == 1
                if t == 0:
                    continue
                if e.labels[t - 1] == 0 and e.labels[t] == 1 and e.combined[t] == 1:
                    bigram = f"{row[t - 1]}->{row[t]}"
                    hist[bigram] += 1
                    comp_total += 1
                    comp_correct += bigram == "0->1"
    return SliceReport(
        composition_hist=hist,
        composition_accuracy=_ratio(comp_correct, comp_total),
        composition_count=comp_total,
        hypernymy_recall=_ratio(hyp_correct, hyp_total),
        hypernymy_count=hyp_total,
        hypernymy_correct=hyp_correct,
    )


def _fmt(value: float | None, width: int = 6) -> str:
    return f"{100 * value:{width}.2f}" if value is not None else " " * (width - 1) + "-"


def format_recipes_table(rows: list[tuple[str, RecipesReport]]) -> str:
    """Fixed-width table: model, P, R, F1, Acc, UR, CR (percentages)."""
    name_w = max(12, max((len(n) for n, _ in rows), default=12))
    header = f"{'Model':<{name_w}} {'P':>6} {'R':>6} {'F1':>6} {'Acc':>6} {'UR':>6} {'CR':>6}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(
            f"{name:<{name_w}} {_fmt(r.precision)} {_fmt(r.recall)} {_fmt(r.f1)}"
            f" {_fmt(r.accuracy)} {_fmt(r.ur)} {_fmt(r.cr)}"
        )
    return "\n".join(lines)


def format_propara_table(rows: list[tuple[str, ProParaReport]]) -> str:
    """Fixed-width table: model, Cat-1, Cat-2, Ma-Avg, Mi-Avg plus per-event lines."""
    name_w = max(12, max((len(n) for n, _ in rows), default=12))
    header = f"{'Model':<{name_w}} {'Cat-1':>6} {'Cat-2':>6} {'Ma-Avg':>6} {'Mi-Avg':>6}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(
            f"{name:<{name_w}} {_fmt(r.cat1_accuracy)} {_fmt(r.cat2_accuracy)}"
            f" {_fmt(r.macro_avg)} {_fmt(r.micro_avg)}"
        )
    lines.append("")
    lines.append(f"{'Per event':<{name_w}} {'C':>6} {'M':>6} {'D':>6}")
    for name, r in rows:
        for cat, by_event in (("Cat-1", r.cat1_by_event), ("Cat-2", r.cat2_by_event)):
            cells = " ".join(
                _fmt(_ratio(*by_event.get(e, (0, 0)))) for e in EVENTS
            )
            lines.append(f"{name + ' ' + cat:<{name_w}} {cells}")
    return "\n".join(lines)
