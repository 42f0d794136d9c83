"""Rule-based ingredient-presence baselines.

Majority predicts the training corpus' most frequent bit everywhere.
Exact-match predicts presence wherever the entity is literally mentioned;
first-occurrence predicts presence at and after the first mention.
"""

from __future__ import annotations

from enum import Enum
from functools import lru_cache
from importlib import resources

from .corpus import EntityTrack, Process, Step, TaskKind


class BaselineKind(str, Enum):
    MAJORITY = "majority"
    EXACT_MATCH = "exact-match"
    FIRST_OCC = "first-occ"


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    """The fixed stopword list shipped as a package resource."""
    text = resources.files("enttrack.resources").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def match(entity: EntityTrack, step: Step) -> int:
    """1 iff every non-stopword entity token occurs among the step's tokens.

    Case-normalized, no stemming. Entities made up entirely of stopwords
    fall back to requiring all of their tokens, so the check is never
    vacuously true.
    """
    step_tokens = {t.lower() for t in step.tokens}
    needed = [t.lower() for t in entity.name_tokens if t.lower() not in stopwords()]
    if not needed:
        needed = [t.lower() for t in entity.name_tokens]
    if not needed:
        return 0
    return int(all(t in step_tokens for t in needed))


def majority_label(corpora: list[Process]) -> int:
    """Most frequent presence bit over all (entity, step) cells; ties -> 0."""
    ones = total = 0
    for p in corpora:
        for e in p.entities:
            ones += sum(e.labels)
            total += len(e.labels)
    return int(ones * 2 > total)


def predict_baseline(
    kind: BaselineKind, p: Process, train_majority_label: int = 0
) -> list[list[int]]:
    """Per-(entity, step) presence grid for one process."""
    if p.task_kind is not TaskKind.RECIPES:
        raise ValueError("rule-based baselines are defined for the recipes task only")
    kind = BaselineKind(kind)
    grid = []
    for e in p.entities:
        if kind is BaselineKind.MAJORITY:
            grid.append([int(train_majority_label)] * p.n_steps)
        elif kind is BaselineKind.EXACT_MATCH:
            grid.append([match(e, s) for s in p.steps])
        else:
            row, seen = [], False
            for s in p.steps:
                seen = seen or bool(match(e, s))
                row.append(int(seen))
            grid.append(row)
    return grid
