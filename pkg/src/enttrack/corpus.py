"""Data model, JSONL ingestion, tokenization, and vocabulary construction.

A corpus file holds one JSON object per line:

    {"id": str, "task": "recipes"|"propara",
     "steps": [{"text": str, "tokens": [str], "pos": [str]?}, ...],
     "entities": [{"name": str, "labels": [int|str], "combined": [int]?}, ...]}

Recipes labels are presence bits (0/1); propara labels are state-change
tags "O","C","E","M","D" and must satisfy the existence cycle. Loaded
corpora and vocabularies are treated as immutable after construction.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from . import crf


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data."""


class TaskKind(str, Enum):
    RECIPES = "recipes"
    PROPARA = "propara"


PAD, UNK, START, SEP, CLS = "[PAD]", "[UNK]", "[START]", "[SEP]", "[CLS]"
SPECIAL_TOKENS = (PAD, UNK, START, SEP, CLS)
PAD_ID, UNK_ID, START_ID, SEP_ID, CLS_ID = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens with punctuation split off as its own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Step:
    text: str
    tokens: list[str]
    pos: list[str] | None = None


@dataclass
class EntityTrack:
    name: str
    name_tokens: list[str]
    labels: list  # per-step int bits (recipes) or tag strings (propara)
    combined: list[int] | None = None


@dataclass
class Process:
    id: str
    steps: list[Step]
    entities: list[EntityTrack]
    task_kind: TaskKind

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_record(self) -> dict:
        steps = []
        for s in self.steps:
            rec = {"text": s.text, "tokens": list(s.tokens)}
            if s.pos is not None:
                rec["pos"] = list(s.pos)
            steps.append(rec)
        entities = []
        for e in self.entities:
            rec = {"name": e.name, "labels": list(e.labels)}
            if e.combined is not None:
                rec["combined"] = list(e.combined)
            entities.append(rec)
        return {"id": self.id, "task": self.task_kind.value, "steps": steps, "entities": entities}


def _require(cond: bool, message: str):
    if not cond:
        raise CorpusError(message)


def _parse_step(rec: dict, pid: str, index: int) -> Step:
    _require(isinstance(rec, dict), f"process {pid!r}: step {index + 1} is not an object")
    text = rec.get("text", "")
    tokens = rec.get("tokens")
    if tokens is None:
        tokens = tokenize(text)
    _require(
        isinstance(tokens, list) and len(tokens) > 0 and all(isinstance(t, str) for t in tokens),
        f"process {pid!r}: step {index + 1} has no tokens",
    )
    pos = rec.get("pos")
    if pos is not None:
        _require(
            isinstance(pos, list) and len(pos) == len(tokens),
            f"process {pid!r}: step {index + 1} pos length != token length",
        )
    return Step(text=text, tokens=list(tokens), pos=list(pos) if pos is not None else None)


def _parse_entity(rec: dict, pid: str, n_steps: int, task: TaskKind) -> EntityTrack:
    _require(isinstance(rec, dict) and "name" in rec, f"process {pid!r}: entity without a name")
    name = rec["name"]
    labels = rec.get("labels")
    _require(
        isinstance(labels, list) and len(labels) == n_steps,
        f"process {pid!r}, entity {name!r}: expected {n_steps} labels",
    )
    if task is TaskKind.RECIPES:
        _require(
            all(lab in (0, 1) for lab in labels),
            f"process {pid!r}, entity {name!r}: recipes labels must be 0/1 bits",
        )
    else:
        violation = crf.lifecycle_violation([str(t) for t in labels])
        _require(
            violation is None,
            f"process {pid!r}, entity {name!r}: {violation}",
        )
    combined = rec.get("combined")
    if combined is not None:
        _require(
            task is TaskKind.RECIPES,
            f"process {pid!r}, entity {name!r}: combined flags are recipes-only",
        )
        _require(
            isinstance(combined, list)
            and len(combined) == n_steps
            and all(c in (0, 1) for c in combined),
            f"process {pid!r}, entity {name!r}: combined flags must be {n_steps} bits",
        )
    return EntityTrack(
        name=name,
        name_tokens=tokenize(name),
        labels=list(labels),
        combined=list(combined) if combined is not None else None,
    )


def process_from_record(rec: dict, task: TaskKind) -> Process:
    _require(isinstance(rec, dict), "record is not a JSON object")
    pid = rec.get("id")
    _require(isinstance(pid, str) and pid != "", "record without an id")
    rec_task = rec.get("task")
    _require(
        rec_task == task.value,
        f"process {pid!r}: task {rec_task!r} does not match requested {task.value!r}",
    )
    steps_rec = rec.get("steps")
    _require(
        isinstance(steps_rec, list) and len(steps_rec) >= 1,
        f"process {pid!r}: needs at least one step",
    )
    steps = [_parse_step(s, pid, i) for i, s in enumerate(steps_rec)]
    entities_rec = rec.get("entities", [])
    _require(isinstance(entities_rec, list), f"process {pid!r}: entities must be a list")
    entities = [_parse_entity(e, pid, len(steps), task) for e in entities_rec]
    return Process(id=pid, steps=steps, entities=entities, task_kind=task)


def load_corpus(path: str | Path, task: TaskKind | str) -> list[Process]:
    """Read a JSONL corpus, validating labels and the existence cycle."""
    task = TaskKind(task)
    processes = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}, line {line_no}: invalid JSON ({exc.msg})") from exc
            try:
                processes.append(process_from_record(rec, task))
            except CorpusError as exc:
                raise CorpusError(f"{path}, line {line_no}: {exc}") from exc
    return processes


def save_corpus(processes: Iterable[Process], path: str | Path):
    """Write processes as canonical one-object-per-line JSON."""
    with open(path, "w", encoding="utf-8") as f:
        for p in processes:
            f.write(json.dumps(p.to_record(), sort_keys=True, ensure_ascii=False))
            f.write("\n")


@dataclass
class Vocabulary:
    """Token inventory with reserved special ids 0-4 (PAD/UNK/START/SEP/CLS)."""

    id_to_token: list[str]
    token_to_id: dict[str, int]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.encode_token(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        id_to_token = list(SPECIAL_TOKENS)
        seen = set(id_to_token)
        for t in tokens:
            if t not in seen:
                id_to_token.append(t)
                seen.add(t)
        return cls(id_to_token=id_to_token, token_to_id={t: i for i, t in enumerate(id_to_token)})

    def save(self, path: str | Path):
        Path(path).write_text(
            json.dumps({"tokens": self.id_to_token}, ensure_ascii=False), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        tokens = data["tokens"]
        if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise CorpusError("vocabulary file does not start with the reserved special tokens")
        return cls(id_to_token=tokens, token_to_id={t: i for i, t in enumerate(tokens)})


def build_vocab(corpora: Iterable[Process], min_count: int = 1) -> Vocabulary:
    """Vocabulary over step and entity-name tokens seen at least min_count times.

    Ids are assigned deterministically: specials first, then corpus tokens by
    descending frequency with lexicographic tie-break.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for p in corpora:
        for s in p.steps:
            counts.update(s.tokens)
        for e in p.entities:
            counts.update(e.name_tokens)
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIAL_TOKENS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(kept)
