"""Deterministic synthetic corpora for sanity checks and acceptance runs.

The "xor" recipes corpus makes the presence bit depend jointly on the
conditioned entity and the step's verb: group-A ingredients are used on
mix-type verbs, group-B ingredients on cook-type verbs. Every step names
both entities, and each process balances the two verb types, so a purely
additive decision over (shared step encoding, entity embedding) can label
at most three of the four (entity group, verb group) cells correctly.
Entity-aware encodings can label all four.

The "verb-only" variant drops the entity dependence (the bit is a function
of the verb alone), the "lm" corpus is one six-token sentence repeated for
memorization tests, and "propara-toy" scripts valid state-change tracks.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import EntityTrack, Process, Step, TaskKind, save_corpus, tokenize

A_NOUNS = ("salt", "sugar", "flour", "rice")
B_NOUNS = ("milk", "water", "cream", "broth")
U_VERBS = ("mix", "stir", "whisk", "fold")
V_VERBS = ("bake", "chill", "roast", "simmer")
FILLERS = ("now", "then", "gently", "slowly", "next", "carefully")

LM_SENTENCE = "stir the pot and serve warm"

KINDS = ("xor", "verb-only", "lm", "propara-toy")


def _recipe_step(verb: str, noun_a: str, noun_b: str, rng: np.random.Generator) -> Step:
    # Random filler adverbs vary the step length so absolute positions
    # carry no label signal; only the verb and the entities do.
    tokens, pos = [], []
    if rng.random() < 0.5:
        tokens.append(str(rng.choice(FILLERS)))
        pos.append("R")
    tokens.append(verb)
    pos.append("V")
    tokens += ["the", noun_a, "and", noun_b]
    pos += ["D", "N", "C", "N"]
    if rng.random() < 0.5:
        tokens.append(str(rng.choice(FILLERS)))
        pos.append("R")
    return Step(text=" ".join(tokens), tokens=tokens, pos=pos)


def _recipe_process(pid: str, rng: np.random.Generator, entity_blind: bool) -> Process:
    noun_a = str(rng.choice(A_NOUNS))
    noun_b = str(rng.choice(B_NOUNS))
    # Two verbs of each type per process keeps every (entity, verb) cell balanced.
    verbs = [str(rng.choice(U_VERBS)), str(rng.choice(U_VERBS)),
             str(rng.choice(V_VERBS)), str(rng.choice(V_VERBS))]
    rng.shuffle(verbs)
    steps = [_recipe_step(v, noun_a, noun_b, rng) for v in verbs]
    is_mix = [int(v in U_VERBS) for v in verbs]
    if entity_blind:
        labels_a = list(is_mix)
        labels_b = list(is_mix)
    else:
        labels_a = list(is_mix)
        labels_b = [1 - b for b in is_mix]
    zeros = [0] * len(steps)
    entities = [
        EntityTrack(name=noun_a, name_tokens=tokenize(noun_a), labels=labels_a, combined=zeros),
        EntityTrack(name=noun_b, name_tokens=tokenize(noun_b), labels=labels_b, combined=list(zeros)),
    ]
    return Process(id=pid, steps=steps, entities=entities, task_kind=TaskKind.RECIPES)


def gen_recipes(
    n: int, seed: int, entity_blind: bool = False, prefix: str = "syn"
) -> list[Process]:
    rng = np.random.default_rng(seed)
    return [_recipe_process(f"{prefix}-{i:03d}", rng, entity_blind) for i in range(n)]


def gen_lm(n_copies: int = 200) -> list[Process]:
    tokens = tokenize(LM_SENTENCE)
    return [
        Process(
            id=f"lm-{i:03d}",
            steps=[Step(text=LM_SENTENCE, tokens=list(tokens))],
            entities=[],
            task_kind=TaskKind.RECIPES,
        )
        for i in range(n_copies)
    ]


_STUFF = ("vapor", "ice", "magma", "silt", "ozone", "sap")


def _propara_process(pid: str, rng: np.random.Generator) -> Process:
    T = int(rng.integers(3, 6))
    name = str(rng.choice(_STUFF))
    # Script one valid track: optional creation, existence with moves,
    # optional destruction; entities may also pre-exist.
    pre_exists = bool(rng.random() < 0.4)
    create_at = 0 if pre_exists else int(rng.integers(0, T - 1))
    destroy_at = T - 1 if rng.random() < 0.6 else None
    tags = []
    steps = []
    alive = pre_exists
    for t in range(T):
        if not pre_exists and t == create_at:
            tags.append("C")
            steps.append(f"{name} forms in the chamber")
            alive = True
        elif destroy_at is not None and t == destroy_at and alive:
            tags.append("D")
            steps.append(f"the {name} dissolves away")
            alive = False
        elif alive:
            if rng.random() < 0.4:
                tags.append("M")
                steps.append(f"the {name} shifts to the basin")
            else:
                tags.append("E")
                steps.append(f"the {name} rests in place")
        else:
            tags.append("O")
            steps.append("nothing notable happens here")
    step_objs = [Step(text=s, tokens=tokenize(s)) for s in steps]
    entities = [EntityTrack(name=name, name_tokens=tokenize(name), labels=tags)]
    return Process(id=pid, steps=step_objs, entities=entities, task_kind=TaskKind.PROPARA)


def gen_propara(n: int, seed: int, prefix: str = "ptoy") -> list[Process]:
    rng = np.random.default_rng(seed)
    return [_propara_process(f"{prefix}-{i:03d}", rng) for i in range(n)]


def generate(
    kind: str,
    out_dir: str | Path,
    seed: int = 0,
    n_train: int = 96,
    n_dev: int = 16,
    n_test: int = 16,
) -> dict[str, str]:
    """Write train/dev/test JSONL splits for a synthetic corpus kind."""
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "lm":
        splits = {"train": gen_lm(n_train if n_train != 96 else 200)}
    else:
        blind = kind == "verb-only"
        gen = gen_propara if kind == "propara-toy" else (
            lambda n, s, prefix: gen_recipes(n, s, entity_blind=blind, prefix=prefix)
        )
        splits = {
            "train": gen(n_train, seed, prefix="train"),
            "dev": gen(n_dev, seed + 1, prefix="dev"),
            "test": gen(n_test, seed + 2, prefix="test"),
        }
    paths = {}
    for split, processes in splits.items():
        path = out / f"{split}.jsonl"
        save_corpus(processes, path)
        paths[split] = str(path)
    return paths
