"""Shared test helpers: corpus builders and the finite-difference oracle."""

import numpy as np

from enttrack.corpus import EntityTrack, Process, Step, TaskKind, tokenize


def make_process(step_texts, entity_names, task=TaskKind.RECIPES, pid="p"):
    steps = [Step(text=t, tokens=tokenize(t)) for t in step_texts]
    entities = [
        EntityTrack(
            name=n,
            name_tokens=tokenize(n),
            labels=([0] * len(steps)) if task is TaskKind.RECIPES else (["O"] * len(steps)),
        )
        for n in entity_names
    ]
    return Process(id=pid, steps=steps, entities=entities, task_kind=task)


def fd_check(loss_fn, params, analytic, eps=1e-5, rel_tol=1e-4, max_entries=8, seed=0, names=None):
    """Compare analytic gradients against central finite differences.

    Perturbs a deterministic sample of entries per tensor in place; the
    loss_fn closure must recompute the loss from the live params.
    """
    rng = np.random.default_rng(seed)
    checked = 0
    for name in (names if names is not None else params):
        flat = params[name].reshape(-1)
        k = min(max_entries, flat.size)
        idxs = rng.choice(flat.size, size=k, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            analytic_val = float(np.asarray(analytic[name]).reshape(-1)[i])
            # the 1e-6 floor keeps FD roundoff noise from dominating the
            # relative error on near-zero gradients
            rel = abs(numeric - analytic_val) / max(abs(numeric), abs(analytic_val), 1e-6)
            assert rel < rel_tol, (
                f"{name}[{i}]: numeric={numeric:.3e} analytic={analytic_val:.3e} rel={rel:.3e}"
            )
            checked += 1
    return checked
