"""Constrained linear-chain CRF over entity state-change tags.

Surface tags are O (none), C (create), E (exists), M (move), D (destroy).
Internally O is split into O_B (before any existence) and O_A (after
destruction) so that the existence cycle becomes a first-order transition
constraint: an entity may exist from the start or be created once, it may
then exist/move/be destroyed, and after destruction only O follows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SURFACE_TAGS = ("O", "C", "E", "M", "D")
EXPANDED_TAGS = ("O_B", "C", "E", "M", "D", "O_A")
N_SURFACE = len(SURFACE_TAGS)
N_EXPANDED = len(EXPANDED_TAGS)

# Expanded tag indices.
OB, TC, TE, TM, TD, OA = range(N_EXPANDED)

# Collapse map: expanded index -> surface index (O_B and O_A both -> O).
EXPANDED_TO_SURFACE = (0, 1, 2, 3, 4, 0)

# Emission projection: surface index -> expanded indices sharing its score.
SURFACE_TO_EXPANDED = ((OB, OA), (TC,), (TE,), (TM,), (TD,))

_EXIST = (TE, TM, TD)


def transition_mask() -> np.ndarray:
    """Boolean (6, 6) matrix of allowed expanded-tag successors."""
    mask = np.zeros((N_EXPANDED, N_EXPANDED), dtype=bool)
    mask[OB, [OB, TC]] = True
    mask[TC, list(_EXIST)] = True
    mask[TE, list(_EXIST)] = True
    mask[TM, list(_EXIST)] = True
    mask[TD, OA] = True
    mask[OA, OA] = True
    return mask


def start_mask() -> np.ndarray:
    """Valid first tags: everything except O_A (an entity may pre-exist)."""
    valid = np.ones(N_EXPANDED, dtype=bool)
    valid[OA] = False
    return valid


def end_mask() -> np.ndarray:
    return np.ones(N_EXPANDED, dtype=bool)


@dataclass
class TagLattice:
    """Per-step emission potentials plus transition scores and validity masks.

    potentials: (T, 6) expanded-tag scores. transitions: (6, 6) learned real
    scores; entries where mask is False are treated as -inf everywhere.
    """

    potentials: np.ndarray
    transitions: np.ndarray
    mask: np.ndarray = field(default_factory=transition_mask)
    start_valid: np.ndarray = field(default_factory=start_mask)
    end_valid: np.ndarray = field(default_factory=end_mask)

    def __post_init__(self):
        self.potentials = np.asarray(self.potentials, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        if self.potentials.ndim != 2 or self.potentials.shape[1] != N_EXPANDED:
            raise ValueError(f"potentials must be (T, {N_EXPANDED}), got {self.potentials.shape}")
        if self.potentials.shape[0] < 1:
            raise ValueError("lattice needs at least one step")
        if self.transitions.shape != (N_EXPANDED, N_EXPANDED):
            raise ValueError("transitions must be (6, 6)")
        if not self.mask.any(axis=1).all():
            raise ValueError("every tag needs at least one allowed successor")

    @property
    def n_steps(self) -> int:
        return self.potentials.shape[0]

    def masked_transitions(self) -> np.ndarray:
        return np.where(self.mask, self.transitions, -np.inf)

    def start_scores(self) -> np.ndarray:
        return np.where(self.start_valid, 0.0, -np.inf)

    def end_scores(self) -> np.ndarray:
        return np.where(self.end_valid, 0.0, -np.inf)


def expand_emissions(surface_scores: np.ndarray) -> np.ndarray:
    """Map (T, 5) surface-tag scores to (T, 6) expanded potentials.

    O_B and O_A share the surface O score; C/E/M/D map to themselves.
    """
    surface_scores = np.asarray(surface_scores)
    if surface_scores.ndim != 2 or surface_scores.shape[1] != N_SURFACE:
        raise ValueError(f"expected (T, {N_SURFACE}) surface scores")
    out = np.empty((surface_scores.shape[0], N_EXPANDED), dtype=surface_scores.dtype)
    for s, targets in enumerate(SURFACE_TO_EXPANDED):
        for e in targets:
            out[:, e] = surface_scores[:, s]
    return out


def collapse_emission_grads(d_potentials: np.ndarray) -> np.ndarray:
    """Fold (T, 6) potential gradients back onto (T, 5) surface scores."""
    d_potentials = np.asarray(d_potentials)
    out = np.empty((d_potentials.shape[0], N_SURFACE), dtype=d_potentials.dtype)
    for s, targets in enumerate(SURFACE_TO_EXPANDED):
        out[:, s] = sum(d_potentials[:, e] for e in targets)
    return out


def expand_gold(tags: list[str]) -> list[int]:
    """Disambiguate surface O tags: O_B before the first C/E/M/D, O_A after."""
    first_event = next((i for i, t in enumerate(tags) if t != "O"), len(tags))
    out = []
    for i, t in enumerate(tags):
        if t == "O":
            out.append(OB if i < first_event else OA)
        else:
            out.append(SURFACE_TAGS.index(t) if t in SURFACE_TAGS else -1)
            if out[-1] < 0:
                raise ValueError(f"unknown tag {t!r}")
    return out


def lifecycle_violation(tags: list[str]) -> str | None:
    """Describe the first existence-cycle violation in a surface tag sequence.

    Returns None for valid sequences. Checked against the same transition
    mask used for decoding, so gold data accepted here is always feasible.
    """
    if not tags:
        return "empty tag sequence"
    if any(t not in SURFACE_TAGS for t in tags):
        bad = next(t for t in tags if t not in SURFACE_TAGS)
        return f"unknown tag {bad!r}"
    expanded = expand_gold(tags)
    if not start_mask()[expanded[0]]:
        return f"sequence may not start with {EXPANDED_TAGS[expanded[0]]}"
    mask = transition_mask()
    for i in range(1, len(expanded)):
        prev, cur = expanded[i - 1], expanded[i]
        if not mask[prev, cur]:
            if cur == TC:
                if prev == OA or prev == TD:
                    return f"created after destruction (step {i + 1})"
                return f"created after existing (step {i + 1})"
            if prev in (TD, OA):
                return f"{SURFACE_TAGS[EXPANDED_TO_SURFACE[cur]]} after destruction (step {i + 1})"
            return (
                f"invalid transition {EXPANDED_TAGS[prev]} -> {EXPANDED_TAGS[cur]}"
                f" (step {i + 1})"
            )
    return None


def is_valid_sequence(tags: list[str]) -> bool:
    return lifecycle_violation(tags) is None


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-sum-exp that maps all-(-inf) slices to -inf without warnings."""
    m = np.max(x, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - safe), axis=axis, keepdims=True)) + safe
    out = np.where(np.isfinite(m), out, -np.inf)
    return np.squeeze(out, axis=axis)


def viterbi(lattice: TagLattice) -> tuple[list[str], float]:
    """Best valid tag sequence and its total potential-plus-transition score.

    Ties are broken toward the lowest expanded-tag index. The returned
    sequence is collapsed to surface tags.
    """
    pot = lattice.potentials
    trans = lattice.masked_transitions()
    T = lattice.n_steps
    trellis = np.full((T, N_EXPANDED), -np.inf)
    backptr = np.zeros((T, N_EXPANDED), dtype=np.int64)
    trellis[0] = pot[0] + lattice.start_scores()
    for t in range(1, T):
        # cand[j, k] = trellis[t-1, j] + trans[j, k]
        cand = trellis[t - 1][:, None] + trans
        backptr[t] = np.argmax(cand, axis=0)
        trellis[t] = pot[t] + np.max(cand, axis=0)
    final = trellis[T - 1] + lattice.end_scores()
    best = int(np.argmax(final))
    score = float(final[best])
    path = [best]
    for t in range(T - 1, 0, -1):
        path.append(int(backptr[t, path[-1]]))
    path.reverse()
    return [SURFACE_TAGS[EXPANDED_TO_SURFACE[e]] for e in path], score


def forward_log_alphas(lattice: TagLattice) -> np.ndarray:
    pot = lattice.potentials
    trans = lattice.masked_transitions()
    alphas = np.full((lattice.n_steps, N_EXPANDED), -np.inf)
    alphas[0] = pot[0] + lattice.start_scores()
    for t in range(1, lattice.n_steps):
        alphas[t] = pot[t] + _logsumexp(alphas[t - 1][:, None] + trans, axis=0)
    return alphas


def backward_log_betas(lattice: TagLattice) -> np.ndarray:
    pot = lattice.potentials
    trans = lattice.masked_transitions()
    T = lattice.n_steps
    betas = np.full((T, N_EXPANDED), -np.inf)
    betas[T - 1] = lattice.end_scores()
    for t in range(T - 2, -1, -1):
        betas[t] = _logsumexp(trans + (pot[t + 1] + betas[t + 1])[None, :], axis=1)
    return betas


def log_partition(lattice: TagLattice) -> float:
    """Log-sum-exp of every valid path's total score (forward algorithm)."""
    alphas = forward_log_alphas(lattice)
    return float(_logsumexp(alphas[-1] + lattice.end_scores(), axis=0))


def marginals(lattice: TagLattice) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-step tag marginals, per-edge transition marginals, and log Z."""
    alphas = forward_log_alphas(lattice)
    betas = backward_log_betas(lattice)
    log_z = float(_logsumexp(alphas[-1] + lattice.end_scores(), axis=0))
    unary = np.exp(alphas + betas - log_z)
    T = lattice.n_steps
    pairwise = np.zeros((max(T - 1, 0), N_EXPANDED, N_EXPANDED))
    trans = lattice.masked_transitions()
    pot = lattice.potentials
    for t in range(T - 1):
        edge = alphas[t][:, None] + trans + (pot[t + 1] + betas[t + 1])[None, :]
        pairwise[t] = np.exp(edge - log_z)
    return unary, pairwise, log_z


def score_expanded_path(lattice: TagLattice, path: list[int]) -> float:
    """Total score of an expanded-tag path; -inf if the path is invalid."""
    if len(path) != lattice.n_steps:
        raise ValueError("path length mismatch")
    if not lattice.start_valid[path[0]] or not lattice.end_valid[path[-1]]:
        return -np.inf
    score = float(lattice.potentials[0, path[0]])
    for t in range(1, len(path)):
        if not lattice.mask[path[t - 1], path[t]]:
            return -np.inf
        score += float(lattice.transitions[path[t - 1], path[t]])
        score += float(lattice.potentials[t, path[t]])
    return score


def nll_loss(
    lattice: TagLattice, gold: list[str]
) -> tuple[float, np.ndarray, np.ndarray]:
    """CRF negative log-likelihood of a gold surface tag sequence.

    Returns (loss, d_potentials, d_transitions) where the gradients are
    marginal-minus-gold-indicator, exact for the masked lattice.
    """
    if len(gold) != lattice.n_steps:
        raise ValueError("gold length mismatch")
    path = expand_gold(gold)
    gold_score = score_expanded_path(lattice, path)
    if not np.isfinite(gold_score):
        raise ValueError(f"gold sequence {gold} is infeasible under the transition mask")
    unary, pairwise, log_z = marginals(lattice)
    loss = log_z - gold_score
    d_pot = unary.copy()
    d_trans = pairwise.sum(axis=0) if lattice.n_steps > 1 else np.zeros((N_EXPANDED, N_EXPANDED))
    for t, e in enumerate(path):
        d_pot[t, e] -= 1.0
        if t > 0:
            d_trans[path[t - 1], e] -= 1.0
    d_trans[~lattice.mask] = 0.0
    return float(loss), d_pot, d_trans


def enumerate_valid_paths(
    n_steps: int,
    mask: np.ndarray | None = None,
    start_valid: np.ndarray | None = None,
    end_valid: np.ndarray | None = None,
) -> list[tuple[int, ...]]:
    """All valid expanded-tag paths of a given length (for small n_steps)."""
    mask = transition_mask() if mask is None else mask
    start_valid = start_mask() if start_valid is None else start_valid
    end_valid = end_mask() if end_valid is None else end_valid
    paths: list[tuple[int, ...]] = []

    def extend(prefix: tuple[int, ...]):
        if len(prefix) == n_steps:
            if end_valid[prefix[-1]]:
                paths.append(prefix)
            return
        for nxt in range(N_EXPANDED):
            if mask[prefix[-1], nxt]:
                extend(prefix + (nxt,))

    for first in range(N_EXPANDED):
        if start_valid[first]:
            extend((first,))
    return paths
