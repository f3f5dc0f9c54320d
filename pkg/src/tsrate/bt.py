"""Bradley-Terry score fitting from filtered pairwise confidences.

Maximizes sum over judgments of
``p * log sigmoid(s_i - s_j) + (1 - p) * log sigmoid(s_j - s_i)``
by gradient ascent with a backtracking step.  The objective is concave in
the score vector, so a zero initialization always reaches the optimum;
scores are anchored to mean zero within each connected component of the
comparison graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from tsrate.judge import JudgmentRecord
from tsrate.numutil import log_sigmoid, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BTOptions:
    step_init: float = 0.1
    max_iterations: int = 10_000
    grad_tol: float = 1e-8
    loglik_tol: float = 1e-12

    def __post_init__(self):
        if self.step_init <= 0 or self.max_iterations < 1:
            raise ValueError("invalid Bradley-Terry options")


@dataclass
class BTFit:
    """Fitted per-block scores plus the ascent trace."""

    scores: dict[str, float]
    log_likelihood: float
    iterations: int
    converged: bool
    components: list[list[str]]
    trace: list[float] = field(default_factory=list)

    def to_dict(self, criterion: str = "") -> dict:
        return {
            "criterion": criterion,
            "scores": {k: float(v) for k, v in sorted(self.scores.items())},
            "log_likelihood": float(self.log_likelihood),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _connected_components(n: int, i_idx: np.ndarray, j_idx: np.ndarray) -> np.ndarray:
    """Union-find over n nodes; returns a component label per node."""
    parent = np.arange(n)

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    for a, b in zip(i_idx, j_idx):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[rb] = ra
    labels = np.array([find(k) for k in range(n)])
    # Relabel to consecutive ids in first-appearance order.
    _, labels = np.unique(labels, return_inverse=True)
    return labels


def fit_bt(
    judgments: list[JudgmentRecord],
    options: BTOptions | None = None,
    init_scores: dict[str, float] | None = None,
) -> BTFit:
    """Fit block scores for one criterion's judgments.

    The step size starts at ``step_init``, halves whenever a proposed step
    would decrease the objective, and doubles after each accepted step so
    the ascent tracks the local curvature.  Convergence is declared when the
    gradient infinity-norm drops below ``grad_tol`` or an accepted step
    improves the objective by less than ``loglik_tol``.  The objective is
    concave, so the default zero initialization (or any ``init_scores``
    override) reaches the same anchored optimum.
    """
    if not judgments:
        raise ValueError("cannot fit Bradley-Terry scores from zero judgments")
    options = options or BTOptions()

    block_ids = sorted({r.block_i for r in judgments} | {r.block_j for r in judgments})
    index = {b: k for k, b in enumerate(block_ids)}
    n = len(block_ids)

    # Orient every record so its confidence is >= 0.5 (ties by block id).
    # The complement 1 - (1 - p) round-trips exactly for p >= 0.5, which
    # makes the fit bitwise-invariant to how callers orient their records.
    i_list, j_list, p_list = [], [], []
    for r in judgments:
        if not 0.0 <= r.confidence_p <= 1.0:
            raise ValueError("confidences must lie in [0, 1]")
        flip = r.confidence_p < 0.5 or (
            r.confidence_p == 0.5 and r.block_j < r.block_i
        )
        if flip:
            i_list.append(index[r.block_j])
            j_list.append(index[r.block_i])
            p_list.append(1.0 - r.confidence_p)
        else:
            i_list.append(index[r.block_i])
            j_list.append(index[r.block_j])
            p_list.append(r.confidence_p)
    i_idx = np.array(i_list)
    j_idx = np.array(j_list)
    p = np.array(p_list, dtype=np.float64)

    labels = _connected_components(n, i_idx, j_idx)
    n_components = int(labels.max()) + 1
    if n_components > 1:
        sizes = np.bincount(labels).tolist()
        logger.warning(
            "comparison graph has %d connected components (sizes %s); "
            "scores are anchored per component",
            n_components,
            sizes,
        )

    def loglik(s: np.ndarray) -> float:
        d = s[i_idx] - s[j_idx]
        return float(np.sum(p * log_sigmoid(d) + (1.0 - p) * log_sigmoid(-d)))

    def gradient(s: np.ndarray) -> np.ndarray:
        d = s[i_idx] - s[j_idx]
        e = p - sigmoid(d)
        g = np.zeros(n)
        np.add.at(g, i_idx, e)
        np.add.at(g, j_idx, -e)
        return g

    s = np.zeros(n)
    if init_scores is not None:
        for block_id, value in init_scores.items():
            if block_id in index:
                s[index[block_id]] = float(value)
    current = loglik(s)
    trace = [current]
    step = options.step_init
    converged = False
    iterations = 0
    while iterations < options.max_iterations:
        g = gradient(s)
        if not np.isfinite(g).all():
            raise ArithmeticError(f"non-finite gradient at iteration {iterations}")
        if np.abs(g).max() < options.grad_tol:
            converged = True
            break
        accepted = False
        while step > 1e-30:
            candidate = s + step * g
            value = loglik(candidate)
            if not np.isfinite(value):
                step *= 0.5
                continue
            if value >= current:
                improvement = value - current
                s, current = candidate, value
                trace.append(current)
                accepted = True
                step = min(step * 2.0, 1e6)
                break
            step *= 0.5
        iterations += 1
        if not accepted:
            converged = True
            break
        if improvement < options.loglik_tol:
            converged = True
            break

    # Anchor every connected component at mean zero.
    for comp in range(n_components):
        mask = labels == comp
        s[mask] -= s[mask].mean()

    components = [
        [block_ids[k] for k in np.flatnonzero(labels == comp)]
        for comp in range(n_components)
    ]
    return BTFit(
        scores={b: float(s[index[b]]) for b in block_ids},
        log_likelihood=loglik(s),
        iterations=iterations,
        converged=converged,
        components=components,
        trace=trace,
    )
