"""Bradley-Terry score estimation from a pairwise winning matrix.

Scores are fit by maximizing the comparison log-likelihood with a damped
Newton-Raphson, one method's score being pinned to 1 so the scale is fixed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "WinningMatrix",
    "ScoreVector",
    "UnderDeterminedError",
    "bt_fit",
    "bt_predict",
    "log_likelihood",
    "load_winning_matrix",
    "save_scores",
    "format_score_bars",
]

ANCHOR_SCORE = 1.0


class UnderDeterminedError(ValueError):
    """The comparison graph does not pin down every score."""


@dataclass
class WinningMatrix:
    """counts[i, j] = number of times method i was preferred over method j."""

    counts: np.ndarray
    labels: list[str]

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"counts must be square, got shape {c.shape}")
        if len(self.labels) != c.shape[0]:
            raise ValueError("label count does not match matrix size")
        if np.any(c < 0) or not np.all(c == np.round(c)):
            raise ValueError("counts must be nonnegative integers")
        if np.any(np.diag(c) != 0):
            raise ValueError("diagonal of the winning matrix must be zero")
        self.counts = c.astype(np.float64)

    @property
    def size(self) -> int:
        return self.counts.shape[0]


@dataclass
class ScoreVector:
    scores: np.ndarray
    anchor: int
    labels: list[str]

    def ranked(self):
        order = np.argsort(-self.scores)
        return [(self.labels[i], float(self.scores[i])) for i in order]


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_likelihood(w: np.ndarray, s: np.ndarray) -> float:
    """Sum of w_ij * log(sigmoid(s_i - s_j)) over all ordered pairs."""
    diff = s[:, None] - s[None, :]
    # log(sigmoid(d)) = -log1p(exp(-d)), stable for either sign
    logp = np.where(diff > 0, -np.log1p(np.exp(-np.abs(diff))), diff - np.log1p(np.exp(-np.abs(diff))))
    mask = w > 0
    return float((w[mask] * logp[mask]).sum())


def _check_connected(w: np.ndarray, anchor: int, labels) -> None:
    m = w.shape[0]
    adj = (w + w.T) > 0
    seen = np.zeros(m, dtype=bool)
    stack = [anchor]
    seen[anchor] = True
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not seen.all():
        missing = [labels[i] for i in np.flatnonzero(~seen)]
        raise UnderDeterminedError(
            "comparison graph is not connected to the anchor; "
            f"unreachable methods: {', '.join(missing)}"
        )


def bt_fit(
    matrix: WinningMatrix,
    anchor: int,
    tol: float = 1e-9,
    max_iters: int = 200,
) -> ScoreVector:
    """Maximum-likelihood scores with the anchor held at exactly 1.

    Newton steps are damped (halved until the likelihood improves) and the fit
    stops once the free-coordinate gradient norm drops below ``tol``.
    """
    w = matrix.counts
    m = matrix.size
    if not (0 <= anchor < m):
        raise ValueError(f"anchor index {anchor} out of range for {m} methods")
    _check_connected(w, anchor, matrix.labels)

    free = np.array([i for i in range(m) if i != anchor])
    s = np.full(m, ANCHOR_SCORE, dtype=np.float64)
    ll = log_likelihood(w, s)

    def gradient(scores):
        p = _sigmoid(scores[:, None] - scores[None, :])  # p[i, j] = P(i beats j)
        # row sums of w_ij * sigmoid(s_j - s_i) - w_ji * sigmoid(s_i - s_j)
        return ((w + w.T) * (1.0 - p) - w.T).sum(axis=1), p

    converged = False
    for _ in range(max_iters):
        grad_full, p = gradient(s)
        grad = grad_full[free]
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        pq = (w + w.T) * p * (1.0 - p)
        hess = pq[np.ix_(free, free)].copy()
        np.fill_diagonal(hess, -pq.sum(axis=1)[free])
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]

        improved = False
        scale = 1.0
        for _ in range(60):
            trial = s.copy()
            trial[free] = s[free] + scale * step
            trial_ll = log_likelihood(w, trial)
            if trial_ll >= ll:
                s, ll = trial, trial_ll
                improved = True
                break
            scale *= 0.5
        if not improved:
            break

    if not converged and np.max(np.abs(gradient(s)[0][free])) > tol:
        raise UnderDeterminedError(
            "Newton-Raphson did not converge; the comparison counts may be "
            "one-sided (a method with no wins or no losses has no finite score)"
        )
    return ScoreVector(scores=s, anchor=anchor, labels=list(matrix.labels))


def bt_predict(scores: ScoreVector | np.ndarray, i: int, j: int) -> float:
    """Probability that method i is preferred over method j."""
    s = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores)
    return float(_sigmoid(np.array([s[i] - s[j]]))[0])


def load_winning_matrix(path) -> WinningMatrix:
    """Read a winning matrix from CSV: one header row of labels, then counts."""
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError("empty winning-matrix CSV")
    labels = [cell.strip() for cell in rows[0]]
    m = len(labels)
    if len(rows) != m + 1:
        raise ValueError(f"expected {m} count rows after the header, got {len(rows) - 1}")
    counts = np.array([[int(cell) for cell in row] for row in rows[1:]], dtype=np.int64)
    if counts.shape != (m, m):
        raise ValueError(f"count rows must each have {m} entries")
    return WinningMatrix(counts=counts, labels=labels)


def save_scores(path, scores: ScoreVector) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "score"])
        for label, value in zip(scores.labels, scores.scores):
            writer.writerow([label, f"{value:.6f}"])


def format_score_bars(scores: ScoreVector, width: int = 40) -> str:
    """Text bar chart of the fitted scores, highest first."""
    ranked = scores.ranked()
    lo = min(v for _, v in ranked)
    hi = max(v for _, v in ranked)
    span = (hi - lo) or 1.0
    label_w = max(len(name) for name, _ in ranked)
    lines = []
    for name, value in ranked:
        bar = "#" * max(1, int(round(width * (value - lo) / span)))
        lines.append(f"{name:<{label_w}}  {value:+.4f}  {bar}")
    return "\n".join(lines)
