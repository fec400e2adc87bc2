"""Bradley-Terry scores from pairwise preference counts via MM iteration."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import DataError, FitError, PreconditionError


@dataclass(frozen=True)
class PairwiseResults:
    methods: tuple[str, ...]
    wins: np.ndarray  # wins[i, j] = times method i was preferred over method j

    def __post_init__(self):
        w = np.asarray(self.wins, dtype=np.float64)
        k = len(self.methods)
        if k < 2:
            raise PreconditionError("need at least two methods")
        if len(set(self.methods)) != k:
            raise DataError("method names must be unique")
        if w.shape != (k, k):
            raise DataError(f"wins matrix must be {k}x{k}, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DataError("wins must be finite and nonnegative")
        if np.any(np.diag(w) != 0):
            raise DataError("wins diagonal must be zero")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "wins", w)

    @classmethod
    def from_pairs(cls, pairs, methods=None) -> "PairwiseResults":
        """Count ``(winner, loser)`` pairs; methods default to sorted unique names."""
        pairs = list(pairs)
        if methods is None:
            methods = sorted({m for p in pairs for m in p})
        index = {m: i for i, m in enumerate(methods)}
        w = np.zeros((len(methods), len(methods)))
        for winner, loser in pairs:
            if winner == loser:
                raise DataError(f"method {winner!r} compared with itself")
            w[index[winner], index[loser]] += 1
        return cls(tuple(methods), w)

    @classmethod
    def load(cls, path) -> "PairwiseResults":
        """Read a ``winner,loser`` CSV or a JSON ``{"methods": [...], "wins": [[...]]}``."""
        path = Path(path)
        if path.suffix.lower() == ".json":
            d = json.loads(path.read_text())
            return cls(tuple(d["methods"]), np.asarray(d["wins"], dtype=np.float64))
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and [c.strip().lower() for c in rows[0]] == ["winner", "loser"]:
            rows = rows[1:]
        return cls.from_pairs((r[0].strip(), r[1].strip()) for r in rows)


@dataclass(frozen=True)
class BtScores:
    methods: tuple[str, ...]
    scores: np.ndarray
    iterations: int
    converged: bool
    log_likelihoods: tuple[float, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.methods, map(float, self.scores)))


def log_likelihood(wins: np.ndarray, log_strength: np.ndarray) -> float:
    """Sum over ordered pairs of wins[i, j] * log P(i beats j)."""
    diff = log_strength[:, None] - log_strength[None, :]
    logp = -np.logaddexp(0.0, -diff)
    np.fill_diagonal(logp, 0.0)
    return float(np.sum(wins * logp))


def is_strongly_connected(wins: np.ndarray) -> bool:
    n_comp, _ = connected_components(wins > 0, directed=True, connection="strong")
    return n_comp == 1


def fit_bt(results: PairwiseResults, max_iters: int = 10_000, tol: float = 1e-10,
           prior: float = 0.1) -> BtScores:
    """Maximum-likelihood Bradley-Terry log-strengths, shifted to zero mean.

    ``prior`` pseudo-wins are added to every ordered pair before fitting.  Each
    MM update is ``p_i <- W_i / sum_j n_ij / (p_i + p_j)`` and must not lower
    the log-likelihood; convergence is declared when no log-strength moves by
    more than ``tol``.
    """
    if prior < 0:
        raise PreconditionError("prior must be nonnegative")
    k = len(results.methods)
    w = results.wins + prior * (1.0 - np.eye(k))
    if not is_strongly_connected(w):
        raise FitError("comparison graph is not strongly connected; the MLE does not exist (use prior > 0)")
    n = w + w.T
    total_wins = w.sum(axis=1)
    theta = np.zeros(k)
    lls = [log_likelihood(w, theta)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        p = np.exp(theta)
        denom = n / (p[:, None] + p[None, :])
        np.fill_diagonal(denom, 0.0)
        new = np.log(total_wins) - np.log(denom.sum(axis=1))
        new -= new.mean()
        ll = log_likelihood(w, new)
        if ll < lls[-1] - 1e-9 * max(1.0, abs(lls[-1])):
            raise FitError(f"log-likelihood decreased at iteration {it}: {lls[-1]} -> {ll}")
        lls.append(ll)
        step = np.max(np.abs(new - theta))
        theta = new
        if step < tol:
            converged = True
            break
    return BtScores(results.methods, theta - theta.mean(), it, converged, tuple(lls))


def rank_table(scores: BtScores) -> list[tuple[int, str, float]]:
    """Rows ``(rank, method, score)`` sorted by descending score, ties by name."""
    order = sorted(zip(scores.methods, scores.scores), key=lambda t: (-float(t[1]), t[0]))
    return [(i + 1, m, float(s)) for i, (m, s) in enumerate(order)]


def rank_csv(scores: BtScores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "method", "bt_score"])
    for r, m, s in rank_table(scores):
        w.writerow([r, m, f"{s:.6f}"])
    return buf.getvalue()


def rank_markdown(scores: BtScores) -> str:
    lines = ["| Rank | Method | B-T score |", "|---:|:---|---:|"]
    for r, m, s in rank_table(scores):
        lines.append(f"| {r} | {m} | {s:.4f} |")
    return "\n".join(lines) + "\n"


def simulate(strengths, n_per_pair: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a wins matrix from the B-T model with the given log-strengths."""
    s = np.asarray(strengths, dtype=np.float64)
    k = s.size
    wins = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            p = 1.0 / (1.0 + np.exp(s[j] - s[i]))
            a = rng.binomial(n_per_pair, p)
            wins[i, j], wins[j, i] = a, n_per_pair - a
    return wins
