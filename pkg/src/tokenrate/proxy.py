"""Differentiable discrete proxy for per-block compression rates.

A block's rate is a mixture over the discrete candidates ``C_k = (k-1)/N``
with softmax-parameterised probabilities.  The mixture yields an expected
rate (used by the cost models) and a hard 0/1 keep mask over importance ranks
(used by the forward pass).  The mask carries a straight-through gradient to
the keep probability ``1 - pi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

PRUNE = "prune"
MERGE = "merge"


def candidate_rates(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) / n


def _reverse_cumsum_matrix(n: int) -> np.ndarray:
    # row k (0-based) sums rho[i] for i >= n - k; row 0 is empty
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    return (i >= n - k).astype(np.float64)


_RC_CACHE: dict[int, np.ndarray] = {}


def probs(logits: Tensor) -> Tensor:
    """Candidate probabilities: softmax of free logits, always on the simplex."""
    return ag.softmax(logits)


def alpha(rho: Tensor) -> Tensor:
    """Expected compression rate ``sum_k C_k rho_k``."""
    c = Tensor(candidate_rates(rho.shape[0]))
    return ag.sum_(rho * c)


def token_probs(rho: Tensor) -> Tensor:
    """Probability that the k-th ranked token is removed (reverse cumulative sum)."""
    n = rho.shape[0]
    mat = _RC_CACHE.get(n)
    if mat is None:
        mat = _RC_CACHE[n] = _reverse_cumsum_matrix(n)
    return ag.matmul(Tensor(mat), rho)


def hard_mask(pi: np.ndarray, alpha_value: float) -> np.ndarray:
    if alpha_value <= 0.0:
        return np.ones_like(pi)
    return (pi < alpha_value).astype(np.float64)


def token_mask(pi: Tensor, alpha_t: Tensor) -> Tensor:
    """0/1 keep mask ``m_k = [pi_k < alpha]`` with a straight-through gradient.

    The mask marks kept tokens while ``pi`` is a removal probability, so the
    surrogate is the keep probability ``1 - pi`` (``dm/dpi = -1``).
    """
    hard = hard_mask(pi.data, float(alpha_t.data))
    return ag.ste(Tensor(hard), 1.0 - pi)


def combine_masks(*masks: Tensor) -> Tensor:
    """Elementwise product in rank space; a token dropped earlier stays dropped."""
    if not masks:
        raise ShapeError("combine_masks needs at least one mask")
    out = masks[0]
    for m in masks[1:]:
        if m.shape != out.shape:
            raise ShapeError(f"combine_masks: lengths {out.shape} and {m.shape}")
        out = out * m
    return out


def attention_mask(m: Tensor) -> Tensor:
    """``M_ij = 1`` on the diagonal and ``m_j`` elsewhere."""
    n = m.shape[0]
    eye = np.eye(n)
    rows = ag.broadcast_to(m, (n, n))
    return rows * Tensor(1.0 - eye) + Tensor(eye)


def masked_softmax(scores: Tensor, mask_matrix: Tensor) -> Tensor:
    return ag.masked_softmax(scores, mask_matrix)


def kept_count(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask > 0.5))


def is_prefix(mask: np.ndarray) -> bool:
    """True when no kept entry follows a dropped one."""
    m = np.asarray(mask) > 0.5
    k = int(m.sum())
    return bool(m[:k].all() and not m[k:].any())


@dataclass
class RateParam:
    """Learnable logits over the candidate rates of one block and role."""

    token_count: int
    role: str = PRUNE
    block: int = 0
    logits: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.role not in (PRUNE, MERGE):
            raise ValueError(f"unknown rate role {self.role!r}")
        if self.logits is None:
            self.logits = Tensor(np.zeros(self.token_count), requires_grad=True)
        elif self.logits.shape != (self.token_count,):
            raise ShapeError(f"logits shape {self.logits.shape} != ({self.token_count},)")

    @property
    def name(self) -> str:
        return f"{self.role}.{self.block}"

    def rho(self) -> Tensor:
        return probs(self.logits)

    def evaluate(self) -> tuple[Tensor, Tensor, Tensor]:
        """Return (alpha, pi, mask) for the current logits."""
        rho = self.rho()
        a = alpha(rho)
        pi = token_probs(rho)
        return a, pi, token_mask(pi, a)

    def hard_kept(self) -> int:
        with ag.no_grad():
            a, pi, m = self.evaluate()
        return kept_count(m.data)

    def expected_kept(self) -> float:
        with ag.no_grad():
            a = alpha(self.rho())
        return self.token_count * (1.0 - float(a.data))


@dataclass
class MaskState:
    """Masks of one block in importance-rank order."""

    m: np.ndarray
    prune_mask: np.ndarray | None = None
    merge_mask: np.ndarray | None = None
    prune_pi: np.ndarray | None = None
    merge_pi: np.ndarray | None = None
    order: np.ndarray | None = None

    @property
    def kept(self) -> int:
        return kept_count(self.m)
