"""Per-block compression schedules and their JSON file format.

A schedule stores integer kept-token counts for the pruning and merging
stages of every block, counted on the full sequence length ``N`` (class token
included).  The running count after block ``l`` is the minimum of everything
seen so far, which is the integer form of ``alpha^l = max(alpha^{l-1},
alpha_p^l, alpha_m^l)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class CompressionSchedule:
    token_count: int
    prune_kept: list[int]
    merge_kept: list[int]
    model: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prune_kept = [int(k) for k in self.prune_kept]
        self.merge_kept = [int(k) for k in self.merge_kept]
        if len(self.prune_kept) != len(self.merge_kept):
            raise ValueError("prune and merge rows differ in length")
        for k in self.prune_kept + self.merge_kept:
            if not 1 <= k <= self.token_count:
                raise ValueError(f"kept count {k} outside [1, {self.token_count}]")

    @property
    def depth(self) -> int:
        return len(self.prune_kept)

    @classmethod
    def zero(cls, token_count: int, depth: int) -> CompressionSchedule:
        return cls(token_count, [token_count] * depth, [token_count] * depth)

    @classmethod
    def from_alphas(cls, token_count: int, alpha_p, alpha_m) -> CompressionSchedule:
        n = token_count
        kp = [n - int(round(n * a)) for a in alpha_p]
        km = [n - int(round(n * a)) for a in alpha_m]
        return cls(n, kp, km)

    def alphas(self) -> tuple[list[float], list[float]]:
        n = self.token_count
        return [(n - k) / n for k in self.prune_kept], [(n - k) / n for k in self.merge_kept]

    def effective_counts(self) -> list[int]:
        """Tokens alive after each block's compression."""
        out, cur = [], self.token_count
        for kp, km in zip(self.prune_kept, self.merge_kept):
            cur = min(cur, kp, km)
            out.append(cur)
        return out

    def stage_counts(self) -> list[tuple[int, int, int]]:
        """(tokens in, after pruning, after merging) per block."""
        out, cur = [], self.token_count
        for kp, km in zip(self.prune_kept, self.merge_kept):
            after_p = min(cur, kp)
            after_m = min(after_p, km)
            out.append((cur, after_p, after_m))
            cur = after_m
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "token_count": self.token_count,
            "model": self.model,
            "prune_kept": list(self.prune_kept),
            "merge_kept": list(self.merge_kept),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CompressionSchedule:
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported schedule format version {version!r}")
        return cls(
            token_count=int(d["token_count"]),
            prune_kept=d["prune_kept"],
            merge_kept=d["merge_kept"],
            model=dict(d.get("model", {})),
            provenance=dict(d.get("provenance", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> CompressionSchedule:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressionSchedule):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def random_schedule(token_count: int, depth: int, rng: np.random.Generator, option: str = "prune_merge") -> CompressionSchedule:
    """Draw a schedule with a uniformly random non-increasing token profile.

    The per-block survivor counts are sorted uniform draws on ``[1, N]``; for
    the two-stage options each block's removals are split at a uniform point
    between the pruning and the merging stage.
    """
    n = token_count
    counts = np.sort(rng.integers(1, n + 1, size=depth))[::-1]
    prev = n
    kp, km = [], []
    for c in counts:
        c = int(c)
        mid = int(rng.integers(c, prev + 1))
        if option == "prune":
            kp.append(c)
            km.append(n)
        elif option == "merge":
            kp.append(n)
            km.append(c)
        elif option == "merge_prune":
            km.append(mid)
            kp.append(c)
        else:
            kp.append(mid)
            km.append(c)
        prev = c
    return CompressionSchedule(n, kp, km)
