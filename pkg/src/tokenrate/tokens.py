"""Token sorting, pruning, merging and uncompression.

All compression consumes tokens from the tail of the importance order, so the
surviving tokens are always a prefix of it.  Merging sends each source to the
most cosine-similar surviving non-class token; a destination becomes the mean
of itself and every source assigned to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .schedule import CompressionSchedule
from .vit import AttentionState, ModelConfig, model_forward

OPTIONS = ("prune_merge", "merge_prune", "prune", "merge")


@dataclass
class ImportanceOrder:
    order: np.ndarray  # (B, N) or (N,) token indices, most important first
    metric: np.ndarray  # metric values aligned with the original token indices

    def ranks(self) -> np.ndarray:
        r = np.empty_like(self.order)
        if self.order.ndim == 1:
            r[self.order] = np.arange(self.order.shape[0])
        else:
            rows = np.arange(self.order.shape[0])[:, None]
            r[rows, self.order] = np.arange(self.order.shape[1])[None, :]
        return r


@dataclass
class MergeMap:
    """Merge assignments over one pre-compression sequence.

    ``entries`` holds ``(source, destination, group_size)`` with positions in
    the pre-compression sequence and ``group_size`` counting the destination
    plus all of its sources.
    """

    length: int
    entries: list[tuple[int, int, int]] = field(default_factory=list)

    def sources(self) -> list[int]:
        return [s for s, _, _ in self.entries]

    def validate(self, pruned=()) -> None:
        srcs = self.sources()
        if len(set(srcs)) != len(srcs):
            raise ValueError("merge map lists a source twice")
        gone = set(srcs) | set(int(p) for p in pruned)
        if len(gone) != len(srcs) + len(set(int(p) for p in pruned)):
            raise ValueError("a position is both pruned and merged")
        for s, d, g in self.entries:
            if not (0 <= s < self.length and 0 <= d < self.length):
                raise ValueError(f"merge entry ({s}, {d}) outside length {self.length}")
            if d in gone:
                raise ValueError(f"destination {d} is not a kept token")
            if g < 2:
                raise ValueError("group size after merge must be at least 2")


def sort_tokens(metric: np.ndarray, mask: np.ndarray | None = None) -> ImportanceOrder:
    """Order tokens by descending metric; class token first, masked tokens last.

    Ties resolve to the lower original index.  ``metric`` may be (N,) or (B, N).
    """
    m = np.array(metric, dtype=np.float64)
    squeeze = m.ndim == 1
    if squeeze:
        m = m[None]
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-1] != m.shape[-1]:
            raise ShapeError(f"mask length {mask.shape[-1]} != metric length {m.shape[-1]}")
        m = np.where(np.broadcast_to(mask, m.shape) > 0.5, m, -np.inf)
    key = np.where(np.isnan(m), -np.inf, m)
    key[:, 0] = np.inf
    order = np.argsort(-key, axis=1, kind="stable")
    return ImportanceOrder(order[0] if squeeze else order, np.array(metric, dtype=np.float64))


def prune(order: np.ndarray, n_prune: int) -> np.ndarray:
    """Indices that survive dropping the ``n_prune`` lowest-ranked tokens."""
    order = np.asarray(order)
    n = order.shape[-1]
    if not 0 <= n_prune <= n - 1:
        raise ValueError(f"cannot prune {n_prune} of {n} tokens (class token must survive)")
    return order[..., : n - n_prune]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    return an @ np.swapaxes(bn, -1, -2)


def merge_assignment(feats: np.ndarray, n_dest: int, sources) -> np.ndarray:
    """For each source position pick the best destination in ``1..n_dest-1``.

    ``feats`` is (B, K, D) in importance order.  Returns (B, len(sources))
    destination positions.
    """
    if n_dest < 2:
        raise ValueError("no eligible destination: only the class token survives")
    src = np.asarray(sources, dtype=np.intp)
    sim = cosine_matrix(feats[:, src, :], feats[:, 1:n_dest, :])
    counter = ag.active_counter()
    if counter is not None:
        counter.add(feats.shape[0] * len(src) * (n_dest - 1) * feats.shape[2])
    return sim.argmax(axis=-1) + 1


def merge(tokens: Tensor, n_merge: int) -> tuple[Tensor, list[MergeMap]]:
    """Merge the ``n_merge`` last rows of importance-ordered (B, K, D) tokens.

    Returns the (B, K - n_merge, D) survivors and one MergeMap per image.
    """
    tokens = ag.tensor(tokens)
    if tokens.ndim == 2:
        out, maps = merge(ag.reshape(tokens, (1,) + tokens.shape), n_merge)
        return ag.reshape(out, out.shape[1:]), maps
    b, k, d = tokens.shape
    if n_merge == 0:
        return tokens, [MergeMap(k) for _ in range(b)]
    if not 0 < n_merge < k - 1:
        raise ValueError(f"no eligible destination for {n_merge} merges among {k} tokens")
    n_dest = k - n_merge
    sources = np.arange(n_dest, k)
    dest = merge_assignment(tokens.data, n_dest, sources)
    assign = np.zeros((b, n_dest, k))
    rows = np.arange(b)[:, None]
    assign[rows, dest, sources[None, :]] = 1.0
    group = 1.0 + assign.sum(axis=2)
    summed = tokens[:, :n_dest, :] + Tensor(assign) @ tokens
    out = summed * Tensor(np.broadcast_to((1.0 / group)[:, :, None], (b, n_dest, d)))
    maps = []
    for i in range(b):
        entries = [(int(s), int(dd), int(group[i, dd])) for s, dd in zip(sources, dest[i])]
        maps.append(MergeMap(k, entries))
    return out, maps


def uncompress(tokens, merge_map: MergeMap, pruned=()) -> Tensor:
    """Restore the pre-compression length.

    Kept positions (neither pruned nor merged away) receive the compressed rows
    in order, each merge source receives a copy of its destination's row, and
    pruned positions are zero.  ``tokens`` is (K, D) or (B, K, D).
    """
    tokens = ag.tensor(tokens)
    pruned = sorted(int(p) for p in pruned)
    merge_map.validate(pruned)
    length = merge_map.length
    gone = set(merge_map.sources()) | set(pruned)
    kept = [i for i in range(length) if i not in gone]
    axis = tokens.ndim - 2
    if len(kept) != tokens.shape[axis]:
        raise ValueError(f"merge map expects {len(kept)} kept rows, got {tokens.shape[axis]}")
    row_of = {pos: r for r, pos in enumerate(kept)}
    zero_row = len(kept)
    idx = np.full(length, zero_row, dtype=np.intp)
    for pos, r in row_of.items():
        idx[pos] = r
    for s, d, _ in merge_map.entries:
        idx[s] = row_of[d]
    zshape = list(tokens.shape)
    zshape[axis] = 1
    padded = ag.concat([tokens, Tensor(np.zeros(zshape))], axis=axis)
    return ag.take(padded, idx, axis=axis)


# --- apply mode ------------------------------------------------------------------


@dataclass
class BlockRecord:
    """What happened to the tokens of one block (positions are pre-block)."""

    order: np.ndarray  # (B, n_in): sorted position -> incoming position
    n_in: int
    n_mid: int
    n_out: int
    merge_maps: list[MergeMap]  # per image, over the sorted positions
    first_stage: str  # "prune" or "merge"


def stage_plan(n: int, kp: int, km: int, option: str) -> tuple[int, int, str]:
    """(count after first stage, count after second stage, first stage name)."""
    if option == "prune_merge":
        mid = min(n, kp)
        return mid, min(mid, km), "prune"
    if option == "merge_prune":
        mid = min(n, km)
        return mid, min(mid, kp), "merge"
    if option == "prune":
        mid = min(n, kp)
        return mid, mid, "prune"
    if option == "merge":
        mid = min(n, km)
        return n, mid, "prune"
    raise ValueError(f"unknown compression option {option!r}")


def _merge_or_drop(xs: Tensor, n_merge: int) -> tuple[Tensor, list[MergeMap]]:
    b, k, _ = xs.shape
    if n_merge and k - n_merge < 2:
        # only the class token would survive: nothing to merge into
        return xs[:, : k - n_merge, :], [MergeMap(k) for _ in range(b)]
    return merge(xs, n_merge)


class ScheduleCompressor:
    """Physically drops and merges tokens according to a fixed schedule."""

    def __init__(
        self,
        schedule: CompressionSchedule,
        metric: str = "class_attn",
        option: str = "prune_merge",
        record: bool = False,
        seed: int = 0,
    ):
        if option not in OPTIONS:
            raise ValueError(f"unknown compression option {option!r}")
        self.schedule = schedule
        self.metric = metric
        self.option = option
        self.record = record
        self.seed = seed
        self.reset()

    def reset(self) -> None:
        self.records: list[BlockRecord] = []
        self.counts: list[int] = []
        self.rng = np.random.default_rng(self.seed)

    def attention_mask(self):
        return None

    def __call__(self, block: int, xhat: Tensor, state: AttentionState) -> Tensor:
        kp, km = self.schedule.prune_kept[block], self.schedule.merge_kept[block]
        xs, rec = compress_block(xhat, state, kp, km, self.option, self.metric, self.rng)
        self.counts.append(xs.shape[1])
        if self.record:
            self.records.append(rec)
        return xs


def compress_block(
    xhat: Tensor,
    state: AttentionState,
    kp: int,
    km: int,
    option: str = "prune_merge",
    metric: str = "class_attn",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, BlockRecord]:
    """Sort, prune and merge one block's tokens; rows come out in importance order."""
    n = xhat.shape[1]
    order = sort_tokens(state.importance(metric, rng)).order
    xs = ag.gather_rows(xhat, order)
    mid, out, first = stage_plan(n, kp, km, option)
    maps: list[MergeMap]
    if first == "prune":
        xs = xs[:, :mid, :]
        xs, maps = _merge_or_drop(xs, mid - out)
    else:
        xs, maps = _merge_or_drop(xs, n - mid)
        xs = xs[:, :out, :]
    # merge maps are expressed over the pre-block sorted sequence
    for mm in maps:
        mm.length = n
    return xs, BlockRecord(order, n, mid, xs.shape[1], maps, first)


@dataclass
class ApplyResult:
    logits: Tensor
    token_counts: list[int]
    macs: int  # per image, transformer blocks only
    macs_by_section: dict[str, float]
    records: list[BlockRecord]


def apply_schedule(
    params,
    schedule: CompressionSchedule,
    images: np.ndarray,
    cfg: ModelConfig,
    metric: str = "class_attn",
    option: str = "prune_merge",
    record: bool = False,
) -> ApplyResult:
    """Run the backbone with tokens physically removed per ``schedule``."""
    if schedule.depth != cfg.depth or schedule.token_count != cfg.token_count:
        raise ValueError(
            f"schedule ({schedule.depth} blocks, N={schedule.token_count}) does not fit "
            f"the model ({cfg.depth} blocks, N={cfg.token_count})"
        )
    comp = ScheduleCompressor(schedule, metric, option, record)
    b = len(images)
    with ag.count_macs() as counter:
        res = model_forward(images, params, cfg, comp)
    per_image = {k: v / b for k, v in counter.by_section.items()}
    blocks = counter.by_section.get("blocks", 0)
    if blocks % b:
        raise AssertionError("block MAC count is not a multiple of the batch size")
    return ApplyResult(res.logits, list(comp.counts), blocks // b, per_image, comp.records)
