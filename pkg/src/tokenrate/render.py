"""Token-map rendering of a recorded apply run as binary PPM (P6) images.

Pruned patches are painted black.  Patches that were merged together are
filled with the group's mean colour and outlined with a border colour derived
from the group's destination token, so every member of a group shares it.
Kept, unmerged patches are copied from the input unchanged.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .tokens import BlockRecord


def border_color(token_index: int) -> np.ndarray:
    """Deterministic, well-spread colour for a destination token index."""
    hue = (token_index * 0.61803398875) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.9, 1.0))


def token_groups(records: list[BlockRecord], image: int, block: int, token_count: int):
    """Follow one image through blocks ``0..block``.

    Returns ``(groups, pruned)``: for each surviving token the list of
    original token indices it stands for (first entry is its own index), and
    the set of original indices dropped by pruning.
    """
    if not 0 <= block < len(records):
        raise IndexError(f"block {block} outside recorded range 0..{len(records) - 1}")
    groups = [[i] for i in range(token_count)]
    pruned: set[int] = set()
    for rec in records[: block + 1]:
        order = rec.order[image]
        ordered = [groups[j] for j in order]
        src_to_dst = {s: d for s, d, _ in rec.merge_maps[image].entries}
        # both stages consume the tail of the sorted sequence, so the first
        # n_out sorted positions survive and everything else was merged or cut
        survivors = list(range(rec.n_out))
        new_groups = {k: list(ordered[k]) for k in survivors}
        for k in range(rec.n_out, rec.n_in):
            d = src_to_dst.get(k)
            if d is not None and d in new_groups:
                new_groups[d].extend(ordered[k])
            else:
                pruned.update(ordered[k])
        groups = [new_groups[k] for k in survivors]
    return groups, pruned


def render_token_map(image: np.ndarray, records: list[BlockRecord], block: int, patch_size: int,
                     batch_index: int = 0) -> np.ndarray:
    """Return the rendered (H, W, 3) float image for the state after ``block``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    h, w, _ = img.shape
    g = h // patch_size
    n = g * g + 1
    groups, pruned = token_groups(records, batch_index, block, n)
    out = img.copy()

    def patch(t):
        r, c = divmod(t - 1, g)
        return slice(r * patch_size, (r + 1) * patch_size), slice(c * patch_size, (c + 1) * patch_size)

    for t in pruned:
        if t == 0:
            continue
        out[patch(t)] = 0.0
    for grp in groups:
        members = [t for t in grp if t != 0]
        if len(grp) < 2 or not members:
            continue
        mean = np.mean([img[patch(t)].reshape(-1, 3).mean(axis=0) for t in members], axis=0)
        color = border_color(grp[0])
        for t in members:
            rs, cs = patch(t)
            out[rs, cs] = mean
            out[rs.start, cs] = color
            out[rs.stop - 1, cs] = color
            out[rs, cs.start] = color
            out[rs, cs.stop - 1] = color
    return out


def to_ppm(img: np.ndarray) -> bytes:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + arr.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_token_map(path, image, records, block: int, patch_size: int, batch_index: int = 0) -> None:
    Path(path).write_bytes(to_ppm(render_token_map(image, records, block, patch_size, batch_index)))
