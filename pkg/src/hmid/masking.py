"""Patch tokenization and random patch masking for the image tower."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class MaskingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSequence:
    """Patch tokens of one image (``tokens`` [k, d]) or a batch ([B, k, d]).

    ``kept_indices`` holds the original row-major patch positions of the
    tokens, sorted ascending; it has the same leading shape as ``tokens``
    minus the feature axis.
    """

    tokens: np.ndarray
    kept_indices: np.ndarray
    grid: tuple[int, int]
    patch_size: int
    mask_ratio: float = 0.0

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def num_kept(self) -> int:
        return self.kept_indices.shape[-1]


def kept_count(num_patches: int, ratio: float) -> int:
    """``round(N * (1 - ratio))`` with halves rounded up, never below 1."""
    return max(1, int(np.floor(num_patches * (1.0 - ratio) + 0.5)))


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Split ``[..., H, W, 3]`` into row-major non-overlapping patches.

    Each token is the patch flattened in (row, col, channel) order, giving
    ``patch_dim = 3 * patch_size**2``.
    """
    image = np.asarray(image)
    *lead, h, w, ch = image.shape
    if h % patch_size or w % patch_size:
        raise MaskingConfigError(
            f"image {h}x{w} is not divisible by patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = image.reshape(*lead, rows, patch_size, cols, patch_size, ch)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # [..., rows, cols, p, p, ch]
    tokens = x.reshape(*lead, rows * cols, patch_size * patch_size * ch)
    idx = np.broadcast_to(np.arange(rows * cols), (*lead, rows * cols)).copy()
    return PatchSequence(tokens, idx, (rows, cols), patch_size, 0.0)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Inverse of :func:`patchify`; requires every patch to be present."""
    rows, cols = seq.grid
    if seq.num_kept != rows * cols:
        raise MaskingConfigError("cannot unpatchify a masked sequence")
    p = seq.patch_size
    *lead, n, d = seq.tokens.shape
    ch = d // (p * p)
    order = np.argsort(seq.kept_indices, axis=-1)
    tokens = np.take_along_axis(seq.tokens, order[..., None], axis=-2)
    x = tokens.reshape(*lead, rows, cols, p, p, ch)
    nl = len(lead)
    x = np.moveaxis(x, nl + 1, nl + 2)  # [..., rows, p, cols, p, ch]
    return x.reshape(*lead, rows * p, cols * p, ch)


def random_mask(seq: PatchSequence, ratio: float, seed) -> PatchSequence:
    """Keep a uniformly random subset of exactly ``kept_count(N, ratio)`` patches.

    Each sequence in a batch gets its own Fisher-Yates shuffle; the first
    ``k`` shuffled positions are kept and re-sorted. ``seed`` may be an int
    or a ``numpy.random.Generator``.
    """
    if not 0.0 <= ratio < 1.0:
        raise MaskingConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    if ratio == 0.0:
        return seq
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = seq.num_kept
    k = kept_count(n, ratio)
    lead = seq.kept_indices.shape[:-1]
    order = rng.permuted(np.broadcast_to(np.arange(n), (*lead, n)), axis=-1)
    pick = np.sort(order[..., :k], axis=-1)
    tokens = np.take_along_axis(seq.tokens, pick[..., None], axis=-2)
    kept = np.take_along_axis(seq.kept_indices, pick, axis=-1)
    return replace(seq, tokens=tokens, kept_indices=kept, mask_ratio=ratio)
