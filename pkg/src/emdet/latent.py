"""Latent label space over proposals built from center boxes.

A weak image only says which categories are present.  A latent configuration
picks one center proposal per present category; proposals whose IoU with a
center reaches ``CENTER_IOU`` take that center's category and everything else
is background.  This collapses the label space from Cceil(B) assignments to at
most B * (B - 1) * ... choices, which can be enumerated exactly at desk scale
or truncated per category for larger instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emdet.geometry import Box, boxes_to_array, iou_matrix

# IoU at or above which a proposal joins a center's neighborhood.
CENTER_IOU = 0.5


class GuardError(RuntimeError):
    """Raised when an enumeration would exceed a configured size guard."""


def logsumexp(values: np.ndarray) -> float:
    """Stable log(sum(exp(values))); tolerates -inf entries."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = values.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(values - m).sum()))


@dataclass(frozen=True)
class ImageLabel:
    """The set of foreground categories present in an image, sorted ascending."""

    categories: tuple[int, ...]

    def __post_init__(self):
        if len(self.categories) == 0:
            raise ValueError("image label must contain at least one category")
        if any(c < 1 for c in self.categories):
            raise ValueError(f"category ids must be >= 1, got {self.categories}")
        if tuple(sorted(set(self.categories))) != self.categories:
            raise ValueError(f"categories must be sorted and distinct, got {self.categories}")

    def __iter__(self):
        return iter(self.categories)

    def __len__(self):
        return len(self.categories)

    def __contains__(self, category: int) -> bool:
        return category in self.categories


def as_label(z) -> ImageLabel:
    """Normalize a category collection into an ImageLabel."""
    if isinstance(z, ImageLabel):
        return z
    return ImageLabel(tuple(sorted(set(int(c) for c in z))))


@dataclass(frozen=True)
class LatentConfig:
    """One center proposal per present category.

    Stored as (category, proposal index) pairs sorted by category; center
    indices are pairwise distinct.
    """

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        cats = [c for c, _ in self.pairs]
        idxs = [i for _, i in self.pairs]
        if not cats:
            raise ValueError("config must place at least one center")
        if sorted(set(cats)) != cats or any(c < 1 for c in cats):
            raise ValueError(f"config categories must be distinct foreground ids, got {cats}")
        if len(set(idxs)) != len(idxs) or any(i < 0 for i in idxs):
            raise ValueError(f"center indices must be distinct and non-negative, got {idxs}")

    @classmethod
    def from_dict(cls, centers: dict[int, int]) -> "LatentConfig":
        return cls(tuple(sorted((int(c), int(i)) for c, i in centers.items())))

    @property
    def categories(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.pairs)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for _, i in self.pairs)

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


@dataclass
class LatentConfigSet:
    """A batch of configs over one image, stored columnar.

    ``centers[n, m]`` is the center proposal index for the m-th category of
    ``categories`` in the n-th config.  ``mode`` records how the set was
    built: "exact" (full enumeration), "hard" (single argmax config), or
    "k_em" (per-category truncation).
    """

    categories: tuple[int, ...]
    centers: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in ("exact", "hard", "k_em"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.centers = np.asarray(self.centers, dtype=np.int64)
        if self.centers.ndim != 2 or self.centers.shape[1] != len(self.categories):
            raise ValueError(
                f"centers shape {self.centers.shape} does not match "
                f"{len(self.categories)} categories")
        if self.centers.shape[0] == 0:
            raise ValueError("config set is empty")
        if len(self.categories) > 1:
            rows = np.sort(self.centers, axis=1)
            if np.any(rows[:, 1:] == rows[:, :-1]):
                raise ValueError("a config reuses one proposal for two categories")

    def __len__(self) -> int:
        return self.centers.shape[0]

    def config_at(self, n: int) -> LatentConfig:
        return LatentConfig(tuple(zip(self.categories, (int(i) for i in self.centers[n]))))

    def __iter__(self):
        return (self.config_at(n) for n in range(len(self)))


def _winner_slots(key_rows: np.ndarray, covered: np.ndarray) -> np.ndarray:
    """Per row, the covering slot with the highest key; -1 when none covers.

    Ties go to the earliest slot, which is the lowest category id because
    slots are sorted by category.
    """
    masked = np.where(covered, key_rows, -np.inf)
    slots = masked.argmax(axis=1)
    slots[~covered.any(axis=1)] = -1
    return slots


def expand(config: LatentConfig, proposals: list[Box]) -> np.ndarray:
    """Proposal labels implied by a config: length-B int array, 0 = background.

    Center proposals keep their own category.  Any other proposal whose IoU
    with some center reaches CENTER_IOU takes the category of the
    highest-IoU center, ties resolved toward the lower category id.
    """
    B = len(proposals)
    idxs = np.array(config.indices, dtype=np.int64)
    cats = np.array(config.categories, dtype=np.int64)
    if np.any(idxs >= B):
        raise ValueError(f"config centers {config.indices} exceed {B} proposals")
    boxes = boxes_to_array(proposals)
    overlap = iou_matrix(boxes, boxes[idxs])
    slots = _winner_slots(overlap, overlap >= CENTER_IOU)
    labels = np.where(slots >= 0, cats[slots], 0)
    labels[idxs] = cats
    return labels


def _distinct_rows(centers: np.ndarray) -> np.ndarray:
    """Mask of rows whose entries are pairwise distinct."""
    if centers.shape[1] == 1:
        return np.ones(centers.shape[0], dtype=bool)
    rows = np.sort(centers, axis=1)
    return np.all(rows[:, 1:] != rows[:, :-1], axis=1)


def _index_grid(num_proposals: int, num_slots: int) -> np.ndarray:
    """All index tuples (n, M) in lexicographic order, duplicates included."""
    grid = np.indices((num_proposals,) * num_slots)
    return grid.reshape(num_slots, -1).T


def enumerate_exact(proposals: list[Box], z) -> LatentConfigSet:
    """Every config with distinct centers, one per category of z.

    Rows are ordered lexicographically by center index along ascending
    categories, so the set has a canonical order for tie-breaking.
    """
    label = as_label(z)
    B, M = len(proposals), len(label)
    if B < M:
        raise ValueError(f"need at least {M} proposals to place {M} centers, got {B}")
    rows = _index_grid(B, M)
    rows = rows[_distinct_rows(rows)]
    return LatentConfigSet(label.categories, rows, "exact")


def config_log_likelihood(config: LatentConfig, log_probs: np.ndarray,
                          proposals: list[Box]) -> float:
    """Joint log-likelihood of the labels a config implies.

    Computed as the all-background baseline plus the per-proposal deltas of
    the foreground assignments, which only touches the centers'
    neighborhoods beyond the baseline sum.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.shape[0] != len(proposals):
        raise ValueError(
            f"{log_probs.shape[0]} score rows for {len(proposals)} proposals")
    if max(config.categories) >= log_probs.shape[1]:
        raise ValueError(
            f"config categories {config.categories} exceed {log_probs.shape[1]} columns")
    if not np.all(np.isfinite(log_probs)):
        raise ValueError("log probabilities must be finite")
    labels = expand(config, proposals)
    base = log_probs[:, 0].sum()
    fg = np.flatnonzero(labels)
    return float(base + (log_probs[fg, labels[fg]] - log_probs[fg, 0]).sum())


def score_config_set(config_set: LatentConfigSet, log_probs: np.ndarray,
                     proposals: list[Box]) -> np.ndarray:
    """Log-likelihood of each config in the set, aligned with its rows."""
    return np.array([
        config_log_likelihood(config_set.config_at(n), log_probs, proposals)
        for n in range(len(config_set))
    ])


def exact_log_likelihood_grid(proposals: list[Box], z,
                              log_probs: np.ndarray) -> np.ndarray:
    """Config log-likelihoods for the full enumeration as a (B,) * M array.

    Entry [j1, ..., jM] scores the config placing category z[m]'s center at
    proposal jm; entries with repeated indices are -inf.  Matches
    config_log_likelihood to float accumulation order.
    """
    label = as_label(z)
    log_probs = np.asarray(log_probs, dtype=np.float64)
    B, M = len(proposals), len(label)
    if B < M:
        raise ValueError(f"need at least {M} proposals to place {M} centers, got {B}")
    cats = np.array(label.categories, dtype=np.int64)

    if M > 3:
        # Rare at desk scale; score row by row through the shared slow path.
        grid = np.full((B,) * M, -np.inf)
        rows = _index_grid(B, M)
        keep = _distinct_rows(rows)
        values = score_config_set(LatentConfigSet(label.categories, rows[keep], "exact"),
                                  log_probs, proposals)
        grid.reshape(-1)[keep] = values
        return grid

    boxes = boxes_to_array(proposals)
    overlap = iou_matrix(boxes)
    covered = overlap >= CENTER_IOU
    # Boosted keys make each center win its own proposal outright.
    keys = overlap + 2.0 * np.eye(B)
    base = log_probs[:, 0].sum()
    delta = log_probs[:, cats] - log_probs[:, [0]]
    per_center = covered.T.astype(np.float64) @ delta  # (B, M)

    grid = np.full((B,) * M, base)
    for m in range(M):
        grid += per_center[:, m].reshape(_axis_shape(M, m, B))

    if M >= 2:
        # Where two neighborhoods share a proposal the plain sum counts both
        # categories; subtract the losing one for every pair of slots.
        both = covered[:, :, None] & covered[:, None, :]
        first_wins = keys[:, :, None] >= keys[:, None, :]
        for a in range(M):
            for b in range(a + 1, M):
                loser = np.where(first_wins, delta[:, b, None, None],
                                 delta[:, a, None, None])
                pair = np.einsum("ijk,ijk->jk", both.astype(np.float64), loser)
                grid -= pair.reshape(_pair_shape(M, a, b, B))

    if M == 3:
        # Proposals covered by all three chosen centers lost one delta too
        # many above; add back the bottom-ranked slot's delta.
        for i in range(B):
            cover = np.flatnonzero(covered[i])
            if cover.size == 0:
                continue
            k = keys[i, cover]
            ka, kb, kc = k[:, None, None], k[None, :, None], k[None, None, :]
            third_c = (ka >= kc) & (kb >= kc)
            third_b = (ka >= kb) & ~(kb >= kc)
            add = np.where(third_c, delta[i, 2], np.where(third_b, delta[i, 1], delta[i, 0]))
            grid[np.ix_(cover, cover, cover)] += add

    _mask_duplicate_entries(grid)
    return grid


def _axis_shape(M: int, axis: int, B: int) -> tuple[int, ...]:
    shape = [1] * M
    shape[axis] = B
    return tuple(shape)


def _pair_shape(M: int, a: int, b: int, B: int) -> tuple[int, ...]:
    shape = [1] * M
    shape[a] = B
    shape[b] = B
    return tuple(shape)


def _mask_duplicate_entries(grid: np.ndarray) -> None:
    """Set entries whose index tuple repeats a proposal to -inf, in place."""
    M = grid.ndim
    if M == 1:
        return
    B = grid.shape[0]
    idx = np.arange(B)
    for a in range(M):
        for b in range(a + 1, M):
            eq = idx.reshape(_axis_shape(M, a, B)) == idx.reshape(_axis_shape(M, b, B))
            grid[np.broadcast_to(eq, grid.shape)] = -np.inf


def exact_config_values(proposals: list[Box], z,
                        log_probs: np.ndarray) -> tuple[LatentConfigSet, np.ndarray]:
    """The exact enumeration plus its log-likelihoods, row-aligned."""
    label = as_label(z)
    grid = exact_log_likelihood_grid(proposals, label, log_probs)
    rows = _index_grid(len(proposals), len(label))
    keep = _distinct_rows(rows)
    config_set = LatentConfigSet(label.categories, rows[keep], "exact")
    return config_set, grid.reshape(-1)[keep]


def select_hard(config_set: LatentConfigSet, log_probs: np.ndarray,
                proposals: list[Box]) -> LatentConfigSet:
    """The single most likely config of a set; ties keep the earliest row."""
    values = score_config_set(config_set, log_probs, proposals)
    best = int(np.argmax(values))
    return LatentConfigSet(config_set.categories, config_set.centers[best:best + 1], "hard")


def _integer_root(k: int, m: int) -> int:
    """Largest r >= 1 with r ** m <= k."""
    r = max(1, int(round(k ** (1.0 / m))))
    while (r + 1) ** m <= k:
        r += 1
    while r > 1 and r ** m > k:
        r -= 1
    return r


def rank_candidates(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the top ``count`` scores, descending, ties to lower index."""
    order = np.argsort(-scores, kind="stable")
    return order[:count]


def select_k(proposals: list[Box], z, log_probs: np.ndarray, k: int) -> LatentConfigSet:
    """Truncated config set with at most k entries.

    Each category keeps its min(B, floor(k ** (1/M))) highest-scoring
    proposals as candidate centers; the set is the Cartesian product of the
    candidate lists minus configs that reuse a proposal.
    """
    label = as_label(z)
    log_probs = np.asarray(log_probs, dtype=np.float64)
    B, M = len(proposals), len(label)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if B < M:
        raise ValueError(f"need at least {M} proposals to place {M} centers, got {B}")
    r = min(B, _integer_root(k, M))
    candidates = [rank_candidates(log_probs[:, c], r) for c in label.categories]
    rows = _index_grid(r, M) if M > 1 else np.arange(r)[:, None]
    rows = np.stack([candidates[m][rows[:, m]] for m in range(M)], axis=1)
    keep = _distinct_rows(rows)
    if not np.any(keep):
        raise ValueError(
            f"all {rows.shape[0]} candidate combinations reuse a proposal; increase k={k}")
    return LatentConfigSet(label.categories, rows[keep], "k_em")
