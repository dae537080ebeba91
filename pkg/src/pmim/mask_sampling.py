"""Part-guided mask sampling over a patch grid.

Six body parts are derived from 17 COCO keypoints. Each part is a union of
axis-aligned boxes spanned by keypoint pairs; masking a part means masking
every patch one of its boxes touches. The sampler draws a random subset of
parts and adjusts the union to an exact patch budget, filling any shortfall
with block-wise sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import KeypointSet, PatchGrid

# The six part labels, fixed order (used for reproducible selection draws).
PART_IDS = ("head", "upper_body", "left_arm", "right_arm", "left_leg", "right_leg")

PartId = str

# Keypoint pairs spanning each part's boxes. 15 pairs total.
PART_KEYPOINT_PAIRS = {
    "head": (
        ("nose", "left_eye"),
        ("nose", "right_eye"),
        ("left_eye", "right_eye"),
        ("left_eye", "left_ear"),
        ("right_eye", "right_ear"),
    ),
    "upper_body": (
        ("left_shoulder", "right_hip"),
        ("right_shoulder", "left_hip"),
    ),
    "left_arm": (
        ("left_shoulder", "left_elbow"),
        ("left_elbow", "left_wrist"),
    ),
    "right_arm": (
        ("right_shoulder", "right_elbow"),
        ("right_elbow", "right_wrist"),
    ),
    "left_leg": (
        ("left_hip", "left_knee"),
        ("left_knee", "left_ankle"),
    ),
    "right_leg": (
        ("right_hip", "right_knee"),
        ("right_knee", "right_ankle"),
    ),
}


@dataclass(frozen=True)
class PartSelection:
    """Distinct parts in draw order."""

    parts: tuple[PartId, ...]

    def __post_init__(self):
        if len(set(self.parts)) != len(self.parts):
            raise ConfigError(f"duplicate parts in selection: {self.parts}")
        for p in self.parts:
            if p not in PART_IDS:
                raise ConfigError(f"unknown part id {p!r}")

    def __iter__(self):
        return iter(self.parts)

    def __len__(self):
        return len(self.parts)


@dataclass(frozen=True)
class SamplerConfig:
    masking_ratio: float = 0.5
    part_count_max: int = 6
    keypoint_conf_threshold: float = 0.2
    blockwise_min_area: int = 4
    blockwise_aspect: tuple[float, float] = (0.3, 10.0 / 3.0)
    blockwise_attempts: int = 10

    def __post_init__(self):
        if not (0.0 <= self.masking_ratio <= 1.0):
            raise ConfigError(f"masking_ratio must be in [0, 1], got {self.masking_ratio}")
        if not (0.0 <= self.keypoint_conf_threshold <= 1.0):
            raise ConfigError(
                f"keypoint_conf_threshold must be in [0, 1], got {self.keypoint_conf_threshold}")
        if self.part_count_max != len(PART_IDS):
            raise ConfigError(f"part_count_max must be {len(PART_IDS)}")
        if self.blockwise_min_area < 1:
            raise ConfigError("blockwise_min_area must be >= 1")
        lo, hi = self.blockwise_aspect
        if not (0.0 < lo <= hi):
            raise ConfigError(f"bad blockwise_aspect {self.blockwise_aspect}")


@dataclass
class MaskPlan:
    """An exact-budget mask with per-patch provenance.

    provenance[i] records why masked[i] was chosen: a part id, "block" for a
    block-wise rectangle, or "fill" for a uniform single-patch draw.
    """

    grid: PatchGrid
    n_masked: int
    masked: list[int]
    provenance: list[str]

    def __post_init__(self):
        if len(self.masked) != self.n_masked or len(self.provenance) != self.n_masked:
            raise ConfigError(
                f"mask plan lengths disagree: n_masked={self.n_masked}, "
                f"|masked|={len(self.masked)}, |provenance|={len(self.provenance)}")
        if len(set(self.masked)) != len(self.masked):
            raise ConfigError("mask plan contains duplicate patch indices")
        for i in self.masked:
            if not (0 <= i < self.grid.n_patches):
                raise ConfigError(f"patch index {i} outside grid of {self.grid.n_patches}")

    def mask_vector(self) -> np.ndarray:
        """Binary (n_patches,) vector, 1 where masked."""
        m = np.zeros(self.grid.n_patches, dtype=np.float64)
        m[self.masked] = 1.0
        return m


@dataclass
class BlockFillResult:
    """Outcome of blockwise_fill, with enough bookkeeping to audit the draws."""

    indices: list[int]
    new_indices: list[int]
    new_tags: list[str]  # "block" | "fill", aligned with new_indices
    rects: list[tuple[int, int, int, int]] = field(default_factory=list)  # (r0, c0, h, w)


def num_masked(beta: float, n_patches: int) -> int:
    """Patch budget: the largest integer not exceeding beta * n_patches."""
    if not (0.0 <= beta <= 1.0):
        raise ConfigError(f"masking ratio must be in [0, 1], got {beta}")
    if n_patches < 0:
        raise ConfigError(f"n_patches must be >= 0, got {n_patches}")
    return math.floor(beta * n_patches)


def part_keypoint_pairs(part: PartId) -> tuple[tuple[str, str], ...]:
    if part not in PART_KEYPOINT_PAIRS:
        raise ConfigError(f"unknown part id {part!r}")
    return PART_KEYPOINT_PAIRS[part]


def part_patches(kps: KeypointSet, part: PartId, grid: PatchGrid,
                 conf_threshold: float = 0.2) -> set[int]:
    """Patches touched by any keypoint-pair box of a part.

    A pair contributes the axis-aligned box between its two points, expanded
    to every patch the box intersects; pairs with either endpoint below the
    confidence threshold contribute nothing. Patch (r, c) covers the
    half-open pixel region [c*p, (c+1)*p) x [r*p, (r+1)*p).
    """
    p = grid.patch_size
    out: set[int] = set()
    for name_a, name_b in part_keypoint_pairs(part):
        xa, ya, ca = kps.get(name_a)
        xb, yb, cb = kps.get(name_b)
        if ca < conf_threshold or cb < conf_threshold:
            continue
        c_lo = max(int(math.floor(min(xa, xb) / p)), 0)
        c_hi = min(int(math.floor(max(xa, xb) / p)), grid.grid_w - 1)
        r_lo = max(int(math.floor(min(ya, yb) / p)), 0)
        r_hi = min(int(math.floor(max(ya, yb) / p)), grid.grid_h - 1)
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                out.add(r * grid.grid_w + c)
    return out


def all_part_patches(kps: KeypointSet, grid: PatchGrid,
                     conf_threshold: float = 0.2) -> set[int]:
    """Union of every part's patches; the full body-prior region."""
    out: set[int] = set()
    for part in PART_IDS:
        out |= part_patches(kps, part, grid, conf_threshold)
    return out


def select_parts(rng: np.random.Generator) -> PartSelection:
    """Draw P ~ unif{0..6} parts, then a uniform ordered P-subset.

    Consumes exactly two draws: one integer for the count, one permutation
    of the six part labels.
    """
    count = int(rng.integers(0, len(PART_IDS) + 1))
    order = rng.permutation(len(PART_IDS))
    return PartSelection(tuple(PART_IDS[i] for i in order[:count]))


def _draw_block(rng: np.random.Generator, grid: PatchGrid, have: set[int],
                need: int, cfg: SamplerConfig):
    """One rectangle attempt. Returns (new_indices, rect) or None on failure.

    Consumes three uniform draws (area, log-aspect, position) per call; a
    position draw happens only when the rectangle fits the grid.
    """
    area_lo = min(cfg.blockwise_min_area, need)
    s = int(rng.integers(area_lo, need + 1))
    lo, hi = cfg.blockwise_aspect
    r = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    h = max(int(round(math.sqrt(s * r))), 1)
    w = max(int(round(math.sqrt(s / r))), 1)
    if h > grid.grid_h or w > grid.grid_w:
        return None
    if not (lo <= h / w <= hi) or h * w < area_lo:
        return None
    r0 = int(rng.integers(0, grid.grid_h - h + 1))
    c0 = int(rng.integers(0, grid.grid_w - w + 1))
    new = [rr * grid.grid_w + cc
           for rr in range(r0, r0 + h)
           for cc in range(c0, c0 + w)
           if rr * grid.grid_w + cc not in have]
    if not (1 <= len(new) <= need):
        return None
    return new, (r0, c0, h, w)


def blockwise_fill(rng: np.random.Generator, grid: PatchGrid, existing,
                   target: int, cfg: SamplerConfig | None = None) -> BlockFillResult:
    """Grow a patch set to exactly `target` indices with block-wise draws.

    Rectangles keep their area at or above blockwise_min_area (capped at the
    remaining need) and their aspect ratio inside cfg.blockwise_aspect; a
    rectangle is rejected when it would overshoot the budget or adds nothing.
    After blockwise_attempts rejections in total, the remaining shortfall is
    filled with uniformly random single patches so the count is always exact.
    """
    if cfg is None:
        cfg = SamplerConfig()
    indices = list(existing)
    have = set(indices)
    if len(have) != len(indices):
        raise ConfigError("existing mask contains duplicates")
    if len(indices) > target:
        raise ConfigError(f"existing mask of {len(indices)} exceeds target {target}")
    if target > grid.n_patches:
        raise ConfigError(f"target {target} exceeds {grid.n_patches} patches")

    new_indices: list[int] = []
    new_tags: list[str] = []
    rects: list[tuple[int, int, int, int]] = []
    need = target - len(indices)
    failures = 0
    while need > 0 and failures < cfg.blockwise_attempts:
        drawn = _draw_block(rng, grid, have, need, cfg)
        if drawn is None:
            failures += 1
            continue
        new, rect = drawn
        rects.append(rect)
        for i in new:
            have.add(i)
            new_indices.append(i)
            new_tags.append("block")
        need -= len(new)

    if need > 0:
        free = np.array(sorted(set(range(grid.n_patches)) - have), dtype=np.intp)
        picked = rng.choice(free, size=need, replace=False)
        for i in picked:
            new_indices.append(int(i))
            new_tags.append("fill")

    return BlockFillResult(indices + new_indices, new_indices, new_tags, rects)


def part_guided_mask(rng: np.random.Generator, kps: KeypointSet, grid: PatchGrid,
                     cfg: SamplerConfig | None = None) -> MaskPlan:
    """Mask exactly floor(beta * N) patches, guided by body-part regions.

    Selected parts accumulate a patch union in draw order. With N_p patches
    in the union and a budget of N_m, three cases apply: equal counts keep
    the union as-is; a short union is completed by blockwise_fill; an
    oversized union keeps whole parts in selection order and takes a uniform
    random subset of the first part that would overflow, dropping the rest.

    Random draws, in order: select_parts, then either the blockwise_fill
    draws (short case) or one subset draw over the overflowing part's new
    patches (long case).
    """
    if cfg is None:
        cfg = SamplerConfig()
    n_m = num_masked(cfg.masking_ratio, grid.n_patches)
    selection = select_parts(rng)

    seen: set[int] = set()
    per_part_new: list[tuple[PartId, list[int]]] = []
    for part in selection:
        patches = part_patches(kps, part, grid, cfg.keypoint_conf_threshold)
        new = sorted(patches - seen)
        seen.update(new)
        per_part_new.append((part, new))
    n_p = len(seen)

    masked: list[int] = []
    provenance: list[str] = []
    if n_p == n_m:
        for part, new in per_part_new:
            masked.extend(new)
            provenance.extend([part] * len(new))
    elif n_p < n_m:
        for part, new in per_part_new:
            masked.extend(new)
            provenance.extend([part] * len(new))
        fill = blockwise_fill(rng, grid, masked, n_m, cfg)
        masked = fill.indices
        provenance.extend(fill.new_tags)
    else:
        for part, new in per_part_new:
            if len(masked) + len(new) <= n_m:
                masked.extend(new)
                provenance.extend([part] * len(new))
                continue
            k = n_m - len(masked)
            picked = rng.choice(np.array(new, dtype=np.intp), size=k, replace=False)
            masked.extend(int(i) for i in picked)
            provenance.extend([part] * k)
            break

    return MaskPlan(grid, n_m, masked, provenance)


def random_mask(rng: np.random.Generator, grid: PatchGrid, target: int) -> MaskPlan:
    """Uniformly random mask of exactly `target` patches (baseline strategy)."""
    if not (0 <= target <= grid.n_patches):
        raise ConfigError(f"target {target} not in [0, {grid.n_patches}]")
    picked = rng.choice(grid.n_patches, size=target, replace=False)
    masked = [int(i) for i in picked]
    return MaskPlan(grid, target, masked, ["fill"] * target)


@dataclass
class MaskStatsRecord:
    n_plans: int
    part_overlap_mean: float  # mean over plans of |masked & region| / |masked|
    region_coverage_mean: float  # mean over plans of |masked & region| / |region|
    size_histogram: dict[int, int]
    provenance_fractions: dict[str, float]
    n_degenerate: int  # plans with an empty mask (overlap counted as 0)


def mask_stats(plans: list[MaskPlan], part_regions: list[set[int]]) -> MaskStatsRecord:
    """Summarize how well masks line up with part regions.

    Both directions are reported: the fraction of masked patches inside the
    region, and the fraction of the region that got masked.
    """
    if len(plans) != len(part_regions):
        raise ConfigError(
            f"plans ({len(plans)}) and part_regions ({len(part_regions)}) must align")
    overlaps = []
    coverages = []
    hist: dict[int, int] = {}
    tag_counts: dict[str, int] = {}
    degenerate = 0
    for plan, region in zip(plans, part_regions):
        hist[plan.n_masked] = hist.get(plan.n_masked, 0) + 1
        for tag in plan.provenance:
            tag_counts[tag] = tag_counts.get(tag, 0) + 1
        inside = sum(1 for i in plan.masked if i in region)
        if plan.n_masked == 0:
            degenerate += 1
            overlaps.append(0.0)
        else:
            overlaps.append(inside / plan.n_masked)
        coverages.append(inside / len(region) if region else 0.0)
    total_tags = sum(tag_counts.values())
    fractions = {t: c / total_tags for t, c in sorted(tag_counts.items())} if total_tags else {}
    mean = float(np.mean(overlaps)) if overlaps else 0.0
    cov = float(np.mean(coverages)) if coverages else 0.0
    return MaskStatsRecord(len(plans), mean, cov, dict(sorted(hist.items())),
                           fractions, degenerate)


def stats_delta(a: MaskStatsRecord, b: MaskStatsRecord) -> dict:
    """Per-strategy comparison: how much more a overlaps part regions than b."""
    return {
        "part_overlap_mean_a": a.part_overlap_mean,
        "part_overlap_mean_b": b.part_overlap_mean,
        "part_overlap_delta": a.part_overlap_mean - b.part_overlap_mean,
        "region_coverage_mean_a": a.region_coverage_mean,
        "region_coverage_mean_b": b.region_coverage_mean,
        "region_coverage_delta": a.region_coverage_mean - b.region_coverage_mean,
    }
