"""Bidirectional slice-scan orderings.

A feature map of shape ``(..., H, W)`` is cut into ``H/m`` horizontal slices
of height ``m`` and ``W/n`` vertical slices of width ``n``. Horizontal slices
are walked column by column (top to bottom inside a column), vertical slices
row by row (left to right inside a row). The two backward scans are exact
reversals of the forward ones. With ``m == H`` and ``n == W`` the four paths
are the plain column-major / row-major cross scan.

Permutations map sequence position -> flat pixel index ``r * W + c``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .errors import DivisibilityError, ShapeError

DIRECTIONS = ("h_fwd", "h_bwd", "v_fwd", "v_bwd")


@dataclass(frozen=True, order=True)
class SliceConfig:
    """Horizontal-slice height ``m`` and vertical-slice width ``n``, in pixels."""

    m: int
    n: int

    def __post_init__(self):
        if int(self.m) != self.m or int(self.n) != self.n or self.m < 1 or self.n < 1:
            raise ShapeError(f"slice sizes must be positive integers, got m={self.m}, n={self.n}")

    def clamp(self, height: int, width: int) -> "SliceConfig":
        """Limit the slice to the map size; a slice taller than the map is the whole map."""
        return SliceConfig(min(self.m, height), min(self.n, width))

    def __str__(self):
        return f"{self.m}x{self.n}"

    @classmethod
    def parse(cls, text: str) -> "SliceConfig":
        try:
            m, n = text.strip().lower().split("x")
            return cls(int(m), int(n))
        except (ValueError, TypeError) as exc:
            raise ShapeError(f"cannot parse slice config {text!r}; expected e.g. '2x4'") from exc


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.flags.writeable = False
    return a


def _inverse(perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=perm.dtype)
    return inv


@dataclass(frozen=True)
class ScanPlanSet:
    height: int
    width: int
    config: SliceConfig
    perm_h_fwd: np.ndarray = field(repr=False)
    perm_h_bwd: np.ndarray = field(repr=False)
    perm_v_fwd: np.ndarray = field(repr=False)
    perm_v_bwd: np.ndarray = field(repr=False)
    inv_h_fwd: np.ndarray = field(repr=False)
    inv_h_bwd: np.ndarray = field(repr=False)
    inv_v_fwd: np.ndarray = field(repr=False)
    inv_v_bwd: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return self.height * self.width

    def perm(self, direction: str) -> np.ndarray:
        _check_direction(direction)
        return getattr(self, "perm_" + direction)

    def inverse(self, direction: str) -> np.ndarray:
        _check_direction(direction)
        return getattr(self, "inv_" + direction)

    def positions(self, direction: str) -> np.ndarray:
        """Sequence position of every pixel, as an ``(H, W)`` array."""
        return self.inverse(direction).reshape(self.height, self.width)


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown scan direction {direction!r}; expected one of {DIRECTIONS}")


def build_slice_plan(height: int, width: int, config: SliceConfig) -> ScanPlanSet:
    """Build (or fetch from cache) the four scan permutations for one map size."""
    if height < 1 or width < 1:
        raise ShapeError(f"feature map must be non-empty, got H={height}, W={width}")
    if height % config.m or width % config.n:
        raise DivisibilityError(
            f"slice config does not tile the map: H={height}, W={width}, m={config.m}, n={config.n} "
            f"(need H % m == 0 and W % n == 0)"
        )
    return _build(int(height), int(width), int(config.m), int(config.n))


@functools.lru_cache(maxsize=256)
def _build(H, W, m, n):
    r, c = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    i = r // m
    pos_h = i * (m * W) + c * m + (r - i * m)
    j = c // n
    pos_v = j * (H * n) + r * n + (c - j * n)

    inv_h_fwd = pos_h.ravel()
    inv_v_fwd = pos_v.ravel()
    perm_h_fwd = _inverse(inv_h_fwd)
    perm_v_fwd = _inverse(inv_v_fwd)
    perm_h_bwd = perm_h_fwd[::-1]
    perm_v_bwd = perm_v_fwd[::-1]
    return ScanPlanSet(
        height=H,
        width=W,
        config=SliceConfig(m, n),
        perm_h_fwd=_frozen(perm_h_fwd),
        perm_h_bwd=_frozen(perm_h_bwd),
        perm_v_fwd=_frozen(perm_v_fwd),
        perm_v_bwd=_frozen(perm_v_bwd),
        inv_h_fwd=_frozen(inv_h_fwd),
        inv_h_bwd=_frozen(_inverse(perm_h_bwd)),
        inv_v_fwd=_frozen(inv_v_fwd),
        inv_v_bwd=_frozen(_inverse(perm_v_bwd)),
    )


def _take_last(x, index):
    # works for numpy arrays and torch tensors alike
    if isinstance(x, np.ndarray):
        return x[..., index]
    import torch

    return x.index_select(-1, torch.from_numpy(np.array(index)).to(x.device))


def apply_scan(features, plan: ScanPlanSet, direction: str):
    """Gather ``(..., H, W)`` features into a ``(..., H*W)`` sequence along ``direction``."""
    if tuple(features.shape[-2:]) != (plan.height, plan.width):
        raise ShapeError(
            f"feature map spatial shape {tuple(features.shape[-2:])} does not match "
            f"plan ({plan.height}, {plan.width})"
        )
    flat = features.reshape(*features.shape[:-2], plan.length)
    return _take_last(flat, plan.perm(direction))


def scan_all(features, plan: ScanPlanSet) -> list:
    return [apply_scan(features, plan, d) for d in DIRECTIONS]


def restore(seq, plan: ScanPlanSet, direction: str):
    """Scatter one sequence back to a ``(..., H, W)`` map."""
    if seq.shape[-1] != plan.length:
        raise ShapeError(f"sequence length {seq.shape[-1]} does not match plan length {plan.length}")
    flat = _take_last(seq, plan.inverse(direction))
    return flat.reshape(*seq.shape[:-1], plan.height, plan.width)


def restore_merge(seq_h_fwd, seq_h_bwd, seq_v_fwd, seq_v_bwd, plan: ScanPlanSet):
    """Restore all four sequences and sum them element-wise (in direction order)."""
    seqs = (seq_h_fwd, seq_h_bwd, seq_v_fwd, seq_v_bwd)
    shape = tuple(seq_h_fwd.shape)
    for s in seqs[1:]:
        if tuple(s.shape) != shape:
            raise ShapeError(f"sequence shapes differ: {shape} vs {tuple(s.shape)}")
    out = restore(seq_h_fwd, plan, "h_fwd")
    for s, d in zip(seqs[1:], DIRECTIONS[1:]):
        out = out + restore(s, plan, d)
    return out


@dataclass
class AdjacencyReport:
    max_h_neighbor_dist: int
    max_v_neighbor_dist: int
    # direction -> {"horizontal": counts, "vertical": counts}; counts[d] = pairs at distance d
    per_direction_histograms: dict


def adjacency_profile(plan: ScanPlanSet) -> AdjacencyReport:
    """Sequence distance of spatially adjacent pixel pairs, best over the four scans."""
    hists = {}
    h_dists, v_dists = [], []
    for d in DIRECTIONS:
        pos = plan.positions(d)
        dh = np.abs(pos[:, 1:] - pos[:, :-1]).ravel()
        dv = np.abs(pos[1:, :] - pos[:-1, :]).ravel()
        h_dists.append(dh)
        v_dists.append(dv)
        hists[d] = {"horizontal": np.bincount(dh).tolist(), "vertical": np.bincount(dv).tolist()}
    best_h = np.min(h_dists, axis=0) if h_dists[0].size else np.zeros(0, dtype=np.int64)
    best_v = np.min(v_dists, axis=0) if v_dists[0].size else np.zeros(0, dtype=np.int64)
    return AdjacencyReport(
        max_h_neighbor_dist=int(best_h.max()) if best_h.size else 0,
        max_v_neighbor_dist=int(best_v.max()) if best_v.size else 0,
        per_direction_histograms=hists,
    )


def format_plan(plan: ScanPlanSet) -> str:
    lines = [f"scan plan H={plan.height} W={plan.width} m={plan.config.m} n={plan.config.n}"]
    for d in DIRECTIONS:
        lines.append(f"{d}: " + " ".join(str(int(p)) for p in plan.perm(d)))
    rep = adjacency_profile(plan)
    lines.append(f"max_h_neighbor_dist: {rep.max_h_neighbor_dist}")
    lines.append(f"max_v_neighbor_dist: {rep.max_v_neighbor_dist}")
    for d in DIRECTIONS:
        h = rep.per_direction_histograms[d]
        lines.append(f"hist {d} horizontal: {h['horizontal']}")
        lines.append(f"hist {d} vertical: {h['vertical']}")
    return "\n".join(lines)


def _ramp(t):
    # blue -> green -> red along t in [0, 1]
    t = np.clip(t, 0.0, 1.0)
    r = np.clip(2 * t - 1, 0, 1)
    g = 1 - np.abs(2 * t - 1)
    b = np.clip(1 - 2 * t, 0, 1)
    return np.stack([r, g, b], axis=-1)


def render_plan(plan: ScanPlanSet, cell: int = 12, gap: int = 4) -> np.ndarray:
    """Four side-by-side panels, each pixel colored by its sequence position."""
    H = plan.height
    denom = max(plan.length - 1, 1)
    panels = []
    for d in DIRECTIONS:
        rgb = _ramp(plan.positions(d) / denom)
        rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
        panels.append(rgb)
        panels.append(np.ones((H * cell, gap, 3)))
    img = np.concatenate(panels[:-1], axis=1)
    return (img * 255).round().astype(np.uint8)


def write_plan_ppm(plan: ScanPlanSet, path, cell: int = 12) -> None:
    from PIL import Image

    Image.fromarray(render_plan(plan, cell=cell), mode="RGB").save(path, format="PPM")
