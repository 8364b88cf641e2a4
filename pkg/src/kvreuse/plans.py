"""Recompute plans and per-layer computation masks.

A plan holds one recompute ratio per decoder layer. Ratios live on a fixed
grid (multiples of 0.002 up to 0.300), with 0 (reuse everything) and 1
(full-recompute baseline) always allowed, and must be non-increasing with
depth: a token skipped at some layer has no hidden state for deeper layers,
so deeper layers can never recompute more tokens than shallower ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ParseError, PlanError
from .model import TokenSequence

GRID_STEP = 0.002
GRID_MAX = 0.300
GRID_UNITS_MAX = 150  # GRID_MAX / GRID_STEP


def full_grid(step: float = GRID_STEP, top: float = GRID_MAX) -> tuple[float, ...]:
    n = int(round(top / step))
    return tuple((k + 1) * step for k in range(n))


def ratio_units(r: float, step: float = GRID_STEP) -> int:
    """Exact integer grid units for a ratio; raises if off-grid."""
    if r == 0.0:
        return 0
    k = round(r / step)
    if k < 1 or abs(r - k * step) > 1e-9:
        raise PlanError(f"ratio {r} is not a multiple of the grid step {step}")
    return int(k)


@dataclass(frozen=True)
class RecomputePlan:
    ratios: tuple[float, ...]
    grid_step: float = GRID_STEP

    @property
    def num_layers(self) -> int:
        return len(self.ratios)


def mean_ratio(plan: RecomputePlan) -> float:
    return sum(plan.ratios) / len(plan.ratios)


def validate_plan(plan: RecomputePlan) -> str | None:
    """None if the plan is valid, else a description of the first violation."""
    if not plan.ratios:
        return "plan has no layers"
    prev = None
    for idx, r in enumerate(plan.ratios, start=1):
        if not 0.0 <= r <= 1.0:
            return f"layer {idx}: ratio {r} outside [0, 1]"
        if r not in (0.0, 1.0):
            k = round(r / plan.grid_step)
            on_grid = (1 <= k <= round(GRID_MAX / plan.grid_step)
                       and abs(r - k * plan.grid_step) <= 1e-9)
            if not on_grid:
                return (f"layer {idx}: ratio {r} off the grid "
                        f"{{{plan.grid_step}, {2 * plan.grid_step}, ..., {GRID_MAX}}}")
        if prev is not None and r > prev + 1e-12:
            return f"layer {idx}: ratio {r} exceeds layer {idx - 1}'s {prev}"
        prev = r
    return None


def require_valid(plan: RecomputePlan) -> None:
    problem = validate_plan(plan)
    if problem is not None:
        raise PlanError(problem)


def plan_static(ratio: float, num_layers: int) -> RecomputePlan:
    """Uniform plan: the same ratio at every layer (trivially monotone)."""
    plan = RecomputePlan((float(ratio),) * num_layers)
    require_valid(plan)
    return plan


def recompute_count(ratio: float, tokens_per_image: int) -> int:
    return math.floor(ratio * tokens_per_image + 1e-9)


@dataclass
class ComputationMask:
    """Per-layer booleans over sequence positions; True means compute."""

    layers: np.ndarray  # [L, seq_len] bool

    @property
    def computed_counts(self) -> list[int]:
        return [int(m.sum()) for m in self.layers]


def build_masks(plan: RecomputePlan, seq: TokenSequence) -> ComputationMask:
    """Text positions are computed at every layer; each image segment computes
    only its first floor(r_i * T) tokens at layer i."""
    require_valid(plan)
    n = len(seq)
    masks = np.ones((plan.num_layers, n), dtype=bool)
    for seg in seq.image_segments:
        for i, r in enumerate(plan.ratios):
            keep = recompute_count(r, seg.length)
            masks[i, seg.start + keep:seg.start + seg.length] = False
    return ComputationMask(masks)


# ---------------------------------------------------------------------------
# plan file format: grid_step, declared mean ratio, comma-separated ratios


def save_plan(plan: RecomputePlan, path: str | Path) -> None:
    require_valid(plan)
    lines = [
        "# recompute plan: one ratio per layer, shallow to deep",
        f"grid_step = {plan.grid_step!r}",
        f"mean_ratio = {mean_ratio(plan)!r}",
        "ratios = " + ", ".join(repr(r) for r in plan.ratios),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_plan(path: str | Path) -> RecomputePlan:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value' in plan file", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    for key in ("grid_step", "mean_ratio", "ratios"):
        if key not in raw:
            raise ParseError(f"plan file missing {key!r}")
    try:
        step = float(raw["grid_step"])
        declared = float(raw["mean_ratio"])
        ratios = tuple(float(tok) for tok in raw["ratios"].split(",") if tok.strip())
    except ValueError as exc:
        raise ParseError(f"plan file: {exc}") from None
    plan = RecomputePlan(ratios, grid_step=step)
    require_valid(plan)
    actual = mean_ratio(plan)
    if abs(actual - declared) > 1e-9:
        raise PlanError(
            f"declared mean ratio {declared!r} does not match ratios (actual {actual!r})")
    return plan
