"""Budgeted allocation of per-layer recompute ratios.

Greedy search over single-grid-step raises: at each step take the feasible
move (raise one layer to its next measured ratio without breaking the
non-increasing-by-depth constraint or the budget) with the largest score
decrease per unit of budget, and stop when no improving move is feasible.
A brute-force enumerator over all monotone grid assignments serves as the
exact oracle on small instances.

Budget arithmetic runs in integer grid units (ratio = k * 0.002), so the
budget constraint is checked exactly, with no float drift.
"""

from __future__ import annotations

from dataclasses import dataclass

from .exceptions import InputError
from .plans import GRID_STEP, RecomputePlan, mean_ratio, plan_static, ratio_units, require_valid
from .sensitivity import SensitivityTable

__all__ = ["BudgetSpec", "plan_greedy", "plan_bruteforce", "plan_static",
           "mean_ratio", "BRUTE_MAX_GRID", "BRUTE_MAX_LAYERS"]

BRUTE_MAX_GRID = 8
BRUTE_MAX_LAYERS = 6


@dataclass(frozen=True)
class BudgetSpec:
    """Total ratio budget (summed over layers) plus the grid to step through."""

    p_target: float
    grid: tuple[float, ...] | None = None  # None: use the table's grid

    def resolve_grid(self, table: SensitivityTable) -> tuple[float, ...]:
        if self.grid is None:
            return table.grid
        grid = tuple(sorted(float(g) for g in self.grid))
        missing = [g for g in grid
                   if not any(abs(g - t) <= 1e-9 for t in table.grid)]
        if missing:
            raise InputError(f"budget grid points {missing} were not profiled")
        return grid

    def check(self, num_layers: int, grid: tuple[float, ...]) -> None:
        if self.p_target < 0:
            raise InputError("budget must be non-negative")
        if not grid:
            raise InputError("empty ratio grid")
        if self.p_target > num_layers * max(grid) + 1e-9:
            raise InputError(
                f"budget {self.p_target} exceeds the maximum spendable "
                f"{num_layers} * {max(grid)}")


def _budget_units(p_target: float) -> int:
    return int((p_target + 1e-9) / GRID_STEP)


def plan_greedy(table: SensitivityTable, budget: BudgetSpec) -> RecomputePlan:
    grid = budget.resolve_grid(table)
    num_layers = table.num_layers
    budget.check(num_layers, grid)
    unit_cost = [ratio_units(g) for g in grid]
    limit = _budget_units(budget.p_target)

    levels = [-1] * num_layers  # index into grid; -1 means ratio 0
    spent = 0
    while True:
        best = None  # ((gain_per_unit, -layer), layer, cost)
        for i in range(num_layers):
            nxt = levels[i] + 1
            if nxt >= len(grid):
                continue
            if i > 0:  # may not rise above the layer right before it
                upper = grid[levels[i - 1]] if levels[i - 1] >= 0 else 0.0
                if grid[nxt] > upper + 1e-12:
                    continue
            cur_cost = unit_cost[levels[i]] if levels[i] >= 0 else 0
            cost = unit_cost[nxt] - cur_cost
            if spent + cost > limit:
                continue
            cur_score = table.score(i, grid[levels[i]] if levels[i] >= 0 else 0.0)
            gain = cur_score - table.score(i, grid[nxt])
            if gain <= 0:
                continue
            key = (gain / cost, -i)
            if best is None or key > best[0]:
                best = (key, i, cost)
        if best is None:
            break
        _, i, cost = best
        levels[i] += 1
        spent += cost
        ratios = tuple(grid[l] if l >= 0 else 0.0 for l in levels)
        assert all(ratios[j] >= ratios[j + 1] - 1e-12 for j in range(num_layers - 1)), \
            "greedy produced a non-monotone intermediate plan"
        assert spent <= limit
    plan = RecomputePlan(tuple(grid[l] if l >= 0 else 0.0 for l in levels))
    require_valid(plan)
    return plan


def plan_bruteforce(table: SensitivityTable, budget: BudgetSpec) -> RecomputePlan:
    """Exact minimizer by enumeration; ties broken by the lexicographically
    smallest ratio vector. Only for small instances."""
    grid = budget.resolve_grid(table)
    num_layers = table.num_layers
    budget.check(num_layers, grid)
    if len(grid) > BRUTE_MAX_GRID or num_layers > BRUTE_MAX_LAYERS:
        raise InputError(
            f"instance above brute-force cap (grid <= {BRUTE_MAX_GRID}, "
            f"layers <= {BRUTE_MAX_LAYERS})")
    unit_cost = [ratio_units(g) for g in grid]
    limit = _budget_units(budget.p_target)

    best_obj: float | None = None
    best_plan: tuple[float, ...] | None = None

    def recurse(layer: int, max_level: int, spent: int, obj: float,
                prefix: tuple[float, ...]):
        nonlocal best_obj, best_plan
        if layer == num_layers:
            if best_obj is None or obj < best_obj or (
                    obj == best_obj and prefix < best_plan):
                best_obj, best_plan = obj, prefix
            return
        for level in range(-1, max_level + 1):
            cost = unit_cost[level] if level >= 0 else 0
            if spent + cost > limit:
                break
            ratio = grid[level] if level >= 0 else 0.0
            recurse(layer + 1, level, spent + cost, obj + table.score(layer, ratio),
                    prefix + (ratio,))

    recurse(0, len(grid) - 1, 0, 0.0, ())
    assert best_plan is not None
    plan = RecomputePlan(best_plan)
    require_valid(plan)
    return plan


def objective(table: SensitivityTable, plan: RecomputePlan) -> float:
    """Sum of per-layer scores under the independence assumption."""
    return sum(table.score(i, r) for i, r in enumerate(plan.ratios))
