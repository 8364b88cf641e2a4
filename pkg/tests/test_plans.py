import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvreuse.exceptions import ParseError, PlanError
from kvreuse.model import make_sequence
from kvreuse.plans import (GRID_STEP, RecomputePlan, build_masks, load_plan,
                           mean_ratio, plan_static, ratio_units, recompute_count,
                           save_plan, validate_plan)


def test_validate_accepts_monotone_plan():
    assert validate_plan(RecomputePlan((0.1, 0.1, 0.05, 0.0))) is None


def test_validate_flags_monotonicity_with_layer_index():
    msg = validate_plan(RecomputePlan((0.05, 0.1, 0.1, 0.0)))
    assert msg is not None and "layer 2" in msg


def test_validate_flags_off_grid():
    msg = validate_plan(RecomputePlan((0.003, 0.0)))
    assert msg is not None and "grid" in msg


def test_validate_allows_one_and_zero_anywhere_monotone():
    assert validate_plan(RecomputePlan((1.0, 1.0, 0.3, 0.0))) is None
    assert validate_plan(RecomputePlan((0.0, 0.0))) is None


def test_validate_range():
    assert validate_plan(RecomputePlan((1.5, 0.0))) is not None
    assert validate_plan(RecomputePlan((-0.1,))) is not None


def test_ratio_units_exact():
    assert ratio_units(0.0) == 0
    assert ratio_units(0.1) == 50
    assert ratio_units(0.3) == 150
    with pytest.raises(PlanError):
        ratio_units(0.0031)


def test_recompute_count_floor():
    assert recompute_count(0.1, 1000) == 100
    assert recompute_count(0.002, 16) == 0
    assert recompute_count(0.3, 16) == 4
    assert recompute_count(1.0, 16) == 16


def test_static_and_mean():
    plan = plan_static(0.3, 4)
    assert plan.ratios == (0.3, 0.3, 0.3, 0.3)
    assert mean_ratio(plan) == pytest.approx(0.3, abs=0)
    assert mean_ratio(plan_static(0.0, 5)) == 0.0


# -- masks ---------------------------------------------------------------------


def test_masks_text_always_computed():
    seq = make_sequence([1, 2, 3], 1, 16, suffix=[4])
    masks = build_masks(plan_static(0.0, 4), seq)
    assert masks.layers[:, :3].all() and masks.layers[:, -1].all()
    assert not masks.layers[:, 3:19].any()


def test_masks_full_and_fractional():
    seq = make_sequence([1], 1, 16)
    full = build_masks(plan_static(1.0, 2), seq)
    assert full.layers.all()
    frac = build_masks(RecomputePlan((0.3, 0.1)), seq)
    # floor(0.3*16)=4, floor(0.1*16)=1, contiguous from the segment start
    assert frac.layers[0, 1:5].all() and not frac.layers[0, 5:17].any()
    assert frac.layers[1, 1:2].all() and not frac.layers[1, 2:17].any()
    assert frac.computed_counts == [5, 2]


def test_masks_rejects_invalid_plan():
    seq = make_sequence([1], 1, 16)
    with pytest.raises(PlanError):
        build_masks(RecomputePlan((0.1, 0.2)), seq)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 150), min_size=1, max_size=6),
       st.integers(0, 4), st.integers(1, 5))
def test_mask_invariants_property(units, n_text, n_images):
    ratios = tuple(sorted((u * GRID_STEP for u in units), reverse=True))
    plan = RecomputePlan(ratios)
    assert validate_plan(plan) is None
    seq = make_sequence(list(range(1, n_text + 1)), n_images, 16)
    masks = build_masks(plan, seq)
    img = seq.image_mask()
    # text always true
    assert masks.layers[:, ~img].all()
    for seg in seq.image_segments:
        sl = masks.layers[:, seg.start:seg.start + seg.length]
        for i in range(len(ratios)):
            row = sl[i]
            count = int(row.sum())
            assert count == recompute_count(ratios[i], seg.length)
            assert row[:count].all() and not row[count:].any()  # contiguous prefix
            if i:
                assert not (row & ~sl[i - 1]).any()  # nested within shallower


# -- plan files --------------------------------------------------------------------


def test_plan_file_roundtrip(tmp_path):
    plan = RecomputePlan((0.3, 0.1, 0.1, 0.0))
    path = tmp_path / "plan.txt"
    save_plan(plan, path)
    assert load_plan(path) == plan


def test_plan_file_rejects_wrong_declared_mean(tmp_path):
    path = tmp_path / "plan.txt"
    path.write_text("grid_step = 0.002\nmean_ratio = 0.2\nratios = 0.1, 0.1\n")
    with pytest.raises(PlanError):
        load_plan(path)


def test_plan_file_rejects_off_grid(tmp_path):
    path = tmp_path / "plan.txt"
    path.write_text("grid_step = 0.002\nmean_ratio = 0.003\nratios = 0.003, 0.003\n")
    with pytest.raises(PlanError):
        load_plan(path)


def test_plan_file_missing_key(tmp_path):
    path = tmp_path / "plan.txt"
    path.write_text("grid_step = 0.002\nratios = 0.1\n")
    with pytest.raises(ParseError):
        load_plan(path)
