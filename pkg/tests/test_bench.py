import csv
import math

import numpy as np
import pytest

from conftest import SMALL_CFG
from kvreuse.bench import (BenchScenario, ScenarioResult, fill_store, load_matrix,
                           render_table, run_matrix, run_scenario, write_csv)
from kvreuse.engine import count_flops, encoder_flops
from kvreuse.exceptions import InputError, SetupError
from kvreuse.model import make_sequence
from kvreuse.plans import RecomputePlan, plan_static, save_plan
from kvreuse.store import CacheStore
from kvreuse.toydata import prompt_ids


def small_matrix(size=64, reps=3, warmup=1):
    return [
        BenchScenario("origin", size, 8, repetitions=reps, warmup=warmup),
        BenchScenario("no_vit", size, 8, repetitions=reps, warmup=warmup),
        BenchScenario("static", size, 8, ratio=0.0, repetitions=reps, warmup=warmup),
        BenchScenario("static", size, 8, ratio=0.3, repetitions=reps, warmup=warmup),
    ]


def test_scenario_validation():
    with pytest.raises(InputError):
        BenchScenario("origin", 64, 8, repetitions=2)
    with pytest.raises(InputError):
        BenchScenario("static", 64, 8)  # ratio missing
    with pytest.raises(InputError):
        BenchScenario("bogus", 64, 8)


def test_image_total_must_be_multiple_of_t(small_model):
    sc = BenchScenario("origin", 60, 8, repetitions=3)
    with pytest.raises(InputError):
        run_scenario(small_model, CacheStore(), sc)


def test_cold_store_is_setup_error(small_model):
    sc = BenchScenario("static", 32, 8, ratio=0.0, repetitions=3, warmup=0)
    with pytest.raises(SetupError):
        run_scenario(small_model, CacheStore(), sc)


def test_origin_speedup_exactly_one(small_model):
    results = run_matrix(small_model, CacheStore(), small_matrix(), seed=2)
    assert results[0].name == "origin"
    assert results[0].speedup == 1.0
    assert results[0].fallbacks == 0


def test_flops_ordering(small_model):
    results = run_matrix(small_model, CacheStore(), small_matrix(), seed=2)
    by_name = {r.name: r for r in results}
    assert by_name["static(r=0)"].flops < by_name["static(r=0.3)"].flops
    assert by_name["static(r=0.3)"].flops < by_name["origin"].flops
    assert by_name["no_vit"].flops < by_name["origin"].flops
    # origin pays exactly the encoder on top of full decoder work
    n_images = 64 // 16
    assert (by_name["origin"].flops - by_name["no_vit"].flops
            == n_images * encoder_flops(SMALL_CFG))
    # reuse rows ran against a warm store: no fallbacks
    assert all(r.fallbacks == 0 for r in results)


def test_origin_flops_independent_of_store(small_model):
    sc = BenchScenario("origin", 32, 8, repetitions=3, warmup=0)
    cold = run_scenario(small_model, CacheStore(), sc, seed=1)
    warm_store = CacheStore()
    images = [np.zeros((16, 16), np.float32)]
    fill_store(small_model, warm_store, images, [1, 2])
    warm = run_scenario(small_model, warm_store, sc, seed=1)
    assert cold.flops == warm.flops


def test_dynamic_scenario_runs(small_model):
    plan = RecomputePlan((0.2, 0.1, 0.1, 0.0))
    sc = [BenchScenario("origin", 32, 8, repetitions=3, warmup=0),
          BenchScenario("dynamic", 32, 8, plan=plan, repetitions=3, warmup=0)]
    results = run_matrix(small_model, CacheStore(), sc, seed=4)
    assert results[1].mean_ratio == pytest.approx(0.1)
    assert math.isfinite(results[1].speedup)


def test_empty_matrix_header_only(tmp_path):
    path = tmp_path / "bench.csv"
    write_csv([], path)
    rows = list(csv.reader(path.open()))
    assert len(rows) == 1 and rows[0][0] == "name"
    table = render_table([])
    assert "configuration" in table


def test_csv_roundtrip(tmp_path, small_model):
    results = run_matrix(small_model, CacheStore(), small_matrix(), seed=2)
    path = tmp_path / "bench.csv"
    write_csv(results, path)
    rows = list(csv.reader(path.open()))
    assert len(rows) == len(results) + 1
    for row, res in zip(rows[1:], results):
        assert row[0] == res.name
        assert float(row[3]) == pytest.approx(res.median_ms, abs=1e-9)
        assert float(row[6]) == pytest.approx(res.speedup, abs=1e-9)
        assert int(row[5]) == res.flops


def test_render_table_shape(small_model):
    results = run_matrix(small_model, CacheStore(), small_matrix(), seed=2)
    text = render_table(results)
    lines = text.splitlines()
    assert len(lines) == len(results) + 2  # header + rule
    assert "origin" in lines[2]


def test_matrix_file_parse(tmp_path):
    plan_path = tmp_path / "plan.txt"
    save_plan(plan_static(0.1, 4), plan_path)
    matrix = tmp_path / "matrix.txt"
    matrix.write_text("sizes = 32, 64\ntext_tokens = 8\nrepetitions = 3\n"
                      "warmup = 0\nconfigs = origin, static:0.1, dynamic:plan.txt\n")
    scenarios = load_matrix(matrix, 4)
    assert len(scenarios) == 6
    assert scenarios[1].kind == "static" and scenarios[1].ratio == 0.1
    assert scenarios[2].kind == "dynamic"
    assert scenarios[2].plan.ratios == (0.1, 0.1, 0.1, 0.1)


def test_matrix_file_rejects_unknown_config(tmp_path):
    matrix = tmp_path / "matrix.txt"
    matrix.write_text("sizes = 32\nconfigs = warp_drive\n")
    with pytest.raises(InputError):
        load_matrix(matrix, 4)
