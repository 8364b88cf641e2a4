"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The statistical criteria use
the 64-token-image model; the latency trend uses a 256-token-image model so
input sizes reach 4096 image tokens.
"""

import csv
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ERRLAB_CFG, SMALL_CFG, rel_err
from kvreuse import ModelConfig, init_model
from kvreuse.bench import BenchScenario, fill_store, run_matrix
from kvreuse.cli import main as cli_main
from kvreuse.engine import ReuseRequest, count_flops, prefill_with_reuse
from kvreuse.error_lab import budget_sweep, head_vs_tail, reuse_error_profile
from kvreuse.exceptions import IntegrityError
from kvreuse.model import encode_image, make_sequence, prefill_full
from kvreuse.planner import BudgetSpec, objective, plan_bruteforce, plan_greedy
from kvreuse.plans import RecomputePlan, plan_static, validate_plan
from kvreuse.sensitivity import ProxySample, SensitivityTable, profile
from kvreuse.store import (CacheStore, EncoderCacheEntry, KVCacheEntry,
                           hash_image)
from kvreuse.toydata import (example_inputs, make_image, neutral_prompt_ids,
                             prompt_ids)
from pipeline import make_workspace, pipeline_commands

BENCH_CFG = ModelConfig(num_layers=4, num_heads=2, model_dim=32, kv_dim=32,
                        vocab_size=97, patch_size=4, tokens_per_image=256, seed=7)


@contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[acceptance {number:02d}] FAIL  {description}")
        raise
    print(f"[acceptance {number:02d}] PASS  {description}")


def random_request(model, store, rng_seed: int, same_prefix: bool):
    """Fill the store for fresh images and build a request over them.

    With same_prefix=True the fill runs on the same pre-image layout as the
    live request (only the trailing text differs), so cached KV is exact.
    """
    cfg = model.config
    rng = np.random.default_rng(rng_seed)
    n_images = int(rng.integers(1, 3))
    images = [make_image(cfg.image_side, rng_seed * 10 + i) for i in range(n_images)]
    prefix = prompt_ids(cfg.vocab_size, int(rng.integers(4, 10)), rng_seed)
    suffix = prompt_ids(cfg.vocab_size, int(rng.integers(2, 6)), rng_seed + 1)
    if same_prefix:
        cache_suffix = prompt_ids(cfg.vocab_size, 3, rng_seed + 3)
        cache_seq = make_sequence(prefix, n_images, cfg.tokens_per_image,
                                  suffix=cache_suffix)
        fill_store_request(model, store, cache_seq, images)
        live_prefix = prefix
    else:
        fill_store(model, store, images, prefix)
        live_prefix = prompt_ids(cfg.vocab_size, len(prefix), rng_seed + 2)
    seq = make_sequence(live_prefix, n_images, cfg.tokens_per_image, suffix=suffix)
    hashes = [hash_image(px) for px in images]
    embeds = [encode_image(model, px) for px in images]
    return seq, hashes, embeds


def test_01_full_recompute_exactness(small_model):
    with criterion(1, "plan=1.0 reproduces full prefill logits (1e-5, < 10 s)"):
        t0 = time.perf_counter()
        for seed in range(10):
            store = CacheStore()
            seq, hashes, embeds = random_request(small_model, store, 1000 + seed,
                                                 same_prefix=False)
            full_logits, _ = prefill_full(small_model, seq, embeds)
            res = prefill_with_reuse(
                small_model, ReuseRequest(seq, hashes, plan_static(1.0, 4)), store)
            assert res.positions.shape == (len(seq),)
            assert rel_err(res.logits, full_logits) <= 1e-5
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0, f"took {elapsed:.1f}s"


def test_02_prefix_match_exactness(small_model):
    with criterion(2, "plan=0.0 with an identical prefix matches full compute (1e-5)"):
        for seed in range(10):
            store = CacheStore()
            seq, hashes, embeds = random_request(small_model, store, 2000 + seed,
                                                 same_prefix=True)
            full_logits, _ = prefill_full(small_model, seq, embeds)
            res = prefill_with_reuse(
                small_model, ReuseRequest(seq, hashes, plan_static(0.0, 4)), store)
            assert rel_err(res.logits, full_logits[res.positions]) <= 1e-5


def test_03_layer0_context_independence(small_model):
    with criterion(3, "cached layer-0 pre-rotation KV is prefix-independent (1e-6)"):
        cfg = small_model.config
        for seed in range(10):
            store = CacheStore()
            image = make_image(cfg.image_side, 3000 + seed)
            cache_prefix = prompt_ids(cfg.vocab_size, 8, seed)
            other_prefix = prompt_ids(cfg.vocab_size, 8, seed + 500)
            fill_store(small_model, store, [image], cache_prefix)
            entry = store.get_kv(hash_image(image))
            emb = encode_image(small_model, image)
            seq = make_sequence(other_prefix, 1, cfg.tokens_per_image)
            _, fresh = prefill_full(small_model, seq, [emb])
            seg = seq.image_segments[0]
            sl = slice(seg.start, seg.start + seg.length)
            assert np.abs(entry.keys[0] - fresh.keys[0, sl]).max() <= 1e-6
            assert np.abs(entry.values[0] - fresh.values[0, sl]).max() <= 1e-6


def test_04_cumulative_error_trend(errlab_model):
    with criterion(4, "reuse error grows with position; head recompute suppresses it"):
        cfg = errlab_model.config
        t = cfg.tokens_per_image
        q = t // 4
        cut = int(0.3 * t)
        seeds = 20
        firsts, lasts = [], []
        chain_ok = 0
        for s in range(seeds):
            image, cache_p, live_p = example_inputs(cfg, 100 + s, prompt_len=24)
            profs = budget_sweep(errlab_model, image, cache_p, live_p,
                                 (0.0, 0.1, 0.3))
            e0, e1, e3 = (p.errors for p in profs)
            firsts.append(e0[:q].mean())
            lasts.append(e0[-q:].mean())
            if e1[cut:].mean() <= e0[cut:].mean() and e3[cut:].mean() <= e1[cut:].mean():
                chain_ok += 1
        assert np.mean(lasts) > np.mean(firsts), "no positional accumulation"
        assert chain_ok >= 0.9 * seeds, f"chain held in only {chain_ok}/{seeds} seeds"


def test_05_head_vs_tail(errlab_model):
    with criterion(5, "early-token recomputation beats late-token at equal budget"):
        cfg = errlab_model.config
        seeds = 20
        wins = 0
        for s in range(seeds):
            image, cache_p, live_p = example_inputs(cfg, 100 + s, prompt_len=24)
            head, tail = head_vs_tail(errlab_model, image, (cache_p, live_p), 0.3)
            if head.errors.sum() < tail.errors.sum():
                wins += 1
        assert wins >= 0.9 * seeds, f"head won only {wins}/{seeds}"


def test_06_sensitivity_control_and_trend(errlab_model):
    with criterion(6, "sensitivity: zero for matched prompts, drops with recompute"):
        cfg = errlab_model.config
        controls = [ProxySample(make_image(cfg.image_side, 200 + k),
                                prompt_ids(cfg.vocab_size, 10, 300 + k),
                                prompt_ids(cfg.vocab_size, 10, 300 + k))
                    for k in range(3)]
        control_table = profile(errlab_model, controls, (0.1, 0.3), max_new=5)
        assert control_table.baseline <= 1e-6
        assert float(control_table.scores.max()) <= 1e-6

        samples = [ProxySample(make_image(cfg.image_side, 400 + k),
                               prompt_ids(cfg.vocab_size, 10, 500 + k),
                               neutral_prompt_ids(cfg.vocab_size, 10))
                   for k in range(5)]
        table = profile(errlab_model, samples, (0.1, 0.3), max_new=8)
        improved = sum(table.baseline > table.scores[i, -1]
                       for i in range(table.num_layers))
        assert improved > table.num_layers // 2, f"only {improved} layers improved"


def test_07_planner_correctness():
    with criterion(7, "greedy plans feasible, dominated by brute force, exact on "
                      "diminishing-gain instances"):
        grid = (0.1, 0.2, 0.3)
        for t in range(50):
            rng = np.random.default_rng(t)
            layers = int(rng.integers(2, 5))
            g = grid[:int(rng.integers(2, 4))]
            scores = rng.uniform(0.0, 1.0, size=(layers, len(g)))
            tbl = SensitivityTable(scores, g, float(rng.uniform(0.5, 1.5)), 1, 0)
            p_target = float(rng.uniform(0, layers * max(g)))
            plan_g = plan_greedy(tbl, BudgetSpec(p_target))
            plan_b = plan_bruteforce(tbl, BudgetSpec(p_target))
            for plan in (plan_g, plan_b):
                assert validate_plan(plan) is None
                assert sum(plan.ratios) <= p_target + 1e-9
            assert objective(tbl, plan_g) >= objective(tbl, plan_b) - 1e-12
        # diminishing gains along the grid and with depth: greedy is exact
        for t in range(30):
            rng = np.random.default_rng(5000 + t)
            layers = int(rng.integers(2, 5))
            gains = np.sort(rng.uniform(0.05, 1.0, size=(layers, len(grid))),
                            axis=1)[:, ::-1]
            gains = np.sort(gains, axis=0)[::-1, :]
            scores = 10.0 - np.cumsum(gains, axis=1)
            tbl = SensitivityTable(scores, grid, 10.0, 1, 0)
            budget = BudgetSpec(float(rng.uniform(0, layers * 0.3)))
            assert objective(tbl, plan_greedy(tbl, budget)) == pytest.approx(
                objective(tbl, plan_bruteforce(tbl, budget)), abs=1e-12)


def test_08_work_monotonicity_and_speedup_trend():
    with criterion(8, "analytic work monotone in ratios; measured speedup grows "
                      "with image-token count"):
        seq = make_sequence(prompt_ids(97, 20, 0), 2, 256)
        ladder = [plan_static(r, 4) for r in (0.0, 0.002, 0.1, 0.2, 0.3, 1.0)]
        totals = [count_flops(seq, p, BENCH_CFG).total for p in ladder]
        assert all(a <= b for a, b in zip(totals, totals[1:]))
        assert totals[0] < totals[2] < totals[-1]
        # lowering a single layer's ratio lowers the count
        base = count_flops(seq, RecomputePlan((0.3, 0.2, 0.2, 0.1)), BENCH_CFG).total
        lower = count_flops(seq, RecomputePlan((0.3, 0.2, 0.1, 0.1)), BENCH_CFG).total
        assert lower < base

        model = init_model(BENCH_CFG)
        store = CacheStore()
        scenarios = []
        for size in (512, 1024, 2048, 4096):
            scenarios.append(BenchScenario("origin", size, 20,
                                           repetitions=5, warmup=2))
            scenarios.append(BenchScenario("static", size, 20, ratio=0.0,
                                           repetitions=5, warmup=2))
        results = run_matrix(model, store, scenarios, seed=3)
        speedups = [r.speedup for r in results if r.name == "static(r=0)"]
        print(f"    speedups across sizes: {[round(s, 1) for s in speedups]}")
        assert all(a < b for a, b in zip(speedups, speedups[1:])), speedups


def test_09_store_integrity(tmp_path):
    with criterion(9, "1000 lossless round trips; persistence identity; "
                      "corruption detected and named"):
        rng = np.random.default_rng(0)
        store = CacheStore()
        recorded = []
        for i in range(1000):
            arr = rng.standard_normal((3, 5)).astype(np.float32)
            h = hash_image(arr)
            if i % 2 == 0:
                store.put_encoder(EncoderCacheEntry(h, arr, 0xFEED))
                recorded.append(("enc", h, arr))
            else:
                kv = rng.standard_normal((2, 3, 5)).astype(np.float32)
                store.put_kv(KVCacheEntry(hash_image(kv), kv, kv * 0.5, i, 0xFEED))
                recorded.append(("kv", hash_image(kv), kv))
        for kind, h, arr in recorded:
            if kind == "enc":
                assert np.array_equal(store.get_encoder(h).embeddings, arr)
            else:
                got = store.get_kv(h)
                assert np.array_equal(got.keys, arr)
                assert np.array_equal(got.values, arr * 0.5)

        target = tmp_path / "store"
        store.persist(target)
        loaded = CacheStore.load(target)
        for kind, h, arr in recorded:
            if kind == "enc":
                assert np.array_equal(loaded.get_encoder(h).embeddings, arr)
            else:
                assert np.array_equal(loaded.get_kv(h).keys, arr)

        import json
        manifest = json.loads((target / "manifest.json").read_text())
        key, meta = next(iter(sorted(manifest["entries"].items())))
        blob = target / meta["blob"]
        blob.write_bytes(blob.read_bytes()[:-1])
        with pytest.raises(IntegrityError) as exc:
            CacheStore.load(target)
        assert key in str(exc.value), "corruption report must name the key"


def _run_pipeline(base):
    ws = make_workspace(base, SMALL_CFG, bench_sizes=(64, 128), bench_reps=3)
    t0 = time.perf_counter()
    for argv in pipeline_commands(ws):
        code = cli_main(argv)
        assert code == 0, f"pipeline step failed: {argv}"
    elapsed = time.perf_counter() - t0
    return ws, elapsed


def _non_timing_bench_rows(path):
    rows = list(csv.reader(path.open()))
    header = rows[0]
    timing = {"median_ms", "store_ms", "speedup"}
    keep = [i for i, name in enumerate(header) if name not in timing]
    return [[row[i] for i in keep] for row in rows]


def test_10_end_to_end_smoke(tmp_path):
    with criterion(10, "CLI pipeline runs twice with byte-identical non-timing "
                       "outputs in under 5 minutes"):
        ws1, t1 = _run_pipeline(tmp_path / "run1")
        ws2, t2 = _run_pipeline(tmp_path / "run2")
        assert t1 < 300 and t2 < 300, f"pipeline too slow: {t1:.0f}s / {t2:.0f}s"
        for name in ("weights.bin", "sensitivity.txt", "plan.txt", "run.txt"):
            a = (ws1["out"] / name).read_bytes()
            b = (ws2["out"] / name).read_bytes()
            assert a == b, f"{name} differs between runs"
        assert ((ws1["store"] / "manifest.json").read_bytes()
                == (ws2["store"] / "manifest.json").read_bytes())
        assert (_non_timing_bench_rows(ws1["out"] / "bench.csv")
                == _non_timing_bench_rows(ws2["out"] / "bench.csv"))
