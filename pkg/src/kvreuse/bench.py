"""Prefill latency / work matrix across reuse configurations.

Four configurations: `origin` (encode + full prefill, no store), `no_vit`
(cached embeddings, full KV recompute), `static:r` (uniform ratio) and
`dynamic:<plan>` (planner output). Timing wraps only the compute path;
hashing and store lookups are reported separately. Speedups are relative to
the origin row at the same input size, so the origin row is exactly 1.0.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ReuseRequest, count_flops, prefill_with_reuse
from .exceptions import InputError, SetupError
from .model import ToyVLM, encode_image, make_sequence, prefill_full
from .plans import RecomputePlan, load_plan, mean_ratio, plan_static
from .store import CacheStore, EncoderCacheEntry, KVCacheEntry, hash_image
from .toydata import make_images, prompt_ids


@dataclass
class BenchScenario:
    kind: str                      # origin | no_vit | static | dynamic
    image_token_total: int
    text_tokens: int
    ratio: float | None = None     # static only
    plan: RecomputePlan | None = None  # dynamic only
    repetitions: int = 5
    warmup: int = 2

    def __post_init__(self):
        if self.kind not in ("origin", "no_vit", "static", "dynamic"):
            raise InputError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "static" and self.ratio is None:
            raise InputError("static scenario needs a ratio")
        if self.kind == "dynamic" and self.plan is None:
            raise InputError("dynamic scenario needs a plan")
        if self.repetitions < 3:
            raise InputError("repetitions must be >= 3")

    @property
    def name(self) -> str:
        if self.kind == "static":
            return f"static(r={self.ratio:g})"
        if self.kind == "dynamic":
            return f"dynamic(r_bar={mean_ratio(self.plan):g})"
        return self.kind

    def effective_plan(self, num_layers: int) -> RecomputePlan | None:
        if self.kind == "origin":
            return None
        if self.kind == "no_vit":
            return plan_static(1.0, num_layers)
        if self.kind == "static":
            return plan_static(self.ratio, num_layers)
        return self.plan


@dataclass
class ScenarioResult:
    name: str
    image_tokens: int
    text_tokens: int
    median_ms: float
    store_ms: float
    flops: int
    speedup: float
    fallbacks: int
    mean_ratio: float

    # columns whose values depend on wall-clock measurement
    TIMING_FIELDS = ("median_ms", "store_ms", "speedup")


def fill_store_request(model: ToyVLM, store: CacheStore, seq,
                       images: list[np.ndarray]) -> list[np.ndarray]:
    """Cache-miss path for one request: a single full prefill, then one
    encoder entry and one per-layer KV slice stored per image."""
    embeds = [encode_image(model, px) for px in images]
    _, kv = prefill_full(model, seq, embeds)
    for seg, px, emb in zip(seq.image_segments, images, embeds):
        h = hash_image(px)
        sl = slice(seg.start, seg.start + seg.length)
        store.put_encoder(EncoderCacheEntry(h, emb, model.fingerprint))
        store.put_kv(KVCacheEntry(h, kv.keys[:, sl].copy(), kv.values[:, sl].copy(),
                                  origin_position=seg.start,
                                  model_fingerprint=model.fingerprint))
    return embeds


def fill_store(model: ToyVLM, store: CacheStore, images: list[np.ndarray],
               prefix: list[int]) -> None:
    """Bulk fill: cache each image from its own [prefix, image] request."""
    cfg = model.config
    for px in images:
        seq = make_sequence(prefix, 1, cfg.tokens_per_image)
        fill_store_request(model, store, seq, [px])


def scenario_images(scenario: BenchScenario, cfg, seed: int) -> list[np.ndarray]:
    if scenario.image_token_total % cfg.tokens_per_image:
        raise InputError(
            f"image_token_total {scenario.image_token_total} is not a multiple of "
            f"tokens_per_image {cfg.tokens_per_image}")
    count = scenario.image_token_total // cfg.tokens_per_image
    return make_images(count, cfg.image_side, seed)


def run_scenario(model: ToyVLM, store: CacheStore, scenario: BenchScenario,
                 seed: int = 0) -> ScenarioResult:
    """Median-of-repetitions timing for one configuration (speedup filled in
    later by run_matrix). Reuse configurations require a pre-filled store."""
    cfg = model.config
    images = scenario_images(scenario, cfg, seed)
    text = prompt_ids(cfg.vocab_size, scenario.text_tokens, seed + 1)
    seq = make_sequence(text, len(images), cfg.tokens_per_image)
    plan = scenario.effective_plan(cfg.num_layers)

    if scenario.kind == "origin":
        flops = count_flops(seq, plan_static(1.0, cfg.num_layers), cfg,
                            encoder_cached=False).total
        times = []
        for rep in range(scenario.warmup + scenario.repetitions):
            t0 = time.perf_counter()
            embeds = [encode_image(model, px) for px in images]
            prefill_full(model, seq, embeds)
            times.append(time.perf_counter() - t0)
        compute = times[scenario.warmup:]
        return ScenarioResult("origin", scenario.image_token_total,
                              scenario.text_tokens,
                              statistics.median(compute) * 1e3, 0.0, flops,
                              1.0, 0, 1.0)

    t0 = time.perf_counter()
    hashes = [hash_image(px) for px in images]
    hash_seconds = time.perf_counter() - t0
    for h in hashes:
        if (store.get_encoder(h, model.fingerprint) is None
                or store.get_kv(h, model.fingerprint) is None):
            raise SetupError(
                f"store is cold for image {h.hex[:12]}...; run the fill step first")
    request = ReuseRequest(seq, hashes, plan)
    flops = count_flops(request, plan, cfg, encoder_cached=True).total
    compute_times, store_times = [], []
    fallbacks = 0
    for rep in range(scenario.warmup + scenario.repetitions):
        result = prefill_with_reuse(model, request, store)
        compute_times.append(result.metrics.compute_seconds)
        store_times.append(result.metrics.resolve_seconds)
        fallbacks = result.metrics.fallback_images
    compute = compute_times[scenario.warmup:]
    resolve = store_times[scenario.warmup:]
    return ScenarioResult(scenario.name, scenario.image_token_total,
                          scenario.text_tokens,
                          statistics.median(compute) * 1e3,
                          (statistics.median(resolve) + hash_seconds) * 1e3,
                          flops, float("nan"), fallbacks, mean_ratio(plan))


def run_matrix(model: ToyVLM, store: CacheStore, scenarios: list[BenchScenario],
               seed: int = 0) -> list[ScenarioResult]:
    """Run scenarios in order; fill store once per input size; set speedups
    against the origin row of the same (image_tokens, text_tokens) group."""
    cfg = model.config
    filled: set[tuple[int, int]] = set()
    for sc in scenarios:
        group = (sc.image_token_total, sc.text_tokens)
        if sc.kind != "origin" and group not in filled:
            images = scenario_images(sc, cfg, seed)
            text = prompt_ids(cfg.vocab_size, sc.text_tokens, seed + 1)
            fill_store(model, store, images, text)
            filled.add(group)
    results = [run_scenario(model, store, sc, seed) for sc in scenarios]
    origin_ms: dict[tuple[int, int], float] = {}
    for sc, res in zip(scenarios, results):
        if sc.kind == "origin":
            origin_ms[(sc.image_token_total, sc.text_tokens)] = res.median_ms
    for sc, res in zip(scenarios, results):
        if sc.kind != "origin":
            base = origin_ms.get((sc.image_token_total, sc.text_tokens))
            if base is not None:
                res.speedup = base / res.median_ms
    return results


CSV_COLUMNS = ("name", "image_tokens", "text_tokens", "median_ms", "store_ms",
               "flops", "speedup", "fallbacks", "mean_ratio")


def write_csv(results: list[ScenarioResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow([
                r.name, r.image_tokens, r.text_tokens, repr(r.median_ms),
                repr(r.store_ms), r.flops, repr(r.speedup), r.fallbacks,
                repr(r.mean_ratio),
            ])


def render_table(results: list[ScenarioResult]) -> str:
    headers = ("configuration", "img_tok", "txt_tok", "median_ms", "store_ms",
               "GFLOP", "speedup", "fallback", "r_bar")
    rows = [headers]
    for r in results:
        rows.append((r.name, str(r.image_tokens), str(r.text_tokens),
                     f"{r.median_ms:.3f}", f"{r.store_ms:.3f}",
                     f"{r.flops / 1e9:.4f}", f"{r.speedup:.2f}x",
                     str(r.fallbacks), f"{r.mean_ratio:.4f}"))
    widths = [max(len(row[c]) for row in rows) for c in range(len(headers))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# scenario matrix file: sizes/configs cross product


def load_matrix(path: str | Path, num_layers: int) -> list[BenchScenario]:
    from .config import parse_kv_file
    raw = parse_kv_file(path)
    base = Path(path).parent
    sizes = [int(tok) for tok in raw.get("sizes", "").split(",") if tok.strip()]
    if not sizes:
        raise InputError(f"scenario matrix {path} lists no sizes")
    text_tokens = int(raw.get("text_tokens", "20"))
    repetitions = int(raw.get("repetitions", "5"))
    warmup = int(raw.get("warmup", "2"))
    configs = [tok.strip() for tok in raw.get("configs", "origin").split(",")
               if tok.strip()]
    scenarios = []
    for size in sizes:
        for conf in configs:
            kind, _, arg = conf.partition(":")
            kwargs = dict(image_token_total=size, text_tokens=text_tokens,
                          repetitions=repetitions, warmup=warmup)
            if kind == "static":
                scenarios.append(BenchScenario("static", ratio=float(arg), **kwargs))
            elif kind == "dynamic":
                plan_path = Path(arg)
                if not plan_path.is_absolute():
                    plan_path = base / plan_path
                scenarios.append(BenchScenario("dynamic", plan=load_plan(plan_path),
                                               **kwargs))
            elif kind in ("origin", "no_vit"):
                scenarios.append(BenchScenario(kind, **kwargs))
            else:
                raise InputError(f"unknown config {conf!r} in scenario matrix")
    return scenarios
