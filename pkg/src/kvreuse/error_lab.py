"""Measurement apparatus for reuse error: where it appears, how it propagates.

All experiments share one shape: cache an image's KV under a caching-time
text prefix, then run the same image under a different live prefix with some
stale/fresh substitution pattern, and compare a layer's attention output
against the all-fresh forward in the live context. Errors are per-token L2
norms of that difference, taken at a chosen layer (default: last).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import forward_injected, plan_to_use_cached
from .exceptions import InputError
from .model import ToyVLM, encode_image, make_sequence, prefill_full
from .plans import RecomputePlan, plan_static, recompute_count

DEFAULT_LAYER = -1  # last decoder layer


@dataclass
class ErrorProfile:
    """Per-image-token attention-output error norms for one configuration."""

    errors: np.ndarray  # [T] >= 0
    label: str
    layer: int


@dataclass
class ErrorDecomposition:
    """Single-token staleness measurements at one target position."""

    position: int
    e_self: float
    e_prop: np.ndarray   # [T]; e_prop[i] = error at `position` with only token i stale
    e_total: float
    additivity_residual: float


class ReuseScene:
    """Shared setup: cached image KV + live-context sequence and reference."""

    def __init__(self, model: ToyVLM, image: np.ndarray, cache_prefix: list[int],
                 new_prefix: list[int], layer: int = DEFAULT_LAYER):
        cfg = model.config
        self.model = model
        self.layer = layer % cfg.num_layers
        self.embeds = encode_image(model, image)

        cache_seq = make_sequence(cache_prefix, 1, cfg.tokens_per_image)
        _, cache_kv = prefill_full(model, cache_seq, [self.embeds])
        seg = cache_seq.image_segments[0]
        self.cached_keys = cache_kv.keys[:, seg.start:seg.start + seg.length]
        self.cached_values = cache_kv.values[:, seg.start:seg.start + seg.length]

        self.seq = make_sequence(new_prefix, 1, cfg.tokens_per_image)
        self.seg = self.seq.image_segments[0]
        n = len(self.seq)
        self.inject_k = np.zeros((cfg.num_layers, n, cfg.kv_dim), dtype=np.float32)
        self.inject_v = np.zeros_like(self.inject_k)
        sl = slice(self.seg.start, self.seg.start + self.seg.length)
        self.inject_k[:, sl] = self.cached_keys
        self.inject_v[:, sl] = self.cached_values

        _, ref_cap = forward_injected(model, self.seq, [self.embeds],
                                      capture_layers=(self.layer,))
        self.reference = ref_cap[self.layer]

    def errors_for(self, use_cached: np.ndarray) -> np.ndarray:
        _, cap = forward_injected(self.model, self.seq, [self.embeds],
                                  inject_keys=self.inject_k,
                                  inject_values=self.inject_v,
                                  use_cached=use_cached,
                                  capture_layers=(self.layer,))
        diff = cap[self.layer] - self.reference
        norms = np.linalg.norm(diff, axis=-1)
        return norms[self.seg.start:self.seg.start + self.seg.length]

    def stale_mask(self, stale_token_indices) -> np.ndarray:
        """All-layer staleness for the given image-token indices (0-based
        within the image segment)."""
        cfg = self.model.config
        mask = np.zeros((cfg.num_layers, len(self.seq)), dtype=bool)
        for idx in stale_token_indices:
            mask[:, self.seg.start + int(idx)] = True
        return mask


def reuse_error_profile(model: ToyVLM, image: np.ndarray, cache_prefix: list[int],
                        new_prefix: list[int], plan: RecomputePlan,
                        layer: int = DEFAULT_LAYER, label: str | None = None,
                        scene: ReuseScene | None = None) -> ErrorProfile:
    """Per-token error when the image's KV is reused under `plan`."""
    scene = scene or ReuseScene(model, image, cache_prefix, new_prefix, layer)
    use_cached = plan_to_use_cached(plan, scene.seq)
    errors = scene.errors_for(use_cached)
    return ErrorProfile(errors, label or f"plan_mean_{np.mean(plan.ratios):g}",
                        scene.layer)


def decompose_error(model: ToyVLM, image: np.ndarray, cache_prefix: list[int],
                    new_prefix: list[int], position: int,
                    layer: int = DEFAULT_LAYER,
                    scene: ReuseScene | None = None) -> ErrorDecomposition:
    """Self / propagated / total error at one image-token position.

    Each component substitutes ONLY the named token's cached KV (at every
    layer) and reads the resulting attention-output error at `position`.
    The additivity residual |e_total - e_self - sum(e_prop)| is reported as
    data; norms are not expected to add exactly.
    """
    scene = scene or ReuseScene(model, image, cache_prefix, new_prefix, layer)
    t = scene.seg.length
    if not 0 <= position < t:
        raise InputError(f"position {position} outside image segment of length {t}")
    e_self = float(scene.errors_for(scene.stale_mask([position]))[position])
    e_prop = np.zeros(t, dtype=np.float64)
    for i in range(position):
        e_prop[i] = scene.errors_for(scene.stale_mask([i]))[position]
    e_total = float(scene.errors_for(scene.stale_mask(range(t)))[position])
    residual = abs(e_total - e_self - float(e_prop.sum()))
    return ErrorDecomposition(position, e_self, e_prop, e_total, residual)


def head_vs_tail(model: ToyVLM, image: np.ndarray,
                 prefixes: tuple[list[int], list[int]], budget_fraction: float,
                 layer: int = DEFAULT_LAYER) -> tuple[ErrorProfile, ErrorProfile]:
    """Spend an equal recompute budget on the earliest vs the latest tokens.

    Both configurations keep floor(b * T) tokens fresh at every layer; only
    which tokens differ. Returns (head profile, tail profile).
    """
    if not 0.0 <= budget_fraction <= 1.0:
        raise InputError("budget_fraction must lie in [0, 1]")
    cache_prefix, new_prefix = prefixes
    scene = ReuseScene(model, image, cache_prefix, new_prefix, layer)
    t = scene.seg.length
    keep = recompute_count(budget_fraction, t)
    head_stale = scene.stale_mask(range(keep, t))
    tail_stale = scene.stale_mask(range(0, t - keep))
    head = ErrorProfile(scene.errors_for(head_stale), f"head_{budget_fraction:g}",
                        scene.layer)
    tail = ErrorProfile(scene.errors_for(tail_stale), f"tail_{budget_fraction:g}",
                        scene.layer)
    return head, tail


def budget_sweep(model: ToyVLM, image: np.ndarray, cache_prefix: list[int],
                 new_prefix: list[int], fractions: tuple[float, ...],
                 layer: int = DEFAULT_LAYER) -> list[ErrorProfile]:
    """Profiles for several head-recompute fractions over one shared scene."""
    scene = ReuseScene(model, image, cache_prefix, new_prefix, layer)
    out = []
    for frac in fractions:
        plan = plan_static(frac, model.config.num_layers)
        out.append(reuse_error_profile(model, image, cache_prefix, new_prefix,
                                       plan, layer, label=f"recompute_{frac:g}",
                                       scene=scene))
    return out


def emit_profile_csv(profiles: list[ErrorProfile], path: str | Path) -> None:
    """One row per token position, one column per profile."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position"] + [p.label for p in profiles])
        if profiles:
            length = len(profiles[0].errors)
            if any(len(p.errors) != length for p in profiles):
                raise InputError("profiles have differing lengths")
            for pos in range(length):
                writer.writerow([pos] + [repr(float(p.errors[pos])) for p in profiles])
