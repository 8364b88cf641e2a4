"""Prefill under a recompute plan, reusing cached encoder output and KV.

The skip path (`prefill_with_reuse`) runs attention and MLP only for the
tokens a layer's mask selects: text tokens always, plus the first
floor(r_i * T) tokens of each image segment. Every other image token
contributes its cached pre-RoPE K/V, rotated to the position it occupies in
the *current* request. Tokens that drop out of the computed set at some depth
contribute cached KV at all deeper layers; no hidden state exists for them
there.

`forward_injected` is the measurement twin: it computes every position
densely but lets attention see injected (cached) K/V wherever a per-layer
mask says so. The two paths agree on the logits of always-computed tokens,
which the test suite checks; the error-lab and sensitivity experiments are
built on the injected path because it can expose arbitrary stale/fresh
patterns, including ones no valid plan can express.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .exceptions import InputError
from .model import (KVTensors, DecoderState, ToyVLM, TokenSequence, apply_rope,
                    encode_image, greedy_steps, input_embeddings, masked_attention,
                    rms_norm, swiglu)
from .plans import ComputationMask, RecomputePlan, build_masks, mean_ratio, require_valid
from .store import CacheStore, ImageHash


# ---------------------------------------------------------------------------
# analytic work accounting


@dataclass(frozen=True)
class FlopsBreakdown:
    encoder: int
    attention: int
    mlp: int

    @property
    def total(self) -> int:
        return self.encoder + self.attention + self.mlp


def _attn_flops(computed: int, keys: int, cfg: ModelConfig) -> int:
    d, kv = cfg.model_dim, cfg.kv_dim
    macs = 3 * computed * d * kv + 2 * computed * keys * kv + computed * kv * d
    return 2 * macs


def _mlp_flops(computed: int, cfg: ModelConfig) -> int:
    return 2 * (3 * computed * cfg.model_dim * cfg.mlp_hidden)


def encoder_flops(cfg: ModelConfig) -> int:
    t = cfg.tokens_per_image
    proj = 2 * t * cfg.patch_size * cfg.patch_size * cfg.model_dim
    return proj + _attn_flops(t, t, cfg) + _mlp_flops(t, cfg)


def flops_from_masks(masks: ComputationMask, seq_len: int, cfg: ModelConfig,
                     images_encoded: int = 0) -> FlopsBreakdown:
    attn = sum(_attn_flops(c, seq_len, cfg) for c in masks.computed_counts)
    mlp = sum(_mlp_flops(c, cfg) for c in masks.computed_counts)
    return FlopsBreakdown(images_encoded * encoder_flops(cfg), attn, mlp)


def count_flops(request, plan: RecomputePlan, config: ModelConfig,
                encoder_cached: bool = True) -> FlopsBreakdown:
    """Attention + MLP multiply-adds the masked prefill actually executes.

    `request` may be a ReuseRequest or a bare TokenSequence. Assumes cache
    hits for every image; pass encoder_cached=False to charge the vision
    encoder (the full-compute baseline).
    """
    seq = getattr(request, "seq", request)
    require_valid(plan)
    masks = build_masks(plan, seq)
    encoded = 0 if encoder_cached else len(seq.image_segments)
    return flops_from_masks(masks, len(seq), config, images_encoded=encoded)


# ---------------------------------------------------------------------------
# reuse prefill


@dataclass
class ReuseRequest:
    seq: TokenSequence
    image_hashes: list[ImageHash]
    plan: RecomputePlan
    images: list[np.ndarray] | None = None  # pixels, for cache-miss fallback


@dataclass
class ReuseMetrics:
    fallback_images: int = 0
    encoder_misses: int = 0
    computed_per_layer: list[int] = field(default_factory=list)
    flops: FlopsBreakdown | None = None
    resolve_seconds: float = 0.0
    compute_seconds: float = 0.0
    mean_ratio: float = 0.0


@dataclass
class ReuseResult:
    positions: np.ndarray  # positions with logits (computed through all layers)
    logits: np.ndarray     # [len(positions), vocab]
    kv: KVTensors          # merged pre-RoPE KV for every position
    metrics: ReuseMetrics


def prefill_with_reuse(model: ToyVLM, request: ReuseRequest,
                       store: CacheStore) -> ReuseResult:
    cfg = model.config
    seq, plan = request.seq, request.plan
    require_valid(plan)
    if plan.num_layers != cfg.num_layers:
        raise InputError(
            f"plan has {plan.num_layers} layers, model has {cfg.num_layers}")
    seq.validate(cfg.tokens_per_image)
    segs = seq.image_segments
    if len(request.image_hashes) != len(segs):
        raise InputError("one hash per image segment required")

    metrics = ReuseMetrics(mean_ratio=mean_ratio(plan))
    masks = build_masks(plan, seq)
    n = len(seq)
    t0 = time.perf_counter()

    embeds: list[np.ndarray] = []
    cached_k = np.zeros((cfg.num_layers, n, cfg.kv_dim), dtype=np.float32)
    cached_v = np.zeros_like(cached_k)
    for m, seg in enumerate(segs):
        h = request.image_hashes[m]
        enc = store.get_encoder(h, expected_fingerprint=model.fingerprint)
        if enc is not None:
            embeds.append(enc.embeddings)
        else:
            metrics.encoder_misses += 1
            if request.images is None or request.images[m] is None:
                raise InputError(
                    f"encoder cache miss for image {m} and no pixels supplied")
            embeds.append(encode_image(model, request.images[m]))
        kv_entry = store.get_kv(h, expected_fingerprint=model.fingerprint)
        sl = slice(seg.start, seg.start + seg.length)
        if kv_entry is not None:
            cached_k[:, sl] = kv_entry.keys
            cached_v[:, sl] = kv_entry.values
        elif not masks.layers[:, sl].all():
            # reuse was requested but there is nothing to reuse
            metrics.fallback_images += 1
            masks.layers[:, sl] = True
    metrics.resolve_seconds = time.perf_counter() - t0
    metrics.computed_per_layer = masks.computed_counts
    metrics.flops = flops_from_masks(masks, n, cfg,
                                     images_encoded=metrics.encoder_misses)

    t1 = time.perf_counter()
    positions = np.arange(n)
    hidden = input_embeddings(model, seq, embeds)
    merged_k = cached_k
    merged_v = cached_v
    w = model.w
    rows = None
    for i in range(cfg.num_layers):
        rows = np.flatnonzero(masks.layers[i])
        x = hidden[rows]
        xn = rms_norm(x, w[f"l{i}_attn_norm"])
        q = xn @ w[f"l{i}_wq"]
        merged_k[i, rows] = xn @ w[f"l{i}_wk"]
        merged_v[i, rows] = xn @ w[f"l{i}_wv"]
        q_rot = apply_rope(q, rows, cfg.head_dim, cfg.rope_base)
        k_rot = apply_rope(merged_k[i], positions, cfg.head_dim, cfg.rope_base)
        allowed = rows[:, None] >= positions[None, :]
        attn = masked_attention(q_rot, k_rot, merged_v[i], allowed, cfg.num_heads)
        x = x + attn @ w[f"l{i}_wo"]
        x = x + swiglu(rms_norm(x, w[f"l{i}_mlp_norm"]), w[f"l{i}_w_gate"],
                       w[f"l{i}_w_up"], w[f"l{i}_w_down"])
        hidden[rows] = x
    logits = rms_norm(hidden[rows], w["final_norm"]) @ w["head"]
    metrics.compute_seconds = time.perf_counter() - t1
    return ReuseResult(rows, logits.astype(np.float32, copy=False),
                       KVTensors(merged_k, merged_v), metrics)


# ---------------------------------------------------------------------------
# decoding over merged KV


@dataclass
class DecodeResult:
    ids: list[int]
    step_logits: np.ndarray  # distribution each generated id was taken from
    tail_logits: np.ndarray  # logits after each teacher-forced tail token


def decode_with_merged_kv(model: ToyVLM, merged_kv: KVTensors,
                          tail_ids: list[int] | tuple = (), max_new: int = 0,
                          initial_logits: np.ndarray | None = None) -> DecodeResult:
    """Greedy decode attending over merged KV (cached keys rotated at their
    stored request positions).

    Tail tokens are teacher-forced first; generation then continues from the
    last tail logits, or from `initial_logits` (e.g. the reuse prefill's final
    row) when the tail is empty.
    """
    if max_new < 0:
        raise InputError("max_new must be >= 0")
    cfg = model.config
    tail_logits = np.empty((len(tail_ids), cfg.vocab_size), dtype=np.float32)
    if not tail_ids and max_new == 0:
        return DecodeResult([], np.empty((0, cfg.vocab_size), np.float32), tail_logits)
    state = DecoderState(model, merged_kv, capacity=len(tail_ids) + max_new)
    cur = initial_logits
    for j, tok in enumerate(tail_ids):
        cur = state.step(int(tok))
        tail_logits[j] = cur
    if max_new == 0:
        return DecodeResult([], np.empty((0, cfg.vocab_size), np.float32), tail_logits)
    if cur is None:
        raise InputError(
            "decoding needs a starting distribution: supply tail tokens or "
            "initial_logits from the prefill")
    ids, step_logits = greedy_steps(state, cur, max_new)
    return DecodeResult(ids, step_logits, tail_logits)


# ---------------------------------------------------------------------------
# dense forward with injected KV (measurement path)


def forward_injected(model: ToyVLM, seq: TokenSequence, image_embeds,
                     inject_keys: np.ndarray | None = None,
                     inject_values: np.ndarray | None = None,
                     use_cached: np.ndarray | None = None,
                     capture_layers: tuple[int, ...] = ()):
    """Teacher-forced dense forward with per-layer KV substitution.

    use_cached: bool [L, n]; where True, attention at that layer sees
    inject_keys/inject_values (pre-RoPE, rotated here to current positions)
    for that position instead of the freshly computed projections. Hidden
    states are still computed everywhere, so arbitrary substitution patterns
    are measurable.

    Returns (logits [n, vocab], {layer: attention block output [n, d]}).
    """
    cfg = model.config
    x = input_embeddings(model, seq, image_embeds)
    n = x.shape[0]
    positions = np.arange(n)
    if use_cached is None:
        use_cached = np.zeros((cfg.num_layers, n), dtype=bool)
    if use_cached.any() and (inject_keys is None or inject_values is None):
        raise InputError("use_cached set but no injected KV supplied")
    allowed = positions[:, None] >= positions[None, :]
    captures: dict[int, np.ndarray] = {}
    w = model.w
    for i in range(cfg.num_layers):
        xn = rms_norm(x, w[f"l{i}_attn_norm"])
        q = xn @ w[f"l{i}_wq"]
        k = xn @ w[f"l{i}_wk"]
        v = xn @ w[f"l{i}_wv"]
        if use_cached[i].any():
            sel = use_cached[i][:, None]
            k = np.where(sel, inject_keys[i], k)
            v = np.where(sel, inject_values[i], v)
        q_rot = apply_rope(q, positions, cfg.head_dim, cfg.rope_base)
        k_rot = apply_rope(k, positions, cfg.head_dim, cfg.rope_base)
        attn_out = masked_attention(q_rot, k_rot, v, allowed, cfg.num_heads) @ w[f"l{i}_wo"]
        if i in capture_layers or (i - cfg.num_layers) in capture_layers:
            captures[i] = attn_out
        x = x + attn_out
        x = x + swiglu(rms_norm(x, w[f"l{i}_mlp_norm"]), w[f"l{i}_w_gate"],
                       w[f"l{i}_w_up"], w[f"l{i}_w_down"])
    logits = rms_norm(x, w["final_norm"]) @ w["head"]
    return logits.astype(np.float32, copy=False), captures


def plan_to_use_cached(plan: RecomputePlan, seq: TokenSequence) -> np.ndarray:
    """The injected-path mask equivalent to a plan: stale wherever the skip
    path would reuse cached KV."""
    masks = build_masks(plan, seq)
    use_cached = ~masks.layers
    use_cached[:, ~seq.image_mask()] = False
    return use_cached
