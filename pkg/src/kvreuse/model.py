"""Deterministic toy vision-language transformer.

A patch encoder feeds image-token embeddings into a small pre-norm causal
decoder (RMS norm, SwiGLU MLP, rotary positions, one KV head group per
attention head). Everything is float32 numpy; all weights come from a single
seeded generator, so two models built from the same config are bit-identical.

Keys returned by the prefill paths are stored BEFORE rotary rotation; rotation
to a token's position in the live request happens at attention time. That is
what makes cached keys position-independent.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .exceptions import InputError, IntegrityError

RMS_EPS = 1e-6

WEIGHTS_MAGIC = b"TVLMW001"


# ---------------------------------------------------------------------------
# token sequences


@dataclass(frozen=True)
class Segment:
    kind: str  # "text" or "image"
    image_index: int | None
    start: int
    length: int


@dataclass
class TokenSequence:
    """Token ids plus a segment map telling which spans are image tokens.

    Image positions carry the sentinel id -1; their embeddings come from the
    vision encoder, not the text table.
    """

    ids: list[int]
    segments: list[Segment]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == "image"]

    def validate(self, tokens_per_image: int | None = None) -> None:
        cursor = 0
        img_idx = 0
        for seg in self.segments:
            if seg.start != cursor:
                raise InputError(f"segments do not partition the sequence at {cursor}")
            if seg.length <= 0:
                raise InputError("empty segment")
            if seg.kind == "image":
                if seg.image_index != img_idx:
                    raise InputError("image segments must be numbered in order")
                if tokens_per_image is not None and seg.length != tokens_per_image:
                    raise InputError(
                        f"image segment length {seg.length} != tokens_per_image "
                        f"{tokens_per_image}")
                img_idx += 1
            elif seg.kind != "text":
                raise InputError(f"unknown segment kind {seg.kind!r}")
            cursor += seg.length
        if cursor != len(self.ids):
            raise InputError("segments do not cover the id list")

    def image_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.ids), dtype=bool)
        for seg in self.image_segments:
            mask[seg.start:seg.start + seg.length] = True
        return mask


def make_sequence(prefix: list[int], num_images: int, tokens_per_image: int,
                  suffix: list[int] | tuple = ()) -> TokenSequence:
    """Build the standard request layout: text prefix, images, text suffix."""
    ids: list[int] = []
    segments: list[Segment] = []
    if prefix:
        segments.append(Segment("text", None, 0, len(prefix)))
        ids.extend(int(t) for t in prefix)
    for m in range(num_images):
        segments.append(Segment("image", m, len(ids), tokens_per_image))
        ids.extend([-1] * tokens_per_image)
    if len(suffix):
        segments.append(Segment("text", None, len(ids), len(suffix)))
        ids.extend(int(t) for t in suffix)
    seq = TokenSequence(ids, segments)
    seq.validate(tokens_per_image if num_images else None)
    return seq


@dataclass
class KVTensors:
    """Per-layer pre-RoPE keys/values, shape [L, seq_len, kv_dim] each."""

    keys: np.ndarray
    values: np.ndarray

    @property
    def seq_len(self) -> int:
        return self.keys.shape[1]

    def check_finite(self) -> None:
        if not (np.isfinite(self.keys).all() and np.isfinite(self.values).all()):
            raise InputError("non-finite KV entries")


# ---------------------------------------------------------------------------
# rotary position embedding


def rope_cos_sin(positions: np.ndarray, head_dim: int, base: float):
    """cos/sin tables for the half-split rotation, shape [n, head_dim // 2]."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float32) * (2.0 / head_dim))
    angles = np.asarray(positions, dtype=np.float32)[..., None] * inv_freq
    return np.cos(angles, dtype=np.float32), np.sin(angles, dtype=np.float32)


def apply_rope(x: np.ndarray, positions, head_dim: int, base: float) -> np.ndarray:
    """Rotate key/query vectors to the given positions.

    x: [..., kv_dim] with kv_dim a multiple of head_dim. Each head_dim block is
    rotated independently using the half-split pairing (i, i + head_dim/2).
    Position 0 is the identity; rotation preserves the vector norm.
    """
    x = np.asarray(x, dtype=np.float32)
    pos = np.atleast_1d(np.asarray(positions))
    squeeze = False
    if x.ndim == 1:
        x = x[None, :]
        squeeze = True
    if pos.shape[0] == 1 and x.shape[-2] != 1:
        pos = np.broadcast_to(pos, (x.shape[-2],))
    cos, sin = rope_cos_sin(pos, head_dim, base)
    heads = x.shape[-1] // head_dim
    half = head_dim // 2
    shaped = x.reshape(*x.shape[:-1], heads, head_dim)
    a, b = shaped[..., :half], shaped[..., half:]
    cos = cos[..., None, :]
    sin = sin[..., None, :]
    out = np.concatenate((a * cos - b * sin, b * cos + a * sin), axis=-1)
    out = out.reshape(x.shape).astype(np.float32, copy=False)
    if squeeze:
        out = out[0]
    return out


# ---------------------------------------------------------------------------
# model construction


LAYER_MATS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


def _init_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    d, kv, h = cfg.model_dim, cfg.kv_dim, cfg.mlp_hidden
    p2 = cfg.patch_size * cfg.patch_size

    def gauss(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)

    w: dict[str, np.ndarray] = {}
    w["embed"] = rng.standard_normal((cfg.vocab_size, d)).astype(np.float32)
    w["head"] = gauss((d, cfg.vocab_size), d)
    w["final_norm"] = np.ones(d, dtype=np.float32)

    w["enc_patch_w"] = gauss((p2, d), p2)
    w["enc_patch_b"] = gauss((d,), d)
    w["enc_pos"] = rng.standard_normal((cfg.tokens_per_image, d)).astype(np.float32)
    w["enc_out_norm"] = np.ones(d, dtype=np.float32)
    for name in LAYER_MATS:
        w[f"enc_{name}"] = _block_matrix(name, rng, d, kv, h)
    for i in range(cfg.num_layers):
        for name in LAYER_MATS:
            w[f"l{i}_{name}"] = _block_matrix(name, rng, d, kv, h)
    return w


def _block_matrix(name: str, rng, d: int, kv: int, h: int) -> np.ndarray:
    if name in ("attn_norm", "mlp_norm"):
        return np.ones(d, dtype=np.float32)
    shape, fan_in = {
        "wq": ((d, kv), d),
        "wk": ((d, kv), d),
        "wv": ((d, kv), d),
        "wo": ((kv, d), kv),
        "w_gate": ((d, h), d),
        "w_up": ((d, h), d),
        "w_down": ((h, d), h),
    }[name]
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


class ToyVLM:
    """Immutable weight container; all inference ops are module functions."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray] | None = None):
        self.config = config
        self.w = weights if weights is not None else _init_weights(config)
        self._fingerprint: int | None = None

    @property
    def fingerprint(self) -> int:
        """64-bit id of (config, weights); equal iff models are bit-identical."""
        if self._fingerprint is None:
            self._fingerprint = int.from_bytes(
                bytes.fromhex(weight_checksum(self))[:8], "big")
        return self._fingerprint


def init_model(config: ModelConfig) -> ToyVLM:
    return ToyVLM(config)


def weight_checksum(model: ToyVLM) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(_config_dict(model.config), sort_keys=True).encode())
    for name in sorted(model.w):
        h.update(name.encode())
        h.update(model.w[name].tobytes())
    return h.hexdigest()


def _config_dict(cfg: ModelConfig) -> dict:
    return {
        "num_layers": cfg.num_layers, "num_heads": cfg.num_heads,
        "model_dim": cfg.model_dim, "kv_dim": cfg.kv_dim,
        "vocab_size": cfg.vocab_size, "patch_size": cfg.patch_size,
        "tokens_per_image": cfg.tokens_per_image, "rope_base": cfg.rope_base,
        "seed": cfg.seed,
    }


# ---------------------------------------------------------------------------
# primitive blocks


def rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(RMS_EPS))) * scale


def swiglu(x: np.ndarray, w_gate, w_up, w_down) -> np.ndarray:
    g = x @ w_gate
    gate = g / (np.float32(1.0) + np.exp(-g))  # silu
    return (gate * (x @ w_up)) @ w_down


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    # [n, kv] -> [heads, n, head_dim]
    n = x.shape[0]
    return x.reshape(n, num_heads, -1).transpose(1, 0, 2)


def masked_attention(q_rot: np.ndarray, k_rot: np.ndarray, values: np.ndarray,
                     allowed: np.ndarray, num_heads: int) -> np.ndarray:
    """Softmax attention with an explicit [n_q, n_k] visibility mask.

    q_rot [n_q, kv], k_rot/values [n_k, kv]; returns [n_q, kv].
    """
    head_dim = q_rot.shape[-1] // num_heads
    qh = _split_heads(q_rot, num_heads)
    kh = _split_heads(k_rot, num_heads)
    vh = _split_heads(values, num_heads)
    scores = qh @ kh.transpose(0, 2, 1)
    scores *= np.float32(1.0 / np.sqrt(head_dim))
    scores = np.where(allowed[None, :, :], scores, np.float32(-np.inf))
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    out = scores @ vh
    return out.transpose(1, 0, 2).reshape(q_rot.shape[0], -1)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# ---------------------------------------------------------------------------
# vision encoder


def encode_image(model: ToyVLM, pixels: np.ndarray) -> np.ndarray:
    """Patchify + project + one bidirectional attention block.

    Returns [tokens_per_image, model_dim] float32, deterministic in
    (model, pixels).
    """
    cfg = model.config
    px = np.asarray(pixels, dtype=np.float32)
    if px.ndim != 2:
        raise InputError(f"expected a 2-d pixel grid, got shape {px.shape}")
    hgt, wid = px.shape
    p = cfg.patch_size
    if hgt % p or wid % p:
        raise InputError(f"image dims {px.shape} not divisible by patch size {p}")
    n_patches = (hgt // p) * (wid // p)
    if n_patches != cfg.tokens_per_image:
        raise InputError(
            f"image yields {n_patches} patches, model expects {cfg.tokens_per_image}")
    patches = (px.reshape(hgt // p, p, wid // p, p)
                 .transpose(0, 2, 1, 3)
                 .reshape(n_patches, p * p))
    w = model.w
    x = patches @ w["enc_patch_w"] + w["enc_patch_b"] + w["enc_pos"]
    xn = rms_norm(x, w["enc_attn_norm"])
    q, k, v = xn @ w["enc_wq"], xn @ w["enc_wk"], xn @ w["enc_wv"]
    allowed = np.ones((n_patches, n_patches), dtype=bool)  # bidirectional
    attn = masked_attention(q, k, v, allowed, cfg.num_heads)
    x = x + attn @ w["enc_wo"]
    x = x + swiglu(rms_norm(x, w["enc_mlp_norm"]), w["enc_w_gate"], w["enc_w_up"],
                   w["enc_w_down"])
    return rms_norm(x, w["enc_out_norm"]).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# decoder forward passes


def input_embeddings(model: ToyVLM, seq: TokenSequence,
                     image_embeds: list[np.ndarray]) -> np.ndarray:
    cfg = model.config
    seq.validate(cfg.tokens_per_image)
    img_segs = seq.image_segments
    if len(img_segs) != len(image_embeds):
        raise InputError(
            f"sequence has {len(img_segs)} image segments but "
            f"{len(image_embeds)} embedding blocks were supplied")
    x = np.zeros((len(seq), cfg.model_dim), dtype=np.float32)
    for pos, tok in enumerate(seq.ids):
        if tok >= 0:
            if tok >= cfg.vocab_size:
                raise InputError(f"token id {tok} out of vocab")
            x[pos] = model.w["embed"][tok]
    for seg, emb in zip(img_segs, image_embeds):
        emb = np.asarray(emb, dtype=np.float32)
        if emb.shape != (cfg.tokens_per_image, cfg.model_dim):
            raise InputError(f"embedding block shape {emb.shape} does not match model")
        x[seg.start:seg.start + seg.length] = emb
    return x


def prefill_full(model: ToyVLM, seq: TokenSequence,
                 image_embeds: list[np.ndarray]) -> tuple[np.ndarray, KVTensors]:
    """Dense causal prefill. Returns (logits [n, vocab], pre-RoPE KV)."""
    cfg = model.config
    x = input_embeddings(model, seq, image_embeds)
    n = x.shape[0]
    positions = np.arange(n)
    keys = np.empty((cfg.num_layers, n, cfg.kv_dim), dtype=np.float32)
    values = np.empty_like(keys)
    allowed = causal_mask(n)
    for i in range(cfg.num_layers):
        w = model.w
        xn = rms_norm(x, w[f"l{i}_attn_norm"])
        q = xn @ w[f"l{i}_wq"]
        k = xn @ w[f"l{i}_wk"]
        v = xn @ w[f"l{i}_wv"]
        keys[i] = k
        values[i] = v
        q_rot = apply_rope(q, positions, cfg.head_dim, cfg.rope_base)
        k_rot = apply_rope(k, positions, cfg.head_dim, cfg.rope_base)
        attn = masked_attention(q_rot, k_rot, v, allowed, cfg.num_heads)
        x = x + attn @ w[f"l{i}_wo"]
        x = x + swiglu(rms_norm(x, w[f"l{i}_mlp_norm"]), w[f"l{i}_w_gate"],
                       w[f"l{i}_w_up"], w[f"l{i}_w_down"])
    logits = rms_norm(x, model.w["final_norm"]) @ model.w["head"]
    if not np.isfinite(logits).all():
        raise InputError("non-finite logits from prefill")
    return logits.astype(np.float32, copy=False), KVTensors(keys, values)


class DecoderState:
    """Growable per-layer KV for token-by-token decoding.

    Keys are held ROTATED at their request positions (values unrotated), so a
    step only rotates its own query/key.
    """

    def __init__(self, model: ToyVLM, kv: KVTensors, capacity: int):
        cfg = model.config
        n0 = kv.seq_len
        self.model = model
        self.n = n0
        self.k_rot = np.zeros((cfg.num_layers, n0 + capacity, cfg.kv_dim), np.float32)
        self.v = np.zeros_like(self.k_rot)
        pos = np.arange(n0)
        for i in range(cfg.num_layers):
            self.k_rot[i, :n0] = apply_rope(kv.keys[i], pos, cfg.head_dim, cfg.rope_base)
            self.v[i, :n0] = kv.values[i]

    def step(self, token_id: int) -> np.ndarray:
        """Append one token at the next position; return its logits row."""
        model, cfg = self.model, self.model.config
        if not 0 <= token_id < cfg.vocab_size:
            raise InputError(f"token id {token_id} out of vocab")
        pos = self.n
        x = model.w["embed"][token_id].copy()
        for i in range(cfg.num_layers):
            w = model.w
            xn = rms_norm(x, w[f"l{i}_attn_norm"])
            q = xn @ w[f"l{i}_wq"]
            k = xn @ w[f"l{i}_wk"]
            v = xn @ w[f"l{i}_wv"]
            self.k_rot[i, pos] = apply_rope(k, pos, cfg.head_dim, cfg.rope_base)
            self.v[i, pos] = v
            q_rot = apply_rope(q, pos, cfg.head_dim, cfg.rope_base)
            allowed = np.ones((1, pos + 1), dtype=bool)
            attn = masked_attention(q_rot[None, :], self.k_rot[i, :pos + 1],
                                    self.v[i, :pos + 1], allowed, cfg.num_heads)[0]
            x = x + attn @ w[f"l{i}_wo"]
            x = x + swiglu(rms_norm(x, w[f"l{i}_mlp_norm"]), w[f"l{i}_w_gate"],
                           w[f"l{i}_w_up"], w[f"l{i}_w_down"])
        self.n += 1
        return rms_norm(x, model.w["final_norm"]) @ model.w["head"]


def greedy_steps(state: DecoderState, first_logits: np.ndarray,
                 max_new: int) -> tuple[list[int], np.ndarray]:
    """Greedy loop over an existing decoder state.

    Returns (ids, step_logits) where step_logits[t] is the distribution from
    which ids[t] was taken (argmax(step_logits[t]) == ids[t]).
    """
    vocab = state.model.config.vocab_size
    step_logits = np.empty((max_new, vocab), dtype=np.float32)
    ids: list[int] = []
    cur = first_logits
    for t in range(max_new):
        step_logits[t] = cur
        tok = int(np.argmax(cur))
        ids.append(tok)
        cur = state.step(tok)
    return ids, step_logits


def greedy_decode(model: ToyVLM, kv: KVTensors, first_logits: np.ndarray,
                  max_new: int) -> tuple[list[int], np.ndarray]:
    """Greedy continuation given prefill KV and the last prompt logits."""
    if max_new < 0:
        raise InputError("max_new must be >= 0")
    if max_new == 0:
        return [], np.empty((0, model.config.vocab_size), dtype=np.float32)
    state = DecoderState(model, kv, capacity=max_new)
    return greedy_steps(state, first_logits, max_new)


def generate(model: ToyVLM, seq: TokenSequence, image_embeds: list[np.ndarray],
             max_new: int) -> tuple[list[int], np.ndarray]:
    """Full-compute prefill followed by greedy decoding."""
    logits, kv = prefill_full(model, seq, image_embeds)
    return greedy_decode(model, kv, logits[-1], max_new)


# ---------------------------------------------------------------------------
# weight persistence


def save_weights(model: ToyVLM, path: str | Path) -> None:
    names = sorted(model.w)
    header = json.dumps({
        "config": _config_dict(model.config),
        "tensors": [{"name": n, "shape": list(model.w[n].shape)} for n in names],
        "dtype": "<f4",
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(model.w[n], dtype="<f4").tobytes())


def load_model(path: str | Path) -> ToyVLM:
    data = Path(path).read_bytes()
    if data[:8] != WEIGHTS_MAGIC:
        raise IntegrityError(f"{path}: bad magic bytes")
    if len(data) < 12:
        raise IntegrityError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from None
    cfg = ModelConfig(**header["config"])
    weights: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"]))
        nbytes = count * 4
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise IntegrityError(f"{path}: truncated tensor {spec['name']}")
        weights[spec["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise IntegrityError(f"{path}: trailing bytes after tensors")
    return ToyVLM(cfg, weights)
