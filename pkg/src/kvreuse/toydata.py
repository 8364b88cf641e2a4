"""Seeded toy images and prompt libraries for experiments and tests."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig

_NEUTRAL_SEED = 0xD00D


def make_image(side: int, seed: int) -> np.ndarray:
    """A deterministic float32 [side, side] grid in [0, 1)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    return rng.random((side, side), dtype=np.float32)


def make_images(count: int, side: int, seed: int) -> list[np.ndarray]:
    return [make_image(side, seed * 1000 + i) for i in range(count)]


def prompt_ids(vocab_size: int, length: int, seed: int) -> list[int]:
    rng = np.random.default_rng(np.random.PCG64(seed))
    return [int(t) for t in rng.integers(0, vocab_size, size=length)]


def prompt_pair(vocab_size: int, length: int, seed: int) -> tuple[list[int], list[int]]:
    """Two distinct same-length prompts (caching-time vs live context)."""
    a = prompt_ids(vocab_size, length, seed)
    b = prompt_ids(vocab_size, length, seed + 7919)
    while b == a:  # vanishingly unlikely, but the pair must differ
        b = prompt_ids(vocab_size, length, seed + 7919 + len(b))
    return a, b


def neutral_prompt_ids(vocab_size: int, length: int) -> list[int]:
    """The fixed stand-in for a generic 'describe the image' prompt."""
    return prompt_ids(vocab_size, length, _NEUTRAL_SEED)


def example_inputs(cfg: ModelConfig, seed: int, prompt_len: int = 12):
    """(image, cache_prompt, live_prompt) for one experiment seed."""
    image = make_image(cfg.image_side, seed)
    cache_prompt, live_prompt = prompt_pair(cfg.vocab_size, prompt_len, seed)
    return image, cache_prompt, live_prompt
