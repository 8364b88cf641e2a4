"""Layer sensitivity profiling for the recompute planner.

Per (layer, ratio) cell: cache the image's KV under a neutral prompt, decode
greedily with the real prompt to get reference logits, then teacher-force the
same text with the neutral-prompt KV injected at every layer while only the
probed layer recomputes the first floor(r * T) image tokens. The cell's score
is the MSE between the two logit sets, averaged over the proxy dataset.

Scores are written to / read from a plain text table the planner consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import forward_injected
from .exceptions import InputError, ParseError
from .model import ToyVLM, encode_image, generate, make_sequence, prefill_full
from .plans import GRID_MAX, GRID_STEP, recompute_count
from .store import KVCacheEntry, hash_image


@dataclass
class ProxySample:
    image: np.ndarray
    original_prompt: list[int]
    neutral_prompt: list[int]

    def validate(self, require_distinct: bool = False) -> None:
        """Real proxy data must use a neutral prompt that differs from the
        original; equal prompts are allowed programmatically as the
        zero-mismatch control."""
        if not self.original_prompt or not self.neutral_prompt:
            raise InputError("prompts must be non-empty")
        if require_distinct and list(self.original_prompt) == list(self.neutral_prompt):
            raise InputError("neutral prompt must differ from the original")


@dataclass
class SensitivityTable:
    scores: np.ndarray        # [L, len(grid)]
    grid: tuple[float, ...]
    baseline: float           # score with no recomputation anywhere
    sample_count: int
    model_fingerprint: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.grid):
            raise InputError("scores shape does not match grid")
        if (self.scores < 0).any() or self.baseline < 0:
            raise InputError("sensitivity scores must be non-negative")
        if list(self.grid) != sorted(set(self.grid)):
            raise InputError("grid must be strictly increasing")
        for r in self.grid:
            k = round(r / GRID_STEP)
            if not (1 <= k <= round(GRID_MAX / GRID_STEP)
                    and abs(r - k * GRID_STEP) <= 1e-9):
                raise InputError(f"grid ratio {r} off the planner grid")

    @property
    def num_layers(self) -> int:
        return int(self.scores.shape[0])

    def score(self, layer: int, ratio: float) -> float:
        """S for one layer at a measured ratio (0 maps to the baseline)."""
        if ratio == 0.0:
            return float(self.baseline)
        for j, r in enumerate(self.grid):
            if abs(r - ratio) <= 1e-9:
                return float(self.scores[layer, j])
        raise InputError(f"ratio {ratio} was not measured (grid {self.grid})")

    def check_fingerprint(self, model: ToyVLM) -> str | None:
        if self.model_fingerprint != model.fingerprint:
            return (f"table was profiled with model {self.model_fingerprint:#x}, "
                    f"live model is {model.fingerprint:#x}")
        return None


# ---------------------------------------------------------------------------
# the three phases


def build_mismatched_kv(model: ToyVLM, sample: ProxySample) -> KVCacheEntry:
    """Full prefill with the neutral prompt; slice out the image's pre-RoPE KV."""
    sample.validate()
    cfg = model.config
    embeds = encode_image(model, sample.image)
    seq = make_sequence(list(sample.neutral_prompt), 1, cfg.tokens_per_image)
    _, kv = prefill_full(model, seq, [embeds])
    seg = seq.image_segments[0]
    sl = slice(seg.start, seg.start + seg.length)
    return KVCacheEntry(hash_image(sample.image), kv.keys[:, sl].copy(),
                        kv.values[:, sl].copy(), origin_position=seg.start,
                        model_fingerprint=model.fingerprint)


def baseline_decode(model: ToyVLM, sample: ProxySample,
                    max_new: int) -> tuple[np.ndarray, list[int]]:
    """Greedy reference continuation with correct (same-context) KV.

    Returns (logits [max_new, vocab], generated ids).
    """
    if max_new < 1:
        raise InputError("max_new must be >= 1")
    cfg = model.config
    embeds = encode_image(model, sample.image)
    seq = make_sequence(list(sample.original_prompt), 1, cfg.tokens_per_image)
    ids, step_logits = generate(model, seq, [embeds], max_new)
    return step_logits, ids


def reuse_logits(model: ToyVLM, sample: ProxySample, mismatched: KVCacheEntry,
                 layer: int, ratio: float, baseline_ids: list[int]) -> np.ndarray:
    """Teacher-forced logits with mismatched KV at all layers, except the
    first floor(r * T) image tokens of one probed layer, which stay fresh.

    Output rows align with baseline_decode's: row t is the distribution over
    continuation token t.
    """
    cfg = model.config
    if not 0 <= layer < cfg.num_layers:
        raise InputError(f"layer {layer} out of range")
    if not 0.0 <= ratio <= 1.0:
        raise InputError("ratio must lie in [0, 1]")
    embeds = encode_image(model, sample.image)
    seq = make_sequence(list(sample.original_prompt), 1, cfg.tokens_per_image,
                        suffix=list(baseline_ids))
    seg = seq.image_segments[0]
    n = len(seq)
    inject_k = np.zeros((cfg.num_layers, n, cfg.kv_dim), dtype=np.float32)
    inject_v = np.zeros_like(inject_k)
    sl = slice(seg.start, seg.start + seg.length)
    inject_k[:, sl] = mismatched.keys
    inject_v[:, sl] = mismatched.values
    use_cached = np.zeros((cfg.num_layers, n), dtype=bool)
    use_cached[:, sl] = True
    keep = recompute_count(ratio, seg.length)
    use_cached[layer, seg.start:seg.start + keep] = False
    logits, _ = forward_injected(model, seq, [embeds], inject_k, inject_v, use_cached)
    # row seg_end-1 predicts continuation token 0, and so on
    first = seg.start + seg.length - 1
    return logits[first:first + len(baseline_ids)]


def logit_mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise InputError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.square(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def profile(model: ToyVLM, dataset: list[ProxySample], grid: tuple[float, ...],
            max_new: int = 8) -> SensitivityTable:
    """Mean MSE over the dataset for every (layer, grid ratio) cell."""
    if not dataset:
        raise InputError("dataset must contain at least one sample")
    grid = tuple(sorted(float(g) for g in grid))
    cfg = model.config
    totals = np.zeros((cfg.num_layers, len(grid)), dtype=np.float64)
    baseline_total = 0.0
    for sample in dataset:
        sample.validate()
        mismatched = build_mismatched_kv(model, sample)
        z_orig, ids = baseline_decode(model, sample, max_new)
        # all-layer reuse with no recompute: identical for every probed layer
        z_none = reuse_logits(model, sample, mismatched, 0, 0.0, ids)
        baseline_total += logit_mse(z_orig, z_none)
        for i in range(cfg.num_layers):
            for j, r in enumerate(grid):
                z = reuse_logits(model, sample, mismatched, i, r, ids)
                totals[i, j] += logit_mse(z_orig, z)
    return SensitivityTable(totals / len(dataset), grid,
                            baseline_total / len(dataset), len(dataset),
                            model.fingerprint)


# ---------------------------------------------------------------------------
# table file format


def emit_table(table: SensitivityTable, path: str | Path) -> None:
    lines = [
        "# layer sensitivity table",
        f"num_layers = {table.num_layers}",
        "grid = " + ", ".join(repr(r) for r in table.grid),
        f"baseline = {table.baseline!r}",
        f"sample_count = {table.sample_count}",
        f"model_fingerprint = {table.model_fingerprint:#x}",
    ]
    for i in range(table.num_layers):
        row = ", ".join(repr(float(v)) for v in table.scores[i])
        lines.append(f"layer {i + 1}: {row}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path: str | Path) -> SensitivityTable:
    header: dict[str, str] = {}
    rows: dict[int, list[float]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("layer "):
            head, _, rest = line.partition(":")
            try:
                idx = int(head.split()[1])
                values = [float(tok) for tok in rest.split(",") if tok.strip()]
            except (IndexError, ValueError):
                raise ParseError(f"bad layer row {raw!r}", line=lineno) from None
            rows[idx] = values
        elif "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
        else:
            raise ParseError(f"unrecognized line {raw!r}", line=lineno)
    for key in ("num_layers", "grid", "baseline", "sample_count", "model_fingerprint"):
        if key not in header:
            raise ParseError(f"table missing header key {key!r}")
    try:
        num_layers = int(header["num_layers"])
        grid = tuple(float(tok) for tok in header["grid"].split(",") if tok.strip())
        baseline = float(header["baseline"])
        sample_count = int(header["sample_count"])
        fingerprint = int(header["model_fingerprint"], 0)
    except ValueError as exc:
        raise ParseError(f"table header: {exc}") from None
    if sorted(rows) != list(range(1, num_layers + 1)):
        raise ParseError(f"expected layer rows 1..{num_layers}, got {sorted(rows)}")
    scores = np.array([rows[i + 1] for i in range(num_layers)], dtype=np.float64)
    if scores.shape != (num_layers, len(grid)):
        raise ParseError("layer rows do not match the grid length")
    return SensitivityTable(scores, grid, baseline, sample_count, fingerprint)


# ---------------------------------------------------------------------------
# dataset descriptor: one sample per line, tab-separated
#   <image .npy path> TAB <original ids space-separated> TAB <neutral ids>


def save_dataset(samples: list[ProxySample], directory: str | Path,
                 name: str = "dataset") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for idx, s in enumerate(samples):
        img_path = directory / f"{name}_{idx:03d}.npy"
        np.save(img_path, np.asarray(s.image, dtype=np.float32))
        lines.append("\t".join([
            img_path.name,
            " ".join(str(t) for t in s.original_prompt),
            " ".join(str(t) for t in s.neutral_prompt),
        ]))
    descriptor = directory / f"{name}.tsv"
    descriptor.write_text("\n".join(lines) + "\n")
    return descriptor


def load_dataset(descriptor: str | Path) -> list[ProxySample]:
    descriptor = Path(descriptor)
    base = descriptor.parent
    samples = []
    for lineno, raw in enumerate(descriptor.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError("expected 3 tab-separated fields", line=lineno)
        img_path = Path(parts[0])
        if not img_path.is_absolute():
            img_path = base / img_path
        try:
            image = np.load(img_path)
            original = [int(t) for t in parts[1].split()]
            neutral = [int(t) for t in parts[2].split()]
        except (OSError, ValueError) as exc:
            raise ParseError(f"{exc}", line=lineno) from None
        sample = ProxySample(image, original, neutral)
        sample.validate(require_distinct=True)
        samples.append(sample)
    if not samples:
        raise ParseError(f"dataset descriptor {descriptor} lists no samples")
    return samples
