"""Model and pipeline configuration, plus the key=value config file format.

Config files are plain text: one `key = value` pair per line, `#` comments,
blank lines ignored. Values are parsed by the dataclass field they land in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import ConfigError, ParseError


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse a `key = value` text file into a raw string dict."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv_file(path: str | Path, pairs: dict[str, object], header: str = "") -> None:
    lines = [f"# {header}"] if header else []
    for key, value in pairs.items():
        if isinstance(value, (list, tuple)):
            value = ", ".join(_fmt(v) for v in value)
        else:
            value = _fmt(value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seed of the toy vision-language transformer."""

    num_layers: int
    num_heads: int
    model_dim: int
    kv_dim: int
    vocab_size: int
    patch_size: int
    tokens_per_image: int
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "kv_dim",
                     "vocab_size", "patch_size", "tokens_per_image"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.kv_dim % self.num_heads != 0:
            raise ConfigError(
                f"kv_dim {self.kv_dim} not divisible by num_heads {self.num_heads}")
        if (self.kv_dim // self.num_heads) % 2 != 0:
            raise ConfigError("per-head kv dim must be even for rotary pairs")
        side = math.isqrt(self.tokens_per_image)
        if side * side != self.tokens_per_image:
            raise ConfigError(
                f"tokens_per_image {self.tokens_per_image} is not a perfect square")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.kv_dim // self.num_heads

    @property
    def image_side(self) -> int:
        """Pixel side length of the square toy images this model accepts."""
        return self.patch_size * math.isqrt(self.tokens_per_image)

    @property
    def mlp_hidden(self) -> int:
        return 2 * self.model_dim

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        raw = parse_kv_file(path)
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            kwargs[f.name] = float(raw[f.name]) if f.type == "float" else int(raw[f.name])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ParseError(f"model config {path}: {exc}") from None

    def to_file(self, path: str | Path) -> None:
        write_kv_file(path, {f.name: getattr(self, f.name) for f in fields(self)},
                      header="toy VLM model config")


@dataclass
class GlobalConfig:
    """Paths and seed wiring the CLI subcommands together."""

    model_config: Path
    store_dir: Path
    out_dir: Path
    plan_path: Path | None = None
    dataset_path: Path | None = None
    seed: int = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "GlobalConfig":
        raw = parse_kv_file(path)
        base = Path(path).parent
        required = ("model_config", "store_dir", "out_dir")
        for key in required:
            if key not in raw:
                raise ParseError(f"global config missing key {key!r}")

        def _p(key: str) -> Path:
            p = Path(raw[key])
            return p if p.is_absolute() else base / p

        return cls(
            model_config=_p("model_config"),
            store_dir=_p("store_dir"),
            out_dir=_p("out_dir"),
            plan_path=_p("plan_path") if "plan_path" in raw else None,
            dataset_path=_p("dataset_path") if "dataset_path" in raw else None,
            seed=int(raw.get("seed", "0")),
        )
