"""Position-independent encoder/KV cache reuse on a toy vision-language model."""

from .config import GlobalConfig, ModelConfig
from .engine import (DecodeResult, ReuseRequest, ReuseResult, count_flops,
                     decode_with_merged_kv, forward_injected, prefill_with_reuse)
from .model import (KVTensors, TokenSequence, ToyVLM, apply_rope, encode_image,
                    generate, init_model, load_model, make_sequence, prefill_full,
                    save_weights)
from .planner import BudgetSpec, plan_bruteforce, plan_greedy, plan_static
from .plans import (ComputationMask, RecomputePlan, build_masks, load_plan,
                    mean_ratio, save_plan, validate_plan)
from .sensitivity import ProxySample, SensitivityTable, load_table, profile
from .store import (CacheStore, EncoderCacheEntry, ImageHash, KVCacheEntry,
                    hash_image, hash_request)

__all__ = [name for name in dir() if not name.startswith("_")]
