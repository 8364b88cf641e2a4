"""Command-line entry point.

Subcommands: init, fill, profile, plan, run, bench, error. All take
`--config <global config file>`; the store directory can be overridden with
the KVREUSE_STORE_DIR environment variable. Failures print a single
`error: <Kind>: <message>` line on stderr and exit with a kind-specific code:

    0 success                 6 StaleCacheError
    2 usage                   7 IntegrityError
    3 missing file            8 InputError
    4 ConfigError             9 SetupError
    5 PlanError              10 ParseError
    1 anything else

Timing numbers go to stdout only; files written under the output directory
are deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import error_lab, sensitivity
from .config import GlobalConfig, ModelConfig, parse_kv_file
from .engine import ReuseRequest, decode_with_merged_kv, prefill_with_reuse
from .exceptions import (ConfigError, InputError, IntegrityError, KVReuseError,
                         ParseError, PlanError, SetupError, StaleCacheError)
from .model import ToyVLM, init_model, load_model, make_sequence, save_weights, weight_checksum
from .planner import BudgetSpec, plan_greedy
from .plans import load_plan, save_plan
from .store import CacheStore, hash_image
from .toydata import make_image, prompt_ids

EXIT_CODES: list[tuple[type, int]] = [
    (ConfigError, 4),
    (PlanError, 5),
    (StaleCacheError, 6),
    (IntegrityError, 7),
    (SetupError, 9),
    (ParseError, 10),
    (InputError, 8),
    (FileNotFoundError, 3),
]


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
        return 0
    except (KVReuseError, OSError) as exc:
        for klass, code in EXIT_CODES:
            if isinstance(exc, klass):
                break
        else:
            code = 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvreuse")
    sub = parser.add_subparsers(required=True)

    def cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="global config file")
        p.add_argument("--out", default=None, help="override the output path")
        p.set_defaults(func=fn)
        return p

    cmd("init", cmd_init, "build the model and persist its weights")

    p = cmd("fill", cmd_fill, "prefill images and populate the cache store")
    p.add_argument("--images", default=None,
                   help="comma-separated .npy image paths (default: seeded toy images)")
    p.add_argument("--num-images", type=int, default=2)
    p.add_argument("--prefix", default=None,
                   help="caching-time text prefix as space-separated token ids")

    p = cmd("profile", cmd_profile, "measure layer sensitivity scores")
    p.add_argument("--dataset", default=None, help="dataset descriptor (.tsv)")
    p.add_argument("--grid", default="0.1,0.2,0.3")
    p.add_argument("--max-new", type=int, default=6)

    p = cmd("plan", cmd_plan, "allocate per-layer recompute ratios")
    p.add_argument("--table", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--p-target", type=float, default=None,
                       help="total ratio budget, summed over layers")
    group.add_argument("--mean-ratio", type=float, default=None,
                       help="target average ratio (multiplied by the layer count)")
    p.add_argument("--grid", default=None, help="restrict planning to these ratios")

    p = cmd("run", cmd_run, "reuse-prefill a request and decode")
    p.add_argument("--request", required=True, help="request description file")
    p.add_argument("--plan", default=None, help="plan file (default: from config)")
    p.add_argument("--max-new", type=int, default=8)

    p = cmd("bench", cmd_bench, "latency/work matrix across configurations")
    p.add_argument("--matrix", required=True, help="scenario matrix file")

    p = cmd("error", cmd_error, "reuse-error measurements, emitted as CSV")
    p.add_argument("--experiment", choices=("profile", "decompose", "headtail"),
                   default="profile")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--fractions", default="0.0,0.1,0.3")
    p.add_argument("--budget", type=float, default=0.3)
    p.add_argument("--position", type=int, default=None)
    p.add_argument("--prompt-len", type=int, default=12)
    return parser


# ---------------------------------------------------------------------------
# shared plumbing


def _load_global(args) -> GlobalConfig:
    gcfg = GlobalConfig.from_file(args.config)
    env_store = os.environ.get("KVREUSE_STORE_DIR")
    if env_store:
        gcfg.store_dir = Path(env_store)
    return gcfg


def _weights_path(gcfg: GlobalConfig) -> Path:
    return gcfg.out_dir / "weights.bin"


def _get_model(gcfg: GlobalConfig) -> ToyVLM:
    path = _weights_path(gcfg)
    if path.exists():
        return load_model(path)
    return init_model(ModelConfig.from_file(gcfg.model_config))


def _get_store(gcfg: GlobalConfig) -> CacheStore:
    manifest = gcfg.store_dir / "manifest.json"
    if manifest.exists():
        return CacheStore.load(gcfg.store_dir)
    return CacheStore()


def _out_path(args, gcfg: GlobalConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    gcfg.out_dir.mkdir(parents=True, exist_ok=True)
    return gcfg.out_dir / default_name


def _parse_ids(text: str) -> list[int]:
    return [int(tok) for tok in text.split()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_init(args) -> None:
    gcfg = _load_global(args)
    model = init_model(ModelConfig.from_file(gcfg.model_config))
    path = _out_path(args, gcfg, "weights.bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, path)
    print(f"wrote {path}")
    print(f"weight_checksum = {weight_checksum(model)}")
    print(f"fingerprint = {model.fingerprint:#x}")


def cmd_fill(args) -> None:
    gcfg = _load_global(args)
    model = _get_model(gcfg)
    cfg = model.config
    if args.images:
        images = [np.load(p.strip()) for p in args.images.split(",") if p.strip()]
    else:
        images = [make_image(cfg.image_side, gcfg.seed * 1000 + i)
                  for i in range(args.num_images)]
    if not images:
        raise InputError("no images to fill")
    prefix = _parse_ids(args.prefix) if args.prefix else prompt_ids(
        cfg.vocab_size, 12, gcfg.seed)
    store = _get_store(gcfg)
    bench_mod.fill_store(model, store, images, prefix)
    gcfg.store_dir.mkdir(parents=True, exist_ok=True)
    store.persist(gcfg.store_dir)
    for px in images:
        print(f"cached {hash_image(px)}")
    print(f"store persisted to {gcfg.store_dir} ({len(store)} entries)")


def cmd_profile(args) -> None:
    gcfg = _load_global(args)
    model = _get_model(gcfg)
    dataset_path = Path(args.dataset) if args.dataset else gcfg.dataset_path
    if dataset_path is None:
        raise InputError("no dataset: pass --dataset or set dataset_path in config")
    samples = sensitivity.load_dataset(dataset_path)
    grid = tuple(float(tok) for tok in args.grid.split(",") if tok.strip())
    table = sensitivity.profile(model, samples, grid, max_new=args.max_new)
    path = _out_path(args, gcfg, "sensitivity.txt")
    sensitivity.emit_table(table, path)
    print(f"wrote {path} ({table.num_layers} layers x {len(table.grid)} ratios, "
          f"{table.sample_count} samples)")


def cmd_plan(args) -> None:
    gcfg = _load_global(args)
    table = sensitivity.load_table(args.table)
    model = _get_model(gcfg)
    warning = table.check_fingerprint(model)
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    p_target = args.p_target
    if p_target is None:
        p_target = args.mean_ratio * table.num_layers
    grid = None
    if args.grid:
        grid = tuple(float(tok) for tok in args.grid.split(",") if tok.strip())
    plan = plan_greedy(table, BudgetSpec(p_target, grid))
    path = args.out or gcfg.plan_path or (gcfg.out_dir / "plan.txt")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_plan(plan, path)
    print(f"wrote {path}")
    print("ratios = " + ", ".join(f"{r:g}" for r in plan.ratios))


def cmd_run(args) -> None:
    gcfg = _load_global(args)
    model = _get_model(gcfg)
    cfg = model.config
    req = parse_kv_file(args.request)
    text = _parse_ids(req.get("text", ""))
    suffix = _parse_ids(req.get("suffix", ""))
    base = Path(args.request).parent
    images = []
    for tok in req.get("images", "").split(","):
        tok = tok.strip()
        if tok:
            p = Path(tok)
            images.append(np.load(p if p.is_absolute() else base / p))
    plan_path = args.plan or gcfg.plan_path
    if plan_path is None:
        raise InputError("no plan: pass --plan or set plan_path in config")
    plan = load_plan(plan_path)
    store = _get_store(gcfg)
    seq = make_sequence(text, len(images), cfg.tokens_per_image, suffix=suffix)
    request = ReuseRequest(seq, [hash_image(px) for px in images], plan,
                           images=images)
    t0 = time.perf_counter()
    result = prefill_with_reuse(model, request, store)
    new_ids: list[int] = []
    if args.max_new > 0:
        if int(result.positions[-1]) != len(seq) - 1:
            raise InputError(
                "cannot decode: the final position was reused, not computed; "
                "append text after the images or raise the last-layer ratio")
        decoded = decode_with_merged_kv(model, result.kv, max_new=args.max_new,
                                        initial_logits=result.logits[-1])
        new_ids = decoded.ids
    elapsed = time.perf_counter() - t0

    path = _out_path(args, gcfg, "run.txt")
    m = result.metrics
    path.write_text("\n".join([
        "generated = " + " ".join(str(t) for t in new_ids),
        "logit_positions = " + " ".join(str(p) for p in result.positions),
        f"flops = {m.flops.total}",
        f"fallback_images = {m.fallback_images}",
        f"encoder_misses = {m.encoder_misses}",
        f"mean_ratio = {m.mean_ratio!r}",
    ]) + "\n")
    print(f"wrote {path}")
    print("generated:", " ".join(str(t) for t in new_ids))
    print(f"wall_seconds = {elapsed:.4f} (compute {m.compute_seconds:.4f}, "
          f"resolve {m.resolve_seconds:.4f})")


def cmd_bench(args) -> None:
    gcfg = _load_global(args)
    model = _get_model(gcfg)
    scenarios = bench_mod.load_matrix(args.matrix, model.config.num_layers)
    store = _get_store(gcfg)  # in-memory copy; never persisted back
    results = bench_mod.run_matrix(model, store, scenarios, seed=gcfg.seed)
    gcfg.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = Path(args.out) if args.out else gcfg.out_dir / "bench.csv"
    bench_mod.write_csv(results, csv_path)
    table = bench_mod.render_table(results)
    (gcfg.out_dir / "bench.txt").write_text(table + "\n")
    print(table)
    print(f"wrote {csv_path}")


def cmd_error(args) -> None:
    gcfg = _load_global(args)
    model = _get_model(gcfg)
    cfg = model.config
    fractions = tuple(float(tok) for tok in args.fractions.split(",") if tok.strip())
    gcfg.out_dir.mkdir(parents=True, exist_ok=True)

    if args.experiment == "profile":
        from .toydata import example_inputs
        per_fraction = None
        for s in range(args.seeds):
            image, cache_prefix, live_prefix = example_inputs(
                cfg, gcfg.seed + s, args.prompt_len)
            profiles = error_lab.budget_sweep(model, image, cache_prefix,
                                              live_prefix, fractions)
            stack = np.stack([p.errors for p in profiles])
            per_fraction = stack if per_fraction is None else per_fraction + stack
        per_fraction /= args.seeds
        profiles = [error_lab.ErrorProfile(per_fraction[j], f"recompute_{f:g}",
                                           cfg.num_layers - 1)
                    for j, f in enumerate(fractions)]
        path = _out_path(args, gcfg, "error_profile.csv")
        error_lab.emit_profile_csv(profiles, path)
    elif args.experiment == "headtail":
        from .toydata import example_inputs
        head_sum = tail_sum = None
        for s in range(args.seeds):
            image, cache_prefix, live_prefix = example_inputs(
                cfg, gcfg.seed + s, args.prompt_len)
            head, tail = error_lab.head_vs_tail(model, image,
                                                (cache_prefix, live_prefix),
                                                args.budget)
            head_sum = head.errors if head_sum is None else head_sum + head.errors
            tail_sum = tail.errors if tail_sum is None else tail_sum + tail.errors
        profiles = [
            error_lab.ErrorProfile(head_sum / args.seeds, f"head_{args.budget:g}",
                                   cfg.num_layers - 1),
            error_lab.ErrorProfile(tail_sum / args.seeds, f"tail_{args.budget:g}",
                                   cfg.num_layers - 1),
        ]
        path = _out_path(args, gcfg, "error_headtail.csv")
        error_lab.emit_profile_csv(profiles, path)
    else:
        from .toydata import example_inputs
        image, cache_prefix, live_prefix = example_inputs(cfg, gcfg.seed,
                                                          args.prompt_len)
        position = args.position
        if position is None:
            position = cfg.tokens_per_image - 1
        row = error_lab.decompose_error(model, image, cache_prefix, live_prefix,
                                        position)
        path = _out_path(args, gcfg, "error_decompose.csv")
        import csv as _csv
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["quantity", "source_index", "value"])
            writer.writerow(["e_self", row.position, repr(row.e_self)])
            writer.writerow(["e_total", row.position, repr(row.e_total)])
            writer.writerow(["additivity_residual", row.position, repr(row.additivity_residual)])
            for i in range(row.position):
                writer.writerow(["e_prop", i, repr(float(row.e_prop[i]))])
    print(f"wrote {path}")


if __name__ == "__main__":
    sys.exit(main())
