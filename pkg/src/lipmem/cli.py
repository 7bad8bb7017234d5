"""Command line entry point: ``lipmem <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success with all output invariants holding, 1 an output
invariant failed, 2 bad input (flags, config, missing files).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import analysis
from .memory import is_valid_address
from .synthworld import ConfigurationError, WorldConfig, build_inventory, load_dataset, make_dataset
from .training import TrainConfig, evaluate, load_checkpoint, run

log = logging.getLogger("lipmem")

DATA_KEYS = {
    "n_phonemes": int, "d_aud": int, "n_identities": int, "n_utterances": int,
    "utterance_len": int, "noise_scale": float, "heldout_fraction": float,
    "timbre_scale": float, "identity_scale": float, "pose_scale": float, "pose_step": float,
    "d_id": int, "d_pose": int,
}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


# -- config handling -------------------------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TRAIN_KEYS and key not in DATA_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def merged_config(args: argparse.Namespace, overrides: dict) -> dict:
    """Config file values overridden by explicit flags (those not None)."""
    cfg = read_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = str(v)
    return cfg


def echo_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
    (out / "config.echo").write_text(text, encoding="utf-8")


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_mapping(cfg)
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_ckpt(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")


def _check(ok: bool, what: str) -> int:
    if not ok:
        log.error("invariant failed: %s", what)
    return 0 if ok else 1


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = merged_config(args, {k: getattr(args, k) for k in DATA_KEYS if hasattr(args, k)})
    cfg.setdefault("seed", "0")
    unknown = set(cfg) - set(DATA_KEYS) - {"seed"}
    for k in unknown:
        cfg.pop(k)
    try:
        vals = {k: DATA_KEYS[k](v) for k, v in cfg.items() if k in DATA_KEYS}
        seed = int(cfg["seed"])
        world = WorldConfig(**{k: vals[k] for k in vals if k in WorldConfig.__dataclass_fields__})
        inv = build_inventory(world.n_phonemes, seed, world.d_aud)
        out = Path(args.out)
        echo_config(out, cfg)
        ds = make_dataset(inv, world.n_identities, world.n_utterances, world.utterance_len,
                          world.noise_scale, seed, world=world, path=out / "data.jsonl",
                          heldout_fraction=vals.get("heldout_fraction", 0.1))
    except (ConfigurationError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    log.info("wrote %d samples to %s", len(ds), out / "data.jsonl")
    return _check(len(ds) > 0, "dataset is empty")


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    out = Path(args.out)
    overrides = {"main_steps": args.steps, "sync_steps": args.sync_steps,
                 "checkpoint_every": args.checkpoint_every}
    if args.resume:
        # the checkpoint carries its own config; only step budgets may change
        state = _load_ckpt(args.resume)
        extra = {k: str(v) for k, v in overrides.items() if v is not None}
        if extra:
            base = {k: str(v) for k, v in asdict(state.config).items()}
            state.config = train_config({**base, **extra})
        config = state.config
    else:
        state = None
        cfg = merged_config(args, overrides)
        config = train_config({k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    echo_config(out, {k: str(v) for k, v in asdict(config).items()})
    state = run(config, ds, out, state=state)
    report = json.loads((out / "eval.json").read_text(encoding="utf-8"))
    finite = all(np.isfinite(v) for k, v in report.items() if isinstance(v, float))
    return _check(finite, "final evaluation is not finite")


def cmd_eval(args) -> int:
    state, ds = _load_ckpt(args.checkpoint), _load_data(args.data)
    out = Path(args.out)
    echo_config(out, {"checkpoint": args.checkpoint, "data": args.data, "split": args.split})
    try:
        part = ds.split(args.split)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rep = evaluate(state, part).to_dict()
    _write_json(out / f"eval_{args.split}.json", rep)
    return _check(all(np.isfinite(v) for v in rep.values() if isinstance(v, float)),
                  "evaluation is not finite")


def cmd_slot_decode(args) -> int:
    state, ds = _load_ckpt(args.checkpoint), _load_data(args.data)
    out = Path(args.out)
    echo_config(out, {"checkpoint": args.checkpoint, "data": args.data, "split": args.split})
    profiles = analysis.slot_profiles(state, ds, args.split)
    analysis.write_slot_figure(out, profiles)
    covered = sorted(analysis.covered_phonemes(profiles))
    _write_json(out / "slot_summary.json", {"covered_phonemes": covered,
                                            "n_phonemes": ds.inventory.n_phonemes})
    log.info("slot majorities cover %d of %d phonemes", len(covered), ds.inventory.n_phonemes)
    usage = sum(p.usage for p in profiles)
    return _check(abs(usage - 1.0) < 1e-9 and all(0.0 <= p.purity <= 1.0 for p in profiles),
                  "usage must sum to 1 and purity lie in [0, 1]")


def cmd_trace(args) -> int:
    state, ds = _load_ckpt(args.checkpoint), _load_data(args.data)
    out = Path(args.out)
    uid = args.utterance if args.utterance is not None else ds.split("heldout").utterance_ids()[0]
    echo_config(out, {"checkpoint": args.checkpoint, "data": args.data, "utterance": uid})
    try:
        trace = analysis.trace_utterance(state, ds, uid)
    except KeyError as exc:
        raise UsageError(f"unknown utterance {uid}") from exc
    analysis.write_trace_figure(out, trace)
    consecutive, random_pairs = analysis.trace_smoothness([trace], seed=state.config.seed)
    _write_json(out / "trace_summary.json", {"utterance": uid, "windows": len(trace),
                                             "tv_consecutive": consecutive,
                                             "tv_random_pairs": random_pairs})
    return _check(all(is_valid_address(r.address, tol=1e-9) for r in trace),
                  "trace addresses must be probability vectors")


def cmd_interpolate(args) -> int:
    state, ds = _load_ckpt(args.checkpoint), _load_data(args.data)
    out = Path(args.out)
    echo_config(out, {"checkpoint": args.checkpoint, "data": args.data, "slot_i": args.slot_i,
                      "slot_j": args.slot_j, "steps": args.steps})
    ctx = analysis.rest_context(state, ds)
    try:
        interp = analysis.interpolate_slots(state, ctx, args.slot_i, args.slot_j, args.steps)
    except (IndexError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    analysis.write_interpolation_figure(out, interp)
    _write_json(out / "interpolate_summary.json", {
        "max_step": interp.max_step(), "endpoint_distance": interp.endpoint_distance(),
        "continuous": interp.continuous()})
    S = state.config.n_slots
    ends = (np.array_equal(interp.windows[0], analysis.decode_address(state, ctx, np.eye(S)[args.slot_i]))
            and np.array_equal(interp.windows[-1],
                               analysis.decode_address(state, ctx, np.eye(S)[args.slot_j])))
    return _check(ends, "interpolation endpoints must equal single-slot decodes")


def cmd_ablate_slots(args) -> int:
    ds = _load_data(args.data)
    out = Path(args.out)
    cfg = merged_config(args, {"main_steps": args.steps, "sync_steps": args.sync_steps})
    for k in [k for k in cfg if k not in TRAIN_KEYS]:
        cfg.pop(k)
    config = train_config(cfg)
    try:
        slots = [int(s) for s in args.slots.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --slots: {args.slots}") from exc
    if len(slots) < 3 or min(slots) < 1:
        raise UsageError("--slots needs at least 3 positive values")
    echo_config(out, {**{k: str(v) for k, v in asdict(config).items()},
                      "slots": ",".join(map(str, slots))})
    rows = analysis.ablate_slots(config, ds, slots, workers=args.workers)
    analysis.write_ablation_table(out, rows)
    log.info("interior optimum in lmd_key: %s", analysis.interior_optimum(rows))
    finite = all(np.isfinite(r[k]) for r in rows for k in analysis.ABLATION_FIELDS)
    return _check(len(rows) == len(slots) and finite, "ablation rows missing or non-finite")


# -- parser ----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipmem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    for key, typ in DATA_KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain sync and train the generator")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--steps", type=int, help="main-phase steps")
    p.add_argument("--sync-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, doc in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("slot-decode", cmd_slot_decode, "decode each slot with silent audio")):
        p = sub.add_parser(name, help=doc)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        p.add_argument("--split", default="heldout")
        p.set_defaults(func=func)

    p = sub.add_parser("trace", help="key-address trace over one utterance")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--utterance", type=int)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("interpolate", help="decode along a line between two slots")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--slot-i", type=int, required=True)
    p.add_argument("--slot-j", type=int, required=True)
    p.add_argument("--steps", type=int, default=11)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("ablate-slots", help="train and evaluate over several slot counts")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--slots", default="4,8,16,32")
    p.add_argument("--steps", type=int)
    p.add_argument("--sync-steps", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate_slots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lipmem {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
