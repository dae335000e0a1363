"""Command-line entry points: synth, train, eval, promptsim.

Every command logs one JSON object per line on stderr and exits nonzero on
any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .core import ModelConfig, load_config
from .datasets import AugmentConfig, load_dataset, synth_generate
from .encoders import tokenize
from .prompts_sim import MODES

log = logging.getLogger("avprompt")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
            if not isinstance(payload, dict):
                raise ValueError
        except ValueError:
            payload = {"message": msg}
        payload.setdefault("level", record.levelname.lower())
        return json.dumps(payload)


def setup_logging(verbose=False):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _add_config_flags(parser):
    """One flag per ModelConfig field, defaulting to None (= keep file/default value)."""
    group = parser.add_argument_group("model config")
    for f in dataclasses.fields(ModelConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            group.add_argument(flag, dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            group.add_argument(flag, dest=f"cfg_{f.name}", nargs="+", type=type(default[0]), default=None)
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", type=type(default), default=None)


def config_from_args(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else ModelConfig()
    overrides = {}
    for f in dataclasses.fields(ModelConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            overrides[f.name] = tuple(v) if isinstance(v, list) else v
    return cfg.replace(**overrides) if overrides else cfg


def _clips(root, split, cfg):
    return list(load_dataset(root, split, cfg, tokenizer=lambda s: tokenize(s, cfg.text_vocab)))


def cmd_synth(args):
    out = synth_generate(args.out, args.n_clips, args.frames, args.resolution, args.seed, args.split, args.expression)
    log.info(json.dumps({"event": "synth", "path": str(out), "clips": args.n_clips}))


def cmd_train(args):
    from .train import run_train

    cfg = config_from_args(args)
    clips = _clips(args.data, args.split, cfg)
    val = _clips(args.data, args.val_split, cfg) if args.val_split else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info(json.dumps({"event": "config", "hash": cfg.hash(), **cfg.to_dict()}))
    res = run_train(
        cfg,
        clips,
        args.steps,
        seed=args.seed,
        out_dir=out,
        val_clips=val,
        val_every=args.val_every,
        augment_cfg=None if args.no_augment else AugmentConfig(),
        resume=args.resume,
        log_path=out / "train_log.jsonl",
    )
    log.info(json.dumps({"event": "done", "steps": res.state.step, "checkpoint": str(res.checkpoint)}))


def cmd_eval(args):
    from .train import load_checkpoint, run_eval

    model = load_checkpoint(args.checkpoint)
    flags = {}
    if args.pyramid_levels is not None:
        flags["pyramid_levels"] = args.pyramid_levels
    for name in ("zero_sparse", "zero_dense", "audio_off", "text_off", "shuffle_audio"):
        if getattr(args, name):
            flags[name] = True
    report = run_eval(model, _clips(args.data, args.split, model.config), flags, args.out)
    log.info(json.dumps({"event": "eval", "flags": flags, **report.row()}))
    print(report.to_table(), end="")


def cmd_promptsim(args):
    from .train import load_checkpoint, run_promptsim

    model = load_checkpoint(args.checkpoint)
    result = run_promptsim(model, _clips(args.data, args.split, model.config), args.modes, args.seed)
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def build_parser():
    p = argparse.ArgumentParser(prog="avprompt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="also log per-step records")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic sounding-shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-clips", type=int, default=200)
    s.add_argument("--frames", type=int, default=2, help="frames (seconds) per clip")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--expression", default=None, help="write this sentence as every clip's expression")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the fuser, audio encoder and projectors")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--val-split", default=None)
    t.add_argument("--val-every", type=int, default=0)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint/log directory")
    t.add_argument("--config", default=None, help="JSON or YAML config file")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--no-augment", action="store_true")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally with ablations")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", default=None, help="write the report table here")
    e.add_argument("--pyramid-levels", type=int, choices=(1, 2, 3), default=None)
    e.add_argument("--zero-sparse", action="store_true")
    e.add_argument("--zero-dense", action="store_true")
    e.add_argument("--audio-off", action="store_true")
    e.add_argument("--text-off", action="store_true")
    e.add_argument("--shuffle-audio", action="store_true")
    e.set_defaults(func=cmd_eval)

    ps = sub.add_parser("promptsim", help="compare audio and ground-truth visual prompting modes")
    ps.add_argument("--checkpoint", required=True)
    ps.add_argument("--data", required=True)
    ps.add_argument("--split", default="test")
    ps.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", default=None)
    ps.set_defaults(func=cmd_promptsim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        args.func(args)
    except Exception as exc:
        log.error(json.dumps({"event": "error", "type": type(exc).__name__, "error": str(exc)}))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
