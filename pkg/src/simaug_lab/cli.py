"""Command line entry point: ``simaug-lab {generate|train|eval|ablate|compare}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from . import tensor as nd
from .estimator import NonFiniteLoss, TrajectoryForecaster
from .metrics import reports_to_csv
from .world import DEFAULT_CONFIG, generate_dataset, load_dataset


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None


def _experiment(args) -> dict:
    try:
        cfg = harness.load_experiment(args.config) if args.config else harness.merge_experiment({})
    except harness.ConfigError as exc:
        raise UsageError(str(exc)) from None
    model, aug, opt = cfg["model"], cfg["aug"], cfg["optimizer"]
    for key, section, name in (
        ("hidden", model, "hidden_size"),
        ("decoder_input", model, "decoder_input"),
        ("aug", aug, "mode"),
        ("alpha", aug, "alpha"),
        ("eps", aug, "eps"),
        ("delta", aug, "delta"),
        ("pgd_iters", aug, "pgd_iters"),
        ("lr", opt, "learning_rate"),
        ("weight_decay", opt, "weight_decay"),
        ("batch_size", opt, "batch_size"),
        ("steps", opt, "n_steps"),
        ("k", cfg["eval"], "K"),
    ):
        value = getattr(args, key, None)
        if value is not None:
            section[name] = value
    if getattr(args, "hidden", None) is not None:
        model["mlp_hidden"] = args.hidden
    for flag in ("no_noise", "no_attack", "random_view", "reuse_noise"):
        if getattr(args, flag, False):
            aug[flag] = True
    if getattr(args, "drop_view", None):
        aug["drop_views"] = list(args.drop_view)
    if getattr(args, "seeds", None):
        cfg["seeds"] = list(args.seeds)
    if getattr(args, "data_seed", None) is not None:
        cfg["dataset_seed"] = args.data_seed
    return cfg


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.dump_config:
        print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
        return 0
    if not args.config:
        raise UsageError("generate needs --config (use --dump-config for a template)")
    world_cfg = _read_json(args.config)
    try:
        data = generate_dataset(world_cfg, args.seed)
    except (ValueError, KeyError) as exc:
        raise RuntimeError(f"{args.config}: {exc}") from exc
    digests = harness.write_dataset_dir(data, args.out)
    for split, ds in data.items():
        print(f"{split}: {len(ds)} records  sha256 {digests[split]}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    data = _datasets(args.data, cfg)
    out = Path(args.out)
    try:
        est = harness.train_run(cfg, args.seed, data, out, log_every=args.log_every,
                                checkpoint_every=args.checkpoint_every)
    except NonFiniteLoss as exc:
        dump = out / "nonfinite_batch"
        dump.mkdir(parents=True, exist_ok=True)
        for name in ("features", "obs", "labels", "future_pixels"):
            nd.dump_tensor(np.asarray(getattr(exc.batch, name)), dump / f"{name}.bin")
        print(f"error: {exc}; offending batch written to {dump}", file=sys.stderr)
        return 1
    print(f"trained {len(est.loss_curve_)} steps, final loss {est.loss_curve_[-1]['total'] if est.loss_curve_ else 'n/a'}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    est = TrajectoryForecaster.load(args.checkpoint)
    split_dir = Path(args.data)
    if (split_dir / args.split / "meta.json").exists():
        split_dir = split_dir / args.split
    if not (split_dir / "meta.json").exists():
        raise UsageError(f"no dataset at {split_dir}")
    ds = load_dataset(split_dir)
    cfg = harness.merge_experiment({"eval": {"K": args.k, "seed": args.seed}})
    report = harness.eval_run(est, ds, cfg, method=args.method or est.aug, seed=est.random_state, out_dir=args.out)
    sys.stdout.write(reports_to_csv([report]))
    return 0


def _datasets(data_dir, cfg):
    if data_dir is None:
        return harness.build_datasets(cfg)
    root = Path(data_dir)
    if not (root / "train" / "meta.json").exists():
        raise UsageError(f"no train/ split under {root}")
    return harness.build_datasets(cfg, root)


def cmd_compare(args) -> int:
    cfg = _experiment(args)
    data = _datasets(args.data, cfg)
    harness.compare(cfg, data, args.out)
    sys.stdout.write((Path(args.out) / "table.csv").read_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    data = _datasets(args.data, cfg)
    harness.ablate(cfg, data, args.out)
    sys.stdout.write((Path(args.out) / "table.csv").read_text())
    return 0


# ---------------------------------------------------------------------------


def _add_training_flags(p):
    p.add_argument("--config", help="experiment config JSON; flags below override it")
    p.add_argument("--data", help="directory written by 'generate' (generated from the config if omitted)")
    p.add_argument("--aug", choices=("simaug", "none", "standard", "fgsm", "pgd"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--pgd-iters", dest="pgd_iters", type=int)
    p.add_argument("--no-noise", action="store_true", help="zero selection/attack noise")
    p.add_argument("--no-attack", action="store_true", help="skip the adversarial step")
    p.add_argument("--random-view", action="store_true", help="pick the mixing view uniformly")
    p.add_argument("--reuse-noise", action="store_true", help="reuse the selection noise in the attack")
    p.add_argument("--drop-view", action="append", metavar="ID", help="remove a camera from training records")
    p.add_argument("--hidden", type=int)
    p.add_argument("--decoder-input", dest="decoder_input", choices=("context", "teacher"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simaug-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a multi-view dataset")
    p.add_argument("--config", help="dataset config JSON")
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-config", action="store_true", help="print the default dataset config and exit")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    _add_training_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--log-every", dest="log_every", type=int, default=100)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root or split directory")
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="sampling seed for K > 1")
    p.add_argument("--method", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("compare", cmd_compare, "Base/Standard/FGSM/PGD/SimAug across seeds"),
                              ("ablate", cmd_ablate, "SimAug and its four ablations across seeds")):
        p = sub.add_parser(name, help=help_)
        _add_training_flags(p)
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--data-seed", dest="data_seed", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--out", default=f"runs/{name}")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
