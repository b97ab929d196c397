"""Command-line entry point.

Every command writes into ``--out`` (default: current directory). Exit codes:
0 success, 2 bad input (validation or file format), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .agent import AgentPolicy, InferenceConfig, load_bundle, save_bundle
from .aligner import Aligner, AlignerConfig, train_aligner
from .auction import SimConfig, parse_config_text
from .datagen import DEFAULT_MIX, collect_dataset, default_policies
from .diffusion import Completer, CompleterConfig, train_completer
from .errors import CBDError, NumericError, ValidationError
from .evaluation import ABLATION_MODES, BUDGET_LEVELS, ablation_run, evaluate_policy, resolve_modes, summarize, write_tsv
from .idm import IDMConfig, TrainedIDM, train_idm
from .metrics import PLOT_KINDS, emit_plot_data
from .trajectory import FORMAT_NAME, PropertyFunctional, load_dataset, save_dataset

log = logging.getLogger("cbdbid")

TARGET_QUANTILE = 0.95
COMPONENTS = {"completer": CompleterConfig, "aligner": AlignerConfig, "idm": IDMConfig}


def _read_config(path, cls, **override):
    text = Path(path).read_text() if path else ""
    try:
        cfg = parse_config_text(text, cls)
    except TypeError as exc:
        raise ValidationError(f"bad config: {exc}") from None
    return cls(**{**asdict(cfg), **{k: v for k, v in override.items() if v is not None}})


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _sim_config(args) -> SimConfig:
    return _read_config(args.config, SimConfig, sparse=True if getattr(args, "sparse", False) else None)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> list[Path]:
    sim = _sim_config(args)
    ds = collect_dataset(default_policies(), sim, args.periods, args.seed, args.budget_scale, args.functional)
    path = args.out / args.name
    save_dataset(ds, path)
    manifest = {
        "format": FORMAT_NAME,
        "dataset": path.name,
        "sha256": _sha256(path),
        "trajectories": len(ds),
        "seed": args.seed,
        "periods": args.periods,
        "budget_scale": args.budget_scale,
        "functional": args.functional,
        "policy_mix": [list(m) for m in DEFAULT_MIX],
        "sim_config": asdict(sim),
    }
    return [path, _write_json(args.out / "manifest.json", manifest)]


def cmd_train(args) -> list[Path]:
    ds = load_dataset(args.data)
    if ds.stats is None:
        raise ValidationError(f"{args.data} has no normalisation statistics")
    x0 = ds.normalized_states()
    kw = {"seed": args.seed, "epochs": args.epochs}
    progress = (lambda e, loss: log.info("epoch %d loss %.6f", e, loss)) if args.verbose else None
    if args.component == "completer":
        cfg = _read_config(args.config, CompleterConfig, mask_mode=args.mask_mode, **kw)
        model = train_completer(x0, ds.conditions(), cfg, progress)
    elif args.component == "aligner":
        tag = args.tag or ds.functional
        cfg = _read_config(args.config, AlignerConfig, tag=tag, **kw)
        y = np.array([ds.condition(t, cfg.tag) for t in ds.trajectories])
        model = train_aligner(x0, y, cfg, progress)
    else:
        cfg = _read_config(args.config, IDMConfig, **kw)
        model = train_idm(x0, ds.actions(), cfg, progress)
    path = args.out / (args.name or f"{args.component}.ckpt")
    model.save(path)
    return [path]


def _inference_overrides(args) -> dict:
    keys = ("omega", "step", "rounds", "target", "align_mode", "candidates")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_bundle(args) -> list[Path]:
    ds = load_dataset(args.data)
    if ds.stats is None:
        raise ValidationError(f"{args.data} has no normalisation statistics")
    completer = Completer.load(args.completer)
    idm = TrainedIDM.load(args.idm).model
    aligner = Aligner.load(args.aligner).model if args.aligner else None
    over = _inference_overrides(args)
    if aligner is None:
        over.setdefault("align_mode", "none")
    # default target: a high but in-distribution condition
    over.setdefault("target", float(np.quantile(ds.conditions(), TARGET_QUANTILE)))
    policy = AgentPolicy(completer, idm, ds.stats, aligner, InferenceConfig(**over))
    return [save_bundle(policy, args.out)]


def cmd_evaluate(args) -> list[Path]:
    sim = _sim_config(args)
    policy = None if args.fixed else load_bundle(args.bundle, **_inference_overrides(args))
    rows = evaluate_policy(policy, sim, args.episodes, args.seed, args.budget_scale)
    summary = {"budget_scale": args.budget_scale, "seed": args.seed, **summarize(rows)}
    return [write_tsv(rows, args.out / "episodes.tsv"), _write_json(args.out / "summary.json", summary)]


def cmd_ablate(args) -> list[Path]:
    sim = _sim_config(args)
    artifacts = {k: v for k, v in (("cbd", args.cbd), ("vanilla", args.vanilla)) if v is not None}
    policies = resolve_modes(artifacts, args.modes, args.candidates or 10)
    table = ablation_run(policies, sim, args.episodes, args.seed, args.budgets)
    return [table.write(args.out / "ablation.json"), table.write(args.out / "ablation.tsv")]


def cmd_plot_emit(args) -> list[Path]:
    if args.data.suffix == ".npy":
        states = np.load(args.data, allow_pickle=False)
        if states.ndim != 3:
            raise ValidationError("a .npy input must hold raw states of shape (M, N, D)")
        trajs = list(states)
    else:
        trajs = load_dataset(args.data).trajectories
    return [emit_plot_data(trajs, kind, args.out / f"{kind}.tsv", args.bins) for kind in args.kinds]


# ---------------------------------------------------------------------------
# parser


def _add_inference_flags(p):
    p.add_argument("--omega", type=float, help="guidance scale")
    p.add_argument("--step", type=float, help="refinement step size")
    p.add_argument("--rounds", type=int, help="refinement rounds")
    p.add_argument("--target", "--target-return", dest="target", type=float, help="condition fed to the completer and aligner "
                   "(bundle default: 0.95 quantile of the dataset conditions)")
    p.add_argument("--align-mode", dest="align_mode", choices=("none", "gradient", "gs_align"))
    p.add_argument("--candidates", type=int, help="candidates per step for gs_align")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="key = value file for the command's main config")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cbdbid", description="Completer-aligner diffusion auto-bidding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="simulate behaviour policies into an offline dataset")
    p.add_argument("--periods", type=int, default=200)
    p.add_argument("--budget-scale", type=float, default=1.0)
    p.add_argument("--sparse", action="store_true", help="sparse-conversion regime")
    p.add_argument("--functional", default="return", choices=PropertyFunctional.TAGS)
    p.add_argument("--name", default="dataset.jsonl", help="dataset file name (.jsonl or .npz)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one component on a dataset")
    p.add_argument("component", choices=sorted(COMPONENTS))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-mode", dest="mask_mode", choices=("completion", "vanilla"))
    p.add_argument("--tag", choices=PropertyFunctional.TAGS, help="aligner property (default: dataset functional)")
    p.add_argument("--name", help="checkpoint file name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bundle", parents=[common], help="assemble checkpoints into a policy bundle")
    p.add_argument("--data", type=Path, required=True, help="training dataset (normalisation statistics)")
    p.add_argument("--completer", type=Path, required=True)
    p.add_argument("--idm", type=Path, required=True)
    p.add_argument("--aligner", type=Path)
    _add_inference_flags(p)
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("evaluate", parents=[common], help="run a policy bundle on seeded episodes")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--bundle", type=Path)
    g.add_argument("--fixed", action="store_true", help="fixed-lambda baseline instead of a bundle")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--budget-scale", type=float, default=1.0)
    p.add_argument("--sparse", action="store_true")
    _add_inference_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="compare ablation modes over a budget sweep")
    p.add_argument("--cbd", type=Path, help="completion-trained bundle with an aligner")
    p.add_argument("--vanilla", type=Path, help="vanilla-trained bundle")
    p.add_argument("--modes", nargs="+", default=list(ABLATION_MODES), choices=ABLATION_MODES)
    p.add_argument("--budgets", nargs="+", type=float, default=list(BUDGET_LEVELS))
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--candidates", type=int)
    p.add_argument("--sparse", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot-emit", parents=[common], help="write columnar plot data")
    p.add_argument("--data", type=Path, required=True, help="dataset file or .npy array of raw states")
    p.add_argument("--kinds", nargs="+", default=list(PLOT_KINDS), choices=PLOT_KINDS)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_plot_emit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        paths = args.func(args)
    except NumericError as exc:
        print(f"cbdbid: numeric failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, CBDError) as exc:
        print(f"cbdbid: {exc}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
