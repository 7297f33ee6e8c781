"""Command-line entry point: ``hint <subcommand> --config FILE --seed N --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import numgrad as ng
from .envs import PRESETS
from .metrics import (StudentPolicy, TeacherPolicy, collect_states, divergence_report, evaluate,
                      write_curve)
from .orchestrator import (ConfigError, HintConfig, MissingCheckpoint, hint_config, load_config,
                           obtain_teacher, train_hint)
from .student import Student, spec_for
from .teacher import Teacher, load_teacher, pretrain_config_for, pretrain_manifest, pretrain_teacher, save_teacher
from .trajectory import read_trajectories

VARIANTS = {
    "full": (True, True),
    "no-filter": (False, True),
    "no-pseudo": (True, False),
    "neither": (False, False),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="use a preset instead of --config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/hint", help="run directory")
    p.add_argument("--paper-scale", action="store_true", help="use the full published budgets")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hint", description="Hierarchical teacher -> decentralized student distillation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain-teacher", help="pretrain the hierarchical teacher")
    _common(p)

    p = sub.add_parser("train", help="run the aggregate/distill/refine loop")
    _common(p)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int, default=None, help="stop after this many epochs")

    p = sub.add_parser("eval", help="evaluate a student (or teacher) checkpoint")
    _common(p)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seeds", type=int, default=3, help="number of evaluation seeds")
    p.add_argument("--policy", choices=("student", "teacher"), default="student")
    p.add_argument("--greedy", action="store_true")

    p = sub.add_parser("ablate", help="train the four filter/refinement variants")
    _common(p)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("diagnose", help="teacher/student state-distribution divergence")
    _common(p)
    p.add_argument("--states", type=int, default=None, help="states per policy")
    p.add_argument("--bins", type=int, default=50)

    p = sub.add_parser("inspect-dataset", help="summarize a trajectory dataset")
    _common(p)
    p.add_argument("--dataset", help="dataset file (default: latest checkpoint under --out)")
    return parser


def _config(args) -> HintConfig:
    if args.config:
        cfg = load_config(args.config, args.paper_scale)
    elif args.preset:
        cfg = hint_config(args.preset, args.paper_scale)
    else:
        raise ConfigError("give --config FILE or --preset NAME")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.env = cfg.env.with_seed(args.seed)
    return cfg


def _latest(out: Path) -> Path:
    latest = out / "LATEST"
    if not latest.exists():
        raise MissingCheckpoint(f"no training checkpoint under {out}")
    return out / "checkpoints" / latest.read_text().strip()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_pretrain(args, cfg):
    out = Path(args.out) / "teacher_pretrained"
    pc = pretrain_config_for(cfg.preset_name or "fc-easy", cfg.teacher_pretrain_scale, seed=cfg.seed)
    params = pretrain_teacher(cfg.env, pc)
    save_teacher(params, out, pretrain_manifest(cfg.env, pc))
    rep = evaluate(TeacherPolicy(Teacher(cfg.env, params)), cfg.env, cfg.eval_episodes, cfg.eval_seeds)
    _emit({"command": "pretrain-teacher", "checkpoint": str(out), **rep.to_dict()})


def cmd_train(args, cfg):
    if args.epochs is not None:
        cfg.max_epochs = args.epochs
    m = train_hint(cfg, args.out, resume=args.resume)
    last = m.epochs[-1] if m.epochs else {}
    _emit({"command": "train", "epochs": len(m.epochs), "final": last, "out": args.out})


def cmd_eval(args, cfg):
    out = Path(args.out)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    if args.policy == "teacher":
        ck = _latest(out) / "teacher" if (out / "LATEST").exists() else None
        params = load_teacher(ck) if ck else obtain_teacher(cfg, out, pretrain_if_missing=False)
        policy = TeacherPolicy(Teacher(cfg.env, params), args.greedy)
    else:
        params = ng.load_params(_latest(out) / "student.npz")
        policy = StudentPolicy(Student(spec_for(cfg.env, cfg.ablation.comm_mode), params), args.greedy)
    rep = evaluate(policy, cfg.env, args.episodes, seeds)
    _emit({"command": "eval", "policy": args.policy, **rep.to_dict()})


def cmd_ablate(args, cfg):
    out = Path(args.out)
    teacher = obtain_teacher(cfg, out)
    summary = {}
    for name, (use_filter, use_pseudo) in VARIANTS.items():
        v = HintConfig(**{**cfg.__dict__})
        v.ablation = type(cfg.ablation)(use_filter, use_pseudo, cfg.ablation.comm_mode)
        if args.epochs is not None:
            v.max_epochs = args.epochs
        m = train_hint(v, out / name, teacher_params=teacher)
        rows = m.epochs
        write_curve(out / f"{name}.csv", rows)
        summary[name] = rows[-1]["success_rate"] if rows else None
    _emit({"command": "ablate", "final_success": summary, "out": str(out)})


def cmd_diagnose(args, cfg):
    out = Path(args.out)
    ck = _latest(out)
    n = args.states or {"easy": 5000, "medium": 10000, "hard": 15000}.get(
        (cfg.preset_name or "x-easy").split("-")[-1], 5000)
    teacher = Teacher(cfg.env, load_teacher(ck / "teacher"))
    student = Student(spec_for(cfg.env, cfg.ablation.comm_mode), ng.load_params(ck / "student.npz"))
    ts = collect_states(TeacherPolicy(teacher), cfg.env, n, cfg.seed)
    ss = collect_states(StudentPolicy(student), cfg.env, n, cfg.seed)
    rep = divergence_report(ts, ss, args.bins)
    (out / "divergence.json").write_text(json.dumps(rep, indent=1))
    _emit({"command": "diagnose", **rep})


def cmd_inspect(args, cfg):
    path = Path(args.dataset) if args.dataset else _latest(Path(args.out)) / "dataset.jsonl"
    if not path.exists():
        raise MissingCheckpoint(f"dataset not found: {path}")
    trs = read_trajectories(path)
    parts = Counter(t.partition for t in trs)
    steps = sum(len(t) for t in trs)
    pairs = sum(t.n_pairs for t in trs)
    _emit({"command": "inspect-dataset", "path": str(path), "trajectories": len(trs),
           "partitions": dict(parts), "steps": steps, "accepted_pairs": pairs,
           "acceptance": pairs / steps if steps else None,
           "empty_trajectories": sum(t.n_pairs == 0 for t in trs),
           "mean_length": float(np.mean([len(t) for t in trs])) if trs else 0.0})


COMMANDS = {
    "pretrain-teacher": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "inspect-dataset": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _emit({"error": "usage", "message": str(exc)})
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _emit({"error": "config", "message": str(exc)})
        return 2
    except MissingCheckpoint as exc:
        _emit({"error": "missing_checkpoint", "message": str(exc)})
        return 3
    except (ValueError, OSError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
