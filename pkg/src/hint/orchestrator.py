"""Experiment driver: configuration, the aggregate -> distill -> refine epoch
loop, checkpoints and the run manifest."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import os
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import numgrad as ng
from .dagger import AggregatedDataset, QueryConfig, collect_episode, suboptimal_demo_rate, teacher_demonstration
from .distill import DistillConfig, kd_update
from .envs import PRESETS, EnvConfig, env_config_from_dict, make_env, preset
from .metrics import StudentPolicy, TeacherPolicy, evaluate, write_curve
from .pseudorl import PseudoConfig, pseudo_update
from .student import Student, init_student, spec_for
from .teacher import (Teacher, TeacherParams, config_hash, load_teacher, pretrain_config_for,
                      pretrain_manifest, pretrain_teacher, save_teacher)

log = logging.getLogger(__name__)

WORKERS_ENV = "HINT_WORKERS"

# per preset: queries per epoch, refinement episodes per epoch, dataset
# budget (trajectories), student timesteps
HINT_TABLE = {
    "marine-easy": (20, 10, 2000, 1e7),
    "marine-medium": (100, 150, 3000, 2e7),
    "marine-hard": (200, 600, 6000, 10e7),
    "fc-easy": (20, 10, 1000, 1e7),
    "fc-medium": (50, 20, 2000, 2e7),
    "fc-hard": (100, 40, 4000, 7e7),
}
DESK_SCALE = 0.1


class ConfigError(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class QuerySettings:
    n_query: int = 20
    budget: int = 1000
    initial: int = 100  # teacher demonstrations kept forever
    votes_needed: int = 1
    votes_total: int = 1


@dataclass
class AblationFlags:
    use_filter: bool = True
    use_pseudo_rl: bool = True
    comm_mode: str = "heterogeneous"


@dataclass
class HintConfig:
    env: EnvConfig
    preset_name: str | None = None
    seed: int = 0
    teacher_checkpoint: str | None = None
    teacher_pretrain_scale: float = DESK_SCALE
    distill: DistillConfig = field(default_factory=DistillConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    query: QuerySettings = field(default_factory=QuerySettings)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    workers: int = 1
    student_timesteps: int = 1_000_000
    max_epochs: int | None = None
    eval_episodes: int = 10
    eval_seeds: tuple = (0,)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["env"] = self.env.to_dict()
        d["eval_seeds"] = list(self.eval_seeds)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        # neither the worker count nor the epoch cap changes what an epoch computes
        d.pop("workers")
        d.pop("max_epochs")
        return config_hash(d)


def _section(cls, raw, name):
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {name} field(s): {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def hint_config(preset_name: str, paper_scale: bool = False, **overrides) -> HintConfig:
    """Defaults for a preset; desk scale unless ``paper_scale``."""
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    nq, npseudo, budget, steps = HINT_TABLE[preset_name]
    scale = 1.0 if paper_scale else DESK_SCALE
    cfg = HintConfig(
        env=preset(preset_name),
        preset_name=preset_name,
        teacher_pretrain_scale=scale,
        pseudo=PseudoConfig(n_pseudo=npseudo),
        query=QuerySettings(n_query=nq, budget=budget, initial=max(1, budget // 10)),
        student_timesteps=int(steps * scale),
    )
    return config_from_dict(cfg.to_dict() | overrides) if overrides else cfg


def config_from_dict(raw: dict, paper_scale: bool = False) -> HintConfig:
    raw = copy.deepcopy(raw)
    env_raw = raw.pop("env", None)
    if env_raw is None:
        raise ConfigError("config needs an 'env' section (a preset name or environment fields)")
    if isinstance(env_raw, str):
        env_raw = {"preset": env_raw}
    name = env_raw.get("preset")
    if name is not None and name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = hint_config(name, paper_scale) if name else None
    try:
        env = env_config_from_dict(env_raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid env section: {exc}") from exc
    d = base.to_dict() if base else {}
    sections = {"distill": DistillConfig, "pseudo": PseudoConfig, "query": QuerySettings,
                "ablation": AblationFlags}
    kw = {}
    for key, cls in sections.items():
        merged = dict(d.get(key, {}))
        merged.update(raw.pop(key, {}) or {})
        kw[key] = _section(cls, merged, key)
    top = {f.name for f in dataclasses.fields(HintConfig)} - set(sections) - {"env"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    for key in top:
        if key in raw:
            kw[key] = raw[key]
        elif key in d:
            kw[key] = d[key]
    kw.setdefault("preset_name", name)
    if "eval_seeds" in kw:
        kw["eval_seeds"] = tuple(kw["eval_seeds"])
    if kw["ablation"].comm_mode not in ("none", "homogeneous", "heterogeneous"):
        raise ConfigError(f"unknown comm_mode {kw['ablation'].comm_mode!r}")
    cfg = HintConfig(env=env, **kw)
    if cfg.student_timesteps <= 0 or cfg.query.n_query <= 0 or cfg.query.budget <= 0:
        raise ConfigError("budgets must be positive")
    if not 0 < cfg.query.initial <= cfg.query.budget:
        raise ConfigError("query.initial must lie in 1..budget")
    env_workers = os.environ.get(WORKERS_ENV)
    if env_workers:
        cfg.workers = int(env_workers)
    return cfg


def load_config(path, paper_scale: bool = False) -> HintConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, paper_scale)


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    config_hash: str
    config: dict
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- teacher

def obtain_teacher(cfg: HintConfig, out: Path, pretrain_if_missing: bool = True) -> TeacherParams:
    if cfg.teacher_checkpoint:
        path = Path(cfg.teacher_checkpoint)
        if not (path / "manifest.json").exists():
            raise MissingCheckpoint(f"teacher checkpoint {path} not found; run `hint pretrain-teacher` first")
        return load_teacher(path)
    path = out / "teacher_pretrained"
    if (path / "manifest.json").exists():
        return load_teacher(path)
    if not pretrain_if_missing:
        raise MissingCheckpoint(f"no teacher checkpoint under {out}; run `hint pretrain-teacher` first")
    pc = pretrain_config_for(cfg.preset_name or "fc-easy", cfg.teacher_pretrain_scale, seed=cfg.seed)
    params = pretrain_teacher(cfg.env, pc)
    save_teacher(params, path, pretrain_manifest(cfg.env, pc))
    return params


# ---------------------------------------------------------------- training loop

@dataclass
class LoopState:
    epoch: int
    timesteps: int
    rng: np.random.Generator
    dataset: AggregatedDataset
    student: ng.ParamSet
    teacher: TeacherParams
    opt_student: ng.OptState | None
    learner: object


def _checkpoint(out: Path, state: LoopState, manifest: RunManifest) -> str:
    ck = out / "checkpoints" / f"epoch_{state.epoch:04d}"
    ck.mkdir(parents=True, exist_ok=True)
    ng.save_params(state.student, ck / "student.npz")
    save_teacher(state.teacher, ck / "teacher")
    state.dataset.save(ck / "dataset.jsonl")
    learner = state.learner
    blob = {"epoch": state.epoch, "timesteps": state.timesteps, "rng": state.rng.bit_generator.state,
            "opt_student": state.opt_student,
            "learner": None if learner is None else
            {"buffer": learner.buffer, "opt_high": learner.opt_high, "opt_value": learner.opt_value}}
    with open(ck / "loop.pkl", "wb") as fh:
        pickle.dump(blob, fh)
    (out / "LATEST").write_text(ck.name)
    manifest.checkpoints.append(str(ck.relative_to(out)))
    return str(ck)


def _restore(out: Path, cfg: HintConfig) -> tuple:
    name = (out / "LATEST").read_text().strip()
    ck = out / "checkpoints" / name
    with open(ck / "loop.pkl", "rb") as fh:
        blob = pickle.load(fh)
    rng = np.random.default_rng()
    rng.bit_generator.state = blob["rng"]
    teacher = load_teacher(ck / "teacher")
    state = LoopState(blob["epoch"], blob["timesteps"], rng, AggregatedDataset.load(ck / "dataset.jsonl"),
                      ng.load_params(ck / "student.npz"), teacher, blob["opt_student"], None)
    if blob["learner"] is not None:
        from .pseudorl import PseudoLearner

        lr = PseudoLearner(Teacher(cfg.env, teacher), cfg.pseudo)
        lr.buffer = blob["learner"]["buffer"]
        lr.opt_high, lr.opt_value = blob["learner"]["opt_high"], blob["learner"]["opt_value"]
        state.learner = lr
    return state, RunManifest.load(out / "manifest.json")


def train_hint(cfg: HintConfig, out, resume: bool = False, teacher_params: TeacherParams | None = None,
               progress=None) -> RunManifest:
    """Run epochs until the student timestep budget (or ``max_epochs``) is used up."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.env)
    spec = spec_for(cfg.env, cfg.ablation.comm_mode)
    qcfg = QueryConfig(cfg.ablation.use_filter, cfg.query.votes_needed, cfg.query.votes_total)
    timing_path = out / "timing.jsonl"

    if resume and (out / "LATEST").exists():
        state, manifest = _restore(out, cfg)
        if manifest.config_hash != cfg.hash():
            raise ConfigError("config differs from the run being resumed")
    else:
        teacher = teacher_params.copy() if teacher_params is not None else obtain_teacher(cfg, out)
        rng = np.random.default_rng(cfg.seed)
        tp = Teacher(cfg.env, teacher)
        demos = [teacher_demonstration(env, tp, int(rng.integers(2**31)), spec, episode=i, rng=rng)
                 for i in range(cfg.query.initial)]
        state = LoopState(0, 0, rng, AggregatedDataset(demos, cfg.query.budget),
                          init_student(spec, cfg.seed), teacher, None, None)
        manifest = RunManifest(cfg.hash(), cfg.to_dict())
        if timing_path.exists():
            timing_path.unlink()
        _checkpoint(out, state, manifest)
        manifest.save(out / "manifest.json")
        write_curve(out / "curve.csv", [])

    while state.timesteps < cfg.student_timesteps and (cfg.max_epochs is None or state.epoch < cfg.max_epochs):
        backup = (state.student.copy(), state.teacher.copy(), copy.deepcopy(state.opt_student),
                  copy.deepcopy(state.learner), state.rng.bit_generator.state, state.timesteps)
        row, timing = {"epoch": state.epoch + 1, "phases": [], "status": "ok"}, {"epoch": state.epoch + 1}
        try:
            _run_epoch(cfg, state, env, spec, qcfg, row, timing)
        except (ng.NonFiniteError, FloatingPointError) as exc:
            log.error("epoch %d aborted: %s", state.epoch + 1, exc)
            (state.student, state.teacher, state.opt_student, state.learner, rng_state, state.timesteps) = backup
            state.rng.bit_generator.state = rng_state
            row["status"] = f"aborted: {exc}"
        state.epoch += 1
        t0 = time.perf_counter()
        student = Student(spec, state.student)
        ev = evaluate(StudentPolicy(student), cfg.env, cfg.eval_episodes, cfg.eval_seeds)
        tev = evaluate(TeacherPolicy(Teacher(cfg.env, state.teacher)), cfg.env, cfg.eval_episodes, cfg.eval_seeds)
        timing["evaluate"] = time.perf_counter() - t0
        row.update(timestep=state.timesteps, success_rate=ev.success_rate, steps_taken=ev.steps_taken,
                   teacher_success_rate=tev.success_rate)
        manifest.epochs.append(row)
        _checkpoint(out, state, manifest)
        manifest.save(out / "manifest.json")
        write_curve(out / "curve.csv", [row], append=True)
        with open(timing_path, "a") as fh:
            fh.write(json.dumps(timing) + "\n")
        if progress is not None:
            progress(row)
    return manifest


def _run_epoch(cfg, state: LoopState, env, spec, qcfg, row, timing) -> None:
    teacher = Teacher(cfg.env, state.teacher)
    student = Student(spec, state.student)

    t0 = time.perf_counter()
    results, steps, accepted = [], 0, 0
    for _ in range(cfg.query.n_query):
        seed = int(state.rng.integers(2**31))
        tr, res = collect_episode(env, student, teacher, seed, qcfg, student_rng=state.rng,
                                  query_rng=np.random.default_rng([seed, 3]))
        state.dataset.aggregate(tr)
        results += res
        steps += len(tr)
        accepted += tr.n_pairs
    state.timesteps += steps
    row["phases"].append("aggregate")
    row.update(query_steps=steps, accepted_pairs=accepted, suboptimal_demo_rate=suboptimal_demo_rate(results),
               dataset_trajectories=len(state.dataset))
    timing["aggregate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    batch = state.dataset.training_sample(state.rng)
    state.opt_student, ds = kd_update(student, batch, cfg.distill, state.opt_student, state.rng)
    row["phases"].append("distill")
    row.update(distill_updates=ds.updates, distill_loss=float(np.mean(ds.losses)) if ds.losses else None)
    timing["distill"] = time.perf_counter() - t0

    if cfg.ablation.use_pseudo_rl and cfg.pseudo.n_pseudo > 0:
        t0 = time.perf_counter()
        state.learner, ps = pseudo_update(teacher, cfg.env, student, cfg.pseudo, state.rng, state.learner)
        row["phases"].append("refine")
        row.update(refine_updates=ps.updates, refine_skipped=ps.skipped)
        timing["refine"] = time.perf_counter() - t0
