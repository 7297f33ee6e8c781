"""Trajectory records shared by distillation, data aggregation and refinement.

A trajectory keeps every student observation of an episode (the recurrent
state has to be threaded through all of them) together with the teacher's
queried action and its log-probability at query time.  Only steps flagged
``accepted`` are training pairs.

On disk a dataset is line-delimited JSON, one record per step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Trajectory:
    obs: dict  # class -> (T, n_c, d_c)
    actions: np.ndarray  # (T, n_agents) teacher actions (targets)
    teacher_logp: np.ndarray  # (T,)
    accepted: np.ndarray  # (T,) bool
    episode: int = 0
    partition: str = "recent"
    executed: np.ndarray | None = None  # (T, n_agents) actions actually taken
    rewards: np.ndarray | None = None  # (T,) team reward of the executed step
    success: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(len(self.teacher_logp), -1)
        self.teacher_logp = np.asarray(self.teacher_logp, dtype=np.float64)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        T = len(self.teacher_logp)
        for c, o in self.obs.items():
            if len(o) != T:
                raise ValueError(f"observations of class {c!r} have {len(o)} steps, expected {T}")
        if len(self.accepted) != T:
            raise ValueError("accepted mask length differs from trajectory length")

    def __len__(self) -> int:
        return len(self.teacher_logp)

    @property
    def n_pairs(self) -> int:
        return int(self.accepted.sum())

    def step_obs(self, t: int) -> dict:
        return {c: o[t] for c, o in self.obs.items()}


def _step_records(tr: Trajectory):
    for t in range(len(tr)):
        rec = {
            "v": FORMAT_VERSION,
            "episode": tr.episode,
            "partition": tr.partition,
            "t": t,
            "T": len(tr),
            "obs": {c: o[t].tolist() for c, o in tr.obs.items()},
            "action": tr.actions[t].tolist(),
            "teacher_logp": float(tr.teacher_logp[t]),
            "accepted": bool(tr.accepted[t]),
            "success": bool(tr.success),
        }
        if tr.executed is not None:
            rec["executed"] = tr.executed[t].tolist()
        if tr.rewards is not None:
            rec["reward"] = float(tr.rewards[t])
        if t == 0 and tr.info:
            rec["info"] = tr.info
        yield rec


def write_trajectories(path, trajectories, append: bool = False) -> None:
    """Write (or append) trajectories as one JSON line per step.

    Empty trajectories are written as a single header line with ``T = 0`` so
    they still count in statistics.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for tr in trajectories:
            if len(tr) == 0:
                fh.write(json.dumps({"v": FORMAT_VERSION, "episode": tr.episode, "partition": tr.partition,
                                     "t": -1, "T": 0, "success": bool(tr.success),
                                     "classes": sorted(tr.obs)}) + "\n")
                continue
            for rec in _step_records(tr):
                fh.write(json.dumps(rec) + "\n")


def _assemble(recs: list) -> Trajectory:
    head = recs[0]
    if head["T"] == 0:
        return Trajectory({c: np.zeros((0, 0, 0)) for c in head.get("classes", [])},
                          np.zeros((0, 0), dtype=np.int64), np.zeros(0), np.zeros(0, dtype=bool),
                          episode=head["episode"], partition=head["partition"], success=head["success"])
    if len(recs) != head["T"] or [r["t"] for r in recs] != list(range(head["T"])):
        raise ValueError(f"episode {head['episode']}: truncated or out-of-order step records")
    classes = list(head["obs"])
    obs = {c: np.array([r["obs"][c] for r in recs], dtype=np.float64) for c in classes}
    executed = np.array([r["executed"] for r in recs]) if "executed" in head else None
    rewards = np.array([r["reward"] for r in recs]) if "reward" in head else None
    return Trajectory(
        obs=obs,
        actions=np.array([r["action"] for r in recs], dtype=np.int64),
        teacher_logp=np.array([r["teacher_logp"] for r in recs]),
        accepted=np.array([r["accepted"] for r in recs], dtype=bool),
        episode=head["episode"],
        partition=head["partition"],
        executed=executed,
        rewards=rewards,
        success=head["success"],
        info=head.get("info", {}),
    )


def read_trajectories(path) -> list:
    """Inverse of :func:`write_trajectories` (file order is preserved)."""
    out, current, key = [], [], None
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: malformed record") from exc
            if rec.get("v") != FORMAT_VERSION:
                raise ValueError(f"{path}:{line_no}: unsupported record version {rec.get('v')}")
            k = (rec["partition"], rec["episode"])
            if current and (k != key or rec["t"] <= current[-1]["t"] or current[-1]["T"] == 0):
                out.append(_assemble(current))
                current = []
            current.append(rec)
            key = k
    if current:
        out.append(_assemble(current))
    return out


def env_step_record(episode: int, env, actions, result) -> dict:
    """One line of an environment rollout log (after ``env.step``)."""
    return {
        "episode": int(episode),
        "t": int(env.t),
        "positions": np.asarray(env.state.pos).tolist(),
        "actions": np.asarray(actions).astype(int).tolist(),
        "rewards": np.asarray(result.rewards, dtype=float).tolist(),
        "done": bool(result.done),
        "success": bool(result.success),
    }


def write_env_log(path, records, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_env_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
