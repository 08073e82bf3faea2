"""Evaluation protocol: NE, OSR, SR, SPL over greedy rollouts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import navigator as nav_mod
from . import world as wd

SUCCESS_RADIUS = wd.SUCCESS_RADIUS


@dataclass
class MetricsRecord:
    count: int
    ne: float    # mean navigation error, meters
    osr: float   # oracle success rate
    sr: float    # success rate
    spl: float   # success weighted by path length
    split: str
    model_id: str

    def row(self) -> str:
        return (f"{self.model_id}\t{self.split}\t{self.count}\t"
                f"{self.ne:.3f}\t{self.osr:.4f}\t{self.sr:.4f}\t{self.spl:.4f}")


def episode_metrics(g: wd.NavGraph, trajectory: nav_mod.Trajectory, goal: int,
                    shortest_length: float) -> tuple[float, int, int, float]:
    """(ne, osr_flag, sr_flag, spl) for one finished episode."""
    if not trajectory.nodes:
        raise ValueError("empty trajectory")
    if shortest_length <= 0.0:
        raise ValueError("shortest_length must be positive")
    ne = g.euclid(trajectory.nodes[-1], goal)
    sr = 1 if ne <= SUCCESS_RADIUS else 0
    closest = min(g.euclid(n, goal) for n in trajectory.nodes)
    osr = 1 if closest <= SUCCESS_RADIUS else 0
    traveled = trajectory.traveled(g)
    spl = sr * shortest_length / max(shortest_length, traveled)
    return ne, osr, sr, spl


def _aggregate(rows: list[tuple[float, int, int, float]], split: str,
               model_id: str) -> MetricsRecord:
    arr = np.array(rows)
    return MetricsRecord(count=len(rows), ne=float(arr[:, 0].mean()),
                         osr=float(arr[:, 1].mean()), sr=float(arr[:, 2].mean()),
                         spl=float(arr[:, 3].mean()), split=split,
                         model_id=model_id)


def evaluate(nav: nav_mod.NavModel, episodes: list[wd.EpisodePair],
             worlds: dict[str, wd.NavGraph], step_cap: int = 10,
             model_id: str = "nav",
             traces: list | None = None) -> MetricsRecord:
    """Greedy rollout per episode, one try each, aggregated means.

    The stored episode path is the ground-truth shortest path, so its length
    is the SPL reference. ``traces`` (if a list) collects per-episode node
    sequences for export.
    """
    if not episodes:
        raise ValueError("no episodes to evaluate")
    rows = []
    for pair in episodes:
        g = worlds[pair.env_id]
        traj = nav_mod.rollout(nav, g, pair.path.start, pair.path.end,
                               pair.instruction, nav_mod.GREEDY, step_cap)
        rows.append(episode_metrics(g, traj, pair.path.end, pair.path.length))
        if traces is not None:
            traces.append({"env": pair.env_id, "goal": pair.path.end,
                           "nodes": list(traj.nodes),
                           "terminated_by": traj.terminated_by})
    splits = {p.split for p in episodes}
    split = splits.pop() if len(splits) == 1 else "mixed"
    return _aggregate(rows, split, model_id)


def oracle_trajectory(g: wd.NavGraph, start: int, goal: int,
                      step_cap: int = 64) -> nav_mod.Trajectory:
    """Follow teacher actions to the goal and stop — the metrics upper bound."""
    node = start
    nodes = [start]
    actions = []
    for _ in range(step_cap):
        a = wd.teacher_action(g, node, goal)
        actions.append(a)
        if a == g.degree(node):
            return nav_mod.Trajectory(tuple(nodes), tuple(actions), None, "stop")
        node = wd.step(g, node, a)
        nodes.append(node)
    return nav_mod.Trajectory(tuple(nodes), tuple(actions), None, "step-cap")


def evaluate_oracle(episodes: list[wd.EpisodePair],
                    worlds: dict[str, wd.NavGraph],
                    model_id: str = "oracle") -> MetricsRecord:
    if not episodes:
        raise ValueError("no episodes to evaluate")
    rows = []
    for pair in episodes:
        g = worlds[pair.env_id]
        traj = oracle_trajectory(g, pair.path.start, pair.path.end)
        rows.append(episode_metrics(g, traj, pair.path.end, pair.path.length))
    splits = {p.split for p in episodes}
    split = splits.pop() if len(splits) == 1 else "mixed"
    return _aggregate(rows, split, model_id)


def cross_evaluate(navs: list[tuple[str, nav_mod.NavModel]],
                   datasets: list[tuple[str, list[wd.EpisodePair]]],
                   worlds: dict[str, wd.NavGraph],
                   step_cap: int = 10) -> tuple[list[str], list[str], np.ndarray]:
    """Success-rate matrix of every navigator on every episode set."""
    nav_ids = [n for n, _ in navs]
    ds_names = [d for d, _ in datasets]
    sr = np.zeros((len(navs), len(datasets)))
    for i, (nav_id, nav) in enumerate(navs):
        for j, (ds_name, episodes) in enumerate(datasets):
            rec = evaluate(nav, episodes, worlds, step_cap, model_id=nav_id)
            sr[i, j] = rec.sr
    return nav_ids, ds_names, sr
