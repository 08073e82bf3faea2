"""The adversarial loop and its ablation arms.

One round: the sampler draws a batch of walks across the training worlds,
each walk is straightened to the shortest path between its endpoints, the
frozen speaker writes instructions, and the navigator's student-forcing loss
on those pairs is computed once — the navigator descends it while the sampler
ascends it through a REINFORCE estimate with a running-mean baseline. Also
here: the random-augmentation baseline and the two-phase
augment-then-finetune schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import navigator as nav_mod
from . import nncore as nn
from . import sampler as aps_mod
from . import speaker as spk_mod
from . import world as wd

_STREAM_ROUND = 53
_STREAM_RAND_AUG = 59
_STREAM_SCHEDULE = 61


@dataclass
class BaselineTracker:
    """Running mean of past batch rewards (the REINFORCE baseline)."""

    total: float = 0.0
    count: int = 0

    @property
    def value(self) -> float:
        return self.total / self.count if self.count else 0.0

    def update(self, batch_mean: float) -> None:
        self.total += batch_mean
        self.count += 1


class AugmentedStore:
    """Append-only collection of sampler-generated training pairs."""

    def __init__(self):
        self._pairs: list[wd.EpisodePair] = []

    def extend(self, pairs: list[wd.EpisodePair], round_index: int) -> None:
        for p in pairs:
            if p.instruction.provenance != "speaker":
                raise ValueError("augmented pairs must carry speaker instructions")
            self._pairs.append(dataclasses.replace(p, round_index=round_index))

    def pairs(self) -> tuple[wd.EpisodePair, ...]:
        return tuple(self._pairs)

    def __len__(self) -> int:
        return len(self._pairs)


def nav_loss(nav: nav_mod.NavModel, batch: list[wd.EpisodePair],
             worlds: dict[str, wd.NavGraph], rng: np.random.Generator,
             train: bool = True, step_cap: int = 10
             ) -> tuple[list[nn.Tensor], nn.Tensor]:
    """Per-path mean student-forcing losses and their batch mean."""
    if not batch:
        raise ValueError("empty batch")
    per_path = []
    for pair in batch:
        traj = nav_mod.rollout(nav, worlds[pair.env_id], pair.path.start,
                               pair.path.end, pair.instruction,
                               nav_mod.STUDENT_FORCING, step_cap, rng, train)
        per_path.append(nn.mean_scalars(traj.step_losses))
    return per_path, nn.mean_scalars(per_path)


def aps_policy_gradient(batch: aps_mod.SampledBatch, rewards: list[float],
                        tracker: BaselineTracker,
                        params: nn.ParamSet | None = None) -> nn.Tensor:
    """Accumulate the REINFORCE gradient of -sum((R - b) * log p(path)).

    The baseline is read before the tracker absorbs this batch's mean reward,
    so the first-ever batch runs with b = 0.
    """
    if len(rewards) != len(batch.paths):
        raise ValueError("rewards must align 1:1 with sampled paths")
    b = tracker.value
    surrogate = nn.sum_scalars([nn.scale(sp.logp_node, -(r - b))
                                for sp, r in zip(batch.paths, rewards)])
    nn.backward(surrogate, params)
    tracker.update(float(np.mean(rewards)))
    return surrogate


@dataclass
class RoundLog:
    round_index: int
    mean_loss: float
    baseline: float
    store_size: int
    dropped: int
    # dot products of each player's parameter delta with its own gradient;
    # negative means the optimizer descended its surrogate, which is how the
    # minimax wiring (navigator down, sampler up through REINFORCE) is checked
    nav_update_dot: float = 0.0
    aps_update_dot: float = 0.0

    def line(self) -> str:
        return (f"round {self.round_index} mean_nav_loss {self.mean_loss:.6f} "
                f"baseline {self.baseline:.6f} store {self.store_size} "
                f"dropped {self.dropped}")


def _descend(params: nn.ParamSet, opt: nn.AdamState) -> float:
    """Adam step plus the (parameter delta . gradient) diagnostic."""
    grads = {n: t.grad.copy() for n, t in params.items()}
    before = {n: t.data.copy() for n, t in params.items()}
    nn.adam_step(params, opt)
    return float(sum(((t.data - before[n]) * grads[n]).sum()
                     for n, t in params.items()))


class AdversarialTrainer:
    """Alternating navigator/sampler optimization over the training worlds."""

    def __init__(self, nav: nav_mod.NavModel, aps: aps_mod.ApsModel,
                 speaker: spk_mod.SpeakerModel, worlds: list[wd.NavGraph],
                 seed: int, nav_lr: float = 1e-4, aps_lr: float = 3e-5,
                 weight_decay: float = 5e-4, batch_size: int = 16,
                 step_cap: int = 10,
                 hop_choices: tuple[int, ...] = aps_mod.HOP_CHOICES):
        for g in worlds:
            if g.split != wd.TRAIN_SEEN:
                raise wd.PolicyViolationError(
                    f"adversarial training world {g.env_id} is not train-seen")
        self.nav = nav
        self.aps = aps
        self.speaker = speaker
        self.speaker.frozen = True
        self.worlds = worlds
        self.worlds_by_id = {g.env_id: g for g in worlds}
        self.seed = seed
        self.batch_size = batch_size
        self.step_cap = step_cap
        self.hop_choices = hop_choices
        self.nav_opt = nn.AdamState.for_params(nav.params, nav_lr, weight_decay)
        self.aps_opt = nn.AdamState.for_params(aps.params, aps_lr, weight_decay)
        self.tracker = BaselineTracker()
        self.store = AugmentedStore()
        self.round_index = 0
        self.logs: list[RoundLog] = []

    def _sample_batch(self) -> aps_mod.SampledBatch:
        paths = []
        for i in range(self.batch_size):
            rng = np.random.default_rng([_STREAM_ROUND, self.seed,
                                         self.round_index, i])
            g = self.worlds[int(rng.integers(len(self.worlds)))]
            start = int(rng.integers(g.num_nodes))
            hops = int(self.hop_choices[int(rng.integers(len(self.hop_choices)))])
            paths.append(aps_mod.run_policy(self.aps, g, start, hops, rng))
        return aps_mod.SampledBatch(paths=paths, seed=self.seed)

    def run_round(self) -> list[wd.EpisodePair]:
        """One loop body; returns the new augmented pairs."""
        batch = self._sample_batch()
        kept: list[aps_mod.SampledPath] = []
        pairs: list[wd.EpisodePair] = []
        dropped = 0
        for sp in batch.paths:
            g = self.worlds_by_id[sp.path.env_id]
            try:
                straight = wd.shortest_path_transform(g, sp.path)
            except wd.DegeneratePathError:
                dropped += 1
                continue
            instr = spk_mod.generate(self.speaker, straight, g)
            kept.append(sp)
            pairs.append(wd.EpisodePair(env_id=g.env_id, path=straight,
                                        instruction=instr, split=wd.TRAIN_SEEN))

        rng = np.random.default_rng([_STREAM_ROUND, self.seed,
                                     self.round_index, self.batch_size])
        per_path, mean_loss = nav_loss(self.nav, pairs, self.worlds_by_id, rng,
                                       train=True, step_cap=self.step_cap)
        nav_dot = 0.0
        if self.nav_opt.lr > 0.0:  # lr 0 freezes a player exactly, bit for bit
            nn.backward(mean_loss, self.nav.params)
            nav_dot = _descend(self.nav.params, self.nav_opt)

        rewards = [loss.item() for loss in per_path]
        baseline_used = self.tracker.value
        kept_batch = aps_mod.SampledBatch(paths=kept, seed=batch.seed)
        aps_policy_gradient(kept_batch, rewards, self.tracker, self.aps.params)
        aps_dot = 0.0
        if self.aps_opt.lr > 0.0:
            aps_dot = _descend(self.aps.params, self.aps_opt)
        else:
            self.aps.params.zero_grads()

        self.store.extend(pairs, self.round_index)
        self.logs.append(RoundLog(self.round_index, mean_loss.item(),
                                  baseline_used, len(self.store), dropped,
                                  nav_dot, aps_dot))
        self.round_index += 1
        return pairs

    def run(self, rounds: int, store_target: int | None = None) -> AugmentedStore:
        """Run until the round budget or (if given) the store target is met."""
        for _ in range(rounds):
            if store_target is not None and len(self.store) >= store_target:
                break
            self.run_round()
        return self.store


def augment_random(worlds: list[wd.NavGraph], count: int,
                   speaker: spk_mod.SpeakerModel, seed: int
                   ) -> list[wd.EpisodePair]:
    """Shortest paths between uniform endpoint pairs, speaker-annotated."""
    for g in worlds:
        if g.split != wd.TRAIN_SEEN:
            raise wd.PolicyViolationError(
                f"random augmentation world {g.env_id} is not train-seen")
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([_STREAM_RAND_AUG, seed, i])
        g = worlds[int(rng.integers(len(worlds)))]
        a, b = (int(x) for x in rng.choice(g.num_nodes, size=2, replace=False))
        path = wd.shortest_path(g, a, b)
        instr = spk_mod.generate(speaker, path, g)
        pairs.append(wd.EpisodePair(env_id=g.env_id, path=path,
                                    instruction=instr, split=wd.TRAIN_SEEN))
    return pairs


def train_schedule(nav: nav_mod.NavModel, augmented: list[wd.EpisodePair],
                   original: list[wd.EpisodePair],
                   iters_aug: int, iters_ft: int,
                   worlds: dict[str, wd.NavGraph], seed: int,
                   lr: float = 1e-4, weight_decay: float = 5e-4,
                   step_cap: int = 10) -> nav_mod.NavModel:
    """Phase 1 on augmented pairs, phase 2 on the original set.

    One iteration is one episode update; episodes are drawn uniformly with
    replacement by the schedule's own seeded stream.
    """
    if not augmented or not original:
        raise ValueError("both episode sets must be non-empty")
    rng = np.random.default_rng([_STREAM_SCHEDULE, seed])
    opt = nn.AdamState.for_params(nav.params, lr, weight_decay)
    for dataset, iters in ((augmented, iters_aug), (original, iters_ft)):
        for _ in range(iters):
            pair = dataset[int(rng.integers(len(dataset)))]
            traj = nav_mod.rollout(nav, worlds[pair.env_id], pair.path.start,
                                   pair.path.end, pair.instruction,
                                   nav_mod.STUDENT_FORCING, step_cap, rng,
                                   train=True)
            loss = nn.mean_scalars(traj.step_losses)
            nn.backward(loss, nav.params)
            nn.adam_step(nav.params, opt)
    return nav


def pretrain_navigator(nav: nav_mod.NavModel, dataset: list[wd.EpisodePair],
                       worlds: dict[str, wd.NavGraph], iters: int, seed: int,
                       lr: float = 1e-4, weight_decay: float = 5e-4,
                       step_cap: int = 10) -> nav_mod.NavModel:
    """Student-forcing pretraining on the original oracle episodes."""
    if not dataset:
        raise ValueError("empty pretraining set")
    rng = np.random.default_rng([_STREAM_SCHEDULE, seed, 1])
    opt = nn.AdamState.for_params(nav.params, lr, weight_decay)
    for _ in range(iters):
        pair = dataset[int(rng.integers(len(dataset)))]
        traj = nav_mod.rollout(nav, worlds[pair.env_id], pair.path.start,
                               pair.path.end, pair.instruction,
                               nav_mod.STUDENT_FORCING, step_cap, rng,
                               train=True)
        loss = nn.mean_scalars(traj.step_losses)
        nn.backward(loss, nav.params)
        nn.adam_step(nav.params, opt)
    return nav


def random_walk_batch(worlds: list[wd.NavGraph], count: int, seed: int,
                      hop_choices: tuple[int, ...] = aps_mod.HOP_CHOICES
                      ) -> list[wd.Path]:
    """Uniform random walks with the same start/hop distribution the sampler uses."""
    paths = []
    for i in range(count):
        rng = np.random.default_rng([_STREAM_ROUND, seed, i])
        g = worlds[int(rng.integers(len(worlds)))]
        node = int(rng.integers(g.num_nodes))
        hops = int(hop_choices[int(rng.integers(len(hop_choices)))])
        nodes = [node]
        for _ in range(hops):
            node = g.adj[node][int(rng.integers(g.degree(node)))]
            nodes.append(node)
        paths.append(wd.Path.from_nodes(g, nodes))
    return paths
