"""Environment-based pre-exploration of one unseen world.

The frozen sampler draws raw walks from the unseen environment (no
shortest-path straightening — the planner is off limits there), the frozen
speaker annotates them, and only the navigator updates. Supervision comes
from the sampled walk itself: the agent executes its own sampled action each
step and is supervised toward the walk's action, and the episode ends the
moment it leaves the walk, since nothing planner-free can say what the right
action is from off-walk nodes.
"""

from __future__ import annotations

import numpy as np

from . import navigator as nav_mod
from . import nncore as nn
from . import sampler as aps_mod
from . import speaker as spk_mod
from . import world as wd

_STREAM_PRE = 67


def _walk_following_loss(nav: nav_mod.NavModel, g: wd.NavGraph, path: wd.Path,
                         instr: wd.Instruction, rng: np.random.Generator
                         ) -> nn.Tensor:
    """Student-forcing loss along a reference walk, truncated at divergence."""
    contexts = nav_mod.encode_instruction(nav, instr, train=True, rng=rng)
    state = nav_mod.init_state(nav)
    losses = []
    for t, node in enumerate(path.nodes):
        probs, state = nav_mod.decode_step(nav, g, node, state, contexts,
                                           train=True, rng=rng)
        target = path.actions[t] if t < path.hops else g.degree(node)
        losses.append(nn.cross_entropy(probs, target))
        sampled = nn.sample_index(rng, probs.data)
        if sampled != target or t == path.hops:
            break
        state = nav_mod._advance(nav, g, node, sampled, state)
    return nn.mean_scalars(losses)


def pre_explore(nav: nav_mod.NavModel, aps: aps_mod.ApsModel,
                speaker: spk_mod.SpeakerModel, g: wd.NavGraph, steps: int,
                lr: float = 1e-5, batch_size: int = 16, seed: int = 0,
                weight_decay: float = 5e-4) -> nav_mod.NavModel:
    """Adapt a copy of ``nav`` to one unseen environment.

    Each step samples a fresh batch of walks from ``g`` alone and applies one
    navigator update. The sampler and speaker must be marked frozen and come
    out bit-identical; no shortest-path queries may hit ``g``.
    """
    if g.split == wd.TRAIN_SEEN:
        raise wd.PolicyViolationError(
            f"pre-exploration requires an unseen environment, got {g.env_id}")
    if not aps.frozen or not speaker.frozen:
        raise RuntimeError("sampler and speaker must be marked frozen")
    adapted = nav.clone()
    planner_before = g.planner_calls
    opt = nn.AdamState.for_params(adapted.params, lr, weight_decay)
    for s in range(steps):
        batch = aps_mod.sample_paths(aps, g, batch_size, seed=_derive(seed, s))
        rng = np.random.default_rng([_STREAM_PRE, seed, s])
        losses = []
        for sp in batch.paths:
            instr = spk_mod.generate(speaker, sp.path, g)
            losses.append(_walk_following_loss(adapted, g, sp.path, instr, rng))
        nn.backward(nn.mean_scalars(losses), adapted.params)
        nn.adam_step(adapted.params, opt)
    if g.planner_calls != planner_before:
        raise RuntimeError("pre-exploration issued shortest-path queries")
    return adapted


def _derive(seed: int, step: int) -> int:
    return int(np.random.default_rng([_STREAM_PRE, seed, step, 1]).integers(2 ** 31))


def feature_difference(g: wd.NavGraph, train_worlds: list[wd.NavGraph]) -> float:
    """Mean distance between this world's patch features and each training
    world's, computed between per-world mean patch vectors for tractability."""
    if not train_worlds:
        raise ValueError("need at least one training world")
    mg = g.features.reshape(-1, wd.D_FEAT).mean(axis=0)
    dists = [float(np.linalg.norm(mg - t.features.reshape(-1, wd.D_FEAT).mean(axis=0)))
             for t in train_worlds]
    return float(np.mean(dists))
