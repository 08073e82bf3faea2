"""Adversarial path sampler: a recurrent policy over visual history alone.

The sampler sees the current node's view patches and its own previous action
embedding — never an instruction or a goal. Each step it attends over the
patches with its hidden state, advances an LSTM, and scores every navigable
direction by a bilinear match between the new hidden state and the patch
feature facing that direction. Episode length is fixed up front by drawing a
hop target, so the policy has no stop action to collapse onto.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from . import world as wd

PANORAMIC = "panoramic"
VISUOMOTOR = "visuomotor"

HOP_CHOICES = (4, 5, 6)

_STREAM_INIT = 43
_STREAM_SAMPLE = 47


class ApsModel:
    def __init__(self, rng: np.random.Generator, view: str = PANORAMIC,
                 hidden: int = 64, action_embed: int = 16,
                 attention_dim: int = 32):
        if view not in (PANORAMIC, VISUOMOTOR):
            raise ValueError(f"unknown view {view!r}")
        self.view = view
        self.hidden = hidden
        self.action_embed = action_embed
        self.frozen = False
        h, a, k, d = hidden, action_embed, attention_dim, wd.D_FEAT
        p = nn.ParamSet()
        p.add("enc/W", (4 * h, d + a + h), rng)
        p.add("enc/b", (4 * h,), rng, fan_in=d + a + h)
        p.add("vatt/Wh", (h, k), rng)
        p.add("vatt/Wf", (d, k), rng)
        p.add("score/Wc", (h, k), rng)
        p.add("score/Wu", (d, k), rng)
        p.add("act_proj", (d, a), rng)
        self.params = p


def new_sampler(seed: int, view: str = PANORAMIC, cfg=None) -> ApsModel:
    kw = {}
    if cfg is not None:
        kw = dict(hidden=cfg.hidden_size, action_embed=cfg.action_embed,
                  attention_dim=cfg.attention_dim)
    return ApsModel(np.random.default_rng([_STREAM_INIT, seed]), view=view, **kw)


@dataclass
class ApsState:
    h: nn.Tensor
    c: nn.Tensor
    prev_action: nn.Tensor


def init_state(aps: ApsModel) -> ApsState:
    return ApsState(nn.const(np.zeros(aps.hidden)),
                    nn.const(np.zeros(aps.hidden)),
                    nn.const(np.zeros(aps.action_embed)))


def aps_step(aps: ApsModel, patches: np.ndarray, state: ApsState,
             candidates: np.ndarray) -> tuple[nn.Tensor, ApsState]:
    """Distribution over the navigable directions described by ``candidates``.

    ``patches`` is the (m, d_f) panorama at the current node; ``candidates``
    holds one patch feature per navigable direction, in edge order.
    """
    if candidates.shape[0] < 1:
        raise ValueError("no navigable directions")
    p = aps.params
    if aps.view == PANORAMIC:
        visual, _ = nn.attention(state.h, nn.const(patches), p, "vatt/")
    else:
        visual = nn.const(patches[0])
    x = nn.concat([visual, state.prev_action])
    h, c = nn.lstm_cell(x, state.h, state.c, p, "enc/")
    q = nn.matmul(h, p["score/Wc"])
    scores = nn.matmul(nn.matmul(nn.const(candidates), p["score/Wu"]), q)
    probs = nn.softmax(scores)
    return probs, ApsState(h, c, state.prev_action)


@dataclass
class SampledPath:
    """One policy rollout plus the log-probabilities REINFORCE needs."""

    path: wd.Path
    step_logps: list[float]
    logp: float
    logp_node: nn.Tensor = field(repr=False)


@dataclass
class SampledBatch:
    paths: list[SampledPath]
    seed: int


def run_policy(aps: ApsModel, g: wd.NavGraph, start: int, hops: int,
               rng: np.random.Generator | None = None,
               forced_actions: list[int] | None = None) -> SampledPath:
    """Roll the policy for ``hops`` steps; replays ``forced_actions`` when given."""
    state = init_state(aps)
    node = start
    nodes = [start]
    logp_nodes: list[nn.Tensor] = []
    for t in range(hops):
        cand = g.candidate_features(node)
        probs, state = aps_step(aps, g.features[node], state, cand)
        if forced_actions is not None:
            action = forced_actions[t]
        else:
            action = nn.sample_index(rng, probs.data)
        logp_nodes.append(nn.log(nn.pick(probs, action)))
        state = ApsState(state.h, state.c,
                         nn.matmul(nn.const(cand[action]), aps.params["act_proj"]))
        node = wd.step(g, node, action)
        nodes.append(node)
    total = nn.sum_scalars(logp_nodes)
    return SampledPath(path=wd.Path.from_nodes(g, nodes),
                       step_logps=[lp.item() for lp in logp_nodes],
                       logp=total.item(), logp_node=total)


def sample_paths(aps: ApsModel, g: wd.NavGraph, count: int, seed: int,
                 hop_choices: tuple[int, ...] = HOP_CHOICES) -> SampledBatch:
    """Sample ``count`` walks; per-path seeds derive from (seed, index)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    paths = []
    for i in range(count):
        rng = np.random.default_rng([_STREAM_SAMPLE, seed, i])
        start = int(rng.integers(g.num_nodes))
        hops = int(hop_choices[int(rng.integers(len(hop_choices)))])
        paths.append(run_policy(aps, g, start, hops, rng))
    return SampledBatch(paths=paths, seed=seed)


def path_logprob(aps: ApsModel, g: wd.NavGraph, path: wd.Path) -> float:
    """Log-probability of an existing path under the current policy."""
    return run_policy(aps, g, path.start, path.hops,
                      forced_actions=list(path.actions)).logp


def save_sampler(path, aps: ApsModel) -> None:
    view_idx = float((PANORAMIC, VISUOMOTOR).index(aps.view))
    nn.save_checkpoint(path, aps.params,
                       meta={"view": np.array([view_idx]),
                             "hidden": np.array([float(aps.hidden)]),
                             "action_embed": np.array([float(aps.action_embed)])})


def load_sampler(path) -> ApsModel:
    params, _, meta = nn.load_checkpoint(path)
    aps = ApsModel(np.random.default_rng(0),
                   view=(PANORAMIC, VISUOMOTOR)[int(meta["view"][0])],
                   hidden=int(meta["hidden"][0]),
                   action_embed=int(meta["action_embed"][0]),
                   attention_dim=params["score/Wc"].dims[1])
    aps.params.load_from(params)
    return aps
