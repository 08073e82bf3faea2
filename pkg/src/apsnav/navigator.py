"""Instruction-conditioned navigation models.

Two flavors share one rollout contract: "visuomotor" reads the front-facing
view patch each step, "panoramic" attends over all patches with the previous
decoder state as query. Both encode the instruction with an LSTM, attend over
the token states while decoding, and score the navigable edges plus an
explicit stop action by a bilinear match between the decoder state and each
candidate direction's view-patch feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from . import world as wd

VISUOMOTOR = "visuomotor"
PANORAMIC = "panoramic"
FLAVORS = (VISUOMOTOR, PANORAMIC)

STUDENT_FORCING = "student-forcing"
GREEDY = "greedy"

_STREAM_INIT = 31


class NavModel:
    """Recurrent action selector over (view features, instruction, history)."""

    def __init__(self, flavor: str, rng: np.random.Generator,
                 hidden: int = 64, token_embed: int = 32,
                 action_embed: int = 16, attention_dim: int = 32,
                 dropout: float = 0.5):
        if flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.flavor = flavor
        self.hidden = hidden
        self.action_embed = action_embed
        self.dropout = dropout
        self.frozen = False
        h, e, a, k, d = hidden, token_embed, action_embed, attention_dim, wd.D_FEAT
        p = nn.ParamSet()
        p.add("tok_emb", (wd.VOCAB_SIZE, e), rng)
        p.add("enc/W", (4 * h, e + h), rng)
        p.add("enc/b", (4 * h,), rng, fan_in=e + h)
        p.add("dec/W", (4 * h, d + a + h), rng)
        p.add("dec/b", (4 * h,), rng, fan_in=d + a + h)
        p.add("iatt/Wh", (h, k), rng)
        p.add("iatt/Wf", (h + e, k), rng)
        if flavor == PANORAMIC:
            p.add("vatt/Wh", (h, k), rng)
            p.add("vatt/Wf", (d, k), rng)
        p.add("mix/W", (h, h + h + e), rng)
        p.add("mix/b", (h,), rng, fan_in=h + h + e)
        # candidates carry the exact edge heading appended to the patch feature
        p.add("score/Wc", (h, k), rng)
        p.add("score/Wu", (d + 4, k), rng)
        p.add("act_proj", (d + 4, a), rng)
        p.add("stop_vec", (d,), rng, fan_in=d)
        self.params = p

    def clone(self) -> "NavModel":
        out = NavModel(self.flavor, np.random.default_rng(0), self.hidden,
                       self.params["tok_emb"].dims[1], self.action_embed,
                       self.params["score/Wc"].dims[1], self.dropout)
        out.params.load_from(self.params)
        out.frozen = self.frozen
        return out


def new_navigator(flavor: str, seed: int, cfg=None) -> NavModel:
    kw = {}
    if cfg is not None:
        kw = dict(hidden=cfg.hidden_size, token_embed=cfg.token_embed,
                  action_embed=cfg.action_embed, attention_dim=cfg.attention_dim,
                  dropout=cfg.dropout)
    return NavModel(flavor, np.random.default_rng([_STREAM_INIT, seed]), **kw)


@dataclass
class NavState:
    h: nn.Tensor
    c: nn.Tensor
    prev_action: nn.Tensor  # embedding of the previously taken action


def init_state(nav: NavModel) -> NavState:
    return NavState(nn.const(np.zeros(nav.hidden)),
                    nn.const(np.zeros(nav.hidden)),
                    nn.const(np.zeros(nav.action_embed)))


def encode_instruction(nav: NavModel, instr: wd.Instruction,
                       train: bool = False,
                       rng: np.random.Generator | None = None) -> nn.Tensor:
    """Per-token states (T, hidden + embed) for decode-time attention; each
    state carries its token embedding so grounding words is a direct read.
    Dropout (when training) hits the embeddings, the non-recurrent input."""
    p = nav.params
    h = nn.const(np.zeros(nav.hidden))
    c = nn.const(np.zeros(nav.hidden))
    states = []
    for tok in instr.tokens:
        emb = nn.row(p["tok_emb"], tok)
        if train and nav.dropout > 0.0:
            emb = nn.dropout(emb, nav.dropout, rng)
        h, c = nn.lstm_cell(emb, h, c, p, "enc/")
        states.append(nn.concat([h, emb]))
    return nn.stack_rows(states)


def decode_step(nav: NavModel, g: wd.NavGraph, node: int, state: NavState,
                contexts: nn.Tensor, train: bool = False,
                rng: np.random.Generator | None = None
                ) -> tuple[nn.Tensor, NavState]:
    """One action distribution over degree(node)+1 options (edges then stop)."""
    p = nav.params
    if nav.flavor == PANORAMIC:
        visual, _ = nn.attention(state.h, nn.const(g.features[node]), p, "vatt/")
    else:
        visual = nn.const(g.features[node][0])
    x = nn.concat([visual, state.prev_action])
    h, c = nn.lstm_cell(x, state.h, state.c, p, "dec/")
    inst_ctx, _ = nn.attention(h, contexts, p, "iatt/")
    mixed = nn.tanh(nn.add(nn.matmul(p["mix/W"], nn.concat([h, inst_ctx])),
                           p["mix/b"]))
    q = nn.matmul(mixed, p["score/Wc"])
    cand = g.candidate_features(node, exact_heading=True)
    edge_scores = nn.matmul(nn.matmul(nn.const(cand), p["score/Wu"]), q)
    # stop candidate: the view from where the agent stands plus a learned
    # offset, with a zero heading extension no edge can collide with
    stop_feat = nn.concat([nn.add(nn.const(g.features[node][0]), p["stop_vec"]),
                           nn.const(np.zeros(4))])
    stop_score = nn.matmul(nn.matmul(stop_feat, p["score/Wu"]), q)
    probs = nn.softmax(nn.concat([edge_scores, stop_score]))
    return probs, NavState(h, c, state.prev_action)


def _advance(nav: NavModel, g: wd.NavGraph, node: int, action: int,
             state: NavState) -> NavState:
    feat = nn.const(g.candidate_features(node, exact_heading=True)[action])
    return NavState(state.h, state.c, nn.matmul(feat, nav.params["act_proj"]))


@dataclass
class Trajectory:
    """One rollout: nodes visited, actions taken, optional per-step losses."""

    nodes: tuple[int, ...]
    actions: tuple[int, ...]
    step_losses: list[nn.Tensor] | None
    terminated_by: str  # "stop" | "step-cap"

    def traveled(self, g: wd.NavGraph) -> float:
        return sum(g.edge_length(u, v)
                   for u, v in zip(self.nodes[:-1], self.nodes[1:]))


def rollout(nav: NavModel, g: wd.NavGraph, start: int, goal: int,
            instr: wd.Instruction, mode: str = GREEDY, step_cap: int = 10,
            rng: np.random.Generator | None = None,
            train: bool = False) -> Trajectory:
    """Run one episode.

    Student-forcing mode supervises each step toward the teacher action but
    executes the model's own sampled action; greedy mode takes the argmax and
    records no losses. Ends on the stop action or at the step cap.
    """
    if step_cap < 1:
        raise ValueError("step_cap must be >= 1")
    if mode not in (STUDENT_FORCING, GREEDY):
        raise ValueError(f"unknown rollout mode {mode!r}")
    supervised = mode == STUDENT_FORCING
    if supervised and rng is None:
        raise ValueError("student forcing samples actions and needs an rng")
    contexts = encode_instruction(nav, instr, train, rng)
    state = init_state(nav)
    node = start
    nodes = [start]
    actions: list[int] = []
    losses: list[nn.Tensor] | None = [] if supervised else None
    terminated = "step-cap"
    for _ in range(step_cap):
        probs, state = decode_step(nav, g, node, state, contexts, train, rng)
        if supervised:
            losses.append(nn.cross_entropy(probs, wd.teacher_action(g, node, goal)))
            action = nn.sample_index(rng, probs.data)
        else:
            action = int(np.argmax(probs.data))
        actions.append(action)
        if action == g.degree(node):
            terminated = "stop"
            break
        state = _advance(nav, g, node, action, state)
        node = wd.step(g, node, action)
        nodes.append(node)
    return Trajectory(tuple(nodes), tuple(actions), losses, terminated)


def save_navigator(path, nav: NavModel, adam: nn.AdamState | None = None) -> None:
    meta = {"flavor": np.array([float(FLAVORS.index(nav.flavor))]),
            "dropout": np.array([nav.dropout]),
            "hidden": np.array([float(nav.hidden)]),
            "action_embed": np.array([float(nav.action_embed)])}
    nn.save_checkpoint(path, nav.params, adam=adam, meta=meta)


def load_navigator(path) -> tuple[NavModel, nn.AdamState | None]:
    params, adam, meta = nn.load_checkpoint(path)
    flavor = FLAVORS[int(meta["flavor"][0])]
    nav = NavModel(flavor, np.random.default_rng(0),
                   hidden=int(meta["hidden"][0]),
                   token_embed=params["tok_emb"].dims[1],
                   action_embed=int(meta["action_embed"][0]),
                   attention_dim=params["score/Wc"].dims[1],
                   dropout=float(meta["dropout"][0]))
    nav.params.load_from(params)
    return nav, adam
