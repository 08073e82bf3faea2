"""Back-translation model: path in, instruction out.

The encoder LSTM reads one (view feature, motion class) pair per step — the
patch facing the movement direction, plus a learned embedding of the
discretized turn — and a final (end-node view, stop) step. The decoder LSTM
emits tokens greedily with attention over the encoder states. Trained
teacher-forced on oracle-annotated paths, then frozen for every later stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from . import world as wd

_STREAM_INIT = 37
_STREAM_TRAIN = 41


class SpeakerModel:
    def __init__(self, rng: np.random.Generator, hidden: int = 64,
                 token_embed: int = 32, action_embed: int = 16,
                 attention_dim: int = 32, dropout: float = 0.5):
        self.hidden = hidden
        self.dropout = dropout
        self.frozen = False
        h, e, a, k, d = hidden, token_embed, action_embed, attention_dim, wd.D_FEAT
        p = nn.ParamSet()
        p.add("act_emb", (wd.N_ACT_CLASSES, a), rng)
        p.add("enc/W", (4 * h, d + a + h), rng)
        p.add("enc/b", (4 * h,), rng, fan_in=d + a + h)
        p.add("tok_emb", (wd.VOCAB_SIZE, e), rng)
        p.add("dec/W", (4 * h, e + h), rng)
        p.add("dec/b", (4 * h,), rng, fan_in=e + h)
        p.add("att/Wh", (h, k), rng)
        p.add("att/Wf", (h + d + a, k), rng)
        # mix sees the decoder state, the attended state, and the final
        # encoder state (which carries the end node's raw view) directly
        p.add("mix/W", (h, h + 2 * (h + d + a)), rng)
        p.add("mix/b", (h,), rng, fan_in=h + 2 * (h + d + a))
        p.add("out/W", (wd.VOCAB_SIZE, h), rng)
        p.add("out/b", (wd.VOCAB_SIZE,), rng, fan_in=h)
        self.params = p


def new_speaker(seed: int, cfg=None) -> SpeakerModel:
    kw = {}
    if cfg is not None:
        kw = dict(hidden=cfg.hidden_size, token_embed=cfg.token_embed,
                  action_embed=cfg.action_embed, attention_dim=cfg.attention_dim,
                  dropout=cfg.dropout)
    return SpeakerModel(np.random.default_rng([_STREAM_INIT, seed]), **kw)


def encode_path(model: SpeakerModel, g: wd.NavGraph, path: wd.Path) -> nn.Tensor:
    """Encoder states (hops+1, hidden + input): one per movement step plus a
    stop step. Each state carries its raw input alongside the LSTM output so
    the decoder's attention can read landmarks directly."""
    p = model.params
    classes = wd.motion_classes(g, path)
    h = nn.const(np.zeros(model.hidden))
    c = nn.const(np.zeros(model.hidden))
    states = []
    inputs = []
    for t, cls in enumerate(classes):
        u, v = path.nodes[t], path.nodes[t + 1]
        feat = g.features[u, g.patch_toward(u, v)]
        x = nn.concat([nn.const(feat), nn.row(p["act_emb"], cls)])
        h, c = nn.lstm_cell(x, h, c, p, "enc/")
        states.append(h)
        inputs.append(x)
    x = nn.concat([nn.const(g.features[path.end, 0]),
                   nn.row(p["act_emb"], wd.ACT_STOP)])
    h, c = nn.lstm_cell(x, h, c, p, "enc/")
    states.append(h)
    inputs.append(x)
    return nn.stack_rows([nn.concat([s, xi]) for s, xi in zip(states, inputs)])


def _decode_step(model, prev_tok, h, c, enc_states, enc_final, train, rng):
    p = model.params
    emb = nn.row(p["tok_emb"], prev_tok)
    if train and model.dropout > 0.0:
        emb = nn.dropout(emb, model.dropout, rng)
    h, c = nn.lstm_cell(emb, h, c, p, "dec/")
    ctx, _ = nn.attention(h, enc_states, p, "att/")
    mixed = nn.tanh(nn.add(nn.matmul(p["mix/W"], nn.concat([h, ctx, enc_final])),
                           p["mix/b"]))
    probs = nn.softmax(nn.add(nn.matmul(p["out/W"], mixed), p["out/b"]))
    return probs, h, c


def token_loss(model: SpeakerModel, g: wd.NavGraph, pair: wd.EpisodePair,
               train: bool = False,
               rng: np.random.Generator | None = None) -> nn.Tensor:
    """Mean teacher-forced cross-entropy over the instruction's tokens."""
    enc_states = encode_path(model, g, pair.path)
    enc_final = nn.row(enc_states, enc_states.dims[0] - 1)
    h = nn.const(np.zeros(model.hidden))
    c = nn.const(np.zeros(model.hidden))
    prev = wd.BOS
    losses = []
    for target in pair.instruction.tokens:
        probs, h, c = _decode_step(model, prev, h, c, enc_states, enc_final,
                                   train, rng)
        losses.append(nn.cross_entropy(probs, target))
        prev = target
    return nn.mean_scalars(losses)


def generate(model: SpeakerModel, path: wd.Path, g: wd.NavGraph) -> wd.Instruction:
    """Greedy decode, hard-capped at the instruction length limit."""
    enc_states = encode_path(model, g, path)
    enc_final = nn.row(enc_states, enc_states.dims[0] - 1)
    h = nn.const(np.zeros(model.hidden))
    c = nn.const(np.zeros(model.hidden))
    prev = wd.BOS
    tokens: list[int] = []
    while len(tokens) < wd.MAX_INSTRUCTION_LEN - 1:
        probs, h, c = _decode_step(model, prev, h, c, enc_states, enc_final,
                                   False, None)
        tok = int(np.argmax(probs.data))
        tokens.append(tok)
        prev = tok
        if tok == wd.EOS:
            break
    if tokens[-1] != wd.EOS:
        tokens.append(wd.EOS)
    return wd.Instruction(tuple(tokens), provenance="speaker")


def train_speaker(dataset: list[wd.EpisodePair], worlds: dict[str, wd.NavGraph],
                  epochs: int, seed: int, lr: float = 1e-3,
                  weight_decay: float = 5e-4, cfg=None
                  ) -> tuple[SpeakerModel, list[float]]:
    """Teacher-forced training on oracle episodes; returns per-epoch mean
    token losses alongside the model."""
    if not dataset:
        raise ValueError("speaker training set is empty")
    if any(p.instruction.provenance != "oracle" for p in dataset):
        raise ValueError("speaker pretraining expects oracle instructions")
    model = new_speaker(seed, cfg)
    opt = nn.AdamState.for_params(model.params, lr, weight_decay)
    rng = np.random.default_rng([_STREAM_TRAIN, seed])
    epoch_losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for i in order:
            pair = dataset[int(i)]
            loss = token_loss(model, worlds[pair.env_id], pair, train=True, rng=rng)
            nn.backward(loss, model.params)
            nn.adam_step(model.params, opt)
            total += loss.item()
        epoch_losses.append(total / len(dataset))
    return model, epoch_losses


def save_speaker(path, model: SpeakerModel) -> None:
    nn.save_checkpoint(path, model.params,
                       meta={"dropout": np.array([model.dropout]),
                             "hidden": np.array([float(model.hidden)])})


def load_speaker(path) -> SpeakerModel:
    params, _, meta = nn.load_checkpoint(path)
    model = SpeakerModel(np.random.default_rng(0),
                         hidden=int(meta["hidden"][0]),
                         token_embed=params["tok_emb"].dims[1],
                         action_embed=params["act_emb"].dims[1],
                         attention_dim=params["att/Wh"].dims[1],
                         dropout=float(meta["dropout"][0]))
    model.params.load_from(params)
    return model
