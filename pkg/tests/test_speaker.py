import math

import numpy as np
import pytest

from apsnav import nncore as nn
from apsnav import speaker as spk
from apsnav import world as wd
from apsnav.config import Config


@pytest.fixture(scope="module")
def grammar_worlds():
    worlds = [wd.generate_world(100 + i, 30, wd.TRAIN_SEEN) for i in range(8)]
    return {g.env_id: g for g in worlds}


@pytest.fixture(scope="module")
def grammar_pairs(grammar_worlds):
    pairs = []
    for i, g in enumerate(grammar_worlds.values()):
        rng = np.random.default_rng(1000 + i)
        pairs += wd.make_episodes(g, wd.sample_dataset_paths(g, 20, rng))
    return pairs


@pytest.fixture(scope="module")
def pretrained(grammar_worlds, grammar_pairs):
    model, losses = spk.train_speaker(grammar_pairs, grammar_worlds, epochs=25,
                                      seed=1, lr=2e-3, cfg=Config(dropout=0.5))
    return model, losses


def quality(model, pairs, worlds):
    tok_ok = tok_n = exact = 0
    for p in pairs:
        gen = spk.generate(model, p.path, worlds[p.env_id])
        exact += gen.tokens == p.instruction.tokens
        for a, b in zip(gen.tokens, p.instruction.tokens):
            tok_ok += a == b
        tok_n += max(len(gen.tokens), len(p.instruction.tokens))
    return tok_ok / tok_n, exact / len(pairs)


class TestTrainSpeaker:
    def test_memorizes_single_example(self, grammar_worlds, grammar_pairs):
        model, losses = spk.train_speaker(grammar_pairs[:1], grammar_worlds,
                                          epochs=200, seed=2, lr=2e-3)
        assert losses[-1] < 0.05

    def test_untrained_loss_near_uniform(self, grammar_worlds, grammar_pairs):
        model, losses = spk.train_speaker(grammar_pairs, grammar_worlds,
                                          epochs=0, seed=3, lr=2e-3)
        assert losses == []
        measured = np.mean([spk.token_loss(model, grammar_worlds[p.env_id], p).item()
                            for p in grammar_pairs[:40]])
        uniform = math.log(wd.VOCAB_SIZE)
        assert abs(measured - uniform) <= 0.2 * uniform

    def test_same_seed_bit_identical(self, grammar_worlds, grammar_pairs):
        m1, _ = spk.train_speaker(grammar_pairs[:30], grammar_worlds, 2, 7, lr=2e-3)
        m2, _ = spk.train_speaker(grammar_pairs[:30], grammar_worlds, 2, 7, lr=2e-3)
        assert m1.params.equal_bits(m2.params)

    def test_empty_dataset_rejected(self, grammar_worlds):
        with pytest.raises(ValueError):
            spk.train_speaker([], grammar_worlds, 1, 0)

    def test_speaker_provenance_rejected(self, grammar_worlds, grammar_pairs):
        bad = [wd.EpisodePair(p.env_id, p.path,
                              wd.Instruction(p.instruction.tokens, "speaker"),
                              p.split) for p in grammar_pairs[:2]]
        with pytest.raises(ValueError):
            spk.train_speaker(bad, grammar_worlds, 1, 0)

    def test_epoch_losses_mostly_decreasing(self, pretrained):
        _, losses = pretrained
        upticks = sum(b > a for a, b in zip(losses, losses[1:]))
        assert upticks <= max(1, int(0.05 * len(losses)))


class TestGenerate:
    def test_high_accuracy_after_pretraining(self, pretrained, grammar_worlds,
                                             grammar_pairs):
        model, _ = pretrained
        tok_acc, exact = quality(model, grammar_pairs, grammar_worlds)
        assert tok_acc >= 0.95
        assert exact >= 0.80

    def test_untrained_terminates_within_cap(self, grammar_worlds, grammar_pairs):
        model = spk.new_speaker(11)
        for p in grammar_pairs[:10]:
            gen = spk.generate(model, p.path, grammar_worlds[p.env_id])
            assert len(gen.tokens) <= wd.MAX_INSTRUCTION_LEN
            assert gen.tokens[-1] == wd.EOS
            assert gen.provenance == "speaker"

    def test_greedy_deterministic(self, pretrained, grammar_worlds, grammar_pairs):
        model, _ = pretrained
        p = grammar_pairs[0]
        g1 = spk.generate(model, p.path, grammar_worlds[p.env_id])
        g2 = spk.generate(model, p.path, grammar_worlds[p.env_id])
        assert g1 == g2

    def test_generated_instructions_valid(self, pretrained, grammar_worlds,
                                          grammar_pairs):
        model, _ = pretrained
        for p in grammar_pairs[:40]:
            gen = spk.generate(model, p.path, grammar_worlds[p.env_id])
            assert all(0 <= t < wd.VOCAB_SIZE for t in gen.tokens)
            assert gen.tokens[-1] == wd.EOS


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, grammar_worlds, grammar_pairs):
        model, _ = spk.train_speaker(grammar_pairs[:20], grammar_worlds, 1, 5,
                                     lr=2e-3)
        f = tmp_path / "speaker.ckpt"
        spk.save_speaker(f, model)
        back = spk.load_speaker(f)
        assert back.params.equal_bits(model.params)
        p = grammar_pairs[0]
        assert (spk.generate(back, p.path, grammar_worlds[p.env_id]) ==
                spk.generate(model, p.path, grammar_worlds[p.env_id]))
