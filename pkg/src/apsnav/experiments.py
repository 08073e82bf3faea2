"""End-to-end experiment stages shared by the CLI and the acceptance suite.

Worlds and datasets are functions of the world seed base only, so every run
seed trains on the same environments (the run seed drives model init and
training randomness). Each experiment function takes (cfg, seed) and returns
plain dicts, which keeps them picklable for the seed-sweep worker pool.
"""

from __future__ import annotations

import concurrent.futures as cf
from dataclasses import dataclass

import numpy as np

from . import metrics as mx
from . import navigator as nv
from . import nncore as nn
from . import preexplore as px
from . import sampler as sm
from . import speaker as spk
from . import trainer as tr
from . import world as wd
from .config import Config

_STREAM_DATA = 71

TRAIN, VAL_SEEN, VAL_UNSEEN, TEST_UNSEEN = ("train", "val-seen", "val-unseen",
                                            "test-unseen")


def build_worlds(cfg: Config) -> dict[str, list[wd.NavGraph]]:
    base = cfg.world_seed_base
    out = {wd.TRAIN_SEEN: [], wd.VAL_UNSEEN: [], wd.TEST_UNSEEN: []}
    seed = base
    for split, count in ((wd.TRAIN_SEEN, cfg.train_worlds),
                         (wd.VAL_UNSEEN, cfg.val_unseen_worlds),
                         (wd.TEST_UNSEEN, cfg.test_unseen_worlds)):
        for _ in range(count):
            out[split].append(wd.generate_world(seed, cfg.nodes_per_world, split))
            seed += 1
    return out


def world_map(worlds: dict[str, list[wd.NavGraph]]) -> dict[str, wd.NavGraph]:
    return {g.env_id: g for split in worlds.values() for g in split}


def build_datasets(worlds: dict[str, list[wd.NavGraph]],
                   cfg: Config) -> dict[str, list[wd.EpisodePair]]:
    """Episode splits: train and val-seen share training worlds (disjoint
    paths); val/test-unseen live in their own worlds."""
    data = {TRAIN: [], VAL_SEEN: [], VAL_UNSEEN: [], TEST_UNSEEN: []}
    for g in worlds[wd.TRAIN_SEEN]:
        rng = np.random.default_rng([_STREAM_DATA, cfg.world_seed_base, g.seed])
        n_train, n_val = cfg.train_paths_per_world, cfg.val_seen_paths_per_world
        paths = wd.sample_dataset_paths(g, n_train + n_val, rng,
                                        cfg.hop_min, cfg.hop_max)
        data[TRAIN] += wd.make_episodes(g, paths[:n_train],
                                        cfg.instructions_per_path)
        data[VAL_SEEN] += wd.make_episodes(g, paths[n_train:], 1, split=VAL_SEEN)
    for split_key, split_tag in ((VAL_UNSEEN, wd.VAL_UNSEEN),
                                 (TEST_UNSEEN, wd.TEST_UNSEEN)):
        for g in worlds[split_tag]:
            rng = np.random.default_rng([_STREAM_DATA, cfg.world_seed_base, g.seed])
            paths = wd.sample_dataset_paths(g, cfg.eval_paths_per_world, rng,
                                            cfg.hop_min, cfg.hop_max)
            data[split_key] += wd.make_episodes(g, paths, 1)
    return data


def unique_paths(pairs: list[wd.EpisodePair]) -> list[wd.EpisodePair]:
    """One pair per distinct path (the oracle grammar repeats instructions)."""
    seen = set()
    out = []
    for p in pairs:
        key = (p.env_id, p.path.nodes)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


@dataclass
class Pipeline:
    """Everything one (cfg, seed) pretraining pass produces."""

    cfg: Config
    seed: int
    worlds: dict[str, list[wd.NavGraph]]
    wmap: dict[str, wd.NavGraph]
    data: dict[str, list[wd.EpisodePair]]
    speaker: spk.SpeakerModel
    speaker_losses: list[float]
    nav0: nv.NavModel


def build_pipeline(cfg: Config, seed: int) -> Pipeline:
    worlds = build_worlds(cfg)
    wmap = world_map(worlds)
    data = build_datasets(worlds, cfg)
    speaker_model, losses = spk.train_speaker(
        unique_paths(data[TRAIN]), wmap, cfg.speaker_epochs, seed,
        lr=cfg.speaker_lr, weight_decay=cfg.weight_decay, cfg=cfg)
    speaker_model.frozen = True
    nav0 = nv.new_navigator(cfg.nav_flavor, seed, cfg)
    tr.pretrain_navigator(nav0, data[TRAIN], wmap, cfg.nav_pretrain_iters, seed,
                          lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay,
                          step_cap=cfg.step_cap)
    return Pipeline(cfg, seed, worlds, wmap, data, speaker_model, losses, nav0)


def collect_aps_store(pipe: Pipeline, target: int | None = None,
                      rounds: int | None = None
                      ) -> tuple[tr.AdversarialTrainer, list[wd.EpisodePair]]:
    """Run the adversarial loop from the pretrained navigator; returns the
    trainer (for its logs/models) and exactly ``target`` pairs when set."""
    cfg = pipe.cfg
    target = cfg.augment_budget if target is None else target
    rounds = cfg.adversarial_rounds if rounds is None else rounds
    nav_adv = pipe.nav0.clone()
    aps = sm.new_sampler(pipe.seed, view=cfg.nav_flavor, cfg=cfg)
    loop = tr.AdversarialTrainer(nav_adv, aps, pipe.speaker,
                                 pipe.worlds[wd.TRAIN_SEEN], pipe.seed,
                                 nav_lr=cfg.nav_lr, aps_lr=cfg.aps_lr,
                                 weight_decay=cfg.weight_decay,
                                 batch_size=cfg.batch_size,
                                 step_cap=cfg.step_cap,
                                 hop_choices=tuple(range(cfg.hop_min,
                                                         cfg.hop_max + 1)))
    loop.run(rounds, store_target=target)
    pairs = list(loop.store.pairs())[:target]
    return loop, pairs


def _schedule_arm(pipe: Pipeline, augmented: list[wd.EpisodePair],
                  fraction: float) -> dict[str, float]:
    cfg = pipe.cfg
    take = max(1, int(round(len(augmented) * fraction)))
    nav = tr.train_schedule(pipe.nav0.clone(), augmented[:take],
                            pipe.data[TRAIN], cfg.schedule_aug_iters,
                            cfg.schedule_ft_iters, pipe.wmap, pipe.seed,
                            lr=cfg.schedule_lr, weight_decay=cfg.weight_decay,
                            step_cap=cfg.step_cap)
    out = {}
    for split in (VAL_SEEN, VAL_UNSEEN):
        rec = mx.evaluate(nav, pipe.data[split], pipe.wmap, cfg.step_cap)
        out[split] = rec.sr
    out["nav"] = nav
    return out


def ab_experiment(cfg: Config, seed: int,
                  fractions: tuple[float, ...] = (1.0,)) -> dict:
    """Identical-budget comparison of sampler-collected vs random augmentation.

    Returns val-seen / val-unseen SR per arm per augmentation fraction, with
    fraction f using the first f of each store (the sampler store is in
    collection order, so prefixes are what early stopping would have seen).
    """
    pipe = build_pipeline(cfg, seed)
    loop, aug_aps = collect_aps_store(pipe)
    aug_rand = tr.augment_random(pipe.worlds[wd.TRAIN_SEEN], cfg.augment_budget,
                                 pipe.speaker, seed)
    result = {"seed": seed, "arms": {}, "rounds": len(loop.logs),
              "store_size": len(aug_aps)}
    models = {}
    for arm, store in (("rand", aug_rand), ("aps", aug_aps)):
        result["arms"][arm] = {}
        for frac in fractions:
            arm_out = _schedule_arm(pipe, store, frac)
            models[(arm, frac)] = arm_out.pop("nav")
            result["arms"][arm][frac] = arm_out
    base = {}
    for split in (VAL_SEEN, VAL_UNSEEN):
        base[split] = mx.evaluate(pipe.nav0, pipe.data[split], pipe.wmap,
                                  cfg.step_cap).sr
    result["base"] = base
    result["_pipe"] = pipe
    result["_models"] = models
    result["_aps"] = loop.aps
    result["_stores"] = {"rand": aug_rand, "aps": aug_aps}
    return result


def strip_artifacts(result: dict) -> dict:
    """Drop the in-memory models so the record can cross process boundaries."""
    return {k: v for k, v in result.items() if not k.startswith("_")}


def adversarial_pressure(cfg: Config, seed: int, rounds: int = 200,
                         sample_count: int = 512) -> dict:
    """Frozen-navigator probe: does the trained sampler find harder paths than
    uniform random walks? Both arms get the same straighten-and-annotate
    treatment before the frozen navigator's loss is measured."""
    pipe = build_pipeline(cfg, seed)
    nav = pipe.nav0
    aps = sm.new_sampler(seed, view=cfg.nav_flavor, cfg=cfg)
    loop = tr.AdversarialTrainer(nav, aps, pipe.speaker,
                                 pipe.worlds[wd.TRAIN_SEEN], seed,
                                 nav_lr=0.0, aps_lr=cfg.aps_lr,
                                 weight_decay=cfg.weight_decay,
                                 batch_size=cfg.batch_size,
                                 step_cap=cfg.step_cap)
    nav_before = nav.params.copy()
    loop.run(rounds)
    assert nav.params.equal_bits(nav_before)  # lr 0 must not move the navigator

    train_worlds = pipe.worlds[wd.TRAIN_SEEN]

    def measured_loss(paths: list[wd.Path], tag: int) -> float:
        pairs = []
        for p in paths:
            g = pipe.wmap[p.env_id]
            try:
                straight = wd.shortest_path_transform(g, p)
            except wd.DegeneratePathError:
                continue
            instr = spk.generate(pipe.speaker, straight, g)
            pairs.append(wd.EpisodePair(p.env_id, straight, instr, wd.TRAIN_SEEN))
        rng = np.random.default_rng([_STREAM_DATA, seed, tag])
        losses, _ = tr.nav_loss(nav, pairs, pipe.wmap, rng, train=False,
                                step_cap=cfg.step_cap)
        return float(np.mean([l.item() for l in losses]))

    aps_paths = []
    for i in range(sample_count):
        rng = np.random.default_rng([_STREAM_DATA, seed, 2, i])
        g = train_worlds[int(rng.integers(len(train_worlds)))]
        start = int(rng.integers(g.num_nodes))
        hops = int(rng.integers(cfg.hop_min, cfg.hop_max + 1))
        aps_paths.append(sm.run_policy(aps, g, start, hops, rng).path)
    walk_paths = tr.random_walk_batch(train_worlds, sample_count, seed,
                                      tuple(range(cfg.hop_min, cfg.hop_max + 1)))
    return {"seed": seed,
            "aps_loss": measured_loss(aps_paths, 3),
            "walk_loss": measured_loss(walk_paths, 4)}


def preexplore_sweep(pipe: Pipeline, nav: nv.NavModel, aps: sm.ApsModel,
                     steps_list: list[int]) -> dict:
    """Per-environment adaptation sweep on the val-unseen worlds.

    Returns SR per (environment, step count) plus each environment's feature
    distance from the training worlds.
    """
    cfg = pipe.cfg
    aps.frozen = True
    pipe.speaker.frozen = True
    by_env: dict[str, list[wd.EpisodePair]] = {}
    for pair in pipe.data[VAL_UNSEEN]:
        by_env.setdefault(pair.env_id, []).append(pair)
    out = {"envs": {}, "steps": steps_list}
    for g in pipe.worlds[wd.VAL_UNSEEN]:
        episodes = by_env[g.env_id]
        rec = {"feature_difference":
               px.feature_difference(g, pipe.worlds[wd.TRAIN_SEEN]), "sr": {}}
        for steps in steps_list:
            adapted = px.pre_explore(nav, aps, pipe.speaker, g, steps,
                                     lr=cfg.preexplore_lr,
                                     batch_size=cfg.batch_size,
                                     seed=pipe.seed,
                                     weight_decay=cfg.weight_decay)
            rec["sr"][steps] = mx.evaluate(adapted, episodes, pipe.wmap,
                                           cfg.step_cap).sr
        out["envs"][g.env_id] = rec
    return out


def run_seeds(fn, cfg: Config, seeds: list[int], workers: int = 1,
              **kwargs) -> list[dict]:
    """Run an experiment function over seeds, optionally in parallel."""
    if workers <= 1 or len(seeds) <= 1:
        return [fn(cfg, s, **kwargs) for s in seeds]
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(fn, cfg, s, **kwargs) for s in seeds]
        return [f.result() for f in futs]


def full_seed_run(cfg: Config, seed: int,
                  fractions: tuple[float, ...] = (0.6, 1.0),
                  pressure_rounds: int = 200,
                  pressure_samples: int = 512,
                  preexplore_steps: tuple[int, ...] = (0, 5, 15, 40)) -> dict:
    """One seed's worth of every comparative experiment, sharing a single
    pretraining pipeline. Returns plain data plus per-stage wall times."""
    import time as _time

    times: dict[str, float] = {}
    t0 = _time.time()
    pipe = build_pipeline(cfg, seed)
    times["pipeline"] = _time.time() - t0

    # frozen-navigator pressure probe (fresh sampler, lr-0 navigator)
    t0 = _time.time()
    from . import trainer as tr_mod

    nav_frozen = pipe.nav0
    aps_probe = sm.new_sampler(seed, view=cfg.nav_flavor, cfg=cfg)
    probe_loop = tr_mod.AdversarialTrainer(
        nav_frozen, aps_probe, pipe.speaker, pipe.worlds[wd.TRAIN_SEEN], seed,
        nav_lr=0.0, aps_lr=cfg.aps_lr, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, step_cap=cfg.step_cap)
    nav_bits = pipe.nav0.params.copy()
    probe_loop.run(pressure_rounds)
    assert pipe.nav0.params.equal_bits(nav_bits)

    def _measured(paths, tag):
        pairs = []
        for p in paths:
            g = pipe.wmap[p.env_id]
            try:
                straight = wd.shortest_path_transform(g, p)
            except wd.DegeneratePathError:
                continue
            pairs.append(wd.EpisodePair(p.env_id, straight,
                                        spk.generate(pipe.speaker, straight, g),
                                        wd.TRAIN_SEEN))
        rng = np.random.default_rng([_STREAM_DATA, seed, tag])
        losses, _ = tr_mod.nav_loss(nav_frozen, pairs, pipe.wmap, rng,
                                    train=False, step_cap=cfg.step_cap)
        return float(np.mean([l.item() for l in losses]))

    train_worlds = pipe.worlds[wd.TRAIN_SEEN]
    aps_paths = []
    for i in range(pressure_samples):
        rng = np.random.default_rng([_STREAM_DATA, seed, 2, i])
        g = train_worlds[int(rng.integers(len(train_worlds)))]
        aps_paths.append(sm.run_policy(aps_probe, g,
                                       int(rng.integers(g.num_nodes)),
                                       int(rng.integers(cfg.hop_min,
                                                        cfg.hop_max + 1)),
                                       rng).path)
    walk_paths = tr_mod.random_walk_batch(train_worlds, pressure_samples, seed,
                                          tuple(range(cfg.hop_min,
                                                      cfg.hop_max + 1)))
    pressure = {"aps_loss": _measured(aps_paths, 3),
                "walk_loss": _measured(walk_paths, 4)}
    times["pressure"] = _time.time() - t0

    # identical-budget A/B plus the fraction arms
    t0 = _time.time()
    speaker_bits = pipe.speaker.params.copy()
    loop, aug_aps = collect_aps_store(pipe)
    round_tags = [p.round_index for p in aug_aps]
    store_monotone = all(a <= b for a, b in zip(round_tags, round_tags[1:]))
    aug_rand = tr_mod.augment_random(train_worlds, cfg.augment_budget,
                                     pipe.speaker, seed)
    times["collect"] = _time.time() - t0

    arms: dict[str, dict] = {}
    models = {}
    t0 = _time.time()
    for arm, store in (("rand", aug_rand), ("aps", aug_aps)):
        arms[arm] = {}
        for frac in fractions:
            t_arm = _time.time()
            out = _schedule_arm(pipe, store, frac)
            models[(arm, frac)] = out.pop("nav")
            out["time"] = _time.time() - t_arm
            arms[arm][frac] = out
    times["schedules"] = _time.time() - t0
    speaker_frozen = pipe.speaker.params.equal_bits(speaker_bits)

    # per-environment pre-exploration sweep on the sampler-trained navigator
    t0 = _time.time()
    aps_nav = models[("aps", 1.0)]
    planner_before = {g.env_id: g.planner_calls
                      for g in pipe.worlds[wd.VAL_UNSEEN]}
    aps_bits = loop.aps.params.copy()
    sweep = preexplore_sweep(pipe, aps_nav, loop.aps, list(preexplore_steps))
    planner_clean = all(g.planner_calls == planner_before[g.env_id]
                        for g in pipe.worlds[wd.VAL_UNSEEN])
    aps_unmoved = loop.aps.params.equal_bits(aps_bits)
    times["preexplore"] = _time.time() - t0

    base = {split: mx.evaluate(pipe.nav0, pipe.data[split], pipe.wmap,
                               cfg.step_cap).sr
            for split in (VAL_SEEN, VAL_UNSEEN)}
    return {"seed": seed, "pressure": pressure, "arms": arms, "base": base,
            "preexplore": sweep, "times": times,
            "hygiene": {"speaker_frozen": speaker_frozen,
                        "store_round_monotone": store_monotone,
                        "aps_frozen_in_preexplore": aps_unmoved,
                        "no_planner_on_unseen": planner_clean},
            "rounds": len(loop.logs), "store_size": len(aug_aps)}
