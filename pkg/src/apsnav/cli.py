"""Experiment harness: every stage as a subcommand over a shared run directory.

Stages compose through files only — worlds, episode sets, checkpoints, and
augmentation stores all live under --run-dir, and each stage writes a manifest
recording the config hash, seeds, and artifact paths it produced. Exit codes:
0 success, 2 usage, 3 missing input, 4 failed acceptance check.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import metrics as mx
from . import navigator as nv
from . import nncore as nn
from . import preexplore as px
from . import sampler as sm
from . import speaker as spk
from . import trainer as tr
from . import world as wd
from .config import Config, config_hash, load_config, parse_overrides

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FAILED_CHECK = 4

SPLIT_FILES = {ex.TRAIN: "train.jsonl", ex.VAL_SEEN: "val_seen.jsonl",
               ex.VAL_UNSEEN: "val_unseen.jsonl",
               ex.TEST_UNSEEN: "test_unseen.jsonl"}


class MissingInput(Exception):
    pass


class FailedCheck(Exception):
    pass


class RunDir:
    def __init__(self, root: Path, cfg: Config):
        self.root = Path(root)
        self.cfg = cfg
        for sub in ("worlds", "data", "ckpt", "stores", "logs", "evals",
                    "reports", "manifests"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingInput(str(p))
        return p

    def manifest(self, stage: str, outputs: list[Path],
                 extra: dict | None = None) -> None:
        rec = {"stage": stage, "config_hash": config_hash(self.cfg),
               "seed": self.cfg.seed, "time": time.time(),
               "config": dataclasses.asdict(self.cfg),
               "outputs": [str(p) for p in outputs]}
        if extra:
            rec["extra"] = extra
        with open(self.path("manifests", f"{stage}.json"), "w") as fh:
            json.dump(rec, fh, indent=1)

    def load_worlds(self) -> dict[str, wd.NavGraph]:
        files = sorted(self.require("worlds").glob("*.world"))
        if not files:
            raise MissingInput(str(self.path("worlds")) + "/*.world")
        worlds = [wd.read_world(f) for f in files]
        return {g.env_id: g for g in worlds}

    def worlds_of(self, wmap: dict[str, wd.NavGraph],
                  split: str) -> list[wd.NavGraph]:
        return sorted((g for g in wmap.values() if g.split == split),
                      key=lambda g: g.seed)

    def load_split(self, wmap, split: str) -> list[wd.EpisodePair]:
        return wd.read_pairs(self.require("data", SPLIT_FILES[split]), wmap)


# ---------------------------------------------------------------------------
# stages


def cmd_gen_worlds(run: RunDir, args) -> None:
    worlds = ex.build_worlds(run.cfg)
    out = []
    for split in worlds.values():
        for g in split:
            p = run.path("worlds", f"{g.env_id}.world")
            wd.write_world(g, p)
            out.append(p)
    run.manifest("gen-worlds", out, {"count": len(out)})
    print(f"wrote {len(out)} worlds")


def cmd_gen_dataset(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    worlds = {s: run.worlds_of(wmap, s) for s in wd.SPLITS}
    data = ex.build_datasets(worlds, run.cfg)
    out = []
    for split, pairs in data.items():
        p = run.path("data", SPLIT_FILES[split])
        wd.write_pairs(pairs, p)
        out.append(p)
        print(f"{split}: {len(pairs)} episodes")
    run.manifest("gen-dataset", out)


def cmd_pretrain_speaker(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    train = run.load_split(wmap, ex.TRAIN)
    model, losses = spk.train_speaker(ex.unique_paths(train), wmap,
                                      run.cfg.speaker_epochs, run.cfg.seed,
                                      lr=run.cfg.speaker_lr,
                                      weight_decay=run.cfg.weight_decay,
                                      cfg=run.cfg)
    out = run.path("ckpt", "speaker.ckpt")
    spk.save_speaker(out, model)
    run.manifest("pretrain-speaker", [out], {"epoch_losses": losses})
    print(f"speaker trained, final epoch loss {losses[-1]:.4f}")


def cmd_pretrain_nav(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    train = run.load_split(wmap, ex.TRAIN)
    nav = nv.new_navigator(run.cfg.nav_flavor, run.cfg.seed, run.cfg)
    tr.pretrain_navigator(nav, train, wmap, run.cfg.nav_pretrain_iters,
                          run.cfg.seed, lr=run.cfg.pretrain_lr,
                          weight_decay=run.cfg.weight_decay,
                          step_cap=run.cfg.step_cap)
    out = run.path("ckpt", "nav_base.ckpt")
    nv.save_navigator(out, nav)
    run.manifest("pretrain-nav", [out], {"flavor": nav.flavor})
    print(f"navigator pretrained ({nav.flavor})")


def cmd_augment_rand(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    speaker = spk.load_speaker(run.require("ckpt", "speaker.ckpt"))
    pairs = tr.augment_random(run.worlds_of(wmap, wd.TRAIN_SEEN),
                              run.cfg.augment_budget, speaker, run.cfg.seed)
    out = run.path("stores", "aug_rand.jsonl")
    wd.write_pairs(pairs, out)
    run.manifest("augment-rand", [out], {"count": len(pairs)})
    print(f"wrote {len(pairs)} randomly-sampled pairs")


def cmd_train_aps(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    speaker = spk.load_speaker(run.require("ckpt", "speaker.ckpt"))
    speaker.frozen = True
    nav, _ = nv.load_navigator(run.require("ckpt", "nav_base.ckpt"))
    cfg = run.cfg
    aps = sm.new_sampler(cfg.seed, view=cfg.nav_flavor, cfg=cfg)
    loop = tr.AdversarialTrainer(nav, aps, speaker,
                                 run.worlds_of(wmap, wd.TRAIN_SEEN), cfg.seed,
                                 nav_lr=cfg.nav_lr, aps_lr=cfg.aps_lr,
                                 weight_decay=cfg.weight_decay,
                                 batch_size=cfg.batch_size,
                                 step_cap=cfg.step_cap,
                                 hop_choices=tuple(range(cfg.hop_min,
                                                         cfg.hop_max + 1)))
    loop.run(cfg.adversarial_rounds, store_target=cfg.augment_budget)
    pairs = list(loop.store.pairs())[:cfg.augment_budget]
    store_path = run.path("stores", "aug_aps.jsonl")
    wd.write_pairs(pairs, store_path)
    aps_path = run.path("ckpt", "aps.ckpt")
    sm.save_sampler(aps_path, aps)
    adv_path = run.path("ckpt", "nav_adv.ckpt")
    nv.save_navigator(adv_path, nav)
    log_path = run.path("logs", "rounds.log")
    with open(log_path, "w") as fh:
        for log in loop.logs:
            fh.write(log.line() + "\n")
    run.manifest("train-aps", [store_path, aps_path, adv_path, log_path],
                 {"rounds": len(loop.logs), "store": len(pairs)})
    print(f"adversarial loop: {len(loop.logs)} rounds, {len(pairs)} pairs kept")


def cmd_train_aug(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    store_file = {"rand": "aug_rand.jsonl", "aps": "aug_aps.jsonl"}[args.store]
    augmented = wd.read_pairs(run.require("stores", store_file), wmap)
    if args.fraction < 1.0:
        augmented = augmented[:max(1, int(round(len(augmented) * args.fraction)))]
    train = run.load_split(wmap, ex.TRAIN)
    nav, _ = nv.load_navigator(run.require("ckpt", "nav_base.ckpt"))
    cfg = run.cfg
    tr.train_schedule(nav, augmented, train, cfg.schedule_aug_iters,
                      cfg.schedule_ft_iters, wmap, cfg.seed,
                      lr=cfg.schedule_lr, weight_decay=cfg.weight_decay,
                      step_cap=cfg.step_cap)
    out = run.path("ckpt", f"nav_{args.store}.ckpt")
    nv.save_navigator(out, nav)
    run.manifest(f"train-aug-{args.store}", [out],
                 {"store": args.store, "fraction": args.fraction,
                  "augmented": len(augmented)})
    print(f"trained nav_{args.store} on {len(augmented)} pairs")


def cmd_pre_explore(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    cfg = run.cfg
    nav, _ = nv.load_navigator(run.require("ckpt", f"nav_{args.nav}.ckpt"))
    aps = sm.load_sampler(run.require("ckpt", "aps.ckpt"))
    speaker = spk.load_speaker(run.require("ckpt", "speaker.ckpt"))
    aps.frozen = True
    speaker.frozen = True
    episodes = run.load_split(wmap, ex.VAL_UNSEEN)
    by_env: dict[str, list] = {}
    for pair in episodes:
        by_env.setdefault(pair.env_id, []).append(pair)
    train_worlds = run.worlds_of(wmap, wd.TRAIN_SEEN)
    (run.path("ckpt", "preexplore")).mkdir(exist_ok=True)
    records = []
    outs = []
    for g in run.worlds_of(wmap, wd.VAL_UNSEEN):
        before = mx.evaluate(nav, by_env[g.env_id], wmap, cfg.step_cap).sr
        adapted = px.pre_explore(nav, aps, speaker, g, args.steps,
                                 lr=cfg.preexplore_lr,
                                 batch_size=cfg.batch_size, seed=cfg.seed,
                                 weight_decay=cfg.weight_decay)
        after = mx.evaluate(adapted, by_env[g.env_id], wmap, cfg.step_cap).sr
        ck = run.path("ckpt", "preexplore", f"{g.env_id}.ckpt")
        nv.save_navigator(ck, adapted)
        outs.append(ck)
        records.append({"env": g.env_id,
                        "feature_difference":
                        px.feature_difference(g, train_worlds),
                        "sr_before": before, "sr_after": after,
                        "delta_sr": after - before, "steps": args.steps})
    rec_path = run.path("reports", "preexplore_records.jsonl")
    with open(rec_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    run.manifest("pre-explore", outs + [rec_path], {"steps": args.steps})
    for r in records:
        print(f"{r['env']}: SR {r['sr_before']:.3f} -> {r['sr_after']:.3f} "
              f"(feature diff {r['feature_difference']:.3f})")


def cmd_eval(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    episodes = run.load_split(wmap, args.split)
    if args.policy == "oracle":
        rec = mx.evaluate_oracle(episodes, wmap, model_id="oracle")
        name = "oracle"
    else:
        nav, _ = nv.load_navigator(run.require("ckpt", f"nav_{args.nav}.ckpt"))
        traces = [] if args.traces else None
        rec = mx.evaluate(nav, episodes, wmap, run.cfg.step_cap,
                          model_id=f"nav_{args.nav}", traces=traces)
        name = f"nav_{args.nav}"
        if args.traces:
            with open(args.traces, "w") as fh:
                for t in traces:
                    fh.write(json.dumps(t) + "\n")
    out = run.path("evals", f"{name}_{args.split}.tsv")
    with open(out, "w") as fh:
        fh.write("model\tsplit\tcount\tne\tosr\tsr\tspl\n")
        fh.write(rec.row() + "\n")
    run.manifest(f"eval-{name}-{args.split}", [out],
                 {"ne": rec.ne, "osr": rec.osr, "sr": rec.sr, "spl": rec.spl})
    print(rec.row())


def cmd_cross_eval(run: RunDir, args) -> None:
    wmap = run.load_worlds()
    cfg = run.cfg
    navs = []
    for name in ("base", "rand", "aps"):
        p = run.path("ckpt", f"nav_{name}.ckpt")
        if p.exists():
            navs.append((name, nv.load_navigator(p)[0]))
    if not navs:
        raise MissingInput(str(run.path("ckpt", "nav_*.ckpt")))
    rng = np.random.default_rng(cfg.seed)
    train = run.load_split(wmap, ex.TRAIN)
    sample = [train[i] for i in rng.choice(len(train),
                                           min(200, len(train)), replace=False)]
    datasets = [("train", sample)]
    for store in ("rand", "aps"):
        p = run.path("stores", f"aug_{store}.jsonl")
        if p.exists():
            pairs = wd.read_pairs(p, wmap)
            idx = rng.choice(len(pairs), min(200, len(pairs)), replace=False)
            datasets.append((f"aug_{store}", [pairs[i] for i in idx]))
    nav_ids, ds_names, sr = mx.cross_evaluate(navs, datasets, wmap, cfg.step_cap)
    out = run.path("reports", "cross_eval.tsv")
    with open(out, "w") as fh:
        fh.write("model\t" + "\t".join(ds_names) + "\n")
        for i, nav_id in enumerate(nav_ids):
            fh.write(nav_id + "\t" + "\t".join(f"{v:.4f}" for v in sr[i]) + "\n")
    run.manifest("cross-eval", [out])
    print(open(out).read().strip())


def _seed_list(args) -> list[int]:
    return [int(s) for s in args.seeds.split(",") if s.strip()]


def cmd_sweep_ratio(run: RunDir, args) -> None:
    cfg = run.cfg
    seeds = _seed_list(args)
    fractions = tuple(cfg.ratio_fraction_list())
    results = ex.run_seeds(_ratio_worker, cfg, seeds, workers=cfg.workers,
                           fractions=fractions)
    out = run.path("reports", "ratio_sweep.tsv")
    with open(out, "w") as fh:
        fh.write("arm\tsplit\tx\ty\tseed\n")
        for res in results:
            for arm, by_frac in res["arms"].items():
                for frac in sorted(by_frac):
                    for split in (ex.VAL_SEEN, ex.VAL_UNSEEN):
                        fh.write(f"{arm}\t{split}\t{frac}\t"
                                 f"{by_frac[frac][split]:.4f}\t{res['seed']}\n")
    run.manifest("sweep-ratio", [out], {"seeds": seeds,
                                        "fractions": list(fractions)})
    print(f"ratio sweep over seeds {seeds} written to {out}")


def _ratio_worker(cfg: Config, seed: int, fractions) -> dict:
    return ex.strip_artifacts(ex.ab_experiment(cfg, seed, fractions))


def cmd_sweep_steps(run: RunDir, args) -> None:
    cfg = run.cfg
    seeds = _seed_list(args)
    results = ex.run_seeds(_steps_worker, cfg, seeds, workers=cfg.workers,
                           steps_list=cfg.preexplore_step_list())
    out = run.path("reports", "steps_sweep.tsv")
    with open(out, "w") as fh:
        fh.write("env\tx\ty\tseed\tfeature_difference\n")
        for res in results:
            for env, rec in res["envs"].items():
                for steps, sr in rec["sr"].items():
                    fh.write(f"{env}\t{steps}\t{sr:.4f}\t{res['seed']}\t"
                             f"{rec['feature_difference']:.4f}\n")
    run.manifest("sweep-steps", [out], {"seeds": seeds})
    print(f"pre-exploration sweep over seeds {seeds} written to {out}")


def _steps_worker(cfg: Config, seed: int, steps_list) -> dict:
    pipe = ex.build_pipeline(cfg, seed)
    loop, aug_aps = ex.collect_aps_store(pipe)
    nav = tr.train_schedule(pipe.nav0.clone(), aug_aps, pipe.data[ex.TRAIN],
                            cfg.schedule_aug_iters, cfg.schedule_ft_iters,
                            pipe.wmap, seed, lr=cfg.schedule_lr,
                            weight_decay=cfg.weight_decay,
                            step_cap=cfg.step_cap)
    res = ex.preexplore_sweep(pipe, nav, loop.aps, steps_list)
    res["seed"] = seed
    return res


def cmd_report(run: RunDir, args) -> None:
    manifest_dir = run.path("manifests")
    manifests = sorted(manifest_dir.glob("*.json"))
    lines = []
    missing = []
    evals = []
    for mpath in manifests:
        rec = json.loads(mpath.read_text())
        for outp in rec["outputs"]:
            if not Path(outp).exists():
                missing.append(outp)
        if rec["stage"].startswith("eval-"):
            evals.append(rec)
    lines.append("# evaluation summary (NE down, OSR/SR/SPL up)")
    lines.append("model\tsplit\tNE\tOSR\tSR\tSPL")
    for rec in evals:
        e = rec["extra"]
        model, split = rec["stage"].split("-")[1], rec["stage"].split("-")[-1]
        lines.append(f"{model}\t{split}\t{e['ne']:.2f}\t{e['osr']:.3f}\t"
                     f"{e['sr']:.3f}\t{e['spl']:.3f}")
    for sweep in ("ratio_sweep.tsv", "steps_sweep.tsv", "cross_eval.tsv",
                  "preexplore_records.jsonl"):
        p = run.path("reports", sweep)
        if p.exists():
            lines.append(f"\n# {sweep}")
            lines.append(p.read_text().strip())
    out = run.path("reports", "summary.txt")
    out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if missing:
        print("missing artifacts:", *missing, sep="\n  ", file=sys.stderr)
        raise MissingInput(missing[0])
    if args.check:
        _check_sweeps(run)
    run.manifest("report", [out])


def _check_sweeps(run: RunDir) -> None:
    """Directional claims over the sweep outputs; failure exits 4."""
    p = run.path("reports", "ratio_sweep.tsv")
    if not p.exists():
        raise MissingInput(str(p))
    rows = [ln.split("\t") for ln in p.read_text().strip().splitlines()[1:]]
    by = {}
    for arm, split, x, y, seed in rows:
        by.setdefault((arm, split, float(x)), []).append(float(y))
    gaps = {}
    for arm in ("rand", "aps"):
        hi = np.median(by.get((arm, ex.VAL_SEEN, 1.0), [np.nan]))
        lo = np.median(by.get((arm, ex.VAL_SEEN, 0.6), [np.nan]))
        gaps[arm] = hi - lo
    if not gaps["aps"] >= gaps["rand"]:
        raise FailedCheck(
            f"ratio-sweep slope check failed: aps {gaps['aps']:.4f} "
            f"< rand {gaps['rand']:.4f}")
    print(f"ratio-sweep slope check ok: aps {gaps['aps']:.4f} "
          f">= rand {gaps['rand']:.4f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="apsnav",
        description="Adversarial path sampling for instruction navigation")
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--preset", default="desk", choices=("desk", "paper"))
    ap.add_argument("--run-dir", default="runs")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="config override (repeatable)")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sub.add_parser("gen-worlds")
    sub.add_parser("gen-dataset")
    sub.add_parser("pretrain-speaker")
    sub.add_parser("pretrain-nav")
    sub.add_parser("augment-rand")
    sub.add_parser("train-aps")

    p = sub.add_parser("train-aug")
    p.add_argument("--store", required=True, choices=("rand", "aps"))
    p.add_argument("--fraction", type=float, default=1.0)

    p = sub.add_parser("pre-explore")
    p.add_argument("--nav", default="aps",
                   help="navigator checkpoint name (base|rand|aps|adv)")
    p.add_argument("--steps", type=int, default=15)

    p = sub.add_parser("eval")
    p.add_argument("--nav", default="base")
    p.add_argument("--split", default=ex.VAL_SEEN,
                   choices=tuple(SPLIT_FILES))
    p.add_argument("--policy", choices=("model", "oracle"), default="model")
    p.add_argument("--traces", help="write per-episode node traces here")

    sub.add_parser("cross-eval")

    p = sub.add_parser("sweep-ratio")
    p.add_argument("--seeds", default="1,2,3,4,5")

    p = sub.add_parser("sweep-steps")
    p.add_argument("--seeds", default="1,2,3,4,5")

    p = sub.add_parser("report")
    p.add_argument("--check", action="store_true",
                   help="validate sweep inequalities (exit 4 on failure)")
    return ap


COMMANDS = {
    "gen-worlds": cmd_gen_worlds,
    "gen-dataset": cmd_gen_dataset,
    "pretrain-speaker": cmd_pretrain_speaker,
    "pretrain-nav": cmd_pretrain_nav,
    "augment-rand": cmd_augment_rand,
    "train-aps": cmd_train_aps,
    "train-aug": cmd_train_aug,
    "pre-explore": cmd_pre_explore,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "sweep-ratio": cmd_sweep_ratio,
    "sweep-steps": cmd_sweep_steps,
    "report": cmd_report,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        cfg = load_config(args.config, args.preset,
                          parse_overrides(args.set))
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    run = RunDir(args.run_dir, cfg)
    try:
        COMMANDS[args.cmd](run, args)
    except MissingInput as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FailedCheck as e:
        print(f"failed check: {e}", file=sys.stderr)
        return EXIT_FAILED_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
