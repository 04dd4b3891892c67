"""Command-line entry point: ``crossmodal {gen,train,eval,baseline,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, DataError
from .evaluation import evaluate_model, run_ablation, run_projection_baseline
from .model import CrossModalModel, load_checkpoint, save_checkpoint
from .scenegen import SyntheticScene, generate_scene
from .trainer import run_two_stage

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.json"
RUN_FILE = "run.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossmodal", description="Open-vocabulary point segmentation on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help, *flags):
        sp = sub.add_parser(name, help=help)
        for f in flags:
            sp.add_argument(f"--{f}", required=f in ("config", "data", "out", "run") and not (name == "eval" and f in ("data", "out")))
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        return sp

    add("gen", "generate train and eval scenes", "config", "out")
    add("train", "two-stage training and checkpoint", "config", "data", "out")
    add("eval", "evaluate a trained run", "run", "data", "out")
    add("baseline", "naive projection baseline on the eval split", "config", "data", "out")
    add("ablate", "train and evaluate every configured variant", "config", "data", "out")
    return p


# data ------------------------------------------------------------------------


def _scene_path(root: Path, split: str, seed: int) -> Path:
    return root / split / f"scene_{seed:07d}.json"


def _generate_one(cfg: RunConfig, mode: str, seed: int) -> SyntheticScene:
    return generate_scene(cfg.scene, cfg.vocab.build(), seed, annotated=mode == "base-annotated")


def _map(fn, items, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def generate_data(cfg: RunConfig, out: Path, workers: int = 1) -> None:
    """Eval scenes always carry labels; the mode only governs the training split."""
    for split, seeds, mode in (
        ("train", cfg.data.train_seeds(), cfg.data.mode),
        ("eval", cfg.data.eval_seeds(), "base-annotated"),
    ):
        (out / split).mkdir(parents=True, exist_ok=True)
        for seed, scene in zip(seeds, _map(partial(_generate_one, cfg, mode), seeds, workers)):
            scene.save(_scene_path(out, split, seed))
    manifest = {"config_hash": cfg.config_hash(), "mode": cfg.data.mode, "train": cfg.data.train_seeds(), "eval": cfg.data.eval_seeds()}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2))


def load_split(data: Path, split: str, workers: int = 1) -> list[SyntheticScene]:
    manifest = data / "dataset.json"
    if not manifest.is_file():
        raise DataError(f"no dataset manifest at {manifest}; run `crossmodal gen` first")
    seeds = json.loads(manifest.read_text())[split]
    paths = [_scene_path(data, split, s) for s in seeds]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DataError(f"missing scene files: {missing[:3]}{' ...' if len(missing) > 3 else ''}")
    return _map(SyntheticScene.load, paths, workers)


# commands ----------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def cmd_gen(args) -> None:
    generate_data(load_config(args.config, args.seed), Path(args.out), args.workers)


def cmd_train(args) -> None:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out)
    train = load_split(Path(args.data), "train", args.workers)
    model, state = run_two_stage(train, cfg.trainer, cfg.trainer.weights, cfg.effective_transfer(), vocab=cfg.vocab.build())
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_FILE)
    save_checkpoint(out / CHECKPOINT_FILE, model, cfg.config_hash())
    state.write_log(out / "losses.log")
    _write_json(out / RUN_FILE, {"data": str(Path(args.data).resolve()), "config_hash": cfg.config_hash(), "seed": cfg.trainer.seed})


def load_run(run: Path) -> tuple[RunConfig, CrossModalModel]:
    cfg = load_config(run / CONFIG_FILE)
    params, ckpt_hash = load_checkpoint(run / CHECKPOINT_FILE)
    if ckpt_hash != cfg.config_hash():
        raise ConfigError(f"checkpoint hash {ckpt_hash} does not match {run / CONFIG_FILE} ({cfg.config_hash()})")
    model = CrossModalModel.from_options(cfg.vocab.build(), cfg.transfer, seed=cfg.trainer.seed)
    model.load_state_dict(params)
    return cfg, model


def cmd_eval(args) -> None:
    run = Path(args.run)
    if not (run / CHECKPOINT_FILE).is_file():
        raise ConfigError(f"no checkpoint in {run}")
    cfg, model = load_run(run)
    data = args.data
    if data is None:
        info = run / RUN_FILE
        if not info.is_file():
            raise ConfigError(f"{run} records no dataset; pass --data")
        data = run / json.loads(info.read_text())["data"]  # relative paths are taken from the run dir
    scenes = load_split(Path(data), "eval", args.workers)
    report = evaluate_model(model, scenes, {"run": run.name, "seed": cfg.trainer.seed, "config_hash": cfg.config_hash()})
    _write_json(Path(args.out or run) / "metrics.json", report.to_dict())


def cmd_baseline(args) -> None:
    cfg = load_config(args.config, args.seed)
    scenes = load_split(Path(args.data), "eval", args.workers)
    report = run_projection_baseline(scenes, cfg.vocab.build(), {"run": "projection-baseline", "config_hash": cfg.config_hash()})
    _write_json(Path(args.out) / "metrics.json", report.to_dict())


def cmd_ablate(args) -> None:
    cfg = load_config(args.config, args.seed)
    train = load_split(Path(args.data), "train", args.workers)
    evaluation = load_split(Path(args.data), "eval", args.workers)
    seeds = [args.seed] if args.seed is not None else None

    def progress(name, seed, rep):
        print(f"{name:32s} seed={seed} base={rep.miou_base:.4f} novel={rep.miou_novel:.4f}", file=sys.stderr)

    rows = run_ablation(cfg, train, evaluation, seeds=seeds, progress=progress)
    _write_json(Path(args.out) / "ablation.json", rows)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
