"""Command-line entry point.

    tbs gen|train|eval|gradcheck|visualize --config PATH [--seed N]
        [--checkpoint PATH] [--out DIR] [--ablation] [--shots K]

Exit codes: 0 ok, 2 config error, 3 non-finite loss, 4 checkpoint error,
5 gradcheck failure. ``--seed``, ``--out`` and ``--shots`` override the
corresponding config values; for ``visualize`` the seed is the raw episode
seed to render (default: eval episode 0 of the config seed).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Optional

from .checkpoint import CheckpointError, apply_checkpoint, load_checkpoint, \
    save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .episodes import GenerationError, derive_seed, generate_episode
from .evaluation import eval_gen_config, run_eval
from .gradcheck import TOLERANCE, run_suite
from .metrics import report_csv, report_summary
from .scoring import Ablation
from .training import EVAL_STREAM, NumericError, init_model, make_eval_episode, \
    run_training
from .visualize import write_episode_files

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5

CHECKPOINT_EVERY = 500

ABLATION_ROWS = (
    ("baseline", Ablation(use_qs=False, use_ts=False)),
    ("qs_only", Ablation(use_qs=True, use_ts=False)),
    ("ts_only", Ablation(use_qs=False, use_ts=True)),
    ("qs_ts", Ablation(use_qs=True, use_ts=True)),
)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None and args.command != "visualize":
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.shots is not None:
        cfg = replace(cfg, shots=args.shots)
    return cfg


def _load_model(cfg: RunConfig, checkpoint_path: str):
    params = init_model(cfg.seed)
    loaded = load_checkpoint(checkpoint_path)
    apply_checkpoint(params.named_parameters(), loaded)
    return params


def cmd_gen(args) -> int:
    from .episodes import save_episodes
    cfg = _load_cfg(args)
    gen_cfg = eval_gen_config(cfg)
    episodes = [make_eval_episode(gen_cfg, cfg.seed, i)
                for i in range(cfg.eval_episodes)]
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "episodes.tbse")
    save_episodes(path, episodes, cfg.image_size, cfg.shots)
    print(f"wrote {len(episodes)} episodes to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.out_dir, exist_ok=True)

    def on_checkpoint(state, step):
        path = os.path.join(cfg.out_dir, f"checkpoint_step_{step:06d}.tbsc")
        save_checkpoint(path, {n: p.data for n, p in
                               state.params.named_parameters().items()})

    result = run_training(
        run_seed=cfg.seed, fold_id=cfg.fold, steps=cfg.steps, batch=cfg.batch,
        lr=cfg.lr, shots=cfg.shots, difficulty_weights=cfg.difficulty_weights,
        ablation=Ablation(use_qs=cfg.use_qs, use_ts=cfg.use_ts),
        checkpoint_every=CHECKPOINT_EVERY, on_checkpoint=on_checkpoint)

    final = os.path.join(cfg.out_dir, "checkpoint.tbsc")
    save_checkpoint(final, {n: p.data for n, p in
                            result.state.params.named_parameters().items()})
    log_path = os.path.join(cfg.out_dir, "loss_log.csv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in result.loss_log:
            fh.write(f"{step},{loss:.6f}\n")
    print(f"trained {cfg.steps} steps; checkpoint at {final}, "
          f"loss log at {log_path}")
    return EXIT_OK


def _write_eval(cfg: RunConfig, report, signature: str, suffix: str) -> None:
    tag = f"_{suffix}" if suffix else ""
    with open(os.path.join(cfg.out_dir, f"metrics{tag}.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(report_csv(report))
    with open(os.path.join(cfg.out_dir, f"summary{tag}.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report_summary(report))
        fh.write(f"episode_seed_signature: {signature}\n")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    if args.checkpoint is None:
        raise ConfigError("eval requires --checkpoint")
    params = _load_model(cfg, args.checkpoint)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if not args.ablation:
        report, signature = run_eval(params, cfg)
        _write_eval(cfg, report, signature, "")
        print(report_summary(report), end="")
        return EXIT_OK

    signatures = {}
    for name, ablation in ABLATION_ROWS:
        report, signature = run_eval(params, cfg, ablation=ablation)
        signatures[name] = signature
        _write_eval(cfg, report, signature, name)
        fr = report.per_fold[cfg.fold]
        miou_txt = "absent" if fr.miou is None else f"{fr.miou:.4f}"
        print(f"{name}: miou={miou_txt} fb_iou={fr.fb_iou:.4f}")
    if len(set(signatures.values())) != 1:
        raise AssertionError("ablation rows saw different episode seeds")
    meta = os.path.join(cfg.out_dir, "ablation_meta.txt")
    with open(meta, "w", encoding="utf-8") as fh:
        for name, sig in signatures.items():
            fh.write(f"{name}: {sig}\n")
        fh.write("identical_episode_seeds: true\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    reports = run_suite(seed=cfg.seed)
    failed = []
    for rep in reports:
        status = "pass" if rep.passed else "FAIL"
        print(f"{rep.name:16s} max_rel_err={rep.max_rel_err:.3e} "
              f"probes={rep.probes} worst={rep.worst_probe or '-'} [{status}]")
        if not rep.passed:
            failed.append(rep)
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_err)
        print(f"gradcheck FAILED: op {worst.name} at {worst.worst_probe} "
              f"(rel err {worst.max_rel_err:.3e} >= {TOLERANCE})",
              file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"gradcheck passed: {len(reports)} checks below {TOLERANCE}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _load_cfg(args)
    if args.checkpoint is None:
        raise ConfigError("visualize requires --checkpoint")
    params = _load_model(cfg, args.checkpoint)
    episode_seed = args.seed if args.seed is not None \
        else derive_seed(cfg.seed, EVAL_STREAM, 0)
    episode = generate_episode(eval_gen_config(cfg), episode_seed)
    written = write_episode_files(
        cfg.out_dir, params, episode,
        Ablation(use_qs=cfg.use_qs, use_ts=cfg.use_ts))
    print(f"wrote {len(written)} files to {cfg.out_dir}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbs",
        description="few-shot segmentation with background suppression")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--ablation", action="store_true")
        p.add_argument("--shots", type=int, default=None)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GenerationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
