"""Command-line entry point: ``shopagent <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .actions import STRATEGIES, Decoding
from .bc import generate_demos, save_demos
from .environment import GoalStream, build_vocabulary, generate_catalog
from .errors import CollectionAborted, ContractViolation, TrainingAborted
from .evaluation import StepTrace, compare_decodings, evaluate, format_comparison, run_episodes
from .model import PolicyModel, load_checkpoint
from .pipeline import ConfigError, RunConfig, build_world, eval_goals, phase_seed, read_config, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--decoding", choices=STRATEGIES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--obs-history", type=int, choices=(1, 2), dest="obs_history")
    p.add_argument("--category")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shopagent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-catalog", help="generate a catalog and its vocabulary")
    _common(p)
    p.add_argument("--n-products", type=int, dest="n_products")
    p.add_argument("--n-categories", type=int, dest="n_categories")

    p = sub.add_parser("gen-demos", help="write oracle demonstrations")
    _common(p)
    p.add_argument("--n", type=int, dest="n_demos")

    for name, pipeline in (("train-bc", "bc"), ("train-ppo", "ppo"),
                           ("train-hybrid", "hybrid"), ("train-uda", "uda")):
        p = sub.add_parser(name, help=f"run the {pipeline} pipeline")
        _common(p)
        p.add_argument("--workers", type=int, dest="n_workers")
        p.add_argument("--init-checkpoint", dest="init_checkpoint")
        p.add_argument("--steps", type=int, dest="total_env_steps")
        p.set_defaults(pipeline=pipeline)

    for name in ("eval", "compare-decodings"):
        p = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval"
                           else "evaluate a checkpoint under all four decodings")
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--episodes", type=int, dest="eval_episodes")
        p.add_argument("--runs", type=int, dest="eval_runs")

    p = sub.add_parser("inspect-episode", help="replay one episode with action distributions")
    _common(p)
    p.add_argument("--checkpoint", help="defaults to a freshly initialised model")
    p.add_argument("--goal", type=int, default=0, help="index into the eval goal set")
    return parser


_OVERRIDES = ("seed", "decoding", "epsilon", "top_p", "obs_history", "category", "n_products",
              "n_categories", "n_demos", "n_workers", "init_checkpoint", "total_env_steps",
              "eval_episodes", "eval_runs", "pipeline")


def config_from_args(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    changes = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    if args.out:
        changes["out_dir"] = args.out
    cfg = dataclasses.replace(cfg, **changes)
    cfg.validate()
    return cfg


def _load_model(args, cfg: RunConfig):
    catalog, vocab = build_world(cfg)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        model = load_checkpoint(ckpt, vocab)
    else:
        model = PolicyModel.initialize(vocab, phase_seed(cfg.seed, "init"), hidden=cfg.hidden)
    return catalog, model


def cmd_gen_catalog(args, cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog = generate_catalog(cfg.catalog_seed, cfg.n_products, cfg.n_categories)
    catalog.save(out / "catalog.jsonl")
    build_vocabulary(catalog).save(out / "vocab.txt")
    print(f"{len(catalog)} products in {len(catalog.categories)} categories -> {out}")


def cmd_gen_demos(args, cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog, _ = build_world(cfg)
    demos = generate_demos(catalog, cfg.n_demos, phase_seed(cfg.seed, "demos"),
                           category=cfg.category, horizon=cfg.horizon)
    save_demos(demos, out / "demos.jsonl")
    mean = np.mean([d.final_reward for d in demos])
    print(f"{len(demos)} demonstrations, mean reward {mean:.3f} -> {out / 'demos.jsonl'}")


def cmd_train(args, cfg: RunConfig) -> None:
    res = run_pipeline(cfg)
    if res.bc_losses:
        print("bc epoch losses: " + " ".join(f"{x:.4f}" for x in res.bc_losses))
    if res.report:
        print(res.report.summary())
    print(f"artifacts in {res.out_dir}")


def cmd_eval(args, cfg: RunConfig) -> None:
    catalog, model = _load_model(args, cfg)
    goals = eval_goals(catalog, cfg)
    report = evaluate(model, catalog, goals, cfg.eval_decoding(), cfg.eval_runs, cfg.eval_seed,
                      obs_history=cfg.obs_history, horizon=cfg.horizon)
    report.write(cfg.out_dir)
    print(report.summary())


def cmd_compare(args, cfg: RunConfig) -> None:
    catalog, model = _load_model(args, cfg)
    reports = compare_decodings(model, catalog, eval_goals(catalog, cfg), cfg.eval_runs,
                                cfg.eval_seed, epsilon=cfg.epsilon, top_p=cfg.top_p,
                                obs_history=cfg.obs_history, horizon=cfg.horizon)
    for r in reports:
        r.write(cfg.out_dir, stem="decoding_comparison")
    print(format_comparison(reports))


def cmd_inspect(args, cfg: RunConfig) -> None:
    catalog, model = _load_model(args, cfg)
    goal = GoalStream(catalog, cfg.eval_seed, "eval").take(args.goal + 1)[-1]
    print("goal: " + " ".join(goal.goal_text))
    step = 0

    def show(_, st: StepTrace):
        nonlocal step
        step += 1
        print(f"\n[{step}] {st.observation.page_kind.value}: {' '.join(st.observation.text)}")
        for i, (a, p) in enumerate(zip(st.dist.actions, st.dist.probs)):
            mark = "*" if i == st.chosen else " "
            print(f"  {mark} {p:.4f}  {a.kind.value:<12} {' '.join(a.surface)}")
        print(f"  sum {st.dist.probs.sum():.12f}  reward {st.reward}")

    rewards = run_episodes(model, catalog, [goal], cfg.eval_decoding(), cfg.eval_seed,
                           obs_history=cfg.obs_history, horizon=cfg.horizon, trace=show)
    print(f"\nfinal reward {rewards[0]}")


COMMANDS = {
    "gen-catalog": cmd_gen_catalog,
    "gen-demos": cmd_gen_demos,
    "train-bc": cmd_train,
    "train-ppo": cmd_train,
    "train-hybrid": cmd_train,
    "train-uda": cmd_train,
    "eval": cmd_eval,
    "compare-decodings": cmd_compare,
    "inspect-episode": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, CollectionAborted, ContractViolation, ValueError, OSError) as exc:
        phase = getattr(exc, "phase", None)
        where = f" in phase {phase}" if phase else ""
        print(f"aborted{where}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
