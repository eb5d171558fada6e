"""Experiment pipelines: bc, ppo, hybrid (bc then ppo) and uda.

Every phase draws from its own generator derived from the run seed, so a
hybrid run equals a bc run followed by a ppo run resumed from the bc
checkpoint.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .actions import STRATEGIES, Decoding
from .bc import BCConfig, filter_by_category, generate_demos, load_demos, save_demos, train_bc
from .environment import DEFAULT_HORIZON, Catalog, GoalStream, build_vocabulary, generate_catalog
from .errors import TrainingAborted
from .evaluation import EvalReport, evaluate
from .model import HIDDEN, PolicyModel, load_checkpoint, save_checkpoint
from .optim import AdamState
from .ppo import PPOConfig, append_stats_row, ppo_update
from .rollout import EnvSession, Worker, WorkerPool, collect, refresh_snapshot

log = logging.getLogger(__name__)

PIPELINES = ("bc", "ppo", "hybrid", "uda")
CURVE_COLUMNS = ("env_steps", "score", "success_rate", "policy_loss", "value_loss", "entropy",
                 "clip_fraction")


class ConfigError(ValueError):
    pass


def phase_rng(seed: int, phase: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(phase.encode())])


def phase_seed(seed: int, phase: str) -> int:
    return int(phase_rng(seed, phase).integers(2**31))


@dataclass
class RunConfig:
    pipeline: str = "ppo"
    seed: int = 0
    catalog_seed: int = 1
    n_products: int = 50
    n_categories: int = 5
    n_demos: int = 200
    category: str | None = None
    total_env_steps: int = 50_000
    horizon: int = DEFAULT_HORIZON
    hidden: int = HIDDEN
    obs_history: int = 2
    n_workers: int = 1
    collect_decoding: str = "sample"
    decoding: str = "egreedy"
    epsilon: float = 0.2
    top_p: float = 0.8
    eval_seed: int = 10_000
    eval_episodes: int = 200
    eval_runs: int = 4
    curve_every: int = 10_000
    curve_episodes: int = 50
    init_checkpoint: str | None = None
    out_dir: str = "runs/default"
    bc: BCConfig = field(default_factory=BCConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.pipeline == "uda" and not self.category:
            raise ConfigError("the uda pipeline needs a category")
        if self.pipeline in ("hybrid", "uda") and self.n_demos < 1:
            raise ConfigError(f"the {self.pipeline} pipeline needs a demonstration set")
        if self.obs_history not in (1, 2):
            raise ConfigError("obs_history must be 1 or 2")
        for name in (self.decoding, self.collect_decoding):
            if name not in STRATEGIES:
                raise ConfigError(f"unknown decoding {name!r}")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")

    def eval_decoding(self) -> Decoding:
        return Decoding(self.decoding, self.epsilon, self.top_p)


# --- config file: flat "key = value" lines, nested sections as "bc.x" / "ppo.x" ----------

def _coerce(kind, raw: str, key: str):
    text = raw.strip()
    if kind in ("str | None", "Optional[str]"):
        return None if text.lower() in ("", "none") else text
    try:
        if kind == "int":
            return int(float(text)) if "e" in text.lower() else int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return text


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__
            for f in dataclasses.fields(cls)}


def parse_config(text: str) -> RunConfig:
    top, sections = {}, {"bc": {}, "ppo": {}}
    types = {"": _field_types(RunConfig), "bc": _field_types(BCConfig),
             "ppo": _field_types(PPOConfig)}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if section not in types or name not in types[section] or name in ("bc", "ppo"):
            raise ConfigError(f"line {n}: unknown key {key!r}")
        target = top if not section else sections[section]
        target[name] = _coerce(types[section][name], value, key)
    try:
        cfg = RunConfig(**top, bc=BCConfig(**sections["bc"]), ppo=PPOConfig(**sections["ppo"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def read_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in ("bc", "ppo"):
            continue
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    for section in ("bc", "ppo"):
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{section}.{f.name} = {getattr(sub, f.name)!r}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


# --- PPO phase -----------------------------------------------------------------------------

@dataclass
class PPOResult:
    model: PolicyModel
    curve: list[dict]
    updates: int
    env_steps: int


def make_pool(n_workers: int) -> WorkerPool:
    return WorkerPool([Worker(f"worker-{i}") for i in range(n_workers)])


def train_ppo(model: PolicyModel, catalog: Catalog, cfg: PPOConfig, total_env_steps: int,
              seed: int, *, pool: WorkerPool | None = None, n_workers: int = 1,
              collect_decoding: Decoding = Decoding("sample"), obs_history: int = 2,
              horizon: int = DEFAULT_HORIZON, goal_category: str | None = None,
              stats_path: str | Path | None = None,
              curve_every: int = 0, curve_eval: Callable[[PolicyModel], EvalReport] | None = None,
              ) -> PPOResult:
    rng = phase_rng(seed, "ppo")
    goals = GoalStream(catalog, phase_seed(seed, "ppo-goals"), "train", goal_category)
    sessions = [EnvSession(catalog, goals, horizon=horizon) for _ in range(cfg.n_envs)]
    own_pool = pool is None
    pool = pool or make_pool(n_workers)
    n_updates = math.ceil(total_env_steps / cfg.transitions_per_update)
    state = AdamState()
    curve, finished, env_steps = [], [], 0
    next_curve = curve_every
    try:
        for u in range(n_updates):
            refresh_snapshot(pool, model)
            buf = collect(pool, model, sessions, cfg.steps_per_env, collect_decoding, rng,
                          obs_history=obs_history)
            try:
                model, stats, state = ppo_update(model, buf, cfg, rng, state)
            except TrainingAborted as exc:
                exc.phase = exc.phase or "ppo"
                raise
            env_steps += len(buf)
            finished += buf.episode_rewards
            row = {
                "update": u + 1, "env_steps": env_steps,
                "mean_episode_reward": float(np.mean(buf.episode_rewards)) if buf.episode_rewards else 0.0,
                "score_so_far": 100.0 * float(np.mean(finished)) if finished else 0.0,
                "policy_loss": stats.policy_loss, "value_loss": stats.value_loss,
                "entropy": stats.entropy, "clip_fraction": stats.clip_fraction,
                "approx_kl": stats.approx_kl,
            }
            log.info("update %d steps %d reward %.3f", u + 1, env_steps, row["mean_episode_reward"])
            if stats_path:
                append_stats_row(stats_path, row)
            if curve_eval and curve_every and env_steps >= next_curve:
                rep = curve_eval(model)
                curve.append({"env_steps": env_steps, "score": rep.score,
                              "success_rate": rep.success_rate,
                              **{k: row[k] for k in CURVE_COLUMNS[3:]}})
                next_curve += curve_every
    finally:
        if own_pool:
            pool.close()
    return PPOResult(model, curve, n_updates, env_steps)


# --- full pipeline ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    model: PolicyModel
    report: EvalReport | None
    bc_losses: list[float]
    curve: list[dict]
    out_dir: Path


def build_world(cfg: RunConfig):
    catalog = generate_catalog(cfg.catalog_seed, cfg.n_products, cfg.n_categories)
    return catalog, build_vocabulary(catalog)


def eval_goals(catalog: Catalog, cfg: RunConfig, n: int | None = None):
    return GoalStream(catalog, cfg.eval_seed, "eval").take(n or cfg.eval_episodes)


def write_curve(rows: list[dict], path: Path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_COLUMNS})


def run_pipeline(cfg: RunConfig, *, evaluate_final: bool = True,
                 pool: WorkerPool | None = None) -> PipelineResult:
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    catalog, vocab = build_world(cfg)
    catalog.save(out / "catalog.jsonl")
    vocab.save(out / "vocab.txt")

    if cfg.init_checkpoint:
        model = load_checkpoint(cfg.init_checkpoint, vocab)
    else:
        model = PolicyModel.initialize(vocab, phase_seed(cfg.seed, "init"), hidden=cfg.hidden)

    bc_losses: list[float] = []
    if cfg.pipeline in ("bc", "hybrid", "uda"):
        demos_path = out / "demos.jsonl"
        demos = generate_demos(catalog, cfg.n_demos, phase_seed(cfg.seed, "demos"),
                               horizon=cfg.horizon)
        if cfg.category:
            demos = filter_by_category(demos, cfg.category)
            if not demos:
                raise ConfigError(f"no demonstrations for category {cfg.category!r}")
        save_demos(demos, demos_path)
        try:
            res = train_bc(model, demos, cfg.bc, phase_seed(cfg.seed, "bc"),
                           obs_history=cfg.obs_history)
        except TrainingAborted as exc:
            exc.phase = "bc"
            raise
        model, bc_losses = res.model, res.epoch_losses
        save_checkpoint(model, out / "bc.ckpt")

    curve: list[dict] = []
    if cfg.pipeline in ("ppo", "hybrid", "uda"):
        stats_path = out / "train_stats.csv"
        stats_path.unlink(missing_ok=True)
        curve_goals = eval_goals(catalog, cfg, cfg.curve_episodes)

        def curve_eval(m):
            return evaluate(m, catalog, curve_goals, cfg.eval_decoding(), runs=1,
                            seed=cfg.eval_seed, obs_history=cfg.obs_history, horizon=cfg.horizon)

        res = train_ppo(model, catalog, cfg.ppo, cfg.total_env_steps, cfg.seed, pool=pool,
                        n_workers=cfg.n_workers,
                        collect_decoding=Decoding(cfg.collect_decoding, cfg.epsilon, cfg.top_p),
                        obs_history=cfg.obs_history, horizon=cfg.horizon,
                        stats_path=stats_path, curve_every=cfg.curve_every,
                        curve_eval=curve_eval if cfg.curve_episodes > 0 else None)
        model, curve = res.model, res.curve
        write_curve(curve, out / "learning_curve.csv")

    save_checkpoint(model, out / "final.ckpt")
    report = None
    if evaluate_final and cfg.eval_episodes > 0:
        report = evaluate(model, catalog, eval_goals(catalog, cfg), cfg.eval_decoding(),
                          runs=cfg.eval_runs, seed=cfg.eval_seed, obs_history=cfg.obs_history,
                          horizon=cfg.horizon)
        (out / "eval_report.jsonl").unlink(missing_ok=True)
        report.write(out)
    return PipelineResult(model, report, bc_losses, curve, out)


def load_run_demos(out_dir: str | Path, catalog: Catalog, horizon: int = DEFAULT_HORIZON):
    return load_demos(Path(out_dir) / "demos.jsonl", catalog, horizon=horizon)
