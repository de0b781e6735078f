"""Command-line entry point: train, attack-sweep, rl-train, detect, report."""
from __future__ import annotations

import argparse
import functools
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import AttackProfile
from .config import ConfigError, ExperimentConfig, config_hash, config_to_dict, parse_config, SCHEMA_VERSION
from .datasets import BUNDLED_MNIST, DataFormatError
from .defense import (
    PolicyFormatError,
    QTable,
    greedy_rollout,
    load_policy,
    save_policy,
    train_agent,
)
from .environment import FLEnvironment, PolicyReplay, ToyEnvironment, diverged, episode_seed, summarize
from .experiment import build_task, fl_for_seed, privacy_params
from .federated import ConfigError as FLConfigError, RoundError, run_training
from .records import (
    DETECT_HEADER,
    REWARDS_HEADER,
    ROUNDS_SCHEMA,
    SWEEP_HEADER,
    SchemaError,
    read_table,
    render_csv,
    write_atomic,
    write_rounds,
)

log = logging.getLogger("dpfedsim")

OUT_ENV = "DPFEDSIM_OUT"


def output_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_files(cfg: ExperimentConfig) -> list[Path]:
    ds = cfg.dataset
    if ds.kind == "mnist":
        paths = [ds.images, ds.labels, ds.test_images, ds.test_labels]
        found = [Path(p) for p in paths if p]
        return found or list(BUNDLED_MNIST)
    if ds.kind == "power_consumption":
        return [Path(ds.path)]
    return []


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, seed: int,
                   outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_schema_version": SCHEMA_VERSION,
        "rounds_schema": ROUNDS_SCHEMA,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in input_files(cfg)},
        "outputs": sorted(outputs),
        "config": config_to_dict(cfg),
    }
    if extra:
        manifest.update(extra)
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    if seed < 0:
        raise ConfigError("--seed", "must be non-negative")
    return replace(cfg, seed=seed, fl=replace(cfg.fl, master_seed=seed))


# --- train -------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    spec, data = build_task(cfg)
    attack = cfg.attack if cfg.attack.enabled else None
    result = run_training(spec, data, cfg.fl, privacy_params(cfg), cfg.privacy.budget, attack)
    hist = result.history
    write_rounds(out / "rounds.csv", hist.records)
    np.savez(out / "model.npz", values=result.params.values,
             layer_sizes=np.asarray(spec.layer_sizes), task=np.asarray(spec.task))
    write_manifest(out, cfg, "train", cfg.seed, ["rounds.csv", "model.npz"],
                   {"stop_reason": hist.stop_reason, "rounds_completed": len(hist.records)})
    if hist.records:
        last = hist.records[-1]
        loss, acc = last.test_loss, last.test_accuracy
    else:
        loss, acc = hist.initial_loss, hist.initial_accuracy
    print(f"rounds={len(hist.records)} stop={hist.stop_reason} "
          f"test_loss={loss:.6g} test_accuracy={acc:.4f}")
    return 0


# --- attack sweep ------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _task(cfg: ExperimentConfig, seed: int):
    return build_task(cfg, seed)


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[int, float, float, str]]:
    """(seed, epsilon, gamma, kind) in output order, one no-DP row per seed."""
    cells = []
    for seed in cfg.sweep.seeds:
        if math.inf not in cfg.sweep.epsilons:
            cells.append((seed, math.inf, 0.0, "baseline"))
        for eps in cfg.sweep.epsilons:
            for gamma in cfg.sweep.gammas:
                kind = "baseline" if math.isinf(eps) else "cell"
                cells.append((seed, eps, gamma, kind))
    return cells


def cell_name(seed: int, eps: float, gamma: float) -> str:
    return f"seed{seed}_eps{eps!r}_gamma{gamma!r}"


def run_cell(cfg: ExperimentConfig, cell, cells_dir: str) -> tuple:
    seed, eps, gamma, kind = cell
    records = []
    try:
        spec, data = _task(cfg, seed)
        attack = AttackProfile(gamma=gamma, enabled=gamma > 0)
        try:
            res = run_training(spec, data, fl_for_seed(cfg, seed), privacy_params(cfg, eps),
                               cfg.privacy.budget, attack, on_round=records.append)
        except RoundError as exc:
            if not diverged(exc):
                raise
            # the model blew up: keep the rounds that finished and report an unbounded loss
            write_rounds(Path(cells_dir) / f"{cell_name(seed, eps, gamma)}.csv", records)
            spent = records[-1].delta_spent if records else 0.0
            return (seed, eps, gamma, kind, len(records), math.inf, math.nan, spent, "diverged",
                    "diverged")
        hist = res.history
        write_rounds(Path(cells_dir) / f"{cell_name(seed, eps, gamma)}.csv", hist.records)
        if hist.records:
            last = hist.records[-1]
            loss, acc, spent = last.test_loss, last.test_accuracy, last.delta_spent
        else:
            loss, acc, spent = hist.initial_loss, hist.initial_accuracy, 0.0
        return (seed, eps, gamma, kind, len(hist.records), loss, acc, spent, hist.stop_reason, "ok")
    except Exception as exc:  # a failed cell is recorded, the sweep carries on
        log.error("cell seed=%s eps=%s gamma=%s failed: %s", seed, eps, gamma, exc)
        msg = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        return (seed, eps, gamma, kind, 0, math.nan, math.nan, math.nan, "", msg)


def cmd_attack_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    cells = sweep_cells(cfg)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, [cfg] * len(cells), cells, [str(cells_dir)] * len(cells)))
    else:
        rows = [run_cell(cfg, c, str(cells_dir)) for c in cells]
    write_atomic(out / "sweep.csv", render_csv(SWEEP_HEADER, rows))
    write_manifest(out, cfg, "attack-sweep", cfg.seed, ["sweep.csv", "cells/"],
                   {"cells": len(rows)})
    # a diverged cell is a result (the noise destroyed the model), not a harness failure
    failed = sum(1 for r in rows if r[-1].startswith("error"))
    blown = sum(1 for r in rows if r[-1] == "diverged")
    print(f"cells={len(rows)} failed={failed} diverged={blown}")
    for r in rows:
        print(f"  seed={r[0]} eps={r[1]:g} gamma={r[2]:g} loss={r[5]:.6g} acc={r[6]:.4f} {r[-1]}")
    return 0 if failed == 0 else 3


# --- rl-train ----------------------------------------------------------------

def make_environment(cfg: ExperimentConfig):
    rl = cfg.rl
    if rl.environment == "toy":
        return ToyEnvironment(rounds=cfg.fl.max_rounds)
    spec, data = build_task(cfg)
    attack = cfg.attack if cfg.attack.enabled and rl.train_under_attack else None
    return FLEnvironment(spec, data, cfg.fl, privacy_params(cfg), cfg.privacy.budget,
                         attack, fixed_seed=rl.fixed_seed)


def cmd_rl_train(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.rl is None:
        raise ConfigError("rl", "rl-train needs an rl section")
    agent_cfg = cfg.rl.agent
    env = make_environment(cfg)
    rows = []

    def progress(ep, p, total):
        rows.append((ep, p, total))
        if (ep + 1) % 25 == 0:
            log.info("episode %d explore=%.3f reward=%.6g", ep + 1, p, total)

    result = train_agent(env, agent_cfg, seed=cfg.seed, on_episode=progress)
    out.mkdir(parents=True, exist_ok=True)
    save_policy(out / "policy.txt", result.q, result.baseline, agent_cfg)
    write_atomic(out / "rewards.csv", render_csv(REWARDS_HEADER, rows))
    path = greedy_rollout(env, result.q, agent_cfg, agent_cfg.episodes)
    write_manifest(out, cfg, "rl-train", cfg.seed, ["policy.txt", "rewards.csv"],
                   {"greedy_eps_indices": path})
    grid = agent_cfg.eps_grid
    print(f"episodes={len(rows)} final_reward={rows[-1][2]:.6g} "
          f"baseline_states={len(result.baseline)}")
    print("greedy epsilon path: " + " ".join(f"{grid[i]:.3g}" for i in path))
    return 0


# --- detect ------------------------------------------------------------------

def replay(cfg: ExperimentConfig, spec, data, q: QTable, baseline, seed: int,
           attack: AttackProfile | None, schedule: list[int] | None = None) -> PolicyReplay:
    hook = PolicyReplay(q, cfg.rl.agent, baseline, cfg.detect.margin, schedule=schedule)
    fl = fl_for_seed(cfg, seed)
    if schedule is not None:
        # an attacked replay cannot outlast the clean run whose schedule it follows
        fl = replace(fl, max_rounds=min(fl.max_rounds, len(schedule)))
    try:
        run_training(spec, data, fl, privacy_params(cfg), cfg.privacy.budget, attack, agent=hook)
    except RoundError as exc:
        if not diverged(exc):
            raise
        hook.diverged(exc.round)
    return hook


def detection_runs(cfg: ExperimentConfig, q: QTable, baseline):
    """Clean replays of the greedy policy, then attacked replays on the same seeds and schedule."""
    spec, data = build_task(cfg)
    attack = cfg.attack if cfg.attack.active else None
    first = cfg.rl.agent.episodes
    runs = []
    for r in range(cfg.detect.eval_runs):
        seed = episode_seed(cfg.seed, first + r)
        clean = replay(cfg, spec, data, q, baseline, seed, None)
        runs.append(("clean", r, seed, clean.rows))
        if attack is not None:
            hit = replay(cfg, spec, data, q, baseline, seed, attack, schedule=clean.chosen)
            runs.append(("attacked", r, seed, hit.rows))
    return runs


def cmd_detect(cfg: ExperimentConfig, out: Path, policy_path: Path) -> int:
    if cfg.rl is None:
        raise ConfigError("rl", "detect needs the rl section the policy was trained with")
    q, baseline, meta = load_policy(policy_path)
    if "eps_grid" in meta and meta["eps_grid"] != cfg.rl.agent.eps_grid:
        raise ConfigError("rl.eps_grid", "differs from the grid stored in the policy file")
    runs = detection_runs(cfg, q, baseline)
    rows = []
    for condition, r, seed, drows in runs:
        for d in drows:
            rows.append((condition, r, seed, d.round, d.epsilon, d.state.m_bin, d.state.f_bin,
                         d.state.eps_idx, d.baseline, d.observed, d.verdict.value))
    write_atomic(out / "detect.csv", render_csv(DETECT_HEADER, rows))
    summary = {}
    for condition in ("clean", "attacked"):
        s = summarize([d for c, _, _, dr in runs if c == condition for d in dr])
        summary[condition] = s
        if s.judged or s.no_baseline:
            label = "false_positive_rate" if condition == "clean" else "detection_rate"
            print(f"{condition}: {label}={s.rate:.4f} flagged={s.flagged} "
                  f"judged={s.judged} no_baseline={s.no_baseline}")
    write_manifest(out, cfg, "detect", cfg.seed, ["detect.csv"], {
        "policy": str(policy_path), "policy_sha256": file_digest(policy_path),
        "summary": {c: {"flagged": s.flagged, "clear": s.clear, "no_baseline": s.no_baseline}
                    for c, s in summary.items()},
    })
    return 0


# --- report ------------------------------------------------------------------

def cmd_report(paths: list[str]) -> int:
    status = 0
    for p in paths:
        try:
            kind, rows = read_table(p)
        except (SchemaError, OSError) as exc:
            print(f"{p}: REJECTED {exc}", file=sys.stderr)
            status = 2
            continue
        line = f"{p}: {kind} schema, {len(rows)} rows"
        if kind == "rounds" and rows:
            last = rows[-1]
            line += f"; final test_loss={last['test_loss']} test_accuracy={last['test_accuracy']}"
        elif kind == "detect":
            for cond in ("clean", "attacked"):
                sel = [r for r in rows if r["condition"] == cond and r["verdict"] != "no_baseline"]
                if sel:
                    flagged = sum(r["verdict"] == "attack_suspected" for r in sel)
                    line += f"; {cond} flagged {flagged}/{len(sel)}"
        elif kind == "rewards" and rows:
            line += f"; last accumulated_reward={rows[-1]['accumulated_reward']}"
        print(line)
    return status


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpfedsim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", required=True, help="YAML or JSON experiment file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
        return p

    common(sub.add_parser("train", help="one federated training run"))
    common(sub.add_parser("attack-sweep", help="grid over epsilon and attack gamma"), jobs=True)
    common(sub.add_parser("rl-train", help="train the privacy-selection agent"))
    p = common(sub.add_parser("detect", help="replay a trained policy and flag attacks"))
    p.add_argument("--policy", help="policy file (default <out>/../rl-train/policy.txt)")
    p = sub.add_parser("report", help="validate and summarise CSV outputs")
    p.add_argument("files", nargs="+")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args.files)
    try:
        cfg = with_seed(parse_config(args.config), args.seed)
        out = output_dir(args, cfg, args.command)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "attack-sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs", "must be positive")
            return cmd_attack_sweep(cfg, out, args.jobs)
        if args.command == "rl-train":
            return cmd_rl_train(cfg, out)
        if args.command == "detect":
            policy = Path(args.policy) if args.policy else out.parent / "rl-train" / "policy.txt"
            return cmd_detect(cfg, out, policy)
    except (ConfigError, FLConfigError, DataFormatError, PolicyFormatError, RoundError,
            OSError, ValueError) as exc:
        print(f"dpfedsim {args.command}: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
