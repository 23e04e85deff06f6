"""Command-line entry point: ``patchwork <command> --config FILE``.

Config files are ``key = value`` lines; ``#`` starts a comment.  The
``PATCHWORK_CONFIG`` environment variable, when set, replaces the
``--config`` path.  Exit codes: 0 success, 2 config error, 3 failed check.
"""

from __future__ import annotations

import argparse
import filecmp
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import synthetic_data as sd
from .attention import ActionSpace
from .latency import FrontierRow, VariantSpec, count_flops, frontier, frontier_csv, latency_profile, model_layers
from .stream_model import StreamModel, oracle_check
from .trainer import (ConfigError, TrainerConfig, eval_episode, load_checkpoint, save_checkpoint,
                      train_three_stage)

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3
CONFIG_ENV = "PATCHWORK_CONFIG"

DEFAULT_VARIANTS = ("sf_k1=single, sf_k2_d1=single/K=2/d=1, sf_k4=single/K=4, sf_k4_d3=single/K=4/d=3, "
                    "sf_k8_d7=single/K=8/d=7, pw_scanning=patchwork/scanning, pw_random=patchwork/random, "
                    "pw_dqn=patchwork/dqn")


@dataclass
class RunConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    out_dir: str = "runs/default"
    checkpoint: str = ""  # default: <out_dir>/model.pwt
    data_episodes: int = 8
    data_scenarios: str = "multi,large,stay,pan-scan"
    heldout_episodes: int = 200
    oracle_scenes: int = 4
    oracle_scans: int = 0  # 0 = number of layers + 2
    variants: str = DEFAULT_VARIANTS

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.pwt"

    def resolved(self) -> str:
        lines = []
        for f in fields(TrainerConfig):
            lines.append(f"{f.name} = {getattr(self.trainer, f.name)}")
        for f in fields(self):
            if f.name != "trainer":
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return type(like)(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {type(like).__name__}") from None


def parse_config(text: str) -> RunConfig:
    """Unknown keys and malformed lines are errors."""
    run_keys = {f.name: f for f in fields(RunConfig) if f.name != "trainer"}
    trainer_defaults = TrainerConfig.__new__(TrainerConfig)
    for f in fields(TrainerConfig):
        setattr(trainer_defaults, f.name, f.default)
    tkw, rkw = {}, {}
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in TrainerConfig.keys():
            tkw[key] = _coerce(value, getattr(trainer_defaults, key))
        elif key in run_keys:
            rkw[key] = _coerce(value, run_keys[key].default) if key != "variants" else value
        else:
            raise ConfigError(f"line {num}: unknown key {key!r}")
    cfg = RunConfig(trainer=TrainerConfig(**tkw), **rkw)
    if cfg.heldout_episodes < 1 or cfg.data_episodes < 0 or cfg.oracle_scenes < 1:
        raise ConfigError("episode counts must be positive")
    parse_variants(cfg.variants)
    return cfg


def load_config(path) -> RunConfig:
    path = os.environ.get(CONFIG_ENV) or path
    if not path:
        return RunConfig()
    try:
        return parse_config(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def parse_variants(text: str):
    """``id=kind[/K=k][/d=d][/depth=m][/flip][/res=s]`` or ``id=patchwork/<policy>``, comma separated."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"variant {item!r} needs an id")
        vid, spec = item.split("=", 1)
        parts = spec.split("/")
        kind, opts = parts[0], parts[1:]
        if kind == "patchwork":
            if len(opts) != 1 or opts[0] not in ev.EVAL_POLICIES:
                raise ConfigError(f"variant {vid}: patchwork needs one of {ev.EVAL_POLICIES}")
            out.append((vid, "patchwork", opts[0], VariantSpec()))
            continue
        if kind != "single":
            raise ConfigError(f"variant {vid}: unknown kind {kind!r}")
        kw = {}
        for o in opts:
            k, _, v = o.partition("=")
            try:
                if k == "K":
                    kw["interval"] = int(v)
                elif k == "d":
                    kw["delay"] = int(v)
                elif k == "depth":
                    kw["depth_multiplier"] = float(v)
                elif k == "res":
                    kw["resolution_scale"] = float(v)
                elif k == "flip" and not v:
                    kw["flip"] = True
                else:
                    raise ConfigError(f"variant {vid}: unknown option {o!r}")
            except ValueError:
                raise ConfigError(f"variant {vid}: bad value in {o!r}") from None
        try:
            out.append((vid, "single", None, VariantSpec(**kw)))
        except ValueError as e:
            raise ConfigError(f"variant {vid}: {e}") from None
    if len({v[0] for v in out}) != len(out):
        raise ConfigError("duplicate variant ids")
    return out


# -- commands ---------------------------------------------------------------------------

def _model(cfg: RunConfig) -> StreamModel:
    return StreamModel(space=cfg.trainer.space, seed=cfg.trainer.seed)


def _trained_model(cfg: RunConfig) -> StreamModel:
    path = cfg.checkpoint_path
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found (run 'train' first)")
    return load_checkpoint(path, _model(cfg))


def cmd_gen_data(cfg: RunConfig, out: Path, jobs=1):
    scen = [s.strip() for s in cfg.data_scenarios.split(",") if s.strip()]
    for s in scen:
        if s not in sd.SCENARIOS + ("pan-scan",):
            raise ConfigError(f"unknown scenario {s!r}")
    manifest = ["index,seed,scenario"]
    frames = cfg.trainer.episode_frames
    for i in range(cfg.data_episodes):
        s = scen[i % len(scen)]
        seed = cfg.trainer.seed * 1000 + i
        if s == "pan-scan":
            ep = sd.pan_scan_episode(seed, frames)
        else:
            ep = sd.moving_shapes_scene(seed, frames, scenario=s)
        sd.save_episode(ep, out / "data" / f"episode_{i:04d}")
        manifest.append(f"{i},{seed},{s}")
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "data" / "manifest.csv").write_text("\n".join(manifest) + "\n")
    return True


def cmd_train(cfg: RunConfig, out: Path, jobs=1):
    model, log = train_three_stage(cfg.trainer, _model(cfg))
    path = out / "model.pwt" if not cfg.checkpoint else cfg.checkpoint_path
    save_checkpoint(path, model)
    (out / "training.csv").write_text(log.to_csv())
    s1 = "\n".join(f"{i},{v:.6f}" for i, v in enumerate(log.stage1_loss))
    (out / "stage1_loss.csv").write_text("step,loss\n" + s1 + "\n")
    return True


def _fmt_rows(header, rows):
    lines = [header]
    for r in rows:
        lines.append(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, out: Path, jobs=1):
    model = _trained_model(cfg)
    n, task = cfg.heldout_episodes, cfg.trainer.task
    rows = ev.policy_table(model, n, task, jobs=jobs, num_frames=cfg.trainer.episode_frames)
    rows.append(("stateless", ev.eval_stateless(model, n, task, jobs=jobs, num_frames=cfg.trainer.episode_frames)))
    (out / "eval.csv").write_text(_fmt_rows("method,metric", rows))
    m = dict(rows)
    return m["dqn"] >= max(m["random"], m["scanning"]) + 2 and min(m["random"], m["scanning"]) > m["single-frame"]


def cmd_ablate_cells(cfg: RunConfig, out: Path, jobs=1):
    model = _trained_model(cfg)
    rows = ev.ablation_table(model, cfg.heldout_episodes, cfg.trainer.task, jobs=jobs,
                             num_frames=cfg.trainer.episode_frames)
    (out / "ablation.csv").write_text(_fmt_rows("policy,cells,metric", rows))
    m = {(p, c): v for p, c, v in rows}
    return all(m[(p, "on")] - m[(p, "off")] >= 5 for p in ("scanning", "dqn"))


def cmd_oracle_check(cfg: RunConfig, out: Path, jobs=1):
    model = _trained_model(cfg)
    lines = ["scene,variant,scan,layer,value"]
    exact = True
    for i in range(cfg.oracle_scenes):
        scene = eval_episode(i, 1).frames[0]
        rep = oracle_check(model, scene, scans=cfg.oracle_scans or None)
        for v, s, layer, d in rep.rows():
            lines.append(f"{i},{v},{s},{layer},{d:.9f}")
        exact &= rep.variants["input-cell"].final_dev[-1] == 0.0
    (out / "oracle.csv").write_text("\n".join(lines) + "\n")
    a, b = ev.approximation_gap(model, cfg.heldout_episodes, cfg.trainer.task, jobs=jobs,
                                num_frames=cfg.trainer.episode_frames)
    (out / "oracle_gap.csv").write_text(_fmt_rows("input_cell,incremental,gap", [(a, b, a - b)]))
    return exact and a - b <= 1.0


def cmd_bench_latency(cfg: RunConfig, out: Path, jobs=1):
    model = _trained_model(cfg)
    task = cfg.trainer.task
    n, frames = cfg.heldout_episodes, cfg.trainer.episode_frames
    full = count_flops(model, task=task, space=ActionSpace(1, 1), attention=False) / 1e6
    head = sum(c.flops for name, c in model_layers(model, task, ActionSpace(1, 1), attention=False)
               if not name.startswith("b")) / 1e6
    points = []
    for vid, kind, policy, v in parse_variants(cfg.variants):
        if kind == "patchwork":
            cost = count_flops(model, task=task, attention=policy == "dqn") / 1e6
            prof = latency_profile(cost, v)
            metric = ev.eval_policy(model, policy, n, task, jobs=jobs, num_frames=frames)
        else:
            prof = latency_profile(full, v, head_cost=head)
            runnable = v.depth_multiplier == 1 and not v.flip and v.resolution_scale == 1
            metric = (ev.eval_single_frame(model, n, task, v.interval, v.delay, jobs=jobs, num_frames=frames)
                      if runnable else float("nan"))
        points.append((vid, kind if kind == "single" else f"patchwork-{policy}", prof, metric))
    # unmeasured variants (no metric) are listed after the frontier, unflagged
    rows = frontier(p for p in points if not np.isnan(p[3]))
    rows += [FrontierRow(i, m, p.max, p.avg, mt) for i, m, p, mt in points if np.isnan(mt)]
    (out / "frontier.csv").write_text(frontier_csv(rows))
    pw = [r for r in rows if r.method.startswith("patchwork")]
    sf = [r for r in rows if r.method == "single" and not np.isnan(r.metric)]
    # every single-frame point near a patchwork point's max cost is beaten by it
    return all(p.metric > s.metric for p in pw for s in sf if abs(s.max_mflops - p.max_mflops) <= 0.2 * p.max_mflops)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-cells": cmd_ablate_cells,
    "oracle-check": cmd_oracle_check,
    "bench-latency": cmd_bench_latency,
}


def _snapshot(directory: Path):
    return sorted(p.relative_to(directory) for p in directory.rglob("*") if p.is_file())


def run(command, cfg: RunConfig, out: Path, jobs=1):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.conf").write_text(cfg.resolved())
    return COMMANDS[command](cfg, out, jobs)


def verify(command, cfg: RunConfig, out: Path, jobs=1) -> list[str]:
    """Re-run into a scratch directory and list files that differ."""
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg2 = RunConfig(**{f.name: getattr(cfg, f.name) for f in fields(cfg)})
        cfg2.out_dir = str(tmp)
        if command != "train" and not cfg.checkpoint:
            cfg2.checkpoint = str(cfg.checkpoint_path)
        run(command, cfg2, tmp, jobs)
        bad = []
        for rel in _snapshot(tmp):
            if rel.name == "resolved.conf":
                continue
            if not (out / rel).exists() or not filecmp.cmp(out / rel, tmp / rel, shallow=False):
                bad.append(str(rel))
        return bad


def build_parser():
    p = argparse.ArgumentParser(prog="patchwork", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for episode evaluation")
    p.add_argument("--verify", action="store_true", help="re-run and diff every output file")
    p.add_argument("--check", action="store_true", help="exit 3 if the command's acceptance check fails")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg.out_dir = args.out
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(cfg.out_dir)
        ok = run(args.command, cfg, out, args.jobs)
        if args.verify:
            bad = verify(args.command, cfg, out, args.jobs)
            if bad:
                print("verify: outputs differ: " + ", ".join(bad), file=sys.stderr)
                return EXIT_CHECK
            print("verify: outputs identical")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.check and not ok:
        print(f"{args.command}: acceptance check failed", file=sys.stderr)
        return EXIT_CHECK
    print(f"{args.command}: done ({out})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
