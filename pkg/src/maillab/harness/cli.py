"""``maillab`` command-line interface.

Results go to stdout as JSON lines. Failures print a single line
``error: <ErrorType>: <message>`` to stderr and exit with status 1 (2 for
usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from ..architectures import build_network, count_parameters
from ..toy_il import DemoDataset, generate_dataset, task_dims
from .ablations import run_datasize_ablation, run_occlusion_ablation
from .checkpoint import load_checkpoint
from .config import TrainConfig, load_config
from .latents import export_latents
from .training import CHECKPOINT_FILE, METRICS_FILE, evaluate, policy_from_checkpoint, train

PARITY_TOLERANCE = 0.10
SHIPPED_PAIRS = (("d-ma.cfg", "d-tr.cfg"), ("ed-ma.cfg", "ed-tr.cfg"))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def shipped_config_paths() -> dict[str, Path]:
    root = resources.files("maillab") / "configs"
    return {p.name: Path(str(p)) for p in root.iterdir() if p.name.endswith(".cfg")}


def config_parameter_count(cfg: TrainConfig) -> int:
    if cfg.obs_dim < 1 or cfg.act_dim < 1:
        obs_dim, act_dim = task_dims(cfg.task)
        cfg = cfg.replace(obs_dim=cfg.obs_dim or obs_dim, act_dim=cfg.act_dim or act_dim)
    return count_parameters(build_network(cfg.network_config())).total


def parity_report(pairs) -> list[dict]:
    """Relative parameter-count gap of each (Mamba, attention) config pair."""
    rows = []
    for a, b in pairs:
        ca, cb = config_parameter_count(load_config(a)), config_parameter_count(load_config(b))
        gap = abs(ca - cb) / max(ca, cb)
        rows.append({"mamba_config": str(a), "attention_config": str(b), "mamba_params": ca,
                     "attention_params": cb, "relative_gap": gap,
                     "within_tolerance": gap <= PARITY_TOLERANCE})
    return rows


def _cmd_gen_data(args) -> None:
    ds = generate_dataset(args.task, args.n, args.seed)
    ds.save(args.out)
    _emit({"task": ds.task, "trajectories": len(ds), "steps": ds.total_steps, "out": args.out})


def _cmd_train(args) -> None:
    cfg = load_config(args.config)
    if args.dataset:
        cfg = cfg.replace(dataset=args.dataset)
    result = train(cfg, out_dir=args.out_dir)
    out = Path(args.out_dir)
    _emit({"epochs": len(result.metrics), "final_loss": result.metrics[-1]["loss"],
           "checkpoint": str(out / CHECKPOINT_FILE), "metrics": str(out / METRICS_FILE)})


def _cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    policy = policy_from_checkpoint(ckpt)
    res = evaluate(policy, ckpt.config.task, args.episodes, args.seed, args.occlusion,
                   ckpt.config.execute)
    _emit({"task": ckpt.config.task, "episodes": args.episodes, "seed": args.seed,
           "occlusion": args.occlusion, "success_rate": res.success_rate})


def _cmd_ablate_occlusion(args) -> None:
    for row in run_occlusion_ablation(args.ckpt, args.rates, args.episodes, args.seed, args.out_dir):
        _emit(row)


def _cmd_ablate_datasize(args) -> None:
    cfg = load_config(args.config)
    if args.dataset:
        cfg = cfg.replace(dataset=args.dataset)
    for row in run_datasize_ablation(cfg, args.fractions, args.episodes, args.seed,
                                     out_dir=args.out_dir):
        _emit(row)


def _cmd_export_latents(args) -> None:
    res = export_latents(args.ckpt, DemoDataset.load(args.data), args.out, pca=args.pca)
    _emit({"rows": len(res.latents), "dim": res.latents.shape[1], "out": args.out})


def _cmd_params(args) -> None:
    if args.shipped:
        paths = shipped_config_paths()
        for row in parity_report([(paths[a], paths[b]) for a, b in SHIPPED_PAIRS]):
            _emit(row)
        return
    if not args.config:
        raise UsageError("params needs --config or --shipped")
    for path in args.config:
        cfg = load_config(path)
        _emit({"config": path, "variant": cfg.variant, "params": config_parameter_count(cfg)})
    if len(args.config) == 2:
        _emit(parity_report([tuple(args.config)])[0])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maillab", description="Selective state-space imitation-learning toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a demonstration dataset")
    s.add_argument("task")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("train", help="train a policy from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--dataset", help="override the config's dataset path")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="roll out a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--occlusion", type=float, default=0.0)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("ablate-occlusion", help="success rate versus occlusion rate")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rates", type=float, nargs="+", required=True)
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(func=_cmd_ablate_occlusion)

    s = sub.add_parser("ablate-datasize", help="success rate versus dataset fraction")
    s.add_argument("--config", required=True)
    s.add_argument("--fractions", type=float, nargs="+", required=True)
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dataset")
    s.add_argument("--out-dir")
    s.set_defaults(func=_cmd_ablate_datasize)

    s = sub.add_parser("export-latents", help="write pre-head latents as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pca", action="store_true")
    s.set_defaults(func=_cmd_export_latents)

    s = sub.add_parser("params", help="parameter counts and parity report")
    s.add_argument("--config", nargs="+")
    s.add_argument("--shipped", action="store_true", help="report the shipped config pairs")
    s.set_defaults(func=_cmd_params)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
