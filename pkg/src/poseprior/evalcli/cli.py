"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
All randomness flows from --seed (or the config's seed when the flag is
absent). Consumers are scripts and CI; every output is byte-reproducible for a
fixed (seed, config, data) triple.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from ..datagen import (
    DatasetFormatError,
    MotionPrior,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from ..diffmath import DomainError, NonFiniteError, ShapeError
from ..kinematics import KinematicsError, load_skeleton, mpjpe
from ..refine import LbfgsConfig, RefineObjective, refine_latent, refine_pose
from ..training import (
    STREAM_REFINE,
    ConfigError,
    DivergenceError,
    TrainConfig,
    finetune_hand_dropout,
    load_config,
    train_flow,
    train_lra,
    train_mlp_baseline,
)
from . import checkpoint as ckpt
from . import metrics as mx

COMMANDS = ("datagen", "train-flow", "train-lra", "finetune", "generate",
            "evaluate", "ood", "oracle-dist", "refine", "report")

_USAGE_ERROR = 1
_DATA_ERROR = 2
_NUMERIC_ERROR = 3


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseprior",
        description="Conditional flow-based pose prior: train, generate, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--data", default=None, help="dataset / trace file")
        p.add_argument("--out", default=None, help="output file or directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--checkpoint", action="append", default=[],
                       help="checkpoint path (repeatable)")
        p.add_argument("--hands", choices=mx.HANDS_CHOICES, default="both",
                       help="hand visibility at generation/evaluation")
    return parser


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_")) in (None, []):
            raise UsageError(f"--{name} is required for {args.command}")


def _checkpoints(args, *kinds):
    """Load the given checkpoint kinds from --checkpoint flags, in any order."""
    skel = load_skeleton()
    found = {}
    for path in args.checkpoint:
        kind, model = ckpt.load_any(path, skel.hash())
        found[kind] = model
    missing = [k for k in kinds if k not in found]
    if missing:
        raise UsageError(f"{args.command} needs {missing[0]!r} among --checkpoint files")
    return skel, found


def cmd_datagen(args) -> int:
    _require(args, "out")
    cfg = _load_cfg(args)
    skel = load_skeleton()
    os.makedirs(args.out, exist_ok=True)
    train, test = generate_dataset(MotionPrior(), skel, cfg.data.n_train,
                                   cfg.data.n_test, cfg.seed)
    save_dataset(train, os.path.join(args.out, "train.jsonl"))
    save_dataset(test, os.path.join(args.out, "test.jsonl"))
    print(f"wrote {train.count} train / {test.count} test records to {args.out}")
    return 0


def cmd_train_flow(args) -> int:
    _require(args, "data", "out")
    cfg = _load_cfg(args)
    skel = load_skeleton()
    dataset = load_dataset(args.data, skel)
    model, history = train_flow(cfg, dataset, skel, log=lambda s: print(s, file=sys.stderr))
    ckpt.save_flow(args.out, model, cfg.to_dict(), skel.hash())
    print(f"flow checkpoint {args.out}: final val NLL {history[-1]['val_nll']:.4f}")
    return 0


def cmd_train_lra(args) -> int:
    _require(args, "data", "out", "checkpoint")
    cfg = _load_cfg(args)
    skel, models = _checkpoints(args, "flow")
    dataset = load_dataset(args.data, skel)
    lra_model, _ = train_lra(cfg, dataset, models["flow"], skel,
                             log=lambda s: print(s, file=sys.stderr))
    mlp_model, _ = train_mlp_baseline(cfg, dataset, models["flow"])
    os.makedirs(args.out, exist_ok=True)
    lra_path = os.path.join(args.out, "lra.ckpt")
    mlp_path = os.path.join(args.out, "mlp.ckpt")
    ckpt.save_lra(lra_path, lra_model, cfg.to_dict(), skel.hash())
    ckpt.save_mlp(mlp_path, mlp_model, cfg.to_dict(), skel.hash())
    print(f"wrote {lra_path} and {mlp_path}")
    return 0


def cmd_finetune(args) -> int:
    _require(args, "data", "out", "checkpoint")
    cfg = _load_cfg(args)
    skel, models = _checkpoints(args, "flow", "lra")
    dataset = load_dataset(args.data, skel)
    tuned, _ = finetune_hand_dropout(cfg, dataset, models["flow"], models["lra"], skel,
                                     log=lambda s: print(s, file=sys.stderr))
    ckpt.save_lra(args.out, tuned, cfg.to_dict(), skel.hash())
    print(f"wrote fine-tuned checkpoint {args.out}")
    return 0


def cmd_generate(args) -> int:
    _require(args, "data", "out", "checkpoint")
    skel, models = _checkpoints(args, "flow", "lra")
    dataset = load_dataset(args.data, skel)
    mus, _, _ = mx.predict_regions(models["lra"], dataset, skel,
                                   *mx.hands_visibility(args.hands))
    poses = mx.decode_poses(models["flow"], mus, dataset.conds, skel.joint_count)
    if not np.all(np.isfinite(poses)):
        raise NonFiniteError("generated poses are not finite")
    header = {"kind": "poseprior-poses", "version": 1, "count": len(poses),
              "joints": skel.joint_count, "hands": args.hands,
              "skeleton_hash": skel.hash()}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for i in range(len(poses)):
            fh.write(json.dumps({"pose": poses[i].tolist()},
                                separators=(",", ":")) + "\n")
    print(f"wrote {len(poses)} generated poses to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    _require(args, "data", "out", "checkpoint")
    cfg = _load_cfg(args)
    skel, models = _checkpoints(args, "flow", "lra")
    dataset = load_dataset(args.data, skel)
    report, _ = mx.evaluate(models["flow"], models["lra"], dataset, skel,
                            cfg.seed, cfg.hash(), mlp=models.get("mlp"),
                            sample_k=cfg.eval.sample_k, hands=args.hands)
    report.write_csv(args.out)
    print(f"wrote {len(report.rows)} metric rows to {args.out}")
    return 0


def cmd_ood(args) -> int:
    _require(args, "data", "out", "checkpoint")
    cfg = _load_cfg(args)
    skel, models = _checkpoints(args, "flow")
    dataset = load_dataset(args.data, skel)
    report = mx.ood_eval(models["flow"], dataset, skel, cfg.seed, cfg.hash(),
                         manip_sigma=cfg.data.manip_sigma,
                         manip_joints=cfg.data.manip_joints)
    report.write_csv(args.out)
    print(f"wrote {len(report.rows)} metric rows to {args.out}")
    return 0


def cmd_oracle_dist(args) -> int:
    _require(args, "data", "out", "checkpoint")
    cfg = _load_cfg(args)
    skel, models = _checkpoints(args, "flow", "lra")
    dataset = load_dataset(args.data, skel)
    report = mx.oracle_distance(models["flow"], models["lra"], dataset, skel,
                                cfg.seed, cfg.hash(),
                                sinkhorn_eps=cfg.eval.sinkhorn_eps,
                                sinkhorn_iters=cfg.eval.sinkhorn_iters)
    report.write_csv(args.out)
    print(f"wrote {len(report.rows)} metric rows to {args.out}")
    return 0


def cmd_refine(args) -> int:
    _require(args, "data", "out", "checkpoint")
    cfg = _load_cfg(args)
    skel, models = _checkpoints(args, "flow", "lra")
    dataset = load_dataset(args.data, skel)
    n = min(cfg.refine.instances, dataset.count)
    flow = models["flow"]
    mus, _, _ = mx.predict_regions(models["lra"], dataset, skel)
    objective = RefineObjective(lambda_data=cfg.refine.lambda_data,
                                lambda_prior=cfg.refine.lambda_prior,
                                lambda_reg=cfg.refine.lambda_reg)
    lcfg = LbfgsConfig()
    upper = np.asarray(skel.upper_body)
    fullj = np.arange(skel.joint_count)

    def mpjpe_trace(trace, gt_pose, beta):
        ups, fls = [], []
        for pose in trace["poses"]:
            pose = np.asarray(pose)
            ups.append(mpjpe(skel, pose, gt_pose, beta, upper))
            fls.append(mpjpe(skel, pose, gt_pose, beta, fullj))
        trace["mpjpe_upper"] = ups
        trace["mpjpe_full"] = fls
        del trace["poses"]
        return trace

    runs = (
        ("latent", "mu", lambda i: refine_latent(
            flow, mus[i], dataset.xh[i], skel, dataset.betas[i], objective, lcfg,
            init_rule="mu")),
        ("latent", "zero", lambda i: refine_latent(
            flow, mus[i], dataset.xh[i], skel, dataset.betas[i], objective, lcfg,
            z0=np.zeros(flow.dim), init_rule="zero")),
        ("pose", "mu", lambda i: refine_pose(
            flow, mx.decode_poses(flow, mus[i:i + 1], dataset.conds[i:i + 1],
                                  skel.joint_count)[0],
            dataset.xh[i], skel, dataset.betas[i], objective, lcfg, init_rule="mu")),
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for space, rule, run in runs:
            for i in range(n):
                _, trace = run(i)
                trace = mpjpe_trace(trace, dataset.poses[i], dataset.betas[i])
                fh.write(json.dumps(trace, separators=(",", ":")) + "\n")
            print(f"refined {n} instances ({space}/{rule})", file=sys.stderr)
    print(f"wrote {3 * n} refinement traces to {args.out}")
    return 0


def cmd_report(args) -> int:
    _require(args, "data", "out")
    traces = []
    with open(args.data, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                traces.append(json.loads(line))
    rows = mx.aggregate_traces(traces)
    mx.write_report_csv(rows, args.out)
    print(f"wrote {len(rows)} report rows to {args.out}")
    return 0


_HANDLERS = {
    "datagen": cmd_datagen,
    "train-flow": cmd_train_flow,
    "train-lra": cmd_train_lra,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ood": cmd_ood,
    "oracle-dist": cmd_oracle_dist,
    "refine": cmd_refine,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else _USAGE_ERROR
    try:
        return _HANDLERS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return _USAGE_ERROR
    except (ConfigError, DatasetFormatError, ckpt.CheckpointError, KinematicsError,
            FileNotFoundError, IsADirectoryError, json.JSONDecodeError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return _DATA_ERROR
    except (DivergenceError, NonFiniteError, DomainError, ShapeError,
            FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return _NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
