"""Command-line entry point: ``clothfold <command> ...``.

Errors print ``error: <IDENTIFIER>: <message>`` on stderr and exit with a
nonzero status.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .harness import (
    ConfigValidationError,
    RunConfig,
    RunReport,
    descriptor_experiment,
    evaluate_policy,
    expert_controller,
    load_demo,
    policy_controller,
    parse_bool,
    record_demo,
    save_demo,
    train_policy,
    train_state_classifier,
)
from .policy import TvlgPolicy
from .saliency import saliency_pipeline
from .shape import ClothStateModel, EmptyMaskError, classify_state
from .sim import EnvConfig, Task, cloth_mask

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(io._plain(obj), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("E_IO", f"cannot read config {args.config}: {exc}") from None
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            base[f.name] = v
    return RunConfig.from_dict(base).validate()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of config fields; flags override it")
    for f in fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        kind = parse_bool if isinstance(default, bool) else type(default)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=kind, default=None,
                       help=f"default {default!r}")


def _load_model(path: str, kind: str) -> dict:
    try:
        return io.load_model(path, kind)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("E_IO", f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise CliError("E_MODEL_KIND", str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_demo(args) -> int:
    demo = record_demo(args.task, args.seed, image_size=args.image_size)
    try:
        out = save_demo(demo, args.out)
    except OSError as exc:
        raise CliError("E_IO", str(exc).removeprefix("E_IO: ")) from None
    print(f"demonstration: task {args.task}, {len(demo.actions)} steps -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    try:
        demo = load_demo(args.demo)
    except OSError as exc:
        raise CliError("E_IO", str(exc).removeprefix("E_IO: ")) from None
    if demo.task != cfg.task:
        raise CliError("E_TASK_MISMATCH", f"demonstration task {demo.task!r} differs from config task {cfg.task!r}")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("E_IO", f"cannot create {out}: {exc}") from None
    _write_json(out / "config.json", {"config": cfg.to_dict(), "config_hash": cfg.digest()})
    model = None if cfg.task == "lq" else train_state_classifier(cfg.env, cfg.sim_task, cfg.seed)
    log = None if args.quiet else print
    policy, report = train_policy(cfg, demo, model, log)
    if args.eval_runs > 0 and cfg.task != "lq":
        report.runs = evaluate_policy(policy_controller(policy, stochastic=False), cfg, model, len(demo.actions),
                                      args.eval_runs)
    io.dump_model(out / "policy.json", "tvlg_policy", {"task": cfg.task, **policy.to_record()})
    if model is not None:
        io.dump_model(out / "classifier.json", "cloth_state_model", model.to_record())
    rows = [[i, m, n, int(s)] for i, (m, n, s) in
            enumerate(zip(report.mean_cost, report.min_cost, report.iteration_success))]
    io.write_rows(out / "metrics.csv", ["iteration", "mean_cost", "min_cost", "success"], rows)
    _write_json(out / "report.json", report.to_dict())
    if report.runs:
        print(report.table())
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    env = EnvConfig()
    task = Task(args.task)
    cfg = RunConfig(task=args.task, seed=args.seed, eval_runs=args.n_runs).validate()
    horizon = len(record_demo(args.task, image_size=16).actions)
    if args.classifier:
        model = ClothStateModel.from_record(_load_model(args.classifier, "cloth_state_model"))
    else:
        model = train_state_classifier(env, task, args.seed)
    if args.expert:
        controller, label = expert_controller(task, env), "expert"
    elif args.zero:
        controller, label = (lambda st, s, t, rng: np.zeros(7)), "zero"
    else:
        if not args.policy:
            raise CliError("E_ARGS", "give a policy file, --expert or --zero")
        rec = _load_model(args.policy, "tvlg_policy")
        policy = TvlgPolicy.from_record(rec)
        n, m = policy.dims
        if policy.horizon != horizon or n != 25 or m != 7:
            raise CliError("E_DIMENSION", f"policy horizon {policy.horizon}, dims ({n}, {m}) do not match the "
                                          f"environment (horizon {horizon}, dims (25, 7))")
        if rec.get("task", args.task) != args.task:
            raise CliError("E_TASK_MISMATCH", f"policy was trained for {rec.get('task')!r}, not {args.task!r}")
        controller, label = policy_controller(policy, stochastic=False), "policy"
    report = RunReport(label, args.task)
    report.runs = evaluate_policy(controller, cfg, model, horizon, args.n_runs, args.seed)
    print(report.table())
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return 0


def cmd_saliency(args) -> int:
    try:
        prev = io.load_image(args.prev)
        curr = io.load_image(args.curr)
    except OSError as exc:
        raise CliError("E_IO", f"cannot decode frame: {exc}") from None
    if prev.shape != curr.shape:
        raise CliError("E_SHAPE", f"frame shapes differ: {prev.shape} vs {curr.shape}")
    if not args.lam > 0 or not 0 < args.epsilon < 1:
        raise CliError("E_CONFIG_RANGE", "lam must be > 0 and epsilon must lie in (0, 1)")
    res = saliency_pipeline(prev, curr, args.lam, args.epsilon, args.canny_low, args.canny_high)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        io.save_image(out / "flow_hsv.png", res.flow_hsv)
        io.save_image(out / "static.png", res.static / max(float(res.static.max()), 1e-12))
        io.save_image(out / "contour.png", res.contour.mask.astype(float))
        io.save_image(out / "refined.png", res.score)
        io.save_image(out / "segmentation.png", res.segmentation.astype(float))
    except OSError as exc:
        raise CliError("E_IO", f"cannot write to {out}: {exc}") from None
    print(f"segmented {int(res.segmentation.sum())} pixels -> {out}")
    return 0


def cmd_classify(args) -> int:
    if args.action == "train":
        model = train_state_classifier(EnvConfig(), Task(args.task), args.seed, args.per_class)
        try:
            io.dump_model(args.out, "cloth_state_model", model.to_record())
        except OSError as exc:
            raise CliError("E_IO", f"cannot write {args.out}: {exc}") from None
        print(f"classes {', '.join(model.classes)} -> {args.out}")
        return 0
    model = ClothStateModel.from_record(_load_model(args.model, "cloth_state_model"))
    for path in args.frames:
        try:
            img = io.load_image(path)
        except OSError as exc:
            raise CliError("E_IO", f"cannot decode {path}: {exc}") from None
        mask = cloth_mask(img) if img.ndim == 3 else img > 0.5
        try:
            label, margin = classify_state(mask, model)
        except EmptyMaskError:
            raise CliError("E_EMPTY_MASK", f"{path}: no cloth pixels") from None
        print(f"{path}\t{label}\t{margin:.4f}")
    return 0


def cmd_descriptor_train(args) -> int:
    if args.pairs < 1 or args.steps < 0 or args.radius < 1 or args.dim < 1:
        raise CliError("E_CONFIG_RANGE", "pairs, radius and dim must be >= 1 and steps >= 0")
    feat, acc, n = descriptor_experiment(args.pairs, args.test_pairs, args.seed, args.steps, args.radius, args.dim)
    try:
        io.dump_model(args.out, "patch_featurizer", feat.to_record())
    except OSError as exc:
        raise CliError("E_IO", f"cannot write {args.out}: {exc}") from None
    print(f"held-out corner accuracy {acc:.3f} over {n} queries -> {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clothfold", description="Cloth folding imitation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="record a scripted demonstration")
    p.add_argument("--task", choices=["left", "right", "mid", "lq"], default="left")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("train", help="train a policy against a demonstration")
    p.add_argument("--demo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-after", dest="eval_runs", type=int, default=0, help="evaluation runs after training")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy, the expert or the zero policy")
    p.add_argument("policy", nargs="?")
    p.add_argument("--task", choices=["left", "right", "mid"], default="left")
    p.add_argument("--n-runs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classifier")
    p.add_argument("--expert", action="store_true")
    p.add_argument("--zero", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="run the motion saliency pipeline on a frame pair")
    p.add_argument("prev")
    p.add_argument("curr")
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=5.0)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--canny-low", type=float, default=0.1)
    p.add_argument("--canny-high", type=float, default=0.3)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("classify", help="train or apply the cloth state classifier")
    csub = p.add_subparsers(dest="action", required=True)
    t = csub.add_parser("train")
    t.add_argument("--task", choices=["left", "right", "mid"], default="left")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--per-class", type=int, default=12)
    t.add_argument("--out", required=True)
    t = csub.add_parser("predict")
    t.add_argument("--model", required=True)
    t.add_argument("frames", nargs="+")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("descriptor-train", help="train the patch descriptor on synthetic view pairs")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--test-pairs", type=int, default=10)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_descriptor_train)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigValidationError as exc:
        for code, msg in exc.problems:
            print(f"error: {code}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
