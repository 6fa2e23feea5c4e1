"""Command-line entry point: ``tcan {gen-data,train,eval,ablate,gradcheck}``.

Exit codes: 0 on success, 1 on a runtime failure (bad data, checkpoint
mismatch, diverged training, failed gradient check), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from .ablation import AblationSpec, AblationSpecError, run_grid, summarize, write_grid_csv, \
    write_seed_csv
from .checkpoint import CheckpointError, load_checkpoint
from .config import SUBSET_LABELS, ConfigError, ModelConfig, TrainConfig, read_config_file
from .data import DatasetError, SyntheticConfig, collate, generate_synthetic, load_dataset, \
    write_dataset
from .gradcheck import GradCheckReport, grad_check
from .model import TCAN
from .tensor import ContractError, ShapeError, scaled_backward
from .training import NonFiniteGradientError, evaluate, fit, loss_multi, loss_total, \
    loss_uni, model_modalities

logger = logging.getLogger("tcan")

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

# flags whose value is baked into a checkpoint's architecture
ARCH_FLAGS = {
    "d": "d", "L": "L", "N": "N", "heads": "h", "ffn_mult": "ffn_mult", "pooling": "pooling",
    "center": "center_modality", "modalities": "modalities", "kernel_size": "kernel_size",
    "no_gates": "gates_enabled", "no_joint_learning": "joint_learning_enabled",
    "no_positional_encoding": "positional_encoding", "attention_residual": "attention_residual",
}
NEGATED = {"no_gates", "no_joint_learning", "no_positional_encoding"}

PRESETS = {
    # small model that must memorise a 32-sample corpus
    "overfit": {"d": 16, "L": 16, "N": 2, "epochs": 500},
}


class UsageError(Exception):
    pass


class RunFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("architecture")
    g.add_argument("--d", type=int, help="model width")
    g.add_argument("--L", type=int, help="common sequence length after resampling")
    g.add_argument("--N", type=int, help="fusion layers per branch")
    g.add_argument("--heads", type=int, help="attention heads")
    g.add_argument("--ffn-mult", type=int)
    g.add_argument("--pooling", choices=("mean", "last"))
    g.add_argument("--center", choices=("text", "visual", "acoustic"), help="center modality")
    g.add_argument("--modalities", help="subset: T, A, V, TV, TA, TV+TA (or t/v/a letters)")
    g.add_argument("--kernel-size", type=int)
    g.add_argument("--no-gates", action="store_true", default=None)
    g.add_argument("--no-joint-learning", action="store_true", default=None)
    g.add_argument("--no-positional-encoding", action="store_true", default=None)
    g.add_argument("--attention-residual", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=SyntheticConfig.n_samples)
    g.add_argument("--seed", type=int, default=0)
    for m, name in (("t", "text"), ("v", "visual"), ("a", "acoustic")):
        g.add_argument(f"--snr-{m}", type=float, default=getattr(SyntheticConfig, f"snr_{m}"),
                       help=f"{name} signal-to-noise ratio")
        g.add_argument(f"--p-flip-{m}", type=float, default=0.0,
                       help=f"probability the {name} evidence contradicts the label")
    g.add_argument("--burst-rate-v", type=float, default=0.0)
    g.add_argument("--burst-rate-a", type=float, default=0.0)
    g.add_argument("--burst-scale", type=float, default=SyntheticConfig.burst_scale)
    g.add_argument("--signal-scale", type=float, default=SyntheticConfig.signal_scale)
    g.add_argument("--val-fraction", type=float, default=SyntheticConfig.val_fraction)
    g.add_argument("--test-fraction", type=float, default=SyntheticConfig.test_fraction)
    g.add_argument("--binary", action="store_true", help="binary record files instead of JSONL")

    t = sub.add_parser("train", help="train a model and save the best checkpoint")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="directory for best.tckp and history.csv")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--preset", choices=sorted(PRESETS))
    _add_arch_flags(t)
    t.add_argument("--lambda", dest="lambda_", type=float, help="unimodal loss weight")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--f1-average", choices=("binary", "weighted"), default="binary")
    e.add_argument("--batch-size", type=int, help="defaults to the training eval batch size")
    _add_arch_flags(e)

    a = sub.add_parser("ablate", help="run an ablation grid from a JSON spec")
    a.add_argument("spec", help="ablation spec (JSON)")
    a.add_argument("--out", required=True, help="directory for grid.csv and seeds.csv")
    a.add_argument("--workers", type=int, help="override the worker count in the ablation file")

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    c.add_argument("--d", type=int, default=8)
    c.add_argument("--L", type=int, default=6)
    c.add_argument("--N", type=int, default=1)
    c.add_argument("--heads", type=int, default=2)
    c.add_argument("--batch", type=int, default=3)
    c.add_argument("--per-tensor", type=int, default=4,
                   help="coordinates sampled from each parameter tensor")
    c.add_argument("--eps", type=float, default=1e-3)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-bug", nargs="?", const="matmul", metavar="OP",
                   help="scale the backward rule of OP (default matmul) by 2")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        cfg = SyntheticConfig(
            n_samples=args.n, seed=args.seed, snr_t=args.snr_t, snr_v=args.snr_v,
            snr_a=args.snr_a, p_flip_t=args.p_flip_t, p_flip_v=args.p_flip_v,
            p_flip_a=args.p_flip_a, burst_rate_v=args.burst_rate_v,
            burst_rate_a=args.burst_rate_a, burst_scale=args.burst_scale,
            signal_scale=args.signal_scale, val_fraction=args.val_fraction,
            test_fraction=args.test_fraction)
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = generate_synthetic(cfg)
    out = write_dataset(ds, args.out, binary=args.binary)
    (out / "generator.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n",
                                        encoding="utf-8")
    print(json.dumps({"out": str(out), "train": len(ds.train), "val": len(ds.val),
                      "test": len(ds.test)}))
    return 0


def _flag_overrides(args) -> dict:
    out = {}
    for flag, key in ARCH_FLAGS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        out[key] = (not value) if flag in NEGATED else value
    if out.get("modalities") is not None:
        out["modalities"] = SUBSET_LABELS.get(out["modalities"], out["modalities"].lower())
    for key in ("lambda_", "epochs", "batch_size", "learning_rate", "optimizer", "clip_norm",
                "patience", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def resolve_configs(args) -> tuple:
    """Merge defaults < preset < config file < flags."""
    merged: dict = {}
    if getattr(args, "preset", None):
        merged.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            file_values = read_config_file(args.config)
        except OSError as e:
            raise RunFailure(f"cannot read config file: {e}") from None
        merged.update({("lambda_" if k == "lambda" else k): v for k, v in file_values.items()})
    merged.update(_flag_overrides(args))
    unknown = set(merged) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_kw = {k: v for k, v in merged.items() if k in MODEL_KEYS}
    train_kw = {k: v for k, v in merged.items() if k in TRAIN_KEYS}
    try:
        return ModelConfig.from_dict(model_kw), TrainConfig.from_dict(train_kw)
    except (ConfigError, ValueError, TypeError) as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    out = Path(args.out)
    train_cfg = train_cfg.replace(checkpoint_dir=str(out))
    ds = load_dataset(args.data)
    run_config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                  "data": str(args.data)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    try:
        _, result = fit(model_cfg, ds, train_cfg, run_config)
    except NonFiniteGradientError as e:
        raise RunFailure(f"training aborted: {e}; try a lower --lr or --clip-norm") from None
    logger.info("best epoch %d, checkpoint %s", result.best_epoch, result.checkpoint_path)
    report = result.best_metrics
    print(report.to_json() if report is not None else "null")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    requested = _flag_overrides(args)
    stored = ckpt.config.to_dict()
    stored["lambda_"] = stored.pop("lambda")
    clashes = [f"{k}={v!r} (checkpoint has {stored[k]!r})" for k, v in requested.items()
               if k in stored and stored[k] != v]
    if clashes:
        raise RunFailure("architecture flags are fixed by the checkpoint: " + ", ".join(clashes))
    model = ckpt.build_model()
    ds = load_dataset(args.data)
    for mod in model_modalities(model):
        if ds.dims[mod] != model.input_dims[mod]:
            raise RunFailure(f"{mod} width {ds.dims[mod]} does not match checkpoint "
                             f"({model.input_dims[mod]})")
    batch_size = args.batch_size or ckpt.meta.get("run", {}).get("train", {}).get(
        "eval_batch_size", TrainConfig.eval_batch_size)
    samples = ds.split(args.split)
    if not samples:
        raise RunFailure(f"split {args.split!r} is empty")
    report = evaluate(model, samples, batch_size, args.f1_average)
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    try:
        spec_dict = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except OSError as e:
        raise RunFailure(f"cannot read spec: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{args.spec}: invalid JSON ({e})") from None
    try:
        spec = AblationSpec.from_dict(spec_dict)
    except (AblationSpecError, ConfigError, ValueError, TypeError) as e:
        raise UsageError(f"{args.spec}: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = run_grid(spec, spec_dict, workers=args.workers)
    rows = summarize(spec, outcomes)
    write_grid_csv(rows, out / "grid.csv")
    write_seed_csv(spec, outcomes, out / "seeds.csv")
    (out / "spec.json").write_text(json.dumps(spec_dict, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    print((out / "grid.csv").read_text(encoding="utf-8"), end="")
    n_failed = sum(r["n_failed"] for r in rows)
    if n_failed:
        logger.warning("%d of %d runs failed; see the errors column", n_failed, len(outcomes))
    return 0


def gradcheck_report(d: int = 8, L: int = 6, N: int = 1, heads: int = 2, batch: int = 3,
                     per_tensor: int = 4, eps: float = 1e-3, tol: float = 1e-3, seed: int = 0,
                     inject_bug: Optional[str] = None) -> GradCheckReport:
    """Check every parameter tensor of a small model trained on the joint loss."""
    cfg = ModelConfig(d=d, L=L, N=N, h=heads)
    syn = SyntheticConfig(n_samples=batch, seed=seed, d_t=5, d_v=4, d_a=3, len_t=(4, 7),
                          len_v=(5, 9), len_a=(6, 10), signal_scale=1.0,
                          val_fraction=0.0, test_fraction=0.0)
    ds = generate_synthetic(syn)
    model = TCAN(cfg, ds.dims, seed=seed)
    b = collate(ds.train, model_modalities(model))

    def objective():
        out = model.forward(b.inputs, training=True)
        return loss_total(loss_multi(out.y_pred, b.labels), loss_uni(out.y_uni, b.labels),
                          cfg.lambda_)

    report = GradCheckReport(tol=tol, eps=eps)
    for i, (name, tensor) in enumerate(model.params.items()):
        n = None if tensor.size <= per_tensor else per_tensor
        with scaled_backward(inject_bug, 2.0) if inject_bug else nullcontext():
            part = grad_check(objective, {name: tensor}, eps=eps, tol=tol, n_samples=n,
                              seed=seed + i)
        report.checks.extend(part.checks)
    return report


def cmd_gradcheck(args) -> int:
    try:
        report = gradcheck_report(args.d, args.L, args.N, args.heads, args.batch,
                                  args.per_tensor, args.eps, args.tol, args.seed, args.inject_bug)
    except (ConfigError, ValueError) as e:
        raise UsageError(str(e)) from None
    print(report.summary())
    print("worst relative error per group:")
    for group, c in sorted(report.worst_by_group().items()):
        flag = "" if c.rel_error <= report.tol else "  FAIL"
        print(f"  {group:<28} {c.rel_error:.3e}{flag}")
    return 0 if report.passed else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"tcan {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (RunFailure, DatasetError, CheckpointError, ShapeError, ContractError,
            FloatingPointError, OSError) as e:
        print(f"tcan {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
