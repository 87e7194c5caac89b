"""Command-line interface: train, eval, params, analyze, selftest.

Exit codes: 0 success, 1 self-test failure, 2 usage/configuration error,
3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

from . import __version__, analytics, tensor
from .checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from .errors import ConfigError, DataError, DivergenceError
from .model import SLOTS, ConvLayer
from .moe import MoEConfig, count_parameters, estimate_flops
from .selftest import run_all
from .train import TrainConfig, build_model, evaluate, train, write_history_csv

GATE_FLAG = {"conv": "conv", "2conv": "2conv", "3conv": "3conv"}


def _add_moe_flags(p):
    p.add_argument("--experts", type=int, default=8, help="number of routed experts N")
    p.add_argument("--topk", type=int, default=2, help="experts activated per patch")
    p.add_argument("--grid", type=int, default=3, help="patch grid side g")
    p.add_argument("--gate", choices=sorted(GATE_FLAG), default="2conv")
    p.add_argument("--gate-hidden", type=int, default=16)
    p.add_argument("--shared", type=int, default=0, help="always-on shared experts")
    p.add_argument(
        "--loss", choices=("none", "importance", "switch", "entropy"), default="entropy"
    )
    p.add_argument("--lambda", dest="loss_weight", type=float, default=0.01)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--train-samples", type=int, default=256)
    p.add_argument("--val-samples", type=int, default=64)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--trace-every", type=int, default=50)
    p.add_argument("--gate-bias", type=float, default=0.0,
                   help="initialization bias added to the expert-0 gate logit")
    p.add_argument("--baseline", action="store_true", help="train without any MoE layer")


def _moe_from_args(args):
    return MoEConfig(
        n_experts=args.experts,
        top_k=args.topk,
        grid=args.grid,
        gate_kind=args.gate,
        gate_hidden=args.gate_hidden,
        n_shared=args.shared,
        balance_loss=args.loss,
        loss_weight=args.loss_weight,
    )


def _train_config_from_args(args):
    moe = None if args.baseline else _moe_from_args(args)
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        n_train=args.train_samples,
        n_val=args.val_samples,
        image_size=args.image_size,
        n_classes=args.classes,
        moe=moe,
        trace_every=args.trace_every,
        gate_bias_init=args.gate_bias,
    ).validate()


def config_to_manifest(config: TrainConfig, artifacts):
    body = asdict(config)
    body["moe_slots"] = list(config.moe_slots)
    return {
        "tool": "patchmoe",
        "version": __version__,
        "seed": config.seed,
        "config": body,
        "artifacts": artifacts,
    }


def config_from_manifest(manifest) -> TrainConfig:
    body = dict(manifest["config"])
    moe_body = body.pop("moe", None)
    moe = MoEConfig(**moe_body) if moe_body else None
    body["moe_slots"] = tuple(body.get("moe_slots", ("dec2",)))
    return TrainConfig(moe=moe, **body).validate()


def _write_manifest(path, manifest):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def cmd_train(args):
    if args.from_manifest:
        with open(args.from_manifest) as f:
            config = config_from_manifest(json.load(f))
    else:
        config = _train_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "train_trace.jsonl")
    result = train(config, trace_path=trace_path if config.moe else None)
    save_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), result.model.parameters())
    write_history_csv(os.path.join(args.out, "history.csv"), result.history)
    artifacts = {
        "checkpoint": "checkpoint.ckpt",
        "history": "history.csv",
        "train_trace": "train_trace.jsonl" if config.moe else None,
    }
    _write_manifest(os.path.join(args.out, "manifest.json"), config_to_manifest(config, artifacts))
    if result.history:
        last = result.history[-1]
        print(
            f"final val_miou={last['val_miou']:.4f} "
            f"nre={last['nre']:.4f} tec={last['tec']:.4f}"
        )
    else:
        print("no epochs run; checkpoint equals initialization")
    return 0


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 2
    manifest_path = args.manifest or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "manifest.json"
    )
    if not os.path.exists(manifest_path):
        print(f"error: run manifest not found: {manifest_path}", file=sys.stderr)
        return 2
    with open(manifest_path) as f:
        config = config_from_manifest(json.load(f))
    model = build_model(config)
    restore_parameters(model.parameters(), load_checkpoint(args.checkpoint))
    from .synth import make_dataset

    val = make_dataset(
        config.seed, config.n_val, config.image_size, config.image_size,
        config.n_classes, validation=True,
    )
    score, trace, records = evaluate(model, val, config)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval_trace.jsonl"), "w") as f:
        for step, d, fr in records:
            f.write(analytics.format_trace_line(step, d, fr) + "\n")
    if trace.n_decisions:
        analytics.export_csvs(trace, args.out)
        analytics.render_heatmap(
            analytics.class_expert_heatmap(trace), os.path.join(args.out, "class_expert.ppm")
        )
        analytics.render_heatmap(
            analytics.co_routing_matrix(trace), os.path.join(args.out, "cooccur.ppm")
        )
        print(
            f"val_miou={score:.4f} nre={analytics.nre(trace.expert_counts):.4f} "
            f"tec={analytics.tec(trace.expert_counts):.4f}"
        )
    else:
        print(f"val_miou={score:.4f} (no MoE layer; empty routing trace)")
    return 0


def _model_param_counts(config: TrainConfig):
    model = build_model(config)
    total = active = 0
    for slot in SLOTS:
        layer = model.layers[slot]
        if isinstance(layer, ConvLayer):
            n = layer.weight.size + layer.bias.size
            total += n
            active += n
        else:
            t, a = count_parameters(layer.config)
            total += t
            active += a
    return total, active


def _model_flops(config: TrainConfig):
    model = build_model(config)
    size = config.image_size
    total = active = 0
    res = {"enc1": size // 2, "enc2": size // 4, "bridge": size // 4,
           "dec1": size // 2, "dec2": size, "classifier": size}
    for slot in SLOTS:
        layer = model.layers[slot]
        h = res[slot]
        if isinstance(layer, ConvLayer):
            c_out, c_in, kh, kw = layer.weight.shape
            f = 2 * h * h * c_out * c_in * kh * kw
            total += f
            active += f
        else:
            t, a = estimate_flops(layer.config, h, h)
            total += t
            active += a
    return total, active


def cmd_params(args):
    moe = _moe_from_args(args).validate()
    config = TrainConfig(moe=moe, image_size=args.image_size, n_classes=args.classes)
    layer_cfg = config.moe
    base = replace(config, moe=replace(moe, n_experts=1, top_k=1, n_shared=0))
    total, active = _model_param_counts(config)
    b_total, b_active = _model_param_counts(base)
    f_total, f_active = _model_flops(config)
    fb_total, fb_active = _model_flops(base)
    print(f"model parameters: total={total} active={active}")
    print(f"model FLOPs ({args.image_size}x{args.image_size}): "
          f"total={f_total} active={f_active}")
    print(f"overhead vs single-expert baseline: "
          f"total={100.0 * (total - b_total) / b_total:+.2f}% "
          f"active={100.0 * (active - b_active) / b_active:+.2f}%")
    print(f"flops overhead vs single-expert baseline: "
          f"total={100.0 * (f_total - fb_total) / fb_total:+.2f}% "
          f"active={100.0 * (f_active - fb_active) / fb_active:+.2f}%")
    return 0


def cmd_analyze(args):
    records = analytics.read_trace_file(args.trace)
    trace = analytics.trace_from_records(records, args.classes)
    os.makedirs(args.out, exist_ok=True)
    analytics.export_csvs(trace, args.out)
    analytics.render_heatmap(
        analytics.class_expert_heatmap(trace), os.path.join(args.out, "class_expert.ppm")
    )
    analytics.render_heatmap(
        analytics.co_routing_matrix(trace), os.path.join(args.out, "cooccur.ppm")
    )
    print(
        f"decisions={trace.n_decisions} "
        f"nre={analytics.nre(trace.expert_counts):.4f} "
        f"tec={analytics.tec(trace.expert_counts):.4f}"
    )
    return 0


def cmd_selftest(args):
    if args.inject_fault:
        tensor._fault_hooks.add(args.inject_fault)
    try:
        results = run_all()
    finally:
        tensor._fault_hooks.discard(args.inject_fault)
    failed = []
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"self-test failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="patchmoe",
        description="Patch-routed sparse mixture-of-experts segmentation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic scenes")
    _add_moe_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--from-manifest", help="rerun from a saved run manifest")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and export routing analytics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="run manifest (default: next to the checkpoint)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("params", help="parameter and FLOP accounting")
    _add_moe_flags(p)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("analyze", help="routing-collapse analytics from a trace file")
    p.add_argument("--trace", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("selftest", help="run built-in correctness checks")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
