"""Command-line entry point: ``qbias <subcommand> ...``.

Exit codes: 0 success, 2 I/O failure, 3 validation failure, 4 numeric failure.
Every command writes a ``run_manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path


from . import __version__
from . import io as qio
from .bft import BftConfig, bft_run, parse_schedule
from .fixtures import FIXTURE_NETS, fixture_net, fixture_set, teacher_labels
from .ibc import IbcConfig, IbcError, ibc_run, report_rows
from .metrics import distillation_loss, fp_logits, quant_logits, top1
from .nn import forward
from .qstats import (ChannelStats, LayerSummary, aggregate_layers, compute_channel_stats,
                     format_csv, rows_to_csv, summary_document)
from .quant import (drop_dead_channels, fold_batchnorm, forward_quant, quantize_model,
                    round_params_to_storage)
from .theory import MonteCarloConfig, mssr_scaling_sim, rounding_error_sum_stats

log = logging.getLogger("qbias")

EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _digests(paths):
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.iterdir() if f.is_file() and not f.name.startswith(".")) if p.is_dir() else [p]
        for f in files:
            if f.name != "run_manifest.json":
                out[str(f)] = qio.file_digest(f)
    return out


def _write_manifest(out, args, inputs, started):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "config": config,
        "inputs": _digests(inputs),
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    qio.atomic_write(Path(out) / "run_manifest.json", _dumps(manifest))


def _need(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise CliError(f"no such file or directory: {path}", EXIT_IO)
    return path


def _load_batch(path):
    return qio.load_batch(_need(path))


def _fp_and_q(args):
    qmodel = qio.load_qmodel(_need(args.qmodel))
    fp = qio.load_graph(_need(args.model)) if args.model else qmodel.graph
    return fp, qmodel


def _inputs(args, *names):
    return [getattr(args, n) for n in names if getattr(args, n, None)]


# --- commands --------------------------------------------------------------------


def cmd_gen_fixtures(args):
    out = Path(args.out)
    data = fixture_set(args.seed)
    for name, arr in data.items():
        qio.save_batch(out / f"{name}.qbt", arr)
    for net in FIXTURE_NETS:
        graph = fixture_net(net, args.seed)
        qio.save_graph(out / net, graph)
        qio.save_batch(out / net / "heldout_labels.qbt", teacher_labels(graph, data["heldout"]))
    return out, []


def cmd_quantize(args):
    graph = qio.load_graph(_need(args.model))
    calib = _load_batch(args.calib)
    folded = fold_batchnorm(graph)
    processed, dead = drop_dead_channels(folded, calib)
    processed = round_params_to_storage(processed)
    qmodel = quantize_model(processed, calib, args.bits_w, args.bits_a, args.bits_b)
    out = Path(args.out)
    qio.save_qmodel(out, qmodel)
    qio.atomic_write(out / "dead_channels.csv", format_csv(
        ["layer", "channel", "value", "zeroed"], [[d.layer, d.channel, d.value, d.zeroed] for d in dead]))
    return out, _inputs(args, "model", "calib")


def cmd_analyze(args):
    fp, qmodel = _fp_and_q(args)
    batch = _load_batch(args.batch)
    _, fp_trace = forward(fp, batch, capture=True)
    _, q_trace = forward_quant(qmodel, batch, capture=True)
    stats = compute_channel_stats(fp_trace, q_trace, where=args.where)
    layers = aggregate_layers(stats)
    out = Path(args.out)
    qio.atomic_write(out / "channel_stats.csv", rows_to_csv(stats, ChannelStats))
    qio.atomic_write(out / "layer_stats.csv", rows_to_csv(layers, LayerSummary))
    doc = summary_document(stats, layers)
    doc["where"] = args.where
    doc["layer_kinds"] = [l.kind for l in qmodel.graph.layers]
    qio.atomic_write(out / "summary.json", _dumps(doc))
    return out, _inputs(args, "model", "qmodel", "batch")


def cmd_eval(args):
    graph = qio.load_graph(_need(args.model)) if args.model else None
    qmodel = qio.load_qmodel(_need(args.qmodel)) if args.qmodel else None
    if graph is None and qmodel is None:
        raise CliError("eval needs --model and/or --qmodel", EXIT_VALIDATION)
    if graph is None:
        graph = qmodel.graph
    data = _load_batch(args.data)
    teacher = fp_logits(graph, data)
    student = teacher if qmodel is None else quant_logits(qmodel, data)
    result = {
        "n_images": len(data),
        "cross_entropy": distillation_loss(teacher, student)[0],
        "teacher_entropy": distillation_loss(teacher, teacher)[0],
    }
    if args.labels:
        labels = _load_batch(args.labels).reshape(-1)
        if len(labels) != len(data):
            raise CliError(f"{len(labels)} labels for {len(data)} images", EXIT_VALIDATION)
        result["fp_top1"] = top1(teacher, labels)
        result["top1"] = top1(student, labels)
    out = Path(args.out)
    qio.atomic_write(out / "eval.json", _dumps(result))
    return out, _inputs(args, "model", "qmodel", "data", "labels")


def cmd_ibc(args):
    fp, qmodel = _fp_and_q(args)
    batch = _load_batch(args.batch)
    cfg = IbcConfig(batch, mode=args.mode, bias_requantize=not args.no_requantize)
    corrected, reports = ibc_run(fp, qmodel, cfg)
    out = Path(args.out)
    qio.save_qmodel(out, corrected)
    names = ["layer", "kind", "channel", "skipped", "delta", "residual", "dead", "clipped"]
    qio.atomic_write(out / "ibc_report.csv", format_csv(names, report_rows(reports)))
    return out, _inputs(args, "model", "qmodel", "batch")


def cmd_bft(args):
    fp, qmodel = _fp_and_q(args)
    data = _load_batch(args.data)
    cfg = BftConfig(data, parse_schedule(args.schedule), args.minibatch, seed=args.seed)
    tuned, history = bft_run(fp, qmodel, cfg)
    out = Path(args.out)
    qio.save_qmodel(out, tuned)
    qio.atomic_write(out / "loss_history.csv",
                     format_csv(["step", "loss"], [[i + 1, l] for i, l in enumerate(history.step_losses)]))
    qio.atomic_write(out / "bft_summary.json", _dumps(asdict(history) | {"step_losses": len(history.step_losses)}))
    return out, _inputs(args, "model", "qmodel", "data")


def cmd_theory(args):
    cfg = MonteCarloConfig(k_values=tuple(args.k), trials=args.trials, bits=args.bits, seed=args.seed)
    sums = rounding_error_sum_stats(cfg)
    scaling = mssr_scaling_sim(cfg)
    rows = [[s.k, s.empirical_mean, s.empirical_std, s.predicted_std, m.mssr_std]
            for s, m in zip(sums, scaling.rows)]
    out = Path(args.out)
    qio.atomic_write(out / "theory.csv",
                     format_csv(["k", "empirical_mean", "empirical_std", "predicted_std", "mssr_std"], rows))
    qio.atomic_write(out / "theory_summary.json", _dumps({
        "slope": scaling.slope, "intercept": scaling.intercept,
        "redraws": {str(m.k): m.redraws for m in scaling.rows},
        "grid_step_std": {str(s.k): s.grid_step_std for s in sums},
    }))
    return out, []


# --- argument parsing ---------------------------------------------------------------


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="qbias", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-fixtures", help="write toy models and synthetic image sets")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_fixtures)

    s = sub.add_parser("quantize", help="fold, drop dead channels, quantize")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--bits-w", type=int, default=8)
    s.add_argument("--bits-a", type=int, default=8)
    s.add_argument("--bits-b", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("analyze", help="per-channel and per-layer quantization error statistics")
    s.add_argument("--model", help="full-precision model (default: the quantized model's base graph)")
    s.add_argument("--qmodel", required=True)
    s.add_argument("--batch", required=True)
    s.add_argument("--where", choices=("post", "pre"), default="post")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("eval", help="top-1 and teacher-student cross-entropy")
    s.add_argument("--model")
    s.add_argument("--qmodel")
    s.add_argument("--data", required=True)
    s.add_argument("--labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ibc", help="iterative bias correction")
    s.add_argument("--model")
    s.add_argument("--qmodel", required=True)
    s.add_argument("--batch", required=True)
    s.add_argument("--mode", choices=("post", "pre"), default="post")
    s.add_argument("--no-requantize", action="store_true", help="keep corrected biases in full precision")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ibc)

    s = sub.add_parser("bft", help="bias fine-tuning")
    s.add_argument("--model")
    s.add_argument("--qmodel", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--schedule", default="1e-3x16,1e-4x16,1e-5x16,1e-6x16")
    s.add_argument("--minibatch", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bft)

    s = sub.add_parser("theory", help="Monte Carlo rounding-error and MSSR scaling simulation")
    s.add_argument("--k", type=_int_list, default=[9, 27, 128, 512])
    s.add_argument("--trials", type=int, default=10_000)
    s.add_argument("--bits", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_theory)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        out, inputs = args.func(args)
        _write_manifest(out, args, inputs, started)
    except CliError as exc:
        print(f"qbias {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (FloatingPointError, IbcError) as exc:
        print(f"qbias {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"qbias {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"qbias {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
