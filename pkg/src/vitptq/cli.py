"""Command-line interface.

Exit status: 0 on success, 1 for invalid input (bad flags, missing or
malformed files, rejected config), 2 when a run fails.
"""

import argparse
import logging
import os
import sys

from . import analysis, reports
from .checkpoint import CheckpointError, fixture_path, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .dataset import DatasetError, import_image_folder, load_calibration, load_dataset, write_dataset
from .pipeline import LOSS_KINDS, VarianceProbeConfig, evaluate, quantize_model
from .synthetic import make_images
from .vit import LINEARS, ViT

log = logging.getLogger("vitptq")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p, calib=True, model=True):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="seed for every random stream (default 0)")
    if model:
        p.add_argument("--model", help="checkpoint to start from (default: bundled fixture)")
    if calib:
        p.add_argument("--calib", help="calibration dataset directory")
        p.add_argument("--calib-size", type=int, help="calibration samples N (default 1024)")


def _add_quant(p):
    p.add_argument("--wbits", type=int)
    p.add_argument("--abits", type=int)
    p.add_argument("--iters", type=int, help="reconstruction iterations per block")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mr-iters", type=int, help="MLP reconstruction iterations per block")


def build_parser():
    ap = _Parser(prog="vitptq", description="Post-training quantization of small Vision Transformers.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quantize", help="quantize a model block by block")
    _add_common(p)
    _add_quant(p)
    p.add_argument("--loss", choices=LOSS_KINDS)
    p.add_argument("--mlp-recon", action="store_true", default=None, help="rebuild each MLP with ReLU first")
    p.add_argument("--eval", help="labeled dataset to report accuracy on")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--report", help="JSON run report path")

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _add_common(p, calib=False)
    p.add_argument("--data", help="labeled dataset directory")
    p.add_argument("--report", help="JSON report path")

    p = sub.add_parser("compare-losses", help="accuracy per reconstruction loss")
    _add_common(p)
    _add_quant(p)
    p.add_argument("--eval", help="labeled dataset directory")
    p.add_argument("--mr", choices=("off", "on", "both"), default="off",
                   help="MLP reconstruction setting(s) to run (default off: one row per loss)")
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("export-hessian", help="token/channel importance of the averaged Hessian")
    _add_common(p)
    p.add_argument("--block", type=int, action="append", help="block index (repeatable; default all)")
    p.add_argument("--out-dir", help="directory for token_importance.csv and channel_importance.csv")

    p = sub.add_parser("export-ranges", help="per-layer activation quantile ranges")
    _add_common(p)
    p.add_argument("--mlp-recon", action="store_true", help="also report ranges after MLP reconstruction")
    p.add_argument("--mr-iters", type=int)
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("probe-variance", help="PH vs APH mini-batch gradient variance")
    _add_common(p)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--layer", choices=LINEARS, default="fc1")
    p.add_argument("--wbits", type=int, default=3)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--minibatches", type=int, default=32)
    p.add_argument("--curve-iters", type=int, default=500)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--curves", help="optional CSV of both loss curves")

    p = sub.add_parser("gen-data", help="write a synthetic grating dataset")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("import-images", help="convert an image-folder tree into the dataset format")
    p.add_argument("--src", help="root with one subdirectory per class")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--size", type=int, default=32)
    return ap


def _need(args, flag):
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _need_dir(args, flag):
    path = _need(args, flag)
    if not os.path.isdir(path):
        raise UsageError(f"{flag}: dataset directory {path!r} does not exist")
    return path


def _run_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.override("reconstruction", weight_bits=getattr(args, "wbits", None),
                        activation_bits=getattr(args, "abits", None), max_iterations=getattr(args, "iters", None),
                        batch_size=getattr(args, "batch_size", None), calibration_size=getattr(args, "calib_size", None),
                        loss_kind=getattr(args, "loss", None)).override(
        "mlp", max_iterations=getattr(args, "mr_iters", None))


def _model(args, cfg):
    path = args.model or cfg.paths.model or fixture_path()
    if not os.path.exists(path):
        raise UsageError(f"--model: checkpoint {path!r} does not exist")
    model = load_checkpoint(path)
    if not isinstance(model, ViT):
        raise UsageError(f"--model: {path!r} is already quantized; expected a full-precision checkpoint")
    return model


def _calibration(args, cfg):
    if args.calib is None and cfg.paths.calibration:
        args.calib = cfg.paths.calibration
    path = _need_dir(args, "--calib")
    r = cfg.reconstruction
    return load_calibration(path, r.calibration_size, r.seed)


def cmd_quantize(args):
    cfg = _run_config(args)
    enable_mr = cfg.enable_mr if args.mlp_recon is None else True
    out = args.out or cfg.paths.output
    report_path = args.report or cfg.paths.report
    if out is None:
        raise UsageError("--out is required")
    eval_dir = args.eval or cfg.paths.eval
    if eval_dir is not None and not os.path.isdir(eval_dir):
        raise UsageError(f"--eval: dataset directory {eval_dir!r} does not exist")
    model = _model(args, cfg)
    calib = _calibration(args, cfg)
    qm, report, timings = quantize_model(model, calib, cfg.reconstruction, enable_mr, cfg.mlp, cfg.perturbation)
    qm.provenance["run_config_hash"] = cfg.digest()
    if eval_dir is not None:
        eval_set = load_dataset(eval_dir)
        report["accuracy"] = evaluate(qm, eval_set)
        report["fp_accuracy"] = evaluate(model, eval_set)
        print(f"accuracy {report['accuracy']:.4f} (full precision {report['fp_accuracy']:.4f})")
    save_checkpoint(qm, out)
    if report_path:
        report["run_config"] = cfg.to_dict()
        reports.write_json(report_path, report, cfg.digest(), cfg.reconstruction.seed)
        reports.write_timings(report_path, timings)
    print(f"wrote {out}")
    return 0


def cmd_eval(args):
    data = _need_dir(args, "--data")
    path = args.model or fixture_path()
    if not os.path.exists(path):
        raise UsageError(f"--model: checkpoint {path!r} does not exist")
    model = load_checkpoint(path)
    acc = evaluate(model, load_dataset(data))
    print(f"accuracy {acc:.4f}")
    if args.report:
        prov = getattr(model, "provenance", {})
        reports.write_json(args.report, {"accuracy": acc, "model": path, "data": data},
                           prov.get("config_hash", "float"), prov.get("seed", args.seed))
    return 0


def cmd_compare_losses(args):
    cfg = _run_config(args)
    out = _need(args, "--out")
    eval_dir = _need_dir(args, "--eval")
    model = _model(args, cfg)
    calib = _calibration(args, cfg)
    modes = {"off": (False,), "on": (True,), "both": (False, True)}[args.mr]
    rows = analysis.compare_losses(model, calib, load_dataset(eval_dir), cfg.reconstruction, modes,
                                   mr_cfg=cfg.mlp, hcfg=cfg.perturbation)
    reports.write_csv(out, analysis.COMPARE_HEADER, rows, cfg.digest(), cfg.reconstruction.seed)
    for r in rows:
        print(f"{r[0]:>4} mr={r[1]} accuracy {r[5]:.4f}")
    return 0


def cmd_export_hessian(args):
    cfg = _run_config(args)
    out_dir = _need(args, "--out-dir")
    model = _model(args, cfg)
    blocks = args.block
    for b in blocks or ():
        if not 0 <= b < model.depth:
            raise UsageError(f"--block {b} outside [0, {model.depth})")
    tokens, channels = analysis.hessian_importance(model, _calibration(args, cfg), blocks, cfg.perturbation)
    os.makedirs(out_dir, exist_ok=True)
    h, seed = cfg.digest(), cfg.reconstruction.seed
    reports.write_csv(os.path.join(out_dir, "token_importance.csv"), analysis.TOKEN_HEADER, tokens, h, seed)
    reports.write_csv(os.path.join(out_dir, "channel_importance.csv"), analysis.CHANNEL_HEADER, channels, h, seed)
    print(f"wrote {out_dir}")
    return 0


def cmd_export_ranges(args):
    cfg = _run_config(args)
    out = _need(args, "--out")
    model = _model(args, cfg)
    rows = analysis.activation_ranges(model, _calibration(args, cfg), args.mlp_recon, cfg.mlp, cfg.perturbation)
    reports.write_csv(out, analysis.RANGE_HEADER, rows, cfg.digest(), cfg.reconstruction.seed)
    print(f"wrote {out}")
    return 0


def cmd_probe_variance(args):
    cfg = _run_config(args)
    out = _need(args, "--out")
    model = _model(args, cfg)
    if not 0 <= args.block < model.depth:
        raise UsageError(f"--block {args.block} outside [0, {model.depth})")
    try:
        pcfg = VarianceProbeConfig(layer=args.layer, weight_bits=args.wbits, trials=args.trials,
                                   minibatches=args.minibatches, curve_iterations=args.curve_iters,
                                   seed=cfg.reconstruction.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    rep = analysis.probe_variance(model, _calibration(args, cfg), args.block, pcfg, cfg.perturbation,
                                  cfg.reconstruction)
    h, seed = cfg.digest(), cfg.reconstruction.seed
    reports.write_json(out, rep, h, seed)
    if args.curves and "loss_curves" in rep:
        c = rep["loss_curves"]
        reports.write_csv(args.curves, ("iteration", "ph", "aph"),
                          [(i, p, a) for i, (p, a) in enumerate(zip(c["ph"], c["aph"]))], h, seed)
    print(f"APH variance <= PH variance in {rep['aph_not_worse']}/{len(rep['trials'])} trials")
    return 0


def cmd_gen_data(args):
    out = _need(args, "--out")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    x, y = make_images(args.n, args.seed)
    write_dataset(out, x, y)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_import_images(args):
    src = _need(args, "--src")
    out = _need(args, "--out")
    classes = import_image_folder(src, out, args.size)
    print(f"imported {len(classes)} classes into {out}")
    return 0


COMMANDS = {"quantize": cmd_quantize, "eval": cmd_eval, "compare-losses": cmd_compare_losses,
            "export-hessian": cmd_export_hessian, "export-ranges": cmd_export_ranges,
            "probe-variance": cmd_probe_variance, "gen-data": cmd_gen_data, "import-images": cmd_import_images}

VALIDATION_ERRORS = (UsageError, ConfigError, DatasetError, CheckpointError)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
