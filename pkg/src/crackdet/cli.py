"""Command-line driver: ``crackdet <command> [options]``.

Every command accepts ``--config file.json``; keys in the file use the
option names with underscores (``contrast_stop``, ``beta2_lo``, ...), and
options given on the command line override them.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import plotting
from .autodiff import load_checkpoint
from .errors import CrackDetError, EmptySample
from .evaluation import (COMPARISON_METHODS, calibrate_contrast_stop, compare_binarizers, evaluate_binary,
                         write_report)
from .hcnnfp import HCNNFP, NetworkConfig, TrainConfig, infer, load_dataset, train
from .hcnnfp.ablation import ablate_fpb
from .hcnnfp.tiling import sliding_window_infer
from .hcnnfp.training import DESK_LR, MASK_SUFFIX
from .imagecore import (load_binary_map, load_gray, load_mask, load_probability_map, save_binary_map,
                        save_qpm)
from .metrics import BetaRange
from .probmodel import GaussianClassModel, posterior_curve
from .synth import SyntheticSpec, write_dataset
from .thresholding import METHODS, ThresholdConfig, binarize

log = logging.getLogger("crackdet")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

# fallbacks for options that neither the command line nor the config file set
DEFAULTS = {
    "seed": 0, "workers": 1, "method": "cbat", "t": None, "contrast_stop": 0.90, "max_iterations": 16,
    "ittt_epsilon": 1e-3, "beta2_lo": 0.25, "beta2_hi": 0.30,
    "count": 250, "size": 64, "crack_ratio": 0.02, "strokes_min": 1, "strokes_max": 3,
    "width_min": 1, "width_max": 3, "texture_amplitude": 0.06, "noise_sigma": 0.02,
    "lr": DESK_LR, "epochs": 30, "batch_size": 4, "max_steps": None, "base_channels": 8, "input_size": 64,
    "no_fpb": False, "early_stop_delta": 1e-4, "validation_stop": False,
    "grid": "0.5,0.7,0.9,0.95,0.97", "window": 64, "stride": 32, "seeds": "0,1,2",
    "mu0": 0.2, "mu1": 0.8, "sigma": 0.1, "prior1": 0.02, "x_min": 0.0, "x_max": 1.0, "points": 101,
    "pooled": False, "methods": ",".join(COMPARISON_METHODS), "no_figures": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("common options")
    g.add_argument("--config", type=Path, help="JSON file of option defaults")
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--method", choices=METHODS)
    g.add_argument("--t", type=float, help="threshold for --method fixed")
    g.add_argument("--contrast-stop", type=float, help="CBAT contrast stop C_s")
    g.add_argument("--beta2-lo", type=float)
    g.add_argument("--beta2-hi", type=float)
    g.add_argument("--out", type=Path, help="output directory or file")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crackdet", description="Crack map binarization, evaluation and training.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    _common(p)
    for name, typ in [("count", int), ("size", int), ("crack-ratio", float), ("strokes-min", int),
                      ("strokes-max", int), ("width-min", int), ("width-max", int),
                      ("texture-amplitude", float), ("noise-sigma", float)]:
        p.add_argument(f"--{name}", type=typ)

    p = sub.add_parser("train", help="train the network on <stem>.png + <stem>.mask.png pairs")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--val", type=Path, help="held-out pairs for the validation loss")
    for name, typ in [("lr", float), ("epochs", int), ("batch-size", int), ("max-steps", int),
                      ("base-channels", int), ("input-size", int), ("early-stop-delta", float)]:
        p.add_argument(f"--{name}", type=typ)
    p.add_argument("--no-fpb", action="store_true", default=None, help="disable the feature-preserving branch")
    p.add_argument("--validation-stop", action="store_true", default=None)

    p = sub.add_parser("infer", help="write <stem>.qpm probability maps")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="image file or directory of images")

    p = sub.add_parser("binarize", help="threshold probability maps into <stem>.bin.png")
    _common(p)
    p.add_argument("--maps", type=Path, required=True, help="QPM/PNG file or directory")

    p = sub.add_parser("evaluate", help="score predictions against masks")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--methods", help="comma-separated binarizers used for probability maps")
    p.add_argument("--pooled", action="store_true", default=None, help="pool counts instead of averaging rows")
    p.add_argument("--no-figures", action="store_true", default=None)

    p = sub.add_parser("calibrate", help="choose C_s by mean AF on labeled maps")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--grid", help="comma-separated C_s values")

    p = sub.add_parser("demo-bayes", help="print the Gaussian crack posterior as CSV")
    _common(p)
    for name in ("mu0", "mu1", "sigma", "prior1", "x-min", "x-max"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--points", type=int)

    p = sub.add_parser("sliding-window", help="tile a large image through the network")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("ablate", help="train with and without the feature-preserving branch over seeds")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--seeds")
    for name, typ in [("lr", float), ("epochs", int), ("batch-size", int), ("max-steps", int),
                      ("base-channels", int), ("input-size", int)]:
        p.add_argument(f"--{name}", type=typ)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the config file and explicit flags (flags win)."""
    settings = dict(DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS) - set(vars(args)))
        if unknown:
            log.warning("ignoring unknown config keys: %s", ", ".join(unknown))
        settings.update({k: v for k, v in loaded.items() if k not in unknown})
    settings.update({k: v for k, v in vars(args).items() if v is not None})
    if settings["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    return settings


def _threshold_cfg(s: dict) -> ThresholdConfig:
    try:
        kw = dict(contrast_stop=s["contrast_stop"], max_iterations=s["max_iterations"],
                  ittt_epsilon=s["ittt_epsilon"])
        if s["t"] is not None:
            kw["fixed_threshold"] = s["t"]
        return ThresholdConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _beta_range(s: dict) -> BetaRange:
    try:
        return BetaRange(s["beta2_lo"], s["beta2_hi"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out(s: dict, default: str) -> Path:
    return Path(s.get("out") or default)


def _list(text, typ=float):
    try:
        return [typ(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from exc


def _files(path: Path, patterns) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CrackDetError(f"{path}: no such file or directory")
    found = sorted({f for pat in patterns for f in path.glob(pat)})
    return [f for f in found if not f.name.endswith((MASK_SUFFIX, ".bin.png"))]


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".bin.png", MASK_SUFFIX):
        if name.endswith(suffix):
            return name[:-len(suffix)]
    return path.stem


def _load_net(path: Path) -> HCNNFP:
    try:
        arrays = load_checkpoint(path)
    except CrackDetError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
    return HCNNFP.from_arrays(arrays)


# -- commands -------------------------------------------------------------------


def cmd_synth(s):
    try:
        spec = SyntheticSpec(count=s["count"], size=s["size"], strokes=(s["strokes_min"], s["strokes_max"]),
                             width=(s["width_min"], s["width_max"]), crack_ratio=s["crack_ratio"],
                             texture_amplitude=s["texture_amplitude"], noise_sigma=s["noise_sigma"],
                             seed=s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out(s, "synthetic")
    stems = write_dataset(spec, out)
    print(f"wrote {len(stems)} image/mask pairs to {out}")


def cmd_train(s):
    try:
        net_cfg = NetworkConfig(base_channels=s["base_channels"], input_size=s["input_size"],
                                fpb_enabled=not s["no_fpb"], seed=s["seed"])
        tcfg = TrainConfig(lr=s["lr"], max_epochs=s["epochs"], batch_size=s["batch_size"], seed=s["seed"],
                           max_steps=s["max_steps"], early_stop_delta=s["early_stop_delta"],
                           validation_stop=bool(s["validation_stop"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = load_dataset(s["data"])
    val = load_dataset(s["val"]) if s.get("val") else None
    out = _out(s, "run")
    out.mkdir(parents=True, exist_ok=True)
    net = HCNNFP(net_cfg)
    res = train(net, data, tcfg, val=val, log_path=out / "train_log.jsonl", checkpoint_path=out / "model.hckp")
    if not s["no_figures"]:
        plotting.plot_training_log(res.log, out / "train_loss.png")
    print(f"{res.steps} steps, stopped by {res.stop_reason}; final loss {res.log[-1]['loss']:.6f}; "
          f"checkpoint {out / 'model.hckp'}")


def cmd_infer(s):
    net = _load_net(s["checkpoint"])
    out = _out(s, "maps")
    out.mkdir(parents=True, exist_ok=True)
    files = _files(s["images"], ["*.png", "*.pgm"])
    for f in files:
        save_qpm(infer(net, load_gray(f)), out / f"{_stem(f)}.qpm")
    print(f"wrote {len(files)} probability maps to {out}")


def cmd_binarize(s):
    cfg = _threshold_cfg(s)
    out = _out(s, "binary")
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for f in _files(s["maps"], ["*.qpm", "*.png", "*.pgm"]):
        pred, thr = binarize(load_probability_map(f), s["method"], cfg, s["t"])
        save_binary_map(pred, out / f"{_stem(f)}.bin.png")
        summary.append({"id": _stem(f), "method": s["method"], "threshold": thr})
    (out / "thresholds.json").write_text(json.dumps(summary, indent=2))
    print(f"binarized {len(summary)} maps with {s['method']} into {out}")


def _prediction_items(pred_dir: Path, mask_dir: Path):
    """Pair every mask with a prediction: QPM maps first, then binary PNGs."""
    masks = sorted(mask_dir.glob(f"*{MASK_SUFFIX}"))
    if not masks:
        raise EmptySample(f"{mask_dir}: no *{MASK_SUFFIX} files")
    maps, binaries = [], []
    for m in masks:
        stem = m.name[:-len(MASK_SUFFIX)]
        gt = load_mask(m)
        for candidate, bucket, loader in ((pred_dir / f"{stem}.qpm", maps, load_probability_map),
                                          (pred_dir / f"{stem}.bin.png", binaries, load_binary_map),
                                          (pred_dir / f"{stem}{MASK_SUFFIX}", binaries, load_binary_map)):
            if candidate.exists():
                bucket.append((stem, loader(candidate), gt))
                break
        else:
            log.warning("no prediction for %s", stem)
    if maps and binaries:
        raise CrackDetError(f"{pred_dir}: mixes probability maps and binary maps")
    if not maps and not binaries:
        raise EmptySample(f"{pred_dir}: no predictions match the masks in {mask_dir}")
    return maps, binaries


def cmd_evaluate(s):
    rng = _beta_range(s)
    maps, binaries = _prediction_items(s["pred"], s["masks"])
    pooled = bool(s["pooled"])
    if maps:
        methods = _list(s["methods"], str)
        bad = sorted(set(methods) - set(METHODS))
        if bad:
            raise UsageError(f"unknown methods {bad}")
        report = compare_binarizers(maps, methods, _threshold_cfg(s), rng, s["workers"], pooled)
    else:
        report = evaluate_binary(binaries, "given", rng, pooled)
    out = _out(s, "report")
    paths = write_report(report, out)
    if not s["no_figures"]:
        paths.update(plotting.render_report_figures(report, out))
    for m in report["methods"]:
        agg = report["aggregate"][m]
        print(f"{m:>6}: AF {agg['af_beta']:.4f}  F@0.3 {agg['f_beta@0.3']:.4f}  MAE {agg['mae']:.5f}  "
              f"({agg['n_images']} images)")
    print("wrote " + ", ".join(str(p) for p in paths.values()))


def cmd_calibrate(s):
    maps, _ = _prediction_items(s["pred"], s["masks"])
    if not maps:
        raise EmptySample("calibration needs probability maps (<stem>.qpm)")
    grid = _list(s["grid"])
    best, table = calibrate_contrast_stop(maps, grid, _threshold_cfg(s), _beta_range(s))
    out = Path(s.get("out") or "calibrated.json")
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "calibrated.json"
    cfg = _threshold_cfg(s)
    out.write_text(json.dumps({"contrast_stop": best, "max_iterations": cfg.max_iterations,
                               "ittt_epsilon": cfg.ittt_epsilon, "sweep": table}, indent=2))
    plotting.plot_calibration(table, out.with_suffix(".png"))
    for row in table:
        print(f"C_s={row['contrast_stop']:<8g} mean AF={row['mean_af_beta']:.6f}")
    print(f"best C_s={best:g}; written to {out}")


def cmd_demo_bayes(s):
    try:
        model = GaussianClassModel(s["mu0"], s["mu1"], s["sigma"], s["prior1"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if s["points"] < 2:
        raise UsageError("--points must be >= 2")
    step = (s["x_max"] - s["x_min"]) / (s["points"] - 1)
    rows = posterior_curve(model, [s["x_min"] + i * step for i in range(s["points"])])
    writer = csv.writer(sys.stdout)
    writer.writerow(["x", "posterior_direct", "posterior_sigmoid"])
    writer.writerows([f"{v:.17g}" for v in r] for r in rows)
    if s.get("out"):
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "posterior.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "posterior_direct", "posterior_sigmoid"])
            w.writerows(rows)
        plotting.plot_posterior(rows, out / "posterior.png")


def cmd_sliding_window(s):
    net = _load_net(s["checkpoint"])
    pm = sliding_window_infer(net, load_gray(s["image"]), s["window"], s["stride"])
    out = Path(s.get("out") or f"{Path(s['image']).stem}.qpm")
    if out.suffix != ".qpm":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{Path(s['image']).stem}.qpm"
    save_qpm(pm, out)
    print(f"stitched {pm.height}x{pm.width} map written to {out}")


def cmd_ablate(s):
    seeds = _list(s["seeds"], int)
    if len(seeds) < 3:
        raise UsageError("the ablation needs at least 3 seeds")
    try:
        net_cfg = NetworkConfig(base_channels=s["base_channels"], input_size=s["input_size"])
        tcfg = TrainConfig(lr=s["lr"], max_epochs=s["epochs"], batch_size=s["batch_size"],
                           max_steps=s["max_steps"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = ablate_fpb(load_dataset(s["data"]), load_dataset(s["test"]), seeds, net_cfg, tcfg,
                        s["method"], _threshold_cfg(s), _beta_range(s))
    out = _out(s, "ablation")
    paths = write_report(report, out, stem="ablation")
    if not s["no_figures"]:
        paths.update(plotting.render_report_figures(report, out, stem="ablation"))
    for row in report["per_seed"]:
        print(f"{row['variant']:>8} seed {row['seed']}: AF {row['af_beta']:.4f}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "binarize": cmd_binarize,
    "evaluate": cmd_evaluate, "calibrate": cmd_calibrate, "demo-bayes": cmd_demo_bayes,
    "sliding-window": cmd_sliding_window, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](resolve(args))
    except UsageError as exc:
        print(f"crackdet {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CrackDetError as exc:
        print(f"crackdet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if exc.kind == "numeric" else EXIT_DATA
    except OSError as exc:
        print(f"crackdet {args.command}: IoFailure: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
