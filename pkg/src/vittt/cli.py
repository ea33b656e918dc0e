"""Command-line interface: ``vittt <command> [options]``.

Exit codes: 0 success, 1 property violation, 2 usage or configuration error,
3 numeric abort (NaN/Inf).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from vittt import __version__
from vittt import tensor as K

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _pair(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise ValueError(f"expected H,W got {text!r}")
    return parts[0], parts[1]


def _ints(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


SCHEMA: dict[str, dict[str, object]] = {
    "model": {"preset": str, "image_size": _pair, "patch_size": int, "channels": int, "depth": int,
              "pool_strategy": str, "num_classes": int, "norm_eps": float},
    "ttt": {"num_heads": int, "head_dim": int, "minibatch_size": int, "eta_base": float, "descent_mode": str,
            "inner_model": str, "form": str, "ln_eps": float},
    "block": {"gate": str, "bidirectional": _bool, "w0_mode": str, "conv1d_size": int, "conv2d_size": int,
              "norm_eps": float},
    "train": {"steps": int, "batch_size": int, "lr": float, "optimizer": str, "weight_decay": float,
              "momentum": float, "eval_every": int, "val_fraction": float, "patience": _optional_int,
              "min_delta": float, "samples": int, "shuffle_labels": _bool, "data_seed": int},
    "bench": {"arch": str, "T": _ints, "D": int, "d": int, "b": int, "B": int, "N": int, "timing": _bool,
              "repeats": int, "warmup": int, "budget": float},
    "interpret": {"layer": int, "direction": str, "top_percent": float, "probe": str, "max_fd_evals": int,
                  "stem": str},
    "verify": {"seeds": int, "T": _optional_int, "max_coords": _optional_int},
}


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, object]]:
    """Parse the key=value file and ``section.key=value`` overrides into typed values."""
    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (T, D, B)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise UsageError(f"malformed config file: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                raise UsageError(f"unknown config section [{section}]")
            raw[section].update(parser[section])
    for item in overrides:
        key, sep, val = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if section not in SCHEMA:
            raise UsageError(f"unknown config section {section!r}")
        raw[section][name] = val.strip()
    typed: dict[str, dict[str, object]] = {}
    for section, items in raw.items():
        typed[section] = {}
        for name, val in items.items():
            if name not in SCHEMA[section]:
                raise UsageError(f"unknown key {section}.{name}")
            try:
                typed[section][name] = SCHEMA[section][name](val)
            except ValueError as exc:
                raise UsageError(f"bad value for {section}.{name}: {exc}") from exc
    return typed


def build_model_config(conf: dict):
    from vittt.backbone import preset

    model = dict(conf.get("model", {}))
    name = model.pop("preset", "micro")
    try:
        return preset(name, ttt=dict(conf.get("ttt", {})), block=dict(conf.get("block", {})), **model)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from exc


def build_train_config(conf: dict, seed: int, out: Path):
    from vittt.training import TrainConfig

    train = {k: v for k, v in conf.get("train", {}).items() if k not in ("samples", "shuffle_labels", "data_seed")}
    try:
        return TrainConfig(seed=seed, dump_dir=str(out), **train)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid train configuration: {exc}") from exc


# -- shared helpers ----------------------------------------------------------


def write_manifest(out: Path, args: argparse.Namespace, conf: dict, extra: dict | None = None) -> Path:
    manifest = {
        "version": __version__,
        "command": args.command,
        "argv": [a for a in (args.argv or [])],
        "seed": args.seed,
        "precision": args.precision,
        "threads": args.threads,
        "config": conf,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=list) + "\n")
    return path


def _resolve_model(spec: str, conf: dict, seed: int):
    from vittt.backbone import Model
    from vittt.checkpoint import FormatError, load_model

    if spec == "fresh":
        return Model.fresh(build_model_config(conf), seed)
    if not Path(spec).is_file():
        raise UsageError(f"checkpoint {spec} not found")
    try:
        params, cfg = load_model(spec)
    except FormatError as exc:
        raise UsageError(str(exc)) from exc
    return Model(cfg, params)


def _check_model_spec(spec: str, conf: dict) -> None:
    if spec == "fresh":
        build_model_config(conf)
    elif not Path(spec).is_file():
        raise UsageError(f"checkpoint {spec} not found")


def _resolve_image(spec: str, model, seed: int) -> np.ndarray:
    """``zeros``, ``random``, ``blob:<index>``, a ``.npy`` file, or a container with an ``image`` tensor."""
    from vittt.checkpoint import FormatError, read_container
    from vittt.training import blob_dataset

    cfg = model.cfg
    shape = (*cfg.image_size, cfg.channels)
    if spec == "zeros":
        return np.zeros(shape, dtype=K.get_dtype())
    if spec == "random":
        return K.asarray(np.random.default_rng(seed).standard_normal(shape))
    if spec.startswith("blob:"):
        idx = int(spec.split(":", 1)[1])
        data = blob_dataset(idx + 1, cfg.image_size[0], cfg.channels, cfg.num_classes, seed=seed)
        return data.images[idx]
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"image {spec} not found")
    try:
        img = np.load(path) if path.suffix == ".npy" else read_container(path)["image"]
    except (FormatError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read image {spec}: {exc}") from exc
    if img.shape != shape:
        raise UsageError(f"image shape {img.shape} does not match model input {shape}")
    return K.asarray(img)


def _check_image_spec(spec: str) -> None:
    if spec in ("zeros", "random"):
        return
    if spec.startswith("blob:"):
        try:
            if int(spec.split(":", 1)[1]) < 0:
                raise ValueError
        except ValueError:
            raise UsageError(f"bad blob index in {spec!r}") from None
        return
    if not Path(spec).is_file():
        raise UsageError(f"image {spec} not found")


def _section(conf: dict, name: str, args: argparse.Namespace, keys: tuple[str, ...]) -> dict:
    """Merge explicit command flags into config section ``name`` (flags win)."""
    sec = conf.setdefault(name, {})
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            sec[key] = val
    return sec


# -- commands ----------------------------------------------------------------


def cmd_verify(args, conf) -> int:
    from vittt.verify import SUITES, run_suite

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {SUITES}")
    if args.scale != "micro":
        raise UsageError("gradient checks only run at micro scale")
    sec = _section(conf, "verify", args, ("seeds", "T", "max_coords"))
    if sec.get("T") is not None and not 1 <= sec["T"] <= 64:
        raise UsageError("--T must lie in 1..64")
    out = _prepare_out(args)
    write_manifest(out, args, conf)
    res = run_suite(args.suite, sec.get("seeds"), args.seed, sec.get("T"), sec.get("max_coords"))
    report = asdict(res)
    (out / f"verify_{args.suite}.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=float) + "\n")
    print(res.summary())
    return EXIT_OK if res.passed else EXIT_VIOLATION


def cmd_train_toy(args, conf) -> int:
    from vittt.checkpoint import FormatError, load_dataset, save_model
    from vittt.training import Dataset, blob_dataset, train_toy

    sec = _section(conf, "train", args, ("steps", "lr", "optimizer", "batch_size", "val_fraction", "patience",
                                          "samples"))
    if args.shuffle_labels:
        sec["shuffle_labels"] = True
    cfg = build_model_config(conf)
    out = Path(args.out)
    tcfg = build_train_config(conf, args.seed, out)
    if args.data is not None:
        if not Path(args.data).is_dir():
            raise UsageError(f"dataset directory {args.data} not found")
        try:
            images, labels = load_dataset(args.data)
        except (FormatError, FileNotFoundError) as exc:
            raise UsageError(str(exc)) from exc
        data = Dataset(K.asarray(images), labels)
        if data.images.shape[1:] != (*cfg.image_size, cfg.channels):
            raise UsageError(f"dataset images {data.images.shape[1:]} do not match the model input")
    else:
        data = blob_dataset(sec.get("samples", 200), cfg.image_size[0], cfg.channels, cfg.num_classes,
                            seed=sec.get("data_seed", 0))
    if sec.get("shuffle_labels"):
        data = Dataset(data.images, np.random.default_rng([args.seed, 2]).permutation(data.labels))
    out = _prepare_out(args)
    write_manifest(out, args, conf)

    res = train_toy(data, cfg, tcfg)
    save_model(out / "model.vttt", res.params, cfg)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "batch_accuracy"])
        for e in res.log.steps:
            w.writerow([e["step"], repr(e["loss"]), repr(e["batch_accuracy"])])
    summary = {"train_accuracy": res.train_accuracy, "val_accuracy": res.val_accuracy,
               "best_step": res.log.best_step, "stopped_early": res.log.stopped_early, "evals": res.log.evals}
    (out / "train_report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"train accuracy {res.train_accuracy:.3f} after {len(res.log.steps)} steps; checkpoint {out / 'model.vttt'}")
    return EXIT_OK


def cmd_infer(args, conf) -> int:
    _check_model_spec(args.checkpoint, conf)
    _check_image_spec(args.image)
    model = _resolve_model(args.checkpoint, conf, args.seed)
    image = _resolve_image(args.image, model, args.seed)
    out = _prepare_out(args)
    write_manifest(out, args, conf)
    logits = model.logits(image)[0]
    with open(out / "logits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "logit"])
        for c, v in enumerate(logits):
            w.writerow([c, repr(float(v))])
    print(f"predicted class {int(np.argmax(logits))}")
    return EXIT_OK


def cmd_gmm(args, conf) -> int:
    from vittt.interpret import export_gmm, gmm_extract

    _check_model_spec(args.checkpoint, conf)
    _check_image_spec(args.image)
    sec = _section(conf, "interpret", args, ("layer", "direction", "top_percent", "stem"))
    model = _resolve_model(args.checkpoint, conf, args.seed)
    image = _resolve_image(args.image, model, args.seed)
    try:
        gmm = gmm_extract(model, image, sec.get("layer", -1), sec.get("direction", "forth"),
                          sec.get("top_percent", 30.0))
    except (ValueError, IndexError) as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args)
    write_manifest(out, args, conf, {"coefficient_of_variation": gmm.coefficient_of_variation})
    paths = export_gmm(gmm, out, sec.get("stem", "image"))
    print(f"wrote {', '.join(p.name for p in paths)} (coefficient of variation {gmm.coefficient_of_variation:.4f})")
    return EXIT_OK


def cmd_erf(args, conf) -> int:
    from vittt.interpret import CostGuardError, erf_compute, export_erf, finite_diff_evals

    _check_model_spec(args.checkpoint, conf)
    if args.image is not None:
        _check_image_spec(args.image)
    sec = _section(conf, "interpret", args, ("probe", "max_fd_evals", "stem"))
    probe, limit = sec.get("probe", "autodiff"), sec.get("max_fd_evals", 4096)
    if probe not in ("autodiff", "finite_diff"):
        raise UsageError(f"unknown probe {probe!r}")
    model = _resolve_model(args.checkpoint, conf, args.seed)
    if probe == "finite_diff" and finite_diff_evals(model.cfg) > limit:
        raise UsageError(f"finite-difference ERF needs {finite_diff_evals(model.cfg)} forward passes (limit {limit})")
    image = None if args.image is None else _resolve_image(args.image, model, args.seed)
    out = _prepare_out(args)
    try:
        erf = erf_compute(model, image, probe, max_fd_evals=limit, seed=args.seed)
    except (CostGuardError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    write_manifest(out, args, conf)
    paths = export_erf(erf, out, sec.get("stem", "image"))
    print(f"wrote {', '.join(p.name for p in paths)}")
    return EXIT_OK


def cmd_bench(args, conf) -> int:
    from vittt.complexity import CostBudgetError, measure, write_csv

    sec = _section(conf, "bench", args, ("arch", "T", "D", "d", "b", "B"))
    if args.no_timing:
        sec["timing"] = False
    arch = sec.get("arch", "vittt")
    T_values = sec.get("T", [64, 256, 1024])
    try:
        reports = measure(arch, T_values, sec.get("D", 192), sec.get("d", 64), sec.get("b", 16), sec.get("B", 1),
                          sec.get("N", 16), seed=args.seed, threads=args.threads, timing=sec.get("timing", True),
                          repeats=sec.get("repeats", 5), warmup=sec.get("warmup", 2),
                          budget=sec.get("budget", 2e10))
    except (CostBudgetError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args)
    write_manifest(out, args, conf)
    path = write_csv(reports, out / f"bench_{arch}.csv")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_recon_trace(args, conf) -> int:
    from vittt.interpret import recon_trace

    _check_model_spec(args.checkpoint, conf)
    _check_image_spec(args.image)
    model = _resolve_model(args.checkpoint, conf, args.seed)
    image = _resolve_image(args.image, model, args.seed)
    out = _prepare_out(args)
    write_manifest(out, args, conf)
    path = recon_trace(model, image).write_csv(out / "recon_trace.csv")
    print(f"wrote {path}")
    return EXIT_OK


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file with [model], [ttt], [block], ... sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=("double", "single"), default="double")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")

    parser = argparse.ArgumentParser(prog="vittt", description="Test-time-training vision layers: "
                                     "verification suites, toy training, interpretability maps and benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run a property suite")
    p.add_argument("suite", help="dual_form, theorem1, theorem2, gradcheck or oracle")
    p.add_argument("--seeds", type=int)
    p.add_argument("--T", type=int, help="fixed sequence length for the theorem suites")
    p.add_argument("--scale", default="micro")
    p.add_argument("--max-coords", dest="max_coords", type=int, help="gradcheck: coordinates sampled per tensor")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train-toy", parents=[common], help="train on the synthetic blob set")
    p.add_argument("--data", help="dataset directory (default: generate the blob set)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adamw", "sgd"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--shuffle-labels", action="store_true")
    p.set_defaults(fn=cmd_train_toy)

    for name, fn, helptext in (("infer", cmd_infer, "write logits for one image"),
                               ("gmm", cmd_gmm, "gradient magnitude map"),
                               ("erf", cmd_erf, "effective receptive field"),
                               ("recon-trace", cmd_recon_trace, "reconstruction-loss traces")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", default="fresh", help="checkpoint file or 'fresh'")
        p.add_argument("--image", default=None if name == "erf" else "random",
                       help="zeros, random, blob:<i>, .npy file or container file")
        if name == "gmm":
            p.add_argument("--layer", type=int)
            p.add_argument("--direction", choices=("forth", "back"))
            p.add_argument("--top-percent", dest="top_percent", type=float)
            p.add_argument("--stem")
        if name == "erf":
            p.add_argument("--probe", choices=("autodiff", "finite_diff"))
            p.add_argument("--max-fd-evals", dest="max_fd_evals", type=int)
            p.add_argument("--stem")
        p.set_defaults(fn=fn)

    p = sub.add_parser("bench", parents=[common], help="MAC counts and wall time over a T sweep")
    p.add_argument("--arch", choices=("vittt", "attention", "vim", "vit"))
    p.add_argument("--T", type=_ints, help="comma-separated sequence lengths")
    p.add_argument("--D", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = argv
    from vittt.training import NumericAbort

    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        conf = load_config(args.config, args.set)
        with K.precision(args.precision), threadpool_limits(limits=args.threads):
            return args.fn(args, conf)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericAbort, K.NonFiniteError, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
