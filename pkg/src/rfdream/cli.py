"""Command-line front end.

Every subcommand resolves its options from built-in defaults, an optional
``--config`` JSON file and explicit flags (in increasing priority).  The
resolved options form the run config whose digest is embedded in every JSON
output.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import netgraph, ppm, rfgeom, toyscene
from .analyzer import specificity_report
from .dreamer import DreamConfig, batch_outcomes
from .exceptions import (FormatError, NonFiniteError, NotApplicableError, ParameterError,
                         ShapeError, StalledError)
from .netgraph import Injection, NodeRef

log = logging.getLogger("rfdream")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_DREAM_OPTIONS = {
    "step_size": (float, 0.05),
    "max_iters": (int, 512),
    "stability_tol": (float, 1e-4),
    "jitter_radius": (int, 0),
}

# name -> (type, default); a default of None marks a required option
OPTIONS = {
    "init-model": {
        "arch": (str, "rfnet-64"),
        "num_classes": (int, 4),
        "seed": (int, 0),
        "out": (str, None),
    },
    "train": {
        "model": (str, None),
        "data_seed": (int, 0),
        "n_per_class": (int, 2000),
        "epochs": (int, 10),
        "lr": (float, 0.01),
        "batch_size": (int, 32),
        "train_seed": (int, 0),
        "out": (str, None),
        "loss_out": (str, ""),
    },
    "describe-rf": {
        "model": (str, None),
        "out": (str, ""),
    },
    "dream": {
        "model": (str, None),
        "layer": (str, None),
        "channel": (int, None),
        "row": (int, None),
        "col": (int, None),
        "seed": (int, 0),
        "outcomes": (int, 3),
        "outdir": (str, None),
        **_DREAM_OPTIONS,
    },
    "tile": {
        "model": (str, None),
        "layer": (str, None),
        "channel": (int, None),
        "seed": (int, 0),
        "outcomes": (int, 3),
        "outdir": (str, None),
        **_DREAM_OPTIONS,
    },
    "analyze": {
        "model": (str, None),
        "layer": (str, None),
        "channel": (int, None),
        "positions": (str, None),
        "seed": (int, 0),
        "outcomes": (int, 3),
        "outdir": (str, None),
        **_DREAM_OPTIONS,
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfdream",
        description="Receptive-field position effects in convolutional networks.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with option values; flags override it")
        for key, (typ, default) in options.items():
            hint = "required" if default is None else f"default: {default!r}"
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=hint)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags."""
    options = OPTIONS[command]
    cfg = {key: default for key, (_, default) in options.items()}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise FormatError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(options))
        if unknown:
            raise ParameterError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in doc.items():
            cfg[key] = options[key][0](value)
    for key in options:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    missing = [key for key, value in cfg.items() if value is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ParameterError(f"missing required option(s): {flags}")
    return cfg


def config_digest(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance(cfg, model) -> dict:
    return {"run_config": cfg, "run_config_digest": config_digest(cfg), "model_digest": model.digest()}


def parse_layer(model: netgraph.ModelGraph, text: str) -> int:
    """Layer index from an integer or a layer name such as ``conv6``."""
    names = model.layer_names()
    if text in names:
        return names.index(text)
    try:
        layer = int(text)
    except ValueError:
        raise ParameterError(f"unknown layer {text!r}; choose an index or one of {names[1:]}") from None
    if not 1 <= layer <= model.n_layers:
        raise ParameterError(f"layer {layer} out of range 1..{model.n_layers}")
    return layer


def parse_positions(text: str) -> list[tuple[int, int]]:
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            r, c = (int(v) for v in chunk.split(","))
        except ValueError:
            raise ParameterError(f"bad position {chunk!r}; expected 'row,col'") from None
        out.append((r, c))
    if not out:
        raise ParameterError("no positions given")
    return out


def _dream_config(cfg) -> DreamConfig:
    return DreamConfig(step_size=cfg["step_size"], max_iters=cfg["max_iters"],
                       stability_tol=cfg["stability_tol"], jitter_radius=cfg["jitter_radius"],
                       seed=cfg["seed"])


def _check_spatial(model, layer, channel, row=None, col=None):
    spec = model.layers[layer - 1]
    if not spec.spatial:
        raise ParameterError(f"layer {layer} ({spec.kind}) has no spatial output")
    c, h, w = model.shapes[layer]
    if not 0 <= channel < c:
        raise ParameterError(f"channel {channel} out of range 0..{c - 1} for layer {layer}")
    if row is not None and not 0 <= row < h:
        raise ParameterError(f"row {row} out of range 0..{h - 1} for layer {layer}")
    if col is not None and not 0 <= col < w:
        raise ParameterError(f"col {col} out of range 0..{w - 1} for layer {layer}")


def _save_outcomes(outcomes, outdir, extra) -> None:
    os.makedirs(outdir, exist_ok=True)
    for i, outcome in enumerate(outcomes):
        stem = os.path.join(outdir, f"outcome_{i:02d}")
        ppm.write_ppm(outcome.image, stem + ".ppm")
        _write_json(stem + ".json", outcome.sidecar(**extra))


def cmd_init_model(cfg):
    model = netgraph.build(cfg["arch"], cfg["num_classes"], cfg["seed"])
    netgraph.save_model(model, cfg["out"])


def cmd_train(cfg):
    model = netgraph.load_model(cfg["model"])
    num_classes = model.shapes[-1][0]
    spec = toyscene.SceneSpec()
    if num_classes != spec.num_classes:
        raise ParameterError(f"model has {num_classes} outputs, scene dataset has {spec.num_classes} classes")
    ds = toyscene.gen_dataset(cfg["data_seed"], cfg["n_per_class"], spec)
    result = toyscene.train_toy(model, ds, cfg["epochs"], cfg["lr"], cfg["train_seed"],
                                cfg["batch_size"])
    netgraph.save_model(result.model, cfg["out"])
    doc = {"loss_curve": result.loss_curve, "val_accuracy": result.val_accuracy,
           **_provenance(cfg, result.model)}
    _write_json(cfg["loss_out"] or cfg["out"] + ".loss.json", doc)


def cmd_describe_rf(cfg):
    model = netgraph.load_model(cfg["model"])
    doc = {"layers": rfgeom.layer_table(model), "model_digest": model.digest()}
    if cfg["out"]:
        _write_json(cfg["out"], doc)
    else:
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def cmd_dream(cfg):
    model = netgraph.load_model(cfg["model"])
    layer = parse_layer(model, cfg["layer"])
    _check_spatial(model, layer, cfg["channel"], cfg["row"], cfg["col"])
    node = NodeRef(layer, cfg["channel"], cfg["row"], cfg["col"])
    outcomes = batch_outcomes(model, node, _dream_config(cfg), cfg["outcomes"])
    _save_outcomes(outcomes, cfg["outdir"], _provenance(cfg, model))


def cmd_tile(cfg):
    model = netgraph.load_model(cfg["model"])
    layer = parse_layer(model, cfg["layer"])
    _check_spatial(model, layer, cfg["channel"])
    inj = Injection.tiled(layer, cfg["channel"])
    outcomes = batch_outcomes(model, inj, _dream_config(cfg), cfg["outcomes"])
    _save_outcomes(outcomes, cfg["outdir"], _provenance(cfg, model))


def cmd_analyze(cfg):
    model = netgraph.load_model(cfg["model"])
    layer = parse_layer(model, cfg["layer"])
    positions = parse_positions(cfg["positions"])
    for r, c in positions:
        _check_spatial(model, layer, cfg["channel"], r, c)
    report = specificity_report(model, layer, cfg["channel"], positions, _dream_config(cfg),
                                cfg["outcomes"])
    prov = _provenance(cfg, model)
    os.makedirs(cfg["outdir"], exist_ok=True)
    for (r, c), outcomes in report.outcomes.items():
        _save_outcomes(outcomes, os.path.join(cfg["outdir"], f"pos_{r}_{c}"), prov)
    _write_json(os.path.join(cfg["outdir"], "report.json"), {**report.to_dict(), **prov})


HANDLERS = {
    "init-model": cmd_init_model,
    "train": cmd_train,
    "describe-rf": cmd_describe_rf,
    "dream": cmd_dream,
    "tile": cmd_tile,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        HANDLERS[args.command](cfg)
    except (ParameterError, ShapeError, NotApplicableError) as exc:
        print(f"rfdream {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"rfdream {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, StalledError) as exc:
        print(f"rfdream {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
