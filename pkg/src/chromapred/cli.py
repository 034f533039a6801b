"""Command-line front end.

Every subcommand resolves its options as flags > ``--config`` JSON > built-in
defaults, writes outputs atomically and records the resolved configuration
next to (or inside) what it writes. Failures print one line
``error: <kind>: <detail>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text
from .dataset import (
    ContainerError,
    CorpusConfig,
    PredictionRecord,
    encode_blocks,
    encode_predictions,
    extract_corpus,
    prepare_planes,
    read_blocks,
    read_image,
)
from .evaluation import DEFAULT_BINS, chroma_gini, evaluate_model, predict_blocks
from .integerize import (
    IntegerModel,
    OverflowAuditError,
    QuantConfig,
    dumps_integer_model,
    integer_model_from_dict,
    int_forward_block,
    quantize_model,
)
from .model import (
    VARIANTS,
    ModelFormatError,
    ModelWeights,
    SchemeId,
    count_params,
    dumps_model,
    fuse_model,
    model_from_dict,
)
from .training import TrainConfig, TrainingDiverged, train_multimodel

EXIT_USAGE = 2
EXIT_FAILURE = 1

# option name -> default; None means "required"
DEFAULTS: dict[str, dict] = {
    "extract": {"corpus": None, "out": None, "per_image": 8, "sizes": "4,8,16", "seed": 0,
                "matrix": "bt601", "bitdepth": 8, "scales": "1,0.5,0.3333333333333333,0.25"},
    "train": {"blocks": None, "scheme": "1", "variant": "default", "epochs": 10, "lr": 1e-4, "out": None,
              "batch_size": 32, "seed": 0, "sizes": "4,8,16", "log": None, "checkpoint": None},
    "fuse": {"in": None, "out": None},
    "quantize": {"in": None, "out": None, "ox": 24, "oe": 16, "os": 30, "ve": -15, "q": 1024, "frac_bits": 4},
    "predict": {"model": None, "blocks": None, "out": None},
    "eval": {"model": None, "blocks": None, "report": None, "name": None, "bins": DEFAULT_BINS},
    "inspect": {"model": None},
    "gini": {"image": None, "bins": DEFAULT_BINS, "matrix": "bt601"},
}
OPTIONAL_NONE = {("train", "log"), ("train", "checkpoint"), ("eval", "name")}


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # one line instead of usage + message
        raise CliError("usage", message)


def _sizes(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chromapred", description="Attention-based chroma intra-prediction toolkit.")
    p.add_argument("--version", action="version", version=f"chromapred {__version__}")
    p.add_argument("--config", help="JSON file of option defaults (flat, or keyed by subcommand)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text, opts):
        sp = sub.add_parser(name, help=help_text)
        for flag, kw in opts:
            sp.add_argument(flag, default=None, **kw)
        return sp

    add("extract", "cut training/test blocks from an image directory", [
        ("--corpus", dict(help="directory of PPM/PGM/PNG images")),
        ("--out", dict(help="block container to write")),
        ("--per-image", dict(type=int, help="blocks per size per image")),
        ("--sizes", dict(help="comma-separated block sizes")),
        ("--seed", dict(type=int)),
        ("--matrix", dict(choices=["bt601", "bt709"])),
        ("--bitdepth", dict(type=int)),
        ("--scales", dict(help="comma-separated resize factors, one drawn per image")),
    ])
    add("train", "train a multi-model network", [
        ("--blocks", dict(help="block container")),
        ("--scheme", dict(choices=["1", "2"])),
        ("--variant", dict(choices=list(VARIANTS))),
        ("--epochs", dict(type=int)),
        ("--lr", dict(type=float)),
        ("--batch-size", dict(type=int)),
        ("--seed", dict(type=int)),
        ("--sizes", dict()),
        ("--log", dict(help="CSV training log (appended)")),
        ("--checkpoint", dict(help="model file rewritten after every epoch")),
        ("--out", dict(help="model file to write")),
    ])
    add("fuse", "merge linear layers of a training model into an inference model", [
        ("--in", dict(dest="in")), ("--out", dict()),
    ])
    add("quantize", "convert an inference model to fixed point", [
        ("--in", dict(dest="in")), ("--out", dict()),
        ("--ox", dict(type=int, help="internal offset O_x")),
        ("--oe", dict(type=int, help="LUT_EXP offset O_e")),
        ("--os", dict(type=int, help="LUT_SUM offset O_s")),
        ("--ve", dict(type=int, help="exponent clamp V_e (negative)")),
        ("--q", dict(type=int, help="LUT_SUM step Q")),
        ("--frac-bits", dict(type=int, help="fractional bits of the LUT_EXP grid")),
    ])
    add("predict", "predict chroma for every block of a container", [
        ("--model", dict()), ("--blocks", dict()), ("--out", dict()),
    ])
    add("eval", "per-size PSNR / Gini report", [
        ("--model", dict(help="model file, or a constant such as 0.5")),
        ("--blocks", dict()), ("--report", dict(help="CSV report to write")),
        ("--name", dict()), ("--bins", dict(type=int)),
    ])
    add("inspect", "print scheme, phase and parameter count of a model file", [("--model", dict())])
    add("gini", "Gini index of an image's chroma histograms", [
        ("--image", dict()), ("--bins", dict(type=int)), ("--matrix", dict(choices=["bt601", "bt709"])),
    ])
    return p


def _load_config(path: str | None, command: str) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-file", str(p))
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("bad-config", f"{p}: {exc.msg} at line {exc.lineno}") from exc
    if not isinstance(doc, dict):
        raise CliError("bad-config", f"{p}: top level must be an object")
    if command in doc and isinstance(doc[command], dict):
        doc = doc[command]
    else:
        doc = {k: v for k, v in doc.items() if k not in DEFAULTS}
    out = {}
    for key, value in doc.items():
        key = key.replace("-", "_")
        if key not in DEFAULTS[command]:
            raise CliError("bad-config", f"unknown option {key!r} for {command}")
        out[key] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults; check required options."""
    config = _load_config(args.config, command)
    resolved = {}
    for key, default in DEFAULTS[command].items():
        value = getattr(args, key, None)
        if value is None:
            value = config.get(key, default)
        if value is None and (command, key) not in OPTIONAL_NONE:
            raise CliError("missing-option", f"--{key.replace('_', '-')} is required for {command}")
        resolved[key] = value
    return resolved


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-file", str(p))
    return p


def load_any_model(path: str) -> ModelWeights | IntegerModel:
    p = _require_file(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("bad-model", f"{p}: not JSON ({exc.msg})") from exc
    kind = doc.get("kind") if isinstance(doc, dict) else None
    if kind == "float":
        return model_from_dict(doc)
    if kind == "integer":
        return integer_model_from_dict(doc)
    raise CliError("bad-model", f"{p}: unknown model kind {kind!r}")


def _load_float(path: str) -> ModelWeights:
    m = load_any_model(path)
    if not isinstance(m, ModelWeights):
        raise CliError("bad-model", f"{path}: expected a float model, found an integer model")
    return m


def _load_blocks(path: str):
    return read_blocks(_require_file(path))


def _write_meta(out: str, command: str, cfg: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "config": cfg}
    doc.update(extra or {})
    atomic_write_text(str(out) + ".meta.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands

def cmd_extract(cfg: dict) -> int:
    corpus = Path(cfg["corpus"])
    if not corpus.is_dir():
        raise CliError("missing-file", str(corpus))
    cc = CorpusConfig(str(corpus), per_image=int(cfg["per_image"]), sizes=_sizes(cfg["sizes"]),
                      seed=int(cfg["seed"]), matrix=cfg["matrix"], bitdepth=int(cfg["bitdepth"]),
                      scales=_floats(cfg["scales"]))
    blocks = extract_corpus(cc)
    atomic_write_bytes(cfg["out"], encode_blocks(blocks, cc.bitdepth))
    _write_meta(cfg["out"], "extract", cfg, {"n_blocks": len(blocks)})
    print(f"blocks={len(blocks)}")
    return 0


def cmd_train(cfg: dict) -> int:
    blocks = _load_blocks(cfg["blocks"])
    tc = TrainConfig(learning_rate=float(cfg["lr"]), epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                     seed=int(cfg["seed"]), sizes=_sizes(cfg["sizes"]))
    sid = SchemeId.from_variant(str(cfg["scheme"]), "train", cfg["variant"])
    try:
        w = train_multimodel(blocks, tc, sid, log_path=cfg["log"], checkpoint=cfg["checkpoint"])
    except TrainingDiverged as exc:
        raise CliError("diverged", str(exc)) from exc
    w.metadata["cli"] = cfg
    atomic_write_text(cfg["out"], dumps_model(w))
    final = w.metadata["history"][-1]["val"]
    print(" ".join(f"val_psnr_{n}={v['psnr']:.4f}" for n, v in final.items()))
    return 0


def cmd_fuse(cfg: dict) -> int:
    w = _load_float(cfg["in"])
    fused = fuse_model(w)
    fused.metadata["cli"] = cfg
    atomic_write_text(cfg["out"], dumps_model(fused))
    print(f"params={fused.n_params}")
    return 0


def cmd_quantize(cfg: dict) -> int:
    w = _load_float(cfg["in"])
    if w.spec.phase != "inference":
        raise CliError("wrong-phase", f"{cfg['in']}: quantize needs an inference-phase model; run fuse first")
    qc = QuantConfig(internal_offset=int(cfg["ox"]), exp_offset=int(cfg["oe"]), sum_offset=int(cfg["os"]),
                     v_e=int(cfg["ve"]), q=int(cfg["q"]), exp_frac_bits=int(cfg["frac_bits"]))
    try:
        m = quantize_model(w, qc)
    except OverflowAuditError as exc:
        raise CliError("overflow", str(exc)) from exc
    m.metadata["cli"] = cfg
    atomic_write_text(cfg["out"], dumps_integer_model(m))
    print(f"lut_bytes={m.lut_bytes}")
    return 0


def cmd_predict(cfg: dict) -> int:
    model = load_any_model(cfg["model"])
    blocks = _load_blocks(cfg["blocks"])
    bitdepth = blocks[0].bitdepth if blocks else 8
    records = []
    if isinstance(model, IntegerModel):
        for b in blocks:
            records.append(PredictionRecord(b.n, b.origin, int_forward_block(model, b).astype(np.uint16)))
    else:
        for b, p in zip(blocks, predict_blocks(model, blocks)):
            samples = np.floor(p * b.peak + 0.5).astype(np.uint16)
            records.append(PredictionRecord(b.n, b.origin, samples))
    atomic_write_bytes(cfg["out"], encode_predictions(records, bitdepth))
    _write_meta(cfg["out"], "predict", cfg, {"path": "integer" if isinstance(model, IntegerModel) else "float"})
    print(f"records={len(records)}")
    return 0


def cmd_eval(cfg: dict) -> int:
    try:
        model = float(cfg["model"])
        name = cfg["name"] or f"constant-{model:g}"
    except ValueError:
        model = load_any_model(cfg["model"])
        name = cfg["name"] or Path(cfg["model"]).stem
    blocks = _load_blocks(cfg["blocks"])
    if not blocks:
        raise CliError("empty-input", f"{cfg['blocks']}: no blocks to evaluate")
    rep = evaluate_model(model, blocks, name, int(cfg["bins"]))
    atomic_write_text(cfg["report"], rep.to_csv())
    _write_meta(cfg["report"], "eval", cfg)
    for r in rep.rows:
        print(f"size={r.size} n={r.n_blocks} psnr_db={r.psnr_db:.4f}")
    return 0


def cmd_inspect(cfg: dict) -> int:
    m = load_any_model(cfg["model"])
    if isinstance(m, IntegerModel):
        spec = m.float_spec()
        print(f"kind=integer scheme={m.scheme} phase=inference variant={m.variant} "
              f"params={count_params(spec)} lut_bytes={m.lut_bytes}")
    else:
        print(f"kind=float scheme={m.spec.scheme} phase={m.spec.phase} variant={m.spec.scheme_id.variant} "
              f"params={m.n_params}")
    return 0


def cmd_gini(cfg: dict) -> int:
    rgb = read_image(_require_file(cfg["image"]))
    _, cb, cr = prepare_planes(rgb, cfg["matrix"], 8)
    g_cb, g_cr = chroma_gini(cb / 255.0, cr / 255.0, int(cfg["bins"]))
    print(f"gini_cb={g_cb:.6f} gini_cr={g_cr:.6f}")
    return 0


COMMANDS = {
    "extract": cmd_extract, "train": cmd_train, "fuse": cmd_fuse, "quantize": cmd_quantize,
    "predict": cmd_predict, "eval": cmd_eval, "inspect": cmd_inspect, "gini": cmd_gini,
}


def _classify(exc: Exception) -> CliError:
    if isinstance(exc, CliError):
        return exc
    msg = " ".join(str(exc).split())
    if isinstance(exc, (ModelFormatError, ContainerError)) and "version" in msg:
        return CliError("format-version", msg)
    if isinstance(exc, (ModelFormatError, ContainerError)):
        return CliError("bad-format", msg)
    if isinstance(exc, FileNotFoundError):
        return CliError("missing-file", exc.filename or msg)
    if isinstance(exc, (KeyError, TypeError, ValueError)):
        return CliError("invalid", msg or type(exc).__name__)
    return CliError("internal", f"{type(exc).__name__}: {msg}")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](resolve(args.command, args))
    except CliError as exc:
        print(f"error: {exc.kind}: {exc.detail}", file=sys.stderr)
        return EXIT_USAGE if exc.kind == "usage" else EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - reported as one line
        err = _classify(exc)
        print(f"error: {err.kind}: {err.detail}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
