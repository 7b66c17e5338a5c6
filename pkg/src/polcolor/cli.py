"""Command-line front end: ``polcolor {synth,train,colorize,eval,decomp}``.

Every command accepts ``--config FILE`` with ``key=value`` lines (``#``
starts a comment); explicit flags override the file.  The effective
configuration is written next to the outputs as ``<command>_config.txt``,
itself a valid ``--config`` file.  Nothing time-dependent is written, so
equal configs give byte-identical outputs.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import decomp, evalmetrics, pipeline, polmath, synthdata
from . import rasterio as pras
from .polmath import Channel

log = logging.getLogger("polcolor")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3

CHANNEL_FILES = {Channel.HH: "hh.pras", Channel.HV: "hv.pras", Channel.VV: "vv.pras"}
COV_FILE = "cov.pras"
CLASS_FILE = "classes.pras"

SCALES = {
    "desk": (pipeline.DESK_EXTRACTOR, pipeline.DESK_TRANSLATOR),
    "paper": (pipeline.PAPER_EXTRACTOR, pipeline.PAPER_TRANSLATOR),
}

DEFAULTS = {
    "synth": {
        "out": None, "width": 64, "height": 64, "seed": 0, "region_model": "voronoi",
        "classes": "sea,vegetation,urban", "looks": 9, "sites": "",
    },
    "train": {
        "data": None, "out": None, "resume": "", "seed": 0, "channel": "vv", "scale": "desk",
        "epochs": 30, "batch_pixels": 2000, "patch": 64, "learning_rate": 1e-4,
        "precision": "float32", "train_extractor": True,
    },
    "colorize": {"input": None, "checkpoint": None, "out": None, "channel": "vv", "decode": "mode"},
    "eval": {"recon": None, "truth": None, "out": None, "checkpoint": ""},
    "decomp": {"input": None, "method": None, "out": None},
}


class BadInput(Exception):
    pass


# --- configuration -----------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse a ``key=value`` file into raw strings."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise BadInput(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise BadInput(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    defaults = DEFAULTS[command]
    conf = dict(defaults)
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in defaults:
                raise BadInput(f"unknown config key {key!r} for {command}")
            conf[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            conf[key] = value
    try:
        conf = {k: _coerce(v, defaults[k]) for k, v in conf.items()}
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    missing = [k for k, v in conf.items() if v is None]
    if missing:
        raise BadInput(f"{command}: missing required settings {missing}")
    return conf


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config_log(directory: Path, command: str, conf: dict) -> Path:
    path = directory / f"{command}_config.txt"
    text = "".join(f"{k}={_format(conf[k])}\n" for k in sorted(conf))
    path.write_text(f"# effective {command} configuration\n" + text)
    return path


def _channel(name: str) -> Channel:
    try:
        return Channel.parse(name)
    except (ValueError, KeyError):
        raise BadInput(f"unknown channel {name!r}") from None


def _read_raster(path, layout=None) -> pras.PolRaster:
    path = Path(path)
    if not path.is_file():
        raise BadInput(f"missing raster {path}")
    raster = pras.read(path)
    if layout is not None and raster.layout != layout:
        raise BadInput(f"{path}: expected {layout.name}, found {raster.layout.name}")
    return raster


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ----------------------------------------------------------------

def cmd_synth(conf: dict) -> None:
    classes = tuple(c.strip() for c in conf["classes"].split(",") if c.strip())
    sites = int(conf["sites"]) if str(conf["sites"]).strip() else None
    try:
        spec = synthdata.SceneSpec(conf["width"], conf["height"], conf["seed"], conf["region_model"],
                                   classes, conf["looks"], sites)
        scene = synthdata.render_scene(spec)
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    out = _outdir(conf["out"])
    files = {COV_FILE: pras.from_covariance(scene.covariance)}
    for ch, name in CHANNEL_FILES.items():
        files[name] = pras.PolRaster(pras.Layout.GRAY1, scene.intensity[ch])
    files[CLASS_FILE] = pras.PolRaster(pras.Layout.CLASS1, scene.classes.astype(np.float64))
    lines = [f"# scene {spec.width}x{spec.height}, {spec.looks} looks, classes {','.join(classes)}"]
    for name, raster in files.items():
        pras.write(out / name, raster)
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        lines.append(f"{name} {raster.layout.name} {digest}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    write_config_log(out, "synth", conf)
    log.info("wrote %d rasters to %s", len(files), out)


def _load_pair(data: Path, channel: Channel):
    intensity = _read_raster(data / CHANNEL_FILES[channel], pras.Layout.GRAY1).plane
    cov = pras.to_covariance(_read_raster(data / COV_FILE, pras.Layout.COV9))
    if cov.shape[:2] != intensity.shape:
        raise BadInput("intensity and covariance rasters differ in size")
    return intensity, cov


def cmd_train(conf: dict) -> None:
    channel = _channel(conf["channel"])
    if conf["scale"] not in SCALES:
        raise BadInput(f"unknown scale {conf['scale']!r}")
    extractor, translator = SCALES[conf["scale"]]
    try:
        tconf = pipeline.TrainConfig(conf["batch_pixels"], conf["patch"], conf["epochs"], conf["seed"],
                                     conf["precision"], conf["learning_rate"], conf["train_extractor"])
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    intensity, cov = _load_pair(Path(conf["data"]), channel)
    dataset = pipeline.make_patches(intensity, cov, tconf.patch)
    resume = None
    if conf["resume"]:
        resume = ckpt_io.load(conf["resume"])
        if resume.train.seed != tconf.seed:
            raise BadInput("resume must use the seed of the original run")
    first_step = resume.adam.step_count if resume is not None and resume.adam is not None else 0
    trace = []
    state, _ = pipeline.train(dataset, extractor, translator, tconf, resume=resume,
                              on_step=lambda epoch, step, loss: trace.append((epoch, loss)))
    out = Path(conf["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(out, state)
    with open(out.with_suffix(".loss.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "epoch", "loss"])
        for i, (epoch, loss) in enumerate(trace):
            writer.writerow([first_step + i + 1, epoch + 1, repr(float(loss))])
    write_config_log(out.parent, "train", conf)
    log.info("trained %d steps; checkpoint %s", len(trace), out)


def cmd_colorize(conf: dict) -> None:
    channel = _channel(conf["channel"])
    if conf["decode"] not in ("mode", "mean"):
        raise BadInput(f"unknown decode rule {conf['decode']!r}")
    raster = _read_raster(conf["input"], pras.Layout.GRAY1)
    state = ckpt_io.load(conf["checkpoint"])
    try:
        result = pipeline.colorize(raster.plane, channel, state, conf["decode"])
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    out = _outdir(conf["out"])
    recon = pras.from_covariance(result.covariance)
    pras.write(out / "recon.pras", recon)
    pras.write(out / "params.pras", pras.PolRaster(pras.Layout.PARAM9, result.params))
    pras.write(out / "flags.pras", pras.PolRaster(pras.Layout.CLASS1, result.flags.astype(np.float64)))
    pras.export_png(recon, "pauli", out / "recon_pauli.png")
    write_config_log(out, "colorize", conf)
    log.info("colorized %dx%d image; %d flagged pixels", raster.width, raster.height,
             int(np.count_nonzero(result.flags)))


def cmd_eval(conf: dict) -> None:
    recon = pras.to_covariance(_read_raster(conf["recon"], pras.Layout.COV9), repair=True)
    truth = pras.to_covariance(_read_raster(conf["truth"], pras.Layout.COV9), repair=True)
    tables = ckpt_io.load(conf["checkpoint"]).quantizers if conf["checkpoint"] else None
    try:
        report = evalmetrics.evaluate(recon, truth, tables)
    except ValueError as exc:
        raise BadInput(str(exc)) from None
    out = _outdir(conf["out"])
    report.to_csv(out / "metrics.csv")
    report.histogram_csv(out / "bartlett_hist.csv")
    dmap = pras.PolRaster(pras.Layout.GRAY1, report.bartlett_map)
    pras.write(out / "bartlett.pras", dmap)
    pras.export_png(dmap, "gray_db", out / "bartlett.png")
    write_config_log(out, "eval", conf)
    log.info("median Bartlett distance %.4f", float(np.median(report.bartlett_map)))


def cmd_decomp(conf: dict) -> None:
    method = conf["method"]
    if method not in ("freeman", "halpha"):
        raise BadInput(f"unknown decomposition method {method!r}")
    raster = _read_raster(conf["input"], pras.Layout.COV9)
    cov = pras.to_covariance(raster)
    out = _outdir(conf["out"])
    gray = lambda a: pras.PolRaster(pras.Layout.GRAY1, a)  # noqa: E731
    if method == "freeman":
        fd = decomp.freeman_durden(cov)
        for name, plane in (("ps", fd.ps), ("pd", fd.pd), ("pv", fd.pv)):
            pras.write(out / f"freeman_{name}.pras", gray(plane))
        pras.export_png(raster, "freeman", out / "freeman.png")
    else:
        try:
            ha = decomp.cloude_pottier(polmath.covariance_to_coherency(cov))
        except ValueError as exc:
            raise BadInput(str(exc)) from None
        zones = pras.PolRaster(pras.Layout.CLASS1, decomp.h_alpha_classify(ha.entropy, ha.alpha))
        pras.write(out / "entropy.pras", gray(ha.entropy))
        pras.write(out / "alpha.pras", gray(ha.alpha))
        pras.write(out / "zones.pras", zones)
        pras.export_png(zones, "halpha_zones", out / "zones.png")
    write_config_log(out, "decomp", conf)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "colorize": cmd_colorize,
    "eval": cmd_eval,
    "decomp": cmd_decomp,
}


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; explicit flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="polcolor", description="Full-pol reconstruction from single-pol SAR.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene")
    s.add_argument("--out")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--region-model", dest="region_model", choices=synthdata.REGION_MODELS)
    s.add_argument("--classes", help="comma separated archetype names")
    s.add_argument("--looks", type=int)
    s.add_argument("--sites")

    t = sub.add_parser("train", parents=[common], help="train a model on a scene directory")
    t.add_argument("--data")
    t.add_argument("--out", help="checkpoint path; the loss trace goes to <out>.loss.csv")
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--channel", choices=("hh", "hv", "vv"))
    t.add_argument("--scale", choices=tuple(SCALES))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-pixels", dest="batch_pixels", type=int)
    t.add_argument("--patch", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--precision", choices=("float32", "float64"))

    c = sub.add_parser("colorize", parents=[common], help="reconstruct a COV9 raster")
    c.add_argument("--input")
    c.add_argument("--checkpoint")
    c.add_argument("--out")
    c.add_argument("--channel", choices=("hh", "hv", "vv"))
    c.add_argument("--decode", choices=("mode", "mean"))

    e = sub.add_parser("eval", parents=[common], help="compare a reconstruction with the truth")
    e.add_argument("--recon")
    e.add_argument("--truth")
    e.add_argument("--out")
    e.add_argument("--checkpoint", help="use this checkpoint's quantizer tables")

    d = sub.add_parser("decomp", parents=[common], help="Freeman-Durden or H/alpha decomposition")
    d.add_argument("--input")
    d.add_argument("--method", choices=("freeman", "halpha"))
    d.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        conf = resolve(args.command, args)
        COMMANDS[args.command](conf)
    except (BadInput, pras.RasterFormatError, ckpt_io.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
