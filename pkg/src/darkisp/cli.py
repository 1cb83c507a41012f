"""``darkisp`` command line: process, train, synth, verify, inspect.

Exit codes: 0 success, 1 usage or I/O error, 2 verification failure.
Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DarkIspError
from .linear_isp import LinearParams
from .model import DarkISP, load_json
from .nonlinear_isp import basis_curves
from .raw_io import BayerImage, RgbImage, SensorMeta, load_bayer, load_rgb, save_rgb
from .synth_data import SynthConfig, generate_dataset
from .trainer import Checkpoint, TrainConfig, psnr, train
from .verify import SUITES, run_suites

log = logging.getLogger("darkisp")

SEED_ENV = "DARKISP_SEED"
CURVE_SAMPLES = 256
# neutral frame used to report the pooled corrections of a checkpoint
PROBE_LEVEL = 0.18
PROBE_SIZE = 32


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _read_json(path) -> dict:
    d = load_json(path)
    if not isinstance(d, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return d


def load_model(checkpoint: str, meta: SensorMeta | None = None) -> DarkISP:
    """A checkpoint path, or the literal ``identity`` for the untrained static pipeline."""
    if checkpoint == "identity":
        seed = env_seed()
        return DarkISP.init(LinearParams.from_meta(meta or SensorMeta()), seed=0 if seed is None else seed)
    return Checkpoint.load(checkpoint).model


def _paired_reference(raw_path: Path) -> RgbImage | None:
    """Reference image listed next to ``raw_path`` in a dataset manifest, if any."""
    manifest = raw_path.parent / "manifest.json"
    if not manifest.is_file():
        return None
    try:
        pairs = json.loads(manifest.read_text()).get("pairs", [])
    except (OSError, json.JSONDecodeError, AttributeError):
        return None
    for pair in pairs:
        if isinstance(pair, dict) and pair.get("raw") == raw_path.name and "reference" in pair:
            return load_rgb(raw_path.parent / pair["reference"])
    return None


def cmd_process(args) -> int:
    raw_path = Path(args.input)
    img = load_bayer(raw_path)
    model = load_model(args.checkpoint, img.meta)
    u = model.forward(img).u.data
    save_rgb(RgbImage(u), args.output, args.mode)
    result = {"output": str(args.output), "mode": args.mode, "height": img.height, "width": img.width}
    ref = _paired_reference(raw_path)
    if ref is not None:
        baseline = DarkISP.init(LinearParams.from_meta(img.meta)).forward(img).u.data
        result["psnr"] = psnr(u, ref.channels)
        result["psnr_identity"] = psnr(baseline, ref.channels)
        result["psnr_improvement"] = result["psnr"] - result["psnr_identity"]
        print(f"PSNR {result['psnr']:.3f} dB vs identity {result['psnr_identity']:.3f} dB "
              f"(improvement {result['psnr_improvement']:+.3f} dB)", file=sys.stderr)
    print(json.dumps(result))
    return 0


def train_config(args) -> TrainConfig:
    """Config file, then DARKISP_SEED, then explicit flags (flags win)."""
    d = _read_json(args.config) if args.config else {}
    if "lam" in d:
        d["lambda"] = d.pop("lam")
    seed = env_seed()
    if seed is not None:
        d["seed"] = seed
    overrides = {
        "lr": args.lr, "momentum": args.momentum, "weight_decay": args.weight_decay, "epochs": args.epochs,
        "lambda": args.lam, "warmup": args.warmup, "batch": args.batch, "seed": args.seed,
        "sb_flow_through": args.sb_flow_through, "basis_file": args.basis,
    }
    for key, value in overrides.items():
        if value is not None:
            d[key] = value
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = train_config(args)
    print(",".join(("epoch", "l_task", "l_sb", "total", "kappa_mean", "residual_mean", "residual_grad_norm")))

    def emit(entry):
        print(entry.csv_row(), flush=True)

    ckpt = train(cfg, args.data, out=args.out, log_path=args.log, on_epoch=emit)
    log.info("wrote %s (config %s)", args.out, ckpt.config_hash[:12])
    return 0


def cmd_synth(args) -> int:
    d = _read_json(args.config) if args.config else {}
    seed = env_seed()
    if seed is not None:
        d["seed"] = seed
    try:
        cfg = SynthConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    manifest = generate_dataset(cfg, args.source, args.out)
    log.info("wrote %d pairs to %s", len(manifest["pairs"]), args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "pairs": len(manifest["pairs"])}))
    return 0


def parse_suites(values: list[str] | None) -> list[str]:
    if not values:
        return list(SUITES)
    names = [s for v in values for s in v.split(",") if s]
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    return list(dict.fromkeys(names))


def cmd_verify(args) -> int:
    report = run_suites(parse_suites(args.suites))
    print(json.dumps(report, indent=1))
    if report["passed"]:
        return 0
    for name, res in report["suites"].items():
        for f in res["failures"]:
            print(f"FAIL {name}/{f['case']} seed={f['seed']} inputs={f['inputs_digest']}", file=sys.stderr)
    return 2


def _fmt(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def inspect_params(model: DarkISP) -> dict:
    probe = BayerImage(np.full((4, PROBE_SIZE, PROBE_SIZE), PROBE_LEVEL))
    fld = model.forward(probe).field
    p = model.base_matrix()
    return {
        "P": _fmt(p),
        "wb_gains": _fmt(model.params["linear.wb_gains"].data),
        "ccm": _fmt(model.params["linear.ccm"].data),
        "global_correction": _fmt(fld.global_corr.data),
        "local_correction_mean": _fmt(fld.local_corr.data.mean(axis=(1, 2)).reshape(3, 4)),
        "pooled": _fmt(fld.pooled().data),
        "probe": {"level": PROBE_LEVEL, "size": PROBE_SIZE},
    }


def cmd_inspect(args) -> int:
    model = load_model(args.checkpoint)
    if args.what == "params":
        print(json.dumps(inspect_params(model), indent=2))
        return 0
    xs, f, g = basis_curves(model.family, CURVE_SAMPLES)
    n = f.shape[0] - 1
    if args.what == "basis":
        header = ["x"] + [f"f_{k}" for k in range(1, n + 1)]
        rows = np.column_stack([xs, f[1:].T])
    else:
        header = ["x"] + [f"f_{k}" for k in range(n + 1)] + [f"g_{k}" for k in range(n + 1)]
        rows = np.column_stack([xs, f.T, g.T])
    out = [",".join(header)]
    out += [",".join(repr(float(v)) for v in row) for row in rows]
    sys.stdout.write("\n".join(out) + "\n")
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="darkisp", description="Differentiable low-light RAW ISP.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("process", help="run the pipeline on one DRAW file")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", default="identity", help='checkpoint JSON or "identity"')
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("float", "preview"), default="float")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV log path (default: OUT.log.csv)")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--basis", help="JSON basis coefficient table")
    p.add_argument("--sb-flow-through", action="store_true", default=None,
                   help="let the Self-Boost term backpropagate into the tone stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="generate a synthetic dark RAW dataset")
    p.add_argument("--config")
    p.add_argument("--source", help="directory of .pfm/.ppm images (procedural cards if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--suites", nargs="+", metavar="SUITE", help=f"any of {','.join(SUITES)}")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="print checkpoint parameters or basis curves")
    p.add_argument("--checkpoint", default="identity")
    p.add_argument("--what", choices=("params", "basis", "curves"), default="params")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"darkisp: error: {exc}", file=sys.stderr)
        return 1
    except (DarkIspError, OSError) as exc:
        print(f"darkisp: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
