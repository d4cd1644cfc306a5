"""Command-line entry point: simulate, train, eval, ablate, gradcheck, oracle, replay.

Every option can also come from a ``--config`` file of ``key=value`` lines
(``#`` starts a comment).  A flag beats the file, which beats the built-in
default.  Each command writes ``manifest.txt`` recording the resolved
options and where each came from; ``replay`` re-runs a manifest.

Exit codes: 0 success, 2 bad configuration, 3 I/O failure, 4 numerical
abort, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import checks, oracle, trainer
from .imaging import (
    FormatError,
    Psf,
    ScenePair,
    load_srf,
    read_cube,
    resample,
    save_srf,
    simulate_pair,
    synth_scene,
    default_srf,
    write_cube,
)
from .metrics import evaluate
from .tensor import ContractError, DimensionError, DomainError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5
MANIFEST = "manifest.txt"


class ConfigError(ValueError):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _float(text):
    return float(text)


def _weights(text):
    parts = [float(v) for v in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"weights need three comma-separated values, got {text!r}")
    return tuple(parts)


@dataclass(frozen=True)
class Opt:
    name: str
    kind: object
    default: object
    help: str = ""
    flag: bool = False  # store_true style switch

    @property
    def dest(self):
        return self.name.replace("-", "_")


COMMON = [Opt("out", str, ".", "output directory"), Opt("seed", int, 0, "root seed")]
TRAIN_OPTS = [
    Opt("epochs", int, trainer.DESK_EPOCHS, "maximum epochs"),
    Opt("lr0", _float, trainer.DESK_LR0, "initial learning rate"),
    Opt("patience", int, 200, "early-stopping patience in epochs"),
    Opt("weights", _weights, trainer.LossWeights().astuple(), "alpha,beta,gamma"),
    Opt("endmembers", int, 32, "abundance channels"),
    Opt("groups", int, 8, "abundance groups for the contrastive loss"),
    Opt("temperature", _float, 1.0, "contrastive temperature"),
    Opt("cycle-target", str, "obs", "compare cycle terms to observations (obs) or reconstructions (recon)"),
    Opt("no-dnet", _bool, False, "bypass the decoupling network", flag=True),
    Opt("no-snet", _bool, False, "drop the contrastive loss", flag=True),
    Opt("no-anc", _bool, False, "relu instead of clamp abundance heads", flag=True),
    Opt("no-asc", _bool, False, "drop the sum-to-one loss", flag=True),
    Opt("adv-literal", _bool, False, "single-argument adversarial objective", flag=True),
    Opt("tie-endmembers", _bool, False, "derive MS endmembers from HS ones via the learned SRF", flag=True),
    Opt("symmetric-nce", _bool, False, "average both contrastive directions", flag=True),
]
COMMANDS = {
    "simulate": COMMON + [
        Opt("synthetic", _bool, False, "generate the synthetic scene", flag=True),
        Opt("truth", str, "", "ground-truth HSC1 cube"),
        Opt("srf", str, "", "SRF CSV (bundled Gaussian SRF for synthetic scenes if omitted)"),
        Opt("ratio", int, 8, "spatial ratio"),
        Opt("psf", str, "box", "box or gaussian"),
        Opt("snr-hs", _float, math.inf, "LrHS SNR in dB"),
        Opt("snr-ms", _float, math.inf, "HrMS SNR in dB"),
        Opt("height", int, 64, "synthetic height"),
        Opt("width", int, 64, "synthetic width"),
        Opt("bands", int, 31, "synthetic band count"),
        Opt("materials", int, 5, "synthetic endmember count"),
    ],
    "train": COMMON + [Opt("pair", str, "", "directory written by simulate")] + TRAIN_OPTS,
    "fuse": COMMON + [Opt("pair", str, "", "directory written by simulate")] + TRAIN_OPTS,
    "ablate": COMMON + [Opt("pair", str, "", "directory written by simulate")] + TRAIN_OPTS,
    "eval": COMMON + [
        Opt("gt", str, "", "ground-truth cube"),
        Opt("est", str, "", "estimate cube"),
        Opt("ratio", int, 8, "spatial ratio used by ERGAS"),
    ],
    "gradcheck": COMMON,
    "oracle": COMMON + [
        Opt("pair", str, "", "directory written by simulate"),
        Opt("iters", int, 500, "outer iterations"),
        Opt("materials", int, 5, "endmember count"),
    ],
}
PATH_KEYS = ("out", "truth", "srf", "pair", "gt", "est")


def build_parser():
    parser = argparse.ArgumentParser(prog="dcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="key=value file")
        for o in opts:
            if o.flag:
                p.add_argument(f"--{o.name}", dest=o.dest, action="store_const", const=True, default=None,
                               help=o.help)
            else:
                p.add_argument(f"--{o.name}", dest=o.dest, default=None, help=o.help)
    rp = sub.add_parser("replay")
    rp.add_argument("manifest")
    rp.add_argument("--out", default=None, help="directory for the replayed outputs")
    return parser


def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def resolve(command, namespace_values, file_values):
    """Merge flag, file and default values; returns ``(options, sources)``."""
    opts = COMMANDS[command]
    known = {o.dest for o in opts}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    resolved, sources = {}, {}
    for o in opts:
        raw, src = namespace_values.get(o.dest), "flag"
        if raw is None and o.dest in file_values:
            raw, src = file_values[o.dest], "file"
        if raw is None:
            resolved[o.dest], sources[o.dest] = o.default, "default"
            continue
        try:
            resolved[o.dest] = o.kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {o.name}: {raw!r} ({exc})") from exc
        sources[o.dest] = src
    for key in PATH_KEYS:
        if resolved.get(key):
            resolved[key] = os.path.abspath(resolved[key])
    return resolved, sources


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(out_dir, command, opts, sources, extra=None):
    lines = [f"command={command}"]
    for key in sorted(opts):
        lines.append(f"{key}={_fmt(opts[key])}")
    lines.append("# sources: " + " ".join(f"{k}:{sources[k]}" for k in sorted(sources)))
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={value}")
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    values = read_config_file(path)
    command = values.pop("command", None)
    if command not in COMMANDS:
        raise ConfigError(f"{path}: missing or unknown command {command!r}")
    return command, values


# ------------------------------------------------------------------ pair I/O


def save_pair(out_dir, pair: ScenePair):
    write_cube(os.path.join(out_dir, "lrhs.hsc"), pair.lrhs)
    write_cube(os.path.join(out_dir, "hrms.hsc"), pair.hrms)
    if pair.truth is not None:
        write_cube(os.path.join(out_dir, "truth.hsc"), pair.truth)
    if pair.true_srf is not None:
        save_srf(os.path.join(out_dir, "srf.csv"), pair.true_srf)
    if pair.true_psf is not None:
        np.savetxt(os.path.join(out_dir, "psf.csv"), pair.true_psf.kernel, delimiter=",", fmt="%.17g")


def load_pair(pair_dir) -> ScenePair:
    if not pair_dir:
        raise ConfigError("--pair is required")

    def opt(name, loader):
        path = os.path.join(pair_dir, name)
        return loader(path) if os.path.exists(path) else None

    lrhs = read_cube(os.path.join(pair_dir, "lrhs.hsc"))
    hrms = read_cube(os.path.join(pair_dir, "hrms.hsc"))
    truth = opt("truth.hsc", read_cube)
    srf = opt("srf.csv", load_srf)
    kernel = opt("psf.csv", lambda p: np.atleast_2d(np.loadtxt(p, delimiter=",")))
    psf = Psf(kernel, hrms.height // lrhs.height) if kernel is not None else None
    return ScenePair(lrhs, hrms, truth, srf, psf)


def _config_from(opts) -> tuple[trainer.TrainConfig, trainer.LossWeights]:
    cfg = trainer.TrainConfig(
        lr0=opts["lr0"], epochs=opts["epochs"], patience=opts["patience"], seed=opts["seed"],
        use_dnet=not opts["no_dnet"], use_snet=not opts["no_snet"],
        use_anc=not opts["no_anc"], use_asc=not opts["no_asc"],
        n_endmembers=opts["endmembers"], groups=opts["groups"], temperature=opts["temperature"],
        symmetric_nce=opts["symmetric_nce"], adv_literal=opts["adv_literal"],
        cycle_target=opts["cycle_target"], tie_endmembers=opts["tie_endmembers"],
    )
    return cfg, trainer.LossWeights(*opts["weights"])


# ------------------------------------------------------------------ commands


def cmd_simulate(opts, out):
    psf = {"box": Psf.box, "gaussian": Psf.gaussian}.get(opts["psf"])
    if psf is None:
        raise ConfigError(f"--psf must be box or gaussian, got {opts['psf']!r}")
    psf = psf(opts["ratio"])
    factors = None
    if opts["synthetic"]:
        truth, S, A = synth_scene(opts["seed"], opts["height"], opts["width"], opts["bands"], opts["materials"])
        factors = (S, A)
        srf = load_srf(opts["srf"]) if opts["srf"] else default_srf()
    else:
        if not opts["truth"]:
            raise ConfigError("either --synthetic or --truth is required")
        if not opts["srf"]:
            raise ConfigError("--srf is required with --truth")
        truth = read_cube(opts["truth"])
        srf = load_srf(opts["srf"])
    pair = simulate_pair(truth, srf, psf, opts["snr_hs"], opts["snr_ms"], opts["seed"], true_factors=factors)
    save_pair(out, pair)
    print(f"lrhs {pair.lrhs.shape} hrms {pair.hrms.shape} truth {pair.truth.shape}")


def _report_line(pair, z, label):
    rep = evaluate(pair.truth, z, pair.ratio, label)
    print("PSNR, SAM, ERGAS, SSIM, UQI")
    print(rep.format_row())
    return rep


def cmd_train(opts, out):
    pair = load_pair(opts["pair"])
    cfg, weights = _config_from(opts)
    result = trainer.train(pair, cfg, weights)
    write_cube(os.path.join(out, "zhat.hsc"), result.z_hat)
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.state.loss_csv())
    factors = trainer.factors(result.model, pair, cfg)
    with open(os.path.join(out, "endmembers.csv"), "w", encoding="utf-8") as fh:
        fh.write(factors.endmembers_csv())
    write_cube(os.path.join(out, "abundances.hsc"), factors.abundance_cube(pair.hrms.height, pair.hrms.width))
    if pair.truth is not None:
        rep = _report_line(pair, result.z_hat, "network")
        with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(rep.to_csv())
    return {"epochs_run": result.state.epoch, "stopped_early": result.state.stopped_early}


def cmd_ablate(opts, out):
    pair = load_pair(opts["pair"])
    if pair.truth is None:
        raise ConfigError("ablation needs truth.hsc in the pair directory")
    cfg, weights = _config_from(opts)
    rows = trainer.ablate(pair, cfg, weights)
    text = trainer.ablation_csv(rows)
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


def cmd_eval(opts, out):
    if not opts["gt"] or not opts["est"]:
        raise ConfigError("--gt and --est are required")
    gt, est = read_cube(opts["gt"]), read_cube(opts["est"])
    if gt.shape != est.shape:
        raise ConfigError(f"shape mismatch: gt {gt.shape} vs est {est.shape}")
    rep = evaluate(gt, est, opts["ratio"])
    print("PSNR, SAM, ERGAS, SSIM, UQI")
    print(rep.format_row())
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(rep.to_csv())
    with open(os.path.join(out, "rmse_per_band.csv"), "w", encoding="utf-8") as fh:
        fh.write(rep.rmse_csv())


def cmd_gradcheck(opts, out):
    results = checks.gradcheck_suite(opts["seed"])
    lines = ["op,max_rel_error"] + [f"{name},{err!r}" for name, err in results]
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "gradcheck.csv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    bad = checks.failures(results)
    if bad:
        print("failed: " + ", ".join(n for n, _ in bad), file=sys.stderr)
        return EXIT_GRADCHECK
    return None


def cmd_oracle(opts, out):
    pair = load_pair(opts["pair"])
    if pair.true_srf is None or pair.true_psf is None:
        raise ConfigError("oracle needs srf.csv and psf.csv in the pair directory")
    state = oracle.csu_solve(pair.lrhs, pair.hrms, pair.true_srf, pair.true_psf, opts["materials"],
                             opts["iters"], opts["seed"])
    z = state.zhat
    write_cube(os.path.join(out, "zhat.hsc"), z)
    with open(os.path.join(out, "endmembers.csv"), "w", encoding="utf-8") as fh:
        fh.write(oracle.endmembers_csv(state.S))
    write_cube(os.path.join(out, "abundances.hsc"), oracle.abundance_cube(state.A, z.height, z.width))
    with open(os.path.join(out, "objective.csv"), "w", encoding="utf-8") as fh:
        fh.write("iteration,objective\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(state.history))
    if pair.truth is not None:
        rep = _report_line(pair, z, "oracle")
        bil = evaluate(pair.truth, resample(pair.lrhs, "up_bilinear", pair.ratio), pair.ratio, "bilinear")
        print(f"bilinear PSNR {bil.psnr!r}")
        with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(rep.to_csv())


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "fuse": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
}


def run(command, opts, sources):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    code = HANDLERS[command](opts, out)
    extra = code if isinstance(code, dict) else None
    write_manifest(out, command, opts, sources, extra)
    return code if isinstance(code, int) else EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            command, values = read_manifest(args.manifest)
            if args.out is not None:
                values["out"] = args.out
            opts, sources = resolve(command, {}, values)
        else:
            file_values = read_config_file(args.config) if args.config else {}
            given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
            command = args.command
            opts, sources = resolve(command, given, file_values)
        return run(command, opts, sources)
    except (ConfigError, ContractError, DimensionError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except trainer.NumericalAbort as exc:
        print(f"numerical abort at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())

