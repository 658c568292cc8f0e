"""Command-line entry point: ``neuroeq <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .channel import SnrPoint, bpsk_modulate, sigma_from_snr, transmit
from .classic import BcjrDetector, PilotRecord, SingularSystemError, ls_channel_estimate
from .harness import (
    EXPERIMENTS,
    ConfigError,
    evaluate,
    export_decision_boundary,
    format_boundary,
    format_curve,
    linearly_separable,
    load_config,
    map_window_decisions,
    run_experiment,
    run_structure_sweep,
    train_cnn,
    write_curve,
)
from .models import CnnDetector, CnnNndSystem, CnnScSystem, NetworkSpec, joint_finetune, train_nnd_awgn
from .nn import ContractError, load_checkpoint, save_checkpoint

log = logging.getLogger("neuroeq")


def _overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args, experiment: str | None = None):
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides, experiment)


def _out(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit(text: str, path: Path | None) -> None:
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(text)


def cmd_train_cnn(args) -> None:
    cfg = _config(args)
    net = train_cnn(cfg)
    path = _out(args) / "cnn.ckpt"
    save_checkpoint(net, path)
    print(path)


def cmd_train_nnd(args) -> None:
    cfg = _config(args, "fig6_joint")
    net, losses = train_nnd_awgn(cfg.training(cfg.nnd_iterations), NetworkSpec("dnn", cfg.dnn_structure))
    path = _out(args) / "nnd.ckpt"
    save_checkpoint(net, path)
    log.info("final loss %.5f", float(np.mean(losses[-100:])) if losses else float("nan"))
    print(path)


def cmd_finetune_joint(args) -> None:
    cfg = _config(args, "fig6_joint")
    res = joint_finetune(
        load_checkpoint(args.cnn),
        load_checkpoint(args.nnd),
        cfg.training(),
        cfg.channel(),
        iterations=cfg.finetune_iterations,
        learning_rate=cfg.finetune_learning_rate,
        freeze_cnn=cfg.freeze_cnn,
    )
    out = _out(args)
    save_checkpoint(res.cnn, out / "cnn_joint.ckpt")
    save_checkpoint(res.nnd, out / "nnd_joint.ckpt")
    print(out / "cnn_joint.ckpt")
    print(out / "nnd_joint.ckpt")


def cmd_eval_ber(args) -> None:
    cfg = _config(args)
    if args.system == "bcjr":
        system = BcjrDetector("perfect", coded=cfg.coded)
    else:
        if not args.cnn:
            raise ConfigError(f"--cnn is required for system {args.system}")
        cnn = load_checkpoint(args.cnn)
        if args.system == "cnn":
            system = CnnDetector(cnn, coded=cfg.coded)
        elif args.system == "cnn+sc":
            system = CnnScSystem(cnn, cfg.code())
        else:
            if not args.nnd:
                raise ConfigError("--nnd is required for system cnn+nnd")
            system = CnnNndSystem(cnn, load_checkpoint(args.nnd))
    records = evaluate(system, cfg, args.threads)
    _emit(format_curve(records), _out(args) / f"{args.system.replace('+', '_')}.csv" if args.out else None)


def cmd_sweep(args) -> None:
    cfg = _config(args, "fig2_sweep")
    curves, nets = run_structure_sweep(cfg, args.threads)
    out = _out(args)
    for label, records in curves.items():
        write_curve(out / f"{label}.csv", records)
        save_checkpoint(nets[label], out / f"{label}.ckpt")
    print(out)


def cmd_boundary(args) -> None:
    cfg = _config(args, "boundary")
    cnn = load_checkpoint(args.cnn) if args.cnn else train_cnn(cfg)
    grid = export_decision_boundary(cnn, cfg.boundary_range, cfg.boundary_step)
    sigma = sigma_from_snr(SnrPoint(cfg.snr_range[0], cfg.snr_convention))
    agree = np.mean(map_window_decisions(cfg.channel(), sigma, grid[:, :2]) == grid[:, 2])
    log.info("MAP agreement %.4f, linearly separable: %s", agree, linearly_separable(grid[:, :2], grid[:, 2]))
    _emit(format_boundary(grid), _out(args) / "boundary.csv" if args.out else None)


def cmd_baseline_map(args) -> None:
    cfg = _config(args)
    mode = "estimated" if args.pilot_length else "perfect"
    system = BcjrDetector(mode, args.pilot_length, coded=cfg.coded)
    records = evaluate(system, cfg, args.threads)
    name = f"bcjr_ls_n{args.pilot_length}" if args.pilot_length else "bcjr_perfect"
    _emit(format_curve(records), _out(args) / f"{name}.csv" if args.out else None)


def cmd_estimate_channel(args) -> None:
    cfg = _config(args)
    rng = np.random.default_rng(cfg.seed)
    spec = cfg.channel().with_sigma(sigma_from_snr(SnrPoint(args.snr, cfg.snr_convention)))
    bits = rng.integers(0, 2, args.pilot_length)
    pilot = PilotRecord(bpsk_modulate(bits), transmit(bits, spec, rng))
    taps = ls_channel_estimate(pilot, len(cfg.channel_taps))
    print(" ".join(f"{t:.6f}" for t in taps))


def cmd_run_experiment(args) -> None:
    cfg = _config(args, args.experiment)
    print(run_experiment(cfg, args.out, args.threads))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for Monte-Carlo evaluation")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="neuroeq", description="CNN equalizer and neural polar decoder experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-cnn", parents=[common], help="train the CNN equalizer")
    s.set_defaults(func=cmd_train_cnn, out_default="runs")
    s = sub.add_parser("train-nnd", parents=[common], help="train the decoder over AWGN")
    s.set_defaults(func=cmd_train_nnd, out_default="runs")
    s = sub.add_parser("finetune-joint", parents=[common], help="joint fine-tuning of CNN and decoder")
    s.add_argument("--cnn", required=True)
    s.add_argument("--nnd", required=True)
    s.set_defaults(func=cmd_finetune_joint, out_default="runs")
    s = sub.add_parser("eval-ber", parents=[common], help="Monte-Carlo BER of a trained system")
    s.add_argument("--system", choices=["cnn", "cnn+nnd", "cnn+sc", "bcjr"], default="cnn")
    s.add_argument("--cnn")
    s.add_argument("--nnd")
    s.set_defaults(func=cmd_eval_ber)
    s = sub.add_parser("sweep-structures", parents=[common], help="train and evaluate several CNN structures")
    s.set_defaults(func=cmd_sweep, out_default="runs/fig2_sweep")
    s = sub.add_parser("boundary", parents=[common], help="export the decision-boundary grid")
    s.add_argument("--cnn", help="trained checkpoint (trains one when omitted)")
    s.set_defaults(func=cmd_boundary)
    s = sub.add_parser("baseline-map", parents=[common], help="BCJR baseline BER")
    s.add_argument("--pilot-length", type=int, help="estimate the channel from this many pilots")
    s.set_defaults(func=cmd_baseline_map)
    s = sub.add_parser("estimate-channel", parents=[common], help="least-squares taps from one random pilot")
    s.add_argument("--pilot-length", type=int, default=20)
    s.add_argument("--snr", type=float, default=10.0)
    s.set_defaults(func=cmd_estimate_channel)
    s = sub.add_parser("run-experiment", parents=[common], help="run a full experiment")
    s.add_argument("experiment", choices=EXPERIMENTS)
    s.set_defaults(func=cmd_run_experiment, out_default="runs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.out is None and hasattr(args, "out_default"):
        args.out = args.out_default
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ContractError, SingularSystemError, FileNotFoundError) as e:
        print(f"neuroeq: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
