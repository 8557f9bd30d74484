"""Command-line entry point: ``prefillsim {simulate,sweep,gen,calc,validate}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backend import (
    calibrate_threshold,
    device_weight_bytes,
    eq1_threshold,
    fallback_threshold,
    feasibility_check,
    layer_transfer_times,
)
from .comm import Strategy, StrategyKind, per_layer_comm_bytes
from .config import CLUSTER_PRESETS, MODEL_PRESETS, ClusterConfig, ModelConfig
from .costmodel import activation_bytes, f_tok, kv_bytes, weight_bytes
from .experiment import (
    AUTO,
    REPORT_FORMATS,
    ConfigError,
    ExperimentConfig,
    SchedulerSpec,
    StrategySpec,
    format_report,
    load_config,
    run_experiment,
)
from .workload import (
    PREFIX_SHARE,
    REGIMES,
    AGGREGATE_MIXTURE,
    Regime,
    gen_mixture,
    gen_synthetic,
    write_trace,
)

log = logging.getLogger("prefillsim")


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _degrees(text: str) -> list[int]:
    try:
        values = [int(x) for x in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("GPU counts must be integers >= 1")
    return values


def _offload(text: str):
    table = {"auto": AUTO, "on": True, "off": False}
    if text not in table:
        raise argparse.ArgumentTypeError("expected auto, on or off")
    return table[text]


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace, single: bool) -> ExperimentConfig:
    changes = {}
    specs = list(cfg.strategies)
    if args.strategy:
        names = _csv_list(args.strategy)
        if single and len(names) != 1:
            raise ConfigError("--strategy: simulate takes exactly one strategy")
        try:
            specs = [StrategySpec(StrategyKind(n)) for n in names]
        except ValueError as exc:
            raise ConfigError(f"--strategy: {exc}") from None
    if args.offload is not None or args.window is not None:
        patched = []
        for spec in specs:
            if spec.kind is StrategyKind.DP_ASYNCEP:
                spec = dataclasses.replace(
                    spec,
                    offload=spec.offload if args.offload is None else args.offload,
                    window=spec.window if args.window is None else args.window)
            patched.append(spec)
        specs = patched
    changes["strategies"] = tuple(specs)
    if args.gpus:
        if single and len(args.gpus) != 1:
            raise ConfigError("--gpus: simulate takes exactly one GPU count")
        changes["degrees"] = tuple(args.gpus)
    if args.kv_free:
        changes["scheduler"] = dataclasses.replace(cfg.scheduler, kv_free=True)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.format is not None:
        changes["format"] = args.format
    if args.out is not None:
        changes["output"] = args.out
    return dataclasses.replace(cfg, **changes)


def _write(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {out}: {exc.strerror}") from exc
    log.info("wrote %s", out)


def cmd_run(args: argparse.Namespace, single: bool) -> int:
    cfg = _apply_overrides(load_config(args.config), args, single)
    rows = run_experiment(cfg)
    _write(format_report(rows, cfg.format), cfg.output)
    return 0


def cmd_gen(args: argparse.Namespace) -> int:
    seed = args.seed or 0
    if args.mixture:
        trace = gen_mixture(AGGREGATE_MIXTURE, seed, args.total_tokens)
    else:
        regime = REGIMES[args.regime]
        if args.seq_len or args.requests:
            regime = Regime(regime.label, args.seq_len or regime.S, args.requests or regime.N)
        share = PREFIX_SHARE.get(args.prefix_share)
        share = float(args.prefix_share) if share is None else share
        trace = gen_synthetic(regime, share, args.group_size, seed)
    if args.out is None:
        raise ConfigError("--out: gen needs an output path")
    write_trace(trace, args.out)
    print(f"{len(trace)} requests, {trace.total_tokens} tokens -> {args.out}")
    return 0


def _calc_inputs(args: argparse.Namespace) -> tuple[ModelConfig, ClusterConfig, list[StrategySpec], list[int], bool]:
    if args.config:
        cfg = _apply_overrides(load_config(args.config), args, single=False)
        return cfg.model, cfg.cluster, list(cfg.strategies), list(cfg.degrees), cfg.scheduler.kv_free
    model = MODEL_PRESETS[args.model]
    cluster = CLUSTER_PRESETS[args.cluster]
    names = _csv_list(args.strategy) if args.strategy else [k.value for k in StrategyKind]
    specs = [StrategySpec(StrategyKind(n)) for n in names]
    if args.offload is not None or args.window is not None:
        specs = [dataclasses.replace(s, offload=args.offload if args.offload is not None else s.offload,
                                     window=args.window or s.window)
                 if s.kind is StrategyKind.DP_ASYNCEP else s for s in specs]
    return model, cluster, specs, args.gpus or [cluster.P], args.kv_free


def cmd_calc(args: argparse.Namespace) -> int:
    model, cluster, specs, degrees, kv_free = _calc_inputs(args)
    B, S = args.batch, args.seq
    n_ref = args.n_ref or SchedulerSpec().n_ref
    w = weight_bytes(model)
    print(f"model {model.name}: weights {w.total} B (attention {w.attn_total}, experts {w.expert_total}, "
          f"per MoE layer {w.expert_per_layer})")
    print(f"batch B={B} S={S}: kv {kv_bytes(B, S, model)} B, activations {activation_bytes(B, S, model)} B, "
          f"f_tok {f_tok(model):.6g} FLOPs")
    print(f"fallback threshold: {fallback_threshold(model, n_ref, cluster.gamma):.6g} FLOPs (n_ref={n_ref})")
    print("strategy,P,comm_bytes_per_layer,device_weight_bytes,hbm_used_bytes,feasible")
    for spec in specs:
        for P in degrees:
            for strategy in spec.candidates():
                used = feasibility_check(strategy, P, B, S, model, cluster,
                                         kv_free=kv_free and spec.kind is StrategyKind.DP_ASYNCEP)
                label = strategy.name + ("+offload" if strategy.offload else "")
                print(f"{label},{P},{per_layer_comm_bytes(strategy, P, B, S, model)},"
                      f"{device_weight_bytes(strategy, P, model)},{used.used_bytes},"
                      f"{'true' if used.feasible else 'false'}")
    for P in degrees:
        c = dataclasses.replace(cluster, P=P)
        cal = calibrate_threshold(c, model, n_ref)
        gather, _ = layer_transfer_times(Strategy(StrategyKind.DP_ASYNCEP), c, model)
        t_ep = float(gather.max())
        print(f"asyncep P={P}: t_c {cal.t_c:.6g}s t_e {cal.t_e:.6g}s calibrated T {cal.T:.6g} FLOPs; "
              f"per-layer gather {t_ep:.6g}s -> literal T {eq1_threshold(t_ep, c):.6g} FLOPs")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    from .checks import run_checks

    cfg = _apply_overrides(load_config(args.config), args, single=False)
    failed = 0
    for res in run_checks(cfg):
        failed += not res.ok
        print(f"{'PASS' if res.ok else 'FAIL'}  {res.name}" + (f"  ({res.detail})" if res.detail else ""))
    return 1 if failed else 0


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output path ('-' for stdout)")
    p.add_argument("--format", choices=REPORT_FORMATS, help="report format")
    p.add_argument("--strategy", help="strategy name, or a comma-separated list")
    p.add_argument("--gpus", type=_degrees, help="GPU count, or a comma-separated list")
    p.add_argument("--kv-free", action="store_true", help="run AsyncEP without a KV cache")
    p.add_argument("--offload", type=_offload, help="AsyncEP expert offload: auto, on or off")
    p.add_argument("--window", type=int, help="offload prefetch window in layers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefillsim",
                                     description="Prefill-only MoE serving simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one experiment config")
    _common(p, True)
    p = sub.add_parser("sweep", help="cross-product over strategies and GPU counts")
    _common(p, True)

    p = sub.add_parser("gen", help="write a synthetic trace")
    p.add_argument("--regime", choices=sorted(REGIMES), default="short")
    p.add_argument("--seq-len", type=int, help="override the regime's sequence length")
    p.add_argument("--requests", type=int, help="override the regime's request count")
    p.add_argument("--prefix-share", default="none",
                   help="fraction in [0, 1] or one of " + ", ".join(PREFIX_SHARE))
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--mixture", action="store_true", help="six-source aggregate mixture instead")
    p.add_argument("--total-tokens", type=float, help="rescale the mixture to this many tokens")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calc", help="print comm bytes, memory bytes and thresholds")
    _common(p, False)
    p.add_argument("--model", choices=sorted(MODEL_PRESETS), default="qwen3-235b-a22b")
    p.add_argument("--cluster", choices=sorted(CLUSTER_PRESETS), default="h100-fp8")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seq", type=int, default=4096)
    p.add_argument("--n-ref", type=int)

    p = sub.add_parser("validate", help="run the invariant suite on a config")
    _common(p, True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("simulate", "sweep"):
            return cmd_run(args, single=args.command == "simulate")
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "calc":
            return cmd_calc(args)
        return cmd_validate(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"prefillsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
