"""Experiment runner: run, compare, sweep.

Every output file starts with a `#` provenance line carrying the resolved
config hash and seed. Floats are serialized with 17 significant digits so a
repeated run with the same seed produces byte-identical files.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from fogsim.config import SimulationConfig
from fogsim.engine import MetricsRow, SimulationResult, run_baselines, run_simulation
from fogsim.errors import ConfigError, FogsimError
from fogsim.netmodel import KIND_D2D, KIND_UPLINK, DATA_KINDS

EVENT_COLUMNS = "round,phase,kind,src,dst,params,joules,seconds"


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _provenance(config: SimulationConfig) -> str:
    return f"# config_hash={config.config_hash()} seed={config.seed}"


def write_metrics(path: Path, rows: list[MetricsRow], config: SimulationConfig):
    lines = [_provenance(config), ",".join(MetricsRow.COLUMNS)]
    lines.extend(row.to_csv_line() for row in rows)
    path.write_text("\n".join(lines) + "\n")


def write_events(path: Path, events, config: SimulationConfig):
    lines = [_provenance(config)]
    lines.extend(ev.to_line() for ev in events)
    path.write_text("\n".join(lines) + "\n")


def _device_tx_by_round(result: SimulationResult, device_count: int) -> dict[int, float]:
    """Per-round transmit energy spent by leaf devices (ids below device_count)."""
    tx_kinds = (KIND_UPLINK, KIND_D2D) + DATA_KINDS
    per_round: dict[int, float] = {}
    for ev in result.events:
        if ev.kind in tx_kinds and ev.src < device_count:
            per_round[ev.round] = per_round.get(ev.round, 0.0) + ev.joules
    return per_round


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return float("inf") if a > 0 else 1.0
    return a / b


def cmd_run(config: SimulationConfig, out_dir: Path) -> int:
    result = run_simulation(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(out_dir / "metrics.csv", result.rows, config)
    write_events(out_dir / "events.log", result.events, config)
    final = result.rows[-1]
    summary = [
        _provenance(config),
        f"rounds={final.round}",
        f"final_loss={_fmt(final.global_loss)}",
        f"final_accuracy={_fmt(final.global_accuracy)}",
        f"total_uplink_params={result.ledger.uplink_params}",
        f"total_downlink_params={result.ledger.downlink_params}",
        f"total_d2d_params={result.ledger.d2d_params}",
        f"total_energy_j={_fmt(result.ledger.total_energy())}",
        f"stragglers_dropped={result.ledger.stragglers_dropped}",
        f"samples_moved={result.ledger.data_samples_moved}",
        f"consensus_error_mean={_fmt(result.diagnostics['consensus_error_mean'])}",
    ]
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    return 0


def cmd_compare(config: SimulationConfig, out_dir: Path) -> int:
    fog = run_simulation(config)
    baselines = run_baselines(config)
    star, central = baselines["star"], baselines["centralized"]
    out_dir.mkdir(parents=True, exist_ok=True)

    n_dev = config.device_count
    fog_tx = _device_tx_by_round(fog, n_dev)
    star_tx = _device_tx_by_round(star, n_dev)

    header = (
        "round,fog_loss,fog_accuracy,star_loss,star_accuracy,"
        "centralized_loss,centralized_accuracy,fog_uplink_params,"
        "star_uplink_params,uplink_reduction_factor,fog_device_tx_energy_j,"
        "star_device_tx_energy_j,energy_reduction_factor"
    )
    lines = [_provenance(config), header]
    for frow, srow, crow in zip(fog.rows, star.rows, central.rows):
        r = frow.round
        cells = [
            r, frow.global_loss, frow.global_accuracy, srow.global_loss,
            srow.global_accuracy, crow.global_loss, crow.global_accuracy,
            frow.uplink_params, srow.uplink_params,
            _ratio(srow.uplink_params, frow.uplink_params),
            fog_tx.get(r, 0.0), star_tx.get(r, 0.0),
            _ratio(star_tx.get(r, 0.0), fog_tx.get(r, 0.0)),
        ]
        lines.append(",".join(_fmt(c) for c in cells))
    (out_dir / "compare.csv").write_text("\n".join(lines) + "\n")

    gap = central.rows[-1].global_accuracy - fog.rows[-1].global_accuracy
    uplink_factor = _ratio(star.ledger.uplink_params, fog.ledger.uplink_params)
    energy_factor = _ratio(sum(star_tx.values()), sum(fog_tx.values()))
    summary = [
        _provenance(config),
        f"final_accuracy_fog={_fmt(fog.rows[-1].global_accuracy)}",
        f"final_accuracy_star={_fmt(star.rows[-1].global_accuracy)}",
        f"final_accuracy_centralized={_fmt(central.rows[-1].global_accuracy)}",
        f"final_accuracy_gap_vs_centralized={_fmt(gap)}",
        f"uplink_reduction_factor_vs_star={_fmt(uplink_factor)}",
        f"device_tx_energy_reduction_factor_vs_star={_fmt(energy_factor)}",
        f"fog_total_uplink_params={fog.ledger.uplink_params}",
        f"star_total_uplink_params={star.ledger.uplink_params}",
        f"fog_device_tx_energy_j={_fmt(sum(fog_tx.values()))}",
        f"star_device_tx_energy_j={_fmt(sum(star_tx.values()))}",
    ]
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    return 0


def _sweep_job(args: tuple) -> dict:
    raw, parameter, value, seed, out_name = args
    config = SimulationConfig(raw=raw)
    result = run_simulation(config)
    write_metrics(Path(out_name), result.rows, config)
    final = result.rows[-1]
    return {
        "parameter": parameter,
        "value": value,
        "seed": seed,
        "final_loss": final.global_loss,
        "final_accuracy": final.global_accuracy,
        "total_uplink_params": result.ledger.uplink_params,
        "total_energy_j": result.ledger.total_energy(),
        "consensus_error_mean": result.diagnostics["consensus_error_mean"],
    }


def cmd_sweep(
    config: SimulationConfig, parameter: str, values: list, seeds: list[int],
    out_dir: Path, parallel: int = 1,
) -> int:
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    out_dir.mkdir(parents=True, exist_ok=True)
    safe = parameter.replace(".", "_")
    jobs = []
    for value in values:
        for seed in seeds:
            # validates the key and the value up front
            varied = config.with_override(parameter, value).with_seed(seed)
            name = out_dir / f"metrics_{safe}={value}_seed{seed}.csv"
            jobs.append((varied.raw, parameter, value, seed, str(name)))

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            records = list(pool.map(_sweep_job, jobs))
    else:
        records = [_sweep_job(job) for job in jobs]

    metrics = ("final_loss", "final_accuracy", "total_uplink_params",
               "total_energy_j", "consensus_error_mean")
    lines = [
        _provenance(config) + f" parameter={parameter} seeds={','.join(map(str, seeds))}",
        "value,n_seeds," + ",".join(f"{m}_mean,{m}_std" for m in metrics),
    ]
    for value in values:
        group = [r for r in records if r["value"] == value]
        cells = [str(value), str(len(group))]
        for m in metrics:
            data = [float(r[m]) for r in group]
            mean = statistics.fmean(data)
            std = statistics.pstdev(data) if len(data) > 1 else 0.0
            cells.extend([_fmt(mean), _fmt(std)])
        lines.append(",".join(cells))
    (out_dir / "aggregate.csv").write_text("\n".join(lines) + "\n")
    return 0


def _parse_values(text: str) -> list:
    values = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            values.append(json.loads(token))
        except json.JSONDecodeError:
            values.append(token)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fogsim", description="Hierarchical fog learning simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p_run = sub.add_parser("run", help="run one simulation")
    common(p_run)

    p_cmp = sub.add_parser("compare", help="run fog, star, and centralized baselines")
    common(p_cmp)

    p_sweep = sub.add_parser("sweep", help="sweep one config key over values and seeds")
    common(p_sweep)
    p_sweep.add_argument("--parameter", required=True, help="dotted config key, e.g. consensus.rounds")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    p_sweep.add_argument("--parallel", type=int, default=1, help="worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = SimulationConfig.from_file(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        out_dir = Path(args.out)
        if args.command == "run":
            return cmd_run(config, out_dir)
        if args.command == "compare":
            return cmd_compare(config, out_dir)
        values = _parse_values(args.values)
        seeds = (
            [int(s) for s in args.seeds.split(",") if s.strip()]
            if args.seeds else [config.seed]
        )
        return cmd_sweep(config, args.parameter, values, seeds, out_dir,
                         parallel=args.parallel)
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2
    except FogsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
