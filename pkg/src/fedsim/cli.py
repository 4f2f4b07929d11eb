"""Command-line entry point: ``fedsim run`` and ``fedsim compare``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, PRESETS, parse_config, preset_name, serialize_config, with_preset
from .orchestrator import ExperimentConfig, Simulation, config_digest, config_to_dict
from .report import FINAL_WINDOW, MetricsTable, render_svg

log = logging.getLogger("fedsim")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Reseed data, model init and every run substream together."""
    return dataclasses.replace(
        cfg,
        seed=seed,
        data=dataclasses.replace(cfg.data, seed=seed),
        model=dataclasses.replace(cfg.model, init_seed=seed),
    )


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("FEDSIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FEDSIM_THREADS must be an integer, got {env!r}") from None
    return 1


def write_manifest(path: Path, cfg: ExperimentConfig, out: Path) -> None:
    manifest = {
        "config": config_to_dict(cfg),
        "digest": config_digest(cfg),
        "output_dir": str(out),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def grad_norm_rows(records, iid_mask) -> str:
    lines = ["round,node,is_iid,grad_norm"]
    for r in records:
        for node in sorted(r.grad_norms):
            lines.append(f"{r.round},{node},{int(iid_mask[node])},{r.grad_norms[node]!r}")
    return "\n".join(lines) + "\n"


def run_cell(cfg: ExperimentConfig, workers: int = 1):
    sim = Simulation(cfg, workers=workers)
    records = sim.run()
    table = MetricsTable.from_records(records, preset_name(cfg), cfg.seed)
    return table, records, sim


def cmd_run(config: Path, out: Path, seed: int | None = None, policy: str | None = None,
            force: bool = False, threads: int | None = None) -> int:
    cfg = parse_config(config)
    if policy:
        cfg = with_preset(cfg, policy)
    if seed is not None:
        cfg = with_seed(cfg, seed)
    workers = _threads(threads)
    _prepare_out(out, force)
    table, records, sim = run_cell(cfg, workers)
    table.write(out / "metrics.csv")
    (out / "config.ini").write_text(serialize_config(cfg))
    write_manifest(out / "manifest.json", cfg, out)
    sim.save_checkpoint(out / "checkpoint.bin")
    if cfg.track_grad_norms:
        (out / "grad_norms.csv").write_text(grad_norm_rows(records, sim.data.iid_mask))
    last = records[-1]
    print(f"round {last.round}: train_loss={last.train_loss:.4f} test_acc={last.test_acc:.4f} -> {out}")
    return EXIT_OK


def _compare_cell(args):
    cfg, = args
    table, records, _ = run_cell(cfg)
    divs = [r.divergence for r in records if r.divergence is not None]
    return table, (statistics.fmean(divs) if divs else None)


def cmd_compare(config: Path, policies: list[str], seeds: list[int], out: Path,
                force: bool = False, threads: int | None = None) -> int:
    if len(policies) < 2:
        raise UsageError("compare needs at least two policies")
    if len(set(policies)) != len(policies):
        raise UsageError("duplicate policy names")
    if not seeds:
        raise UsageError("compare needs at least one seed")
    base = parse_config(config)
    cells = [(p, s, with_seed(with_preset(base, p), s)) for p in policies for s in seeds]
    workers = _threads(threads)
    _prepare_out(out, force)
    jobs = [(cfg,) for _, _, cfg in cells]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_compare_cell, jobs))
    else:
        results = [_compare_cell(j) for j in jobs]

    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    summary = ["policy,seed,final_train_loss,final_test_acc,window_test_acc,mean_divergence"]
    by_policy: dict[str, list[MetricsTable]] = {p: [] for p in policies}
    for (p, s, _), (table, mean_div) in zip(cells, results):
        table.write(runs / f"{p}_seed{s}.csv")
        by_policy[p].append(table)
        summary.append(",".join([
            p, str(s),
            repr(table.column("train_loss")[-1]),
            repr(table.column("test_acc")[-1]),
            repr(table.final_mean("test_acc", FINAL_WINDOW)),
            "" if mean_div is None else repr(mean_div),
        ]))
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    (out / "config.ini").write_text(serialize_config(base))

    for metric in ("test_acc", "train_loss"):
        series = {}
        for p, tables in by_policy.items():
            rounds = tables[0].column("round")
            cols = [t.column(metric) for t in tables]
            series[p] = (rounds, [statistics.fmean(v) for v in zip(*cols)])
        title = f"{metric} (mean over {len(seeds)} seed{'s' if len(seeds) > 1 else ''})"
        (out / f"{metric}.svg").write_text(render_svg(series, title=title, ylabel=metric))
    print(f"{len(cells)} runs -> {out}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated learning node-selection simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", type=Path, required=True, help="INI experiment config")
    run.add_argument("--out", type=Path, required=True, help="output directory")
    run.add_argument("--seed", type=int, help="override the master seed (data, init and run streams)")
    run.add_argument("--policy", choices=sorted(PRESETS), help="override the policy preset")
    run.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    run.add_argument("--threads", type=int, help="worker threads (default: FEDSIM_THREADS or 1)")

    cmp_ = sub.add_parser("compare", help="paired comparison of several policies")
    cmp_.add_argument("--config", type=Path, required=True, help="INI experiment config")
    cmp_.add_argument("--out", type=Path, required=True, help="output directory")
    cmp_.add_argument("--policy", dest="policies", type=_str_list, required=True,
                      help=f"comma-separated, from: {', '.join(PRESETS)}")
    cmp_.add_argument("--seed", dest="seeds", type=_int_list, default=[0], help="comma-separated seeds")
    cmp_.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    cmp_.add_argument("--threads", type=int, help="parallel runs (default: FEDSIM_THREADS or 1)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.policy, args.force, args.threads)
        for p in args.policies:
            if p not in PRESETS:
                raise UsageError(f"unknown policy '{p}' (choose from {', '.join(PRESETS)})")
        return cmd_compare(args.config, args.policies, args.seeds, args.out, args.force, args.threads)
    except (UsageError, ConfigError) as exc:
        print(f"fedsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime-failure code
        log.debug("run failed", exc_info=True)
        print(f"fedsim: failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
