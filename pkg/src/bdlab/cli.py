"""Command-line entry points: attack, defend, report, partition-inspect.

Exit codes: 0 success, 2 configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import BdlabError, ConfigError

log = logging.getLogger("bdlab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdlab",
        description="Partition-scoped backdoor attack laboratory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="run the attack pipeline from a config file")
    p_attack.add_argument("config", help="YAML experiment config")
    p_attack.add_argument("--run-dir", default=None, help="override output.run_dir")
    p_attack.add_argument("--set", dest="overrides", action="append", default=[],
                          metavar="SECTION.KEY=VALUE", help="override any config key")

    p_defend = sub.add_parser("defend", help="run the defense harness on an attack run")
    p_defend.add_argument("run_dir", help="attack run directory")
    p_defend.add_argument("--config", default=None,
                          help="YAML file whose defense section overrides the run's")
    p_defend.add_argument("--set", dest="overrides", action="append", default=[],
                          metavar="SECTION.KEY=VALUE", help="override any config key")

    p_report = sub.add_parser("report", help="aggregate run reports into summary tables")
    p_report.add_argument("root", help="run directory or directory of run directories")
    p_report.add_argument("--out", default=None, help="output directory for tables/plots")

    p_inspect = sub.add_parser("partition-inspect",
                               help="summarize a run's partitioner on its dataset")
    p_inspect.add_argument("run_dir", help="attack run directory")
    return parser


def _cmd_attack(args) -> int:
    from .config import apply_overrides, load_config
    from .experiment import run_attack
    doc = apply_overrides(load_config(args.config), args.overrides)
    if args.run_dir:
        doc["output"]["run_dir"] = args.run_dir
    _, report = run_attack(doc)
    print(f"BA {report.ba:.2f}%  ASR {report.asr:.2f}%  "
          f"ASR-other {report.asr_other[0]:.2f}%±{report.asr_other[1]:.2f}%")
    print(f"run artifacts: {doc['output']['run_dir']}")
    return 0


def _cmd_defend(args) -> int:
    from .config import apply_overrides, load_config
    from .experiment import run_defend
    override = None
    if args.config:
        override = {"defense": load_config(args.config)["defense"]}
    if args.overrides:
        override = apply_overrides(override or {}, args.overrides)
    report = run_defend(args.run_dir, override)
    if report.inversion:
        print(f"inversion decision index: {report.inversion['decision_index']:.3f} "
              f"(flagged targets: {report.inversion['flagged'] or 'none'})")
    for method, entry in report.mitigation.items():
        print(f"{method}: ASR {entry['asr_before']:.2f}% -> {entry['asr_after']:.2f}%  "
              f"BA {entry['ba_before']:.2f}% -> {entry['ba_after']:.2f}%")
    print(f"defense report: {args.run_dir}/reports/defense_report.json")
    return 0


def _cmd_report(args) -> int:
    from .experiment import format_summary, run_report
    result = run_report(args.root, args.out)
    print(format_summary(result["runs"]))
    print(f"summary table: {result['summary_csv']}")
    return 0


def _cmd_partition_inspect(args) -> int:
    import torch
    from .experiment import load_experiment_dataset, load_run
    from .partition import max_overlap
    doc, _, partitioner, _ = load_run(args.run_dir)
    train_b, _ = load_experiment_dataset(doc)
    victim = int(doc["poison"]["victim"])
    victim_batch = train_b.select_class(victim)
    parts = partitioner.assign(victim_batch)
    sizes = torch.bincount(parts, minlength=partitioner.n_partitions).tolist()
    print(f"kind: {partitioner.kind}   n_partitions: {partitioner.n_partitions}")
    print(f"victim class {victim}: {len(victim_batch)} samples, partition sizes {sizes}")
    if "mode" in victim_batch.attrs:
        mo = max_overlap(parts.numpy(), victim_batch.attrs["mode"].numpy())
        print(f"max overlap vs generator modes: {mo:.1f}%")
    return 0


COMMANDS = {
    "attack": _cmd_attack,
    "defend": _cmd_defend,
    "report": _cmd_report,
    "partition-inspect": _cmd_partition_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
