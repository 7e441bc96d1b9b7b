"""Command-line scenario runner.

Wires the full pipeline: run a workload and persist filtered evidence,
verify stored proofs, drive the optimization loop, and render per-load
outcome tables.  All outputs are machine-readable (JSON/CSV) and fully
determined by the config, seed included.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

from .errors import FusionProofError
from .handler import FusionSetup, entry_fusion_key
from .proofs import ThresholdPolicy, filter_batch, persist_evidence, record_to_wire
from .store import FileStore, load_setups
from .verification import (
    CostModel,
    SamplingState,
    VerificationReport,
    iteration_result_to_wire,
    run_optimization,
    verify_integrity,
)
from .workload import (
    AppSpec,
    AttackPlan,
    builtin_iot_app,
    builtin_tree_app,
    load_app_spec,
    run_workload,
)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_CORRUPT = 3


class ConfigError(FusionProofError):
    """The scenario config cannot be resolved to runnable inputs."""


_ATTACK_GATES: Mapping[str, Callable[[int, int], bool]] = {
    "odd_iterations": lambda iteration, request: iteration % 2 == 1,
    "even_iterations": lambda iteration, request: iteration % 2 == 0,
    "always": lambda iteration, request: True,
    "first_request": lambda iteration, request: request == 0,
}


@dataclass(frozen=True)
class ScenarioConfig:
    app: str = "iot"
    fanout: int = 2
    depth: int = 1
    initial_setup: Union[str, tuple[tuple[str, ...], ...]] = "fused"
    request_counts: tuple[int, ...] = (10,)
    iterations: int = 7
    attack_mode: str = "none"
    attack_target: Optional[str] = None
    attack_inflated_ms: float = 999999.0
    attack_swap: Optional[tuple[str, str]] = None
    attack_when: str = "odd_iterations"
    max_billed_ms: float = 90000.0
    max_memory_mb: float = 128.0
    sequence_check: bool = True
    remote_overhead_ms: float = 50.0
    local_overhead_ms: float = 0.0
    memory_weight: float = 0.0
    csp1_i: int = 10
    csp1_f: float = 0.2
    seed: Optional[int] = None
    store_root: str = "evidence"
    output_dir: str = "out"


_TOP_LEVEL_KEYS = {
    "app", "app_params", "initial_setup", "request_counts", "iterations",
    "attack", "policy", "cost_model", "csp1", "seed", "store_root", "output_dir",
}


def config_from_dict(doc: Mapping) -> ScenarioConfig:
    unknown = set(doc) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config = ScenarioConfig()
    if "app" in doc:
        config = replace(config, app=str(doc["app"]))
    params = doc.get("app_params", {})
    if params:
        config = replace(
            config,
            fanout=int(params.get("fanout", config.fanout)),
            depth=int(params.get("depth", config.depth)),
        )
    if "initial_setup" in doc:
        raw = doc["initial_setup"]
        if isinstance(raw, str):
            config = replace(config, initial_setup=raw)
        elif isinstance(raw, list):
            config = replace(
                config, initial_setup=tuple(tuple(group) for group in raw)
            )
        else:
            raise ConfigError("initial_setup must be 'split', 'fused', or group lists")
    if "request_counts" in doc:
        counts = tuple(int(c) for c in doc["request_counts"])
        if not counts or any(c < 1 for c in counts):
            raise ConfigError("request_counts must be positive integers")
        config = replace(config, request_counts=counts)
    if "iterations" in doc:
        config = replace(config, iterations=int(doc["iterations"]))
    attack = doc.get("attack", {})
    if attack:
        swap = attack.get("swap")
        config = replace(
            config,
            attack_mode=str(attack.get("mode", "none")),
            attack_target=attack.get("target_task"),
            attack_inflated_ms=float(attack.get("inflated_duration_ms", 999999.0)),
            attack_swap=tuple(swap) if swap else None,
            attack_when=str(attack.get("when", "odd_iterations")),
        )
    policy = doc.get("policy", {})
    if policy:
        config = replace(
            config,
            max_billed_ms=float(policy.get("max_billed_ms", config.max_billed_ms)),
            max_memory_mb=float(policy.get("max_memory_mb", config.max_memory_mb)),
            sequence_check=bool(policy.get("sequence_check", config.sequence_check)),
        )
    cost_model = doc.get("cost_model", {})
    if cost_model:
        config = replace(
            config,
            remote_overhead_ms=float(
                cost_model.get("remote_overhead_ms", config.remote_overhead_ms)
            ),
            local_overhead_ms=float(
                cost_model.get("local_overhead_ms", config.local_overhead_ms)
            ),
            memory_weight=float(cost_model.get("memory_weight", config.memory_weight)),
        )
    csp1 = doc.get("csp1", {})
    if csp1:
        config = replace(
            config,
            csp1_i=int(csp1.get("i", config.csp1_i)),
            csp1_f=float(csp1.get("f", config.csp1_f)),
        )
    if "seed" in doc and doc["seed"] is not None:
        config = replace(config, seed=int(doc["seed"]))
    if "store_root" in doc:
        config = replace(config, store_root=str(doc["store_root"]))
    if "output_dir" in doc:
        config = replace(config, output_dir=str(doc["output_dir"]))
    return config


def load_config_file(path: Union[str, Path]) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return config_from_dict(doc)


def build_app(config: ScenarioConfig) -> AppSpec:
    if config.app == "iot":
        return builtin_iot_app()
    if config.app == "tree":
        return builtin_tree_app(config.fanout, config.depth)
    path = Path(config.app)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read app spec {path}: {exc}") from exc
    return load_app_spec(text)


def build_setup(config: ScenarioConfig, app: AppSpec) -> FusionSetup:
    raw = config.initial_setup
    if raw == "split":
        return FusionSetup.singletons(app.task_names())
    if raw == "fused":
        return FusionSetup.fused([app.task_names()])
    if isinstance(raw, tuple):
        setup = FusionSetup.fused(raw)
        if sorted(setup.functions()) != sorted(app.task_names()):
            raise ConfigError("initial_setup must partition exactly the app's tasks")
        return setup
    raise ConfigError(f"bad initial_setup {raw!r}")


def build_attack(config: ScenarioConfig) -> Optional[AttackPlan]:
    if config.attack_when not in _ATTACK_GATES:
        raise ConfigError(
            f"bad attack.when {config.attack_when!r}; "
            f"choose from {', '.join(sorted(_ATTACK_GATES))}"
        )
    gate = _ATTACK_GATES[config.attack_when]
    if config.attack_mode == "none":
        return None
    if config.attack_mode == "dow":
        if not config.attack_target:
            raise ConfigError("attack mode 'dow' needs attack.target_task")
        return AttackPlan.dow(config.attack_target, config.attack_inflated_ms, gate)
    if config.attack_mode == "business_logic":
        if not config.attack_swap:
            raise ConfigError("attack mode 'business_logic' needs attack.swap")
        return AttackPlan.business_logic(config.attack_swap, gate)
    raise ConfigError(f"bad attack mode {config.attack_mode!r}")


def build_policy(config: ScenarioConfig, app: AppSpec) -> ThresholdPolicy:
    expected = app.sync_chain() if config.sequence_check else ()
    return ThresholdPolicy(
        max_billed_ms=config.max_billed_ms,
        max_memory_mb=config.max_memory_mb,
        expected_sequence=expected,
    )


def build_cost_model(config: ScenarioConfig) -> CostModel:
    return CostModel(
        remote_overhead_ms=config.remote_overhead_ms,
        local_overhead_ms=config.local_overhead_ms,
        memory_weight=config.memory_weight,
    )


def _require_seed(config: ScenarioConfig) -> int:
    if config.seed is None:
        raise ConfigError("seed is mandatory; pass --seed or set it in the config")
    return config.seed


_RECORD_COLUMNS = [
    "trace_id", "task", "chain_index", "caller", "start_ms",
    "billed_duration_ms", "memory_used_mb", "route", "setup_version",
]


def _record_row(record) -> list:
    wire = record_to_wire(record)
    return [
        wire["traceid"], wire["task"], wire["idx"], wire["caller"], wire["start"],
        wire["billed"], wire["mem"], wire["route"], wire["setupv"],
    ]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_run(config: ScenarioConfig) -> int:
    """Execute the workload, filter it, and persist evidence."""
    seed = _require_seed(config)
    app = build_app(config)
    setup = build_setup(config, app)
    attack = build_attack(config)
    policy = build_policy(config, app)
    batch = run_workload(
        app,
        setup,
        config.request_counts,
        attack,
        config.iterations,
        seed,
        remote_overhead_ms=config.remote_overhead_ms,
        local_overhead_ms=config.local_overhead_ms,
    )
    clean, flagged = filter_batch(batch.records, policy)
    store = FileStore(config.store_root)
    persist_evidence(store, entry_fusion_key(setup, app.entry_task), clean)
    out = Path(config.output_dir)
    _write_csv(out / "records.csv", _RECORD_COLUMNS, [_record_row(r) for r in batch.records])
    _write_csv(
        out / "flagged.csv",
        _RECORD_COLUMNS + ["violation", "detail"],
        [_record_row(r) + [v.kind.value, v.detail] for r, v in flagged],
    )
    return EXIT_OK


def _report_to_wire(report: VerificationReport, corrupt: Mapping[str, str]) -> dict:
    return {
        "integrity_verified": report.integrity_verified,
        "results": list(report.results),
        "group_results": dict(report.group_results),
        "pruned": {key: list(ids) for key, ids in report.pruned.items()},
        "surviving_counts": {key: len(records) for key, records in report.delete_list.items()},
        "notes": dict(report.notes),
        "corrupt": dict(corrupt),
    }


def cmd_verify(config: ScenarioConfig) -> int:
    """Re-check all stored proofs, pruning tampered blocks."""
    store = FileStore(config.store_root)
    setups, corrupt = load_setups(store)
    report = verify_integrity(setups, {}, store)
    _write_json(Path(config.output_dir) / "verification.json", _report_to_wire(report, corrupt))
    if corrupt:
        return EXIT_CORRUPT
    return EXIT_OK if report.integrity_verified else EXIT_VERIFY_FAILED


def cmd_optimize(config: ScenarioConfig) -> int:
    """Run the full iterate-verify-adopt loop and dump its trace."""
    seed = _require_seed(config)
    app = build_app(config)
    setup = build_setup(config, app)
    attack = build_attack(config)
    policy = build_policy(config, app)
    model = build_cost_model(config)
    store_root = Path(config.store_root)
    trace = run_optimization(
        app,
        setup,
        config.iterations,
        model=model,
        policy=policy,
        attack=attack,
        seed=seed,
        request_counts=config.request_counts,
        sampling=SamplingState(i=config.csp1_i, f=config.csp1_f),
        store_factory=lambda it: FileStore(store_root / f"iter{it:03d}"),
    )
    out = Path(config.output_dir)
    _write_json(
        out / "optimization_trace.json",
        {
            "iterations": [iteration_result_to_wire(r) for r in trace.iterations],
            "final_setup_part": trace.final_setup.setup_part,
        },
    )
    rows = []
    for result in trace.iterations:
        cost = "" if result.estimated_cost_ms is None else f"{result.estimated_cost_ms:g}"
        for load in sorted(result.load_stats):
            ok, bad = result.load_stats[load]
            rows.append([result.iteration, load, ok, bad, cost])
    _write_csv(out / "summary.csv", ["iteration", "load", "successes", "failures", "cost"], rows)
    return EXIT_OK


def cmd_report(config: ScenarioConfig) -> int:
    """Aggregate a prior optimization trace into a per-load outcome table."""
    trace_path = Path(config.output_dir) / "optimization_trace.json"
    if not trace_path.exists():
        print(f"missing {trace_path}; run the optimize command first", file=sys.stderr)
        return EXIT_USAGE
    payload = json.loads(trace_path.read_text(encoding="utf-8"))
    rows = []
    for entry in payload.get("iterations", []):
        group_results = entry.get("group_results", {})
        verified = sum(1 for ok in group_results.values() if ok)
        failed = sum(1 for ok in group_results.values() if not ok)
        pruned = sum(entry.get("pruned_counts", {}).values())
        for load_text in entry.get("load_stats", {}):
            rows.append([int(load_text), entry["iteration"], verified, failed, pruned])
    rows.sort(key=lambda row: (row[0], row[1]))
    _write_csv(
        Path(config.output_dir) / "outcomes_by_load.csv",
        ["load", "iteration", "verified_groups", "failed_groups", "pruned_blocks"],
        rows,
    )
    return EXIT_OK


_COMMANDS = {
    "run": cmd_run,
    "verify": cmd_verify,
    "optimize": cmd_optimize,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionproof",
        description="Simulate fused serverless workloads with tamper-evident logs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, docs in (
        ("run", "execute a workload and persist filtered evidence"),
        ("verify", "re-check stored proofs and prune tampered blocks"),
        ("optimize", "run the iterative verify-and-refine loop"),
        ("report", "aggregate optimize outputs into a per-load table"),
    ):
        cmd = sub.add_parser(name, help=docs)
        cmd.add_argument("--config", help="JSON scenario config file")
        cmd.add_argument("--seed", type=int, help="override the run seed")
        cmd.add_argument("--iterations", type=int, help="override iteration count")
        cmd.add_argument(
            "--attack", choices=["none", "dow", "business_logic"],
            help="override the attack mode",
        )
        cmd.add_argument("--store", help="override the evidence store root")
        cmd.add_argument("--output", help="override the output directory")
    return parser


def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config_file(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.iterations is not None:
        config = replace(config, iterations=args.iterations)
    if args.attack is not None:
        config = replace(config, attack_mode=args.attack)
    if args.store is not None:
        config = replace(config, store_root=args.store)
    if args.output is not None:
        config = replace(config, output_dir=args.output)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return _COMMANDS[args.command](config)
    except FusionProofError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
