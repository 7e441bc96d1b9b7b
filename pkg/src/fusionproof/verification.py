"""Proof verification, sampling-gated inspection, and fusion optimization.

Closes the loop: rebuild each group's Merkle tree from its stored blocks,
prune blocks that no longer match the proof, gate how often that check
runs with a continuous sampling plan, aggregate verified measurements,
and search for a cheaper fusion setup to run next.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence, Union

from .errors import MissingMetric, NoVerifiedData, ParseError, StoreWriteFailed
from .handler import (
    EXTERNAL_CALLER,
    FusionSetup,
    RouteKind,
    entry_fusion_key,
    fusion_key_for_trace,
)
from .proofs import (
    ThresholdPolicy,
    TreeInfo,
    block_key,
    build_merkle_tree,
    filter_batch,
    group_file_bytes,
    group_key,
    persist_evidence,
    record_leaf_hashes,
)
from .store import EvidenceStore, MemoryStore, load_setups
from .workload import (
    AppSpec,
    AttackPlan,
    CallMode,
    InvocationRecord,
    run_workload,
)


# ---------------------------------------------------------------------------
# Verification

def find_mismatch(
    recomputed_leaves: Sequence[str], stored_leaves: Sequence[str]
) -> list[int]:
    """Positions where the recomputed leaf hashes disagree with the proof.

    Any length difference counts as mismatches over the whole tail: an
    extra or missing block is tampering too.  Ascending order.
    """
    shared = min(len(recomputed_leaves), len(stored_leaves))
    out = [p for p in range(shared) if recomputed_leaves[p] != stored_leaves[p]]
    out.extend(range(shared, max(len(recomputed_leaves), len(stored_leaves))))
    return out


@dataclass(frozen=True)
class VerificationReport:
    integrity_verified: bool
    results: tuple[bool, ...]
    group_results: Mapping[str, bool]
    delete_list: Mapping[str, tuple[InvocationRecord, ...]]
    pruned: Mapping[str, tuple[str, ...]]
    notes: Mapping[str, str] = field(default_factory=dict)


def verify_integrity(
    setups: Mapping[str, Sequence[Union[InvocationRecord, TreeInfo]]],
    delete_list: Mapping[str, tuple[InvocationRecord, ...]],
    store: EvidenceStore,
) -> VerificationReport:
    """Check every group's blocks against its stored proof, pruning on failure.

    Per group: an empty proof fails outright with nothing to prune;
    otherwise the tree is rebuilt from the blocks' canonical bytes and
    compared by root.  On mismatch the offending blocks are deleted from
    the store (descending index, so pending positions stay valid), the
    group file is rewritten over the survivors, and the survivors are
    recorded in the returned delete_list.
    """
    group_results: dict[str, bool] = {}
    out_delete: dict[str, tuple[InvocationRecord, ...]] = dict(delete_list)
    pruned: dict[str, tuple[str, ...]] = {}
    notes: dict[str, str] = {}
    for key, blocks_with_tree in setups.items():
        blocks = list(blocks_with_tree)
        if not blocks or not isinstance(blocks[-1], TreeInfo):
            notes[key] = "group is missing its tree info"
            group_results[key] = False
            continue
        tree_info: TreeInfo = blocks.pop()
        if not tree_info.root or not tree_info.tree:
            group_results[key] = False
            continue
        recomputed = record_leaf_hashes(blocks)
        rebuilt = build_merkle_tree(recomputed)
        if rebuilt.root == tree_info.root:
            group_results[key] = True
            continue
        mismatched = find_mismatch(recomputed, tree_info.leaves)
        deletable = [p for p in mismatched if p < len(blocks)]
        removed = set(deletable)
        survivors = tuple(b for p, b in enumerate(blocks) if p not in removed)
        try:
            for p in reversed(deletable):
                store.delete(block_key(key, blocks[p].trace_id))
            new_tree = build_merkle_tree(record_leaf_hashes(survivors))
            store.put(group_key(key), group_file_bytes(survivors, new_tree))
        except StoreWriteFailed as exc:
            notes[key] = str(exc)
            group_results[key] = False
            continue
        out_delete[key] = survivors
        pruned[key] = tuple(blocks[p].trace_id for p in deletable)
        group_results[key] = False
    results = tuple(group_results.values())
    return VerificationReport(
        integrity_verified=all(results),
        results=results,
        group_results=group_results,
        delete_list=out_delete,
        pruned=pruned,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# CSP-1 sampling

class SamplingMode(Enum):
    FULL_INSPECTION = "full_inspection"
    SAMPLING = "sampling"


class InspectionOutcome(Enum):
    CONFORMING = "conforming"
    NONCONFORMING = "nonconforming"
    NOT_INSPECTED = "not_inspected"


@dataclass(frozen=True)
class SamplingState:
    """Continuous sampling plan state.

    Inspect everything until i consecutive conforming items clear, then
    inspect a fraction f at random; any inspected defect restarts the
    clearance from zero.
    """

    mode: SamplingMode = SamplingMode.FULL_INSPECTION
    clearance_count: int = 0
    i: int = 10
    f: float = 0.2

    def __post_init__(self) -> None:
        if self.i < 1:
            raise ParseError("clearance number i must be >= 1")
        if not 0.0 < self.f <= 1.0:
            raise ParseError("sampling fraction f must be in (0, 1]")
        if self.clearance_count < 0:
            raise ParseError("clearance_count must be non-negative")


def csp1_step(
    state: SamplingState,
    last_outcome: InspectionOutcome,
    uniform_draw: float,
) -> tuple[bool, SamplingState]:
    """Fold one observed outcome into the plan and decide the next inspection.

    The outcome is applied first; the inspect-next decision is made under
    the resulting mode, so the item right after clearance is already
    subject to sampling.
    """
    mode, count = state.mode, state.clearance_count
    if last_outcome is InspectionOutcome.CONFORMING:
        if mode is SamplingMode.FULL_INSPECTION:
            count += 1
            if count >= state.i:
                mode = SamplingMode.SAMPLING
    elif last_outcome is InspectionOutcome.NONCONFORMING:
        mode = SamplingMode.FULL_INSPECTION
        count = 0
    new_state = SamplingState(mode, count, state.i, state.f)
    if mode is SamplingMode.FULL_INSPECTION:
        return True, new_state
    return uniform_draw < state.f, new_state


# ---------------------------------------------------------------------------
# Metrics

@dataclass(frozen=True)
class CostModel:
    remote_overhead_ms: float = 50.0
    local_overhead_ms: float = 0.0
    memory_weight: float = 0.0


@dataclass(frozen=True)
class EdgeStats:
    count: int
    mode: CallMode
    route: RouteKind


@dataclass(frozen=True)
class AnnotatedMetrics:
    """Aggregates over records whose groups passed verification."""

    task_mean_billed_ms: Mapping[str, float]
    task_mean_memory_mb: Mapping[str, float]
    edges: Mapping[tuple[str, str], EdgeStats]
    setup_version: int


def annotate_metrics(
    clean_records: Sequence[InvocationRecord],
    report: VerificationReport,
    app: AppSpec,
) -> AnnotatedMetrics:
    """Aggregate per-task means and per-edge stats from trusted records.

    Only records whose fusion group verified true contribute; when none
    did, there is nothing safe to optimize from and NoVerifiedData tells
    the caller to revert.
    """
    verified = [
        r
        for r in clean_records
        if report.group_results.get(fusion_key_for_trace(r.trace_id), False)
    ]
    if not verified:
        raise NoVerifiedData("no verified groups contributed any records")
    billed: dict[str, list[int]] = {}
    memory: dict[str, list[int]] = {}
    edge_counts: dict[tuple[str, str], int] = {}
    edge_routes: dict[tuple[str, str], RouteKind] = {}
    task_map = app.task_map
    for record in verified:
        billed.setdefault(record.task, []).append(record.billed_duration_ms)
        memory.setdefault(record.task, []).append(record.memory_used_mb)
        if record.caller != EXTERNAL_CALLER:
            edge = (record.caller, record.task)
            edge_counts[edge] = edge_counts.get(edge, 0) + 1
            edge_routes[edge] = record.route
    edges: dict[tuple[str, str], EdgeStats] = {}
    # Sorted insertion keeps edge iteration order deterministic downstream.
    for caller, callee in sorted(edge_counts):
        try:
            mode = next(c.mode for c in task_map[caller].calls if c.callee == callee)
        except (KeyError, StopIteration):
            raise MissingMetric(f"observed edge {caller}->{callee} is not in the app") from None
        edges[(caller, callee)] = EdgeStats(
            count=edge_counts[(caller, callee)],
            mode=mode,
            route=edge_routes[(caller, callee)],
        )
    return AnnotatedMetrics(
        task_mean_billed_ms={t: sum(v) / len(v) for t, v in sorted(billed.items())},
        task_mean_memory_mb={t: sum(v) / len(v) for t, v in sorted(memory.items())},
        edges=edges,
        setup_version=max(r.setup_version for r in verified),
    )


# ---------------------------------------------------------------------------
# Cost model and candidate search

def estimate_cost(setup: FusionSetup, metrics: AnnotatedMetrics, model: CostModel) -> float:
    """Critical-path latency of one request under `setup`, plus a memory term.

    Sync edges run sequentially and pay the boundary overhead of their
    route under `setup`; async edges branch from the caller's start and
    contribute through the slowest branch.  The memory term bills each
    task's mean duration against its whole group's memory footprint,
    scaled by memory_weight.
    """
    children: dict[str, list[tuple[str, CallMode]]] = {}
    tasks = set(metrics.task_mean_billed_ms)
    has_incoming: set[str] = set()
    for caller, callee in metrics.edges:
        children.setdefault(caller, []).append((callee, metrics.edges[(caller, callee)].mode))
        tasks.update((caller, callee))
        has_incoming.add(callee)
    roots = sorted(tasks - has_incoming)
    if not roots:
        raise MissingMetric("metrics contain no entry task")

    def mean_billed(task: str) -> float:
        try:
            return metrics.task_mean_billed_ms[task]
        except KeyError:
            raise MissingMetric(f"no billed mean observed for task {task!r}") from None

    def boundary(caller: str, callee: str) -> float:
        if setup.same_group(caller, callee):
            return model.local_overhead_ms
        return model.remote_overhead_ms

    def completion(task: str, start: float) -> float:
        now = start + mean_billed(task)
        branch_ends: list[float] = []
        for callee, mode in children.get(task, []):
            delay = boundary(task, callee)
            if mode is CallMode.SYNC:
                now = completion(callee, now + delay)
            else:
                branch_ends.append(completion(callee, start + delay))
        return max([now, *branch_ends])

    cost = max(completion(root, 0.0) for root in roots)
    if model.memory_weight:
        term = 0.0
        for task, mean in metrics.task_mean_billed_ms.items():
            group_memory = sum(
                metrics.task_mean_memory_mb.get(member, 0.0)
                for member in setup.group_of(task)
            )
            term += mean * group_memory
        cost += model.memory_weight * term
    return cost


def propose_candidates(setup: FusionSetup, metrics: AnnotatedMetrics) -> list[FusionSetup]:
    """Neighboring setups: merge across sync boundaries, split async edges out.

    One merge candidate per observed sync edge that crosses groups (the
    callee's group is absorbed after the caller's), and one split
    candidate per observed async edge inside a group (the callee moves to
    a fresh singleton group at the end).  Deduplicated, current excluded.
    """
    seen = {setup.setup_part}
    candidates: list[FusionSetup] = []
    for caller, callee in sorted(metrics.edges):
        stats = metrics.edges[(caller, callee)]
        caller_group = setup.group_index(caller)
        callee_group = setup.group_index(callee)
        if stats.mode is CallMode.SYNC and caller_group != callee_group:
            groups: list[tuple[str, ...]] = []
            for idx, group in enumerate(setup.groups):
                if idx == caller_group:
                    groups.append(tuple(group) + tuple(setup.groups[callee_group]))
                elif idx == callee_group:
                    continue
                else:
                    groups.append(tuple(group))
            candidate = FusionSetup(tuple(groups), setup.version)
        elif stats.mode is CallMode.ASYNC and caller_group == callee_group:
            residual = tuple(n for n in setup.groups[caller_group] if n != callee)
            if not residual:
                continue
            groups = [
                residual if idx == caller_group else tuple(group)
                for idx, group in enumerate(setup.groups)
            ]
            groups.append((callee,))
            candidate = FusionSetup(tuple(groups), setup.version)
        else:
            continue
        if candidate.setup_part not in seen:
            seen.add(candidate.setup_part)
            candidates.append(candidate)
    return candidates


def optimize_step(
    current: FusionSetup,
    metrics: AnnotatedMetrics,
    model: CostModel,
    history: set[str],
) -> FusionSetup:
    """Greedy move: adopt the cheapest unvisited neighbor, if any improves.

    Ties between equally cheap candidates go to the lexicographically
    smallest setup_part; no strict improvement means staying put.
    """
    best: Optional[FusionSetup] = None
    best_cost = estimate_cost(current, metrics, model)
    for candidate in sorted(propose_candidates(current, metrics), key=lambda s: s.setup_part):
        if candidate.setup_part in history:
            continue
        cost = estimate_cost(candidate, metrics, model)
        if cost < best_cost:
            best, best_cost = candidate, cost
    return best if best is not None else current


# ---------------------------------------------------------------------------
# Optimization loop

@dataclass(frozen=True)
class IterationResult:
    iteration: int
    setup_part: str
    estimated_cost_ms: Optional[float]
    integrity_verified: Optional[bool]
    group_results: Mapping[str, bool]
    pruned_counts: Mapping[str, int]
    reverted: bool
    inspected: bool
    load_stats: Mapping[int, tuple[int, int]]


@dataclass(frozen=True)
class OptimizationTrace:
    iterations: tuple[IterationResult, ...]
    final_setup: FusionSetup


def iteration_result_to_wire(result: IterationResult) -> dict:
    return {
        "iteration": result.iteration,
        "setup_part": result.setup_part,
        "estimated_cost_ms": result.estimated_cost_ms,
        "integrity_verified": result.integrity_verified,
        "group_results": dict(result.group_results),
        "pruned_counts": dict(result.pruned_counts),
        "reverted": result.reverted,
        "inspected": result.inspected,
        "load_stats": {str(load): list(pair) for load, pair in result.load_stats.items()},
    }


def run_optimization(
    app: AppSpec,
    initial_setup: FusionSetup,
    iterations: int,
    model: Optional[CostModel] = None,
    policy: Optional[ThresholdPolicy] = None,
    attack: Optional[AttackPlan] = None,
    seed: int = 0,
    request_counts: Sequence[int] = (10,),
    sampling: Optional[SamplingState] = None,
    store_factory: Optional[Callable[[int], EvidenceStore]] = None,
    tamper: Optional[Callable[[int, EvidenceStore], None]] = None,
) -> OptimizationTrace:
    """Iterate run → filter → persist → verify → annotate → adopt.

    Each iteration runs the workload under the current setup, persists
    filtered evidence to a fresh store, verifies it when the sampling
    plan says so (pruning and re-verifying on failure), and feeds the
    surviving measurements to the optimizer.  When nothing survives the
    setup reverts to initial_setup for the next iteration.  The optional
    tamper hook mutates the store between persist and verify, simulating
    an attacker with storage access.
    """
    if iterations < 1:
        raise ParseError("iterations must be >= 1")
    model = model if model is not None else CostModel()
    policy = policy if policy is not None else ThresholdPolicy()
    state = sampling if sampling is not None else SamplingState()
    rng = random.Random(seed)
    iteration_seeds = [rng.getrandbits(64) for _ in range(iterations)]
    draws = [rng.random() for _ in range(iterations)]

    current = initial_setup
    history: set[str] = set()
    results: list[IterationResult] = []
    last_outcome = InspectionOutcome.NOT_INSPECTED

    for it in range(iterations):
        history.add(current.setup_part)
        inspect_this, state = csp1_step(state, last_outcome, draws[it])
        batch = run_workload(
            app,
            current,
            request_counts,
            attack,
            iterations=1,
            seed=iteration_seeds[it],
            remote_overhead_ms=model.remote_overhead_ms,
            local_overhead_ms=model.local_overhead_ms,
            iteration_offset=it,
        )
        clean, flagged = filter_batch(batch.records, policy)
        flagged_traces = {record.trace_id for record, _ in flagged}
        load_stats: dict[int, tuple[int, int]] = {}
        for outcome in batch.outcomes:
            ok, bad = load_stats.get(outcome.load, (0, 0))
            if outcome.trace_id in flagged_traces:
                load_stats[outcome.load] = (ok, bad + 1)
            else:
                load_stats[outcome.load] = (ok + 1, bad)

        store = store_factory(it) if store_factory is not None else MemoryStore()
        fusion_key = entry_fusion_key(current, app.entry_task)
        persist_evidence(store, fusion_key, clean)
        if tamper is not None:
            tamper(it, store)

        integrity: Optional[bool] = None
        group_results: Mapping[str, bool] = {}
        pruned_counts: dict[str, int] = {}
        if inspect_this:
            setups, _corrupt = load_setups(store)
            report = verify_integrity(setups, {}, store)
            integrity = report.integrity_verified
            group_results = report.group_results
            pruned_counts = {k: len(v) for k, v in report.pruned.items()}
            last_outcome = (
                InspectionOutcome.CONFORMING
                if report.integrity_verified
                else InspectionOutcome.NONCONFORMING
            )
            if report.integrity_verified:
                usable_records: Sequence[InvocationRecord] = clean
                effective = report
            else:
                # Pruning rewrote the group files; a second pass decides
                # which survivors can be trusted for metrics.
                surviving_setups, _ = load_setups(store)
                effective = verify_integrity(
                    surviving_setups, dict(report.delete_list), store
                )
                usable_records = [
                    record
                    for key, blocks in surviving_setups.items()
                    for record in blocks[:-1]
                ]
        else:
            # Skipped by the sampling plan: the batch is accepted on trust.
            last_outcome = InspectionOutcome.NOT_INSPECTED
            usable_records = clean
            effective = VerificationReport(
                integrity_verified=True,
                results=(True,),
                group_results={fusion_key: True},
                delete_list={},
                pruned={},
            )

        reverted = False
        cost: Optional[float] = None
        try:
            metrics = annotate_metrics(usable_records, effective, app)
            cost = estimate_cost(current, metrics, model)
            proposed = optimize_step(current, metrics, model, history)
            if proposed.setup_part != current.setup_part:
                next_setup = proposed.with_version(current.version + 1)
            else:
                next_setup = current
        except NoVerifiedData:
            reverted = True
            next_setup = initial_setup

        results.append(
            IterationResult(
                iteration=it,
                setup_part=current.setup_part,
                estimated_cost_ms=cost,
                integrity_verified=integrity,
                group_results=dict(group_results),
                pruned_counts=pruned_counts,
                reverted=reverted,
                inspected=inspect_this,
                load_stats=load_stats,
            )
        )
        current = next_setup

    return OptimizationTrace(iterations=tuple(results), final_setup=current)
