"""Log filtering, canonical hashing, Merkle proofs, and evidence persistence.

Records flow through here on their way to the evidence store: parse the
platform log lines, filter out traces that violate the threshold policy,
hash the survivors canonically, build the Merkle tree over the hashes,
and write blocks plus proof to the store.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .errors import InvalidHexLeaf, ParseError
from .handler import RouteKind
from .workload import InvocationRecord

_HEX_DIGITS = set("0123456789abcdef")


def is_hex64(value: str) -> bool:
    return len(value) == 64 and all(ch in _HEX_DIGITS for ch in value)


def calc_hash(data: bytes) -> str:
    """Lowercase hex SHA-256 of raw bytes."""
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Log parsing

_REPORT_RE = re.compile(
    r"^REPORT traceid=(?P<traceid>\S+) task=(?P<task>\S+) idx=(?P<idx>\d+) "
    r"caller=(?P<caller>\S+) start=(?P<start>\d+) billed=(?P<billed>\d+) "
    r"mem=(?P<mem>\d+) route=(?P<route>LOCAL|REMOTE) setupv=(?P<setupv>\d+)$"
)


@dataclass(frozen=True)
class RejectedLine:
    line_number: int
    line: str
    reason: str


def parse_log_lines(lines: Iterable[str]) -> tuple[list[InvocationRecord], list[RejectedLine]]:
    """Extract well-formed REPORT lines; reject the rest with reasons.

    Line numbers are 1-based.  Rejects are data, not faults: a noisy log
    stream must never abort ingestion.
    """
    records: list[InvocationRecord] = []
    rejects: list[RejectedLine] = []
    for line_number, line in enumerate(lines, start=1):
        match = _REPORT_RE.match(line)
        if not match:
            rejects.append(RejectedLine(line_number, line, "does not match REPORT grammar"))
            continue
        billed = int(match["billed"])
        mem = int(match["mem"])
        if billed < 1 or mem < 1:
            rejects.append(RejectedLine(line_number, line, "billed and mem must be positive"))
            continue
        records.append(
            InvocationRecord(
                trace_id=match["traceid"],
                task=match["task"],
                chain_index=int(match["idx"]),
                caller=match["caller"],
                start_ms=int(match["start"]),
                billed_duration_ms=billed,
                memory_used_mb=mem,
                route=RouteKind(match["route"]),
                setup_version=int(match["setupv"]),
            )
        )
    return records, rejects


# ---------------------------------------------------------------------------
# Threshold filtering

class VerdictStatus(Enum):
    PASS = "pass"
    VIOLATION = "violation"


class ViolationKind(Enum):
    NONE = "none"
    DURATION_EXCEEDED = "duration_exceeded"
    MEMORY_EXCEEDED = "memory_exceeded"
    SEQUENCE_VIOLATION = "sequence_violation"


@dataclass(frozen=True)
class Verdict:
    status: VerdictStatus
    kind: ViolationKind
    detail: str = ""

    def __post_init__(self) -> None:
        if (self.status is VerdictStatus.PASS) != (self.kind is ViolationKind.NONE):
            raise ParseError("verdict status and kind disagree")

    @classmethod
    def passing(cls) -> "Verdict":
        return cls(VerdictStatus.PASS, ViolationKind.NONE)

    @classmethod
    def violation(cls, kind: ViolationKind, detail: str) -> "Verdict":
        return cls(VerdictStatus.VIOLATION, kind, detail)


@dataclass(frozen=True)
class ThresholdPolicy:
    """Per-record limits plus the expected task order of one trace.

    An empty expected_sequence disables the order check.
    """

    max_billed_ms: float = 90000.0
    max_memory_mb: float = 128.0
    expected_sequence: tuple[str, ...] = ()


def check_record(record: InvocationRecord, policy: ThresholdPolicy) -> Verdict:
    """Threshold check for one record; duration outranks memory."""
    if record.billed_duration_ms > policy.max_billed_ms:
        return Verdict.violation(
            ViolationKind.DURATION_EXCEEDED,
            f"task {record.task}: billed {record.billed_duration_ms} ms "
            f"> limit {policy.max_billed_ms:g} ms",
        )
    if record.memory_used_mb > policy.max_memory_mb:
        return Verdict.violation(
            ViolationKind.MEMORY_EXCEEDED,
            f"task {record.task}: memory {record.memory_used_mb} MB "
            f"> limit {policy.max_memory_mb:g} MB",
        )
    return Verdict.passing()


def check_chain_sequence(
    records_of_one_trace: Sequence[InvocationRecord], policy: ThresholdPolicy
) -> Verdict:
    """Compare one trace's task order (by chain_index) to the policy."""
    if not policy.expected_sequence:
        return Verdict.passing()
    ordered = sorted(records_of_one_trace, key=lambda r: r.chain_index)
    observed = tuple(r.task for r in ordered)
    if observed != policy.expected_sequence:
        return Verdict.violation(
            ViolationKind.SEQUENCE_VIOLATION,
            f"observed {','.join(observed)}; expected {','.join(policy.expected_sequence)}",
        )
    return Verdict.passing()


def filter_batch(
    records: Sequence[InvocationRecord], policy: ThresholdPolicy
) -> tuple[list[InvocationRecord], list[tuple[InvocationRecord, Verdict]]]:
    """Split records into clean and flagged, a whole trace at a time.

    A trace with ANY violating record (or a broken sequence) is flagged
    atomically: a partially tampered chain cannot vouch for its remaining
    hops.  Both outputs preserve input order.
    """
    by_trace: dict[str, list[InvocationRecord]] = {}
    for record in records:
        by_trace.setdefault(record.trace_id, []).append(record)

    trace_verdicts: dict[str, Optional[Verdict]] = {}
    record_verdicts: dict[int, Verdict] = {}
    for trace_id, trace_records in by_trace.items():
        trigger: Optional[Verdict] = None
        for record in trace_records:
            verdict = check_record(record, policy)
            if verdict.status is VerdictStatus.VIOLATION:
                record_verdicts[id(record)] = verdict
                if trigger is None:
                    trigger = verdict
        sequence_verdict = check_chain_sequence(trace_records, policy)
        if trigger is None and sequence_verdict.status is VerdictStatus.VIOLATION:
            trigger = sequence_verdict
        trace_verdicts[trace_id] = trigger

    clean: list[InvocationRecord] = []
    flagged: list[tuple[InvocationRecord, Verdict]] = []
    for record in records:
        trigger = trace_verdicts[record.trace_id]
        if trigger is None:
            clean.append(record)
        else:
            flagged.append((record, record_verdicts.get(id(record), trigger)))
    return clean, flagged


# ---------------------------------------------------------------------------
# Canonical serialization

def record_to_wire(record: InvocationRecord) -> dict:
    """Record as an ordered plain dict in the pinned field order."""
    return {
        "traceid": record.trace_id,
        "task": record.task,
        "idx": record.chain_index,
        "caller": record.caller,
        "start": record.start_ms,
        "billed": record.billed_duration_ms,
        "mem": record.memory_used_mb,
        "route": record.route.value,
        "setupv": record.setup_version,
    }


def record_from_wire(obj: Mapping) -> InvocationRecord:
    try:
        return InvocationRecord(
            trace_id=obj["traceid"],
            task=obj["task"],
            chain_index=int(obj["idx"]),
            caller=obj["caller"],
            start_ms=int(obj["start"]),
            billed_duration_ms=int(obj["billed"]),
            memory_used_mb=int(obj["mem"]),
            route=RouteKind(obj["route"]),
            setup_version=int(obj["setupv"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad record object: {exc}") from exc


def canonical_record_bytes(record: InvocationRecord) -> bytes:
    """Single-line UTF-8 serialization with pinned field order, no whitespace.

    This exact byte string is what gets hashed into the tree and stored
    as the record's block, so it must never drift.
    """
    return json.dumps(record_to_wire(record), separators=(",", ":")).encode("utf-8")


# ---------------------------------------------------------------------------
# Merkle tree

@dataclass(frozen=True)
class TreeInfo:
    """Merkle proof triple.

    tree lists the original leaves followed by every combined hash in
    construction order, so the root is the last element; leaves repeats
    the input hashes before any odd-padding.
    """

    root: str
    tree: tuple[str, ...]
    leaves: tuple[str, ...]

    @classmethod
    def empty(cls) -> "TreeInfo":
        return cls("", (), ())


def treeinfo_to_wire(info: TreeInfo) -> dict:
    return {"root": info.root, "tree": list(info.tree), "leaf": list(info.leaves)}


def treeinfo_from_wire(obj: Mapping) -> TreeInfo:
    try:
        root = obj["root"]
        tree = tuple(obj["tree"])
        leaves = tuple(obj["leaf"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"bad tree object: {exc}") from exc
    if not isinstance(root, str):
        raise ParseError("tree root must be a string")
    return TreeInfo(root, tree, leaves)


def _combine(left: str, right: str) -> str:
    # Combined hash input is the UTF-8 concatenation of the two hex
    # strings, not their raw digest bytes.
    return calc_hash((left + right).encode("utf-8"))


def build_merkle_tree(leaf_hashes: Sequence[str]) -> TreeInfo:
    """Build the proof over leaf hashes, duplicating the last element of
    every odd level so no leaf ever drops out of the tree."""
    for leaf in leaf_hashes:
        if not is_hex64(leaf):
            raise InvalidHexLeaf(f"leaf {leaf!r} is not a 64-char lowercase hex digest")
    if not leaf_hashes:
        return TreeInfo.empty()
    tree: list[str] = list(leaf_hashes)
    level: list[str] = list(leaf_hashes)
    if len(level) % 2 == 1:
        level.append(level[-1])
    while len(level) > 1:
        combined = [_combine(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        tree.extend(combined)
        level = combined
        if len(level) % 2 == 1 and len(level) > 1:
            level.append(level[-1])
    return TreeInfo(root=level[0], tree=tuple(tree), leaves=tuple(leaf_hashes))


def record_leaf_hashes(records: Sequence[InvocationRecord]) -> list[str]:
    return [calc_hash(canonical_record_bytes(r)) for r in records]


# ---------------------------------------------------------------------------
# Persistence

@dataclass(frozen=True)
class PersistReceipt:
    block_keys: tuple[str, ...]
    group_key: str
    tree: TreeInfo


def block_key(fusion_key: str, trace_id: str) -> str:
    return f"{fusion_key}/{trace_id}.json"


def group_key(fusion_key: str) -> str:
    return f"{fusion_key}.json"


def group_file_bytes(records: Sequence[InvocationRecord], tree: TreeInfo) -> bytes:
    body = [record_to_wire(r) for r in records]
    body.append(treeinfo_to_wire(tree))
    return json.dumps(body, separators=(",", ":")).encode("utf-8")


def persist_evidence(store, fusion_key: str, clean_records: Sequence[InvocationRecord]) -> PersistReceipt:
    """Write per-trace blocks and the group file with its Merkle proof.

    Records of one trace share a block key, so the trace's last record
    wins there; the group file keeps every record in hashing order and
    is the authoritative input for verification.
    """
    tree = build_merkle_tree(record_leaf_hashes(clean_records))
    block_keys: dict[str, None] = {}
    for record in clean_records:
        key = block_key(fusion_key, record.trace_id)
        store.put(key, canonical_record_bytes(record))
        block_keys[key] = None
    gkey = group_key(fusion_key)
    store.put(gkey, group_file_bytes(clean_records, tree))
    return PersistReceipt(tuple(block_keys), gkey, tree)
