"""Playback environment guard: process allowlist sweep and network gate.

The guard walks the process table and selects every process whose name is
not on the allowlist for termination, sparing itself. Matching is exact
and case-sensitive; the default allowlist is the fixed set of system and
productivity process names the protection scheme trusts.

Enforcement is separated from selection: ``scan`` only computes the kill
set, ``enforce`` runs an executor over it. Dry-run is the default
everywhere, and a failure to terminate one process never aborts the sweep.
The network gate is the second half of the same posture: the client may
reach the network during activation and never during playback.
"""

from __future__ import annotations

import enum
import fnmatch
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final, Iterable, Iterator, Protocol, Sequence

import psutil

from .errors import GuardRefusalError, IdentityError, NetworkBlockedError

DEFAULT_ALLOWLIST: Final = frozenset(
    {
        "svchost",
        "lsass",
        "services",
        "winlogon",
        "csrss",
        "smss",
        "System",
        "notepad",
        "Idle",
        "spoolsv",
        "alg",
        "WINWORD",
        "AcroRd32",
        "explorer",
        "devenv",
        "sqlservr",
    }
)


class Phase(enum.Enum):
    ACTIVATION = "activation"
    PLAYBACK = "playback"


@dataclass(frozen=True)
class GuardPolicy:
    """Guard configuration; the defaults encode the fixed posture.

    denylist_patterns only annotate report entries (virtual drive names
    and similar): the kill set is always allowlist-complement, so a
    pattern can never pull an allowlisted process back in.
    """

    allowlist: frozenset[str] = DEFAULT_ALLOWLIST
    allow_self: bool = True
    activation_network: bool = True
    playback_network: bool = False
    denylist_patterns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.allow_self:
            raise ValueError("the guard never terminates its own process")


@dataclass(frozen=True)
class ProcessEntry:
    name: str
    pid: int


class ExecutionOutcome(str, enum.Enum):
    KILLED = "killed"
    FAILED = "failed"
    SKIPPED_DRY_RUN = "skipped_dry_run"


@dataclass(frozen=True)
class Execution:
    process: ProcessEntry
    outcome: ExecutionOutcome
    error: str | None = None


@dataclass(frozen=True)
class GuardReport:
    """Outcome of one sweep; one execution entry per kill-set process."""

    scanned: int
    kill_set: tuple[ProcessEntry, ...]
    executed: tuple[Execution, ...]
    flagged: tuple[ProcessEntry, ...]
    dry_run: bool
    network_gate: str
    timestamp: float = field(default_factory=time.time)

    @property
    def failures(self) -> tuple[Execution, ...]:
        return tuple(e for e in self.executed if e.outcome == ExecutionOutcome.FAILED)


class KillExecutor(Protocol):
    """Terminates one process; raises on failure."""

    def terminate(self, process: ProcessEntry) -> None: ...


class HostExecutor:
    """Terminates real processes via the system process table."""

    def terminate(self, process: ProcessEntry) -> None:
        psutil.Process(process.pid).terminate()


class RecordingExecutor:
    """Test executor that records calls and fails where told to."""

    def __init__(self, fail_pids: Iterable[int] = ()) -> None:
        self.calls: list[ProcessEntry] = []
        self.fail_pids = set(fail_pids)

    def terminate(self, process: ProcessEntry) -> None:
        self.calls.append(process)
        if process.pid in self.fail_pids:
            raise OSError(f"cannot terminate pid {process.pid}")


def host_processes() -> list[ProcessEntry]:
    """Snapshot the live process table as (name, pid) entries."""
    entries = []
    for proc in psutil.process_iter(["name", "pid"]):
        try:
            name = proc.info["name"] or ""
        except psutil.Error:
            continue
        entries.append(ProcessEntry(name=name, pid=proc.info["pid"]))
    return entries


def load_snapshot_file(path: str | Path) -> list[ProcessEntry]:
    """Read ``name,pid`` lines into a process snapshot; '#' comments."""
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, pid_text = line.rpartition(",")
        if not sep or not pid_text.strip().isdigit():
            raise IdentityError(f"snapshot line is not name,pid: {line!r}")
        entries.append(ProcessEntry(name=name.strip(), pid=int(pid_text)))
    return entries


def scan(
    processes: Sequence[ProcessEntry],
    policy: GuardPolicy,
    self_name: str,
) -> list[ProcessEntry]:
    """Select the processes a sweep would terminate.

    Exact, case-sensitive name comparison against the allowlist; the
    guard's own name is spared. Input order is preserved and the result
    never intersects the allowlist.
    """
    return [
        p
        for p in processes
        if p.name not in policy.allowlist and p.name != self_name
    ]


def flag_denylisted(
    kill_set: Sequence[ProcessEntry], policy: GuardPolicy
) -> tuple[ProcessEntry, ...]:
    return tuple(
        p
        for p in kill_set
        if any(fnmatch.fnmatchcase(p.name, pattern) for pattern in policy.denylist_patterns)
    )


def enforce(
    kill_set: Sequence[ProcessEntry],
    executor: KillExecutor,
    dry_run: bool = True,
) -> list[Execution]:
    """Run the executor over the kill set, continuing past failures."""
    executed = []
    for process in kill_set:
        if dry_run:
            executed.append(Execution(process, ExecutionOutcome.SKIPPED_DRY_RUN))
            continue
        try:
            executor.terminate(process)
        except Exception as exc:
            executed.append(Execution(process, ExecutionOutcome.FAILED, error=str(exc)))
        else:
            executed.append(Execution(process, ExecutionOutcome.KILLED))
    return executed


def run_guard(
    processes: Sequence[ProcessEntry],
    policy: GuardPolicy,
    self_name: str,
    executor: KillExecutor,
    dry_run: bool = True,
    phase: Phase = Phase.PLAYBACK,
) -> GuardReport:
    """Scan plus enforce, folded into one report."""
    kill_set = scan(processes, policy, self_name)
    executed = enforce(kill_set, executor, dry_run=dry_run)
    gate = "allowed" if network_gate(phase, policy) else "blocked"
    return GuardReport(
        scanned=len(processes),
        kill_set=tuple(kill_set),
        executed=tuple(executed),
        flagged=flag_denylisted(kill_set, policy),
        dry_run=dry_run,
        network_gate=f"{phase.value}:{gate}",
    )


def require_clean_enforcement(report: GuardReport) -> None:
    """Veto playback when a live sweep failed to terminate something.

    Raises:
        GuardRefusalError: non-dry-run report with at least one failure.
    """
    if not report.dry_run and report.failures:
        names = ", ".join(f"{e.process.name}({e.process.pid})" for e in report.failures)
        raise GuardRefusalError(f"guard could not terminate: {names}")


def network_gate(phase: Phase, policy: GuardPolicy | None = None) -> bool:
    """Whether the network may be used in ``phase``."""
    policy = policy if policy is not None else GuardPolicy()
    if phase == Phase.ACTIVATION:
        return policy.activation_network
    return policy.playback_network


class NetworkGate:
    """Stateful gate the client transport consults before every request."""

    def __init__(self, policy: GuardPolicy | None = None) -> None:
        self._policy = policy if policy is not None else GuardPolicy()
        self._phase = Phase.ACTIVATION

    @property
    def phase(self) -> Phase:
        return self._phase

    def allows(self) -> bool:
        return network_gate(self._phase, self._policy)

    def check(self) -> None:
        """Raise unless the current phase permits network use.

        Raises:
            NetworkBlockedError: the gate is closed in this phase.
        """
        if not self.allows():
            raise NetworkBlockedError(
                f"network use is blocked during {self._phase.value}"
            )

    @contextmanager
    def entering(self, phase: Phase) -> Iterator["NetworkGate"]:
        previous = self._phase
        self._phase = phase
        try:
            yield self
        finally:
            self._phase = previous
