"""Run candidate binaries under a watchdog and classify how each run ended.

Mutated executables misbehave in every way: clean exit, SIGSEGV/SIGILL/SIGFPE,
infinite loops, runaway allocation, garbage on stdout. Each run gets its own
process group, an address-space cap, and a hard wall-clock deadline so a single
bad mutant cannot take the campaign down with it.
"""

from __future__ import annotations

import ctypes
import os
import resource
import signal
import statistics
import subprocess
import time
from dataclasses import dataclass, field, replace
from enum import Enum

DEFAULT_TIMEOUT_MS = 5000
DEFAULT_MEMORY_CAP = 512 * 1024 * 1024
_GRACE_S = 0.5

_ADDR_NO_RANDOMIZE = 0x0040000
try:
    _LIBC = ctypes.CDLL(None, use_errno=True)
except OSError:  # pragma: no cover - no libc handle on exotic platforms
    _LIBC = None

# Termination signals that mean the mutant died rather than chose to exit.
CRASH_SIGNALS = {
    signal.SIGSEGV,
    signal.SIGILL,
    signal.SIGFPE,
    signal.SIGBUS,
    signal.SIGABRT,
    signal.SIGTRAP,
    signal.SIGSYS,
    signal.SIGKILL,
}


class RunStatus(Enum):
    COMPLETED = "completed"      # exit code 0 and stdout parsed downstream
    EXITED_ERROR = "exited-error"  # voluntary nonzero exit
    SIGNALED = "signaled"        # killed by a signal
    TIMED_OUT = "timed-out"      # wall-clock deadline hit, group killed
    LAUNCH_FAILED = "launch-failed"  # exec itself failed


@dataclass(frozen=True)
class ExecSpec:
    """One invocation: binary, argv tail, limits."""

    binary: str
    argv: tuple[str, ...] = ()
    stdin_payload: bytes = b""
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    memory_cap: int = DEFAULT_MEMORY_CAP
    cwd: str | None = None

    def with_binary(self, binary: str) -> "ExecSpec":
        return replace(self, binary=binary)


@dataclass(frozen=True)
class RawOutcome:
    status: RunStatus
    exit_code: int | None    # voluntary exit code, if any
    term_signal: int | None  # terminating signal number, if any
    stdout: bytes
    stderr: bytes
    wall_ms: float

    @property
    def crashed(self) -> bool:
        """Died involuntarily: crash signal, timeout, or failed to launch."""
        if self.status in (RunStatus.TIMED_OUT, RunStatus.LAUNCH_FAILED):
            return True
        if self.status is RunStatus.SIGNALED:
            return True
        return False


class TriageResult(Enum):
    COMPLETED = "completed"
    CRASHED = "crashed"


def classify_raw(out: RawOutcome, parse_ok: bool) -> TriageResult:
    """Two-way crash triage: a useful flip must leave the victim able to answer.

    Crashed covers involuntary death (signal, timeout, launch failure),
    voluntary nonzero exit, and clean exits whose prediction stream did not
    parse; only a clean exit with parseable output is a completed run.
    """
    if out.status is not RunStatus.COMPLETED or not parse_ok:
        return TriageResult.CRASHED
    return TriageResult.COMPLETED


def _limit_preexec(memory_cap: int):
    def apply() -> None:
        resource.setrlimit(resource.RLIMIT_AS, (memory_cap, memory_cap))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        # Freeze the address-space layout. Mutated code routinely leaks stack
        # or mmap addresses into its arithmetic; under ASLR the same flip can
        # score differently on every run, and verdicts must be reproducible.
        if _LIBC is not None:
            current = _LIBC.personality(0xFFFFFFFF)
            if current != -1:
                _LIBC.personality(current | _ADDR_NO_RANDOMIZE)

    return apply


def run_once(spec: ExecSpec) -> RawOutcome:
    """Launch the described process once and report how it ended.

    Never raises for target misbehavior; only programming errors escape.
    """
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            [spec.binary, *spec.argv],
            stdin=subprocess.PIPE if spec.stdin_payload else subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            cwd=spec.cwd,
            env={"LC_ALL": "C", "PATH": os.environ.get("PATH", "/usr/bin:/bin")},
            start_new_session=True,  # own process group: killable as a unit
            preexec_fn=_limit_preexec(spec.memory_cap),
        )
    except OSError as exc:
        wall = (time.monotonic() - start) * 1000.0
        return RawOutcome(
            status=RunStatus.LAUNCH_FAILED,
            exit_code=None,
            term_signal=None,
            stdout=b"",
            stderr=str(exc).encode(),
            wall_ms=wall,
        )

    timed_out = False
    try:
        stdout, stderr = proc.communicate(
            input=spec.stdin_payload or None, timeout=spec.timeout_ms / 1000.0
        )
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        try:
            stdout, stderr = proc.communicate(timeout=_GRACE_S)
        except subprocess.TimeoutExpired:
            proc.kill()
            stdout, stderr = proc.communicate()
    wall = (time.monotonic() - start) * 1000.0

    if timed_out:
        return RawOutcome(RunStatus.TIMED_OUT, None, None, stdout, stderr, wall)
    rc = proc.returncode
    if rc is not None and rc < 0:
        return RawOutcome(RunStatus.SIGNALED, None, -rc, stdout, stderr, wall)
    if rc == 0:
        return RawOutcome(RunStatus.COMPLETED, 0, None, stdout, stderr, wall)
    return RawOutcome(RunStatus.EXITED_ERROR, rc, None, stdout, stderr, wall)


def run_stable(spec: ExecSpec, launch_retries: int = 3) -> RawOutcome:
    """run_once with retries for infrastructure noise, so verdicts reproduce.

    Launch failures are retried a few times: with parallel workers the exec
    can transiently hit ETXTBSY while a sibling's fork briefly holds this
    binary's write descriptor, and campaign binaries are always launchable.
    A timeout is retried exactly once: on a loaded host a subprocess can lose
    the CPU long enough to trip the deadline even though the binary finishes
    in milliseconds, while a genuine runaway loop times out on the retry too.
    """
    out = run_once(spec)
    for _ in range(launch_retries):
        if out.status is not RunStatus.LAUNCH_FAILED:
            break
        time.sleep(0.005)
        out = run_once(spec)
    if out.status is RunStatus.TIMED_OUT:
        out = run_once(spec)
    return out


def measure_baseline(spec: ExecSpec, runs: int = 3) -> float:
    """Median wall-clock ms of clean runs; raises if any run misbehaves."""
    walls = []
    for _ in range(runs):
        out = run_once(spec)
        if out.status is not RunStatus.COMPLETED:
            raise RuntimeError(
                f"baseline run of {spec.binary} ended {out.status.value} "
                f"(exit={out.exit_code} signal={out.term_signal})"
            )
        walls.append(out.wall_ms)
    return statistics.median(walls)


def derive_timeout_ms(baseline_ms: float, factor: float = 20.0, floor_ms: int = 200) -> int:
    """Campaign deadline: a generous multiple of the clean runtime."""
    return max(floor_ms, int(baseline_ms * factor))


@dataclass
class MutantWorkspace:
    """Scratch directory handing out mutant paths, optionally kept for autopsy."""

    root: str
    keep_artifacts: bool = False
    _count: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        os.makedirs(self.root, exist_ok=True)

    def next_path(self, tag: str) -> str:
        self._count += 1
        return os.path.join(self.root, f"mutant-{self._count:07d}-{tag}")

    def discard(self, path: str) -> None:
        if self.keep_artifacts:
            return
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass
