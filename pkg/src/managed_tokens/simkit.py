"""Hermetic doubles for every external system, with scripted fault injection.

These ship in the package (not test-only) so an operator can rehearse a
production config end to end without touching Kerberos, Vault, remote nodes,
or a mail server: set ``adapter_mode: simulation`` in the config.

All doubles are deterministic given a :class:`FaultSchedule` and a
controllable clock, record every invocation with harness timestamps, and are
safe for concurrent use.

Fault-schedule files are YAML mappings from a target name to a schedule::

    storer:
      repeat: true
      pattern:
        - succeed
        - {fail: "connection refused"}
        - {delay: 0.05}
        - hang
    "transfer:submit1.example.org":
      pattern: [{fail: "node down"}]

Pattern entries: ``succeed``, ``hang`` (plain strings), ``{fail: message}``,
``{delay: seconds}`` (delay then succeed). ``repeat: true`` (the default)
cycles the pattern forever; with ``repeat: false`` running past the end
raises :class:`ScheduleExhausted`.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import urllib.parse
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional, Union

import yaml

from .interfaces import (
    CommandTimeout,
    Invocation,
    SystemClock,
    TransferError,
    TransportError,
    TransportTimeout,
)

logger = logging.getLogger(__name__)


class ScheduleExhausted(Exception):
    """A non-repeating fault schedule ran out of pattern entries."""


# -- clocks -----------------------------------------------------------------


class FixedClock:
    """Controllable clock: ``now()`` returns a set value, ``sleep`` does not
    block. With ``advance_on_sleep`` every sleep atomically advances the
    shared time instead (useful for single-threaded backoff accounting)."""

    def __init__(self, start: float = 1_700_000_000.0, advance_on_sleep: bool = False):
        self._t = float(start)
        self._advance_on_sleep = advance_on_sleep
        self._mutex = threading.Lock()

    def now(self) -> float:
        with self._mutex:
            return self._t

    def sleep(self, seconds: float) -> None:
        if self._advance_on_sleep and seconds > 0:
            self.advance(seconds)

    def advance(self, seconds: float) -> None:
        with self._mutex:
            self._t += seconds

    def set(self, t: float) -> None:
        with self._mutex:
            self._t = float(t)


# -- fault schedules ----------------------------------------------------------


@dataclass(frozen=True)
class Behavior:
    kind: str  # succeed | fail | delay | hang
    message: str = ""
    delay: float = 0.0


def succeed() -> Behavior:
    return Behavior("succeed")


def fail(message: str = "injected failure") -> Behavior:
    return Behavior("fail", message=message)


def delay(seconds: float) -> Behavior:
    return Behavior("delay", delay=seconds)


def hang() -> Behavior:
    return Behavior("hang")


@dataclass(frozen=True)
class FaultSchedule:
    target: str
    pattern: tuple[Behavior, ...]
    repeat: bool = True

    def __post_init__(self) -> None:
        if not self.pattern:
            raise ValueError("pattern must be non-empty")

    def behavior_at(self, index: int) -> Behavior:
        if index < len(self.pattern):
            return self.pattern[index]
        if self.repeat:
            return self.pattern[index % len(self.pattern)]
        raise ScheduleExhausted(
            f"schedule for {self.target!r} exhausted after {len(self.pattern)} invocations")


def always_succeed(target: str = "default") -> FaultSchedule:
    return FaultSchedule(target, (succeed(),), repeat=True)


def _parse_pattern_entry(entry: Any, where: str) -> Behavior:
    if isinstance(entry, str):
        if entry == "succeed":
            return succeed()
        if entry == "hang":
            return hang()
        raise ValueError(f"{where}: unknown behavior {entry!r}")
    if isinstance(entry, Mapping) and len(entry) == 1:
        key, value = next(iter(entry.items()))
        if key == "fail":
            return fail(str(value))
        if key == "delay":
            return delay(float(value))
    raise ValueError(f"{where}: unknown behavior {entry!r}")


def load_fault_schedules(path: str) -> dict[str, FaultSchedule]:
    """Load a fault-schedule fixture file (format documented above)."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, Mapping):
        raise ValueError(f"{path}: top level must be a mapping")
    schedules: dict[str, FaultSchedule] = {}
    for target, spec in raw.items():
        if not isinstance(spec, Mapping):
            raise ValueError(f"{path}: entry {target!r} must be a mapping")
        pattern = spec.get("pattern")
        if not isinstance(pattern, list) or not pattern:
            raise ValueError(f"{path}: entry {target!r} needs a non-empty pattern list")
        behaviors = tuple(
            _parse_pattern_entry(e, f"{path}:{target}[{i}]") for i, e in enumerate(pattern)
        )
        schedules[str(target)] = FaultSchedule(
            target=str(target), pattern=behaviors, repeat=bool(spec.get("repeat", True))
        )
    return schedules


# -- invocation log ------------------------------------------------------------


@dataclass(frozen=True)
class LogEntry:
    adapter: str
    args: tuple[str, ...]
    start: float
    end: float
    outcome: str  # ok | fail | timeout


class InvocationLog:
    """Append-only, internally synchronized record of adapter invocations."""

    def __init__(self, adapter: str):
        self.adapter = adapter
        self._entries: list[LogEntry] = []
        self._mutex = threading.Lock()

    def append(self, args: tuple[str, ...], start: float, end: float, outcome: str) -> None:
        entry = LogEntry(self.adapter, args, start, end, outcome)
        with self._mutex:
            self._entries.append(entry)

    def entries(self) -> tuple[LogEntry, ...]:
        with self._mutex:
            return tuple(self._entries)

    def canonical(self) -> tuple[LogEntry, ...]:
        """Entries in a thread-interleaving-independent order."""
        return tuple(sorted(self.entries(), key=lambda e: (e.start, e.args, e.end, e.outcome)))


# -- scripted command runner -----------------------------------------------------

SideEffect = Union[
    Callable[[int, tuple[str, ...], Mapping[str, str]], None],
    Mapping[int, list[tuple[str, bytes]]],
]


class ScriptedRunner:
    """CommandRunner double: replays a fault schedule and performs declared
    file side effects (e.g. writing a fake vault token) on successful calls."""

    def __init__(
        self,
        schedule: FaultSchedule,
        side_effects: Optional[SideEffect] = None,
        clock: Optional[Any] = None,
        name: str = "runner",
    ):
        self.schedule = schedule
        self.side_effects = side_effects
        self.clock = clock if clock is not None else SystemClock()
        self.log = InvocationLog(name)
        self._count = 0
        self._mutex = threading.Lock()

    def _next_index(self) -> int:
        with self._mutex:
            index = self._count
            self._count += 1
        return index

    def _apply_side_effects(self, index: int, argv: tuple[str, ...],
                            env: Mapping[str, str]) -> None:
        if self.side_effects is None:
            return
        if callable(self.side_effects):
            self.side_effects(index, argv, env)
            return
        for path, content in self.side_effects.get(index, []):
            with open(path, "wb") as fh:
                fh.write(content)
            os.chmod(path, 0o600)

    def run(
        self,
        argv: tuple[str, ...] | list[str],
        env_overrides: Optional[Mapping[str, str]] = None,
        timeout: Optional[float] = None,
    ) -> Invocation:
        argv = tuple(argv)
        env = dict(env_overrides or {})
        index = self._next_index()
        behavior = self.schedule.behavior_at(index)
        start = self.clock.now()

        if behavior.kind == "hang":
            self.clock.sleep(timeout if timeout is not None else 0.0)
            end = self.clock.now()
            self.log.append(argv, start, end, "timeout")
            raise CommandTimeout(argv, timeout if timeout is not None else 0.0)

        if behavior.kind == "delay":
            self.clock.sleep(behavior.delay)

        if behavior.kind == "fail":
            end = self.clock.now()
            self.log.append(argv, start, end, "fail")
            return Invocation(argv, env, 1, "", behavior.message, start, end)

        self._apply_side_effects(index, argv, env)
        end = self.clock.now()
        self.log.append(argv, start, end, "ok")
        return Invocation(argv, env, 0, "ok", "", start, end)


def scripted_runner(
    schedule: FaultSchedule,
    side_effects: Optional[SideEffect] = None,
    clock: Optional[Any] = None,
    name: str = "runner",
) -> ScriptedRunner:
    return ScriptedRunner(schedule, side_effects=side_effects, clock=clock, name=name)


class RoutedRunner:
    """Dispatches to per-command scripted runners by argv[0] basename, so one
    bundle can script the ticket and storer commands independently."""

    def __init__(self, routes: Mapping[str, Any], default: Optional[Any] = None):
        self.routes = dict(routes)
        self.default = default

    def run(self, argv, env_overrides=None, timeout=None) -> Invocation:
        key = os.path.basename(argv[0])
        runner = self.routes.get(key, self.default)
        if runner is None:
            raise KeyError(f"no scripted runner for command {key!r}")
        return runner.run(argv, env_overrides=env_overrides, timeout=timeout)


def write_token_from_env(
    content: bytes = b"hvs.simulated-vault-token-0123456789abcdef\n",
    env_var: str = "MANAGED_TOKENS_DEFAULT_TOKEN_PATH",
) -> Callable[[int, tuple[str, ...], Mapping[str, str]], None]:
    """Side effect for the scripted storer: write a fake vault token at the
    shared default location the invocation designates via ``env_var``."""

    def effect(index: int, argv: tuple[str, ...], env: Mapping[str, str]) -> None:
        path = env.get(env_var)
        if not path:
            return
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(content)
        os.chmod(path, 0o600)

    return effect


# -- in-memory transfer adapter ---------------------------------------------------


class MemoryTransfer:
    """TransferAdapter double: a per-(node, path) in-memory namespace with
    atomic replace, per-node fault schedules, and a concurrency high-water
    mark."""

    def __init__(
        self,
        faults: Optional[Mapping[str, FaultSchedule]] = None,
        clock: Optional[Any] = None,
    ):
        self.faults = dict(faults or {})
        self.clock = clock if clock is not None else SystemClock()
        self.log = InvocationLog("transfer")
        self._files: dict[tuple[str, str], bytes] = {}
        self._counts: dict[str, int] = {}
        self._mutex = threading.Lock()
        self._active = 0
        self.high_water = 0

    def _node_index(self, node: str) -> int:
        with self._mutex:
            index = self._counts.get(node, 0)
            self._counts[node] = index + 1
        return index

    def put(self, local_path: str, node: str, remote_path: str,
            timeout: Optional[float] = None) -> None:
        with self._mutex:
            self._active += 1
            self.high_water = max(self.high_water, self._active)
        start = self.clock.now()
        args = (node, remote_path)
        try:
            schedule = self.faults.get(node)
            if schedule is not None:
                behavior = schedule.behavior_at(self._node_index(node))
                if behavior.kind == "delay":
                    self.clock.sleep(behavior.delay)
                elif behavior.kind == "hang":
                    self.clock.sleep(timeout if timeout is not None else 0.0)
                    self.log.append(args, start, self.clock.now(), "timeout")
                    raise TransferError(f"transfer to {node} timed out")
                elif behavior.kind == "fail":
                    self.log.append(args, start, self.clock.now(), "fail")
                    raise TransferError(behavior.message)
            with open(local_path, "rb") as fh:
                content = fh.read()
            with self._mutex:
                # Single assignment under the lock: a reader sees the old or
                # the new token, never a partial write.
                self._files[(node, remote_path)] = content
            self.log.append(args, start, self.clock.now(), "ok")
        finally:
            with self._mutex:
                self._active -= 1

    def get(self, node: str, remote_path: str) -> Optional[bytes]:
        with self._mutex:
            return self._files.get((node, remote_path))

    def files(self) -> dict[tuple[str, str], bytes]:
        with self._mutex:
            return dict(self._files)


def memory_transfer(
    faults: Optional[Mapping[str, FaultSchedule]] = None,
    clock: Optional[Any] = None,
) -> MemoryTransfer:
    return MemoryTransfer(faults=faults, clock=clock)


# -- fake identity registry ---------------------------------------------------------


@dataclass(frozen=True)
class ErrorFixture:
    """Map an account to an HTTP error instead of a UID."""

    status: int
    body: str = ""


TIMEOUT = object()  # fixture sentinel: the request times out


def _json_at_path(path: str, value: Any) -> dict:
    parts = path.split(".")
    out: Any = value
    for part in reversed(parts):
        out = {part: out}
    return out


class FakeRegistry:
    """HttpAdapter double serving UID lookups from a fixture map and counting
    hits per account."""

    def __init__(
        self,
        fixtures: Mapping[str, Any],
        endpoint_template: str = "/getUserInfo?username={account}",
        uid_json_path: str = "ferry_output.uid",
    ):
        self.fixtures = dict(fixtures)
        self.uid_json_path = uid_json_path
        self.hits: dict[str, int] = {}
        self._mutex = threading.Lock()
        pattern = re.escape(endpoint_template).replace(r"\{account\}", "(?P<account>[^&/?]+)")
        self._matcher = re.compile(pattern + "$")

    def request(self, method, url, headers=None, body=None, timeout=None) -> tuple[int, str]:
        parsed = urllib.parse.urlsplit(url)
        target = parsed.path + (f"?{parsed.query}" if parsed.query else "")
        m = self._matcher.search(target)
        if method.upper() != "GET" or m is None:
            return 404, "not found"
        account = urllib.parse.unquote(m.group("account"))
        with self._mutex:
            self.hits[account] = self.hits.get(account, 0) + 1
        fixture = self.fixtures.get(account)
        if fixture is None:
            return 404, '{"ferry_status": "failure"}'
        if fixture is TIMEOUT:
            raise TransportTimeout(f"registry lookup for {account} timed out")
        if isinstance(fixture, ErrorFixture):
            return fixture.status, fixture.body
        payload = _json_at_path(self.uid_json_path, int(fixture))
        payload["ferry_status"] = "success"
        return 200, json.dumps(payload)


def fake_registry(
    fixtures: Mapping[str, Any],
    endpoint_template: str = "/getUserInfo?username={account}",
    uid_json_path: str = "ferry_output.uid",
) -> FakeRegistry:
    return FakeRegistry(fixtures, endpoint_template=endpoint_template,
                        uid_json_path=uid_json_path)


def synthetic_uid(account: str) -> int:
    """Stable per-account UID for rehearsal mode when none is configured."""
    return 1000 + (zlib.crc32(account.encode("utf-8")) % 60000)


# -- recording sink and gateway --------------------------------------------------------


@dataclass(frozen=True)
class SentMessage:
    recipients: tuple[str, ...]
    subject: str
    body: str


class RecordingSink:
    """NotificationSink double that records messages; optionally scripted to fail."""

    def __init__(self, schedule: Optional[FaultSchedule] = None):
        self.schedule = schedule
        self.messages: list[SentMessage] = []
        self._count = 0
        self._mutex = threading.Lock()

    def send(self, recipients, subject: str, body: str) -> None:
        with self._mutex:
            index = self._count
            self._count += 1
        if self.schedule is not None:
            behavior = self.schedule.behavior_at(index)
            if behavior.kind == "fail":
                raise RuntimeError(behavior.message)
        with self._mutex:
            self.messages.append(SentMessage(tuple(recipients), subject, body))


class LoggingSink:
    """Rehearsal sink: logs instead of sending mail."""

    def send(self, recipients, subject: str, body: str) -> None:
        logger.info("notification (not sent) to=%s subject=%r", ",".join(recipients), subject)


class RecordingGateway:
    """HttpAdapter double for the metrics push endpoint; records every request."""

    def __init__(self, status: int = 200, unreachable: bool = False):
        self.status = status
        self.unreachable = unreachable
        self.requests: list[tuple[str, str, str]] = []  # (method, path, body)
        self._mutex = threading.Lock()

    def request(self, method, url, headers=None, body=None, timeout=None) -> tuple[int, str]:
        if self.unreachable:
            raise TransportError("gateway unreachable")
        path = urllib.parse.urlsplit(url).path
        with self._mutex:
            self.requests.append((method.upper(), path, body or ""))
        return self.status, ""
