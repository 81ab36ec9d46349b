"""Production adapters and bundle builders.

The real bundle talks to the outside world: subprocess for the ticket and
vault-storer commands, the configured copy command for pushes, requests for
HTTP, SMTP for mail. The simulation bundle wires up the in-package doubles
instead, driven by the ``simulation:`` config section, so a production config
can be rehearsed end to end on a disconnected machine.
"""

from __future__ import annotations

import logging
import os
import smtplib
import subprocess
from email.message import EmailMessage
from typing import Mapping, Optional, Sequence

import requests

from . import simkit
from .config import GlobalConfig
from .credentials import render_command
from .interfaces import (
    AdapterBundle,
    Clock,
    CommandRunner,
    CommandTimeout,
    Invocation,
    SystemClock,
    TransferError,
    TransportError,
    TransportTimeout,
)

logger = logging.getLogger(__name__)


class RealCommandRunner:
    """Runs external commands through subprocess, environment merged over the
    parent's."""

    def __init__(self, clock: Optional[Clock] = None):
        self.clock = clock if clock is not None else SystemClock()

    def run(
        self,
        argv: Sequence[str],
        env_overrides: Optional[Mapping[str, str]] = None,
        timeout: Optional[float] = None,
    ) -> Invocation:
        argv = tuple(argv)
        env = dict(os.environ)
        if env_overrides:
            env.update(env_overrides)
        start = self.clock.now()
        try:
            proc = subprocess.run(argv, capture_output=True, text=True,
                                  env=env, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise CommandTimeout(argv, timeout if timeout is not None else 0.0) from exc
        except OSError as exc:
            # Missing or unrunnable binary: report as a failed invocation so
            # the caller gets argv and the reason in one place.
            end = self.clock.now()
            return Invocation(argv, dict(env_overrides or {}), 127, "", str(exc),
                              start, end)
        end = self.clock.now()
        return Invocation(argv, dict(env_overrides or {}), proc.returncode,
                          proc.stdout, proc.stderr, start, end)


class CommandTransferAdapter:
    """Copies files with the configured command (rsync over ssh by default)."""

    def __init__(self, template: str, runner: CommandRunner):
        self.template = template
        self.runner = runner

    def put(self, local_path: str, node: str, remote_path: str,
            timeout: Optional[float] = None) -> None:
        argv = render_command(self.template, {
            "local": local_path, "node": node, "remote": remote_path,
        })
        try:
            inv = self.runner.run(argv, timeout=timeout)
        except CommandTimeout as exc:
            raise TransferError(f"copy to {node}:{remote_path} timed out "
                                f"after {exc.timeout}s") from exc
        if inv.exit_code != 0:
            raise TransferError(
                f"copy to {node}:{remote_path} failed "
                f"(exit {inv.exit_code}): {inv.stderr.strip()}")


class RequestsHttpAdapter:
    """HttpAdapter over requests, with optional CA bundle for TLS."""

    def __init__(self, ca_bundle: Optional[str] = None):
        self.ca_bundle = ca_bundle
        self._session = requests.Session()

    def request(
        self,
        method: str,
        url: str,
        headers: Optional[Mapping[str, str]] = None,
        body: Optional[str] = None,
        timeout: Optional[float] = None,
    ) -> tuple[int, str]:
        kwargs: dict = {}
        if self.ca_bundle:
            kwargs["verify"] = self.ca_bundle
        try:
            response = self._session.request(
                method, url, headers=dict(headers or {}), data=body,
                timeout=timeout, **kwargs)
        except requests.Timeout as exc:
            raise TransportTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        return response.status_code, response.text


class SmtpNotificationSink:
    """Plain-text mail through an SMTP relay; one connection per message."""

    def __init__(self, server: str, port: int, from_address: str,
                 timeout: float = 30.0):
        self.server = server
        self.port = port
        self.from_address = from_address
        self.timeout = timeout

    def send(self, recipients: Sequence[str], subject: str, body: str) -> None:
        message = EmailMessage()
        message["From"] = self.from_address
        message["To"] = ", ".join(recipients)
        message["Subject"] = subject
        message.set_content(body)
        with smtplib.SMTP(self.server, self.port, timeout=self.timeout) as smtp:
            smtp.send_message(message)


def build_real_bundle(config: GlobalConfig) -> AdapterBundle:
    clock = SystemClock()
    runner = RealCommandRunner(clock=clock)
    return AdapterBundle(
        runner=runner,
        transfer=CommandTransferAdapter(config.commands.transfer, runner),
        http=RequestsHttpAdapter(ca_bundle=config.registry.ca_bundle),
        sink=SmtpNotificationSink(
            config.notification.smtp_server,
            config.notification.smtp_port,
            config.notification.from_address,
        ),
        clock=clock,
    )


def _command_basename(template: str) -> str:
    return os.path.basename(template.split()[0])


def build_simulation_bundle(config: GlobalConfig) -> AdapterBundle:
    """Assemble the hermetic rehearsal bundle from ``config.simulation``.

    Fault-schedule targets recognized here: ``ticket``, ``storer``,
    ``transfer:<node>``, and ``registry:<account>`` (first behavior ``fail``
    maps to HTTP 500, ``hang`` to a timeout). Tickets and storer runs succeed
    by default, the storer writes a fake token at the designated location,
    pushes land in memory, and notifications are logged instead of mailed.
    """
    clock = SystemClock()
    schedules: dict[str, simkit.FaultSchedule] = {}
    if config.simulation.fault_schedules:
        schedules = simkit.load_fault_schedules(config.simulation.fault_schedules)

    ticket_runner = simkit.scripted_runner(
        schedules.get("ticket", simkit.always_succeed("ticket")),
        clock=clock, name="ticket")
    storer_runner = simkit.scripted_runner(
        schedules.get("storer", simkit.always_succeed("storer")),
        side_effects=simkit.write_token_from_env(), clock=clock, name="storer")
    runner = simkit.RoutedRunner(
        {
            _command_basename(config.commands.ticket): ticket_runner,
            _command_basename(config.commands.storer): storer_runner,
        },
        default=simkit.scripted_runner(simkit.always_succeed("command"),
                                       clock=clock, name="command"),
    )

    transfer_faults = {
        target.split(":", 1)[1]: schedule
        for target, schedule in schedules.items()
        if target.startswith("transfer:")
    }
    transfer = simkit.memory_transfer(faults=transfer_faults, clock=clock)

    fixtures: dict[str, object] = {}
    for svc in config.services.values():
        fixtures[svc.account] = config.simulation.registry_uids.get(
            svc.account, simkit.synthetic_uid(svc.account))
    for target, schedule in schedules.items():
        if not target.startswith("registry:"):
            continue
        account = target.split(":", 1)[1]
        first = schedule.behavior_at(0)
        if first.kind == "fail":
            fixtures[account] = simkit.ErrorFixture(500, first.message)
        elif first.kind == "hang":
            fixtures[account] = simkit.TIMEOUT
    http = simkit.fake_registry(
        fixtures,
        endpoint_template=config.registry.uid_endpoint_template,
        uid_json_path=config.registry.uid_json_path,
    )

    return AdapterBundle(
        runner=runner,
        transfer=transfer,
        http=http,
        sink=simkit.LoggingSink(),
        clock=clock,
        metrics_http=simkit.RecordingGateway(),
    )


def build_bundle(config: GlobalConfig) -> AdapterBundle:
    if config.adapter_mode == "simulation":
        return build_simulation_bundle(config)
    return build_real_bundle(config)
