"""Fan-out of staged vault tokens to submit-point nodes.

Every node receives two copies of the token: one at the per-user discovery
path (keyed by UID only) and one at the per-UID/issuer/role path, because
the two downstream consumers locate tokens differently. A node counts as
successfully served only when both copies land.

Pushes to different nodes run concurrently under a shared parallelism
budget; each node gets bounded retries with exponential backoff and full
jitter to ride out transient trouble without a thundering herd.
"""

from __future__ import annotations

import logging
import os.path
import random
import threading
from dataclasses import dataclass
from typing import Optional

from .config import ResolvedService, RetryPolicy
from .credentials import VaultTokenFile, validate_token_file
from .interfaces import Clock, TransferAdapter, TransferError
from .statestore import Store

logger = logging.getLogger(__name__)

_module_rng = random.Random()


@dataclass(frozen=True)
class Destination:
    node: str
    paths: tuple[str, str]  # (user-style, uid/issuer/role-style)

    def __post_init__(self) -> None:
        if len(self.paths) != 2 or self.paths[0] == self.paths[1]:
            raise ValueError("a destination carries exactly two distinct paths")
        if not all(os.path.isabs(p) for p in self.paths):
            raise ValueError("destination paths must be absolute")


@dataclass(frozen=True)
class PushOutcome:
    service: str
    node: str
    success: bool
    attempts: int
    duration: float
    error: Optional[str] = None


class ParallelismBudget:
    """Counting budget shared by all concurrent transfers in a run."""

    def __init__(self, limit: int):
        if limit < 1:
            raise ValueError("parallelism budget must be >= 1")
        self.limit = limit
        self._sem = threading.BoundedSemaphore(limit)

    def __enter__(self) -> "ParallelismBudget":
        self._sem.acquire()
        return self

    def __exit__(self, *exc_info: object) -> None:
        self._sem.release()


def compute_destinations(
    svc: ResolvedService,
    node: str,
    uid: int,
    tmp_dir: Optional[str] = None,
) -> Destination:
    """Render the two remote paths for one node from the configured templates."""
    if uid < 0:
        raise ValueError("uid must be >= 0")
    values = {
        "tmp_dir": tmp_dir if tmp_dir is not None else svc.tmp_dir,
        "uid": uid,
        "issuer": svc.token_issuer,
        "role": svc.role,
        "service": svc.name,
        "account": svc.account,
    }
    user_path = svc.destination_templates.user.format(**values)
    role_path = svc.destination_templates.role.format(**values)
    return Destination(node=node, paths=(user_path, role_path))


def push_token(
    token: VaultTokenFile,
    dest: Destination,
    transfer: TransferAdapter,
    retry: RetryPolicy,
    clock: Clock,
    rng: Optional[random.Random] = None,
    timeout: Optional[float] = None,
) -> PushOutcome:
    """Copy the staged token to both paths on one node, with retries.

    One attempt means one try at *both* paths; a partial copy is a failed
    attempt (a node holding only one of the two files is broken for one of
    its consumers). Failure is reported in the outcome, never raised.
    """
    check = validate_token_file(token.path)
    if not (check.exists and check.non_empty and check.perms_ok):
        raise ValueError(f"staged token at {token.path} failed validation: {check}")
    rng = rng if rng is not None else _module_rng

    started = clock.now()
    last_error = ""
    attempts = 0
    while attempts < retry.max_attempts:
        attempts += 1
        try:
            for path in dest.paths:
                transfer.put(token.path, dest.node, path, timeout=timeout)
            return PushOutcome(
                service=token.service,
                node=dest.node,
                success=True,
                attempts=attempts,
                duration=clock.now() - started,
            )
        except TransferError as exc:
            last_error = str(exc)
            logger.warning(
                "transfer attempt failed service=%s node=%s attempt=%d error=%s",
                token.service, dest.node, attempts, last_error,
            )
            if attempts < retry.max_attempts:
                # Full jitter keeps concurrent retries from synchronizing.
                clock.sleep(rng.uniform(0, retry.base_backoff * 2 ** (attempts - 1)))
    return PushOutcome(
        service=token.service,
        node=dest.node,
        success=False,
        attempts=attempts,
        duration=clock.now() - started,
        error=last_error,
    )


def push_all(
    svc: ResolvedService,
    token: VaultTokenFile,
    store: Store,
    transfer: TransferAdapter,
    limiter: ParallelismBudget,
    clock: Clock,
    rng: Optional[random.Random] = None,
) -> list[PushOutcome]:
    """Push to every node of the service concurrently (budget-gated).

    Each node's final outcome is folded into its persistent failure counter;
    one node failing never stops the others. Outcomes come back in node
    order.
    """
    outcomes: list[Optional[PushOutcome]] = [None] * len(svc.nodes)

    def worker(index: int, node: str) -> None:
        dest = compute_destinations(svc, node, token.uid)
        with limiter:
            outcome = push_token(
                token, dest, transfer, svc.retry, clock, rng=rng,
                timeout=svc.timeouts.transfer,
            )
        store.record_push_outcome(svc.name, node, outcome.success, clock.now())
        outcomes[index] = outcome

    threads = [
        threading.Thread(target=worker, args=(i, node), name=f"push-{svc.name}-{node}")
        for i, node in enumerate(svc.nodes)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(o is not None for o in outcomes)
    return [o for o in outcomes if o is not None]
