"""Automated vault-token distribution for batch-computing services.

One run per invocation: obtain a Kerberos ticket per service, store vault
tokens against every credential daemon (serialized globally), push the
resulting token file to every submit node, and report persistent failures
once they cross the notification threshold.
"""

__version__ = "0.1.0"

from .config import GlobalConfig, ResolvedService, load_config, resolve_service
from .interfaces import AdapterBundle
from .orchestrator import (
    FatalSetupError,
    RunReport,
    StageResult,
    run_token_push,
    run_uid_refresh,
)

__all__ = [
    "AdapterBundle",
    "FatalSetupError",
    "GlobalConfig",
    "ResolvedService",
    "RunReport",
    "StageResult",
    "__version__",
    "load_config",
    "resolve_service",
    "run_token_push",
    "run_uid_refresh",
]
