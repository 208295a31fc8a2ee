"""
Exception hierarchy shared by the services, the CLI and the HTTP surface.

The CLI maps these onto exit codes and the API onto status codes, so
services should raise the most specific class that applies.
"""


class PermuteAttackError(Exception):
    """Base class for all errors raised by this package."""


class DataError(PermuteAttackError, ValueError):
    """Ingestion, schema or encoding violation."""


class ConfigError(PermuteAttackError, ValueError):
    """Invalid or inconsistent run configuration."""


class ModelError(PermuteAttackError, ValueError):
    """Training precondition failed or model does not match the schema."""


class AnalysisError(PermuteAttackError, ValueError):
    """Degenerate experiment input (e.g. no successful counterfactuals)."""


class BackendError(PermuteAttackError, RuntimeError):
    """The model backend failed to answer a prediction request."""


class ProtocolError(BackendError):
    """An external model sent a malformed or invalid response."""


class BackendTimeout(BackendError):
    """An external model did not answer within the configured timeout."""
