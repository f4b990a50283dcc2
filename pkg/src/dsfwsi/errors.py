"""Error types shared across the package.

Kept deliberately small: the CLI maps these onto distinct exit codes, so the
classes exist mainly to make that mapping unambiguous.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration (schema violations, bad values)."""


class ManifestError(ValueError):
    """Malformed or inconsistent patch manifest."""


class CheckpointError(RuntimeError):
    """Missing, corrupt, or incompatible checkpoint contents."""
