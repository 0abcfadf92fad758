"""Exceptions shared by the artifact layer and the command-line driver."""


class ArtifactVersionError(ValueError):
    """Artifact written under a different magic or schema version."""


class DependencyError(FileNotFoundError):
    """A stage's upstream artifact is missing."""


class ConfigError(ValueError):
    """Configuration document violates the schema."""
