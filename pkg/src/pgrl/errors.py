"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value breaks a documented precondition."""


class SpecError(ValueError):
    """An experiment spec failed validation; carries every violation found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid spec: " + "; ".join(self.violations))
