class HiFiDiffError(Exception):
    pass


class ConfigurationError(HiFiDiffError, ValueError):
    pass


class DimensionError(HiFiDiffError, ValueError):
    pass


class DomainError(HiFiDiffError, ValueError):
    pass


class DataError(HiFiDiffError, ValueError):
    pass


class NumericalFault(HiFiDiffError, ArithmeticError):
    pass


class CheckpointError(HiFiDiffError):
    """Checkpoint is corrupt, truncated, or built for a different model."""


class VolumeFormatError(HiFiDiffError):
    pass
