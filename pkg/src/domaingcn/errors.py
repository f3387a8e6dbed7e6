"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`DomainGCNError`, so the CLI can map it to an exit code and a
category label without catching unrelated failures.
"""


class DomainGCNError(Exception):
    category = "error"


class DimensionError(DomainGCNError, ValueError):
    category = "dimension error"


class ContractError(DomainGCNError, ValueError):
    category = "contract violation"


class FormatError(DomainGCNError, ValueError):
    category = "format error"


class DataError(DomainGCNError, ValueError):
    category = "data error"


class ConfigError(DomainGCNError, ValueError):
    category = "config error"


class StatisticsError(DomainGCNError, ValueError):
    category = "statistics error"


class MetricsError(DomainGCNError, ValueError):
    category = "metrics error"


class TrainingError(DomainGCNError, RuntimeError):
    category = "training error"


class IOFailure(DomainGCNError, OSError):
    category = "I/O error"
