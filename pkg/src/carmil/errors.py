"""Exception hierarchy shared across the package.

Each class carries a short machine-readable category; the CLI maps
categories to distinct exit codes.
"""


class CarmilError(Exception):
    category = "internal"


class ConfigError(CarmilError):
    """Malformed or rejected configuration (unknown keys, bad values)."""

    category = "config"


class DataError(CarmilError):
    """Degenerate or malformed dataset: bad CSVs, dimension mismatches,
    duplicate slide ids, infeasible packing."""

    category = "data"


class SurvivalDataError(CarmilError):
    """Survival labels unusable: no events, or no comparable pairs."""

    category = "survival"
