"""Exception types shared across patchbank."""


class PatchbankError(Exception):
    """Base class for patchbank-specific failures."""


class FormatError(PatchbankError):
    """A binary artifact (bank / feature pack / model file) is malformed."""


class UnsupportedVersionError(FormatError):
    """A binary artifact carries a version this build cannot read."""


class UndefinedMetricError(PatchbankError):
    """A metric was requested on inputs where it is mathematically undefined."""


class IncompleteGridError(PatchbankError):
    """An aggregate was requested over a (category, k, seed) grid with holes."""

    def __init__(self, missing):
        self.missing = list(missing)
        cells = ", ".join(f"({c}, k={k}, seed={s})" for c, k, s in self.missing[:8])
        more = "" if len(self.missing) <= 8 else f" and {len(self.missing) - 8} more"
        super().__init__(f"metric grid is missing {len(self.missing)} cells: {cells}{more}")


class IndexingError(PatchbankError):
    """A dataset tree does not match the documented layout."""


class ConfigError(PatchbankError):
    """A benchmark / extractor configuration is invalid."""
