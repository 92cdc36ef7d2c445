"""Exception hierarchy.

Every error carries a stable ``code`` so the command line can report a
structured message instead of a traceback.
"""

from __future__ import annotations


class SynthPanelError(Exception):
    code = "SynthPanelError"

    def __init__(self, message: str = "", **context):
        super().__init__(message)
        self.context = context


# -- ingestion / design ---------------------------------------------------
class PanelError(SynthPanelError, ValueError):
    code = "PanelError"


class MissingColumn(PanelError):
    code = "MissingColumn"


class DuplicateUnitYear(PanelError):
    code = "DuplicateUnitYear"


class UnbalancedPanel(PanelError):
    code = "UnbalancedPanel"

    def __init__(self, message: str = "", missing=()):
        super().__init__(message, missing=list(missing))
        self.missing = list(missing)


class NonNumericValue(PanelError):
    code = "NonNumericValue"


class ConfigError(PanelError):
    code = "ConfigError"


class InvalidDesign(SynthPanelError, ValueError):
    code = "InvalidDesign"

    def __init__(self, message: str = "", report=None):
        super().__init__(message)
        self.report = report


# -- synthetic control ----------------------------------------------------
class UnknownUnit(SynthPanelError, KeyError):
    code = "UnknownUnit"

    def __str__(self):
        return self.args[0] if self.args else self.code


class DegeneratePredictor(SynthPanelError, ValueError):
    code = "DegeneratePredictor"


class NoConvergence(SynthPanelError, RuntimeError):
    code = "NoConvergence"


class RankDeficient(SynthPanelError, ValueError):
    code = "RankDeficient"


class AllDropped(SynthPanelError, ValueError):
    code = "AllDropped"


class EmptyInput(SynthPanelError, ValueError):
    code = "EmptyInput"


class NonPositiveSynthetic(SynthPanelError, ValueError):
    code = "NonPositiveSynthetic"


# -- inference ------------------------------------------------------------
class NotEnoughDonors(SynthPanelError, ValueError):
    code = "NotEnoughDonors"


class EmptyAfterFilter(SynthPanelError, ValueError):
    code = "EmptyAfterFilter"


class TooFewDraws(SynthPanelError, ValueError):
    code = "TooFewDraws"


class FakeT0NotBeforeTrueT0(SynthPanelError, ValueError):
    code = "FakeT0NotBeforeTrueT0"


class WindowTooShort(SynthPanelError, ValueError):
    code = "WindowTooShort"


# -- alternative estimators -----------------------------------------------
class CollinearDesign(SynthPanelError, ValueError):
    code = "CollinearDesign"


class ALSNoConvergence(SynthPanelError, RuntimeError):
    code = "ALSNoConvergence"


class TooFewDonors(SynthPanelError, ValueError):
    code = "TooFewDonors"


class SVDFailure(SynthPanelError, RuntimeError):
    code = "SVDFailure"


class GridExhausted(SynthPanelError, ValueError):
    code = "GridExhausted"


class TooFewPairs(SynthPanelError, ValueError):
    code = "TooFewPairs"


# -- simulation -----------------------------------------------------------
class InvalidSpec(SynthPanelError, ValueError):
    code = "InvalidSpec"


# -- mechanisms / diagnostics ---------------------------------------------
class SharesNotNormalized(SynthPanelError, ValueError):
    code = "SharesNotNormalized"


class Collinear(SynthPanelError, ValueError):
    code = "Collinear"


class TooFewClusters(SynthPanelError, ValueError):
    code = "TooFewClusters"


class TooFewWeights(SynthPanelError, ValueError):
    code = "TooFewWeights"
