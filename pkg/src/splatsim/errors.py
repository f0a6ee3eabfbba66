"""Exception hierarchy.

Everything raised on purpose derives from SplatError so the CLI can map
user-facing failures to exit code 1 and keep genuine bugs (anything else)
at exit code 2.
"""


class SplatError(Exception):
    """Base class for all deliberate errors raised by this package."""


class InvalidRotationError(SplatError):
    """Zero-norm or unnormalized quaternion where a unit rotor is required."""


class DegenerateTimeError(SplatError):
    """Temporal variance too small to condition on (sigma_tt <= 1e-12)."""


class ShapeError(SplatError):
    """Array argument has the wrong shape or size."""


class StaleStateError(SplatError):
    """Backward pass invoked without retained forward contributor state."""


class UnknownGroupError(SplatError):
    """Group id or label that never existed in the scene."""


class DegenerateRegionError(SplatError):
    """Sampling region with zero volume."""


class DegenerateSceneError(SplatError):
    """Scene too small for the requested computation (e.g. N <= K)."""


class LabelError(SplatError):
    """Label plane contains a class id outside the head's output range."""


class GradientError(SplatError):
    """Non-finite gradient handed to the optimizer.

    Carries the offending block name in args for diagnostics.
    """


class NonFiniteLossError(SplatError):
    """Training loss went NaN/inf; the loss trace so far is attached."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class GroundingError(SplatError):
    """No group matches a grounding query; candidate labels attached."""

    def __init__(self, message, candidates=()):
        super().__init__(message)
        self.candidates = list(candidates)


class PartNotFoundError(SplatError):
    """Open-vocabulary part query found nothing in any view."""


class SceneIOError(SplatError):
    """Base for scene file problems."""


class SceneFormatError(SceneIOError):
    """Bad magic bytes or malformed section."""


class SceneVersionError(SceneIOError):
    """File version not supported by this reader."""


class SceneTruncatedError(SceneIOError):
    """File ends before the declared payload does."""


class SceneChecksumError(SceneIOError):
    """Trailing CRC32 does not match the payload."""


class MaterialError(SplatError):
    """Invalid material parameters or an unusable material library."""


class TimestepError(SplatError):
    """Simulation timestep above the stability bound."""


class LangError(SplatError):
    """Base for scripting-language errors; carries (line, col)."""

    def __init__(self, message, line=None, col=None):
        super().__init__(message)
        self.line = line
        self.col = col

    def __str__(self):
        base = super().__str__()
        if self.line is not None:
            return "line %d, col %d: %s" % (self.line, self.col, base)
        return base


class LexError(LangError):
    """Unrecognized character or malformed literal."""


class ParseError(LangError):
    """Syntax error; carries the set of expected tokens."""

    def __init__(self, message, line=None, col=None, expected=()):
        super().__init__(message, line, col)
        self.expected = sorted(expected)


class PlanError(LangError):
    """Semantic error while building the operator pipeline."""


class TranslationError(SplatError):
    """External-command translation produced an unparseable script.

    Keeps the translator's raw output and the underlying syntax error.
    """

    def __init__(self, message, raw_output="", parse_error=None):
        super().__init__(message)
        self.raw_output = raw_output
        self.parse_error = parse_error


class FeatureDisabledError(SplatError):
    """Optional integration invoked without a registered provider."""


class StageFailedError(SplatError):
    """A pipeline stage failed; the scene was rolled back to its snapshot.

    Carries the stage description and the original exception.
    """

    def __init__(self, stage, cause):
        super().__init__("stage %s failed: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause
