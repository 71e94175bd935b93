"""Exception hierarchy. Every error carries the CLI exit code of its class:
2 config, 3 data, 4 numerical."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class AtlasRegError(Exception):
    exit_code = EXIT_DATA


class ConfigError(AtlasRegError):
    exit_code = EXIT_CONFIG


class SpecInvalid(ConfigError):
    pass


class DataError(AtlasRegError):
    exit_code = EXIT_DATA


class GeometryMismatch(DataError):
    pass


class EmptyAnnotation(DataError):
    pass


class InvalidAnnotation(DataError):
    pass


class NoObservations(DataError):
    pass


class MissingPair(DataError):
    pass


class SectionTooSmall(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class EmptyClass(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptySupport(DataError):
    pass


class MissingTruth(DataError):
    pass


class NumericalError(AtlasRegError):
    exit_code = EXIT_NUMERICAL


class SingularTransform(NumericalError):
    pass


class DegenerateCloud(NumericalError):
    pass


class NoOverlap(NumericalError):
    pass


class DegenerateObjective(NumericalError):
    pass


class NonPositivePeak(NumericalError):
    pass


class StageError(AtlasRegError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", EXIT_DATA)


class ShapeOutsideDomainWarning(UserWarning):
    """A placed structure shape is partially clipped by the atlas domain."""
