"""Exception hierarchy shared by every pipeline stage."""


class VocarchError(Exception):
    """Base class for all errors raised by the package."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "type": type(self).__name__, "message": str(self)}


# corpus
class SchemaError(VocarchError):
    code = "schema_error"


class MissingAudio(VocarchError):
    code = "missing_audio"


class DanglingReference(VocarchError):
    code = "dangling_reference"


class AgeOutOfRange(VocarchError):
    code = "age_out_of_range"


class YearOutsideCorpusPeriods(VocarchError):
    code = "year_outside_corpus_periods"


# signal processing
class TooShort(VocarchError):
    code = "too_short"


class UnsupportedFormat(VocarchError):
    code = "unsupported_format"


class CorruptFile(VocarchError):
    code = "corrupt_file"


class NumericalInstability(VocarchError):
    code = "numerical_instability"


class GridMismatch(VocarchError):
    code = "grid_mismatch"


# features
class MissingFormant(VocarchError):
    code = "missing_formant"


class NonPositiveFormant(VocarchError):
    code = "non_positive_formant"


class EmptyChunk(VocarchError):
    code = "empty_chunk"


class NoFormantFrames(VocarchError):
    code = "no_formant_frames"


# statistics
class RankDeficient(VocarchError):
    code = "rank_deficient"


class EmptyLevel(VocarchError):
    code = "empty_level"


class NonConvergence(VocarchError):
    code = "non_convergence"


# oracle / orchestration
class ParameterOutOfRange(VocarchError):
    code = "parameter_out_of_range"


class MissingStageArtifact(VocarchError):
    code = "missing_stage_artifact"


class ConfigError(VocarchError):
    code = "config_error"

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field

    def to_dict(self):
        d = super().to_dict()
        d["field"] = self.field
        return d
