"""
Error types raised across the lab.

Every failure the pipeline can report derives from CdpLabError so the
management commands can map it onto an exit code in one place.
"""


class CdpLabError(Exception):
    """Base class for lab failures"""


class InvalidArgumentError(CdpLabError, ValueError):
    """Argument out of range or shapes that do not fit together"""


class ImageIOError(CdpLabError, OSError):
    """Image file could not be read or written"""


class ImageParseError(CdpLabError):
    """Image file exists but is not a valid 16-bit grayscale PNG"""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"Malformed image {self.path} at byte offset {offset}: {reason}")


class NumericError(CdpLabError, ArithmeticError):
    """A computation produced NaN or Inf"""


class UndefinedCorrelationError(CdpLabError, ArithmeticError):
    """Pearson correlation of two constant images"""


class RegistrationFailedError(CdpLabError):
    """No shift reached the correlation floor"""

    def __init__(self, template_id, peak, floor):
        self.template_id = template_id
        self.peak = peak
        self.floor = floor
        super().__init__(
            f"Registration against template {template_id} failed: "
            f"peak pcorr {peak:.4f} below floor {floor:.4f}"
        )


class EstimationError(CdpLabError):
    """Template estimation impossible for this probe"""


class TrainingError(CdpLabError):
    """Training aborted"""

    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} (epoch={epoch}, step={step})")


class DuplicateTemplateError(CdpLabError):
    """Two generated templates came out identical"""


class ConfigError(CdpLabError):
    """Experiment configuration could not be parsed or validated"""


class MissingStageError(CdpLabError):
    """A prerequisite pipeline stage has not been run"""

    def __init__(self, what, command):
        self.command = command
        super().__init__(f"{what} not found; run `python manage.py {command}` first")


class ProvenanceError(CdpLabError):
    """Artifacts on disk belong to a different experiment cell"""
