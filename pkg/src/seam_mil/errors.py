class SeamMilError(Exception):
    pass


class DimensionError(SeamMilError, ValueError):
    pass


class DegenerateAffinityError(SeamMilError, ValueError):
    pass


class InvalidSpecError(SeamMilError, ValueError):
    pass


class UndefinedMetricError(SeamMilError, ValueError):
    pass


class ScheduleExhaustedError(SeamMilError, ValueError):
    pass


class NumericOverflowError(SeamMilError, FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activations in layer '{layer}'")
        self.layer = layer


class TrainingAborted(SeamMilError, RuntimeError):
    def __init__(self, step: int, last_checkpoint):
        super().__init__(
            f"loss became NaN at step {step}; last good checkpoint: {last_checkpoint}"
        )
        self.step = step
        self.last_checkpoint = last_checkpoint


class ConfigError(SeamMilError, ValueError):
    pass


class IngestionError(SeamMilError, OSError):
    pass


class LabelValidationError(SeamMilError, ValueError):
    pass


class ImageDecodeError(SeamMilError, OSError):
    pass
