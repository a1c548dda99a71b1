from typing import Optional


class GuideError(Exception):
    """Base class for every error raised by the library"""


class ValidationError(GuideError, ValueError):
    pass


class ConfigError(GuideError):
    pass


class NumericalError(GuideError):
    def __init__(self, message: str, step: Optional[int] = None, time: Optional[float] = None,
                 run: Optional[int] = None):
        self.message = message
        location = []
        if run is not None:
            location.append(f"run {run}")
        if step is not None:
            location.append(f"step {step}")
        if time is not None:
            location.append(f"t={time:.6g}")
        if location:
            message = f"{message} (at {', '.join(location)})"
        super().__init__(message)
        self.step = step
        self.time = time
        self.run = run

    def in_run(self, run: int) -> "NumericalError":
        """Same error type and location, tagged with a Monte-Carlo run index"""
        return type(self)(self.message, self.step, self.time, run)


class SimulationExplosion(NumericalError):
    pass


class RiccatiBlowUp(NumericalError):
    pass


class IntegrationError(NumericalError):
    pass


class StageError(GuideError):
    def __init__(self, stage: str, seed: int, cause: Exception):
        super().__init__(f"stage '{stage}' failed (seed {seed}): {cause}")
        self.stage = stage
        self.seed = seed
        self.cause = cause
