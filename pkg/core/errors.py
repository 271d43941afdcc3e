"""Exception hierarchy shared by every stepwatch package."""


class StepwatchError(Exception):
    """Base class; messages are prefixed with the module that raised them."""

    module = "stepwatch"

    def __init__(self, message: str):
        super().__init__(f"{self.module}: {message}")


class GraphError(StepwatchError):
    module = "graph"


class NoPathError(GraphError):
    """No simple path leads from the origin step to the target step."""


class ObservationError(StepwatchError):
    module = "tracker"


class InsufficientHistoryError(StepwatchError):
    """Raised when the belief history is too short to judge a step completion."""
    module = "tracker"


class UnreachableTargetError(StepwatchError):
    module = "forecaster"


class PolicyError(StepwatchError):
    module = "policy"


class SimulationError(StepwatchError):
    module = "simulator"


class EvaluationError(StepwatchError):
    module = "evaluation"


class ProtocolError(StepwatchError):
    module = "service"

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


class InputNotFoundError(StepwatchError):
    module = "cli"
