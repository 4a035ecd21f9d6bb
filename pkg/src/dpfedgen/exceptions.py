"""
Error Types
Structured exceptions raised across the simulator, accountant and reports
"""

from typing import Optional


class DpFedGenError(Exception):
    """Base class for every error raised by dpfedgen"""


class GraphError(DpFedGenError, ValueError):
    """Evaluation failure attributed to a single compute-graph node"""

    def __init__(self, message: str, node_id: Optional[int] = None,
                 node_name: Optional[str] = None, op: Optional[str] = None):
        self.node_id = node_id
        self.node_name = node_name
        self.op = op
        location = ""
        if node_id is not None:
            label = f" '{node_name}'" if node_name else ""
            location = f" [node {node_id}{label} op={op}]"
        super().__init__(f"{message}{location}")


class ShapeError(GraphError):
    """Operand shapes are incompatible for the requested op"""


class NonFiniteError(GraphError):
    """A NaN or infinite value appeared in a tensor"""


class UnboundLeafError(GraphError):
    """An input or parameter leaf needed for evaluation was not bound"""


class LayoutMismatchError(DpFedGenError, ValueError):
    """Two parameter vectors with different layouts were combined"""

    def __init__(self, left: str, right: str):
        self.left = left
        self.right = right
        super().__init__(f"Parameter layout mismatch: '{left}' vs '{right}'")


class PrivacyParameterError(DpFedGenError, ValueError):
    """Invalid privacy hyperparameters or accountant input"""


class DatasetError(DpFedGenError, ValueError):
    """Invalid dataset generation arguments or client data"""


class PopulationFormatError(DatasetError):
    """Malformed population container"""

    def __init__(self, message: str, offset: Optional[int] = None,
                 client_id: Optional[int] = None):
        self.offset = offset
        self.client_id = client_id
        details = []
        if offset is not None:
            details.append(f"byte offset {offset}")
        if client_id is not None:
            details.append(f"client {client_id}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class RoundAbortedError(DpFedGenError):
    """A client update failed, so the whole round was discarded"""

    def __init__(self, round_index: int, client_id: int, cause: BaseException):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        super().__init__(f"Round {round_index} aborted by client {client_id}: {cause}")


class TrainingDivergedError(DpFedGenError):
    """Training produced non-finite values"""

    def __init__(self, round_index: int, cause: BaseException):
        self.round_index = round_index
        self.cause = cause
        super().__init__(f"Training diverged at round {round_index}: {cause}")


class ScenarioConfigError(DpFedGenError, ValueError):
    """Scenario file failed validation"""


class ReportError(DpFedGenError):
    """A report could not be produced or written"""
