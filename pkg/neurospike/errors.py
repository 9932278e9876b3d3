class NeurospikeError(Exception):
    """Base class for every error raised by neurospike."""


class ShapeError(NeurospikeError, ValueError):
    pass


class DomainError(NeurospikeError, ValueError):
    pass


class NumericError(NeurospikeError, ArithmeticError):
    pass


class InvalidStateError(NeurospikeError, RuntimeError):
    pass


class FormatError(NeurospikeError, ValueError):
    pass


class FilterLengthError(NeurospikeError, ValueError):
    pass


class TrialRejected(NeurospikeError):
    """
    A trial cannot be turned into epochs.

    :param trial_id: Identifier of the offending trial.
    :param reason: Human readable diagnostic.
    """

    def __init__(self, trial_id: str, reason: str) -> None:
        super().__init__(f"Trial '{trial_id}' rejected: {reason}")
        self.trial_id = trial_id
        self.reason = reason
