from abc import ABC, abstractmethod
from typing import Any, Dict


class BaseReporter(ABC):
    """
    Abstract base class for run reporters.
    Reporters turn the trainer's run log into files (CSV tables, JSON reports, ...).
    """

    @abstractmethod
    def on_start(self, context: Dict[str, Any]):
        """
        Called once before the first epoch (also after a resume).

        Args:
            context: A dictionary containing:
                - trainer: The Trainer instance.
                - model: The MultitaskModel being trained.
                - run_log: The RunLog that epochs are appended to.
                - output_dir: Directory the run writes into (may be None).
        """
        pass

    @abstractmethod
    def on_epoch(self, record, context: Dict[str, Any]):
        """Called after every completed epoch with its EpochRecord."""
        pass

    @abstractmethod
    def on_finish(self, context: Dict[str, Any]):
        """Called after the last epoch, once `run_log.report` is set."""
        pass
