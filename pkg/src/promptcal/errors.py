"""Exception hierarchy shared by all promptcal modules."""

from __future__ import annotations


class PromptCalError(Exception):
    """Base class; ``stage`` names the module operation that failed."""

    stage = "promptcal"


class ContractError(PromptCalError, ValueError):
    stage = "task_contract.new_contract"


class IngestError(PromptCalError, ValueError):
    stage = "dataset.load_records"


class SplitError(PromptCalError, ValueError):
    stage = "dataset.stratified_split"


class MetricError(PromptCalError, ValueError):
    stage = "metric.score"


class RenderError(PromptCalError, KeyError):
    stage = "lm_backend.render_messages"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class BackendError(PromptCalError, RuntimeError):
    stage = "lm_backend.complete"


class ConfigError(PromptCalError, ValueError):
    stage = "cli.load_config"


class EvalError(PromptCalError, ValueError):
    stage = "evaluation.evaluate_program"


class FormatError(PromptCalError, ValueError):
    stage = "artifact.load_artifact"


class IntegrityError(PromptCalError, ValueError):
    stage = "artifact.load_artifact"


class IoError(PromptCalError, OSError):
    stage = "artifact.save_artifact"
