"""Seven-tape machine: tapes, control states, configurations, traces and the run loop."""

from .engine import (
    ContextViolation, Halted, RunResult, StepError, StepLimit, TokenLimit, blank_tapes, check_state_partition,
    init_configuration, pending_context_violation, run, step,
)
from .tape import *  # noqa: F401,F403
from .tape import Configuration, ControlState, Phase, RunOptions, Tape, TraceEvent, validate_trace

__all__ = [
    "Configuration", "ControlState", "Phase", "RunOptions", "Tape", "TraceEvent", "validate_trace",
    "ContextViolation", "Halted", "RunResult", "StepError", "StepLimit", "TokenLimit", "blank_tapes",
    "check_state_partition", "init_configuration", "pending_context_violation", "run", "step",
]
