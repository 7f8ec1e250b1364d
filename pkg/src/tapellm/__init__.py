"""Deterministic seven-tape Turing machine that runs transformer inference step by step."""

from .machine.engine import (
    ContextViolation, Halted, RunResult, StepError, StepLimit, TokenLimit, init_configuration, run, step,
)
from .machine.tape import Configuration, RunOptions, validate_trace
from .model import ModelSpec, generate_spec, load_spec
from .scenarios import Scenario, run_scenario
from .tokeniser import Tokeniser, Vocabulary, regime_tokeniser

__version__ = "0.1.0"

__all__ = [
    "Configuration", "ContextViolation", "Halted", "ModelSpec", "RunOptions", "RunResult", "Scenario", "StepError",
    "StepLimit", "TokenLimit", "Tokeniser", "Vocabulary", "generate_spec", "init_configuration", "load_spec",
    "regime_tokeniser", "run", "run_scenario", "step", "validate_trace",
]
