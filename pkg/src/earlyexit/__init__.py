"""Early-exit inference for layered transformers, with causal exit-layer
selection and an accuracy/latency benchmark harness."""

from .bench import (EvalResult, LabeledExample, Policy, TaskSpec, compare, evaluate,
                    load_dataset, load_task, split_dataset)
from .engine import (ExitDecision, LatencyRecord, MatchSpec, load_match_spec, match,
                     run_fixed_exit, run_with_early_exit)
from .estimator import EarlyExitClassifier
from .model import (HiddenState, LayerStack, ModelConfig, TokenInput, decode_at_layer,
                    forward_to_layer, greedy_continue)
from .planted import build_planted_model, build_random_model
from .profiler import (ExitLayerSelection, LayerAccuracyProfile, TreatmentEffectReport,
                       clean_run, corrupted_run, explore_run, restoration_run,
                       select_optimal_layer, treatment_effect)
from .reports import emit_report, render_exit_layer_table
from .weights import load_model, save_model

__version__ = "0.1.0"
