"""scikit-learn compatible wrapper around exit-layer profiling and early-exit
inference.

``fit`` profiles labelled prompts to pick the exit layer; ``predict`` runs
the chosen exit policy. Parameters follow the usual estimator contract so
``get_params``/``set_params``/``clone`` work.
"""
from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .bench import TaskSpec
from .engine import MatchSpec, run_fixed_exit, run_with_early_exit
from .errors import ConfigError
from .model import LayerStack
from .profiler import DEFAULT_PATIENCE, MODES, select_optimal_layer, treatment_effect
from .validation import check_labels, check_layer, check_token_inputs
from .weights import load_model


class EarlyExitClassifier(ClassifierMixin, BaseEstimator):
    """Classify prompts by reading a transformer out at an early layer.

    Parameters
    ----------
    model : LayerStack or path to a weight file
    match_spec : MatchSpec or TaskSpec
    mode : {"staged", "exhaustive"}
        Search used by ``fit`` to pick the exit layer.
    policy : {"fixed", "dynamic", "full"}
        ``fixed`` reads out at the fitted layer; ``dynamic`` exits at the
        first matching candidate layer; ``full`` ignores the fit.
    exit_layer : int, optional
        Overrides the fitted layer for the fixed policy.
    threshold : float, optional
        Confidence threshold for the dynamic policy.
    """

    def __init__(self, model=None, match_spec=None, mode="staged", policy="fixed",
                 exit_layer=None, threshold=None, patience=DEFAULT_PATIENCE, n_jobs=None):
        self.model = model
        self.match_spec = match_spec
        self.mode = mode
        self.policy = policy
        self.exit_layer = exit_layer
        self.threshold = threshold
        self.patience = patience
        self.n_jobs = n_jobs

    def _resolve(self):
        model = self.model
        if isinstance(model, (str, os.PathLike)):
            model = load_model(model)
        if not isinstance(model, LayerStack):
            raise ConfigError("model must be a LayerStack or a weight file path")
        spec = self.match_spec
        if isinstance(spec, TaskSpec):
            spec = spec.match_spec
        if not isinstance(spec, MatchSpec):
            raise ConfigError("match_spec must be a MatchSpec or TaskSpec")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.policy not in ("fixed", "dynamic", "full"):
            raise ConfigError("policy must be 'fixed', 'dynamic' or 'full'")
        return model, spec

    def fit(self, X, y):
        model, spec = self._resolve()
        inputs = check_token_inputs(X, model.config)
        labels = check_labels(y, spec.classes, len(inputs))
        selection, profile = select_optimal_layer(
            model, list(zip(inputs, labels)), spec, self.mode,
            jobs=self.n_jobs or 1, patience=self.patience)
        self.model_ = model
        self.spec_ = spec
        self.selection_ = selection
        self.profile_ = profile
        self.classes_ = np.array(spec.classes, dtype=object)
        self.n_layers_ = model.config.n_layers
        if self.exit_layer is not None:
            self.exit_layer_ = check_layer(self.exit_layer, self.n_layers_)
        else:
            self.exit_layer_ = selection.optimal_layer
        return self

    def exit_decisions(self, X):
        """ExitDecision for every prompt; ``None`` where the fixed policy has
        no layer (the task was never recognised)."""
        check_is_fitted(self, "selection_")
        inputs = check_token_inputs(X, self.model_.config)
        n = self.n_layers_
        if self.policy == "dynamic":
            spec = self.spec_ if self.threshold is None else self.spec_.with_threshold(self.threshold)
            return [run_with_early_exit(self.model_, x, spec) for x in inputs]
        layer = n if self.policy == "full" else self.exit_layer_
        if layer is None:
            return [None] * len(inputs)
        return [run_fixed_exit(self.model_, x, self.spec_, layer) for x in inputs]

    def predict(self, X):
        decisions = self.exit_decisions(X)
        return np.array([None if d is None else d.predicted_class for d in decisions], dtype=object)

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        hits = np.array([p == t for p, t in zip(pred, y)], dtype=float)
        return float(np.average(hits, weights=sample_weight))

    def treatment_effect(self):
        check_is_fitted(self, "selection_")
        if self.selection_.optimal_layer is None:
            return None
        return treatment_effect(self.profile_, self.selection_.optimal_layer)
