"""sklearn-style estimators over the segmentation and prognosis models.

Volumes are arrays shaped (n, D, D, D) for CT alone or (n, D, D, D, 2) with
CT in channel 0 and PET in channel 1, already intensity-normalised (see
:func:`pemma.data.normalize_ct` / :func:`pemma.data.normalize_pet`).  Label
volumes hold 0 (background), 1 (tumor) and 2 (lymph node).
"""

from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from pemma.adaptation import AdaptationConfig, ParamLedger, adapt, param_report
from pemma.backbone import ModelConfig, PrognosisHead, SegmentationModel
from pemma.data.types import Case, Volume
from pemma.exceptions import ConfigError
from pemma.fusion import LateFusion, build_early_fusion, early_fusion_ledger, late_fusion_ledger
from pemma.survival import antolini_cindex, assign_bins, discretize_times, survival_curves
from pemma.training import (ADAPT_GROUPS, FeatureScaler, TrainConfig, dice_per_class, encoder_features,
                            predict_pmf, predict_proba, set_trainable, train_prognosis_head, train_segmentation)
from pemma.validation import (check_consistent_length, check_features, check_labels, check_mode, check_survival_y,
                              check_volumes, ensure_fitted)


def _to_cases(X: np.ndarray, y: np.ndarray | None = None) -> list[Case]:
    cases = []
    for i, vol in enumerate(X):
        ct = Volume(vol[..., 0].astype(np.float32), modality="ct")
        pet = Volume(vol[..., 1].astype(np.float32), modality="pet") if vol.shape[-1] > 1 else None
        mask = y[i] if y is not None else np.zeros(vol.shape[:3], dtype=np.uint8)
        cases.append(Case(ct=ct, pet=pet, mask=mask, case_id=str(i), processed=True))
    return cases


class _Segmenter(BaseEstimator):
    """Shared prediction, scoring and feature extraction."""

    _input_channels = 1

    def _predictor(self):
        ensure_fitted(self, "predictor_")
        return self.predictor_

    def _side(self) -> int:
        p = self._predictor()
        return (p.ct_model if isinstance(p, LateFusion) else p).config.side

    def _check_fit(self, X, y):
        X = check_volumes(X, n_channels=self._input_channels)
        y = check_labels(y, X.shape[:4])
        return X, y

    def predict_proba(self, X, mode: str = "ct") -> np.ndarray:
        """Class probabilities (n, D, D, D, classes)."""
        check_mode(mode)
        predictor = self._predictor()
        X = check_volumes(X, side=self._side())
        if mode != "ct" and X.shape[-1] < 2:
            raise ConfigError(f"mode {mode!r} needs a PET channel")
        return np.stack([predict_proba(predictor, c, mode) for c in _to_cases(X)])

    def predict(self, X, mode: str = "ct") -> np.ndarray:
        return np.argmax(self.predict_proba(X, mode), axis=-1)

    def score(self, X, y, mode: str = "ct") -> float:
        """Mean over cases of the tumor/lymph average Dice."""
        pred = self.predict(X, mode)
        y = check_labels(y, pred.shape)
        return float(np.mean([dice_per_class(p, g)["average"] for p, g in zip(pred, y)]))

    def _train_config(self, **kw) -> TrainConfig:
        return TrainConfig(steps=self.steps, lr=self.lr, batch_size=self.batch_size,
                           weight_decay=self.weight_decay, seed=self.random_state, **kw)


class CTSegmenter(TransformerMixin, _Segmenter):
    """CT-only segmenter; the starting point for every multi-modal estimator."""

    def __init__(self, side=32, patch=8, dim=64, heads=4, depth=4, steps=200, lr=1e-3, batch_size=2,
                 weight_decay=1e-5, random_state=0):
        self.side = side
        self.patch = patch
        self.dim = dim
        self.heads = heads
        self.depth = depth
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._check_fit(X, y)
        if X.shape[1] != self.side:
            raise ConfigError(f"estimator side {self.side} does not match volumes of side {X.shape[1]}")
        cfg = ModelConfig(side=self.side, patch=self.patch, dim=self.dim, heads=self.heads, depth=self.depth)
        model = SegmentationModel(cfg, seed=self.random_state)
        self.train_result_ = train_segmentation(model, _to_cases(X, y), self._train_config(mode="ct"))
        self.model_ = self.predictor_ = model
        return self

    def transform(self, X, mode: str = "ct") -> np.ndarray:
        """Pooled final-block encoder features (n, dim)."""
        model = self._predictor()
        X = check_volumes(X, side=self._side())
        return encoder_features(model, _to_cases(X), check_mode(mode, model.available_modes()))


class _FromBase(_Segmenter):
    _input_channels = 2

    def _base_model(self) -> SegmentationModel:
        if not isinstance(self.base, CTSegmenter):
            raise ConfigError("base must be a CTSegmenter")
        ensure_fitted(self.base, "model_")
        # never mutate the base estimator's model
        return copy.deepcopy(self.base.model_)


class PEMMAAdapter(TransformerMixin, _FromBase):
    """Adds low-rank updates and PET paths to a fitted CT model and trains only those."""

    def __init__(self, base=None, method="lora", rank=4, alpha=8.0, targets=("q", "v"), pet_init="cross_modal",
                 mode_probs=None, steps=200, lr=1e-3, batch_size=2, weight_decay=1e-5, random_state=0):
        self.base = base
        self.method = method
        self.rank = rank
        self.alpha = alpha
        self.targets = targets
        self.pet_init = pet_init
        self.mode_probs = mode_probs
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._check_fit(X, y)
        model = self._base_model()
        self.adaptation_ = AdaptationConfig(method=self.method, rank=self.rank, alpha=self.alpha,
                                            targets=tuple(self.targets), pet_init=self.pet_init)
        adapt(model, self.adaptation_, seed=self.random_state)
        set_trainable(model, ADAPT_GROUPS)
        self.train_result_ = train_segmentation(model, _to_cases(X, y),
                                                self._train_config(mode=None, mode_probs=self.mode_probs))
        self.model_ = self.predictor_ = model
        self.param_report_ = param_report(ParamLedger.from_model(model))
        return self

    def transform(self, X, mode: str = "ctpet") -> np.ndarray:
        model = self._predictor()
        X = check_volumes(X, side=self._side())
        return encoder_features(model, _to_cases(X), check_mode(mode))


class EarlyFusionSegmenter(_FromBase):
    """Two-channel model initialised from the CT model; every parameter is retrained."""

    def __init__(self, base=None, pet_init="cross_modal", steps=200, lr=1e-3, batch_size=2, weight_decay=1e-5,
                 random_state=0):
        self.base = base
        self.pet_init = pet_init
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._check_fit(X, y)
        base = self._base_model()
        model = build_early_fusion(base, self.pet_init, seed=self.random_state)
        self.train_result_ = train_segmentation(model, _to_cases(X, y), self._train_config(mode="ctpet"))
        self.model_ = self.predictor_ = model
        self.param_report_ = param_report(early_fusion_ledger(model, base.num_parameters()))
        return self


class LateFusionSegmenter(_FromBase):
    """The fitted CT model plus an independently trained PET model, mixed with weight ``w_ct``."""

    def __init__(self, base=None, w_ct=0.5, steps=200, lr=1e-3, batch_size=2, weight_decay=1e-5, random_state=0):
        self.base = base
        self.w_ct = w_ct
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._check_fit(X, y)
        ct_model = self._base_model()
        pet_model = SegmentationModel(ct_model.config, seed=self.random_state, primary="pet")
        self.train_result_ = train_segmentation(pet_model, _to_cases(X, y), self._train_config(mode="pet"))
        self.predictor_ = LateFusion(ct_model, pet_model, self.w_ct)
        self.param_report_ = param_report(late_fusion_ledger(ct_model, pet_model))
        return self


class PrognosisEstimator(BaseEstimator):
    """Discrete-time survival head trained with the DeepHit objective.

    ``X`` is a feature matrix (encoder features, optionally with EHR columns
    appended) and ``y`` an (n, 2) array of [time, event] or a structured
    array with ``time`` and ``event`` fields.  :meth:`score` is the
    time-dependent concordance index.
    """

    def __init__(self, hidden=32, n_bins=20, steps=300, lr=1e-3, weight_decay=1e-5, eta=0.1, sigma=0.1,
                 random_state=0):
        self.hidden = hidden
        self.n_bins = n_bins
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.eta = eta
        self.sigma = sigma
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        times, events = check_survival_y(y)
        check_consistent_length(X, times)
        self.bin_edges_, bins = discretize_times(times, self.n_bins)
        self.scaler_ = FeatureScaler.fit(X)
        self.n_features_in_ = X.shape[1]
        self.head_ = PrognosisHead(X.shape[1], 0, self.hidden, self.n_bins, seed=self.random_state)
        self.loss_curve_ = train_prognosis_head(self.head_, self.scaler_(X), times, events, bins, steps=self.steps,
                                                lr=self.lr, weight_decay=self.weight_decay, eta=self.eta,
                                                sigma=self.sigma)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Probability mass over the time bins, (n, n_bins)."""
        ensure_fitted(self, "head_")
        X = check_features(X, self.n_features_in_)
        return predict_pmf(self.head_, self.scaler_(X))

    def predict_survival(self, X) -> np.ndarray:
        return survival_curves(self.predict_proba(X))

    def predict(self, X) -> np.ndarray:
        """Risk score: summed cumulative incidence, larger means earlier expected event."""
        return np.cumsum(self.predict_proba(X), axis=1).sum(axis=1)

    def score(self, X, y) -> float:
        times, events = check_survival_y(y)
        pmf = self.predict_proba(X)
        check_consistent_length(pmf, times)
        return antolini_cindex(pmf, times, events, assign_bins(times, self.bin_edges_))
