"""Scikit-learn style estimator fronts for the trainable counters and the
deterministic blob-counting baseline.

``X`` is an array of frame windows shaped ``(n, W, 8, 8)`` (a flattened
``(n, W*64)`` view is also accepted), ``y`` the per-window person counts
in 0..3. Input normalization is fitted on the training data and applied
automatically at prediction time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import baseline as bl
from .data import K_CLASSES, class_weights, normalization_stats, normalize
from .models import build_model, parse_arch
from .quant import export_int8
from .train import TrainConfig, train


class InfraredPeopleCounter(ClassifierMixin, BaseEstimator):
    """Tiny neural people counter for 8x8 thermal frame windows.

    Parameters
    ----------
    arch : architecture string, e.g. ``"mc:w3:C8-P-C16-FC"``.
    seed : RNG seed for initialization and batch shuffling.
    quant_aware : if True, ``fit`` runs float training followed by
        quantization-aware fine-tuning with int8 fake quantization.
    max_epochs, lr0, batch_size : training hyperparameters.
    """

    def __init__(
        self,
        arch: str = "sf:w1:C8-P-FC",
        seed: int = 0,
        quant_aware: bool = False,
        max_epochs: int = 500,
        lr0: float = 1e-3,
        batch_size: int = 128,
    ):
        self.arch = arch
        self.seed = seed
        self.quant_aware = quant_aware
        self.max_epochs = max_epochs
        self.lr0 = lr0
        self.batch_size = batch_size

    # -- helpers -------------------------------------------------------

    def _spec(self):
        return parse_arch(self.arch)

    def _shape_windows(self, X, window):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2 and X.shape[1] == window * 64:
            X = X.reshape(len(X), window, 8, 8)
        if X.ndim != 4 or X.shape[1:] != (window, 8, 8):
            raise ValueError(
                f"expected windows shaped (n, {window}, 8, 8); got {X.shape}"
            )
        return X

    # -- sklearn API ---------------------------------------------------

    def fit(self, X, y):
        spec = self._spec()
        X = self._shape_windows(X, spec.window)
        y = np.asarray(y, dtype=int)
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        self.mean_, self.std_ = normalization_stats(X)
        Xn = normalize(X, self.mean_, self.std_)
        if spec.family == "mv":
            # the voting ensemble trains its per-frame net on the
            # current frame of each window (each retained frame once)
            Xn = Xn[:, -1:]
        self.class_weights_ = class_weights(y)
        cfg = TrainConfig(
            max_epochs=self.max_epochs,
            lr0=self.lr0,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        model = build_model(spec, seed=self.seed)
        model, history = train(model, Xn, y, self.class_weights_, cfg)
        if self.quant_aware:
            model, qat_history = train(
                model, Xn, y, self.class_weights_, cfg.for_qat(), quant_aware=True
            )
            self.qat_history_ = qat_history
        self.model_ = model
        self.history_ = history
        self.classes_ = np.arange(K_CLASSES)
        self.n_features_in_ = spec.window * 64
        return self

    def _predictions(self, X):
        check_is_fitted(self, "model_")
        X = self._shape_windows(X, self._spec().window)
        return self.model_.predict(normalize(X, self.mean_, self.std_))

    def predict(self, X):
        return np.array([p.count for p in self._predictions(X)], dtype=int)

    def predict_proba(self, X):
        return np.stack([p.probabilities for p in self._predictions(X)])

    def export_int8(self, calibration_windows=None):
        """Export the fitted model to the integer-only runtime.

        A quantization-aware fit exports directly; a float fit needs
        representative ``calibration_windows`` to set activation ranges.
        """
        check_is_fitted(self, "model_")
        model = self.model_
        if self.quant_aware:
            return export_int8(model)
        if calibration_windows is None:
            raise ValueError("float model export needs calibration windows")
        Xc = self._shape_windows(calibration_windows, self._spec().window)
        return export_int8(model, calibration=normalize(Xc, self.mean_, self.std_))


class BlobCountingBaseline(ClassifierMixin, BaseEstimator):
    """Deterministic blob-counting baseline behind the estimator API.

    ``fit`` only records the configuration (there is nothing to learn);
    ``predict`` expects one session's raw frames, shaped ``(n, 8, 8)``
    or ``(n, 64)``, in acquisition order.
    """

    def __init__(
        self,
        smoothing_alpha: float = 0.6,
        interpolation_factor: int = 2,
        detect_threshold: float = 1.5,
        min_blob_area: int = 2,
        max_blob_area: int = 40,
        background_rate: float = 0.01,
        warmup_frames: int = 20,
    ):
        self.smoothing_alpha = smoothing_alpha
        self.interpolation_factor = interpolation_factor
        self.detect_threshold = detect_threshold
        self.min_blob_area = min_blob_area
        self.max_blob_area = max_blob_area
        self.background_rate = background_rate
        self.warmup_frames = warmup_frames

    def _config(self) -> bl.BaselineConfig:
        return bl.BaselineConfig(
            smoothing_alpha=self.smoothing_alpha,
            interpolation_factor=self.interpolation_factor,
            detect_threshold=self.detect_threshold,
            min_blob_area=self.min_blob_area,
            max_blob_area=self.max_blob_area,
            background_rate=self.background_rate,
            warmup_frames=self.warmup_frames,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()  # validates the parameters
        self.classes_ = np.arange(K_CLASSES)
        return self

    @staticmethod
    def _shape_frames(X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2 and X.shape[1] == 64:
            X = X.reshape(len(X), 8, 8)
        if X.ndim != 3 or X.shape[1:] != (8, 8):
            raise ValueError(f"expected frames shaped (n, 8, 8); got {X.shape}")
        return X

    def predict(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        return bl.run_baseline(self._shape_frames(X), self.config_)
