"""scikit-learn style wrappers around the network and the persistence baseline.

Both estimators take ``X`` of shape (n, s, 7, R, C) with channels in
``grid.FEATURES`` order (normalized, occurrence left binary) and ``y`` of
shape (n, h, R, C).
"""

from __future__ import annotations

import copy
import logging
import math
from typing import Callable

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics
from ._validation import check_inputs, check_Xy
from .exceptions import ConfigError, TrainingError
from .loss import DeepLightLoss, LossConfig
from .network import BRANCH_KERNELS, DeepLight, ModelConfig

log = logging.getLogger(__name__)


def strict_ets_1h(proba: np.ndarray, y: np.ndarray, threshold: float = metrics.DEFAULT_THRESHOLD) -> float:
    table = metrics.cumulative_scores(proba, y, horizons=(1,), modes=("strict",), threshold=threshold)
    return table["strict"][1]["scores"]["ETS"]


class PersistenceForecaster(BaseEstimator):
    """Repeat the last observed occurrence frame for every lead time."""

    def __init__(self, horizon: int = 6, threshold: float = 0.5):
        self.horizon = horizon
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_inputs(X)
        self.grid_shape_ = X.shape[-2:]
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = check_inputs(X)
        return metrics.persistence_forecast(X[:, -1, 0], self.horizon)

    def predict(self, X) -> np.ndarray:
        return metrics.binarize(self.predict_proba(X), self.threshold).astype(np.float32)

    def score(self, X, y) -> float:
        return strict_ets_1h(self.predict_proba(X), np.asarray(y), self.threshold)


class DeepLightForecaster(BaseEstimator):
    """Lightning occurrence forecaster trained with WBCE (+ hazy loss).

    When an evaluation set is passed to :meth:`fit`, the weights from the
    epoch with the highest strict 1-hour ETS on it are restored at the end.
    """

    def __init__(
        self,
        horizon: int = 6,
        branch_channels: int = 8,
        hidden_channels: int = 32,
        stem_channels: int = 32,
        cstem_stages: int = 2,
        kernel_sizes: tuple = BRANCH_KERNELS,
        use_lightning: bool = True,
        use_radar: bool = True,
        use_cloud: bool = True,
        epochs: int = 200,
        learning_rate: float = 1e-4,
        batch_size: int = 4,
        pos_weight: float = 20.0,
        spatial_value: float = 19.21,
        temporal_value: float = 0.96,
        value_is_variance: bool = True,
        hazy: bool = True,
        clip_norm: float | None = 1.0,
        threshold: float = 0.5,
        random_state: int = 0,
        verbose: int = 0,
    ):
        self.horizon = horizon
        self.branch_channels = branch_channels
        self.hidden_channels = hidden_channels
        self.stem_channels = stem_channels
        self.cstem_stages = cstem_stages
        self.kernel_sizes = kernel_sizes
        self.use_lightning = use_lightning
        self.use_radar = use_radar
        self.use_cloud = use_cloud
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.pos_weight = pos_weight
        self.spatial_value = spatial_value
        self.temporal_value = temporal_value
        self.value_is_variance = value_is_variance
        self.hazy = hazy
        self.clip_norm = clip_norm
        self.threshold = threshold
        self.random_state = random_state
        self.verbose = verbose

    # -- configuration -------------------------------------------------
    def model_config(self, s: int, rows: int, cols: int) -> ModelConfig:
        return ModelConfig(
            rows=rows, cols=cols, s=s, h=self.horizon,
            branch_channels=self.branch_channels, hidden_channels=self.hidden_channels,
            stem_channels=self.stem_channels, cstem_stages=self.cstem_stages,
            kernel_sizes=tuple(self.kernel_sizes),
            use_lightning=self.use_lightning, use_radar=self.use_radar, use_cloud=self.use_cloud,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.spatial_value, self.temporal_value, self.value_is_variance,
                          self.pos_weight, hazy=self.hazy)

    def _validate_params(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be a finite non-negative number")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")

    # -- fitting -------------------------------------------------------
    def _init_model(self, X: np.ndarray) -> None:
        torch.manual_seed(self.random_state)
        self.config_ = self.model_config(X.shape[1], X.shape[-2], X.shape[-1])
        self.model_ = DeepLight(self.config_)
        self.loss_fn_ = DeepLightLoss(self.loss_config())
        self.history_ = []

    def fit(self, X, y, eval_set: tuple | None = None,
            on_epoch_end: Callable[[dict, "DeepLightForecaster"], None] | None = None,
            warm_start: bool = False):
        """Train for ``epochs`` epochs.

        ``eval_set=(X_val, y_val)`` enables per-epoch validation ETS and best
        epoch selection.  ``on_epoch_end(record, self)`` is called after each
        epoch with the log record, while the current epoch's weights are live.
        """
        self._validate_params()
        X, y = check_Xy(X, y)
        if y.shape[1] != self.horizon:
            raise ConfigError(f"y covers {y.shape[1]} lead hours, estimator horizon is {self.horizon}")
        if eval_set is not None:
            X_val, y_val = check_Xy(*eval_set)
        if not (warm_start and hasattr(self, "model_")):
            self._init_model(X)
        rng = np.random.default_rng(self.random_state)
        model, loss_fn = self.model_, self.loss_fn_
        optimizer = torch.optim.Adam(model.parameters(), lr=self.learning_rate)
        X_t = torch.from_numpy(X)
        y_t = torch.from_numpy(y)
        blurred = loss_fn.blur(y_t) if loss_fn.config.hazy else None

        best_score, best_state = -math.inf, None
        self.n_clipped_ = 0
        start_epoch = len(self.history_)
        for epoch in range(start_epoch + 1, start_epoch + self.epochs + 1):
            model.train()
            order = rng.permutation(len(X))
            total, n_seen = 0.0, 0
            for b, lo in enumerate(range(0, len(order), self.batch_size)):
                idx = torch.from_numpy(order[lo:lo + self.batch_size])
                pred = model(X_t[idx])
                loss = loss_fn(pred, y_t[idx], None if blurred is None else blurred[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} "
                                        f"(windows {idx.tolist()})")
                optimizer.zero_grad()
                loss.backward()
                if self.clip_norm is not None:
                    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), self.clip_norm)
                    if norm > self.clip_norm:
                        self.n_clipped_ += 1
                        log.debug("epoch %d batch %d: gradient norm %.3g clipped", epoch, b, float(norm))
                optimizer.step()
                total += loss.item() * len(idx)
                n_seen += len(idx)
            record = {"epoch": epoch, "train_loss": total / n_seen}
            if eval_set is not None:
                score = strict_ets_1h(self.predict_proba(X_val), y_val, self.threshold)
                record["val_ets"] = score
                if score > best_score:
                    best_score, best_state = score, copy.deepcopy(model.state_dict())
                    self.best_epoch_ = epoch
            self.history_.append(record)
            if self.verbose:
                log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.5g}" for k, v in record.items() if k != "epoch"))
            if on_epoch_end is not None:
                on_epoch_end(record, self)
        if best_state is not None:
            model.load_state_dict(best_state)
            self.best_score_ = best_score
        model.eval()
        return self

    # -- inference -----------------------------------------------------
    def predict_proba(self, X, batch_size: int | None = None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_inputs(X, rows=self.config_.rows, cols=self.config_.cols)
        bs = batch_size or max(self.batch_size, 8)
        self.model_.eval()
        out = []
        with torch.no_grad():
            for lo in range(0, len(X), bs):
                out.append(self.model_(torch.from_numpy(X[lo:lo + bs])).numpy())
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return metrics.binarize(self.predict_proba(X), self.threshold).astype(np.float32)

    def score(self, X, y) -> float:
        """Strict 1-hour ETS."""
        return strict_ets_1h(self.predict_proba(X), np.asarray(y), self.threshold)

    @classmethod
    def from_model(cls, model: DeepLight, **params) -> "DeepLightForecaster":
        """Wrap an already-built network (e.g. loaded from a checkpoint)."""
        cfg = model.config
        est = cls(horizon=cfg.h, branch_channels=cfg.branch_channels, hidden_channels=cfg.hidden_channels,
                  stem_channels=cfg.stem_channels, cstem_stages=cfg.cstem_stages, kernel_sizes=cfg.kernel_sizes,
                  use_lightning=cfg.use_lightning, use_radar=cfg.use_radar, use_cloud=cfg.use_cloud, **params)
        est.model_ = model.eval()
        est.config_ = cfg
        est.loss_fn_ = DeepLightLoss(est.loss_config())
        est.history_ = []
        return est
