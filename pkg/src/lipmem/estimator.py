"""scikit-learn style façade over the training pipeline.

``fit`` takes a :class:`~lipmem.synthworld.Dataset`. ``transform`` maps audio
windows to key addresses. ``predict`` maps packed inference inputs
(audio, reference frame, pose prior) to generated frame windows.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import models
from .memory import key_address
from .synthworld import N_FRAMES, Dataset
from .training import (Batch, TrainConfig, TrainState, infer_key, new_state, pretrain_sync,
                       toy_lmd, train_main)


def pack_inputs(dataset: Dataset) -> np.ndarray:
    """Row-wise [audio | reference | pose prior] matrix accepted by ``predict``."""
    n = len(dataset)
    return np.hstack([dataset.audio, dataset.references, dataset.pose_priors.reshape(n, -1)])


class AudioLipMemory(BaseEstimator, TransformerMixin):
    """Audio-to-lip generator with a paired key/value slot memory."""

    def __init__(self, n_slots=16, n_channels=32, kappa=16.0, hidden=64, sync_steps=2000,
                 main_steps=5000, batch_size=32, lr=1e-4, disc_lr=5e-4, seed=17):
        self.n_slots = n_slots
        self.n_channels = n_channels
        self.kappa = kappa
        self.hidden = hidden
        self.sync_steps = sync_steps
        self.main_steps = main_steps
        self.batch_size = batch_size
        self.lr = lr
        self.disc_lr = disc_lr
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise TypeError("fit expects a synthworld.Dataset")
        state = new_state(self._config(), X)
        pretrain_sync(state, X)
        train_main(state, X)
        self._set_state(state)
        return self

    @classmethod
    def from_state(cls, state: TrainState) -> "AudioLipMemory":
        c = state.config
        est = cls(c.n_slots, c.n_channels, c.kappa, c.hidden, c.sync_steps, c.main_steps,
                  c.batch_size, c.lr, c.disc_lr, c.seed)
        est._set_state(state)
        return est

    def _set_state(self, state: TrainState) -> None:
        self.state_ = state
        self.n_features_in_ = state.nets.d_aud
        self.frame_dim_ = state.nets.frame_dim

    def transform(self, X) -> np.ndarray:
        """Key address for each audio window, shape (n, n_slots)."""
        check_is_fitted(self, "state_")
        X = check_array(X.audio if isinstance(X, Dataset) else X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} audio features, got {X.shape[1]}")
        f_aud = models.audio_encode(self.state_.nets, self.state_.gen.frozen(), X)
        return key_address(self.state_.bank, f_aud).value

    def _unpack(self, X) -> Batch:
        check_is_fitted(self, "state_")
        X = check_array(pack_inputs(X) if isinstance(X, Dataset) else X, dtype=np.float64)
        d, F = self.n_features_in_, self.frame_dim_
        if X.shape[1] != d + F + N_FRAMES * F:
            raise ValueError(f"expected {d + F + N_FRAMES * F} packed features, got {X.shape[1]}")
        return Batch(X[:, :d], np.zeros((len(X), N_FRAMES * F)), X[:, d:d + F], X[:, d + F:])

    def predict(self, X) -> np.ndarray:
        """Generated (n, 5*F) frame windows from key-address recall only."""
        batch = self._unpack(X)
        out, _ = infer_key(self.state_, batch)
        return out

    def score(self, X: Dataset, y=None) -> float:
        """Negative toy-LMD of key-recall generations against the ground truth."""
        if not isinstance(X, Dataset):
            raise TypeError("score expects a synthworld.Dataset")
        return -toy_lmd(self.predict(X), X.lips.reshape(len(X), -1))
