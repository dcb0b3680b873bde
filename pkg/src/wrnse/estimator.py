"""scikit-learn style wrappers around the feature front end and the network."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import frontend, metrics, reconstruct, trainer
from .audio import SAMPLE_RATE, Waveform, write_waveform
from .model import WrnConfig


def check_waveform(x, name="waveform"):
    """Coerce one signal to a :class:`Waveform`, rejecting bad input early."""
    if isinstance(x, Waveform):
        if x.sample_rate != SAMPLE_RATE:
            raise ValueError(f"{name}: expected {SAMPLE_RATE} Hz, got {x.sample_rate}")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected a 1-D signal, got shape {arr.shape}")
    if arr.shape[0] < frontend.min_samples():
        raise ValueError(f"{name}: {arr.shape[0]} samples, need at least {frontend.min_samples()}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return Waveform(arr, SAMPLE_RATE)


def check_waveforms(X, name="X"):
    """Sequence of signals -> list of :class:`Waveform`; a single 1-D array is one item."""
    if isinstance(X, Waveform) or (isinstance(X, np.ndarray) and X.ndim == 1):
        X = [X]
    items = [check_waveform(x, f"{name}[{i}]") for i, x in enumerate(X)]
    if not items:
        raise ValueError(f"{name} is empty")
    return items


def check_is_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Waveforms -> per-utterance ``(T, 1900)`` feature matrices.

    Parameters
    ----------
    normalize : bool
        Apply per-utterance z-score normalization per channel.
    """

    def __init__(self, normalize=True):
        self.normalize = normalize

    def fit(self, X, y=None):
        check_waveforms(X)
        self.n_features_out_ = frontend.build_layout()[-1].offset + frontend.build_layout()[-1].dim
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        return [frontend.extract_features(w, self.normalize).frames for w in check_waveforms(X)]


class WRNEnhancer(BaseEstimator):
    """Trainable enhancer mapping noisy waveforms to enhanced waveforms.

    Parameters
    ----------
    base_widths, widen_factor, blocks_per_wrb
        Network shape.
    max_steps, batch_size, block_len, lr, weight_decay
        Optimization settings.
    time_scale : bool
        Random 0.9-1.1 time stretching of training blocks.
    random_state : int
        Seed for initialization and batch sampling.

    ``fit(X, y)`` takes noisy signals ``X`` and the matching clean ``y``.
    """

    def __init__(self, base_widths=(16, 32, 64, 128), widen_factor=2, blocks_per_wrb=2, max_steps=100,
                 batch_size=8, block_len=200, lr=1e-3, weight_decay=1e-5, time_scale=True, random_state=0):
        self.base_widths = base_widths
        self.widen_factor = widen_factor
        self.blocks_per_wrb = blocks_per_wrb
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.block_len = block_len
        self.lr = lr
        self.weight_decay = weight_decay
        self.time_scale = time_scale
        self.random_state = random_state

    def _model_config(self):
        return WrnConfig(base_widths=tuple(self.base_widths), widen_factor=self.widen_factor,
                         blocks_per_wrb=self.blocks_per_wrb)

    def fit(self, X, y, first_taps=None):
        """Train on aligned pairs; ``first_taps`` gives each pair's RIR delay in samples."""
        noisy = check_waveforms(X, "X")
        clean = check_waveforms(y, "y")
        if len(noisy) != len(clean):
            raise ValueError(f"X has {len(noisy)} items but y has {len(clean)}")
        taps = [0] * len(noisy) if first_taps is None else [int(t) for t in first_taps]
        cfg = trainer.TrainConfig(block_len=self.block_len, batch_size=self.batch_size, lr=self.lr,
                                  weight_decay=self.weight_decay, max_steps=self.max_steps,
                                  seed=self.random_state, time_scale=self.time_scale,
                                  checkpoint_every=max(1, self.max_steps))
        with tempfile.TemporaryDirectory() as tmp:
            records = []
            for i, (n, c, t) in enumerate(zip(noisy, clean, taps)):
                cp, np_ = Path(tmp) / f"c{i}.wav", Path(tmp) / f"n{i}.wav"
                write_waveform(cp, c, float32=True)
                write_waveform(np_, n, float32=True)
                records.append({"id": f"item{i}", "clean": str(cp), "noisy": str(np_), "first_tap": t})
            result = trainer.train(records, cfg, self._model_config())
        self.model_ = result.model
        self.loss_curve_ = result.losses
        self.n_steps_ = result.step
        return self

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained :class:`WRN` (e.g. from a checkpoint)."""
        cfg = model.config
        est = cls(base_widths=cfg.base_widths, widen_factor=cfg.widen_factor, blocks_per_wrb=cfg.blocks_per_wrb)
        est.model_ = model.eval()
        est.loss_curve_, est.n_steps_ = [], 0
        return est

    def predict_magnitude(self, X):
        check_is_fitted(self, "model_")
        return [self.model_(frontend.extract_features(w).frames).data[0] for w in check_waveforms(X)]

    def predict(self, X):
        """Enhanced signals, each padded or trimmed to its input length."""
        check_is_fitted(self, "model_")
        out = []
        for w in check_waveforms(X):
            enh = reconstruct.enhance_waveform(w, self.model_).samples
            n = w.samples.shape[0]
            out.append(np.pad(enh, (0, max(0, n - enh.shape[0])))[:n])
        return out

    transform = predict

    def score(self, X, y):
        """Mean FWsegSNR (dB) of the enhanced signals against ``y``."""
        pred = self.predict(X)
        return float(np.mean([metrics.fwsegsnr(c, p) for c, p in zip(check_waveforms(y, "y"), pred)]))


__all__ = ["FeatureExtractor", "WRNEnhancer", "check_waveform", "check_waveforms", "check_is_fitted"]
