"""scikit-learn style wrapper: fit on stacked pairs, transform to fields."""

from __future__ import annotations

import tempfile

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import fields, metrics
from .losses import LossConfig
from .network import ArchitectureConfig, load_checkpoint
from .synthdata import ArrayCorpus
from .trainer import TrainConfig, train
from .validation import check_labels, check_pairs


class DAFFNetRegistration(TransformerMixin, BaseEstimator):
    """Learned deformable registration of ``(moving, fixed)`` volume pairs.

    ``X`` is ``(n, 2, D, H, W)`` with the moving image first; ``y`` (label
    pairs of the same shape) is required by the label-supervised variants.
    ``transform`` returns displacement fields ``(n, 3, D, H, W)`` and
    ``predict`` the warped moving images.
    """

    def __init__(
        self,
        variant: str = "DAFFNet",
        iterations: int = 300,
        learning_rate: float = 1e-4,
        lambda_seg: float = 0.5,
        lambda_fuse: float = 1.0,
        lambda_njd: float = 1e-5,
        seed: int = 0,
        output_dir: str | None = None,
    ):
        self.variant = variant
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.lambda_seg = lambda_seg
        self.lambda_fuse = lambda_fuse
        self.lambda_njd = lambda_njd
        self.seed = seed
        self.output_dir = output_dir

    def _config(self, out_dir: str) -> TrainConfig:
        return TrainConfig(
            architecture=ArchitectureConfig(variant=self.variant),
            loss=LossConfig(lambda_njd=self.lambda_njd, lambda_seg=self.lambda_seg, lambda_fuse=self.lambda_fuse),
            output_dir=out_dir,
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            seed=self.seed,
            checkpoint_interval=max(self.iterations, 1),
        )

    def fit(self, X, y=None):
        X = check_pairs(X)
        arch = ArchitectureConfig(variant=self.variant)
        if y is None and arch.uses_labels:
            raise ValueError(f"variant {self.variant} needs label pairs y")
        labels = check_labels(y, X, arch.num_classes) if y is not None and arch.uses_labels else None
        corpus = ArrayCorpus(X, labels)
        if self.output_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                self._fit_into(tmp, corpus)
        else:
            self._fit_into(self.output_dir, corpus)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.dims_ = tuple(X.shape[2:])
        return self

    def _fit_into(self, out_dir, corpus):
        result = train(self._config(str(out_dir)), corpus, resume=False)
        self.model_, *_ = load_checkpoint(result.checkpoint)
        self.history_ = result.history

    def _fields(self, X) -> list[torch.Tensor]:
        check_is_fitted(self, "model_")
        X = check_pairs(X)
        if tuple(X.shape[2:]) != self.dims_:
            raise ValueError(f"fitted on dims {self.dims_}, got {tuple(X.shape[2:])}")
        self.model_.eval()
        out = []
        dtype = torch.get_default_dtype()
        with torch.no_grad():
            for pair in X:
                m = torch.from_numpy(pair[0]).to(dtype)[None, None]
                f = torch.from_numpy(pair[1]).to(dtype)[None, None]
                out.append((m, self.model_(m, f, mode="infer").field))
        return out

    def transform(self, X) -> np.ndarray:
        return np.stack([u[0].numpy() for _, u in self._fields(X)])

    def predict(self, X) -> np.ndarray:
        return np.stack([fields.warp(m, u)[0, 0].numpy() for m, u in self._fields(X)])

    def score(self, X, y) -> float:
        """Mean foreground Dice (percent) between warped moving labels and fixed labels."""
        X = check_pairs(X)
        y = check_labels(y, X, ArchitectureConfig(variant=self.variant).num_classes)
        scores = []
        for (_, u), lab in zip(self._fields(X), y):
            lm = torch.from_numpy(lab[0]).to(u.dtype)[None, None]
            warped = fields.warp(lm, u, interp="nearest")[0, 0].numpy()
            scores.append(np.mean([metrics.dsc(warped, lab[1], k) for k in metrics.FOREGROUND]))
        return float(np.mean(scores))
