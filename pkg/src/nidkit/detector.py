"""Single-center anomaly scoring on frozen encoder representations.

With one cluster, Lloyd's algorithm converges in a single step to the
arithmetic mean of the representations, so the center is computed in closed
form. The anomaly score of a test sample is its Euclidean distance to that
center; larger means more attack-like.
"""

from __future__ import annotations

import csv
from typing import Optional

import numpy as np

from . import nn, tensor as T
from .data import DataError
from .tensor import Tensor


class StateError(RuntimeError):
    """Detector used before fit."""


class Detector:
    """Frozen encoder + cluster center; immutable once fitted."""

    def __init__(self, encoder: nn.Module, subset_columns: Optional[list] = None):
        self.encoder = encoder
        self.subset_columns = subset_columns
        self.center: Optional[np.ndarray] = None

    # -- representation plumbing --------------------------------------------

    def _represent(self, batch: np.ndarray) -> np.ndarray:
        """Encoder output rows; subsets runs mean-aggregate the per-subset
        representations of each sample."""
        with T.no_grad():
            if self.subset_columns is None:
                return self.encoder(Tensor(batch)).values
            parts = [self.encoder(Tensor(batch[:, cols])).values
                     for cols in self.subset_columns]
            return np.mean(parts, axis=0)

    def fit(self, features: np.ndarray, batch_size: int = 512) -> "Detector":
        features = np.asarray(getattr(features, "features", features))
        if features.shape[0] == 0:
            raise DataError("fit_center: empty training set")
        self.encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad = False
        total = None
        n = features.shape[0]
        for start in range(0, n, batch_size):
            reps = self._represent(features[start:start + batch_size])
            s = reps.sum(axis=0)
            total = s if total is None else total + s
        self.center = total / n
        return self

    def score(self, features: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Euclidean distance of each sample's representation to the center."""
        if self.center is None:
            raise StateError("detector is not fitted")
        features = np.asarray(getattr(features, "features", features))
        single = features.ndim == 1
        feats = np.atleast_2d(features)
        out = np.empty(feats.shape[0])
        for start in range(0, feats.shape[0], batch_size):
            reps = self._represent(feats[start:start + batch_size])
            out[start:start + batch_size] = np.linalg.norm(reps - self.center, axis=1)
        return float(out[0]) if single else out


def fit_center(encoder: nn.Module, train_features,
               subset_columns: Optional[list] = None,
               batch_size: int = 512) -> Detector:
    """Freeze the encoder and place the center at the mean representation of
    the (normal-only) training samples."""
    return Detector(encoder, subset_columns=subset_columns).fit(
        train_features, batch_size=batch_size)


def dump_scores(path, ids, scores, labels=None) -> None:
    """Score CSV: sample_id, score, label (label blank when unknown)."""
    ids = np.asarray(ids)
    scores = np.asarray(scores)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "score", "label"])
        for i in range(len(ids)):
            label = "" if labels is None else int(np.asarray(labels)[i])
            writer.writerow([ids[i], repr(float(scores[i])), label])
