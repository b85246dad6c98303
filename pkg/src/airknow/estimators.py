"""Scikit-learn style estimators over the functional core.

``TripletConfidenceClassifier`` is the arbiter proxy as a binary classifier:
fit on matching-evidence vectors with expert labels, predict_proba returns
the MC-dropout clean probability. ``ComposedRetriever`` trains the embedding
heads on stacked triplets and transforms queries into the shared retrieval
space. Both follow the usual conventions (constructor stores params
verbatim, fitted state in trailing-underscore attributes, get_params/
set_params inherited).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import dsr, eki
from .errors import ConfigError
from .rng import RngState, STREAM_DSR, STREAM_EKI
from .validation import (check_binary_labels, check_matrix, check_triplet_width,
                         check_unit_rows)
from .world import Dataset, Triplet


class TripletConfidenceClassifier(BaseEstimator, ClassifierMixin):
    """MC-dropout MLP scoring the probability that a pair truly corresponds.

    Class 1 is "clean"; ``predict_proba(X)[:, 1]`` is the confidence used as
    a gating signal downstream.
    """

    def __init__(self, hidden_layers=(512, 256), dropout=0.1, l2=1e-4,
                 learning_rate=5e-4, epochs=2, batch_size=256, mc_passes=16,
                 class_weight="balanced", optimizer="adam", random_state=0):
        self.hidden_layers = hidden_layers
        self.dropout = dropout
        self.l2 = l2
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.mc_passes = mc_passes
        self.class_weight = class_weight
        self.optimizer = optimizer
        self.random_state = random_state

    def _hyper(self) -> eki.EkiHyper:
        return eki.EkiHyper(
            dropout=self.dropout, l2=self.l2, class_weight=self.class_weight,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, mc_passes=self.mc_passes,
            hidden=tuple(self.hidden_layers), optimizer=self.optimizer,
        )

    def fit(self, X, y):
        X = check_matrix(X, "X")
        y = check_binary_labels(y, X.shape[0])
        self.mlp_, self.loss_curve_ = eki.fit_confidence_mlp(
            X, y, self._hyper(), seed=self.random_state)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "mlp_"):
            raise NotFittedError("fit the classifier before predicting")

    def predict_proba(self, X):
        self._check_fitted()
        X = check_matrix(X, "X", n_cols=self.n_features_in_)
        c = eki.infer_confidence_batch(
            self.mlp_, X, T=self.mc_passes, p=self.dropout,
            rng=RngState(self.random_state, STREAM_EKI).derive(90),
        )
        return np.column_stack([1.0 - c, c])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)


class ComposedRetriever(BaseEstimator):
    """Trainable composed-retrieval heads with confidence-gated robust losses.

    ``fit`` takes hstacked (reference | modification | target) rows, all
    unit-norm. ``transform`` embeds hstacked (reference | modification)
    queries; ``encode_gallery`` embeds candidate targets.
    """

    def __init__(self, confidence_model=None, temperature=0.07, margin=0.7,
                 tradeoff=0.5, learning_rate=0.05, epochs=10, batch_size=256,
                 loss_mode="airknow", align_stream=True, recon_stream=True,
                 gdv_variant="full", head_init="random", modality_map=None,
                 random_state=0):
        self.confidence_model = confidence_model
        self.temperature = temperature
        self.margin = margin
        self.tradeoff = tradeoff
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss_mode = loss_mode
        self.align_stream = align_stream
        self.recon_stream = recon_stream
        self.gdv_variant = gdv_variant
        self.head_init = head_init
        self.modality_map = modality_map
        self.random_state = random_state

    def fit(self, X, y=None):
        d = check_triplet_width(X, "X")
        X = check_matrix(X, "X")
        Zr = check_unit_rows(X[:, :d], "reference rows")
        Zm = check_unit_rows(X[:, d:2 * d], "modification rows")
        Zt = check_unit_rows(X[:, 2 * d:], "target rows")
        triplets = [Triplet(f"x{i:06d}", Zr[i], Zm[i], Zt[i])
                    for i in range(Zr.shape[0])]
        dataset = Dataset(triplets, dim=d)

        proxy = None
        mc_passes, mc_dropout = 16, 0.1
        if self.loss_mode == "airknow":
            model = self.confidence_model
            if model is None:
                raise ConfigError("airknow mode needs a fitted confidence model")
            if not hasattr(model, "mlp_"):
                raise NotFittedError("confidence_model must be fitted first")
            proxy = model.mlp_
            mc_passes, mc_dropout = model.mc_passes, model.dropout

        eki_hyper = eki.EkiHyper(dropout=mc_dropout, mc_passes=mc_passes,
                                 gdv_variant=self.gdv_variant)
        hyper = dsr.DsrHyper(
            temperature=self.temperature, margin=self.margin,
            tradeoff=self.tradeoff, learning_rate=self.learning_rate,
            epochs=self.epochs, batch_size=self.batch_size,
            align_enabled=self.align_stream, recon_enabled=self.recon_stream,
            loss_mode=self.loss_mode,
        )
        heads0 = dsr.init_heads(d, self.head_init, self.modality_map,
                                rng=RngState(self.random_state, STREAM_DSR))
        self.heads_, self.report_ = dsr.train_stage2(
            dataset, proxy, eki_hyper, heads0, hyper, seed=self.random_state)
        self.n_features_in_ = 3 * d
        self.dim_ = d
        return self

    def _check_fitted(self):
        if not hasattr(self, "heads_"):
            raise NotFittedError("fit the retriever before transforming")

    def transform(self, X):
        """Embed hstacked (reference | modification) rows as unit queries."""
        self._check_fitted()
        X = check_matrix(X, "X", n_cols=2 * self.dim_)
        Zq, _ = dsr.compose_query_batch(
            self.heads_, X[:, :self.dim_], X[:, self.dim_:])
        return Zq

    def encode_gallery(self, Zt):
        """Embed candidate targets into the shared retrieval space."""
        self._check_fitted()
        Zt = check_matrix(Zt, "Zt", n_cols=self.dim_)
        out, _ = dsr.project_targets_batch(self.heads_, Zt)
        return out
