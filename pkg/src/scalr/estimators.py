"""scikit-learn style wrappers around the memory layer and the similarity aligner."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_consistent_length

from .gcm import (
    GcmConfig,
    GcmState,
    apply_gradient,
    gated_residual,
    gcm_apply,
    init_gcm,
    inner_loss,
    local_update,
    predict_lr,
    project_qkv,
)
from .geometry import umeyama, weighted_rms

__all__ = ["GlobalContextMemory", "UmeyamaAligner"]


class GlobalContextMemory(TransformerMixin, BaseEstimator):
    """Fast-weight memory fitted by one test-time gradient step.

    ``fit`` sums the inner-loop gradients of all token blocks (one block per
    distinct value of ``groups``, folded in ascending group order) and applies
    a single update. ``transform`` reads the updated memory with each token's
    query and returns the gated residual ``alpha * memory(x) + x``.
    """

    def __init__(self, n_heads=1, expansion=4, base_lr=1e-3, gate_init=0.1, seed=0):
        self.n_heads = n_heads
        self.expansion = expansion
        self.base_lr = base_lr
        self.gate_init = gate_init
        self.seed = seed

    def fit(self, X, y=None, groups=None):
        X = check_array(X, dtype=np.float64)
        config = GcmConfig(
            X.shape[1], self.n_heads, self.expansion, self.base_lr, self.gate_init, self.seed
        )
        weights, proj = init_gcm(config)
        self.initial_state_ = GcmState(config, weights, proj)
        if groups is None:
            blocks = [X]
        else:
            groups = np.asarray(groups)
            check_consistent_length(X, groups)
            blocks = [X[groups == g] for g in np.unique(groups)]
        total = None
        for block in blocks:
            g = local_update(self.initial_state_, block)[1]
            total = g if total is None else total + g
        self.gradient_ = total
        self.weights_ = apply_gradient(weights, total)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        state = self.initial_state_
        q, _, _ = project_qkv(state.projections, X, state.config.n_heads)
        out = gcm_apply(self.weights_, q, state.projections.wo)
        return gated_residual(out, X, state.projections.alpha)

    def inner_loss(self, X, fitted=True):
        """Dot-product inner loss of ``X`` under the updated (or initial) memory."""
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        state = self.initial_state_
        _, k, v = project_qkv(state.projections, X, state.config.n_heads)
        eta = predict_lr(state.projections, X, state.config.base_lr)
        return inner_loss(self.weights_ if fitted else state.weights, k, v, eta)

    def score(self, X, y=None):
        return -self.inner_loss(X)


class UmeyamaAligner(TransformerMixin, BaseEstimator):
    """Least-squares similarity (or rigid) transform mapping ``X`` onto ``y``."""

    def __init__(self, with_scale=True):
        self.with_scale = with_scale

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        check_consistent_length(X, y)
        if sample_weight is not None:
            sample_weight = np.asarray(sample_weight, dtype=np.float64)
            check_consistent_length(X, sample_weight)
        self.transform_ = umeyama(X, y, sample_weight, with_scale=self.with_scale)
        self.scale_ = self.transform_.s
        self.rotation_ = self.transform_.r
        self.translation_ = self.transform_.t
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.apply(check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y, sample_weight=None):
        """Negative weighted RMS residual."""
        check_is_fitted(self, "transform_")
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        return -weighted_rms(self.transform_, X, y, sample_weight)
