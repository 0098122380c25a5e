"""scikit-learn style front ends for the model, the voter and the re-ranker."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .ensemble import RerankRuleSet, reliability_table, rerank, weighted_vote
from .model import MoeConfig
from .taxonomy import EMOTIONS, N_CLASSES
from .training import TrainConfig, model_predictions, train_supervised, two_stage_train
from .validation import check_bundle, check_prediction_sets, check_targets, check_truth


class MoEClassifier(ClassifierMixin, BaseEstimator):
    """Routed mixture-of-experts emotion classifier.

    ``X`` is an :class:`~moe_affect.data.EmbeddingBundle`; ``y`` defaults to
    the bundle's own labels. Passing ``pretrain`` (a pseudo-labeled bundle)
    to :meth:`fit` runs pretraining followed by fine-tuning at a tenth of the
    learning rate.
    """

    def __init__(self, d_model=32, n_heads=4, fused_head="concat_linear", rank=4, positional_encoding=False,
                 lr=1e-3, lr_end=1e-4, weight_decay=0.01, batch_size=256, epochs=10, loss="ce",
                 focal_gamma=2.0, class_weights=None, random_state=42):
        self.d_model = d_model
        self.n_heads = n_heads
        self.fused_head = fused_head
        self.rank = rank
        self.positional_encoding = positional_encoding
        self.lr = lr
        self.lr_end = lr_end
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.loss = loss
        self.focal_gamma = focal_gamma
        self.class_weights = class_weights
        self.random_state = random_state

    def _configs(self, branches):
        moe = MoeConfig(list(branches), d_model=self.d_model, n_heads=self.n_heads, fused_head=self.fused_head,
                        rank=self.rank, positional_encoding=self.positional_encoding)
        train = TrainConfig(lr0=self.lr, lr_end=self.lr_end, weight_decay=self.weight_decay,
                            batch_size=self.batch_size, epochs=self.epochs, loss=self.loss,
                            focal_gamma=self.focal_gamma, class_weights=self.class_weights,
                            seed=self.random_state)
        return moe, train

    def fit(self, X, y=None, pretrain=None, eval_set=None):
        check_bundle(X)
        if y is not None:
            targets = check_targets(y, len(X))
            X = X.with_labels({sid: EMOTIONS[t] for sid, t in zip(X.ids, targets)})
        check_bundle(X, labeled=True)
        moe_cfg, train_cfg = self._configs(X.branches)
        if pretrain is not None:
            check_bundle(pretrain, branches=X.branches)
            self.model_, self.train_log_ = two_stage_train(pretrain, X, train_cfg, moe_cfg, val_bundle=eval_set)
        else:
            self.model_, self.train_log_ = train_supervised(X, train_cfg, moe_cfg, val_bundle=eval_set)
        self.branches_ = tuple(X.branches)
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = sum(b.dim for b in X.branches)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        check_bundle(X, branches=self.branches_)
        return model_predictions(self.model_, X).probs

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def predict_set(self, X):
        check_is_fitted(self, "model_")
        check_bundle(X, branches=self.branches_)
        return model_predictions(self.model_, X)

    def score(self, X, y=None, sample_weight=None):
        if y is None:
            y = X.label_indices()
        return super().score(X, check_targets(y, len(X)), sample_weight)

    def route(self, X):
        """Router weights (n, M+1); the last column is the fused expert."""
        check_is_fitted(self, "model_")
        check_bundle(X, branches=self.branches_)
        return self.model_.forward(X.data).weights

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        return tags


class ReliabilityVoter(BaseEstimator):
    """Reliability-weighted vote across experts.

    :meth:`fit` measures each expert's accuracy on held-out predictions;
    :meth:`vote` combines new predictions from the same experts.
    """

    def __init__(self, mode="mass"):
        self.mode = mode

    def fit(self, X, y):
        experts = check_prediction_sets(X)
        truth = check_truth(y, next(iter(experts.values())).ids)
        self.reliabilities_ = reliability_table(experts, truth)
        return self

    def vote(self, X):
        check_is_fitted(self, "reliabilities_")
        experts = check_prediction_sets(X)
        missing = [name for name in experts if name not in self.reliabilities_.entries]
        if missing:
            raise KeyError(f"no reliability for experts {missing}")
        return weighted_vote([(ps, self.reliabilities_.entries[name]) for name, ps in experts.items()], self.mode)

    def predict_proba(self, X):
        return self.vote(X)[0].probs

    def predict(self, X):
        return self.vote(X)[0].labels


class NeutralReranker(BaseEstimator):
    """Rule-based correction of neutral-topped votes (stateless; ``fit`` is a no-op)."""

    def __init__(self, tau=0.25, rules=(1, 2, 3)):
        self.tau = tau
        self.rules = rules

    def fit(self, X=None, y=None):
        return self

    def transform(self, vote, vlm_labels=None):
        """Returns ``(PredictionSet, changes)`` for a VoteMass."""
        ps, changes = rerank(vote, vlm_labels, RerankRuleSet(self.tau, tuple(self.rules)))
        self.changes_ = changes
        return ps, changes

    def predict(self, vote, vlm_labels=None):
        ps, _ = self.transform(vote, vlm_labels)
        return ps.labels


__all__ = ["MoEClassifier", "NeutralReranker", "ReliabilityVoter"]
