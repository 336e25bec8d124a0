"""scikit-learn style wrappers around the federated search and training runs.

The estimators take a list of :class:`~flagcns.graph.GraphShard` (one per
client) as ``X``; labels live inside the shards, so ``y`` is ignored.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import supernet as N
from .graph import GraphBundle, GraphShard
from .run import RunConfig, RunReport, Session, cmd_search, resolve_code, run_train
from .space import ArchCode


def check_shards(X) -> list[GraphShard]:
    """Validate a client list: nonempty, consecutive ids, shared feature width and class count."""
    if isinstance(X, (GraphShard, GraphBundle)):
        X = [X]
    shards = [x if isinstance(x, GraphShard) else GraphShard(i, x, np.arange(x.num_nodes)) for i, x in enumerate(X)]
    if not shards:
        raise ValueError("need at least one client shard")
    if [s.client_id for s in shards] != list(range(len(shards))):
        raise ValueError("client ids must be 0..N-1 in order")
    widths = {s.bundle.num_features for s in shards}
    classes = {s.bundle.num_classes for s in shards}
    if len(widths) != 1 or len(classes) != 1:
        raise ValueError("clients disagree on feature width or class count")
    if not any(len(s.bundle.splits["train"]) for s in shards):
        raise ValueError("no client has training nodes")
    return shards


def _config(est, n_clients) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    params = {k: v for k, v in est.get_params().items() if k in fields}
    return RunConfig(dataset="<in-memory>", clients=n_clients, **params).validate()


class FederatedArchitectureSearch(BaseEstimator):
    """Runs the evolutionary SuperNet search; ``best_code_`` holds the winner."""

    def __init__(self, population=60, layers=6, hidden=64, generations=250, weight_steps=5, gamma0=0.5,
                 gamma_decay=0.99, lr=0.01, cipher="mask", seed=0, quota_mode="full", retrain_epochs=200,
                 retrain_lr=0.5, weight_decay=5e-4, timing=False):
        self.population = population
        self.layers = layers
        self.hidden = hidden
        self.generations = generations
        self.weight_steps = weight_steps
        self.gamma0 = gamma0
        self.gamma_decay = gamma_decay
        self.lr = lr
        self.cipher = cipher
        self.seed = seed
        self.quota_mode = quota_mode
        self.retrain_epochs = retrain_epochs
        self.retrain_lr = retrain_lr
        self.weight_decay = weight_decay
        self.timing = timing

    def fit(self, X, y=None):
        shards = check_shards(X)
        self.config_ = _config(self, len(shards))
        self.report_: RunReport = cmd_search(self.config_, data=shards)
        self.best_code_ = ArchCode.from_genes(self.report_.best_code, self.layers)
        return self

    def transform(self, X=None):
        """The final population's codes, best first, as gene lists."""
        check_is_fitted(self, "report_")
        cands = sorted(self.report_.candidates, key=lambda c: c["supernet_fll"])
        return [c["code"] for c in cands]

    def score(self, X=None, y=None) -> float:
        check_is_fitted(self, "report_")
        return self.report_.flacc


class FederatedGCNClassifier(ClassifierMixin, BaseEstimator):
    """Federated full-batch training of one fixed architecture."""

    def __init__(self, code="gcn2", layers=6, hidden=64, epochs=200, retrain_lr=0.5, weight_decay=5e-4,
                 cipher="mask", seed=0):
        self.code = code
        self.layers = layers
        self.hidden = hidden
        self.epochs = epochs
        self.retrain_lr = retrain_lr
        self.weight_decay = weight_decay
        self.cipher = cipher
        self.seed = seed

    def fit(self, X, y=None):
        shards = check_shards(X)
        cfg = _config(self, len(shards))
        code, space = (self.code, cfg.space()) if isinstance(self.code, ArchCode) else resolve_code(self.code, cfg)
        session = Session(cfg, shards, space=space)
        try:
            self.report_ = run_train(session, code, self.epochs)
            # any replica works: every client holds identical weights after each broadcast
            self.weights_ = session.hub.workers[0].weights.copy()
        finally:
            session.close()
        self.code_, self.space_ = code, space
        self.classes_ = np.arange(shards[0].bundle.num_classes)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        g = X.bundle if isinstance(X, GraphShard) else X
        return N.forward(self.weights_, self.code_, g)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)

    def score(self, X, y=None) -> float:
        """Test accuracy weighted by client test sizes (the federated accuracy)."""
        shards = check_shards(X)
        accs, sizes = [], []
        for s in shards:
            idx = s.bundle.splits["test"]
            if len(idx):
                accs.append(float(np.mean(self.predict(s)[idx] == s.bundle.labels[idx])))
                sizes.append(len(idx))
        return float(np.dot(accs, sizes) / sum(sizes))
