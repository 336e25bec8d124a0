import numpy as np
import pytest
from sklearn.base import clone

from flagcns.estimators import FederatedArchitectureSearch, FederatedGCNClassifier, check_shards
from flagcns.synthetic import client_sbm_task

from _util import tiny_graph, tiny_shards


@pytest.fixture(scope="module")
def shards():
    return client_sbm_task(1, nodes_per_client=60)


def test_get_params_and_clone():
    est = FederatedArchitectureSearch(population=8, seed=3)
    p = est.get_params()
    assert p["population"] == 8 and p["seed"] == 3
    assert clone(est).get_params() == p


def test_check_shards_validation():
    assert len(check_shards(tiny_graph())) == 1
    bad = tiny_shards(0, clients=2)
    bad[1] = tiny_shards(1, clients=1, f=7)[0]
    with pytest.raises(ValueError):
        check_shards(bad)
    with pytest.raises(ValueError):
        check_shards([])


def test_search_estimator_fit(shards):
    est = FederatedArchitectureSearch(population=4, layers=2, hidden=4, generations=1, weight_steps=1,
                                      retrain_epochs=2).fit(shards)
    assert est.best_code_.layers == 2
    assert est.transform()[0] in [c["code"] for c in est.report_.candidates]
    assert 0 <= est.score() <= 1


def test_classifier_fit_predict_score(shards):
    clf = FederatedGCNClassifier(code="gcn2", hidden=8, epochs=40).fit(shards)
    pred = clf.predict(shards[0])
    assert pred.shape == (shards[0].bundle.num_nodes,)
    assert set(np.unique(pred)) <= set(clf.classes_)
    assert clf.score(shards) == pytest.approx(clf.report_.flacc, abs=1e-12)
