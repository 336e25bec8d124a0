"""Seeded synthetic graphs for tests, demos and the search benchmark."""

from __future__ import annotations

import numpy as np

from .graph import GraphBundle, GraphShard, make_bundle


def _sbm_edges(labels, p_in, p_out, rng) -> np.ndarray:
    n = len(labels)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    keep = rng.random(iu.size) < np.where(same, p_in, p_out)
    return np.stack([iu[keep], ju[keep]], axis=1)


def _splits(n, rng, train=0.3, val=0.2):
    order = rng.permutation(n)
    a, b = int(round(n * train)), int(round(n * (train + val)))
    return {"train": np.sort(order[:a]), "val": np.sort(order[a:b]), "test": np.sort(order[b:])}


def sbm_bundle(num_nodes=300, num_classes=4, num_features=16, p_in=0.05, p_out=0.005, signal=1.0,
               informative=None, seed=0, train=0.3, val=0.2) -> GraphBundle:
    """Stochastic block model whose classes shift the mean of some feature columns.

    ``informative`` lists the columns carrying class signal (default: all);
    every class gets a random +/-``signal`` offset on those columns, plus
    unit Gaussian noise everywhere.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(num_classes, size=num_nodes)
    cols = np.arange(num_features) if informative is None else np.asarray(informative)
    centers = np.zeros((num_classes, num_features))
    centers[:, cols] = signal * rng.choice([-1.0, 1.0], size=(num_classes, len(cols)))
    features = centers[labels] + rng.standard_normal((num_nodes, num_features))
    edges = _sbm_edges(labels, p_in, p_out, rng)
    return make_bundle(features, labels, edges, _splits(num_nodes, rng, train, val), num_classes)


def cora_like(seed=0, num_nodes=2708, num_classes=7, num_features=1433, words_per_node=18, topic_share=0.35,
              mean_degree=3.9, homophily=0.81, train_per_class=20, val=500, test=1000) -> GraphBundle:
    """Bag-of-words citation-style graph at the scale of the usual public benchmark.

    Each node draws ``words_per_node`` binary words, a ``topic_share`` of them
    from its class's vocabulary slice and the rest uniformly; edges follow an
    SBM tuned to ``mean_degree`` and the given fraction of same-class edges.
    Splits follow the public 20-per-class / 500 / 1000 layout.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(num_classes, size=num_nodes)
    vocab = np.array_split(rng.permutation(num_features), num_classes)
    features = np.zeros((num_nodes, num_features))
    for v in range(num_nodes):
        k = rng.binomial(words_per_node, topic_share)
        features[v, rng.choice(vocab[labels[v]], size=k, replace=False)] = 1.0
        features[v, rng.choice(num_features, size=words_per_node - k, replace=False)] = 1.0
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    same_pairs = (counts * (counts - 1) / 2).sum()
    diff_pairs = num_nodes * (num_nodes - 1) / 2 - same_pairs
    total_edges = mean_degree * num_nodes / 2
    p_in = homophily * total_edges / same_pairs
    p_out = (1 - homophily) * total_edges / diff_pairs
    edges = _sbm_edges(labels, p_in, p_out, rng)
    train = np.concatenate([rng.permutation(np.flatnonzero(labels == c))[:train_per_class]
                            for c in range(num_classes)])
    rest = rng.permutation(np.setdiff1d(np.arange(num_nodes), train))
    splits = {"train": np.sort(train), "val": np.sort(rest[:val]), "test": np.sort(rest[val:val + test])}
    return make_bundle(features, labels, edges, splits, num_classes)


# Per-client regimes for the three-client benchmark: the informative feature
# columns differ per client, and so does how much the graph helps.
CLIENT_REGIMES = (
    {"p_in": 0.06, "p_out": 0.004, "signal": 0.8},
    {"p_in": 0.03, "p_out": 0.012, "signal": 1.2},
    {"p_in": 0.08, "p_out": 0.002, "signal": 0.6},
)


def client_sbm_task(seed=0, num_clients=3, nodes_per_client=150, num_classes=4, num_features=12,
                    regimes=CLIENT_REGIMES) -> list[GraphShard]:
    """One SBM shard per client, each with its own informative feature columns."""
    if num_features < num_clients:
        raise ValueError("need at least one feature column per client")
    ss = np.random.SeedSequence([seed, 0x5B3])
    col_groups = np.array_split(np.arange(num_features), num_clients)
    shards, offset = [], 0
    for cid, child in enumerate(ss.spawn(num_clients)):
        regime = regimes[cid % len(regimes)]
        g = sbm_bundle(nodes_per_client, num_classes, num_features, informative=col_groups[cid],
                       seed=int(child.generate_state(1)[0]), **regime)
        shards.append(GraphShard(cid, g, np.arange(offset, offset + g.num_nodes)))
        offset += g.num_nodes
    return shards
