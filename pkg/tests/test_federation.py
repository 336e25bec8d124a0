import numpy as np
import pytest

from flagcns import feo
from flagcns import supernet as N
from flagcns.cipher import AggregationWeights
from flagcns.federation import ClientWorker, Controller, flacc
from flagcns.space import SpaceConfig
from flagcns.wire import InprocHub, Message, ProtocolError, decode_frame, encode_frame

from _util import random_codes, tiny_shards

CFG = SpaceConfig(2, hidden=4)


def session(shards=None, scheme="mask", seed=0, lr=0.05, run_id="run"):
    shards = shards or tiny_shards(0)
    workers = [ClientWorker(s, run_id, i, len(shards), seed) for i, s in enumerate(shards)]
    hub = InprocHub(workers)
    ctrl = Controller(hub, run_id, CFG, seed=seed, scheme=scheme, lr=lr)
    ctrl.handshake()
    return ctrl, workers, hub, shards


def start(ctrl, pop, seed=3):
    ctrl.init_supernet(seed)
    ctrl.send_population(pop, "init")


def test_handshake_collects_sizes():
    ctrl, _, _, shards = session()
    assert ctrl.sizes["val"] == [len(s.bundle.splits["val"]) for s in shards]
    assert sum(ctrl.val_weights.coefficients) == pytest.approx(1.0)


def test_zero_weight_steps_leave_weights_unchanged():
    ctrl, workers, _, shards = session()
    pop = random_codes(CFG, 4)
    start(ctrl, pop)
    ctrl.weight_steps(pop, 0)
    init = N.build(CFG, shards[0].bundle.num_features, shards[0].bundle.num_classes, seed=3)
    for w in workers:
        np.testing.assert_array_equal(w.weights.theta, init.theta)


def test_replicas_identical_after_every_broadcast():
    ctrl, workers, _, _ = session()
    pop = random_codes(CFG, 5)
    start(ctrl, pop)
    for _ in range(3):
        ctrl.weight_steps(pop, 1)
        ref = workers[0].weights.theta
        assert all(np.array_equal(w.weights.theta, ref) for w in workers[1:])


def test_weight_steps_match_central_oracle():
    ctrl, workers, _, shards = session(scheme="plain")
    pop = random_codes(CFG, 3, 1)
    start(ctrl, pop)
    ctrl.weight_steps(pop, 5)
    w = N.build(CFG, shards[0].bundle.num_features, shards[0].bundle.num_classes, seed=3)
    tw = AggregationWeights.from_sizes([len(s.bundle.splits["train"]) for s in shards])
    for _ in range(5):
        w.theta -= 0.05 * sum(tw[i] * N.population_grad(w, pop, s) for i, s in enumerate(shards)) / len(pop)
    assert np.abs(workers[0].weights.theta - w.theta).max() < 5 * 3 * 2.0 ** -20


def test_federated_losses_match_weighted_mean():
    ctrl, workers, _, shards = session()
    pop = random_codes(CFG, 4, 2)
    start(ctrl, pop)
    got = ctrl.final_losses(pop)
    vw = ctrl.val_weights
    want = [sum(vw[i] * N.local_val_loss(workers[i].weights, c, s) for i, s in enumerate(shards)) for c in pop]
    np.testing.assert_allclose(got, want, atol=2.0 ** -19)


@pytest.mark.parametrize("mode", ["full", "controller-only", "client-only"])
def test_feo_round_population_size_and_composition(mode):
    ctrl, _, _, _ = session()
    pop = random_codes(CFG, 8, 4)
    start(ctrl, pop)
    schedule = feo.GammaSchedule()
    for t in range(1, 4):
        ctrl.weight_steps(pop, 1)
        pop, log = ctrl.feo_round(t, pop, schedule, mode)
        assert len(pop) == 8
        assert sum(log.composition.values()) == 8
        if mode == "controller-only":
            assert log.composition["controller"] == 8
        if mode == "client-only":
            assert log.composition["controller"] == 0


def test_transcript_is_deterministic():
    frames = []
    for _ in range(2):
        ctrl, _, hub, _ = session()
        pop = random_codes(CFG, 6)
        start(ctrl, pop)
        ctrl.weight_steps(pop, 2)
        ctrl.feo_round(1, pop, feo.GammaSchedule())
        frames.append(hub.transcript.to_bytes())
    assert frames[0] == frames[1]


def test_client_rejects_round_regression_and_foreign_run():
    shards = tiny_shards(0, clients=1)
    w = ClientWorker(shards[0], "run", 0, 1)
    w.start()
    w.handle_frame(encode_frame(Message("Shutdown", "run", -1, 5)))
    with pytest.raises(ProtocolError):
        w.handle_frame(encode_frame(Message("Shutdown", "run", -1, 5)))
    with pytest.raises(ProtocolError):
        w.handle_frame(encode_frame(Message("Shutdown", "other", -1, 9)))


def test_client_rejects_layout_mismatch():
    ctrl, workers, _, _ = session()
    ctrl.layout_hash = "0" * 64
    with pytest.raises(ProtocolError, match="layout"):
        ctrl.init_supernet(1)


def test_controller_rejects_spoofed_sender():
    ctrl, workers, hub, _ = session()
    hub.outbox[0].append(encode_frame(Message("LossReport", "run", 1, 99)))
    with pytest.raises(ProtocolError):
        ctrl.gather("LossReport")


def test_accuracy_report_and_flacc():
    ctrl, workers, _, shards = session()
    code = random_codes(CFG, 1)[0]
    ctrl.init_supernet(0, code=code, lr=0.1)
    ctrl.send_population([code], "init")
    ctrl.weight_steps([code], 3)
    res = ctrl.final_accuracy(code)
    want = [N.accuracy(w.weights, code, s) for w, s in zip(workers, shards)]
    assert res["client_accuracies"] == want
    assert res["flacc"] == pytest.approx(flacc(want, res["test_sizes"]), abs=1e-12)
    assert res["inference_seconds"] > 0


def test_standalone_mode_exchanges_only_code_blocks():
    ctrl, workers, hub, _ = session()
    code = random_codes(CFG, 1, 5)[0]
    ctrl.init_supernet(0, code=code)
    ctrl.send_population([code], "init")
    before = workers[0].weights.theta.copy()
    ctrl.weight_steps([code], 1)
    report = decode_frame(hub.transcript[-1].frame)
    assert report.ciphers[0].length == int(workers[0].weights.mask(code).sum())
    changed = workers[0].weights.theta != before
    assert not changed[~workers[0].weights.mask(code)].any()


def test_flacc_examples():
    assert flacc([0.8, 0.7], [1000, 1000]) == pytest.approx(0.75)
    assert flacc([0.6], [7]) == 0.6
    assert flacc([0.4, 0.4, 0.4], [1, 50, 9]) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        flacc([0.1], [1, 2])
