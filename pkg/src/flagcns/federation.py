"""Controller and client actors of the federated search protocol.

Both sides are sequential and exchange only framed :class:`~flagcns.wire.Message`
objects through a hub.  Clients hold their shard and a SuperNet replica;
the controller holds neither and sees losses and gradients only as cipher
vectors.  Each client report's mask nonce is the round id of the controller
frame that triggered it, which every client sees identically.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import cipher as C
from . import feo
from . import supernet as N
from .graph import GraphShard
from .space import ArchCode, SpaceConfig
from .tensor import sgd_step
from .wire import CONTROLLER, Message, ProtocolError, RoundTracker, decode_frame, encode_frame

logger = logging.getLogger(__name__)

TIMING_REPEATS = 30


def _codes_to_wire(codes: Sequence[ArchCode]) -> list:
    return [c.genes() for c in codes]


def _codes_from_wire(items, layers: int) -> list[ArchCode]:
    return [ArchCode.from_genes(g, layers) for g in items]


class ClientWorker:
    """One data owner.  ``handle_frame`` maps an incoming frame to reply frames."""

    def __init__(self, shard: GraphShard, run_id: str, client_id: int, num_clients: int, run_seed: int = 0,
                 mask_seed: int | None = None):
        self.shard = shard
        self.run_id = run_id
        self.client_id = client_id
        self.num_clients = num_clients
        self.run_seed = run_seed
        self.mask_seed = run_seed if mask_seed is None else mask_seed
        self.tracker = RoundTracker(run_id)
        self.round = 0
        self.done = False
        self.weights: N.SuperNetWeights | None = None
        self.population: list[ArchCode] = []
        self.local_population: list[ArchCode] = []
        self.steps_left = 0
        self.generation = 0
        self.quota = 0
        self.grad_evals = 0
        self.loss_evals = 0

    # --- framing ---

    def _msg(self, tag, body=None, ciphers=()) -> bytes:
        self.round += 1
        return encode_frame(Message(tag, self.run_id, self.client_id, self.round, body or {}, list(ciphers)))

    def start(self) -> list[bytes]:
        g = self.shard.bundle
        body = {
            "num_features": g.num_features,
            "num_classes": g.num_classes,
            "sizes": {k: int(len(v)) for k, v in g.splits.items()},
        }
        return [self._msg("Hello", body)]

    def handle_frame(self, frame: bytes) -> list[bytes]:
        msg = self.tracker.check(decode_frame(frame))
        if msg.sender != CONTROLLER:
            raise ProtocolError(f"client {self.client_id} got a frame from sender {msg.sender}")
        handler = getattr(self, f"_on_{msg.tag}", None)
        if handler is None:
            raise ProtocolError(f"client cannot handle {msg.tag}")
        return handler(msg)

    # --- evaluation helpers ---

    def _val_losses(self, codes, cache=None) -> np.ndarray:
        g = self.shard.bundle
        if not len(g.splits["val"]):
            return np.zeros(len(codes))
        out = []
        for code in codes:
            if cache is not None and code in cache:
                out.append(cache[code])
                continue
            loss = N.local_val_loss(self.weights, code, g)
            self.loss_evals += 1
            if cache is not None:
                cache[code] = loss
            out.append(loss)
        return np.asarray(out)

    def _encrypt(self, v, nonce, weight, clip=False):
        return C.encrypt(v, self.ctx, nonce=nonce, weight=weight, clip=clip)

    def _grad_report(self, nonce: int) -> bytes:
        g = self.shard.bundle
        if len(g.splits["train"]):
            grad = N.population_grad(self.weights, self.population, g, weight_decay=self.weight_decay)
            self.grad_evals += len(self.population)
        else:
            grad = np.zeros(self.weights.size)
        if self.active is not None:
            grad = grad[self.active]
        cv = self._encrypt(grad, nonce, self.train_weight / len(self.population), clip=True)
        return self._msg("GradientReport", {"layout_hash": self.weights.layout_hash}, [cv])

    # --- handlers ---

    def _on_InitSuperNet(self, msg):
        b = msg.body
        cfg = SpaceConfig(b["layers"], tuple(b["layer_types"]), b["hidden"])
        g = self.shard.bundle
        w = N.build(cfg, g.num_features, g.num_classes, seed=b["seed"])
        if w.layout_hash != b["layout_hash"]:
            raise ProtocolError("SuperNet layout hash differs from the controller's")
        self.cfg, self.weights = cfg, w
        self.lr = float(b["lr"])
        self.weight_decay = float(b.get("weight_decay", 0.0))
        # standalone training of one code only exchanges that code's blocks
        self.active = None
        if b["mode"] == "standalone":
            self.active = np.flatnonzero(w.mask(ArchCode.from_genes(b["code"], cfg.layers)))
        self.train_weight = float(b["train_weights"][self.client_id])
        self.val_weight = float(b["val_weights"][self.client_id])
        self.ctx = C.CipherContext(b["scheme"], self.num_clients, self.client_id, self.mask_seed,
                                   b["scale_bits"], b.get("clip", C.CLIP))
        return []

    def _on_PopulationBroadcast(self, msg):
        b = msg.body
        codes = _codes_from_wire(b["codes"], self.cfg.layers)
        phase = b["phase"]
        if phase == "init":
            self.population = list(codes)
            self.local_population = list(codes)
            return []
        if phase == "weights":
            self.population = list(codes)
            self.steps_left = int(b["steps"])
            return [self._grad_report(msg.round)] if self.steps_left > 0 else []
        if phase == "feo":
            return [self._elites_report(codes, msg.round)]
        raise ProtocolError(f"unknown population phase {phase!r}")

    def _on_GradientBroadcast(self, msg):
        if self.steps_left <= 0:
            raise ProtocolError("unexpected gradient broadcast")
        if msg.body.get("layout_hash") != self.weights.layout_hash:
            raise ProtocolError("gradient broadcast layout hash mismatch")
        (cv,) = msg.ciphers
        n = self.weights.size if self.active is None else self.active.size
        if cv.length != n:
            raise ProtocolError("gradient broadcast has the wrong length")
        if self.active is None:
            sgd_step([self.weights.theta], [C.decrypt(cv)], self.lr)
        else:
            self.weights.theta[self.active] -= self.lr * C.decrypt(cv)
        self.steps_left -= 1
        return [self._grad_report(msg.round)] if self.steps_left > 0 else []

    def _on_GammaBroadcast(self, msg):
        self.generation = int(msg.body["generation"])
        self.quota = int(msg.body["quotas"][self.client_id])
        self._cache = {}
        losses = self._val_losses(self.population, self._cache)
        return [self._msg("LossReport", {"generation": self.generation},
                          [self._encrypt(losses, msg.round, self.val_weight)])]

    def _elites_report(self, pop_fl, nonce):
        cache = self._cache
        fl_losses = self._val_losses(pop_fl, cache)
        elites = []
        if self.quota > 0:
            size = len(pop_fl)
            merged = self.local_population + list(pop_fl)
            merged_losses = self._val_losses(merged, cache)
            keep = feo.rank_by_loss(merged, merged_losses)[:size]
            local = [merged[i] for i in keep]
            rng = feo.party_rng(self.run_seed, self.client_id + 1, self.generation)
            local = feo.evolve(local, [merged_losses[i] for i in keep], self.cfg, rng)
            self.local_population = local
            local_losses = self._val_losses(local, cache)
            elites = [e.code for e in feo.client_elites(local, local_losses, self.quota, self.client_id)]
        body = {
            "generation": self.generation,
            "elites": _codes_to_wire(elites),
            "best_local_loss": float(fl_losses.min()) if len(self.shard.bundle.splits["val"]) else None,
        }
        return self._msg("ElitesReport", body, [self._encrypt(fl_losses, nonce, self.val_weight)])

    def _on_FinalEvalRequest(self, msg):
        b = msg.body
        codes = _codes_from_wire(b["codes"], self.cfg.layers)
        losses = self._val_losses(codes)
        body = {"kind": b["kind"]}
        if b["kind"] == "accuracy":
            (code,) = codes
            g = self.shard.bundle
            n_test = len(g.splits["test"])
            body["test_size"] = n_test
            body["accuracy"] = N.accuracy(self.weights, code, g, "test") if n_test else 0.0
            if b.get("timing", True):
                times = []
                for _ in range(TIMING_REPEATS):
                    t0 = time.perf_counter()
                    N.forward(self.weights, code, g)
                    times.append(time.perf_counter() - t0)
                body["inference_seconds"] = statistics.median(times)
        return [self._msg("FinalEvalReport", body, [self._encrypt(losses, msg.round, self.val_weight)])]

    def _on_Shutdown(self, msg):
        self.done = True
        return []


@dataclass
class GenerationLog:
    generation: int
    gamma: float
    best_fll: float
    mean_fll: float
    composition: dict
    client_best_loss: list = field(default_factory=list)
    population: list = field(default_factory=list)


class Controller:
    """Drives the protocol; never sees plaintext shards, weights or per-client losses."""

    def __init__(self, hub, run_id: str, cfg: SpaceConfig, seed: int = 0, scheme: str = "mask", lr: float = 0.01,
                 scale_bits: int = C.SCALE_BITS):
        self.hub = hub
        self.run_id = run_id
        self.cfg = cfg
        self.seed = seed
        self.scheme = scheme
        self.lr = lr
        self.scale_bits = scale_bits
        self.tracker = RoundTracker(run_id)
        self.round = 0
        self.num_clients = hub.num_clients
        self.layout_hash = None

    # --- messaging ---

    def broadcast(self, tag, body=None, ciphers=()) -> int:
        self.round += 1
        frame = encode_frame(Message(tag, self.run_id, CONTROLLER, self.round, body or {}, list(ciphers)))
        for cid in range(self.num_clients):
            self.hub.send(cid, frame)
        return self.round

    def gather(self, tag) -> list[Message]:
        out = []
        for cid in range(self.num_clients):
            msg = self.tracker.check(decode_frame(self.hub.recv(cid)))
            if msg.sender != cid:
                raise ProtocolError(f"frame on client {cid}'s channel claims sender {msg.sender}")
            if msg.tag != tag:
                raise ProtocolError(f"expected {tag} from client {cid}, got {msg.tag}")
            out.append(msg)
        return out

    # --- protocol phases ---

    def handshake(self):
        hellos = self.gather("Hello")
        feats = {m.body["num_features"] for m in hellos}
        classes = {m.body["num_classes"] for m in hellos}
        if len(feats) != 1 or len(classes) != 1:
            raise ProtocolError("clients disagree on feature width or class count")
        self.num_features, self.num_classes = feats.pop(), classes.pop()
        self.sizes = {k: [m.body["sizes"][k] for m in hellos] for k in ("train", "val", "test")}
        self.train_weights = C.AggregationWeights.from_sizes(self.sizes["train"])
        self.val_weights = C.AggregationWeights.from_sizes(self.sizes["val"])
        self.layout_hash = N.SuperNetWeights(self.cfg, self.num_features, self.num_classes).layout_hash
        return hellos

    def init_supernet(self, seed: int, code: ArchCode | None = None, lr: float | None = None,
                      weight_decay: float = 0.0):
        """Fresh weights on every client; with ``code`` only that code's blocks train."""
        body = {
            "mode": "supernet" if code is None else "standalone",
            "code": None if code is None else code.genes(),
            "seed": int(seed),
            "layout_hash": self.layout_hash,
            "layers": self.cfg.layers,
            "layer_types": list(self.cfg.layer_types),
            "hidden": self.cfg.hidden,
            "lr": self.lr if lr is None else float(lr),
            "weight_decay": float(weight_decay),
            "scheme": self.scheme,
            "scale_bits": self.scale_bits,
            "train_weights": list(self.train_weights.coefficients),
            "val_weights": list(self.val_weights.coefficients),
        }
        self.broadcast("InitSuperNet", body)

    def send_population(self, codes, phase: str, steps: int = 0, generation: int = 0):
        body = {"phase": phase, "codes": _codes_to_wire(codes), "steps": int(steps), "generation": generation}
        return self.broadcast("PopulationBroadcast", body)

    def weight_steps(self, codes, steps: int) -> int:
        """E_weight rounds of encrypted population-gradient aggregation."""
        self.send_population(codes, "weights", steps)
        for _ in range(steps):
            reports = self.gather("GradientReport")
            for m in reports:
                if m.body.get("layout_hash") != self.layout_hash:
                    raise ProtocolError(f"client {m.sender} reports layout hash {m.body.get('layout_hash')}")
            agg = C.aggregate_grads([m.ciphers[0] for m in reports], self.train_weights, len(codes))
            self.broadcast("GradientBroadcast", {"layout_hash": self.layout_hash}, [agg])
        return steps

    def federated_losses(self, reports) -> np.ndarray:
        return C.aggregate_losses([m.ciphers[0] for m in reports], self.val_weights)

    def feo_round(self, t: int, population, schedule: feo.GammaSchedule, mode: str = "full"):
        size = len(population)
        gamma = schedule(t)
        q_clients, q_ctrl = feo.quotas(size, gamma, self.sizes["val"], mode)
        self.broadcast("GammaBroadcast", {"gamma": gamma, "generation": t, "quotas": q_clients})
        fll = self.federated_losses(self.gather("LossReport"))
        pop_fl = feo.evolve(population, fll, self.cfg, feo.party_rng(self.seed, 0, t))
        self.send_population(pop_fl, "feo", generation=t)
        reports = self.gather("ElitesReport")
        fll_fl = self.federated_losses(reports)
        new_pop, composition = [], {}
        for m, q in zip(reports, q_clients):
            elites = _codes_from_wire(m.body["elites"], self.cfg.layers)
            if len(elites) != q:
                raise ProtocolError(f"client {m.sender} returned {len(elites)} elites, quota {q}")
            new_pop += elites
            composition[f"client-{m.sender}"] = q
        new_pop += [e.code for e in feo.controller_elites(pop_fl, fll_fl, q_ctrl)]
        composition["controller"] = q_ctrl
        if len(new_pop) != size:
            raise ProtocolError("merged population has the wrong size")
        log = GenerationLog(t, gamma, float(fll.min()), float(fll.mean()), composition,
                            [m.body["best_local_loss"] for m in reports], [c.genes() for c in population])
        return new_pop, log

    def final_losses(self, codes) -> np.ndarray:
        self.broadcast("FinalEvalRequest", {"kind": "loss", "codes": _codes_to_wire(codes)})
        return self.federated_losses(self.gather("FinalEvalReport"))

    def final_accuracy(self, code, timing: bool = True) -> dict:
        body = {"kind": "accuracy", "codes": _codes_to_wire([code]), "timing": timing}
        self.broadcast("FinalEvalRequest", body)
        reports = self.gather("FinalEvalReport")
        accs = [m.body["accuracy"] for m in reports]
        sizes = [m.body["test_size"] for m in reports]
        out = {
            "fll": float(self.federated_losses(reports)[0]),
            "client_accuracies": accs,
            "test_sizes": sizes,
            "flacc": flacc(accs, sizes),
        }
        if timing:
            out["inference_seconds"] = flacc([m.body["inference_seconds"] for m in reports], sizes)
        return out

    def shutdown(self):
        self.broadcast("Shutdown")


def flacc(accuracies: Sequence[float], test_sizes: Sequence[int]) -> float:
    """Test-size-weighted mean of per-client accuracies (clients without test nodes drop out)."""
    if len(accuracies) != len(test_sizes):
        raise ValueError("accuracy and size arrays differ in length")
    if any(s < 0 for s in test_sizes):
        raise ValueError("test sizes must be nonnegative")
    total = sum(test_sizes)
    if total <= 0:
        raise ValueError("no test nodes on any client")
    return float(sum(a * s for a, s in zip(accuracies, test_sizes)) / total)
