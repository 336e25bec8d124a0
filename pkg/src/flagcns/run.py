"""End-to-end runs: search, federated retraining, FL-Random, ablations, reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import multiprocessing
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cipher as C
from . import feo
from . import supernet as N
from .federation import ClientWorker, Controller, GenerationLog, flacc
from .graph import (GraphShard, Partition, induce_shards, load_bundle, load_shard, partition_edgecut,
                    partition_random)
from .space import ArchCode, SpaceConfig, parse_code, sample_random
from .synthetic import client_sbm_task, cora_like
from .wire import InprocHub, ReplayHub, SocketHub, Transcript, serve_client

logger = logging.getLogger(__name__)

PARTITIONERS = {"edgecut": partition_edgecut, "random": partition_random}
ABLATIONS = ("controller-only", "client-only", "random-partition")
QUOTA_MODES = ("full", "controller-only", "client-only")
TRANSPORTS = ("inproc", "socket")
WALL_CLOCK_KEYS = ("wall_clock_seconds", "inference_seconds")

# name -> (code text, slot count)
BASELINES = {
    "gcn2": ("IS4 | L1:gcn<-0 L2:gcn<-1 | OS4", 2),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    clients: int = 3
    partition: str = "edgecut"
    population: int = 60
    layers: int = 6
    layer_types: tuple = SpaceConfig().layer_types
    hidden: int = 64
    generations: int = 250
    weight_steps: int = 5
    gamma0: float = feo.GAMMA0
    gamma_decay: float = feo.GAMMA_DECAY
    lr: float = 0.01
    cipher: str = "mask"
    seed: int = 0
    transport: str = "inproc"
    out: str | None = None
    quota_mode: str = "full"
    retrain_epochs: int = 200
    retrain_lr: float = 0.5
    weight_decay: float = 5e-4
    random_epochs: int = 50
    scale_bits: int = C.SCALE_BITS
    timing: bool = True
    csv: bool = False

    def __post_init__(self):
        self.layer_types = tuple(self.layer_types)

    def validate(self) -> "RunConfig":
        for name in ("clients", "population", "layers", "hidden", "retrain_epochs", "random_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("generations", "weight_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.partition not in PARTITIONERS:
            raise ConfigError(f"unknown partitioner {self.partition!r}")
        if self.cipher not in C.SCHEMES:
            raise ConfigError(f"unknown cipher {self.cipher!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.quota_mode not in QUOTA_MODES:
            raise ConfigError(f"unknown quota mode {self.quota_mode!r}")
        if not 0.0 <= self.gamma0 <= 1.0 or not 0.0 < self.gamma_decay <= 1.0:
            raise ConfigError("gamma0 must be in [0, 1] and gamma_decay in (0, 1]")
        if self.lr <= 0 or self.retrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 8 <= self.scale_bits <= 48:
            raise ConfigError("scale_bits must lie in [8, 48]")
        try:
            self.space()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def space(self) -> SpaceConfig:
        return SpaceConfig(self.layers, self.layer_types, self.hidden)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_types"] = list(self.layer_types)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def run_id(self) -> str:
        d = self.to_dict()
        for k in ("out", "transport", "csv", "timing"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    kind: str
    config: dict
    best_code: list
    best_code_text: str
    final_fll: float
    flacc: float
    client_accuracies: list
    test_sizes: list
    param_count: int
    fll_trajectory: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    inference_seconds: float | None = None
    messages: int = 0
    bytes: int = 0
    seeds: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    generations: list = field(default_factory=list)  # GenerationLog dicts, written as JSONL

    def to_dict(self, wall_clock: bool = True) -> dict:
        d = dataclasses.asdict(self)
        d.pop("generations")
        if not wall_clock:
            for k in WALL_CLOCK_KEYS:
                d.pop(k, None)
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(wall_clock), sort_keys=True, indent=2)


# --- data ----------------------------------------------------------------


def load_dataset(source: str):
    """A bundle directory, a directory of ``client_<i>`` shards, or ``synthetic:<name>[:seed]``."""
    if not source:
        raise ConfigError("no dataset given")
    if source.startswith("synthetic:"):
        parts = source.split(":")
        seed = int(parts[2]) if len(parts) > 2 else 0
        if parts[1] == "sbm3":
            return client_sbm_task(seed)
        if parts[1] == "cora-like":
            return cora_like(seed)
        raise ConfigError(f"unknown synthetic dataset {parts[1]!r}")
    path = Path(source)
    if not path.is_dir():
        raise ConfigError(f"dataset directory {path} does not exist")
    shard_dirs = sorted(path.glob("client_*"), key=lambda p: int(p.name.split("_")[1]))
    if shard_dirs:
        return [load_shard(d, i) for i, d in enumerate(shard_dirs)]
    return load_bundle(path)


def make_shards(cfg: RunConfig, data=None) -> list[GraphShard]:
    data = load_dataset(cfg.dataset) if data is None else data
    if isinstance(data, list):
        if len(data) != cfg.clients:
            raise ConfigError(f"dataset is pre-partitioned into {len(data)} clients, config says {cfg.clients}")
        return data
    part: Partition = PARTITIONERS[cfg.partition](data, cfg.clients, seed=cfg.seed)
    return induce_shards(data, part)


# --- sessions --------------------------------------------------------------


def _client_process(shard, run_id, cid, n, seed, address):
    serve_client(ClientWorker(shard, run_id, cid, n, seed), *address)


class Session:
    """Controller plus the hub that connects it to the clients."""

    def __init__(self, cfg: RunConfig, shards: Sequence[GraphShard] | None = None, hub=None,
                 space: SpaceConfig | None = None, lr: float | None = None):
        self.cfg = cfg
        self.run_id = cfg.run_id()
        self.procs = []
        if hub is None:
            hub = self._open_hub(shards)
        self.hub = hub
        self.controller = Controller(hub, self.run_id, space or cfg.space(), seed=cfg.seed, scheme=cfg.cipher,
                                     lr=cfg.lr if lr is None else lr, scale_bits=cfg.scale_bits)
        self.controller.handshake()

    def _open_hub(self, shards):
        n = len(shards)
        if self.cfg.transport == "inproc":
            return InprocHub([ClientWorker(s, self.run_id, i, n, self.cfg.seed) for i, s in enumerate(shards)])
        hub = SocketHub(n)
        ctx = multiprocessing.get_context("fork")
        for i, s in enumerate(shards):
            p = ctx.Process(target=_client_process, args=(s, self.run_id, i, n, self.cfg.seed, hub.address),
                            daemon=True)
            p.start()
            self.procs.append(p)
        return hub.accept_all()

    def close(self, shutdown: bool = True):
        if shutdown:
            self.controller.shutdown()
        for p in self.procs:
            p.join(timeout=30)
        self.hub.close()

    @property
    def transcript(self) -> Transcript:
        return self.hub.transcript


def _retrain(ctrl: Controller, code: ArchCode, cfg: RunConfig, epochs: int, seed: int, timing: bool) -> dict:
    ctrl.init_supernet(seed, code=code, lr=cfg.retrain_lr, weight_decay=cfg.weight_decay)
    ctrl.send_population([code], "init")
    ctrl.weight_steps([code], epochs)
    return ctrl.final_accuracy(code, timing=timing)


def _report(kind, cfg, ctrl, code, result, t0, **extra) -> RunReport:
    space = ctrl.cfg
    rep = RunReport(
        kind=kind,
        config=cfg.to_dict(),
        best_code=code.genes(),
        best_code_text=code.to_text(space),
        final_fll=result["fll"],
        flacc=result["flacc"],
        client_accuracies=result["client_accuracies"],
        test_sizes=result["test_sizes"],
        param_count=N.param_count(code, space, ctrl.num_features, ctrl.num_classes),
        inference_seconds=result.get("inference_seconds"),
        messages=ctrl.hub.messages,
        bytes=ctrl.hub.bytes,
        seeds={"run": cfg.seed},
        **extra,
    )
    rep.wall_clock_seconds = time.perf_counter() - t0
    return rep


# --- commands ----------------------------------------------------------------


def run_search(session: Session) -> RunReport:
    """Supernet search, final selection by federated loss, then federated retraining."""
    cfg, ctrl = session.cfg, session.controller
    t0 = time.perf_counter()
    space = ctrl.cfg
    ctrl.init_supernet(cfg.seed)
    rng = feo.party_rng(cfg.seed, 0, 0)
    population = [sample_random(space, rng) for _ in range(cfg.population)]
    ctrl.send_population(population, "init")
    schedule = feo.GammaSchedule(cfg.gamma0, cfg.gamma_decay)
    logs: list[GenerationLog] = []
    for t in range(1, cfg.generations + 1):
        g0 = time.perf_counter()
        ctrl.weight_steps(population, cfg.weight_steps)
        population, log = ctrl.feo_round(t, population, schedule, cfg.quota_mode)
        entry = dataclasses.asdict(log)
        entry["wall_clock_seconds"] = time.perf_counter() - g0
        logs.append(entry)
        logger.info("generation %d: gamma=%.4f best FLL=%.4f mean FLL=%.4f", t, log.gamma, log.best_fll,
                    log.mean_fll)
    final = ctrl.final_losses(population)
    best = population[feo.rank_by_loss(population, final)[0]]
    logger.info("selected %s (supernet FLL %.4f)", best.to_text(space), float(final.min()))
    result = _retrain(ctrl, best, cfg, cfg.retrain_epochs, cfg.seed + 1, cfg.timing)
    return _report("search", cfg, ctrl, best, result, t0,
                   fll_trajectory=[e["best_fll"] for e in logs], generations=logs,
                   candidates=[{"code": c.genes(), "supernet_fll": float(f)} for c, f in zip(population, final)])


def run_train(session: Session, code: ArchCode, epochs: int) -> RunReport:
    if epochs < 1:
        raise ConfigError("training needs at least one epoch")
    cfg, ctrl = session.cfg, session.controller
    t0 = time.perf_counter()
    result = _retrain(ctrl, code, cfg, epochs, cfg.seed + 1, cfg.timing)
    return _report("train", cfg, ctrl, code, result, t0)


def run_random(session: Session, budget: int) -> RunReport:
    """FL-Random: train ``budget`` uniform samples briefly, keep the lowest federated loss, retrain it."""
    if budget < 1:
        raise ConfigError("budget must be at least one candidate")
    cfg, ctrl = session.cfg, session.controller
    t0 = time.perf_counter()
    rng = feo.party_rng(cfg.seed, 0, 0)
    candidates, best, best_fll, trajectory = [], None, np.inf, []
    for i in range(budget):
        code = sample_random(ctrl.cfg, rng)
        res = _retrain(ctrl, code, cfg, cfg.random_epochs, cfg.seed + 2 + i, timing=False)
        candidates.append({"code": code.genes(), "fll": res["fll"]})
        if res["fll"] < best_fll:
            best, best_fll = code, res["fll"]
        trajectory.append(best_fll)
    result = _retrain(ctrl, best, cfg, cfg.retrain_epochs, cfg.seed + 1, cfg.timing)
    return _report("baseline-random", cfg, ctrl, best, result, t0, fll_trajectory=trajectory,
                   candidates=candidates)


def ablation_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; choose from {', '.join(ABLATIONS)}")
    if variant == "random-partition":
        return dataclasses.replace(cfg, partition="random")
    return dataclasses.replace(cfg, quota_mode=variant)


def resolve_code(text: str, cfg: RunConfig) -> tuple[ArchCode, SpaceConfig]:
    """A named baseline or a code in JSON or text form."""
    if text in BASELINES:
        code_text, layers = BASELINES[text]
        space = SpaceConfig(layers, cfg.layer_types, cfg.hidden)
        return parse_code(code_text, space), space
    if text.isidentifier():
        raise ConfigError(f"unknown baseline {text!r}; known: {', '.join(BASELINES)}")
    space = cfg.space()
    try:
        return parse_code(text, space), space
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_search(cfg: RunConfig, data=None) -> RunReport:
    cfg.validate()
    session = Session(cfg, make_shards(cfg, data))
    try:
        report = run_search(session)
    finally:
        session.close()
    return _finish(report, session, cfg)


def cmd_train_arch(code: str | ArchCode, cfg: RunConfig, epochs: int | None = None, data=None) -> RunReport:
    cfg.validate()
    if isinstance(code, ArchCode):
        space = cfg.space()
    else:
        code, space = resolve_code(code, cfg)
    epochs = cfg.retrain_epochs if epochs is None else epochs
    if epochs < 1:
        raise ConfigError("training needs at least one epoch")
    session = Session(cfg, make_shards(cfg, data), space=space)
    try:
        report = run_train(session, code, epochs)
    finally:
        session.close()
    return _finish(report, session, cfg)


def cmd_baseline_random(cfg: RunConfig, budget: int, data=None) -> RunReport:
    cfg.validate()
    session = Session(cfg, make_shards(cfg, data))
    try:
        report = run_random(session, budget)
    finally:
        session.close()
    return _finish(report, session, cfg)


def cmd_ablation(cfg: RunConfig, variant: str, data=None) -> RunReport:
    report = cmd_search(ablation_config(cfg, variant), data)
    report.kind = f"ablation:{variant}"
    return report


def cmd_flacc(accuracies: Sequence[float], test_sizes: Sequence[int]) -> float:
    if len(accuracies) != len(test_sizes):
        raise ConfigError("accuracy and size lists differ in length")
    if any(s <= 0 for s in test_sizes):
        raise ConfigError("test sizes must be positive")
    return flacc(accuracies, test_sizes)


def replay_search(cfg: RunConfig, transcript: Transcript) -> RunReport:
    """Re-drive the controller from recorded client frames; raises on any divergence."""
    hub = ReplayHub(transcript, cfg.clients)
    session = Session(cfg, hub=hub)
    report = run_search(session)
    session.close()
    if not hub.exhausted():
        raise C.CipherError("recording holds frames the replayed controller never consumed")
    return report


def _finish(report: RunReport, session: Session, cfg: RunConfig) -> RunReport:
    report.messages, report.bytes = session.hub.messages, session.hub.bytes
    if cfg.out:
        write_report(report, cfg.out, csv_export=cfg.csv, transcript=session.transcript)
    return report


def write_report(report: RunReport, out, csv_export: bool = False, transcript: Transcript | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(report.to_json() + "\n")
    with open(out / "generations.jsonl", "w") as fh:
        for entry in report.generations:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if csv_export:
        cols = ["generation", "gamma", "best_fll", "mean_fll", "wall_clock_seconds"]
        with open(out / "generations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for entry in report.generations:
                w.writerow([entry[c] for c in cols])
    if transcript is not None:
        (out / "transcript.bin").write_bytes(transcript.to_bytes())
    return out
