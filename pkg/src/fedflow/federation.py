"""Simulated federated training of a flow-matching field.

One communication round: every client receives the current parameters,
computes one mini-batch gradient on its private data and sends back a
``GradientMessage``.  The server reduces the messages in client-index order
with weights ``lambda_i`` and takes one Adam step.  Messages go through
``to_bytes``/``from_bytes`` so that only the documented wire payload crosses
the client boundary.
"""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import DistributionSpec, make_rng, sample, split_labels
from .errors import ConfigError
from .flow import cfm_loss, sample_times
from .nn import AdamState, MlpArch, ParamVector, adam_step, init_params
from .ot import CouplingSampler, sample_pairs, solve_exact, solve_sinkhorn, cost_matrix
from .semidual import CTransformCfg, dual_loss_local, resample_global

log = logging.getLogger(__name__)

COUPLINGS = ("vanilla", "local_ot", "global_ot", "centralized_otcfm")
ALGORITHM_TAGS = {
    "vanilla": "ffm-vanilla",
    "local_ot": "ffm-lot",
    "global_ot": "ffm-got",
    "centralized_otcfm": "ot-cfm",
}

# substream purposes for make_rng(seed, purpose, ...)
_INIT, _DATA, _FLOW, _DUAL = 0, 1, 2, 3


@dataclass(frozen=True)
class FederationSpec:
    source: DistributionSpec
    target: DistributionSpec
    n_clients: int = 2
    weights: tuple[float, ...] | None = None
    partition: str = "split"  # split | dirichlet | iid
    alpha: float = 0.3
    samples_per_client: int = 10000
    rounds: int = 1000
    batch_size: int = 256
    coupling: str = "vanilla"
    lr_theta: float = 1e-3
    lr_phi: float = 1e-4
    dual_every: int = 5
    ctransform: CTransformCfg = CTransformCfg()
    ot_solver: str = "exact"  # exact | sinkhorn
    sinkhorn_epsilon: float = 0.01
    field_hidden: tuple[int, ...] = (128, 128, 128)
    field_activation: str = "relu"
    potential_hidden: tuple[int, ...] = (128, 128, 128)
    potential_activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.coupling == "centralized_otcfm" and self.n_clients != 1:
            raise ConfigError("centralized_otcfm requires n_clients = 1")
        if self.partition not in ("split", "dirichlet", "iid"):
            raise ConfigError(f"unknown partition mode {self.partition!r}")
        if self.weights is not None:
            check_weights(self.weights, self.n_clients)
        if self.rounds < 0 or self.batch_size < 1 or self.dual_every < 1:
            raise ConfigError("rounds >= 0, batch_size >= 1 and dual_every >= 1 are required")
        if self.ot_solver not in ("exact", "sinkhorn"):
            raise ConfigError(f"ot_solver must be 'exact' or 'sinkhorn', got {self.ot_solver!r}")
        if self.source.dim != self.target.dim:
            raise ConfigError("source and target dimensions differ")

    @property
    def dim(self) -> int:
        return self.target.dim

    @property
    def algorithm(self) -> str:
        return ALGORITHM_TAGS[self.coupling]

    def field_arch(self) -> MlpArch:
        return MlpArch(self.dim, self.dim, self.field_hidden, self.field_activation, time_conditioned=True)

    def potential_arch(self) -> MlpArch:
        return MlpArch(self.dim, 1, self.potential_hidden, self.potential_activation)


def check_weights(weights: Sequence[float], n_clients: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_clients,):
        raise ConfigError(f"expected {n_clients} client weights, got {len(w)}")
    if np.any(w <= 0):
        raise ConfigError("client weights must be positive")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ConfigError(f"client weights must sum to 1 (got {w.sum()!r})")
    return w


# --- clients and data ----------------------------------------------------------


@dataclass
class ClientState:
    id: int
    dataset: np.ndarray

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ConfigError(f"client {self.id} has an empty dataset")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.dataset[rng.integers(0, len(self.dataset), size=n)]


def partition_dirichlet(components: Sequence[np.ndarray], alpha: float, n_clients: int,
                        rng: np.random.Generator, max_tries: int = 100) -> list[np.ndarray]:
    """Split each component's samples across clients with Dirichlet(alpha) proportions.

    Draws are repeated until every client receives at least one sample.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if any(len(c) == 0 for c in components):
        raise ConfigError("every component needs at least one sample")
    total = sum(len(c) for c in components)
    if total < n_clients:
        raise ConfigError(f"{total} samples cannot cover {n_clients} clients")
    for _ in range(max_tries):
        parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for comp in components:
            idx = rng.permutation(len(comp))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props) * len(comp)).astype(int)[:-1]
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(comp[chunk])
        out = [np.concatenate(p, axis=0) for p in parts]
        if all(len(p) > 0 for p in out):
            return out
    raise ConfigError(f"could not give every client data after {max_tries} Dirichlet draws")


def partition_by_labels(points: np.ndarray, labels: np.ndarray,
                        groups: Sequence[Sequence[int]]) -> list[np.ndarray]:
    return [points[np.isin(labels, list(g))] for g in groups]


def build_clients(spec: FederationSpec) -> list[ClientState]:
    rng = make_rng(spec.seed, _DATA)
    n_total = spec.samples_per_client * spec.n_clients
    points, labels = spec.target.sample_labeled(n_total, rng)
    if spec.n_clients == 1:
        datasets = [points]
    elif spec.partition == "split":
        groups = split_labels(spec.target)
        if len(groups) != spec.n_clients:
            raise ConfigError(f"the fixed split defines {len(groups)} clients, spec has {spec.n_clients}")
        datasets = partition_by_labels(points, labels, groups)
    elif spec.partition == "dirichlet":
        comps = [points[labels == c] for c in np.unique(labels)]
        datasets = partition_dirichlet(comps, spec.alpha, spec.n_clients, rng)
    else:
        datasets = np.array_split(points[rng.permutation(n_total)], spec.n_clients)
    return [ClientState(i, d) for i, d in enumerate(datasets)]


def client_weights(spec: FederationSpec, clients: Sequence[ClientState]) -> np.ndarray:
    if spec.weights is not None:
        return check_weights(spec.weights, len(clients))
    sizes = np.array([len(c.dataset) for c in clients], dtype=np.float64)
    w = sizes / sizes.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return w


# --- messages -------------------------------------------------------------------

_MSG_MAGIC = b"FFGM"
_MSG_VERSION = 1
# magic, version, flags, client_id, round, batch_count, n_theta, n_phi, local_loss
_MSG_HEADER = struct.Struct("<4sHHIIIQQd")


@dataclass
class GradientMessage:
    """What a client sends to the server; holds gradients only, never samples."""

    client_id: int
    round: int
    grad_theta: np.ndarray | None
    local_loss: float
    batch_count: int
    grad_phi: np.ndarray | None = None

    def to_bytes(self) -> bytes:
        """Length-prefixed record: u32 length, fixed header, f64 LE payloads."""
        gt = np.zeros(0) if self.grad_theta is None else self.grad_theta
        gp = np.zeros(0) if self.grad_phi is None else self.grad_phi
        flags = (self.grad_theta is not None) | ((self.grad_phi is not None) << 1)
        body = _MSG_HEADER.pack(_MSG_MAGIC, _MSG_VERSION, flags, self.client_id, self.round,
                                self.batch_count, gt.size, gp.size, float(self.local_loss))
        body += gt.astype("<f8").tobytes() + gp.astype("<f8").tobytes()
        return struct.pack("<I", len(body)) + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GradientMessage":
        (length,) = struct.unpack_from("<I", buf)
        body = buf[4:]
        if len(body) != length:
            raise ValueError(f"message length prefix {length} != body size {len(body)}")
        magic, version, flags, cid, rnd, count, nt, npf, loss = _MSG_HEADER.unpack_from(body)
        if magic != _MSG_MAGIC or version != _MSG_VERSION:
            raise ValueError("not a gradient message")
        off = _MSG_HEADER.size
        if len(body) != off + 8 * (nt + npf):
            raise ValueError("message payload size does not match header counts")
        gt = np.frombuffer(body, "<f8", nt, off).astype(np.float64)
        gp = np.frombuffer(body, "<f8", npf, off + 8 * nt).astype(np.float64)
        return cls(cid, rnd, gt if flags & 1 else None, loss, count, gp if flags & 2 else None)


def transmit(msg: GradientMessage) -> GradientMessage:
    """In-process transport: serialise and parse back."""
    return GradientMessage.from_bytes(msg.to_bytes())


@dataclass
class RoundReport:
    round: int
    algorithm: str
    client_id: int | str
    loss: float
    grad_norm: float
    wall_ms: float

    FIELDS = ("round", "algorithm", "client_id", "loss", "grad_norm", "wall_ms")

    def row(self) -> list:
        return [self.round, self.algorithm, self.client_id, repr(self.loss), repr(self.grad_norm),
                f"{self.wall_ms:.3f}"]


# --- client computations ------------------------------------------------------


def _message(client, rnd, loss, grad, B):
    return GradientMessage(client.id, rnd, grad, loss, B)


def client_step_on_batch(client: ClientState, theta: ParamVector, x0, x1, t, rnd: int = 0) -> GradientMessage:
    """Flow-matching gradient on an already paired batch."""
    loss, grad = cfm_loss(theta, x0, x1, t)
    return _message(client, rnd, loss, grad, len(x1))


def client_step_vanilla(client: ClientState, theta: ParamVector, source: DistributionSpec,
                        B: int, rng: np.random.Generator, rnd: int = 0) -> GradientMessage:
    x0 = sample(source, B, rng)
    x1 = client.draw(B, rng)
    t = sample_times(B, rng)
    return client_step_on_batch(client, theta, x0, x1, t, rnd)


def local_ot_pairs(x0, x1, rng, solver: str = "exact", epsilon: float = 0.01):
    """Resample ``len(x1)`` pairs from a mini-batch OT plan between ``x0`` and ``x1``.

    ``epsilon`` is relative to the mean pairwise cost for the Sinkhorn solver.
    """
    if solver == "exact":
        plan = solve_exact(x0, x1)
    else:
        plan = solve_sinkhorn(x0, x1, epsilon * float(cost_matrix(x0, x1).mean()))
    a, b, _, _ = sample_pairs(CouplingSampler(plan, rng), len(x1), x0, x1)
    return a, b


def client_step_local_ot(client: ClientState, theta: ParamVector, source: DistributionSpec,
                         B: int, rng: np.random.Generator, rnd: int = 0,
                         solver: str = "exact", epsilon: float = 0.01) -> GradientMessage:
    x0 = sample(source, B, rng)
    x1 = client.draw(B, rng)
    t = sample_times(B, rng)
    x0, x1 = local_ot_pairs(x0, x1, rng, solver, epsilon)
    loss, grad = cfm_loss(theta, x0, x1, t)
    return _message(client, rnd, loss, grad, B)


def client_step_global_ot(client: ClientState, theta: ParamVector, phi: ParamVector,
                          source: DistributionSpec, B: int, K: int, rng: np.random.Generator,
                          rnd: int = 0) -> GradientMessage:
    pool = sample(source, K, rng)
    x1 = client.draw(B, rng)
    t = sample_times(B, rng)
    pairs = resample_global(phi, pool, x1)
    loss, grad = cfm_loss(theta, pairs.x0, pairs.x1, t)
    return _message(client, rnd, loss, grad, B)


def client_dual_step(client: ClientState, phi: ParamVector, source: DistributionSpec, B: int,
                     cfg: CTransformCfg, rng: np.random.Generator, rnd: int = 0) -> GradientMessage:
    x0 = sample(source, B, rng)
    x1 = client.draw(B, rng)
    candidates = sample(source, cfg.pool_size, rng)
    obj, grad = dual_loss_local(phi, x0, x1, candidates, cfg)
    return GradientMessage(client.id, rnd, None, obj, B, grad_phi=grad)


# --- server ---------------------------------------------------------------------


def aggregate(messages: Iterable[GradientMessage], weights: Sequence[float],
              key: str = "grad_theta") -> np.ndarray:
    """Weighted gradient sum, reduced in client-index order.

    Every client ``0..n-1`` must be present exactly once.
    """
    by_id = {}
    for m in messages:
        if m.client_id in by_id:
            raise RuntimeError(f"duplicate message from client {m.client_id}")
        by_id[m.client_id] = m
    n = len(weights)
    missing = sorted(set(range(n)) - set(by_id))
    if missing:
        raise RuntimeError(f"round incomplete: no message from client(s) {missing}")
    total = None
    for i in range(n):
        g = getattr(by_id[i], key)
        if g is None:
            raise RuntimeError(f"client {i} message has no {key}")
        total = weights[i] * g if total is None else total + weights[i] * g
    return total


def server_aggregate(messages, weights, params: ParamVector, adam: AdamState,
                     key: str = "grad_theta") -> ParamVector:
    return adam_step(params, aggregate(messages, weights, key), adam)


@dataclass
class ServerState:
    theta: ParamVector
    adam_theta: AdamState
    phi: ParamVector | None = None
    adam_phi: AdamState | None = None
    round: int = 0


def init_server(spec: FederationSpec) -> ServerState:
    theta = init_params(spec.field_arch(), make_rng(spec.seed, _INIT, 0))
    state = ServerState(theta, AdamState.for_params(theta, spec.lr_theta))
    if spec.coupling == "global_ot":
        phi = init_params(spec.potential_arch(), make_rng(spec.seed, _INIT, 1))
        state.phi, state.adam_phi = phi, AdamState.for_params(phi, spec.lr_phi)
    return state


class RoundError(RuntimeError):
    def __init__(self, round_idx: int, state: ServerState, cause: BaseException):
        super().__init__(f"round {round_idx} failed: {cause}")
        self.round = round_idx
        self.state = state


BatchFn = Callable[[ClientState, int], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class Simulation:
    """Drives the rounds of one federated run.

    ``batch_fn(client, round) -> (x0, x1, t)`` replaces the random draws of
    the vanilla and local-OT client steps with fixed batches.  ``tap``
    receives every serialised message before the server parses it.
    """

    spec: FederationSpec
    clients: list[ClientState] = field(default_factory=list)
    state: ServerState | None = None
    threads: int = 1
    batch_fn: BatchFn | None = None
    tap: Callable[[bytes], None] | None = None

    def __post_init__(self):
        if not self.clients:
            self.clients = build_clients(self.spec)
        if self.state is None:
            self.state = init_server(self.spec)
        self.weights = client_weights(self.spec, self.clients)
        if self.batch_fn is not None and self.spec.coupling == "global_ot":
            raise ConfigError("fixed batches are only supported for vanilla and local-OT couplings")

    def _map_clients(self, fn: Callable[[ClientState], GradientMessage]) -> list[GradientMessage]:
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as ex:
                msgs = list(ex.map(fn, self.clients))
        else:
            msgs = [fn(c) for c in self.clients]
        out = []
        for m in msgs:
            wire = m.to_bytes()
            if self.tap is not None:
                self.tap(wire)
            out.append(GradientMessage.from_bytes(wire))
        return out

    def _flow_message(self, client: ClientState, rnd: int) -> GradientMessage:
        spec, st = self.spec, self.state
        rng = make_rng(spec.seed, _FLOW, client.id, rnd)
        if self.batch_fn is not None:
            x0, x1, t = self.batch_fn(client, rnd)
            if spec.coupling != "vanilla":
                x0, x1 = local_ot_pairs(x0, x1, rng, spec.ot_solver, spec.sinkhorn_epsilon)
            return client_step_on_batch(client, st.theta, x0, x1, t, rnd)
        if spec.coupling == "vanilla":
            return client_step_vanilla(client, st.theta, spec.source, spec.batch_size, rng, rnd)
        if spec.coupling in ("local_ot", "centralized_otcfm"):
            return client_step_local_ot(client, st.theta, spec.source, spec.batch_size, rng, rnd,
                                        spec.ot_solver, spec.sinkhorn_epsilon)
        return client_step_global_ot(client, st.theta, st.phi, spec.source, spec.batch_size,
                                     spec.ctransform.pool_size, rng, rnd)

    def run_round(self) -> list[RoundReport]:
        spec, st = self.spec, self.state
        rnd = st.round
        tag = spec.algorithm
        t0 = time.perf_counter()
        msgs = self._map_clients(lambda c: self._flow_message(c, rnd))
        agg = aggregate(msgs, self.weights)
        st.theta = adam_step(st.theta, agg, st.adam_theta)
        ms = 1e3 * (time.perf_counter() - t0)
        reports = [RoundReport(rnd, tag, m.client_id, m.local_loss,
                               float(np.linalg.norm(m.grad_theta)), ms) for m in msgs]
        reports.append(RoundReport(rnd, tag, "server",
                                   float(sum(w * m.local_loss for w, m in zip(self.weights, msgs))),
                                   float(np.linalg.norm(agg)), ms))
        if spec.coupling == "global_ot" and (rnd + 1) % spec.dual_every == 0:
            reports.extend(self.dual_round(rnd))
        st.round += 1
        return reports

    def dual_round(self, rnd: int) -> list[RoundReport]:
        spec, st = self.spec, self.state
        t0 = time.perf_counter()

        def step(c):
            rng = make_rng(spec.seed, _DUAL, c.id, rnd)
            return client_dual_step(c, st.phi, spec.source, spec.batch_size, spec.ctransform, rng, rnd)

        msgs = self._map_clients(step)
        agg = aggregate(msgs, self.weights, key="grad_phi")
        st.phi = adam_step(st.phi, agg, st.adam_phi)
        ms = 1e3 * (time.perf_counter() - t0)
        tag = spec.algorithm + ":dual"
        reports = [RoundReport(rnd, tag, m.client_id, m.local_loss,
                               float(np.linalg.norm(m.grad_phi)), ms) for m in msgs]
        reports.append(RoundReport(rnd, tag, "server",
                                   float(sum(w * m.local_loss for w, m in zip(self.weights, msgs))),
                                   float(np.linalg.norm(agg)), ms))
        return reports


def run_experiment(spec: FederationSpec, threads: int = 1, state: ServerState | None = None,
                   on_round: Callable[[Simulation, list[RoundReport]], None] | None = None,
                   rounds: int | None = None, sim: Simulation | None = None) -> Simulation:
    """Run ``spec.rounds`` rounds (or ``rounds``) and return the finished simulation.

    A failing round raises ``RoundError`` carrying the last good server state,
    from which the run can be resumed by passing it back as ``state``.
    """
    if sim is None:
        sim = Simulation(spec, state=state, threads=threads)
    target = spec.rounds if rounds is None else rounds
    while sim.state.round < target:
        snapshot = ServerState(sim.state.theta.copy(), replace(sim.state.adam_theta),
                               None if sim.state.phi is None else sim.state.phi.copy(),
                               None if sim.state.adam_phi is None else replace(sim.state.adam_phi),
                               sim.state.round)
        try:
            reports = sim.run_round()
        except Exception as exc:
            raise RoundError(snapshot.round, snapshot, exc) from exc
        if on_round is not None:
            on_round(sim, reports)
    return sim
