"""FedSGD simulator with client, instance and joint privacy accounting.

One round: the server samples participants with probability ``alpha``, each
participant computes one (optionally noised) gradient on a Poisson batch,
the server aggregates, takes a gradient step and updates the ledgers.

Modes:
    client: clients send plain mean gradients; the server clips each to
        ``clip_client``, averages, and adds ``N(0, (clip_client *
        sigma_client)**2)`` to the mean. Sensitivity samples are exact
        leave-one-out differences of the aggregate.
    instance_seq / instance_par: clients clip per-example gradients, add
        ``N(0, (clip_instance * sigma_instance)**2)`` to the batch sum and
        divide by the expected batch size. Per-client instance costs are
        summed with ``q = B_i / N`` (sequential) or maximised with
        ``q = B_i / N_i`` (parallel). A positive ``sigma_client`` adds the
        client-level server mechanism on top (the "split" regime).
    joint: as instance_seq, with no server noise; the client-level ledger
        is fed from per-client divergence samples evaluated against the
        effective noise of the averaged client noise.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from bdpfl.accountant import (
    LambdaGrid,
    MechanismParams,
    PrivacyLedger,
    RoundCostEstimate,
    combine_estimates,
    epsilon_for_delta,
    estimate_from_log_values,
    estimate_round_cost,
    ledger_add,
    sample_log_values,
)
from bdpfl.config import ConfigError, ExperimentConfig
from bdpfl.dp_baseline import DpLedger, dp_ledger_add, dp_ledger_epsilon, dp_log_moments
from bdpfl.federation.data import (
    ClientShard,
    DataSet,
    load_idx,
    partition_iid,
    partition_shards,
    synth_data,
)
from bdpfl.federation.models import Model
from bdpfl.mechanism import (
    GENERATOR_FAMILY,
    ROLE_BATCH,
    ROLE_CLIENT_NOISE,
    ROLE_DATA,
    ROLE_INIT,
    ROLE_PARTICIPATION,
    ROLE_PARTITION,
    ROLE_SENSITIVITY,
    ROLE_SERVER_NOISE,
    RngStream,
    clip_rows,
    gaussian_perturb,
    sample_subset,
)

CSV_COLUMNS = ("round", "train_acc", "test_acc", "eps_dp", "eps_bdp_client",
               "eps_bdp_instance", "delta_total", "flag")
INSTANCE_MODES = ("instance_seq", "instance_par", "joint")


@dataclass(frozen=True)
class PrivacySettings:
    """Per-level mechanism knobs shared by clients and server in one run."""

    mode: str
    grid: LambdaGrid
    sigma_client: float = 0.0
    sigma_instance: float = 0.0
    clip_client: float = 1.0
    clip_instance: float = 1.0
    participation: float = 1.0
    delta: float = 1e-3
    rounds: int = 1
    estimator_samples: int = 0
    instance_samples: int = 32

    @property
    def delta_prime(self) -> float:
        """Estimator failure mass per round; half of delta over the round budget."""
        return self.delta / (2.0 * max(self.rounds, 1))

    @property
    def delta_tail(self) -> float:
        return self.delta / 2.0

    @property
    def server_noise(self) -> bool:
        return self.mode != "joint" and self.sigma_client > 0

    @property
    def client_noise(self) -> bool:
        return self.mode in INSTANCE_MODES and self.sigma_instance > 0

    @property
    def tracks_client(self) -> bool:
        return self.server_noise or (self.mode == "joint" and self.client_noise)

    @property
    def dp_level(self) -> str:
        if self.server_noise:
            return "client"
        return "instance" if self.client_noise else "none"

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "PrivacySettings":
        p = cfg.privacy
        return cls(p.mode, LambdaGrid.up_to(p.lambda_max), p.sigma_client, p.sigma_instance,
                   p.clip_client, p.clip_instance, cfg.experiment.participation, p.delta,
                   cfg.experiment.rounds, p.estimator_samples, p.instance_samples)


@dataclass(frozen=True)
class RoundBroadcast:
    """Round parameters the server sends to participants.

    ``sigma_eff`` is only used in joint mode.
    """

    participants: int
    sigma_eff: float


@dataclass
class ClientUpdate:
    client_id: int
    update: np.ndarray
    batch_used: int
    instance_cost: RoundCostEstimate | None = None
    joint_log_values: np.ndarray | None = None
    flag: str = ""


@dataclass
class RoundRecord:
    round: int
    train_acc: float
    test_acc: float
    eps_dp: float
    eps_bdp_client: float
    eps_bdp_instance: float
    delta_total: float
    participants: int
    wall_clock: float
    flag: str = ""
    applied_update: np.ndarray | None = field(default=None, repr=False)

    def csv_row(self) -> str:
        nums = (self.train_acc, self.test_acc, self.eps_dp, self.eps_bdp_client,
                self.eps_bdp_instance, self.delta_total)
        return ",".join([str(self.round), *(f"{x:.6f}" for x in nums), self.flag])


def records_to_csv(records) -> str:
    return ",".join(CSV_COLUMNS) + "\n" + "".join(r.csv_row() + "\n" for r in records)


@dataclass
class Ledgers:
    client: PrivacyLedger | None
    instance: PrivacyLedger | None
    dp: DpLedger | None

    @classmethod
    def fresh(cls, settings: PrivacySettings) -> "Ledgers":
        g = settings.grid
        return cls(PrivacyLedger(g) if settings.tracks_client else None,
                   PrivacyLedger(g) if settings.client_noise else None,
                   DpLedger(g) if settings.dp_level != "none" else None)


def instance_q(settings: PrivacySettings, shard: ClientShard, total_examples: int) -> float:
    if settings.mode == "instance_par":
        return shard.batch_size / shard.n_local
    return shard.batch_size / total_examples


def joint_sigma_eff(settings: PrivacySettings, shards) -> float:
    """Std of the averaged client noise, per coordinate."""
    n = len(shards)
    s = settings.clip_instance * settings.sigma_instance
    return math.sqrt(sum((s / sh.batch_size) ** 2 for sh in shards)) / n


def local_update(model: Model, weights: np.ndarray, shard: ClientShard,
                 settings: PrivacySettings, rng: RngStream, round_index: int,
                 total_examples: int, broadcast: RoundBroadcast | None = None) -> ClientUpdate:
    """One client's contribution for a round.

    ``total_examples`` is the broadcast dataset size N used by sequential
    and joint instance accounting.
    """
    cid = shard.client_id
    batch_rng = rng.child(round_index, ROLE_BATCH, cid)
    q_batch = shard.batch_size / shard.n_local
    flag = ""
    idx = sample_subset(shard.n_local, q_batch, batch_rng)
    if idx.size == 0:
        idx = sample_subset(shard.n_local, q_batch, batch_rng)
    if idx.size == 0:
        flag = "empty_batch"
    x, y = shard.data.features[idx], shard.data.labels[idx]

    if settings.mode == "client":
        if idx.size == 0:
            return ClientUpdate(cid, np.zeros(model.n_params), 0, flag=flag)
        grads = model.per_example_gradients(weights, x, y)
        return ClientUpdate(cid, grads.mean(axis=0), int(idx.size), flag=flag)

    c = settings.clip_instance
    if idx.size:
        clipped_sum = clip_rows(model.per_example_gradients(weights, x, y), c).sum(axis=0)
    else:
        clipped_sum = np.zeros(model.n_params)
    noisy = gaussian_perturb(clipped_sum, c * settings.sigma_instance,
                             rng.child(round_index, ROLE_CLIENT_NOISE, cid))
    out = ClientUpdate(cid, noisy / shard.batch_size, int(idx.size), flag=flag)

    if settings.client_noise:
        sens_rng = rng.child(round_index, ROLE_SENSITIVITY, cid)
        m_local = min(shard.n_local, max(2, min(settings.instance_samples, shard.batch_size)))
        pick = sens_rng.choice(shard.n_local, m_local)
        norms = np.linalg.norm(clip_rows(model.per_example_gradients(
            weights, shard.data.features[pick], shard.data.labels[pick]), c), axis=1)
        params = MechanismParams(settings.sigma_instance, c,
                                 instance_q(settings, shard, total_examples))
        # Union bound: the participants' failure masses add up to delta_prime.
        n = broadcast.participants if broadcast else 1
        out.instance_cost = estimate_round_cost(norms, params, settings.grid,
                                                settings.delta_prime / n, drop_saturated=True)

    if settings.mode == "joint" and settings.client_noise:
        # Removing this client's whole (noiseless) contribution from the
        # sum-normalised average moves it by this much.
        shift = float(np.linalg.norm(clipped_sum / shard.batch_size)) / broadcast.participants
        params = MechanismParams(broadcast.sigma_eff, 1.0, settings.participation)
        out.joint_log_values = sample_log_values([shift], params, settings.grid,
                                                 drop_saturated=True)[0]
    return out


def leave_one_out_norms(updates: np.ndarray, which: np.ndarray) -> np.ndarray:
    """``||mean(all) - mean(all except j)||`` for each ``j`` in ``which``."""
    n = len(updates)
    if n < 2:
        raise ValueError("need >= 2 participants")
    total = updates.sum(axis=0)
    mean = total / n
    rest = (total[None, :] - updates[which]) / (n - 1)
    return np.linalg.norm(mean[None, :] - rest, axis=1)


def aggregate(updates, settings: PrivacySettings, rng: RngStream,
              round_index: int = 0) -> tuple[np.ndarray, np.ndarray | None]:
    """Server step: returns ``(model delta, client-level sensitivity samples)``.

    With server noise (client mode, or instance modes with a positive
    ``sigma_client``) updates are clipped to ``clip_client``, averaged and
    noised; the sensitivity samples are leave-one-out norms of the
    noiseless average. Otherwise the plain average is returned with no
    samples (``None``).
    """
    u = np.stack([np.asarray(v, dtype=float) for v in updates])
    if len(u) == 0:
        raise ValueError("no updates to aggregate")
    if settings.mode == "client" or settings.server_noise:
        u = clip_rows(u, settings.clip_client)
        if len(u) < 2:
            raise ValueError("need >= 2 participants")
        n = len(u)
        m = settings.estimator_samples
        which = (np.arange(n) if m == 0 or m >= n else
                 np.sort(rng.child(round_index, ROLE_SENSITIVITY, 0xFFFFFF).choice(n, m)))
        norms = leave_one_out_norms(u, which)
        noise_std = settings.clip_client * settings.sigma_client
        delta = gaussian_perturb(u.mean(axis=0), noise_std,
                                 rng.child(round_index, ROLE_SERVER_NOISE))
        return delta, norms
    return u.mean(axis=0), None


def _epsilons(ledgers: Ledgers, settings: PrivacySettings) -> tuple[float, float, float, float]:
    inf = math.inf
    eps_c = eps_i = inf
    deltas = []
    for name in ("client", "instance"):
        led = getattr(ledgers, name)
        if led is None:
            continue
        ed = epsilon_for_delta(led, settings.delta_tail)
        deltas.append(ed.delta)
        if name == "client":
            eps_c = ed.epsilon
        else:
            eps_i = ed.epsilon
    eps_dp = dp_ledger_epsilon(ledgers.dp, settings.delta) if ledgers.dp else inf
    delta_total = max(deltas) if deltas else settings.delta
    return eps_dp, eps_c, eps_i, delta_total


def _dp_moments(settings: PrivacySettings, shards, total_examples: int) -> np.ndarray:
    g = settings.grid
    if settings.dp_level == "client":
        return dp_log_moments(MechanismParams(settings.sigma_client, settings.clip_client,
                                              settings.participation), g)
    rows = [dp_log_moments(MechanismParams(settings.sigma_instance, settings.clip_instance,
                                           instance_q(settings, sh, total_examples)), g)
            for sh in shards]
    rows = np.stack(rows)
    return rows.max(axis=0) if settings.mode == "instance_par" else rows.sum(axis=0)


class Simulation:
    """Mutable run state: model weights, ledgers and the round counter."""

    def __init__(self, cfg: ExperimentConfig, clients=None, train=None, test=None):
        self.cfg = cfg
        self.settings = PrivacySettings.from_config(cfg)
        self.rng = RngStream(cfg.experiment.seed)
        if clients is None:
            clients, train, test = build_federation(cfg, self.rng)
        self.clients = clients
        self.train = train
        self.test = test
        m = cfg.model
        self.model = Model(m.kind, m.dimension, m.classes, m.hidden)
        if train.dimension != m.dimension:
            raise ConfigError(f"model.dimension {m.dimension} does not match data "
                              f"dimension {train.dimension}")
        self.weights = self.model.init(self.rng.child(0, ROLE_INIT))
        self.ledgers = Ledgers.fresh(self.settings)
        self.total_examples = sum(c.n_local for c in clients)
        self.round = 0
        self.stopped = False

    def accuracies(self) -> tuple[float, float]:
        return (self.model.accuracy(self.weights, self.train),
                self.model.accuracy(self.weights, self.test))

    def run_round(self) -> RoundRecord:
        """Advance one round and return its record."""
        start = time.perf_counter()
        s = self.settings
        t = self.round + 1
        picked = sample_subset(len(self.clients), s.participation,
                               self.rng.child(t, ROLE_PARTICIPATION))
        shards = [self.clients[i] for i in picked]
        n = len(shards)
        needs_pairs = s.mode == "client" or s.server_noise or (s.mode == "joint" and s.client_noise)
        flag = ""
        applied = None
        if n == 0 or (needs_pairs and n < 2):
            flag = "skipped"
            ledgers = self.ledgers
        else:
            broadcast = RoundBroadcast(n, joint_sigma_eff(s, shards))
            updates = [local_update(self.model, self.weights, sh, s, self.rng, t,
                                    self.total_examples, broadcast) for sh in shards]
            if any(u.flag for u in updates):
                flag = "empty_batch"
            delta, norms = aggregate([u.update for u in updates], s, self.rng, t)
            ledgers = self._account(updates, shards, norms)
            applied = delta
        self.round = t
        budget = self.cfg.privacy.epsilon_budget
        eps = _epsilons(ledgers, s)
        if budget is not None and any(math.isfinite(e) and e > budget for e in eps[:3]):
            eps = _epsilons(self.ledgers, s)
            self.stopped = True
            flag, applied = "budget_stop", None
        else:
            self.ledgers = ledgers
            if applied is not None:
                self.weights = self.weights - self.cfg.model.learning_rate * applied
        train_acc, test_acc = self.accuracies()
        return RoundRecord(t, train_acc, test_acc, *eps, participants=n,
                           wall_clock=time.perf_counter() - start, flag=flag,
                           applied_update=applied)

    def _account(self, updates, shards, norms) -> Ledgers:
        s = self.settings
        client, instance, dp = self.ledgers.client, self.ledgers.instance, self.ledgers.dp
        if s.server_noise:
            params = MechanismParams(s.sigma_client, s.clip_client, s.participation)
            client = ledger_add(client, estimate_round_cost(norms, params, s.grid,
                                                            s.delta_prime, drop_saturated=True))
        elif s.mode == "joint" and s.client_noise:
            rows = np.stack([u.joint_log_values for u in updates])
            client = ledger_add(client, estimate_from_log_values(rows, s.grid, s.delta_prime))
        if s.client_noise:
            how = "max" if s.mode == "instance_par" else "sum"
            est = combine_estimates([u.instance_cost for u in updates], how)
            instance = ledger_add(instance, est)
        if dp is not None:
            dp = dp_ledger_add(dp, _dp_moments(s, shards, self.total_examples))
        return Ledgers(client, instance, dp)

    def run(self, rounds: int | None = None):
        """Yield records until the round budget or the epsilon budget is hit."""
        total = self.cfg.experiment.rounds if rounds is None else rounds
        while self.round < total and not self.stopped:
            yield self.run_round()


def _stratified_synthetic(cfg: ExperimentConfig, rng: RngStream) -> tuple[DataSet, DataSet]:
    k = cfg.model.classes
    n_train = cfg.experiment.clients * cfg.data.per_client
    n_test = cfg.data.test_size

    def spread(n):
        return [n // k + (1 if c < n % k else 0) for c in range(k)]

    train_counts, test_counts = spread(n_train), spread(n_test)
    data = synth_data(k, cfg.model.dimension, [a + b for a, b in zip(train_counts, test_counts)],
                      cfg.data.separation, rng, cfg.data.noise)
    test_idx = np.concatenate([np.flatnonzero(data.labels == c)[:test_counts[c]]
                               for c in range(k)])
    mask = np.ones(data.n, dtype=bool)
    mask[test_idx] = False
    return data.subset(np.flatnonzero(mask)), data.subset(np.sort(test_idx))


def build_federation(cfg: ExperimentConfig, rng: RngStream):
    """Data, test set and client shards for a config; deterministic in the seed."""
    e, d = cfg.experiment, cfg.data
    if d.kind == "synthetic":
        train, test = _stratified_synthetic(cfg, rng.child(0, ROLE_DATA))
    else:
        train = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels)
        if test.n > d.test_size > 0:
            test = test.subset(np.arange(d.test_size))
        use = e.clients * d.per_client
        if use > train.n:
            raise ConfigError(f"{e.clients} clients x {d.per_client} examples exceed the "
                              f"{train.n} training examples")
        train = train.subset(np.sort(rng.child(0, ROLE_DATA).permutation(train.n)[:use]))
    prng = rng.child(0, ROLE_PARTITION)
    batch = cfg.privacy.batch
    if e.partition == "iid":
        clients = partition_iid(train, e.clients, prng, batch, e.participation)
    else:
        size = e.shard_size or d.per_client // e.shards_per_client
        if size < 1:
            raise ConfigError("experiment.shard_size resolves to 0; set it explicitly")
        clients = partition_shards(train, e.clients, e.shards_per_client, size, prng,
                                   batch, e.participation)
    return clients, train, test


def run_experiment(cfg: ExperimentConfig) -> list[RoundRecord]:
    """All records of a run; deterministic given the config (and its seed)."""
    return list(Simulation(cfg).run())


def run_header(cfg: ExperimentConfig) -> str:
    """Self-describing run header: seed, generator, mode, disclosures, config."""
    s = PrivacySettings.from_config(cfg)
    lines = [
        f"seed = {cfg.experiment.seed}",
        f"generator_family = {GENERATOR_FAMILY}",
        f"mode = {s.mode}",
        f"broadcast_total_examples = {'yes' if s.mode in ('instance_seq', 'joint') else 'no'}",
        f"broadcast_joint_round_params = {'yes' if s.mode == 'joint' else 'no'}",
        "joint_noise_reading = effective std of the averaged client noise" if s.mode == "joint"
        else "joint_noise_reading = n/a",
        f"eps_dp_level = {s.dp_level}",
        f"delta_tail_bdp = {s.delta_tail!r}",
        f"delta_prime_per_round = {s.delta_prime!r}",
        "",
        cfg.to_text(),
    ]
    return "\n".join(lines)
