"""
This file contains the hierarchical agents: managers (one per district) emit unit-norm goals from a two-layer MLP
and a dilated recurrent cell; workers (one per grid) turn their observation, peer message and their manager's goal
into a ranking weight vector. Peers exchange messages through multi-head attention, first among sibling workers of
a district, then among managers of adjacent districts.

All managers share one set of parameters and all workers another. A whole level is evaluated as one batch.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.special import expit

from ride_core.constants import *
from ride_core.hexgrid import GridWorld
from ride_core.market import MarketSimulator, SimState, StepOutcome, manager_reward, observe_manager, observe_worker
from ride_core.metric_tracker import MetricTracker
from ride_core.orders import Order, build_fake_orders
from coride.neural import MLP, Dense, DilatedRNN, ParamStore, RecurrentState, RNNCell
from coride.ranking import (GridEmbedding, RankingConfig, feature_length, featurize_items, score, selected_k,
                            selection_rng)

logger = logging.getLogger(__name__)

WORKER_LEVEL = "worker"
MANAGER_LEVEL = "manager"


@dataclass(frozen=True)
class AgentConfig:
    hidden_size: int = HIDDEN_SIZE
    goal_size: int = GOAL_SIZE
    goal_embedding_size: int = HIDDEN_SIZE
    dilation: int = MANAGER_DILATION
    heads: int = ATTENTION_HEADS
    attention_temperature: float = 1.0
    horizon: int = MANAGER_DILATION
    beta: float = 0.5
    count_scale: float = 10.0


def observation_scale(agent_config: AgentConfig, ranking_config: RankingConfig) -> Array:
    """ Divisors that bring a raw worker observation vector to order-one magnitudes. """
    counts, price, duration = agent_config.count_scale, ranking_config.reference_price, ranking_config.max_duration
    return np.array([counts, counts, 1.0, counts, price, price, duration, duration, counts])


def normalize_goal(goal_raw: Array) -> Tuple[Array, Array]:
    """ Row-wise g = g_hat / |g_hat|; rows with |g_hat| below ZERO_GOAL_NORM fall back to the first basis vector. """
    norms = np.linalg.norm(goal_raw, axis=1, keepdims=True)
    fallback = norms[:, 0] < ZERO_GOAL_NORM
    goals = goal_raw / np.where(fallback[:, None], 1.0, norms)
    goals[fallback] = 0.0
    goals[fallback, 0] = 1.0
    return goals, norms


def normalize_goal_backward(goals: Array, norms: Array, grad_goals: Array) -> Array:
    grad_raw = (grad_goals - goals * np.sum(goals * grad_goals, axis=1, keepdims=True)) / np.maximum(norms, ZERO_GOAL_NORM)
    grad_raw[norms[:, 0] < ZERO_GOAL_NORM] = 0.0
    return grad_raw


class ManagerModule:
    """
    [observation || message] -> two-layer MLP -> dilated RNN -> (h^M, g_hat) -> g = g_hat / |g_hat|
    """

    def __init__(self, store: ParamStore, obs_size: int, config: AgentConfig, rng: np.random.Generator):
        d_h = config.hidden_size
        self.store = store
        self.obs_size = obs_size
        self.config = config
        self.encoder = MLP(store, "manager.encoder", [obs_size + d_h, d_h, d_h], rng)
        self.rnn = DilatedRNN(RNNCell(store, "manager.rnn", d_h, d_h, rng), config.dilation)
        self.goal_head = Dense(store, "manager.goal", d_h, config.goal_size, rng)

    def initial_state(self, batch: int) -> RecurrentState:
        return self.rnn.initial_state(batch)

    def forward(self, obs: Array, msg: Array, state: RecurrentState):
        x = np.concatenate((np.atleast_2d(obs), np.atleast_2d(msg)), axis=1)
        encoded, encoder_cache = self.encoder.forward(x)
        new_state, h, rnn_cache = self.rnn.step(state, encoded)
        goal_raw, head_cache = self.goal_head.forward(h)
        goals, norms = normalize_goal(goal_raw)
        return goals, new_state, h, (encoder_cache, rnn_cache, head_cache, goals, norms)

    def backward(self, cache, grad_goals: Array) -> Array:
        encoder_cache, rnn_cache, head_cache, goals, norms = cache
        grad_h = self.goal_head.backward(head_cache, normalize_goal_backward(goals, norms, grad_goals))
        grad_encoded = self.rnn.backward(rnn_cache, grad_h)
        return self.encoder.backward(encoder_cache, grad_encoded)

    # Deterministic policy used by the trainer: recurrent context replaced by a fresh (zero) ring
    def policy(self, msgs: Array, obs: Array, agent_ids: Array):
        goals, _, _, cache = self.forward(obs, msgs, self.initial_state(len(obs)))
        return goals, cache

    def policy_backward(self, cache, grad_actions: Array) -> Array:
        grad_x = self.backward(cache, grad_actions)
        return grad_x[:, self.obs_size:]


def manager_act(module: ManagerModule, obs: Array, msg: Array, state: RecurrentState):
    goals, new_state, h, _ = module.forward(obs, msg, state)
    return goals, new_state, h


def pad_to(w: Array, size: int) -> Array:
    """ Tile or truncate the last axis of w to `size`. """
    return w[..., np.arange(size) % w.shape[-1]]


class WorkerModule:
    """
    [observation || message || embedding(grid)] -> RNN -> u;  w = g W_phi;  omega = [u || u * pad(w)] W_a + b_a
    """

    def __init__(self, store: ParamStore, n_grids: int, config: AgentConfig, ranking_config: RankingConfig,
                 rng: np.random.Generator):
        d_h = config.hidden_size
        self.store = store
        self.config = config
        self.embedding = GridEmbedding(store, "worker.embedding", n_grids, ranking_config.embedding_size, rng)
        self.cell = RNNCell(store, "worker.rnn", OBSERVATION_LENGTH + d_h + ranking_config.embedding_size, d_h, rng)
        self.goal_embedding = Dense(store, "worker.goal_embedding", config.goal_size, config.goal_embedding_size, rng,
                                    bias=False)
        self.action_head = Dense(store, "worker.action", 2 * d_h, feature_length(ranking_config.embedding_size), rng)
        self.action_size = self.action_head.n_out

    def initial_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, self.config.hidden_size)

    def goal_embed(self, goals: Array) -> Array:
        return self.goal_embedding.forward(goals)[0]

    def forward(self, obs: Array, msg: Array, grids: Array, goals: Array, state: RecurrentState):
        d_h = self.config.hidden_size
        grids = np.asarray(grids, dtype=Int)
        x = np.concatenate((np.atleast_2d(obs), np.atleast_2d(msg), self.embedding.lookup(grids)), axis=1)
        u, cell_cache = self.cell.forward(state.hidden, x)
        w, goal_cache = self.goal_embedding.forward(goals)
        padded = pad_to(w, d_h)
        z = np.concatenate((u, u * padded), axis=1)
        omega, head_cache = self.action_head.forward(z)
        new_state = RecurrentState(u[:, None, :].copy(), 0)
        return omega, new_state, u, (grids, cell_cache, goal_cache, u, w, padded, head_cache)

    def backward(self, cache, grad_omega: Array) -> Array:
        """ Returns the gradient w.r.t. [observation || message]; embedding rows receive theirs in the store. """
        d_h = self.config.hidden_size
        grids, cell_cache, goal_cache, u, w, padded, head_cache = cache
        grad_z = self.action_head.backward(head_cache, grad_omega)
        grad_u = grad_z[:, :d_h] + grad_z[:, d_h:] * padded
        grad_padded = grad_z[:, d_h:] * u
        grad_w = np.zeros_like(w)
        np.add.at(grad_w.T, np.arange(d_h) % w.shape[1], grad_padded.T)
        self.goal_embedding.backward(goal_cache, grad_w)
        _, grad_x = self.cell.backward(cell_cache, grad_u)
        split = grad_x.shape[1] - self.embedding.size
        self.embedding.backward(grids, grad_x[:, split:])
        return grad_x[:, :split]

    # Deterministic policy used by the trainer; obs is [worker observation || goal]
    def policy(self, msgs: Array, obs: Array, agent_ids: Array):
        omega, _, _, cache = self.forward(obs[:, :OBSERVATION_LENGTH], msgs, agent_ids, obs[:, OBSERVATION_LENGTH:],
                                          self.initial_state(len(obs)))
        return omega, cache

    def policy_backward(self, cache, grad_actions: Array) -> Array:
        return self.backward(cache, grad_actions)[:, OBSERVATION_LENGTH:]


def goal_embed(module: WorkerModule, goal: Array) -> Array:
    return module.goal_embed(np.atleast_2d(goal))[0]


def worker_act(module: WorkerModule, obs: Array, msg: Array, w_grid: int, goal: Array, state: RecurrentState):
    omega, new_state, u, _ = module.forward(obs, msg, [w_grid], np.atleast_2d(goal), state)
    return omega[0], new_state, u[0]


def cosine(a: Array, b: Array) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def intrinsic_reward(obs_history: Sequence[Array], goal_history: Sequence[Array], horizon: int,
                     projection: Optional[Array] = None) -> float:
    """
    (1/c) sum_{i=1..c} cos(o_t - o_{t-i}, g_{t-i}), where the histories end at the current step and
    goal_history[j] is the goal in force at obs_history[j]. Fewer than c past steps average over what is there.
    Observation differences are mapped into goal space by `projection`, or zero-padded/truncated without one.
    """
    if len(obs_history) < 2 or len(goal_history) != len(obs_history):
        raise ValueError("Intrinsic reward needs aligned histories covering at least one past step.")
    current = np.asarray(obs_history[-1], dtype=float)
    available = min(horizon, len(obs_history) - 1)
    total = 0.0
    for i in range(1, available + 1):
        diff = current - np.asarray(obs_history[-1 - i], dtype=float)
        goal = np.asarray(goal_history[-1 - i], dtype=float)
        if projection is not None:
            diff = projection @ diff
        elif diff.shape != goal.shape:
            diff = np.resize(np.concatenate((diff, np.zeros(max(0, len(goal) - len(diff))))), len(goal))
        total += cosine(diff, goal)
    return total / available


class MultiHeadAttention:
    """
    Per head n: logits (h_i W_T^n)(h_j W_S^n)^T / iota, softmax over the neighbourhood of i;
    message m_i = sigmoid(W_q (1/H sum_n sum_j alpha_ij^n h_j W_C^n) + b_q).
    """

    def __init__(self, store: ParamStore, name: str, hidden: int, heads: int, rng: np.random.Generator,
                 temperature: float = 1.0):
        if heads < 1 or hidden % heads:
            raise ValueError(f"{heads} heads do not divide hidden size {hidden}.")
        self.store = store
        self.hidden, self.heads, self.temperature = hidden, heads, temperature
        d_k = hidden // heads
        self.w_t = store.add(f"{name}.w_t", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(heads, hidden, d_k)))
        self.w_s = store.add(f"{name}.w_s", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(heads, hidden, d_k)))
        self.w_c = store.add(f"{name}.w_c", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(heads, hidden, hidden)))
        self.w_q = store.add(f"{name}.w_q", rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)))
        self.b_q = store.add(f"{name}.b_q", np.zeros(hidden))

    def forward(self, h: Array, mask: Array):
        """ h: (A, hidden); mask: (A, A) boolean, mask[i, j] when j is in the neighbourhood of i. """
        if h.ndim != 2 or h.shape[1] != self.hidden:
            raise ShapeError(f"Attention inputs must have shape (agents, {self.hidden}), got {h.shape}.")
        if not mask.any(axis=1).all():
            raise ValueError("Every agent needs a nonempty neighbourhood.")
        q = np.einsum("ad,ndk->nak", h, self.store[self.w_t])
        k = np.einsum("ad,ndk->nak", h, self.store[self.w_s])
        v = np.einsum("ad,ndc->nac", h, self.store[self.w_c])
        logits = np.einsum("nik,njk->nij", q, k) / self.temperature
        logits = np.where(mask[None], logits, -np.inf)
        logits -= logits.max(axis=2, keepdims=True)
        weights = np.exp(logits)
        alphas = weights / weights.sum(axis=2, keepdims=True)
        context = np.einsum("nij,njc->ic", alphas, v) / self.heads
        messages = expit(context @ self.store[self.w_q] + self.store[self.b_q])
        return messages, alphas, (h, q, k, v, alphas, context, messages)

    def backward(self, cache, grad_messages: Array) -> Array:
        h, q, k, v, alphas, context, messages = cache
        grad_pre = grad_messages * messages * (1.0 - messages)
        self.store.accumulate(self.w_q, context.T @ grad_pre)
        self.store.accumulate(self.b_q, grad_pre.sum(axis=0))
        grad_context = grad_pre @ self.store[self.w_q].T / self.heads
        grad_v = np.einsum("nij,ic->njc", alphas, grad_context)
        grad_alphas = np.einsum("ic,njc->nij", grad_context, v)
        grad_logits = alphas * (grad_alphas - np.sum(alphas * grad_alphas, axis=2, keepdims=True)) / self.temperature
        grad_q = np.einsum("nij,njk->nik", grad_logits, k)
        grad_k = np.einsum("nij,nik->njk", grad_logits, q)
        self.store.accumulate(self.w_t, np.einsum("ad,nak->ndk", h, grad_q))
        self.store.accumulate(self.w_s, np.einsum("ad,nak->ndk", h, grad_k))
        self.store.accumulate(self.w_c, np.einsum("ad,nac->ndc", h, grad_v))
        return (np.einsum("nak,ndk->ad", grad_q, self.store[self.w_t])
                + np.einsum("nak,ndk->ad", grad_k, self.store[self.w_s])
                + np.einsum("nac,ndc->ad", grad_v, self.store[self.w_c]))


def attention_exchange(inputs: Mapping[int, Array], neighborhoods: Mapping[int, Set[int]],
                       attention: MultiHeadAttention):
    """
    Messages for every agent in `inputs`. Returns (messages by agent, alphas of shape (heads, A, A) over the
    sorted agent list, the sorted agent list, backward cache).
    """
    agents = sorted(inputs)
    position = {a: i for i, a in enumerate(agents)}
    mask = np.zeros((len(agents), len(agents)), dtype=bool)
    for agent in agents:
        neighborhood = neighborhoods.get(agent, set())
        if not neighborhood:
            raise ValueError(f"Agent {agent} has an empty neighbourhood.")
        for other in neighborhood:
            if other in position:
                mask[position[agent], position[other]] = True
    h = np.stack([np.asarray(inputs[a], dtype=float) for a in agents])
    messages, alphas, cache = attention.forward(h, mask)
    return {a: messages[i] for i, a in enumerate(agents)}, alphas, agents, cache


@dataclass
class AttentionRecord:
    level: str
    agents: List[int]
    alphas: Array
    neighborhoods: Dict[int, Set[int]]

    def rows(self, step: int):
        for head in range(self.alphas.shape[0]):
            for i, source in enumerate(self.agents):
                for j, target in enumerate(self.agents):
                    if target in self.neighborhoods[source]:
                        yield step, self.level, head, source, target, float(self.alphas[head, i, j])


@dataclass
class CoRideMemory:
    """ Per-episode recurrent context: recurrent states, the last messages and the intrinsic-reward histories. """
    manager_state: RecurrentState
    worker_state: RecurrentState
    manager_messages: Array
    worker_messages: Array
    obs_history: deque
    goal_history: deque


@dataclass
class CoRideStepResult:
    decisions: Dict[int, List[Order]]
    outcome: StepOutcome
    manager_rewards: Array
    intrinsic_rewards: Array
    manager_obs: Array
    manager_obs_next: Array
    worker_obs: Array
    worker_obs_next: Array
    goals: Array
    worker_goals: Array
    omegas: Array
    manager_messages_prev: Array
    manager_messages: Array
    worker_messages_prev: Array
    worker_messages: Array
    attention: List[AttentionRecord] = field(default_factory=list)
    worker_attention_caches: List[tuple] = field(default_factory=list)
    manager_attention_cache: Optional[tuple] = None


class CoRideAgents:
    """
    Shared manager and worker modules, both attention levels, and the fixed observation-to-goal projection used
    by the intrinsic reward.
    """

    def __init__(self, world: GridWorld, config: AgentConfig = AgentConfig(),
                 ranking_config: RankingConfig = RankingConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.world = world
        self.config = config
        self.ranking_config = ranking_config
        self.obs_scale = observation_scale(config, ranking_config)
        self.manager_obs_size = world.max_district_size * OBSERVATION_LENGTH
        self.manager_store, self.worker_store = ParamStore(), ParamStore()
        self.manager_comm_store, self.worker_comm_store = ParamStore(), ParamStore()
        self.manager = ManagerModule(self.manager_store, self.manager_obs_size, config, rng)
        self.worker = WorkerModule(self.worker_store, world.n_grids, config, ranking_config, rng)
        self.manager_attention = MultiHeadAttention(self.manager_comm_store, "manager_attention", config.hidden_size,
                                                    config.heads, rng, config.attention_temperature)
        self.worker_attention = MultiHeadAttention(self.worker_comm_store, "worker_attention", config.hidden_size,
                                                   config.heads, rng, config.attention_temperature)
        # untrained: maps observation differences into goal space for the intrinsic reward
        self.projection = np.random.default_rng([seed, 1]).normal(
            0.0, 1.0 / np.sqrt(OBSERVATION_LENGTH), size=(config.goal_size, OBSERVATION_LENGTH))

        # worker neighbourhood: siblings under the same manager plus self
        self.worker_neighborhoods = {g: set(world.members(world.districts[g])) for g in range(world.n_grids)}
        # manager neighbourhood: managers of adjacent districts plus self
        self.manager_neighborhoods = {d: set(world.adjacent_districts(d)) | {d} for d in range(world.n_districts)}

    def stores(self) -> Dict[str, ParamStore]:
        return {"manager": self.manager_store, "worker": self.worker_store,
                "manager_attention": self.manager_comm_store, "worker_attention": self.worker_comm_store}

    def worker_observations(self, state: SimState) -> Array:
        return np.stack([observe_worker(state, g).as_vector() for g in range(self.world.n_grids)]) / self.obs_scale

    def manager_observations(self, state: SimState) -> Array:
        scale = np.tile(self.obs_scale, self.world.max_district_size)
        return np.stack([observe_manager(state, self.world, d) for d in range(self.world.n_districts)]) / scale

    def initial_memory(self, state: SimState) -> CoRideMemory:
        d_h = self.config.hidden_size
        return CoRideMemory(self.manager.initial_state(self.world.n_districts),
                            self.worker.initial_state(self.world.n_grids),
                            np.zeros((self.world.n_districts, d_h)), np.zeros((self.world.n_grids, d_h)),
                            deque([self.worker_observations(state)], maxlen=self.config.horizon + 1),
                            deque(maxlen=self.config.horizon))

    def item_space(self, state: SimState, grid: int, fleet_control: bool) -> List[Order]:
        items = list(state.pending_orders[grid])
        if fleet_control:
            items += build_fake_orders(self.world, grid)
        return items


def coride_step(agents: CoRideAgents, simulator: MarketSimulator, memory: CoRideMemory, temperature: float,
                seed: int = 0, fleet_control: bool = True, greedy: bool = False) -> CoRideStepResult:
    """
    One timestep of hierarchical dispatch: goals for every manager, ranking weights for every worker, Selected-k
    over each grid's item space, the market transition, worker-level attention per district, manager and intrinsic
    rewards, and finally manager-level attention. `memory` is updated in place for the next step.
    """
    world = agents.world
    state = simulator.state
    stats = simulator.world_stats(state)

    manager_obs = agents.manager_observations(state)
    goals, memory.manager_state, h_managers, _ = agents.manager.forward(manager_obs, memory.manager_messages,
                                                                         memory.manager_state)
    worker_obs = memory.obs_history[-1]
    worker_goals = goals[np.asarray(world.districts)]
    grids = np.arange(world.n_grids)
    omegas, memory.worker_state, h_workers, _ = agents.worker.forward(worker_obs, memory.worker_messages, grids,
                                                                      worker_goals, memory.worker_state)

    embeddings = agents.worker.embedding.lookup(grids)
    decisions = {}
    for grid in range(world.n_grids):
        items = agents.item_space(state, grid, fleet_control)
        k = min(int(state.idle[grid]), len(items))
        if k == 0:
            continue
        scores = score(omegas[grid], featurize_items(items, state, embeddings, agents.ranking_config))
        picks = selected_k(scores, k, temperature, selection_rng(seed, simulator.episode, state.clock, grid), greedy)
        decisions[grid] = [items[i] for i in picks]

    logger.debug(f"t={state.clock} tau={temperature:.4f} selected "
                 f"{sum(len(items) for items in decisions.values())} items over {len(decisions)} grids")
    outcome = simulator.advance(decisions)
    next_state = simulator.state

    records, worker_caches = [], []
    worker_messages = np.zeros_like(memory.worker_messages)
    for district in range(world.n_districts):
        members = world.members(district)
        messages, alphas, agent_ids, cache = attention_exchange({g: h_workers[g] for g in members},
                                                                agents.worker_neighborhoods, agents.worker_attention)
        for g in members:
            worker_messages[g] = messages[g]
        records.append(AttentionRecord(WORKER_LEVEL, agent_ids, alphas, agents.worker_neighborhoods))
        worker_caches.append((agent_ids, cache))

    manager_rewards = np.array([manager_reward(state, outcome, world, d, stats) for d in range(world.n_districts)])
    worker_obs_next = agents.worker_observations(next_state)
    memory.goal_history.append(worker_goals)
    memory.obs_history.append(worker_obs_next)
    intrinsic = np.array([
        intrinsic_reward([o[g] for o in memory.obs_history], [g_[g] for g_ in memory.goal_history] + [worker_goals[g]],
                         agents.config.horizon, agents.projection)
        for g in range(world.n_grids)])

    messages, alphas, agent_ids, manager_cache = attention_exchange(
        {d: h_managers[d] for d in range(world.n_districts)}, agents.manager_neighborhoods, agents.manager_attention)
    manager_messages = np.stack([messages[d] for d in range(world.n_districts)])
    records.append(AttentionRecord(MANAGER_LEVEL, agent_ids, alphas, agents.manager_neighborhoods))

    result = CoRideStepResult(decisions, outcome, manager_rewards, intrinsic, manager_obs,
                              agents.manager_observations(next_state), worker_obs, worker_obs_next, goals,
                              worker_goals, omegas, memory.manager_messages, manager_messages,
                              memory.worker_messages, worker_messages, records, worker_caches, manager_cache)
    memory.manager_messages = manager_messages
    memory.worker_messages = worker_messages
    return result


def run_coride_episode(agents: CoRideAgents, simulator: MarketSimulator, episode: int, temperature: float,
                       seed: Optional[int] = None, fleet_control: bool = True, greedy: bool = False,
                       record_decisions=False, keep_attention=False):
    """
    Play one evaluation episode with fixed parameters. Returns (tracker, attention rows, mean intrinsic reward).
    """
    seed = simulator.seed if seed is None else seed
    simulator.reset(episode)
    memory = agents.initial_memory(simulator.state)
    rows, intrinsic = [], []
    with MetricTracker(simulator, record_decisions=record_decisions, debug_mode=simulator.debug_mode) as tracker:
        while not simulator.done:
            clock = simulator.state.clock
            result = coride_step(agents, simulator, memory, temperature, seed, fleet_control, greedy)
            intrinsic.append(result.intrinsic_rewards.mean())
            if keep_attention:
                for record in result.attention:
                    rows.extend(record.rows(clock))
    return tracker, rows, float(np.mean(intrinsic)) if intrinsic else 0.0
