"""
This file contains the actor-critic training of both agent roles: a ring replay buffer, per-role critics with
target copies, the deterministic policy gradient updates, the update of the attention (communication) parameters
through freshly produced messages, and the episode loop that ties them to the simulator.

Actors are the shared ManagerModule and WorkerModule. A transition stores the message the agent consumed
(m_{t-1}), its observation, action and reward, the next observation and the message it will consume next (m_t).
Recurrent states are not stored; the actor is evaluated from a zero recurrent state during updates.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from ride_core.constants import *
from ride_core.hexgrid import GridWorld
from ride_core.market import MarketConfig, MarketSimulator
from ride_core.metric_tracker import MetricTracker
from ride_core.orders import OrderSource
from coride.agents import (AgentConfig, CoRideAgents, CoRideStepResult, ManagerModule, WorkerModule, coride_step)
from coride.baselines import RandomPolicy, run_rule_episode
from coride.neural import MLP, Adam, ParamStore, save_checkpoint, soft_update
from coride.ranking import RankingConfig, anneal_temperature

logger = logging.getLogger(__name__)

# Calibration episodes use their own episode ids so they never share a random stream with training
CALIBRATION_EPISODE_OFFSET = 1_000_000

EPISODE_LOG_COLUMNS = ["episode", "seed", "ADI", "ORR", "mean_intrinsic_reward", "mean_critic_loss"]


@dataclass(frozen=True)
class TrainingConfig:
    episodes: int = 20
    gamma: float = 0.95
    buffer_capacity: int = 100_000
    batch_size: int = 32
    warmup: int = 500
    soft_tau: float = 0.01
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    communication_lr: float = 1e-4
    critic_hidden: int = HIDDEN_SIZE
    reward_scale: float = 0.01
    updates_per_step: int = 1
    checkpoint_every: int = 5
    calibration_episodes: int = 1
    fleet_control: bool = True

    def validate(self):
        if self.episodes < 0:
            raise ConfigError(f"[training] episodes must be non-negative, got {self.episodes}.")
        if self.batch_size < 1:
            raise ConfigError(f"[training] batch_size must be positive, got {self.batch_size}.")
        if self.batch_size > self.warmup:
            raise ConfigError(f"[training] batch_size ({self.batch_size}) exceeds warmup ({self.warmup}).")
        if self.warmup > self.buffer_capacity:
            raise ConfigError(f"[training] warmup ({self.warmup}) exceeds buffer_capacity ({self.buffer_capacity}).")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"[training] gamma must lie in [0, 1], got {self.gamma}.")
        if not 0.0 <= self.soft_tau <= 1.0:
            raise ConfigError(f"[training] soft_tau must lie in [0, 1], got {self.soft_tau}.")
        if self.checkpoint_every < 1:
            raise ConfigError(f"[training] checkpoint_every must be positive, got {self.checkpoint_every}.")


@dataclass
class Transition:
    msg_prev: Array
    obs: Array
    action: Array
    reward: float
    obs_next: Array
    msg: Array
    done: bool
    agent_id: int = 0


@dataclass
class Batch:
    msg_prev: Array
    obs: Array
    action: Array
    reward: Array
    obs_next: Array
    msg: Array
    done: Array
    agent_id: Array

    def __len__(self):
        return len(self.reward)


class ReplayBuffer:
    """ Fixed-capacity ring of transitions for one agent role; the oldest entry is overwritten when full. """

    def __init__(self, capacity: int, msg_size: int, obs_size: int, action_size: int):
        if capacity < 1:
            raise ValueError(f"Replay capacity must be positive, got {capacity}.")
        self.capacity = capacity
        self.widths = {"msg_prev": msg_size, "obs": obs_size, "action": action_size, "obs_next": obs_size,
                       "msg": msg_size}
        self.vectors = {name: np.zeros((capacity, width)) for name, width in self.widths.items()}
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.agent_id = np.zeros(capacity, dtype=Int)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, transition: Transition):
        for name, width in self.widths.items():
            value = np.asarray(getattr(transition, name), dtype=float)
            if value.shape != (width,):
                raise ShapeError(f"Transition field {name} has shape {value.shape}, buffer expects ({width},).")
        for name in self.widths:
            self.vectors[name][self.cursor] = getattr(transition, name)
        self.reward[self.cursor] = transition.reward
        self.done[self.cursor] = transition.done
        self.agent_id[self.cursor] = transition.agent_id
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, index: int) -> Transition:
        """ index 0 is the oldest stored transition """
        if not 0 <= index < self.size:
            raise IndexError(f"Replay index {index} out of range for {self.size} transitions.")
        slot = (self.cursor - self.size + index) % self.capacity
        return Transition(*(self.vectors[n][slot].copy() for n in ("msg_prev", "obs", "action")),
                          float(self.reward[slot]), self.vectors["obs_next"][slot].copy(),
                          self.vectors["msg"][slot].copy(), bool(self.done[slot]), int(self.agent_id[slot]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size < 1:
            raise ValueError(f"Batch size must be positive, got {batch_size}.")
        if batch_size > self.size:
            raise ValueError(f"Cannot sample {batch_size} transitions from {self.size}.")
        slots = rng.choice(self.size, size=batch_size, replace=False)
        return Batch(self.vectors["msg_prev"][slots], self.vectors["obs"][slots], self.vectors["action"][slots],
                     self.reward[slots], self.vectors["obs_next"][slots], self.vectors["msg"][slots],
                     self.done[slots], self.agent_id[slots])


class Critic:
    """ Q(m, o, a): ReLU MLP over [message || observation || action] with a scalar output. """

    def __init__(self, store: ParamStore, name: str, msg_size: int, obs_size: int, action_size: int, hidden: int,
                 rng: np.random.Generator):
        self.store = store
        self.sizes = (msg_size, obs_size, action_size)
        self.mlp = MLP(store, name, [msg_size + obs_size + action_size, hidden, hidden, 1], rng)

    def forward(self, msgs: Array, obs: Array, actions: Array):
        q, cache = self.mlp.forward(np.concatenate((msgs, obs, actions), axis=1))
        return q[:, 0], cache

    def backward(self, cache, grad_q: Array):
        grad = self.mlp.backward(cache, np.asarray(grad_q, dtype=float)[:, None])
        msg_size, obs_size, _ = self.sizes
        return grad[:, :msg_size], grad[:, msg_size:msg_size + obs_size], grad[:, msg_size + obs_size:]


def critic_targets(rewards: Array, dones: Array, msgs: Array, obs_next: Array, agent_ids: Array, target_actor,
                   target_critic, gamma: float) -> Array:
    """ y = r + gamma * (1 - done) * Q'(m_t, o_{t+1}, mu'(m_t, o_{t+1})) for a whole batch. """
    actions, _ = target_actor.policy(msgs, obs_next, agent_ids)
    q_next, _ = target_critic.forward(msgs, obs_next, actions)
    return np.asarray(rewards, dtype=float) + gamma * (1.0 - np.asarray(dones, dtype=float)) * q_next


def critic_target(reward: float, done: bool, msg: Array, obs_next: Array, target_actor, target_critic, gamma: float,
                  agent_id: int = 0) -> float:
    return float(critic_targets(np.array([reward]), np.array([done]), np.atleast_2d(msg), np.atleast_2d(obs_next),
                                np.array([agent_id]), target_actor, target_critic, gamma)[0])


def update_critic(critic: Critic, optimizer: Adam, batch: Batch, targets: Array) -> float:
    """ One Adam step on the mean squared error against `targets`; returns the loss before the step. """
    if len(batch) == 0:
        raise ValueError("Cannot update the critic on an empty batch.")
    q, cache = critic.forward(batch.msg_prev, batch.obs, batch.action)
    residual = q - targets
    loss = float(np.mean(residual ** 2))
    critic.store.zero_grad()
    critic.backward(cache, 2.0 * residual / len(batch))
    optimizer.step()
    critic.store.zero_grad()
    return loss


def update_actor(actor, optimizer: Adam, critic, batch: Batch) -> float:
    """
    One ascent step on J = mean Q(m_{t-1}, o_t, mu(m_{t-1}, o_t)); the critic only supplies dQ/da and its
    parameters are left untouched. Returns J before the step.
    """
    if len(batch) == 0:
        raise ValueError("Cannot update the actor on an empty batch.")
    actions, actor_cache = actor.policy(batch.msg_prev, batch.obs, batch.agent_id)
    q, critic_cache = critic.forward(batch.msg_prev, batch.obs, actions)
    actor.store.zero_grad()
    _, _, grad_actions = critic.backward(critic_cache, np.full(len(batch), 1.0 / len(batch)))
    critic.store.zero_grad()
    actor.policy_backward(actor_cache, grad_actions)
    optimizer.step(ascend=True)
    actor.store.zero_grad()
    return float(np.mean(q))


def message_gradient(actor, critic, msgs: Array, obs: Array, agent_ids: Array) -> Array:
    """ dJ/dm for J = mean Q(m, o, mu(m, o)), through both the critic input and the actor input. """
    actions, actor_cache = actor.policy(msgs, obs, agent_ids)
    q, critic_cache = critic.forward(msgs, obs, actions)
    grad_msgs, _, grad_actions = critic.backward(critic_cache, np.full(len(msgs), 1.0 / len(msgs)))
    grad_msgs = grad_msgs + actor.policy_backward(actor_cache, grad_actions)
    actor.store.zero_grad()
    critic.store.zero_grad()
    return grad_msgs


class RoleLearner:
    """ Actor, critic, their target copies, optimisers and replay buffer for one agent role. """

    def __init__(self, actor, target_actor, obs_size: int, action_size: int, config: TrainingConfig,
                 rng: np.random.Generator, name: str):
        msg_size = actor.config.hidden_size
        self.name = name
        self.config = config
        self.actor, self.target_actor = actor, target_actor
        self.critic_store = ParamStore()
        self.critic = Critic(self.critic_store, f"{name}.critic", msg_size, obs_size, action_size,
                             config.critic_hidden, rng)
        target_store = ParamStore()
        self.target_critic = Critic(target_store, f"{name}.critic", msg_size, obs_size, action_size,
                                    config.critic_hidden, np.random.default_rng(0))
        soft_update(target_store, self.critic_store, 1.0)
        soft_update(target_actor.store, actor.store, 1.0)
        self.actor_optimizer = Adam(actor.store, config.actor_lr)
        self.critic_optimizer = Adam(self.critic_store, config.critic_lr)
        self.buffer = ReplayBuffer(config.buffer_capacity, msg_size, obs_size, action_size)

    def update(self, rng: np.random.Generator) -> float:
        batch = self.buffer.sample(self.config.batch_size, rng)
        targets = critic_targets(batch.reward, batch.done, batch.msg, batch.obs_next, batch.agent_id,
                                 self.target_actor, self.target_critic, self.config.gamma)
        loss = update_critic(self.critic, self.critic_optimizer, batch, targets)
        update_actor(self.actor, self.actor_optimizer, self.critic, batch)
        soft_update(self.target_critic.store, self.critic_store, self.config.soft_tau)
        soft_update(self.target_actor.store, self.actor.store, self.config.soft_tau)
        return loss


def target_modules(agents: CoRideAgents):
    """ Fresh manager and worker modules over their own stores, shaped like the agents' (weights copied later). """
    rng = np.random.default_rng(0)
    manager = ManagerModule(ParamStore(), agents.manager_obs_size, agents.config, rng)
    worker = WorkerModule(ParamStore(), agents.world.n_grids, agents.config, agents.ranking_config, rng)
    return manager, worker


def build_learners(agents: CoRideAgents, config: TrainingConfig, seed: int) -> Dict[str, RoleLearner]:
    rng = np.random.default_rng([seed, 3])
    target_manager, target_worker = target_modules(agents)
    worker_obs_size = OBSERVATION_LENGTH + agents.config.goal_size
    return {"manager": RoleLearner(agents.manager, target_manager, agents.manager_obs_size, agents.config.goal_size,
                                   config, rng, "manager"),
            "worker": RoleLearner(agents.worker, target_worker, worker_obs_size, agents.worker.action_size,
                                  config, rng, "worker")}


def store_transitions(learners: Dict[str, RoleLearner], agents: CoRideAgents, result: CoRideStepResult, done: bool,
                      config: TrainingConfig):
    """
    Manager reward is the scaled district reward; worker reward is the intrinsic reward plus beta times the scaled
    reward of its district. Worker observations carry the goal they acted under.
    """
    world = agents.world
    scaled = config.reward_scale * result.manager_rewards
    for district in range(world.n_districts):
        learners["manager"].buffer.push(Transition(
            result.manager_messages_prev[district], result.manager_obs[district], result.goals[district],
            float(scaled[district]), result.manager_obs_next[district], result.manager_messages[district], done,
            district))
    for grid in range(world.n_grids):
        goal = result.worker_goals[grid]
        learners["worker"].buffer.push(Transition(
            result.worker_messages_prev[grid], np.concatenate((result.worker_obs[grid], goal)), result.omegas[grid],
            float(result.intrinsic_rewards[grid] + agents.config.beta * scaled[world.districts[grid]]),
            np.concatenate((result.worker_obs_next[grid], goal)), result.worker_messages[grid], done, grid))


class CommunicationLearner:
    """ Gradient ascent for both attention levels through the messages they just produced. """

    def __init__(self, agents: CoRideAgents, config: TrainingConfig):
        self.agents = agents
        self.manager_optimizer = Adam(agents.manager_comm_store, config.communication_lr)
        self.worker_optimizer = Adam(agents.worker_comm_store, config.communication_lr)

    def update(self, learners: Dict[str, RoleLearner], result: CoRideStepResult):
        agents = self.agents
        n_grids, n_districts = agents.world.n_grids, agents.world.n_districts

        manager = learners["manager"]
        grad = message_gradient(manager.actor, manager.critic, result.manager_messages, result.manager_obs_next,
                                np.arange(n_districts))
        agents.manager_comm_store.zero_grad()
        agents.manager_attention.backward(result.manager_attention_cache, grad)
        self.manager_optimizer.step(ascend=True)
        agents.manager_comm_store.zero_grad()

        worker = learners["worker"]
        obs_next = np.concatenate((result.worker_obs_next, result.worker_goals), axis=1)
        grad = message_gradient(worker.actor, worker.critic, result.worker_messages, obs_next, np.arange(n_grids))
        agents.worker_comm_store.zero_grad()
        for members, cache in result.worker_attention_caches:
            agents.worker_attention.backward(cache, grad[members])
        self.worker_optimizer.step(ascend=True)
        agents.worker_comm_store.zero_grad()


@dataclass
class EpisodeLog:
    episode: int
    seed: int
    adi: float
    orr: float
    mean_intrinsic_reward: float
    mean_critic_loss: float


@dataclass
class TrainingResult:
    agents: CoRideAgents
    logs: List[EpisodeLog] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    steps: int = 0
    updates: int = 0

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame([[getattr(log, f.name) for f in fields(EpisodeLog)] for log in self.logs],
                            columns=EPISODE_LOG_COLUMNS)


def calibrate(simulator: MarketSimulator, episodes: int):
    """ Fit the Poisson rate tables from random-dispatch episodes, so the manager reward sees imbalanced areas. """
    for i in range(episodes):
        run_rule_episode(RandomPolicy, simulator, CALIBRATION_EPISODE_OFFSET + i)
    if not episodes:
        return
    if simulator.history.samples.min() == 0:
        logger.warning("Calibration episodes do not cover every time bucket; training without imbalanced areas.")
        return
    simulator.fit_rates()


def _checkpoint(agents: CoRideAgents, learners: Dict[str, RoleLearner], out_dir: Optional[Path], episode: int,
                result: TrainingResult):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"checkpoint_{episode:04d}.npz"
    stores = dict(agents.stores())
    stores.update({f"{name}_critic": learner.critic_store for name, learner in learners.items()})
    save_checkpoint(path, stores)
    result.checkpoints.append(path)
    logger.info(f"Saved checkpoint {path}")


def train(config: TrainingConfig, world: GridWorld, source: OrderSource, market_config: MarketConfig = MarketConfig(),
          agent_config: AgentConfig = AgentConfig(), ranking_config: RankingConfig = RankingConfig(), seed: int = 0,
          checkpoint_dir: Optional[Union[str, Path]] = None, debug_mode=False) -> TrainingResult:
    """
    Train CoRide from scratch for config.episodes episodes. Checkpoints (when a directory is given) are written
    before the first episode, every config.checkpoint_every episodes and after the last one.
    """
    config.validate()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    simulator = MarketSimulator(world, source, market_config, seed, debug_mode=debug_mode)
    calibrate(simulator, config.calibration_episodes)

    agents = CoRideAgents(world, agent_config, ranking_config, seed)
    learners = build_learners(agents, config, seed)
    communication = CommunicationLearner(agents, config)
    sample_rng = np.random.default_rng([seed, 2])
    result = TrainingResult(agents)
    _checkpoint(agents, learners, checkpoint_dir, 0, result)

    for episode in range(config.episodes):
        simulator.reset(episode)
        memory = agents.initial_memory(simulator.state)
        losses, intrinsic = [], []
        with MetricTracker(simulator, debug_mode=debug_mode) as tracker:
            while not simulator.done:
                temperature = anneal_temperature(result.steps, ranking_config)
                step_result = coride_step(agents, simulator, memory, temperature, seed, config.fleet_control)
                store_transitions(learners, agents, step_result, simulator.done, config)
                intrinsic.append(step_result.intrinsic_rewards.mean())
                result.steps += 1
                if all(len(learner.buffer) >= config.warmup for learner in learners.values()):
                    for _ in range(config.updates_per_step):
                        losses.extend(learner.update(sample_rng) for learner in learners.values())
                        result.updates += 1
                    communication.update(learners, step_result)

        log = EpisodeLog(episode, seed, tracker.adi, tracker.orr, float(np.mean(intrinsic)) if intrinsic else 0.0,
                         float(np.mean(losses)) if losses else math.nan)
        result.logs.append(log)
        logger.info(f"Episode {episode}: ADI={log.adi:.2f} ORR={log.orr:.4f} "
                    f"intrinsic={log.mean_intrinsic_reward:.4f} critic_loss={log.mean_critic_loss:.4f}")
        if (episode + 1) % config.checkpoint_every == 0 or episode + 1 == config.episodes:
            _checkpoint(agents, learners, checkpoint_dir, episode + 1, result)

    for store in agents.stores().values():
        if not store.all_finite():
            raise FloatingPointError("Training produced non-finite parameters.")
    return result
