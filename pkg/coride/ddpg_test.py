import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from ride_core.constants import *
from ride_core.hexgrid import WorldShape, build_world
from ride_core.market import MarketConfig, MarketSimulator
from ride_core.orders import SyntheticOrderSource
from coride.agents import AgentConfig, CoRideAgents, ManagerModule, coride_step
from coride.agents_test import three_district_world
from coride.ddpg import (Batch, Critic, ReplayBuffer, TrainingConfig, Transition, build_learners, critic_target,
                         message_gradient, store_transitions, train, update_actor, update_critic)
from coride.neural import Adam, Dense, ParamStore, load_checkpoint, numerical_gradient

SMALL = AgentConfig(hidden_size=8, goal_size=4, goal_embedding_size=8, dilation=2, heads=2, horizon=2)
TINY_TRAINING = TrainingConfig(episodes=2, buffer_capacity=100, batch_size=4, warmup=8, checkpoint_every=1,
                               calibration_episodes=1)


def transition(reward, msg=2, obs=3, action=1):
    return Transition(np.zeros(msg), np.full(obs, reward), np.zeros(action), float(reward), np.zeros(obs),
                      np.zeros(msg), False)


def random_batch(rng, size, msg=2, obs=3, action=2):
    return Batch(rng.normal(size=(size, msg)), rng.normal(size=(size, obs)), rng.normal(size=(size, action)),
                 rng.normal(size=size), rng.normal(size=(size, obs)), rng.normal(size=(size, msg)),
                 np.zeros(size, dtype=bool), np.zeros(size, dtype=Int))


class ZeroActor:
    def policy(self, msgs, obs, agent_ids):
        return np.zeros((len(obs), 1)), None


class ConstantCritic:
    def __init__(self, value):
        self.value = value

    def forward(self, msgs, obs, actions):
        return np.full(len(obs), self.value), None


class LinearActor:
    """ mu(m, o) = o W + b, ignoring the message. """

    def __init__(self, obs_size, action_size, rng):
        self.store = ParamStore()
        self.layer = Dense(self.store, "actor", obs_size, action_size, rng)

    def policy(self, msgs, obs, agent_ids):
        return self.layer.forward(obs)

    def policy_backward(self, cache, grad_actions):
        self.layer.backward(cache, grad_actions)
        return np.zeros((len(grad_actions), 2))


class QuadraticCritic:
    """ Q(m, o, a) = -|a - best|^2 """

    def __init__(self, best):
        self.best = np.asarray(best, dtype=float)
        self.store = ParamStore()

    def forward(self, msgs, obs, actions):
        return -np.sum((actions - self.best) ** 2, axis=1), actions

    def backward(self, cache, grad_q):
        grad_actions = -2.0 * (cache - self.best) * np.asarray(grad_q)[:, None]
        return np.zeros((len(cache), 2)), np.zeros((len(cache), 3)), grad_actions


class TestDDPG(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_replay_ring(self):
        buffer = ReplayBuffer(3, 2, 3, 1)
        for reward in range(5):
            buffer.push(transition(reward))
        self.assertEqual(len(buffer), 3)
        self.assertEqual([buffer[i].reward for i in range(3)], [2.0, 3.0, 4.0])
        np.testing.assert_array_equal(buffer[0].obs, np.full(3, 2.0))
        with self.assertRaises(IndexError):
            buffer[3]
        with self.assertRaises(ShapeError):
            buffer.push(transition(0.0, obs=4))

    def test_replay_sample(self):
        buffer = ReplayBuffer(10, 2, 3, 1)
        for reward in range(6):
            buffer.push(transition(reward))
        batch = buffer.sample(6, self.rng)
        self.assertEqual(len(batch), 6)
        self.assertEqual(sorted(batch.reward.tolist()), [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        np.testing.assert_array_equal(batch.obs[:, 0], batch.reward)
        with self.assertRaises(ValueError):
            buffer.sample(7, self.rng)
        with self.assertRaises(ValueError):
            buffer.sample(0, self.rng)
        with self.assertRaises(ValueError):
            ReplayBuffer(0, 2, 3, 1)

    def test_critic_target(self):
        msg, obs = np.zeros(2), np.zeros(3)
        self.assertEqual(critic_target(1.5, False, msg, obs, ZeroActor(), ConstantCritic(2.0), gamma=0.0), 1.5)
        self.assertEqual(critic_target(1.5, True, msg, obs, ZeroActor(), ConstantCritic(2.0), gamma=0.95), 1.5)
        self.assertAlmostEqual(critic_target(1.0, False, msg, obs, ZeroActor(), ConstantCritic(2.0), gamma=0.95), 2.9,
                               delta=1e-12)

    def test_critic_loss_decreases(self):
        store = ParamStore()
        critic = Critic(store, "c", 2, 3, 2, 16, self.rng)
        optimizer = Adam(store, 1e-2)
        batch = random_batch(self.rng, 32)
        targets = batch.obs.sum(axis=1) - batch.action[:, 0]
        losses = [update_critic(critic, optimizer, batch, targets) for _ in range(300)]
        self.assertLess(losses[-1], 0.2 * losses[0])
        self.assertFalse(any(g.any() for g in store.grads.values()))

    def test_critic_backward_matches_finite_differences(self):
        critic = Critic(ParamStore(), "c", 2, 3, 2, 16, self.rng)
        batch = random_batch(self.rng, 5)
        weights = self.rng.normal(size=5)
        _, cache = critic.forward(batch.msg_prev, batch.obs, batch.action)
        g_m, g_o, g_a = critic.backward(cache, weights)

        def loss():
            return float(critic.forward(batch.msg_prev, batch.obs, batch.action)[0] @ weights)

        for array, grad in ((batch.msg_prev, g_m), (batch.obs, g_o), (batch.action, g_a)):
            entries = [(i, j) for i in range(5) for j in range(array.shape[1])]
            for index, numeric in numerical_gradient(loss, array, entries).items():
                self.assertAlmostEqual(grad[index], numeric, delta=1e-6)

    def test_actor_climbs_analytic_critic(self):
        actor = LinearActor(3, 2, self.rng)
        critic = QuadraticCritic([1.0, -1.0])
        optimizer = Adam(actor.store, 1e-2)
        batch = random_batch(self.rng, 16)
        objectives = [update_actor(actor, optimizer, critic, batch) for _ in range(1000)]
        self.assertGreater(objectives[-1], objectives[0])
        self.assertGreater(objectives[-1], 0.25 * objectives[0])
        np.testing.assert_allclose(actor.store["actor.b"], [1.0, -1.0], atol=0.2)

    def test_actor_update_leaves_critic_alone(self):
        actor = LinearActor(3, 2, self.rng)
        critic_store = ParamStore()
        critic = Critic(critic_store, "c", 2, 3, 2, 16, self.rng)
        before = {name: value.copy() for name, value in critic_store.params.items()}
        update_actor(actor, Adam(actor.store, 1e-2), critic, random_batch(self.rng, 8))
        for name, value in critic_store.params.items():
            np.testing.assert_array_equal(value, before[name])

    def test_zero_critic_gradient_keeps_actor(self):
        actor = LinearActor(3, 2, self.rng)
        critic_store = ParamStore()
        critic = Critic(critic_store, "c", 2, 3, 2, 16, self.rng)
        for value in critic_store.params.values():
            value[...] = 0.0
        before = {name: value.copy() for name, value in actor.store.params.items()}
        update_actor(actor, Adam(actor.store, 1e-2), critic, random_batch(self.rng, 8))
        for name, value in actor.store.params.items():
            np.testing.assert_array_equal(value, before[name])

    def test_message_gradient(self):
        actor = ManagerModule(ParamStore(), 6, SMALL, self.rng)
        critic = Critic(ParamStore(), "c", 8, 6, 4, 16, self.rng)
        msgs, obs, ids = self.rng.normal(size=(3, 8)), self.rng.normal(size=(3, 6)), np.arange(3)

        def objective():
            actions, _ = actor.policy(msgs, obs, ids)
            return float(np.mean(critic.forward(msgs, obs, actions)[0]))

        grad = message_gradient(actor, critic, msgs, obs, ids)
        entries = [(i, j) for i in range(3) for j in range(8)]
        for index, numeric in numerical_gradient(objective, msgs, entries).items():
            self.assertAlmostEqual(grad[index], numeric, delta=1e-6)
        self.assertFalse(any(g.any() for g in actor.store.grads.values()))

    def test_validate(self):
        TrainingConfig().validate()
        for bad in (dict(batch_size=600), dict(warmup=200_000), dict(gamma=1.5), dict(soft_tau=-0.1),
                    dict(checkpoint_every=0), dict(episodes=-1), dict(batch_size=0)):
            with self.assertRaises(ConfigError):
                TrainingConfig(**bad).validate()

    def test_learner_targets_start_equal(self):
        world = build_world(WorldShape(radius=1))
        agents = CoRideAgents(world, SMALL, seed=2)
        learners = build_learners(agents, TINY_TRAINING, seed=2)
        for learner in learners.values():
            for name, value in learner.actor.store.params.items():
                np.testing.assert_array_equal(learner.target_actor.store[name], value)
            for name, value in learner.critic_store.params.items():
                np.testing.assert_array_equal(learner.target_critic.store[name], value)

    def test_store_transitions(self):
        world = three_district_world()
        source = SyntheticOrderSource(world, np.full((1, world.n_grids), 2.0))
        simulator = MarketSimulator(world, source, MarketConfig(steps_per_episode=3), seed=0)
        agents = CoRideAgents(world, SMALL, seed=0)
        learners = build_learners(agents, TINY_TRAINING, seed=0)
        memory = agents.initial_memory(simulator.reset())
        result = coride_step(agents, simulator, memory, 1.0)
        store_transitions(learners, agents, result, False, TINY_TRAINING)
        self.assertEqual(len(learners["manager"].buffer), world.n_districts)
        self.assertEqual(len(learners["worker"].buffer), world.n_grids)

        district = 1
        stored = learners["manager"].buffer[district]
        self.assertEqual(stored.agent_id, district)
        self.assertAlmostEqual(stored.reward, 0.01 * result.manager_rewards[district], delta=1e-12)
        np.testing.assert_array_equal(stored.action, result.goals[district])

        grid = 5
        stored = learners["worker"].buffer[grid]
        expected = result.intrinsic_rewards[grid] + SMALL.beta * 0.01 * result.manager_rewards[world.districts[grid]]
        self.assertAlmostEqual(stored.reward, expected, delta=1e-12)
        np.testing.assert_array_equal(stored.obs[OBSERVATION_LENGTH:], result.worker_goals[grid])
        np.testing.assert_array_equal(stored.obs_next[OBSERVATION_LENGTH:], result.worker_goals[grid])
        np.testing.assert_array_equal(stored.msg_prev, result.worker_messages_prev[grid])
        np.testing.assert_array_equal(stored.msg, result.worker_messages[grid])


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.world = build_world(WorldShape(radius=1))
        self.source = SyntheticOrderSource(self.world, np.full((1, self.world.n_grids), 2.0))
        self.market = MarketConfig(steps_per_episode=6, rate_buckets=1)

    def test_train_smoke(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = train(TINY_TRAINING, self.world, self.source, self.market, SMALL, seed=1, checkpoint_dir=tmp)
            self.assertEqual(result.steps, 12)
            self.assertGreater(result.updates, 0)
            self.assertEqual([p.name for p in result.checkpoints],
                             ["checkpoint_0000.npz", "checkpoint_0001.npz", "checkpoint_0002.npz"])
            frame = result.log_frame()
            self.assertEqual(list(frame["episode"]), [0, 1])
            self.assertTrue(math.isnan(frame["mean_critic_loss"][0]))
            self.assertTrue(math.isfinite(frame["mean_critic_loss"][1]))

            fresh = CoRideAgents(self.world, SMALL, seed=7)
            load_checkpoint(result.checkpoints[-1], fresh.stores())
            for role, store in result.agents.stores().items():
                for name in store.names():
                    np.testing.assert_array_equal(fresh.stores()[role][name], store[name])

    def test_train_is_reproducible(self):
        first = train(TINY_TRAINING, self.world, self.source, self.market, SMALL, seed=4).log_frame()
        second = train(TINY_TRAINING, self.world, self.source, self.market, SMALL, seed=4).log_frame()
        self.assertTrue(first.equals(second))

    def test_zero_episodes_writes_initial_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = TrainingConfig(episodes=0, buffer_capacity=100, batch_size=4, warmup=8)
            result = train(config, self.world, self.source, self.market, SMALL, seed=0, checkpoint_dir=tmp)
            self.assertEqual([p.name for p in result.checkpoints], ["checkpoint_0000.npz"])
            self.assertEqual(sorted(p.name for p in Path(tmp).iterdir()), ["checkpoint_0000.npz"])
            self.assertTrue(result.log_frame().empty)

    def test_invalid_config_is_rejected(self):
        with self.assertRaises(ConfigError):
            train(TrainingConfig(batch_size=10, warmup=5), self.world, self.source, self.market, SMALL)


if __name__ == "__main__":
    unittest.main()
