"""
This file contains the experiment runner: it builds the world and order source from a config, trains or
instantiates the configured policy for every seed, evaluates it next to random dispatch with matched seeds and
writes the results as plain csv tables.

Output directory layout:
    config.ini, FORMAT_VERSION, summary.csv
    seed_<s>/episodes.csv, seed_<s>/evaluation.csv
    seed_<s>/checkpoints/checkpoint_<episode>.npz     learned policies only
    seed_<s>/attention.csv                             learned policies, when enabled
    seed_<s>/trace.csv                                 when a trace grid is set
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ride_core.constants import *
from ride_core.hexgrid import GridWorld, WorldShape, build_world
from ride_core.market import MarketSimulator
from ride_core.metric_tracker import MetricTracker, trace_vehicle
from ride_core.orders import HistoricalOrderSource, OrderSource, SyntheticOrderSource, load_order_history
from coride.agents import CoRideAgents, run_coride_episode
from coride.baselines import RandomPolicy, policy_from_token, run_rule_episode
from coride.ddpg import EPISODE_LOG_COLUMNS, train
from coride.neural import load_checkpoint
from experiment.config import ExperimentConfig, format_config
from experiment.world_spec import load_world

logger = logging.getLogger(__name__)

CASE_STUDY_CENTRES = {"red": (0, 0), "yellow": (2, 1), "green": (-1, 3)}

# Evaluation episodes draw from their own streams, shared by every policy evaluated with the same seed
EVALUATION_EPISODE_OFFSET = 2_000_000

METRICS = ("ADI", "ORR", "AST", "TNF")
ATTENTION_COLUMNS = ["step", "level", "head", "source_id", "target_id", "weight"]
TRACE_COLUMNS = ["step", "token"]


def case_study_sampling_rates(discount_rate: float) -> Dict[str, float]:
    if not 0.0 <= discount_rate < 0.5:
        raise ValueError(f"Discount rate must lie in [0, 0.5), got {discount_rate}.")
    return {"red": 1.0, "yellow": 1.0 - discount_rate, "green": 1.0 - 2.0 * discount_rate}


def build_case_study_world(discount_rate: float, base_rate: float = 4.0, max_duration: int = 3,
                           steps_per_day: int = STEPS_PER_DAY) -> Tuple[GridWorld, SyntheticOrderSource]:
    """
    21 grids in three touching 7-cell districts. Order rates are homogeneous; the red district samples every order,
    yellow keeps 1 - DR of them and green 1 - 2 DR.
    """
    rates = case_study_sampling_rates(discount_rate)
    cells, labels = [], []
    for name, (cq, cr) in CASE_STUDY_CENTRES.items():
        for dq, dr in ((0, 0),) + HEX_DIRECTIONS:
            cells.append((cq + dq, cr + dr))
            labels.append(name)
    world = build_world(WorldShape(cells=tuple(cells), district_labels=tuple(labels)))
    sampling = np.array([rates[world.district_names[d]] for d in world.districts])
    source = SyntheticOrderSource(world, np.full((1, world.n_grids), base_rate), sampling, max_duration, steps_per_day)
    return world, source


def build_environment(config: ExperimentConfig) -> Tuple[GridWorld, OrderSource]:
    if config.world.spec:
        world = load_world(config.world.spec)
        if config.orders.history:
            table = load_order_history(config.orders.history, world, config.orders.strict)
            return world, HistoricalOrderSource(world, table, config.orders.sampling_rate, config.market.steps_per_day)
        return world, SyntheticOrderSource(world, np.full((1, world.n_grids), config.orders.base_rate),
                                           config.orders.sampling_rate, config.orders.max_duration,
                                           config.market.steps_per_day)
    if config.orders.history:
        raise ConfigError("[orders] history needs a [world] spec to map its grid ids.")
    return build_case_study_world(config.world.discount_rate, config.orders.base_rate, config.orders.max_duration,
                                  config.market.steps_per_day)


def normalized(value: float, baseline: float) -> float:
    """ Percentage improvement over the baseline. """
    if baseline == 0:
        return 0.0 if value == 0 else float("nan")
    return 100.0 * (value - baseline) / abs(baseline)


def is_learned(policy: str) -> bool:
    return policy.startswith("coride")


@dataclass
class SeedResult:
    seed: int
    episodes: pd.DataFrame
    evaluation: pd.DataFrame
    baseline: pd.DataFrame
    agents: Optional[CoRideAgents] = None
    attention: Optional[pd.DataFrame] = None
    trace: Optional[List[str]] = None
    checkpoints: List[Path] = field(default_factory=list)

    def means(self) -> Dict[str, float]:
        return {m: float(self.evaluation[m].mean()) for m in METRICS}

    def baseline_means(self) -> Dict[str, float]:
        return {m: float(self.baseline[m].mean()) for m in METRICS}


def _evaluation_frame(trackers: List[MetricTracker]) -> pd.DataFrame:
    return pd.DataFrame([{"episode": i, **t.metrics()} for i, t in enumerate(trackers)],
                        columns=["episode", *METRICS])


def evaluate_rule_policy(token: str, world: GridWorld, source: OrderSource, config: ExperimentConfig, seed: int,
                         record_decisions=False) -> List[MetricTracker]:
    policy = policy_from_token(token)
    simulator = MarketSimulator(world, source, config.market, seed)
    return [run_rule_episode(policy, simulator, EVALUATION_EPISODE_OFFSET + i, record_decisions=record_decisions)
            for i in range(config.experiment.evaluation_episodes)]


def evaluate_coride(agents: CoRideAgents, world: GridWorld, source: OrderSource, config: ExperimentConfig, seed: int,
                    record_decisions=False, keep_attention=False) -> Tuple[List[MetricTracker], List[tuple]]:
    simulator = MarketSimulator(world, source, config.market, seed)
    fleet_control = config.experiment.policy == "coride+"
    trackers, rows = [], []
    for i in range(config.experiment.evaluation_episodes):
        tracker, attention, _ = run_coride_episode(agents, simulator, EVALUATION_EPISODE_OFFSET + i,
                                                   config.ranking.tau_floor, seed, fleet_control,
                                                   config.experiment.greedy_evaluation, record_decisions,
                                                   keep_attention and i == 0)
        trackers.append(tracker)
        rows.extend(attention)
    return trackers, rows


def run_seed(config: ExperimentConfig, seed: int, world: GridWorld, source: OrderSource,
             seed_dir: Optional[Path] = None) -> SeedResult:
    policy = config.experiment.policy
    tracing = config.experiment.trace_grid >= 0
    if is_learned(policy):
        training = replace(config.training, fleet_control=policy == "coride+")
        trained = train(training, world, source, config.market, config.agents, config.ranking, seed,
                        seed_dir / "checkpoints" if seed_dir is not None else None)
        episodes = trained.log_frame()
        trackers, rows = evaluate_coride(trained.agents, world, source, config, seed, tracing,
                                         config.experiment.export_attention)
        result = SeedResult(seed, episodes, _evaluation_frame(trackers), pd.DataFrame(), trained.agents,
                            pd.DataFrame(rows, columns=ATTENTION_COLUMNS) if rows else None,
                            checkpoints=trained.checkpoints)
    else:
        trackers = evaluate_rule_policy(policy, world, source, config, seed, tracing)
        episodes = pd.DataFrame([[i, seed, t.adi, t.orr, float("nan"), float("nan")] for i, t in enumerate(trackers)],
                                columns=EPISODE_LOG_COLUMNS)
        result = SeedResult(seed, episodes, _evaluation_frame(trackers), pd.DataFrame())

    if policy == RandomPolicy.token():
        result.baseline = result.evaluation
    else:
        result.baseline = _evaluation_frame(evaluate_rule_policy(RandomPolicy.token(), world, source, config, seed))
    if tracing:
        result.trace = trace_vehicle(trackers[0].records, world, config.experiment.trace_grid,
                                     min(config.experiment.trace_horizon, len(trackers[0].records)))
    return result


def summary_frame(config: ExperimentConfig, results: List[SeedResult]) -> pd.DataFrame:
    rows = []
    for result in results:
        means, baseline = result.means(), result.baseline_means()
        row = {"seed": result.seed, "policy": config.experiment.policy, **means}
        row.update({f"{m}_vs_RAN_pct": normalized(means[m], baseline[m]) for m in METRICS})
        rows.append(row)
    return pd.DataFrame(rows)


def write_table(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def run(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> List[SeedResult]:
    """
    Run every configured seed and write the output directory (config.experiment.output unless `out_dir` is given).
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.experiment.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(format_config(config))
    (out / "FORMAT_VERSION").write_text(f"{OUTPUT_FORMAT_VERSION}\n")

    world, source = build_environment(config)
    logger.info(f"World: {world.n_grids} grids in {world.n_districts} districts; policy {config.experiment.policy}")
    results = []
    for seed in config.experiment.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        result = run_seed(config, seed, world, source, seed_dir)
        write_table(result.episodes, seed_dir / "episodes.csv")
        write_table(result.evaluation, seed_dir / "evaluation.csv")
        if result.attention is not None:
            write_table(result.attention, seed_dir / "attention.csv")
        if result.trace is not None:
            write_table(pd.DataFrame(list(enumerate(result.trace)), columns=TRACE_COLUMNS), seed_dir / "trace.csv")
        logger.info(f"Seed {seed}: " + ", ".join(f"{k}={v:.4g}" for k, v in result.means().items()))
        results.append(result)
    write_table(summary_frame(config, results), out / "summary.csv")
    return results


def trace(config: ExperimentConfig, seed: int, start_grid: int, horizon: int,
          checkpoint: Optional[Union[str, Path]] = None) -> List[str]:
    """
    Trace one vehicle through the first evaluation episode. Learned policies use the given checkpoint, or
    untrained parameters without one.
    """
    world, source = build_environment(config)
    world.check_grid(start_grid)
    if is_learned(config.experiment.policy):
        agents = _agents_for(config, world, seed, checkpoint)
        trackers, _ = evaluate_coride(agents, world, source, replace_evaluation(config), seed, record_decisions=True)
    else:
        trackers = evaluate_rule_policy(config.experiment.policy, world, source, replace_evaluation(config), seed,
                                        record_decisions=True)
    return trace_vehicle(trackers[0].records, world, start_grid, min(horizon, len(trackers[0].records)))


def export_attention(config: ExperimentConfig, seed: int, checkpoint: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """ Attention weights of both levels over one evaluation episode, one row per (step, level, head, pair). """
    if not is_learned(config.experiment.policy):
        raise ConfigError(f"[experiment] policy '{config.experiment.policy}' has no attention to export.")
    world, source = build_environment(config)
    agents = _agents_for(config, world, seed, checkpoint)
    _, rows = evaluate_coride(agents, world, source, replace_evaluation(config), seed, keep_attention=True)
    return pd.DataFrame(rows, columns=ATTENTION_COLUMNS)


def replace_evaluation(config: ExperimentConfig) -> ExperimentConfig:
    return replace(config, experiment=replace(config.experiment, evaluation_episodes=1))


def _agents_for(config: ExperimentConfig, world: GridWorld, seed: int,
                checkpoint: Optional[Union[str, Path]]) -> CoRideAgents:
    agents = CoRideAgents(world, config.agents, config.ranking, seed)
    if checkpoint is not None:
        load_checkpoint(checkpoint, agents.stores())
    return agents
