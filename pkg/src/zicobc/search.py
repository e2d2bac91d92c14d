"""Latency-aware multi-objective evolutionary search over genome spaces.

The optimizer is the classic elitist scheme: fast non-dominated sorting
into Pareto fronts, crowding distances for diversity, binary-tournament
parent selection, and environmental selection from the union of parents
and offspring. Objectives are (negated proxy score, estimated latency),
both minimized. Candidates over the optional latency ceiling are ranked
behind every feasible individual instead of being penalized.

Determinism contract: identical configuration and seeds produce identical
archives and logs at any evaluator thread count. All randomness flows
through one sequentially-consumed generator, evaluations are pure and
memoized by genome serialization, and populations are canonicalized by a
stable genome key before selection.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import (
    Genome,
    MutationConfig,
    StageGene,
    _mix,
    crossover as genome_crossover,
    genome_to_json,
    mutate as genome_mutate,
)
from .proxy import ProxyScore

OBJECTIVE_NAMES = ("score", "latency")


class SearchConfigError(ValueError):
    """Configuration violates a stated bound."""


class ObjectiveError(ValueError):
    """An evaluator produced a NaN or otherwise unusable objective."""


class EvaluationFailure(RuntimeError):
    """An evaluator raised; carries the offending genome's serialization."""

    def __init__(self, genome_json: str, cause: BaseException) -> None:
        super().__init__(f"evaluator failed on genome {genome_json}: {cause}")
        self.genome_json = genome_json
        self.cause = cause


@dataclass(frozen=True)
class SearchConfig:
    population: int = 64
    generations: int = 100
    mutation_rate: float = 0.9
    crossover_rate: float = 0.5
    beta: float = 1.0
    batches: int = 8
    batch_size: int = 8
    seed: int = 0
    objectives: tuple[str, ...] = ("score", "latency")
    latency_ceiling_us: float | None = None

    def validate(self) -> None:
        if self.population < 4 or self.population % 2:
            raise SearchConfigError(
                f"population must be even and >= 4, got {self.population}")
        if self.generations < 1:
            raise SearchConfigError(f"generations must be >= 1, got {self.generations}")
        for name, rate in (("mutation_rate", self.mutation_rate),
                           ("crossover_rate", self.crossover_rate)):
            if not 0.0 <= rate <= 1.0:
                raise SearchConfigError(f"{name} must be in [0, 1], got {rate}")
        if self.beta < 0:
            raise SearchConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.objectives or any(o not in OBJECTIVE_NAMES for o in self.objectives):
            raise SearchConfigError(
                f"objectives must be drawn from {OBJECTIVE_NAMES}, got {self.objectives}")
        if self.latency_ceiling_us is not None and self.latency_ceiling_us <= 0:
            raise SearchConfigError(
                f"latency ceiling must be positive, got {self.latency_ceiling_us}")


@dataclass
class Individual:
    genome: object
    key: str
    objectives: tuple[float, ...]
    score: float
    latency_us: float
    zico: float | None = None
    penalty: float | None = None
    zico_bc: float | None = None
    rank: float = math.inf
    crowding: float = 0.0
    feasible: bool = True

    def log_row(self, generation: int) -> dict:
        return {
            "generation": generation,
            "genome": json.loads(self.key),
            "zico": self.zico,
            "penalty": self.penalty,
            "zico_bc": self.zico_bc,
            "latency_us": self.latency_us,
            "rank": self.rank,
            "crowding": self.crowding,
        }


def dominates(a: tuple[float, ...], b: tuple[float, ...]) -> bool:
    """Minimization dominance: no worse anywhere, strictly better somewhere."""
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def non_dominated_sort(population: list[Individual]) -> list[list[Individual]]:
    """Deb's fast non-dominated sort; assigns ranks, returns the fronts."""
    for ind in population:
        if any(math.isnan(v) for v in ind.objectives):
            raise ObjectiveError(f"NaN objective for genome {ind.key}")
    n = len(population)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    domination_count = [0] * n
    for i in range(n):
        oi = population[i].objectives
        for j in range(i + 1, n):
            oj = population[j].objectives
            if dominates(oi, oj):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif dominates(oj, oi):
                dominated_by[j].append(i)
                domination_count[i] += 1
    fronts: list[list[Individual]] = []
    current = [i for i in range(n) if domination_count[i] == 0]
    rank = 0
    while current:
        front = []
        for i in current:
            population[i].rank = rank
            front.append(population[i])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        fronts.append(front)
        current = sorted(nxt)
        rank += 1
    return fronts


def crowding_distance(front: list[Individual]) -> None:
    """Per-objective normalized neighbor gaps; boundary members get +inf."""
    if not front:
        return
    if len(front) <= 2:
        for ind in front:
            ind.crowding = math.inf
        return
    for ind in front:
        ind.crowding = 0.0
    n_obj = len(front[0].objectives)
    for m in range(n_obj):
        ordered = sorted(front, key=lambda ind: (ind.objectives[m], ind.key))
        ordered[0].crowding = math.inf
        ordered[-1].crowding = math.inf
        span = ordered[-1].objectives[m] - ordered[0].objectives[m]
        if span == 0:
            continue
        for i in range(1, len(ordered) - 1):
            if ordered[i].crowding == math.inf:
                continue
            gap = ordered[i + 1].objectives[m] - ordered[i - 1].objectives[m]
            ordered[i].crowding += gap / span


class ParetoArchive:
    """Every non-dominated feasible candidate seen so far, deduplicated."""

    def __init__(self) -> None:
        self._members: dict[str, Individual] = {}

    def add(self, ind: Individual) -> None:
        if not ind.feasible or ind.key in self._members:
            return
        members = self._members
        for other in members.values():
            if dominates(other.objectives, ind.objectives):
                return
        doomed = [k for k, other in members.items()
                  if dominates(ind.objectives, other.objectives)]
        for k in doomed:
            del members[k]
        members[ind.key] = ind

    def members(self) -> list[Individual]:
        return [self._members[k] for k in sorted(self._members)]

    def __len__(self) -> int:
        return len(self._members)

    def to_json_list(self) -> list[dict]:
        return [
            {
                "genome": json.loads(ind.key),
                "zico": ind.zico,
                "penalty": ind.penalty,
                "zico_bc": ind.zico_bc,
                "score": ind.score,
                "latency_us": ind.latency_us,
            }
            for ind in self.members()
        ]


class _Evaluator:
    """Memoized, optionally threaded evaluation of genomes to Individuals."""

    def __init__(self, space, config: SearchConfig, proxy_fn, latency_fn,
                 threads: int) -> None:
        self.space = space
        self.config = config
        self.proxy_fn = proxy_fn
        self.latency_fn = latency_fn
        self.threads = max(1, threads)
        self._cache: dict[str, tuple] = {}

    def _evaluate_key(self, key: str, genome) -> tuple:
        try:
            proxy = self.proxy_fn(genome)
            latency = float(self.latency_fn(genome))
        except Exception as exc:
            raise EvaluationFailure(key, exc) from exc
        if isinstance(proxy, ProxyScore):
            score = proxy.zico_bc
            detail = (proxy.zico, proxy.penalty, proxy.zico_bc)
        else:
            score = float(proxy)
            detail = (None, None, None)
        if math.isnan(score) or math.isnan(latency):
            raise EvaluationFailure(key, ValueError("NaN objective"))
        return score, latency, detail

    def __call__(self, genomes: list) -> list[Individual]:
        keyed = [(self.space.serialize(g), g) for g in genomes]
        missing = []
        seen = set()
        for key, genome in keyed:
            if key not in self._cache and key not in seen:
                seen.add(key)
                missing.append((key, genome))
        if missing:
            if self.threads > 1 and len(missing) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    results = list(pool.map(
                        lambda kg: self._evaluate_key(*kg), missing))
            else:
                results = [self._evaluate_key(k, g) for k, g in missing]
            for (key, _), result in zip(missing, results):
                self._cache[key] = result
        out = []
        ceiling = self.config.latency_ceiling_us
        for key, genome in keyed:
            score, latency, detail = self._cache[key]
            objectives = []
            for name in self.config.objectives:
                objectives.append(-score if name == "score" else latency)
            out.append(Individual(
                genome=genome, key=key, objectives=tuple(objectives),
                score=score, latency_us=latency,
                zico=detail[0], penalty=detail[1], zico_bc=detail[2],
                feasible=ceiling is None or latency <= ceiling,
            ))
        return out


def _rank_population(population: list[Individual]) -> None:
    """Canonical rank/crowding assignment over feasible members."""
    feasible = [ind for ind in population if ind.feasible]
    for ind in population:
        if not ind.feasible:
            ind.rank = math.inf
            ind.crowding = 0.0
    fronts = non_dominated_sort(feasible) if feasible else []
    for front in fronts:
        crowding_distance(front)


def _environmental_selection(combined: list[Individual],
                             size: int) -> list[Individual]:
    """Elitist truncation of parents + offspring to the population size.

    The pool is deduplicated by genome key (scores are deterministic, so
    copies carry no information); with no variation at all the selection
    therefore returns exactly the evaluated initial population.
    """
    unique: dict[str, Individual] = {}
    for ind in combined:
        unique.setdefault(ind.key, ind)
    combined = [unique[k] for k in sorted(unique)]
    feasible = [ind for ind in combined if ind.feasible]
    infeasible = [ind for ind in combined if not ind.feasible]
    for ind in infeasible:
        ind.rank = math.inf
        ind.crowding = 0.0
    selected: list[Individual] = []
    if feasible:
        fronts = non_dominated_sort(feasible)
        for front in fronts:
            crowding_distance(front)
            if len(selected) + len(front) <= size:
                selected.extend(sorted(front, key=lambda ind: ind.key))
            else:
                room = size - len(selected)
                ordered = sorted(front, key=lambda ind: (-ind.crowding, ind.key))
                selected.extend(ordered[:room])
                break
    if len(selected) < size:
        # infeasible-last: fill by smallest ceiling violation
        backfill = sorted(infeasible, key=lambda ind: (ind.latency_us, ind.key))
        selected.extend(backfill[:size - len(selected)])
    return selected


def _tournament(population: list[Individual], rng: np.random.Generator) -> Individual:
    i = int(rng.integers(0, len(population)))
    j = int(rng.integers(0, len(population)))
    a, b = population[i], population[j]
    if a.feasible != b.feasible:
        return a if a.feasible else b
    if not a.feasible:
        return a if a.latency_us <= b.latency_us else b
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a


def run_search(space, config: SearchConfig, proxy_fn: Callable,
               latency_fn: Callable, threads: int = 1,
               progress: Callable[[str], None] | None = None,
               ) -> tuple[ParetoArchive, list[dict]]:
    """Evolve a population and collect the global Pareto archive.

    `space` supplies sample/mutate/crossover over genomes plus a
    serialize() producing stable JSON text (the dedup and ordering key).
    proxy_fn maps a genome to a ProxyScore or plain float (maximized);
    latency_fn maps a genome to microseconds (minimized). Returns the
    archive and one log row per individual per generation.
    """
    config.validate()
    rng = np.random.default_rng(_mix(config.seed, 0x5345))
    evaluate = _Evaluator(space, config, proxy_fn, latency_fn, threads)
    archive = ParetoArchive()
    log: list[dict] = []

    population = evaluate([space.sample(rng) for _ in range(config.population)])
    for ind in sorted(population, key=lambda ind: ind.key):
        archive.add(ind)
    _rank_population(sorted(population, key=lambda ind: ind.key))
    log.extend(ind.log_row(0) for ind in population)
    if progress:
        progress(f"generation 0: archive={len(archive)}")

    for gen in range(1, config.generations + 1):
        offspring_genomes = []
        for _ in range(config.population // 2):
            p1 = _tournament(population, rng)
            p2 = _tournament(population, rng)
            if rng.random() < config.crossover_rate:
                c1 = space.crossover(p1.genome, p2.genome, rng)
                c2 = space.crossover(p2.genome, p1.genome, rng)
            else:
                c1, c2 = p1.genome, p2.genome
            if rng.random() < config.mutation_rate:
                c1 = space.mutate(c1, rng)
            if rng.random() < config.mutation_rate:
                c2 = space.mutate(c2, rng)
            offspring_genomes.extend((c1, c2))
        offspring = evaluate(offspring_genomes)
        for ind in sorted(offspring, key=lambda ind: ind.key):
            archive.add(ind)
        population = _environmental_selection(population + offspring,
                                              config.population)
        log.extend(ind.log_row(gen) for ind in population)
        if progress:
            progress(f"generation {gen}: archive={len(archive)}")
    return archive, log


# -- genome space adapter ---------------------------------------------------------


@dataclass(frozen=True)
class GenomeSpace:
    """Micro-architecture search space with a fixed per-stage stride pattern."""

    family: str
    strides: tuple[int, ...]
    channel_choices: tuple[int, ...]
    repeat_choices: tuple[int, ...]
    kernel_choices: tuple[int, ...] = (3, 5)
    conv_modes: tuple[str, ...] = ("regular", "group")
    expansion_choices: tuple[int, ...] = (4,)
    stem_channels: int = 16
    num_classes: int = 10
    input_resolution: tuple[int, int] = (32, 32)
    allow_depthwise: bool = False
    channel_step: int = 8

    def __post_init__(self) -> None:
        if not self.strides or any(s not in (1, 2) for s in self.strides):
            raise SearchConfigError(f"strides must be 1 or 2, got {self.strides}")
        if not self.channel_choices or any(c < 8 or c % 8 for c in self.channel_choices):
            raise SearchConfigError(
                f"channel choices must be multiples of 8, got {self.channel_choices}")
        if not self.repeat_choices or any(not 1 <= r <= 12 for r in self.repeat_choices):
            raise SearchConfigError(
                f"repeat choices must lie in 1..12, got {self.repeat_choices}")
        if not self.kernel_choices or any(k not in (3, 5) for k in self.kernel_choices):
            raise SearchConfigError(
                f"kernel choices must be 3 or 5, got {self.kernel_choices}")
        bad_modes = [m for m in self.conv_modes
                     if m not in ("regular", "group", "depthwise")]
        if not self.conv_modes or bad_modes:
            raise SearchConfigError(f"unknown conv modes {bad_modes or '(empty)'}")
        for c in self.channel_choices:
            if not self._legal_modes(c):
                raise SearchConfigError(
                    f"no legal conv mode for {c} channels with modes "
                    f"{self.conv_modes} in family {self.family}")
        total = 1
        for s in self.strides:
            total *= s
        h, w = self.input_resolution
        if h % total or w % total:
            raise SearchConfigError(
                f"input resolution {h}x{w} not divisible by total stride {total}")

    def _legal_modes(self, channels: int) -> list[str]:
        return [m for m in self.conv_modes
                if m == "regular"
                or (m == "group" and channels % 32 == 0)
                or (m == "depthwise" and self.family == "effnet_like")]

    def mutation_config(self) -> MutationConfig:
        return MutationConfig(
            repeats_min=min(self.repeat_choices),
            repeats_max=max(self.repeat_choices),
            channels_min=min(self.channel_choices),
            channels_max=max(self.channel_choices),
            channel_step=self.channel_step,
            kernel_choices=self.kernel_choices,
            conv_modes=self.conv_modes,
            expansion_choices=self.expansion_choices,
            expansion_rate=0.2 if len(self.expansion_choices) > 1 else 0.0,
            allow_depthwise=self.allow_depthwise,
        )

    def _gene(self, rng: np.random.Generator, stride: int) -> StageGene:
        channels = int(rng.choice(self.channel_choices))
        modes = self._legal_modes(channels)
        return StageGene(
            repeats=int(rng.choice(self.repeat_choices)),
            channels=channels,
            kernel=int(rng.choice(self.kernel_choices)),
            conv_mode=str(rng.choice(modes)),
            stride=stride,
        )

    def sample(self, rng: np.random.Generator) -> Genome:
        expansion = int(rng.choice(self.expansion_choices)) \
            if self.family == "effnet_like" else 4
        return Genome(
            family=self.family,
            stages=tuple(self._gene(rng, s) for s in self.strides),
            stem_channels=self.stem_channels,
            num_classes=self.num_classes,
            input_resolution=self.input_resolution,
            expansion=expansion,
        )

    def mutate(self, genome: Genome, rng: np.random.Generator) -> Genome:
        return genome_mutate(genome, self.mutation_config(),
                             seed=int(rng.integers(0, 2**63)))

    def crossover(self, a: Genome, b: Genome, rng: np.random.Generator) -> Genome:
        return genome_crossover(a, b, seed=int(rng.integers(0, 2**63)))

    def serialize(self, genome: Genome) -> str:
        return genome_to_json(genome)
