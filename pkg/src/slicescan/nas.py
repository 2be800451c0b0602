"""Slice-combination search: single-path supernet training and evolutionary search.

Every S3 block picks one slice config from ``SEARCH_SPACE``. Slice choices only
change scan permutations, never parameter shapes, so every genotype runs on
the shared supernet weights unchanged.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SegmentationData
from .errors import ConfigError, SearchError
from .metrics import mean_dice
from .network import ModelConfig
from .scan_geometry import SliceConfig
from .training import TrainConfig, _train, determinism, predict

log = logging.getLogger(__name__)

SEARCH_SPACE = (SliceConfig(2, 2), SliceConfig(2, 4), SliceConfig(4, 2), SliceConfig(4, 4))


@dataclass(frozen=True, order=True)
class SliceGenotype:
    choices: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))

    def __len__(self):
        return len(self.choices)

    def __iter__(self):
        return iter(self.choices)

    def __getitem__(self, i):
        return self.choices[i]

    def __str__(self):
        return ",".join(str(c) for c in self.choices)

    @classmethod
    def parse(cls, text: str) -> "SliceGenotype":
        text = text.strip()
        if not text:
            return cls(())
        return cls(tuple(SliceConfig.parse(t) for t in text.split(",")))

    def validate(self, candidates=SEARCH_SPACE):
        bad = [str(c) for c in self.choices if c not in candidates]
        if bad:
            raise SearchError(f"genotype uses slices outside the search space: {bad}")


def sample_genotype(rng: np.random.Generator, k: int, candidates=SEARCH_SPACE) -> SliceGenotype:
    """Each of the ``k`` genes drawn independently and uniformly from ``candidates``."""
    idx = rng.integers(len(candidates), size=k)
    return SliceGenotype(tuple(candidates[i] for i in idx))


@dataclass
class SupernetResult:
    model: torch.nn.Module
    history: list
    genotype_log: list  # (epoch, step, genotype) per optimisation step


def train_supernet(model_config: ModelConfig, train_config: TrainConfig, dataset: SegmentationData,
                   candidates=SEARCH_SPACE, on_epoch=None) -> SupernetResult:
    """Like ``fit``, but every step runs a freshly sampled genotype.

    ``dataset`` is the supernet portion of the training data (see
    ``data.split_search``).
    """
    k = model_config.num_blocks
    for c in candidates:
        model_config.with_genotype([c] * k)  # raises if a candidate cannot tile some stage
    with determinism(train_config.deterministic):
        model, history, glog = _train(
            model_config, train_config, dataset,
            sample_genotype=lambda rng: sample_genotype(rng, k, candidates).choices,
            on_epoch=on_epoch,
        )
    glog = [(e, s, SliceGenotype(g)) for e, s, g in glog]
    return SupernetResult(model, history, glog)


def evaluate_genotype(model, genotype, search_split: SegmentationData, loss_kind="bce_dice") -> float:
    """Mean per-image DSC of ``genotype`` on the search split, using the inherited supernet weights."""
    genotype = SliceGenotype(tuple(genotype))
    if len(genotype) != model.config.num_blocks:
        raise SearchError(f"genotype has {len(genotype)} genes, model has {model.config.num_blocks} blocks")
    if len(search_split) == 0:
        raise SearchError("search split is empty")
    with determinism(True):
        preds = predict(model, search_split.images, loss_kind, genotype=genotype.choices)
    return mean_dice(preds, search_split.masks, search_split.num_classes)


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 50
    parents_kept: int = 10
    iterations: int = 20
    mutation_probability: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.parents_kept <= self.population_size:
            raise ConfigError("need 1 <= parents_kept <= population_size")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0 <= self.mutation_probability <= 1:
            raise ConfigError("mutation_probability must lie in [0, 1]")


@dataclass
class SearchLog:
    evaluations: list = field(default_factory=list)  # (iteration, genotype, dsc), first sighting only
    population: list = field(default_factory=list)  # (iteration, genotype, dsc, cached) for every member
    best_per_iteration: list = field(default_factory=list)  # (iteration, genotype, dsc)
    cache_hits: int = 0

    @property
    def n_evaluations(self):
        return len(self.evaluations)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "genotype", "dsc"])
        for it, g, d in self.evaluations:
            w.writerow([it, str(g), repr(float(d))])
        return buf.getvalue()


def _ranked(cache):
    return sorted(cache.items(), key=lambda kv: (-kv[1], kv[0]))


def _fitness_from(supernet, search_split, fitness, loss_kind):
    if fitness is not None:
        return fitness
    return lambda g: evaluate_genotype(supernet, g, search_split, loss_kind)


def evolve(supernet_weights, search_split, evo_config: EvolutionConfig = EvolutionConfig(), k=None,
           fitness=None, candidates=SEARCH_SPACE, loss_kind="bce_dice"):
    """Evolutionary search over genotypes; returns ``(best_genotype, SearchLog)``.

    Round 0 evaluates ``population_size`` random genotypes. Each of the
    following ``iterations`` rounds keeps the best ``parents_kept`` genotypes
    seen so far and refills the population with children made by uniform
    per-gene crossover of two random parents and per-gene resampling with
    ``mutation_probability``. Genotypes are evaluated once and cached.
    ``fitness`` replaces the supernet evaluation when given.
    """
    if k is None:
        k = supernet_weights.config.num_blocks
    fit_fn = _fitness_from(supernet_weights, search_split, fitness, loss_kind)
    cfg = evo_config
    rng = np.random.default_rng(cfg.seed)
    cache = {}
    slog = SearchLog()

    def score(population, it):
        for g in population:
            if g in cache:
                slog.cache_hits += 1
                slog.population.append((it, g, cache[g], True))
            else:
                cache[g] = float(fit_fn(g))
                slog.evaluations.append((it, g, cache[g]))
                slog.population.append((it, g, cache[g], False))
        best_g, best_d = _ranked(cache)[0]
        slog.best_per_iteration.append((it, best_g, best_d))
        log.debug("iteration %d best %s %.4f", it, best_g, best_d)

    population = [sample_genotype(rng, k, candidates) for _ in range(cfg.population_size)]
    score(population, 0)
    n_children = cfg.population_size - cfg.parents_kept
    for it in range(1, cfg.iterations + 1):
        parents = [g for g, _ in _ranked(cache)[: cfg.parents_kept]]
        children = []
        for _ in range(n_children):
            pick = rng.choice(len(parents), size=2, replace=len(parents) < 2)
            a, b = parents[pick[0]], parents[pick[1]]
            take_a = rng.random(k) < 0.5
            mutate = rng.random(k) < cfg.mutation_probability
            fresh = rng.integers(len(candidates), size=k)
            genes = []
            for i in range(k):
                gene = a[i] if take_a[i] else b[i]
                if mutate[i]:
                    gene = candidates[fresh[i]]
                genes.append(gene)
            children.append(SliceGenotype(tuple(genes)))
        population = parents + children
        # parents are already cached; only the children can add evaluations
        score(children, it)
    best_g, _ = _ranked(cache)[0]
    return best_g, slog


def exhaustive_search(supernet_weights, search_split, k=None, fitness=None, candidates=SEARCH_SPACE,
                      loss_kind="bce_dice"):
    """Evaluate every genotype; returns ``[(genotype, dsc), ...]`` best first, ties lexicographic."""
    if k is None:
        k = supernet_weights.config.num_blocks
    if len(candidates) ** k > 256:
        raise SearchError(f"search space of {len(candidates)}^{k} genotypes is too large for enumeration")
    fit_fn = _fitness_from(supernet_weights, search_split, fitness, loss_kind)
    results = {}
    for genes in itertools.product(candidates, repeat=k):
        g = SliceGenotype(genes)
        results[g] = float(fit_fn(g))
    return _ranked(results)


def ranking_csv(ranking) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "genotype", "dsc"])
    for r, (g, d) in enumerate(ranking):
        w.writerow([r, str(g), repr(float(d))])
    return buf.getvalue()
