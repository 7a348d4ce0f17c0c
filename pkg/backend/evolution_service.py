"""
Evolution Service - crossover -> mutation -> scoring -> selection over metric
descriptors, with candidate generation delegated to a builtin deterministic
generator or an external completion endpoint.
"""
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backend.data_service import FoldSet, ReturnMatrix
from backend.errors import ConfigError, GenerationError, ValidationError
from backend.evaluation_service import (
    DEFAULT_NDCG_FRACTION,
    EvalReport,
    FitnessWeights,
    evaluate_metric,
    fitness,
)
from backend.gpt_service import LLMEndpoint, create_client, generate_metric_descriptor
from backend.metrics_service import (
    ALPHA_FAMILY,
    CUSTOM_KIND,
    METRIC_KINDS,
    MetricDescriptor,
    baseline_descriptors,
)

logger = logging.getLogger(__name__)

MUTATION_FACTORS = (0.5, 0.8, 1.25, 2.0)


@dataclass
class Candidate:
    id: str
    descriptor: MetricDescriptor
    lineage: List[str] = field(default_factory=list)
    generation: int = 0
    fitness: Optional[float] = None
    eval: Optional[EvalReport] = None
    error: Optional[str] = None

    def rank_key(self) -> Tuple:
        # best fitness first, then lower generation, then id
        fit = self.fitness if self.fitness is not None and not math.isnan(self.fitness) else -math.inf
        return (-fit, self.generation, self.id)

    def to_record(self) -> Dict:
        record = {
            "id": self.id,
            **self.descriptor.to_dict(),
            "lineage": list(self.lineage),
            "generation": self.generation,
            "fitness": self.fitness if self.fitness is not None and math.isfinite(self.fitness) else None,
            "error": self.error,
        }
        if self.eval is not None and self.eval.folds:
            record.update({stat: self.eval.mean(stat) for stat in ("spearman", "kendall", "ndcg")})
        return record


@dataclass
class GeneratorRequest:
    mode: str  # crossover | mutation
    parents: List[Tuple[MetricDescriptor, Optional[float]]]
    guidance: str = ""

    def __post_init__(self):
        if self.mode == "crossover":
            if not 2 <= len(self.parents) <= 4:
                raise ValidationError(f"Crossover needs 2-4 parents, got {len(self.parents)}")
        elif self.mode == "mutation":
            if len(self.parents) != 1:
                raise ValidationError(f"Mutation needs exactly 1 parent, got {len(self.parents)}")
        else:
            raise ValidationError(f"Unknown generation mode {self.mode!r}")


@dataclass
class EvolutionConfig:
    population_size: int = 24
    n_generations: int = 10
    top_k: int = 6
    crossover_count: int = 12
    mutation_count: int = 6
    weights: FitnessWeights = field(default_factory=FitnessWeights)
    seed: int = 0
    generator: str = "builtin"  # builtin | external
    endpoint: Optional[LLMEndpoint] = None
    guidance: str = ""
    r_f: float = 0.0
    ndcg_fraction: float = DEFAULT_NDCG_FRACTION

    def __post_init__(self):
        if min(self.population_size, self.top_k) < 1:
            raise ConfigError("population_size and top_k must be >= 1")
        if self.top_k > self.population_size:
            raise ConfigError(f"top_k={self.top_k} exceeds population_size={self.population_size}")
        if min(self.n_generations, self.crossover_count, self.mutation_count) < 0:
            raise ConfigError("Generation and offspring counts must be >= 0")
        if self.generator not in ("builtin", "external"):
            raise ConfigError(f"Unknown generator {self.generator!r}")
        if self.generator == "external" and self.endpoint is None:
            raise ConfigError("External generator needs an endpoint URL")


def _with_kind(d: MetricDescriptor, kind: str) -> MetricDescriptor:
    """Switch kind, keeping every parameter the new kind shares"""
    defaults = METRIC_KINDS[kind].defaults
    params = {k: d.params.get(k, v) for k, v in defaults.items()}
    return MetricDescriptor(d.name, kind, params)


def toggle_kind(d: MetricDescriptor) -> MetricDescriptor:
    """One step along alpha_s1 -> s2 -> s3 -> s4 (s4 steps back; sharpe/psr enter at s1)"""
    if d.kind == CUSTOM_KIND:
        return MetricDescriptor(d.name, d.kind, dict(d.params))
    if d.kind not in ALPHA_FAMILY:
        return _with_kind(d, ALPHA_FAMILY[0])
    pos = ALPHA_FAMILY.index(d.kind)
    step = pos + 1 if pos + 1 < len(ALPHA_FAMILY) else pos - 1
    return _with_kind(d, ALPHA_FAMILY[step])


def scale_param(d: MetricDescriptor, key: str, factor: float) -> MetricDescriptor:
    params = dict(d.params)
    params[key] = params[key] * factor
    return MetricDescriptor(d.name, d.kind, params)


def _fitness_or_floor(f: Optional[float]) -> float:
    return f if f is not None and not math.isnan(f) else -math.inf


def builtin_generate(req: GeneratorRequest, rng: np.random.Generator) -> MetricDescriptor:
    """
    crossover: kind of the fittest parent, each parameter picked uniformly
               from the parents that carry it
    mutation:  scale one parameter by a factor from MUTATION_FACTORS, or
               toggle the kind one step along the alpha family
    """
    if req.mode == "crossover":
        ranked = sorted(req.parents, key=lambda p: -_fitness_or_floor(p[1]))
        lead = ranked[0][0]
        if lead.kind == CUSTOM_KIND:
            return MetricDescriptor(lead.name, lead.kind, dict(lead.params))
        params = {}
        for key, default in METRIC_KINDS[lead.kind].defaults.items():
            donors = [d for d, _ in req.parents if key in d.params]
            params[key] = donors[int(rng.integers(len(donors)))].params[key] if donors else default
        return MetricDescriptor(lead.name, lead.kind, params)

    parent = req.parents[0][0]
    keys = sorted(parent.params) if parent.kind != CUSTOM_KIND else []
    if not keys or rng.random() < 0.5:
        return toggle_kind(parent)
    key = keys[int(rng.integers(len(keys)))]
    factor = MUTATION_FACTORS[int(rng.integers(len(MUTATION_FACTORS)))]
    return scale_param(parent, key, factor)


def external_generate(req: GeneratorRequest, endpoint: LLMEndpoint, client=None) -> MetricDescriptor:
    """Completion-endpoint generation; raises TransportError / GenerationRejectedError"""
    client = client or create_client(endpoint)
    return generate_metric_descriptor(client, endpoint, req.mode, req.parents, req.guidance)


class CandidateGenerator:
    """
    Generates descriptors for a batch of requests. The external path falls
    back to the builtin generator (with the same per-request rng) whenever the
    endpoint fails, so a run never aborts on generation.
    """

    def __init__(self, kind: str = "builtin", endpoint: Optional[LLMEndpoint] = None, client=None):
        self.kind = kind
        self.endpoint = endpoint
        self.client = client
        self.fallbacks = 0
        self._lock = threading.Lock()

    def _one(self, item: Tuple[GeneratorRequest, np.random.Generator]) -> MetricDescriptor:
        req, rng = item
        if self.kind == "external":
            try:
                return external_generate(req, self.endpoint, self.client)
            except GenerationError as e:
                with self._lock:
                    self.fallbacks += 1
                logger.warning(f"[EVOLVE] External generator failed ({e}); using builtin generator")
        return builtin_generate(req, rng)

    def generate(self, requests: Sequence[GeneratorRequest], rngs: Sequence[np.random.Generator]) -> List[MetricDescriptor]:
        items = list(zip(requests, rngs))
        if self.kind == "external" and items:
            if self.client is None:
                self.client = create_client(self.endpoint)
            with ThreadPoolExecutor(max_workers=max(1, self.endpoint.max_inflight)) as pool:
                return list(pool.map(self._one, items))
        return [self._one(item) for item in items]


@dataclass
class GenerationRecord:
    round: int
    candidates: List[Candidate]
    retained: List[str]


@dataclass
class EvolutionLog:
    rounds: List[GenerationRecord] = field(default_factory=list)

    def final_population(self) -> List[Candidate]:
        last = self.rounds[-1]
        by_id = {c.id: c for c in last.candidates}
        return [by_id[i] for i in last.retained]

    def best(self) -> Candidate:
        return self.final_population()[0]

    def ranked(self) -> List[Candidate]:
        """Every distinct candidate ever scored, best first"""
        seen: Dict[str, Candidate] = {}
        for record in self.rounds:
            for c in record.candidates:
                seen.setdefault(c.id, c)
        return sorted(seen.values(), key=Candidate.rank_key)

    def to_jsonl(self) -> str:
        lines = []
        for record in self.rounds:
            retained = set(record.retained)
            for c in sorted(record.candidates, key=Candidate.rank_key):
                lines.append(json.dumps({"round": record.round, **c.to_record(), "retained": c.id in retained},
                                        sort_keys=True))
        return "\n".join(lines) + "\n"


def select_survivors(pool: Sequence[Candidate], top_k: int) -> List[Candidate]:
    """Top-k by fitness; identical (kind, params) descriptors are kept once"""
    survivors, seen = [], set()
    for c in sorted(pool, key=Candidate.rank_key):
        key = c.descriptor.key()
        if key in seen:
            continue
        seen.add(key)
        survivors.append(c)
        if len(survivors) == top_k:
            break
    return survivors


class _Scorer:
    """Evaluates candidates once per (descriptor, fold set) and caches the outcome"""

    def __init__(self, r: ReturnMatrix, folds: FoldSet, cfg: EvolutionConfig, executor=None):
        self.r = r
        # the holdout stays untouched during evolution
        self.folds = FoldSet(list(folds.folds), None, folds.n_periods)
        self.fold_hash = self.folds.fingerprint()
        self.cfg = cfg
        self.executor = executor
        self.cache: Dict[Tuple, Tuple[float, Optional[EvalReport], Optional[str]]] = {}
        self.evaluations = 0

    def _evaluate(self, descriptor: MetricDescriptor):
        try:
            report = evaluate_metric(descriptor, self.r, self.folds, self.cfg.r_f,
                                     ndcg_fraction=self.cfg.ndcg_fraction)
            return fitness(report, self.cfg.weights), report, None
        except Exception as e:
            logger.warning(f"[EVOLVE] Evaluation of {descriptor.name} failed: {e}")
            return -math.inf, None, f"{type(e).__name__}: {e}"

    def score(self, candidates: Sequence[Candidate]) -> None:
        pending: Dict[Tuple, MetricDescriptor] = {}
        for c in candidates:
            key = (c.descriptor.key(), self.fold_hash)
            if key not in self.cache and key not in pending:
                pending[key] = c.descriptor
        keys = list(pending)
        if self.executor is not None:
            results = list(self.executor.map(self._evaluate, [pending[k] for k in keys]))
        else:
            results = [self._evaluate(pending[k]) for k in keys]
        self.evaluations += len(keys)
        self.cache.update(zip(keys, results))
        for c in candidates:
            c.fitness, c.eval, c.error = self.cache[(c.descriptor.key(), self.fold_hash)]


def _child_rngs(rng: np.random.Generator, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(int(s)) for s in rng.integers(0, 2 ** 63 - 1, size=n)]


def _named(d: MetricDescriptor, cid: str) -> MetricDescriptor:
    if d.kind == CUSTOM_KIND:
        return d
    return MetricDescriptor(f"{d.kind}@{cid}", d.kind, dict(d.params))


def evolve(r: ReturnMatrix, folds: FoldSet, cfg: EvolutionConfig,
           seeds: Optional[Sequence[MetricDescriptor]] = None, executor=None,
           generator: Optional[CandidateGenerator] = None) -> EvolutionLog:
    """
    Seed population = registered baselines (plus any extra seeds). Each round
    crosses over the retained parents, mutates every child and mutation_count
    parents, scores the newcomers and keeps the top_k of parents + children.
    """
    if not folds.folds:
        raise ConfigError("Evolution needs at least one cross-validation fold")
    rng = np.random.default_rng(cfg.seed)
    generator = generator or CandidateGenerator(cfg.generator, cfg.endpoint)
    scorer = _Scorer(r, folds, cfg, executor)

    seed_candidates = [Candidate(f"seed-{d.name}", d) for d in (seeds or baseline_descriptors())]
    scorer.score(seed_candidates)
    retained = select_survivors(seed_candidates, cfg.top_k)
    log = EvolutionLog([GenerationRecord(0, seed_candidates, [c.id for c in retained])])
    logger.info(f"[EVOLVE] Seeds scored, best {retained[0].id} fitness={retained[0].fitness:.4f}")

    for round_no in range(1, cfg.n_generations + 1):
        parents = retained
        room = max(0, cfg.population_size - len(parents))

        crossover_reqs, crossover_parents = [], []
        if len(parents) >= 2:
            for _ in range(min(cfg.crossover_count, room)):
                n_par = int(rng.integers(2, min(4, len(parents)) + 1))
                picks = sorted(rng.choice(len(parents), size=n_par, replace=False).tolist())
                chosen = [parents[i] for i in picks]
                crossover_parents.append(chosen)
                crossover_reqs.append(GeneratorRequest("crossover", [(c.descriptor, c.fitness) for c in chosen],
                                                       cfg.guidance))
        children = generator.generate(crossover_reqs, _child_rngs(rng, len(crossover_reqs)))

        mutation_sources: List[Tuple[MetricDescriptor, List[Candidate]]] = [
            (child, chosen) for child, chosen in zip(children, crossover_parents)
        ]
        for j in range(min(cfg.mutation_count, room - len(children))):
            parent = parents[j % len(parents)]
            mutation_sources.append((parent.descriptor, [parent]))
        mutation_reqs = [GeneratorRequest("mutation", [(d, None)], cfg.guidance) for d, _ in mutation_sources]
        mutated = generator.generate(mutation_reqs, _child_rngs(rng, len(mutation_reqs)))

        newcomers = []
        for j, (descriptor, (_, lineage)) in enumerate(zip(mutated, mutation_sources)):
            tag = "c" if j < len(children) else "m"
            cid = f"g{round_no:03d}-{tag}{j:03d}"
            newcomers.append(Candidate(
                id=cid,
                descriptor=_named(descriptor, cid),
                lineage=[p.id for p in lineage],
                generation=1 + max(p.generation for p in lineage),
            ))
        scorer.score(newcomers)
        pool = list(parents) + newcomers
        retained = select_survivors(pool, cfg.top_k)
        log.rounds.append(GenerationRecord(round_no, pool, [c.id for c in retained]))
        logger.info(f"[EVOLVE] Round {round_no}/{cfg.n_generations}: {len(newcomers)} new, "
                    f"best {retained[0].id} fitness={retained[0].fitness:.4f}")

    logger.info(f"[EVOLVE] Done: {scorer.evaluations} evaluations, {generator.fallbacks} generator fallbacks")
    return log
