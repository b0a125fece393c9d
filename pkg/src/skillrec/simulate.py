"""Synthetic world, rule-based logging policy, and stochastic user feedback.

The generated dataset has the exposure-bias structure this package studies:
every utterance's relevant set is a whole skill cluster, but the logging
policy exposes only its lexical argmax, so most relevant skills never
receive feedback.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import (
    Catalog,
    LoggedInteraction,
    RelevanceOracle,
    Skill,
    Utterance,
    save_catalog,
    save_interactions,
    save_oracle,
)
from .keyword_sl import InvertedIndex, build_index, retrieve

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_LETTERS = "abcdefghijklmnopqrstuvwxyz"

CORE_TOKENS_PER_CLUSTER = 6
PRIVATE_CORE_TOKENS = 4
SHARED_CORE_TOKENS = CORE_TOKENS_PER_CLUSTER - PRIVATE_CORE_TOKENS
MAX_CLUSTER_SIZE = 5


@dataclass(frozen=True)
class WorldConfig:
    n_skills: int = 300
    n_clusters: int = 100
    n_categories: int = 12
    subcategories_per_category: int = 3
    core_token_pool: int = 600
    shared_pool_size: int = 60
    n_carrier_phrases: int = 20
    noise_pool: int = 1000
    zipf_exponent: float = 1.1
    drop_prob: float = 0.3
    corrupt_prob: float = 0.12
    typo_prob: float = 0.15
    extra_noise_prob: float = 0.4
    a_rel: float = 0.6
    a_irr: float = 0.08
    # a slice of skills is broken: lexically plausible, never actually helpful.
    # Nothing in the catalog reveals which; only the feedback stream does.
    broken_skill_fraction: float = 0.15
    popular_fraction: float = 0.1
    # calibrated once on the default world so the logging policy suggests on
    # roughly three quarters of traffic; see calibrate_tau
    tau_log: float = 77.95879023466338
    k_log: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.n_skills < self.n_clusters:
            raise ValueError("n_skills must be >= n_clusters")
        if self.n_skills > MAX_CLUSTER_SIZE * self.n_clusters:
            raise ValueError(f"n_skills must be <= {MAX_CLUSTER_SIZE} * n_clusters")
        if self.shared_pool_size < SHARED_CORE_TOKENS:
            raise ValueError("shared pool too small")
        if self.core_token_pool < PRIVATE_CORE_TOKENS * self.n_clusters + self.shared_pool_size:
            raise ValueError("core token pool too small for the cluster count")
        for name in ("drop_prob", "corrupt_prob", "typo_prob", "extra_noise_prob",
                     "a_rel", "a_irr", "broken_skill_fraction", "popular_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "WorldConfig":
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "WorldConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


@dataclass
class World:
    config: WorldConfig
    catalog: Catalog
    clusters: list[list[str]] = field(default_factory=list)
    cluster_of: dict[str, int] = field(default_factory=dict)
    core_tokens: list[list[str]] = field(default_factory=list)
    carrier_phrases: list[list[str]] = field(default_factory=list)
    noise_tokens: list[str] = field(default_factory=list)
    confusable_tokens: list[str] = field(default_factory=list)
    zipf_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    broken_skills: frozenset[str] = frozenset()
    relevant_of_cluster: list[frozenset[str]] = field(default_factory=list)


def _make_word(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        n_syll = int(rng.integers(2, 4))
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syll)
        )
        if word not in used:
            used.add(word)
            return word


def _cluster_sizes(config: WorldConfig, rng: np.random.Generator) -> list[int]:
    sizes = [1] * config.n_clusters
    for _ in range(config.n_skills - config.n_clusters):
        eligible = [i for i, s in enumerate(sizes) if s < MAX_CLUSTER_SIZE]
        sizes[eligible[rng.integers(len(eligible))]] += 1
    return sizes


def gen_world(config: WorldConfig) -> World:
    """Build the catalog: clusters of lexically overlapping skills with categories.

    Core tokens per cluster: 2 private anchors (in every member's name), 2 private
    distinguishers, and 2 drawn from a small pool shared across clusters. Shared
    tokens give different clusters overlapping vocabulary, so purely lexical
    matching is genuinely ambiguous on part of the traffic.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    used: set[str] = set()
    core_pool = [_make_word(rng, used) for _ in range(config.core_token_pool)]
    shared_pool = core_pool[PRIVATE_CORE_TOKENS * config.n_clusters :
                            PRIVATE_CORE_TOKENS * config.n_clusters + config.shared_pool_size]
    noise_tokens = [_make_word(rng, used) for _ in range(config.noise_pool)]
    carrier_words = [_make_word(rng, used) for _ in range(30)]
    carrier_phrases = []
    for _ in range(config.n_carrier_phrases):
        n_words = int(rng.integers(2, 4))
        idx = rng.choice(len(carrier_words), size=n_words, replace=False)
        carrier_phrases.append([carrier_words[i] for i in idx])

    n_subcats = config.n_categories * config.subcategories_per_category
    sizes = _cluster_sizes(config, rng)
    skills = []
    clusters: list[list[str]] = []
    cluster_of: dict[str, int] = {}
    core_tokens: list[list[str]] = []
    idx = 0
    for c, size in enumerate(sizes):
        private = core_pool[PRIVATE_CORE_TOKENS * c : PRIVATE_CORE_TOKENS * (c + 1)]
        shared_idx = rng.choice(config.shared_pool_size, SHARED_CORE_TOKENS, replace=False)
        core = private + [shared_pool[i] for i in shared_idx]
        core_tokens.append(core)
        subcat_idx = c % n_subcats
        cat_idx = subcat_idx // config.subcategories_per_category
        category = f"cat{cat_idx:02d}"
        subcategory = f"sub{subcat_idx:02d}"
        members = []
        for j in range(size):
            skill_id = f"s{idx:04d}"
            # anchors core[0:2] are shared by every name in the cluster, and
            # adjacent members are twins with the same distinguishing token, so
            # names alone cannot always separate cluster mates; descriptions
            # differ, which is what spreads logging feedback across twins
            distinct = core[2 + (j // 2) % 4]
            second = core[2 + (j + 1) % 4]
            name = " ".join([core[0], core[1], distinct])
            desc_noise = [noise_tokens[i] for i in rng.choice(len(noise_tokens), 2, replace=False)]
            description = " ".join([core[0], core[1], distinct, second, category, subcategory,
                                    *desc_noise])
            example = " ".join([core[0], core[1], distinct, second])
            popularity = int(rng.random() < config.popular_fraction)
            skills.append(Skill(skill_id=skill_id, name=name, description=description,
                                example_phrases=(example,), category=category,
                                subcategory=subcategory, popularity=popularity))
            members.append(skill_id)
            cluster_of[skill_id] = c
            idx += 1
        clusters.append(members)

    perm = rng.permutation(config.n_clusters)
    weights = np.zeros(config.n_clusters)
    for rank, cluster in enumerate(perm):
        weights[cluster] = (rank + 1) ** (-config.zipf_exponent)
    zipf_probs = weights / weights.sum()
    confusable = core_pool[: PRIVATE_CORE_TOKENS * config.n_clusters]
    # every cluster keeps at least one working member so relevant sets stay
    # non-empty; the broken ones are indistinguishable by text alone
    broken: set[str] = set()
    for members in clusters:
        can_break = rng.permutation(len(members))[: len(members) - 1]
        for j in can_break:
            if rng.random() < config.broken_skill_fraction:
                broken.add(members[int(j)])
    relevant_of_cluster = [frozenset(m for m in members if m not in broken)
                           for members in clusters]
    return World(config=config, catalog=Catalog(skills), clusters=clusters,
                 cluster_of=cluster_of, core_tokens=core_tokens,
                 carrier_phrases=carrier_phrases, noise_tokens=noise_tokens,
                 confusable_tokens=confusable, zipf_probs=zipf_probs,
                 broken_skills=frozenset(broken),
                 relevant_of_cluster=relevant_of_cluster)


def _confusion_token(world: World, cluster: int, rng: np.random.Generator) -> str:
    """Word-level ASR confusion: substitute a private core token of another cluster."""
    own = set(world.core_tokens[cluster])
    while True:
        token = world.confusable_tokens[rng.integers(len(world.confusable_tokens))]
        if token not in own:
            return token


def _typo(token: str, rng: np.random.Generator) -> str:
    """Swap two inner characters: exact word match misses it, char n-grams overlap."""
    if len(token) < 4:
        return token + token[-1]
    i = int(rng.integers(1, len(token) - 2))
    return token[:i] + token[i + 1] + token[i] + token[i + 2:]


def gen_utterance(world: World, rng: np.random.Generator, utterance_id: str,
                  timestamp: int) -> tuple[Utterance, frozenset[str], int]:
    """Draw a cluster (Zipf), compose core tokens + carrier phrase, apply noise."""
    cfg = world.config
    cluster = int(rng.choice(cfg.n_clusters, p=world.zipf_probs))
    core = world.core_tokens[cluster]
    n_pick = int(rng.integers(2, 5))
    picked = [core[i] for i in rng.choice(CORE_TOKENS_PER_CLUSTER, n_pick, replace=False)]
    kept = [t for t in picked if rng.random() >= cfg.drop_prob]
    kept = [_confusion_token(world, cluster, rng) if rng.random() < cfg.corrupt_prob else t
            for t in kept]
    kept = [_typo(t, rng) if rng.random() < cfg.typo_prob else t for t in kept]
    carrier = world.carrier_phrases[rng.integers(len(world.carrier_phrases))]
    tokens = kept + list(carrier)
    if rng.random() < cfg.extra_noise_prob:
        noise = world.noise_tokens[rng.integers(len(world.noise_tokens))]
        tokens.insert(int(rng.integers(len(tokens) + 1)), noise)
    utt = Utterance(utterance_id=utterance_id, text=" ".join(tokens), timestamp=timestamp)
    return utt, world.relevant_of_cluster[cluster], cluster


def logging_policy(index: InvertedIndex, text: str, k: int, tau: float):
    """Suggest the top TF-IDF candidate if it clears the threshold, else abstain."""
    clist = retrieve(index, text, k)
    if len(clist) == 0 or clist.entries[0].score < tau:
        return None, clist
    return clist.entries[0].skill_id, clist


def user_feedback(relevant: frozenset[str], skill_id: str, rng: np.random.Generator,
                  a_rel: float, a_irr: float) -> int:
    p = a_rel if skill_id in relevant else a_irr
    return int(rng.random() < p)


def generate_interactions(world: World, index: InvertedIndex, n: int):
    """Roll out n utterances through the logging policy and feedback model."""
    cfg = world.config
    utt_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    fb_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    interactions = []
    relevant_sets: dict[str, frozenset[str]] = {}
    n_suggested = 0
    n_accepted = 0
    n_suggested_relevant = 0
    n_accepted_relevant = 0
    for i in range(n):
        utt, relevant, _ = gen_utterance(world, utt_rng, f"u{i:06d}", i)
        relevant_sets[utt.utterance_id] = relevant
        suggested, clist = logging_policy(index, utt.text, cfg.k_log, cfg.tau_log)
        accepted = None
        if suggested is not None:
            # positives stay inside the keyword shortlister's reachable set
            assert suggested == clist.entries[0].skill_id
            n_suggested += 1
            is_rel = suggested in relevant
            n_suggested_relevant += int(is_rel)
            accepted = user_feedback(relevant, suggested, fb_rng, cfg.a_rel, cfg.a_irr)
            n_accepted += accepted
            n_accepted_relevant += accepted * int(is_rel)
        interactions.append(LoggedInteraction(utterance=utt, suggested_skill=suggested,
                                              accepted=accepted))
    p_rel = n_suggested_relevant / n_suggested if n_suggested else 0.0
    denom = cfg.a_rel * p_rel + cfg.a_irr * (1.0 - p_rel)
    stats = {
        "n_utterances": n,
        "suggestion_rate": n_suggested / n if n else 0.0,
        "acceptance_rate": n_accepted / n_suggested if n_suggested else 0.0,
        "suggested_relevant_rate": p_rel,
        "accepted_relevant_rate": n_accepted_relevant / n_accepted if n_accepted else 0.0,
        "predicted_accepted_relevant_rate": cfg.a_rel * p_rel / denom if denom else 0.0,
    }
    return interactions, relevant_sets, stats


def simulate_log(config: WorldConfig, n: int, out_dir: str | Path) -> dict:
    """Write skills.jsonl, interactions.jsonl, oracle.jsonl; return run statistics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = gen_world(config)
    index = build_index(world.catalog)
    interactions, relevant_sets, stats = generate_interactions(world, index, n)
    save_catalog(world.catalog, out_dir / "skills.jsonl")
    save_interactions(interactions, out_dir / "interactions.jsonl")
    save_oracle(RelevanceOracle(relevant_sets, world.catalog), out_dir / "oracle.jsonl")
    return stats


def calibrate_tau(config: WorldConfig, n: int = 10_000, target_rate: float = 0.75) -> float:
    """Threshold whose achievable suggestion rate is closest to target_rate.

    Suggestion fires at score >= tau, so only rates at distinct top-score levels
    are achievable; scores are sums of a few idf^2 terms and tie heavily.
    """
    world = gen_world(config)
    index = build_index(world.catalog)
    utt_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    top_scores = np.zeros(n)
    for i in range(n):
        utt, _, _ = gen_utterance(world, utt_rng, f"u{i:06d}", i)
        clist = retrieve(index, utt.text, config.k_log)
        top_scores[i] = clist.entries[0].score if len(clist) else 0.0
    levels = np.unique(top_scores[top_scores > 0.0])
    rates = np.array([(top_scores >= lvl).mean() for lvl in levels])
    best = int(np.argmin(np.abs(rates - target_rate)))
    return float(levels[best])
