"""Label-noise repair: collaborative neighbor voting and iterative self-training.

Both routines rewrite only unobserved candidate labels; positions that carry
real user feedback are immutable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalog import Catalog
from .neuralkit import FeaturizerConfig, SparseFeatures, TrainConfig, fnv1a64, ngram_keys
from .reranker import PROB_CLAMP, RerankExample, RRModel, prep_features, rr_scores, \
    train_rr

EMBED_DIM = 256


@dataclass(frozen=True)
class CollabConfig:
    """Neighbor-vote relabeling parameters."""

    max_neighbors: int = 100
    min_similarity: float = 0.5
    min_votes: int = 6
    min_positive_rate: float = 0.45
    fractional: bool = False
    seed: int = 0

    def __post_init__(self):
        # min_similarity above 1.0 is allowed: it makes relabeling the identity
        if self.max_neighbors < 1 or self.min_votes < 1:
            raise ValueError("max_neighbors and min_votes must be >= 1")
        if self.min_similarity <= -1.0:
            raise ValueError("min_similarity must exceed -1")
        if not 0.0 <= self.min_positive_rate <= 1.0:
            raise ValueError("min_positive_rate must be in [0, 1]")

    def to_json(self) -> dict:
        return {
            "max_neighbors": self.max_neighbors,
            "min_similarity": self.min_similarity,
            "min_votes": self.min_votes,
            "min_positive_rate": self.min_positive_rate,
            "fractional": self.fractional,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CollabConfig":
        return cls(**obj)


@dataclass(frozen=True)
class SelfTrainConfig:
    """Iterative pseudo-labeling parameters."""

    n_rounds: int = 10
    cutoff: float = 0.3
    adaptive: bool = True
    cutoff_step: float = 0.1
    seed: int = 0

    def __post_init__(self):
        # a cutoff at or above 1.0 is allowed: no probability clears it, so
        # the transformation degenerates to the identity
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.cutoff <= 0.0:
            raise ValueError("cutoff must be positive")
        if self.cutoff_step < 0.0:
            raise ValueError("cutoff_step must be >= 0")

    def round_cutoff(self, i: int) -> float:
        return self.cutoff + self.cutoff_step * i if self.adaptive else self.cutoff

    def to_json(self) -> dict:
        return {
            "n_rounds": self.n_rounds,
            "cutoff": self.cutoff,
            "adaptive": self.adaptive,
            "cutoff_step": self.cutoff_step,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SelfTrainConfig":
        return cls(**obj)


def _ngram_counts(text: str, featurizer: FeaturizerConfig) -> dict[int, int]:
    counts: dict[int, int] = {}
    mask = featurizer.num_buckets - 1
    for key in ngram_keys(text, featurizer):
        idx = fnv1a64(key.encode("utf-8"), featurizer.hash_seed) & mask
        counts[idx] = counts.get(idx, 0) + 1
    return counts


def utterance_embeddings(texts: list[str], featurizer: FeaturizerConfig,
                         dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    """Unit-normalized signed random projection of tf-idf weighted hashed n-grams."""
    n = len(texts)
    all_counts = [_ngram_counts(t, featurizer) for t in texts]
    df = np.zeros(featurizer.num_buckets, dtype=np.int64)
    for counts in all_counts:
        for idx in counts:
            df[idx] += 1
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    rng = np.random.default_rng(np.random.SeedSequence((seed, 30)))
    signs = (rng.integers(0, 2, size=(featurizer.num_buckets, dim), dtype=np.int8) * 2 - 1)
    emb = np.zeros((n, dim), dtype=np.float64)
    for i, counts in enumerate(all_counts):
        if not counts:
            continue
        idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
        w = np.fromiter(counts.values(), dtype=np.float64, count=len(counts)) * idf[idx]
        w /= np.linalg.norm(w)
        emb[i] = w @ signs[idx]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    np.divide(emb, norms, out=emb, where=norms > 0)
    return emb.astype(np.float32)


def nearest_neighbors(emb: np.ndarray, max_neighbors: int, min_similarity: float,
                      block: int = 2048) -> list[np.ndarray]:
    """Per-row indices of up to max_neighbors most-cosine-similar other rows."""
    n = emb.shape[0]
    out: list[np.ndarray] = []
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        sims = emb[lo:hi] @ emb.T
        for b in range(hi - lo):
            row = sims[b]
            row[lo + b] = -np.inf  # a row is not its own neighbor
            cand = np.nonzero(row >= min_similarity)[0]
            if cand.shape[0] > max_neighbors:
                top = np.argpartition(row[cand], -max_neighbors)[-max_neighbors:]
                cand = cand[top]
            order = np.lexsort((cand, -row[cand]))
            out.append(cand[order])
    return out


def _copy_examples(examples: list[RerankExample]) -> list[RerankExample]:
    return [RerankExample(ex.utterance_id, ex.text, ex.candidates,
                          ex.labels.copy(), ex.observed.copy()) for ex in examples]


def collaborative_relabel(examples: list[RerankExample], featurizer: FeaturizerConfig,
                          cfg: CollabConfig = CollabConfig()):
    """Impute labels for unobserved candidates from near-duplicate utterances.

    Similar utterances vote with their observed feedback per skill; a skill with
    at least min_votes votes and a positive rate of at least min_positive_rate
    labels the target's unobserved slot 1 with probability equal to that rate
    (or with the rate itself when fractional). Returns (new_examples, report).
    """
    out = _copy_examples(examples)
    report = {"targets_touched": 0, "added_positives": 0, "fractional": cfg.fractional}
    if not examples:
        return out, report
    skill_row: dict[str, int] = {}
    obs_row = np.full(len(examples), -1, dtype=np.int64)
    obs_lab = np.zeros(len(examples), dtype=np.float64)
    for i, ex in enumerate(examples):
        pos = np.nonzero(ex.observed)[0]
        if pos.shape[0] == 0:
            continue
        sid = ex.candidates.entries[int(pos[0])].skill_id
        obs_row[i] = skill_row.setdefault(sid, len(skill_row))
        obs_lab[i] = ex.labels[int(pos[0])]
    n_skills = len(skill_row)
    if n_skills == 0 or cfg.min_similarity > 1.0:
        return out, report
    emb = utterance_embeddings([ex.text for ex in examples], featurizer, seed=cfg.seed)
    neighbors = nearest_neighbors(emb, cfg.max_neighbors, cfg.min_similarity)
    targets = np.concatenate([np.full(nb.shape[0], t, dtype=np.int64)
                              for t, nb in enumerate(neighbors)]) \
        if neighbors else np.empty(0, dtype=np.int64)
    sources = np.concatenate(neighbors) if neighbors else np.empty(0, dtype=np.int64)
    has_obs = obs_row[sources] >= 0
    targets, sources = targets[has_obs], sources[has_obs]
    keys = targets * n_skills + obs_row[sources]
    votes = np.bincount(keys, minlength=len(examples) * n_skills)
    pos_votes = np.bincount(keys, weights=obs_lab[sources], minlength=len(examples) * n_skills)
    with np.errstate(invalid="ignore"):
        rate = np.where(votes > 0, pos_votes / np.maximum(votes, 1), 0.0)
    qualified = (votes >= cfg.min_votes) & (rate >= cfg.min_positive_rate)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 31)))
    for t in range(len(examples)):
        base = t * n_skills
        q = np.nonzero(qualified[base: base + n_skills])[0]
        if q.shape[0] == 0:
            continue
        q_rates = {int(s): float(rate[base + s]) for s in q}
        ex = out[t]
        touched = False
        for j, cand in enumerate(ex.candidates.entries):
            if ex.observed[j]:
                continue
            row = skill_row.get(cand.skill_id)
            if row is None or row not in q_rates:
                continue
            p = q_rates[row]
            if cfg.fractional:
                new = p
            else:
                new = 1.0 if rng.random() < p else ex.labels[j]
            if new != ex.labels[j]:
                ex.labels[j] = new
                touched = True
                report["added_positives"] += 1
        if touched:
            report["targets_touched"] += 1
    return out, report


def observed_feedback_loss(model: RRModel, examples: list[RerankExample],
                           feats: list[SparseFeatures] | None = None) -> float:
    """Mean BCE restricted to observed slots: fit to actual user feedback.

    Pseudo-labels raise scores on unobserved slots, which the all-slot loss
    counts against their imputed zeros; scoring only real feedback keeps round
    selection from being biased against relabeling itself.
    """
    scores = rr_scores(model, examples, feats=feats)
    total = 0.0
    count = 0
    for ex, sc in zip(examples, scores):
        m = ex.observed
        if not m.any():
            continue
        p = np.clip(sc[m], PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = ex.labels[m]
        total += float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())
        count += int(m.sum())
    return total / count if count else float("inf")


def self_train_relabel(train_examples: list[RerankExample],
                       val_examples: list[RerankExample], catalog: Catalog,
                       base_model: RRModel, train_cfg: TrainConfig,
                       cfg: SelfTrainConfig = SelfTrainConfig(),
                       train_feats: list[SparseFeatures] | None = None,
                       val_feats: list[SparseFeatures] | None = None):
    """Promote confident unobserved candidates to positives, retrain, repeat.

    Round i relabels unobserved slots whose score exceeds the round cutoff and
    retrains from the previous weights; the round with the lowest validation
    loss on observed feedback wins. A round that adds nothing stops the loop,
    so a cutoff no score can clear leaves the examples and model untouched
    and reports i_star -1.
    """
    if train_feats is None:
        train_feats = prep_features(train_examples, base_model.featurizer)
    if val_feats is None:
        val_feats = prep_features(val_examples, base_model.featurizer)
    current = _copy_examples(train_examples)
    model = base_model
    base_loss = observed_feedback_loss(base_model, val_examples, feats=val_feats)
    best = (np.inf, -1, None, None)
    rounds = []
    for i in range(cfg.n_rounds):
        cutoff = cfg.round_cutoff(i)
        scores = rr_scores(model, current, feats=train_feats)
        added = 0
        for ex, sc in zip(current, scores):
            promote = (~ex.observed) & (sc > cutoff) & (ex.labels < 1.0)
            if promote.any():
                ex.labels[promote] = 1.0
                added += int(promote.sum())
        if added == 0:
            break
        model, _ = train_rr(current, val_examples, catalog, train_cfg,
                            mode=model.mode, ablate=model.ablate,
                            init_model=model, train_feats=train_feats,
                            val_feats=val_feats)
        val_loss = observed_feedback_loss(model, val_examples, feats=val_feats)
        rounds.append({"round": i, "cutoff": cutoff, "added": added, "val_loss": val_loss})
        if val_loss < best[0]:
            best = (val_loss, i, _copy_examples(current), model.params.copy())
    loss_star, i_star, best_examples, best_params = best
    report = {"i_star": i_star, "base_val_loss": base_loss, "rounds": rounds}
    if i_star < 0:
        return _copy_examples(train_examples), base_model, report
    model.params = best_params
    return best_examples, model, report
