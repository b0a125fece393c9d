"""Trained shortlister: hashed text encoder -> MLP -> per-skill scores.

The output layer covers only skills with enough accepted feedback (the
trainable vocabulary); category and subcategory heads share the encoder for
multi-task training.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import Candidate, CandidateList, Catalog, LoggedInteraction
from .neuralkit import (
    MLP,
    Adam,
    FeatureBatch,
    FeaturizerConfig,
    GradBag,
    ParamSet,
    TrainConfig,
    embed_bag_backward,
    embed_bag_forward,
    featurize,
    load_params,
    log_softmax,
    save_params,
    sigmoid,
    softmax,
    softplus,
)

ENCODER_DIM = 128
HIDDEN_DIMS = (128, 64)


class TrainingError(RuntimeError):
    """Raised when training inputs are unusable."""


@dataclass(frozen=True)
class MultiTaskWeights:
    w1: float = 1.0 / 3.0
    w2: float = 1.0 / 3.0
    w3: float = 1.0 / 3.0

    def __post_init__(self):
        if self.w1 <= 0 or self.w2 < 0 or self.w3 < 0:
            raise ValueError("need w1 > 0 and w2, w3 >= 0")

    def to_json(self) -> dict:
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}

    @classmethod
    def from_json(cls, obj: dict) -> "MultiTaskWeights":
        return cls(**obj)


def loss_ova(scores: np.ndarray, labels: np.ndarray) -> float:
    """One-versus-all logistic loss: sum of per-component binary cross-entropies."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary")
    # -[y ln sigma(o) + (1-y) ln(1 - sigma(o))] == softplus(o) - y*o, stably
    return float(np.sum(softplus(scores) - labels * scores))


def loss_multiclass(scores: np.ndarray, labels: np.ndarray) -> float:
    """Multi-class logistic loss -ln softmax(scores) at the single positive index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    positives = np.nonzero(labels == 1)[0]
    if positives.shape[0] != 1 or not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must contain exactly one positive")
    return float(-log_softmax(scores)[positives[0]])


def loss_multitask(outputs: dict[str, np.ndarray], labels: dict[str, np.ndarray],
                   weights: MultiTaskWeights) -> float:
    """Weighted sum of multi-class losses over skill, category, and subcategory heads."""
    for head in ("skill", "category", "subcategory"):
        if head not in outputs or head not in labels:
            raise ValueError(f"missing head {head!r}")
    return (weights.w1 * loss_multiclass(outputs["skill"], labels["skill"])
            + weights.w2 * loss_multiclass(outputs["category"], labels["category"])
            + weights.w3 * loss_multiclass(outputs["subcategory"], labels["subcategory"]))


def build_sl_vocab(interactions: list[LoggedInteraction], min_count: int = 2) -> list[str]:
    """Skills accepted at least min_count times, most frequent first, id ascending."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for it in interactions:
        if it.accepted == 1:
            counts[it.suggested_skill] = counts.get(it.suggested_skill, 0) + 1
    vocab = [sid for sid, c in counts.items() if c >= min_count]
    if not vocab:
        raise TrainingError("empty training set: no skill has enough accepted feedback")
    vocab.sort(key=lambda sid: (-counts[sid], sid))
    return vocab


class SLModel:
    """Encoder + MLP + output heads over a fixed skill vocabulary."""

    def __init__(self, featurizer: FeaturizerConfig, skill_vocab: list[str],
                 cat_vocab: list[str], subcat_vocab: list[str], params: ParamSet,
                 weights: MultiTaskWeights, loss_type: str = "multiclass",
                 dropout: float = 0.2):
        if len(set(skill_vocab)) != len(skill_vocab):
            raise ValueError("skill vocabulary has duplicates")
        if loss_type not in ("multiclass", "ova"):
            raise ValueError(f"unknown loss type {loss_type!r}")
        self.featurizer = featurizer
        self.skill_vocab = list(skill_vocab)
        self.cat_vocab = list(cat_vocab)
        self.subcat_vocab = list(subcat_vocab)
        self.params = params
        self.weights = weights
        self.loss_type = loss_type
        self.dropout = float(dropout)
        self.mlp = MLP.attach("mlp", (ENCODER_DIM, *HIDDEN_DIMS), self.dropout)
        self._id_rank = np.argsort(np.argsort(np.array(self.skill_vocab)))

    @classmethod
    def init(cls, featurizer: FeaturizerConfig, skill_vocab: list[str], cat_vocab: list[str],
             subcat_vocab: list[str], weights: MultiTaskWeights, seed: int,
             loss_type: str = "multiclass", dropout: float = 0.2,
             dtype=np.float32) -> "SLModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
        params = ParamSet(dtype=dtype)
        params.normal("embed", (featurizer.num_buckets, ENCODER_DIM), rng, std=0.05)
        MLP("mlp", (ENCODER_DIM, *HIDDEN_DIMS), params, rng, hidden_dropout=dropout)
        params.glorot("out_skill", (len(skill_vocab), HIDDEN_DIMS[-1]), rng)
        params.glorot("out_category", (len(cat_vocab), HIDDEN_DIMS[-1]), rng)
        params.glorot("out_subcategory", (len(subcat_vocab), HIDDEN_DIMS[-1]), rng)
        return cls(featurizer, skill_vocab, cat_vocab, subcat_vocab, params, weights,
                   loss_type, dropout)

    def encode_batch(self, batch: FeatureBatch, train: bool = False,
                     rng: np.random.Generator | None = None):
        u = embed_bag_forward(batch, self.params["embed"])
        h, mlp_cache = self.mlp.forward(u, self.params, train=train, rng=rng)
        return h, (batch, mlp_cache)

    def head_scores(self, h: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "skill": h @ self.params["out_skill"].T,
            "category": h @ self.params["out_category"].T,
            "subcategory": h @ self.params["out_subcategory"].T,
        }

    def backward(self, d_heads: dict[str, np.ndarray], h: np.ndarray, cache,
                 grads: GradBag) -> None:
        batch, mlp_cache = cache
        dh = np.zeros_like(h)
        for head, d_out in d_heads.items():
            name = f"out_{head}"
            grads.add(name, d_out.T @ h)
            dh += d_out @ self.params[name]
        du = self.mlp.backward(dh, mlp_cache, self.params, grads)
        embed_bag_backward(du, batch, grads, "embed")


def sl_forward(model: SLModel, text: str) -> np.ndarray:
    """Raw (pre-softmax) scores over the skill vocabulary."""
    batch = FeatureBatch([featurize(text, model.featurizer)])
    h, _ = model.encode_batch(batch)
    return (h @ model.params["out_skill"].T)[0]


def sl_retrieve(model: SLModel, text: str, k1: int) -> CandidateList:
    """Top-k1 vocabulary skills by score; reported scores are softmax probabilities."""
    if k1 < 1:
        raise ValueError("k1 must be >= 1")
    scores = sl_forward(model, text).astype(np.float64)
    probs = softmax(scores)
    order = np.lexsort((model._id_rank, -scores))[:k1]
    entries = tuple(
        Candidate(skill_id=model.skill_vocab[i], score=float(probs[i]), source="model")
        for i in order
    )
    return CandidateList(entries=entries, k=k1)


def _batch_loss_and_grads(model: SLModel, batch: FeatureBatch, labels: dict[str, np.ndarray],
                          train: bool, rng: np.random.Generator | None,
                          grads: GradBag | None):
    """Mean per-example loss over the batch; optionally accumulate gradients."""
    h, cache = model.encode_batch(batch, train=train, rng=rng)
    heads = model.head_scores(h)
    B = batch.n
    w = {"skill": model.weights.w1, "category": model.weights.w2,
         "subcategory": model.weights.w3}
    if model.loss_type == "ova":
        w = {"skill": model.weights.w1}
    total = 0.0
    d_heads = {}
    for head, weight in w.items():
        scores = heads[head]
        idx = labels[head]
        if model.loss_type == "ova" and head == "skill":
            y = np.zeros_like(scores)
            y[np.arange(B), idx] = 1.0
            per_ex = np.sum(softplus(scores) - y * scores, axis=1)
            total += weight * float(per_ex.mean())
            if grads is not None:
                d_heads[head] = (sigmoid(scores) - y) * (weight / B)
        else:
            ls = log_softmax(scores)
            total += weight * float(-ls[np.arange(B), idx].mean())
            if grads is not None:
                d = softmax(scores)
                d[np.arange(B), idx] -= 1.0
                d_heads[head] = d * (weight / B)
    if grads is not None:
        d_heads = {k: v.astype(h.dtype) for k, v in d_heads.items()}
        model.backward(d_heads, h, cache, grads)
    return total


def _usable(interactions, vocab_set) -> list[LoggedInteraction]:
    return [it for it in interactions if it.accepted == 1 and it.suggested_skill in vocab_set]


def train_sl(train: list[LoggedInteraction], val: list[LoggedInteraction], catalog: Catalog,
             cfg: TrainConfig, weights: MultiTaskWeights | None = None, min_count: int = 2,
             featurizer: FeaturizerConfig | None = None,
             loss_type: str = "multiclass") -> SLModel:
    """Fit on accepted suggestions; early stop on validation loss; deterministic."""
    weights = weights or MultiTaskWeights()
    featurizer = featurizer or FeaturizerConfig()
    vocab = build_sl_vocab(train, min_count=min_count)
    vocab_set = set(vocab)
    cat_vocab = catalog.categories()
    subcat_vocab = catalog.subcategories()
    model = SLModel.init(featurizer, vocab, cat_vocab, subcat_vocab, weights, cfg.seed,
                         loss_type=loss_type, dropout=cfg.dropout)

    train_ex = _usable(train, vocab_set)
    if not train_ex:
        raise TrainingError("empty training set")
    val_ex = _usable(val, vocab_set)

    skill_idx = {sid: i for i, sid in enumerate(vocab)}
    cat_idx = {c: i for i, c in enumerate(cat_vocab)}
    subcat_idx = {s: i for i, s in enumerate(subcat_vocab)}

    def prepare(examples):
        feats = [featurize(it.utterance.text, featurizer) for it in examples]
        lab = {
            "skill": np.array([skill_idx[it.suggested_skill] for it in examples]),
            "category": np.array([cat_idx[catalog.get(it.suggested_skill).category]
                                  for it in examples]),
            "subcategory": np.array([subcat_idx[catalog.get(it.suggested_skill).subcategory]
                                     for it in examples]),
        }
        return feats, lab

    train_feats, train_labels = prepare(train_ex)
    val_feats, val_labels = prepare(val_ex) if val_ex else (train_feats, train_labels)
    val_batch = FeatureBatch(val_feats)

    opt = Adam(model.params, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 12)))
    n = len(train_feats)
    best_loss = np.inf
    best_params = model.params.copy()
    bad_epochs = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = perm[lo : lo + cfg.batch_size]
            batch = FeatureBatch([train_feats[i] for i in rows])
            labels = {k: v[rows] for k, v in train_labels.items()}
            grads = GradBag()
            _batch_loss_and_grads(model, batch, labels, True, rng, grads)
            opt.step(grads)
        val_loss = _batch_loss_and_grads(model, val_batch, val_labels, False, None, None)
        if val_loss < best_loss - 1e-6:
            best_loss = val_loss
            best_params = model.params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    model.params = best_params
    return model


def save_sl(path: str | Path, model: SLModel) -> None:
    sidecar = {
        "kind": "sl",
        "featurizer": model.featurizer.to_json(),
        "skill_vocab": model.skill_vocab,
        "cat_vocab": model.cat_vocab,
        "subcat_vocab": model.subcat_vocab,
        "weights": model.weights.to_json(),
        "loss_type": model.loss_type,
        "dropout": model.dropout,
    }
    save_params(path, model.params, sidecar)


def load_sl(path: str | Path) -> SLModel:
    params, sidecar = load_params(path)
    if sidecar.get("kind") != "sl":
        raise ValueError(f"{path}: not a shortlister model file")
    return SLModel(
        FeaturizerConfig.from_json(sidecar["featurizer"]),
        sidecar["skill_vocab"],
        sidecar["cat_vocab"],
        sidecar["subcat_vocab"],
        params,
        MultiTaskWeights.from_json(sidecar["weights"]),
        sidecar["loss_type"],
        sidecar["dropout"],
    )
