"""Combined candidate list plus pointwise/listwise rerankers over it.

The reranker fuses per-candidate features (shared-encoder skill name, skill id,
score bin, category, popularity, source flag) with the utterance vector and
scores each candidate in (0,1); the listwise variant adds a bidirectional
recurrent layer across the list so a score can depend on the whole slate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import Candidate, CandidateList, Catalog, LoggedInteraction
from .keyword_sl import InvertedIndex, retrieve
from .model_sl import SLModel, TrainingError, sl_retrieve
from .neuralkit import (
    MLP,
    Adam,
    BiGRU,
    FeatureBatch,
    FeaturizerConfig,
    GradBag,
    ParamSet,
    SparseFeatures,
    TrainConfig,
    dense_backward,
    dense_forward,
    embed_bag_backward,
    embed_bag_forward,
    featurize,
    load_params,
    relu,
    relu_backward,
    save_params,
    sigmoid,
    softplus,
)

TEXT_DIM = 64
FEATURE_DIM = 16
FUSED_DIM = 64
K_MAX = 80
FEATURE_NAMES = ("skill_name", "skill_id", "score_bin", "category", "popularity", "flag")
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class CombinedCandidates:
    """Model-list candidates followed by the rule-list remainder, deduplicated."""

    entries: tuple[Candidate, ...]
    k1: int
    k2: int

    def __post_init__(self):
        ids = [c.skill_id for c in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("combined candidates contain duplicate skills")
        sources = [c.source for c in self.entries]
        first_rule = sources.index("rule") if "rule" in sources else len(sources)
        if any(s == "model" for s in sources[first_rule:]):
            raise ValueError("model candidates must precede rule candidates")

    def __len__(self) -> int:
        return len(self.entries)

    def skill_ids(self) -> list[str]:
        return [c.skill_id for c in self.entries]


def combine(model_list: CandidateList | None, rule_list: CandidateList) -> CombinedCandidates:
    """model list ++ (rule list minus skills already in the model list)."""
    model_entries = tuple(model_list.entries) if model_list is not None else ()
    seen = {c.skill_id for c in model_entries}
    rule_entries = tuple(c for c in rule_list.entries if c.skill_id not in seen)
    k1 = model_list.k if model_list is not None else 0
    return CombinedCandidates(entries=model_entries + rule_entries, k1=k1, k2=rule_list.k)


def fit_bin_edges(examples: list["RerankExample"]) -> dict[str, tuple[float, float]]:
    """Tertile edges of the raw shortlister scores, fit separately per source."""
    by_source: dict[str, list[float]] = {"model": [], "rule": []}
    for ex in examples:
        for c in ex.candidates.entries:
            by_source[c.source].append(c.score)
    edges = {}
    for source, scores in by_source.items():
        if scores:
            v = np.sort(np.asarray(scores, dtype=np.float64))
            n = v.shape[0]
            edges[source] = (float(v[n // 3]), float(v[2 * n // 3]))
        else:
            edges[source] = (0.0, 0.0)
    return edges


def bin_score(score: float, source: str, edges: dict[str, tuple[float, float]]) -> int:
    """Left-closed tertile bin: 0 below e1, 1 in [e1, e2), 2 at or above e2."""
    e1, e2 = edges[source]
    if score < e1:
        return 0
    if score < e2:
        return 1
    return 2


@dataclass
class RerankExample:
    """One utterance with its combined candidates and per-candidate labels."""

    utterance_id: str
    text: str
    candidates: CombinedCandidates
    labels: np.ndarray  # float in [0,1]; fractional values allowed (imputed)
    observed: np.ndarray  # bool; feedback-sourced positions, never rewritten

    def __post_init__(self):
        n = len(self.candidates)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.labels.shape != (n,) or self.observed.shape != (n,):
            raise ValueError(f"example {self.utterance_id!r}: label/observed shape mismatch")
        if np.any((self.labels < 0) | (self.labels > 1)):
            raise ValueError(f"example {self.utterance_id!r}: labels must lie in [0,1]")

    def to_json(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "text": self.text,
            "k1": self.candidates.k1,
            "k2": self.candidates.k2,
            "candidates": [
                {"skill_id": c.skill_id, "source": c.source, "score": c.score}
                for c in self.candidates.entries
            ],
            "labels": [float(x) for x in self.labels],
            "observed": [int(x) for x in self.observed],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RerankExample":
        cands = CombinedCandidates(
            entries=tuple(
                Candidate(skill_id=c["skill_id"], source=c["source"], score=c["score"])
                for c in obj["candidates"]
            ),
            k1=obj["k1"],
            k2=obj["k2"],
        )
        return cls(obj["utterance_id"], obj["text"], cands,
                   np.asarray(obj["labels"], dtype=np.float64),
                   np.asarray(obj["observed"], dtype=bool))


def save_examples(path: str | Path, examples: list[RerankExample]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), separators=(",", ":"), ensure_ascii=False) + "\n")


def load_examples(path: str | Path) -> list[RerankExample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(RerankExample.from_json(json.loads(line)))
    return out


def make_examples(interactions: list[LoggedInteraction], sl_model: SLModel | None,
                  index: InvertedIndex, k1: int, k2: int,
                  include_unsuggested: bool = False):
    """Build reranker examples: combined candidates with the observed label placed.

    Returns (examples, report). Interactions whose suggested skill fell outside
    the combined list are kept with the observed label dropped; the report
    counts them. Without a shortlister model the list is rule-only.
    """
    examples = []
    n_dropped = 0
    n_feedback = 0
    for it in interactions:
        if not it.has_feedback and not include_unsuggested:
            continue
        model_list = sl_retrieve(sl_model, it.utterance.text, k1) if sl_model else None
        rule_list = retrieve(index, it.utterance.text, k2)
        combined = combine(model_list, rule_list)
        if len(combined) == 0:
            continue
        if len(combined) > K_MAX:
            combined = CombinedCandidates(entries=combined.entries[:K_MAX],
                                          k1=combined.k1, k2=combined.k2)
        labels = np.zeros(len(combined))
        observed = np.zeros(len(combined), dtype=bool)
        if it.has_feedback:
            n_feedback += 1
            ids = combined.skill_ids()
            if it.suggested_skill in ids:
                pos = ids.index(it.suggested_skill)
                labels[pos] = float(it.accepted)
                observed[pos] = True
            else:
                n_dropped += 1
        examples.append(RerankExample(it.utterance.utterance_id, it.utterance.text,
                                      combined, labels, observed))
    report = {
        "n_examples": len(examples),
        "n_with_feedback": n_feedback,
        "n_observed_dropped": n_dropped,
        "dropped_fraction": n_dropped / n_feedback if n_feedback else 0.0,
    }
    return examples, report


def rr_loss(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Masked binary cross-entropy over candidates; labels may be fractional."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not (scores.shape == labels.shape == mask.shape):
        raise ValueError("scores, labels, and mask must have equal shapes")
    if np.any((scores < 0.0) | (scores > 1.0)):
        raise ValueError("scores must lie in [0, 1]")
    if np.any((labels < 0.0) | (labels > 1.0)):
        raise ValueError("labels must lie in [0, 1]")
    p = np.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(np.sum(per * mask))


def prep_features(examples: list[RerankExample],
                  featurizer: FeaturizerConfig) -> list[SparseFeatures]:
    """Hash each utterance text once; reuse across epochs and sweeps."""
    return [featurize(ex.text, featurizer) for ex in examples]


class RRModel:
    """Reranker parameters plus the feature plumbing shared by both variants."""

    def __init__(self, featurizer: FeaturizerConfig, catalog: Catalog, mode: str,
                 bin_edges: dict[str, tuple[float, float]], params: ParamSet,
                 ablate: tuple[str, ...] = (), dropout: float = 0.2):
        if mode not in ("pointwise", "listwise"):
            raise ValueError(f"unknown reranker mode {mode!r}")
        for name in ablate:
            if name not in FEATURE_NAMES:
                raise ValueError(f"unknown candidate feature {name!r}")
        self.featurizer = featurizer
        self.mode = mode
        self.bin_edges = {k: (float(v[0]), float(v[1])) for k, v in bin_edges.items()}
        self.params = params
        self.ablate = tuple(sorted(set(ablate)))
        self.dropout = float(dropout)
        self.id_vocab = sorted(s.skill_id for s in catalog)
        self.cat_vocab = catalog.categories()
        self._id_row = {sid: i + 1 for i, sid in enumerate(self.id_vocab)}  # row 0 = UNK
        cat_row = {c: i for i, c in enumerate(self.cat_vocab)}
        self._cat_of = np.zeros(len(self.id_vocab) + 1, dtype=np.int64)
        self._pop_of = np.zeros(len(self.id_vocab) + 1, dtype=np.int64)
        names = []
        for sid in self.id_vocab:
            s = catalog.get(sid)
            self._cat_of[self._id_row[sid]] = cat_row[s.category]
            self._pop_of[self._id_row[sid]] = s.popularity
            names.append(s.name)
        self._name_batch = FeatureBatch([featurize(n, featurizer) for n in names])
        self.score_mlp = MLP.attach("score", (2 * TEXT_DIM, 64, 1), dropout)
        self.ctx = BiGRU.attach("ctx", 2 * TEXT_DIM, TEXT_DIM) if mode == "listwise" else None

    @classmethod
    def init(cls, featurizer: FeaturizerConfig, catalog: Catalog, mode: str,
             bin_edges: dict[str, tuple[float, float]], seed: int,
             ablate: tuple[str, ...] = (), dropout: float = 0.2,
             dtype=np.float32) -> "RRModel":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 21)))
        params = ParamSet(dtype=dtype)
        params.normal("text_embed", (featurizer.num_buckets, TEXT_DIM), rng, std=0.05)
        params.normal("emb_skill", (len(catalog) + 1, FEATURE_DIM), rng, std=0.05)
        params.normal("emb_bin", (3, FEATURE_DIM), rng, std=0.05)
        params.normal("emb_cat", (len(catalog.categories()), FEATURE_DIM), rng, std=0.05)
        params.normal("emb_pop", (2, FEATURE_DIM), rng, std=0.05)
        params.normal("emb_flag", (2, FEATURE_DIM), rng, std=0.05)
        params.glorot("fusion.W0", (TEXT_DIM + 5 * FEATURE_DIM, FUSED_DIM), rng)
        params.zeros("fusion.b0", (FUSED_DIM,))
        MLP("score", (2 * TEXT_DIM, 64, 1), params, rng, hidden_dropout=dropout)
        if mode == "listwise":
            BiGRU("ctx", 2 * TEXT_DIM, TEXT_DIM, params, rng)
        return cls(featurizer, catalog, mode, bin_edges, params, ablate, dropout)

    def featurize_batch(self, examples: list[RerankExample],
                        utt_feats: list[SparseFeatures] | None = None):
        """Pack examples into index arrays padded to the longest list in the batch."""
        B = len(examples)
        K = max(len(ex.candidates) for ex in examples)
        id_rows = np.zeros((B, K), dtype=np.int64)
        bins = np.zeros((B, K), dtype=np.int64)
        flags = np.zeros((B, K), dtype=np.int64)
        mask = np.zeros((B, K), dtype=np.float64)
        labels = np.zeros((B, K), dtype=np.float64)
        if utt_feats is None:
            utt_feats = prep_features(examples, self.featurizer)
        for b, ex in enumerate(examples):
            n = len(ex.candidates)
            for j, c in enumerate(ex.candidates.entries):
                id_rows[b, j] = self._id_row.get(c.skill_id, 0)
                bins[b, j] = bin_score(c.score, c.source, self.bin_edges)
                flags[b, j] = 0 if c.source == "model" else 1
            mask[b, :n] = 1.0
            labels[b, :n] = ex.labels
        cats = self._cat_of[id_rows]
        pops = self._pop_of[id_rows]
        return FeatureBatch(utt_feats), id_rows, bins, cats, pops, flags, mask, labels

    def forward(self, batch, train: bool = False, rng: np.random.Generator | None = None):
        """Per-candidate probabilities, shape (B, K); padded slots score 0."""
        utt_batch, id_rows, bins, cats, pops, flags, mask, _ = batch
        P = self.params
        B, K = id_rows.shape
        dtype = P["text_embed"].dtype
        u = embed_bag_forward(utt_batch, P["text_embed"])
        names_all = embed_bag_forward(self._name_batch, P["text_embed"])
        names_all = np.concatenate([np.zeros((1, TEXT_DIM), dtype=dtype), names_all])
        parts = {
            "skill_name": names_all[id_rows],
            "skill_id": P["emb_skill"][id_rows],
            "score_bin": P["emb_bin"][bins],
            "category": P["emb_cat"][cats],
            "popularity": P["emb_pop"][pops],
            "flag": P["emb_flag"][flags],
        }
        for name in self.ablate:
            parts[name] = np.zeros_like(parts[name])
        feats = np.concatenate([parts[n] for n in FEATURE_NAMES], axis=2)
        pre = dense_forward(feats, P["fusion.W0"], P["fusion.b0"])
        fused = relu(pre)
        u_tiled = np.broadcast_to(u[:, None, :], (B, K, TEXT_DIM)).astype(dtype, copy=False)
        x = np.concatenate([u_tiled, fused], axis=2)
        if self.mode == "listwise":
            ctx_out, ctx_cache = self.ctx.forward(x, mask.astype(dtype), P)
        else:
            ctx_out, ctx_cache = x, None
        z3, mlp_cache = self.score_mlp.forward(ctx_out, P, train=train, rng=rng)
        z = z3[:, :, 0]
        probs = sigmoid(z) * mask
        cache = (utt_batch, id_rows, bins, cats, pops, flags, mask, feats, fused,
                 ctx_cache, mlp_cache, z)
        return probs, cache

    def backward(self, dz: np.ndarray, cache, grads: GradBag) -> None:
        """Backprop from d(loss)/d(logit), shape (B, K); padded slots must be 0."""
        P = self.params
        (utt_batch, id_rows, bins, cats, pops, flags, mask, feats, fused,
         ctx_cache, mlp_cache, _) = cache
        dtype = P["text_embed"].dtype
        d_ctx = self.score_mlp.backward(dz[:, :, None].astype(dtype), mlp_cache, P, grads)
        if self.mode == "listwise":
            dx = self.ctx.backward(d_ctx, ctx_cache, P, grads)
        else:
            dx = d_ctx
        du = dx[:, :, :TEXT_DIM].sum(axis=1)
        embed_bag_backward(du, utt_batch, grads, "text_embed")
        d_pre = relu_backward(dx[:, :, TEXT_DIM:], fused)
        d_feats = dense_backward(d_pre, feats, P["fusion.W0"], grads, "fusion.W0", "fusion.b0")
        flat_ids = id_rows.reshape(-1)
        if "skill_name" not in self.ablate:
            d_name = d_feats[:, :, :TEXT_DIM].reshape(-1, TEXT_DIM)
            d_names_all = np.zeros((len(self.id_vocab) + 1, TEXT_DIM), dtype=dtype)
            np.add.at(d_names_all, flat_ids, d_name)
            embed_bag_backward(d_names_all[1:], self._name_batch, grads, "text_embed")
        gathers = (
            ("skill_id", "emb_skill", flat_ids),
            ("score_bin", "emb_bin", bins.reshape(-1)),
            ("category", "emb_cat", cats.reshape(-1)),
            ("popularity", "emb_pop", pops.reshape(-1)),
            ("flag", "emb_flag", flags.reshape(-1)),
        )
        for i, (feat, table, rows) in enumerate(gathers, start=1):
            if feat in self.ablate:
                continue
            lo = TEXT_DIM + (i - 1) * FEATURE_DIM
            grads.add_rows(table, rows, d_feats[:, :, lo:lo + FEATURE_DIM].reshape(-1, FEATURE_DIM))


def _batch_loss_and_grads(model: RRModel, batch, rng: np.random.Generator | None,
                          train: bool):
    *_, mask, labels = batch
    probs, cache = model.forward(batch, train=train, rng=rng)
    z = cache[-1].astype(np.float64)
    B = labels.shape[0]
    loss = float(np.sum((softplus(z) - labels * z) * mask)) / B
    dz = (sigmoid(z) - labels) * mask / B
    grads = GradBag()
    model.backward(dz, cache, grads)
    return loss, grads


def _mean_loss(model: RRModel, examples: list[RerankExample],
               feats: list[SparseFeatures], batch_size: int) -> float:
    total = 0.0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        batch = model.featurize_batch(chunk, feats[lo:lo + batch_size])
        *_, mask, labels = batch
        _, cache = model.forward(batch, train=False)
        z = cache[-1].astype(np.float64)
        total += float(np.sum((softplus(z) - labels * z) * mask))
    return total / len(examples)


def train_rr(train_examples: list[RerankExample], val_examples: list[RerankExample],
             catalog: Catalog, cfg: TrainConfig, mode: str = "listwise",
             ablate: tuple[str, ...] = (), featurizer: FeaturizerConfig | None = None,
             bin_edges: dict[str, tuple[float, float]] | None = None,
             init_model: RRModel | None = None,
             train_feats: list[SparseFeatures] | None = None,
             val_feats: list[SparseFeatures] | None = None):
    """Train a reranker with Adam and early stopping on validation loss.

    Returns (model, history). Bin edges default to tertiles fit on the training
    candidates; pass init_model to warm-start from existing parameters.
    """
    if not train_examples:
        raise TrainingError("empty training set: no reranker examples")
    if featurizer is None:
        featurizer = init_model.featurizer if init_model else FeaturizerConfig()
    if bin_edges is None:
        bin_edges = init_model.bin_edges if init_model else fit_bin_edges(train_examples)
    if init_model is not None:
        model = RRModel(featurizer, catalog, mode, bin_edges, init_model.params.copy(),
                        ablate, cfg.dropout)
    else:
        model = RRModel.init(featurizer, catalog, mode, bin_edges, cfg.seed,
                             ablate, cfg.dropout)
    if not val_examples:
        val_examples = train_examples
        val_feats = train_feats
    if train_feats is None:
        train_feats = prep_features(train_examples, featurizer)
    if val_feats is None:
        val_feats = prep_features(val_examples, featurizer)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 22)))
    opt = Adam(model.params, cfg.learning_rate)
    history = {"train_loss": [], "val_loss": []}
    best_loss = np.inf
    best_params = model.params.copy()
    bad_epochs = 0
    n = len(train_examples)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            chunk = [train_examples[i] for i in idx]
            feats = [train_feats[i] for i in idx]
            batch = model.featurize_batch(chunk, feats)
            loss, grads = _batch_loss_and_grads(model, batch, rng, train=True)
            epoch_loss += loss * len(idx)
            opt.step(grads)
        val_loss = _mean_loss(model, val_examples, val_feats, cfg.batch_size)
        history["train_loss"].append(epoch_loss / n)
        history["val_loss"].append(val_loss)
        if val_loss < best_loss - 1e-6:
            best_loss = val_loss
            best_params = model.params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    model.params = best_params
    history["best_val_loss"] = float(best_loss)
    return model, history


def rr_scores(model: RRModel, examples: list[RerankExample],
              feats: list[SparseFeatures] | None = None,
              batch_size: int = 256) -> list[np.ndarray]:
    """Evaluation-mode per-candidate probabilities, one trimmed array per example."""
    if feats is None:
        feats = prep_features(examples, model.featurizer)
    out = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        batch = model.featurize_batch(chunk, feats[lo:lo + batch_size])
        probs, _ = model.forward(batch, train=False)
        for b, ex in enumerate(chunk):
            out.append(np.asarray(probs[b, : len(ex.candidates)], dtype=np.float64))
    return out


def suggest_from_scores(example: RerankExample, scores: np.ndarray,
                        cutoff: float) -> tuple[str | None, float]:
    """Top candidate if it clears the cutoff strictly; ties keep the earlier slot."""
    pos = int(np.argmax(scores))
    top = float(scores[pos])
    if top > cutoff:
        return example.candidates.entries[pos].skill_id, top
    return None, top


def suggest(model: RRModel, example: RerankExample, cutoff: float = 0.5):
    scores = rr_scores(model, [example])[0]
    return suggest_from_scores(example, scores, cutoff)


def cutoff_for_rate(top_scores: np.ndarray, rate: float) -> float:
    """Largest observed score c with fraction(scores > c) >= rate; -inf if none."""
    v = np.sort(np.asarray(top_scores, dtype=np.float64))
    n = v.shape[0]
    if n == 0:
        raise ValueError("cutoff_for_rate needs at least one score")
    distinct = np.unique(v)[::-1]
    above = n - np.searchsorted(v, distinct, side="right")
    ok = np.nonzero(above / n >= rate)[0]
    if ok.size == 0:
        return float("-inf")
    return float(distinct[ok[0]])


def save_rr(path: str | Path, model: RRModel) -> None:
    sidecar = {
        "kind": "rr",
        "featurizer": model.featurizer.to_json(),
        "mode": model.mode,
        "bin_edges": {k: list(v) for k, v in model.bin_edges.items()},
        "ablate": list(model.ablate),
        "dropout": model.dropout,
        "skill_ids": model.id_vocab,
    }
    save_params(path, model.params, sidecar)


def load_rr(path: str | Path, catalog: Catalog) -> RRModel:
    params, sidecar = load_params(path)
    if sidecar.get("kind") != "rr":
        raise ValueError(f"{path}: not a reranker model file")
    if sidecar["skill_ids"] != sorted(s.skill_id for s in catalog):
        raise ValueError(f"{path}: catalog does not match the one used in training")
    return RRModel(
        FeaturizerConfig.from_json(sidecar["featurizer"]),
        catalog,
        sidecar["mode"],
        {k: tuple(v) for k, v in sidecar["bin_edges"].items()},
        params,
        tuple(sidecar["ablate"]),
        sidecar["dropout"],
    )
