"""End-to-end experiment runner: simulate, train both stages, relabel, evaluate."""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .catalog import Catalog, LoggedInteraction, RelevanceOracle, load_catalog, \
    load_interactions, load_oracle, split_by_time
from .evalkit import EvalCase, PRECISION_RATES, curves_to_csv, decision_metrics, \
    ndcg_at_k, overlap_at_1, precision_at_k, precision_at_rates, spearman, sweep_curves
from .keyword_sl import InvertedIndex, build_index, retrieve, save_index
from .model_sl import MultiTaskWeights, SLModel, save_sl, sl_retrieve, train_sl
from .neuralkit import FeaturizerConfig, SparseFeatures, TrainConfig, featurize
from .relabel import CollabConfig, SelfTrainConfig, collaborative_relabel, \
    self_train_relabel
from .reranker import RerankExample, RRModel, fit_bin_edges, make_examples, \
    rr_scores, save_rr, train_rr
from .simulate import WorldConfig, simulate_log

SYSTEMS = (
    "pointwise+rule",
    "listwise+rule",
    "collab+rule",
    "selftrain+rule",
    "listwise+model",
    "collab+model",
    "selftrain+model",
)
ABLATION_FEATURES = ("skill_name", "skill_id", "score_bin", "category", "popularity", "flag")
STAGES = ("simulate", "index", "train-sl", "train-rr", "relabel", "evaluate", "compare")


class PipelineError(RuntimeError):
    """A stage failed; the message names the stage and partial outputs remain."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """One seeded run; the top-level seed overrides every nested seed."""

    out_dir: str = "run"
    seed: int = 0
    n_utterances: int = 20_000
    world: WorldConfig = field(default_factory=WorldConfig)
    featurizer: FeaturizerConfig = field(default_factory=lambda: FeaturizerConfig(num_buckets=1 << 16))
    k1: int = 40
    k2: int = 40
    k1_alt: int = 10
    cutoff: float = 0.5
    sl_min_count: int = 2
    sl_loss: str = "multiclass"
    sl_weights: MultiTaskWeights = field(default_factory=MultiTaskWeights)
    sl_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, batch_size=256))
    rr_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, batch_size=256))
    collab: CollabConfig = field(default_factory=CollabConfig)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    eval_subset: int = 1000
    run_sensitivity: bool = True
    run_ablations: bool = True
    save_models: bool = False

    def resolved(self) -> "ExperimentConfig":
        """Propagate the master seed into every nested component config."""
        s = self.seed
        return replace(
            self,
            world=replace(self.world, seed=s),
            sl_train=replace(self.sl_train, seed=s),
            rr_train=replace(self.rr_train, seed=s),
            collab=replace(self.collab, seed=s),
            selftrain=replace(self.selftrain, seed=s),
        )

    def to_json(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "n_utterances": self.n_utterances,
            "world": self.world.to_json(),
            "featurizer": self.featurizer.to_json(),
            "k1": self.k1,
            "k2": self.k2,
            "k1_alt": self.k1_alt,
            "cutoff": self.cutoff,
            "sl_min_count": self.sl_min_count,
            "sl_loss": self.sl_loss,
            "sl_weights": self.sl_weights.to_json(),
            "sl_train": self.sl_train.to_json(),
            "rr_train": self.rr_train.to_json(),
            "collab": self.collab.to_json(),
            "selftrain": self.selftrain.to_json(),
            "eval_subset": self.eval_subset,
            "run_sensitivity": self.run_sensitivity,
            "run_ablations": self.run_ablations,
            "save_models": self.save_models,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        nested = {
            "world": WorldConfig,
            "featurizer": FeaturizerConfig,
            "sl_weights": MultiTaskWeights,
            "sl_train": TrainConfig,
            "rr_train": TrainConfig,
            "collab": CollabConfig,
            "selftrain": SelfTrainConfig,
        }
        kwargs = {}
        for key, value in obj.items():
            if key in nested:
                kwargs[key] = nested[key].from_json(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _system_dir(out_dir: Path, name: str) -> Path:
    return out_dir / "systems" / name.replace("+", "_")


def _build_cases(model: RRModel, examples: list[RerankExample],
                 feats: list[SparseFeatures], test: list[LoggedInteraction],
                 oracle: RelevanceOracle, cutoff: float):
    """Score the test stream; utterances without candidates become abstentions."""
    scores = rr_scores(model, examples, feats)
    top_by_uid: dict[str, tuple[str, float]] = {}
    for ex, sc in zip(examples, scores):
        pos = int(np.argmax(sc))
        top_by_uid[ex.utterance_id] = (ex.candidates.entries[pos].skill_id, float(sc[pos]))
    cases = []
    pairs = []
    for it in test:
        uid = it.utterance.utterance_id
        top_skill, top_score = top_by_uid.get(uid, (None, float("-inf")))
        relevant = oracle.relevant(uid) if uid in oracle else frozenset()
        cases.append(EvalCase(uid, top_skill, top_score, it.suggested_skill,
                              it.accepted, relevant))
        pairs.append((top_skill if top_score > cutoff else None, it.suggested_skill))
    return cases, pairs


def _system_metrics(cases: list[EvalCase], cutoff: float) -> dict:
    out = {}
    for mode in ("logged", "oracle"):
        out[mode] = {
            "decision": decision_metrics(cases, cutoff, mode),
            "precision_at_rate": {f"{r:.2f}": p
                                  for r, p in precision_at_rates(cases, mode).items()},
        }
    return out


def _observed_changed(before: list[RerankExample], after: list[RerankExample]) -> int:
    """Count examples whose observed slots were touched by relabeling."""
    n = 0
    for b, a in zip(before, after):
        if not np.array_equal(b.observed, a.observed):
            n += 1
            continue
        m = b.observed
        if m.any() and not np.array_equal(b.labels[m], a.labels[m]):
            n += 1
    return n


def _evaluate_sl(sl_model: SLModel, index: InvertedIndex,
                 test: list[LoggedInteraction], oracle: RelevanceOracle,
                 cfg: ExperimentConfig) -> dict:
    """Shortlister-level quality on a fixed evaluation subset of the test split."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 40)))
    take = min(cfg.eval_subset, len(test))
    rows = np.sort(rng.choice(len(test), size=take, replace=False))
    agg = {"keyword": {"p_at_5": 0.0, "ndcg_at_5": 0.0},
           "model": {"p_at_5": 0.0, "ndcg_at_5": 0.0}}
    for i in rows:
        it = test[int(i)]
        uid = it.utterance.utterance_id
        relevant = oracle.relevant(uid) if uid in oracle else frozenset()
        kw_ids = [c.skill_id for c in retrieve(index, it.utterance.text, 5).entries]
        md_ids = [c.skill_id for c in sl_retrieve(sl_model, it.utterance.text, 5).entries]
        agg["keyword"]["p_at_5"] += precision_at_k(kw_ids, relevant, 5)
        agg["keyword"]["ndcg_at_5"] += ndcg_at_k(kw_ids, relevant, 5)
        agg["model"]["p_at_5"] += precision_at_k(md_ids, relevant, 5)
        agg["model"]["ndcg_at_5"] += ndcg_at_k(md_ids, relevant, 5)
    for side in agg.values():
        for key in side:
            side[key] /= max(take, 1)
    accepted = [it for it in test if it.accepted == 1]
    covered = sum(1 for it in accepted
                  if it.suggested_skill in {c.skill_id for c in
                                            retrieve(index, it.utterance.text, cfg.k2).entries})
    agg["keyword_logged_coverage_at_k2"] = covered / len(accepted) if accepted else None
    agg["n_subset"] = take
    agg["n_accepted_test"] = len(accepted)
    return agg


def _rank_swap(logged_f1: list[float], oracle_pre50: list[float]) -> bool:
    """True when some pair of systems orders differently under the two metrics."""
    n = len(logged_f1)
    f1 = [-np.inf if v is None else v for v in logged_f1]
    p50 = [-np.inf if v is None else v for v in oracle_pre50]
    for i in range(n):
        for j in range(i + 1, n):
            a = np.sign(f1[i] - f1[j])
            b = np.sign(p50[i] - p50[j])
            if a * b < 0:
                return True
    return False


def _criteria_block(report: dict) -> dict:
    """Scalar summaries the acceptance checks consume, one entry per claim."""
    systems = report["systems"]
    overlap = [systems[s]["overlap_at_1_with_logged"] for s in SYSTEMS]
    logged_pre50 = [systems[s]["logged"]["precision_at_rate"]["0.50"] for s in SYSTEMS]
    logged_f1 = [systems[s]["logged"]["decision"]["f1"] for s in SYSTEMS]
    oracle_pre50 = [systems[s]["oracle"]["precision_at_rate"]["0.50"] for s in SYSTEMS]

    def pre(system: str, mode: str, rate: str) -> float:
        return systems[system][mode]["precision_at_rate"][rate]

    crit: dict = {}
    crit["overlap_by_system"] = dict(zip(SYSTEMS, overlap))
    crit["logged_pre50_by_system"] = dict(zip(SYSTEMS, logged_pre50))
    defined = all(v is not None for v in overlap) and all(v is not None for v in logged_pre50)
    crit["spearman_overlap_vs_logged_pre50"] = (
        spearman(overlap, logged_pre50) if defined else None
    )
    crit["rank_swap_logged_f1_vs_oracle_pre50"] = _rank_swap(logged_f1, oracle_pre50)
    crit["relabel_pre40"] = {
        "listwise+model": pre("listwise+model", "oracle", "0.40"),
        "collab+model": pre("collab+model", "oracle", "0.40"),
        "selftrain+model": pre("selftrain+model", "oracle", "0.40"),
        "listwise+rule": pre("listwise+rule", "oracle", "0.40"),
        "collab+rule": pre("collab+rule", "oracle", "0.40"),
        "selftrain+rule": pre("selftrain+rule", "oracle", "0.40"),
    }
    base_recall = systems["listwise+model"]["logged"]["decision"]["recall"]
    st_recall = systems["selftrain+model"]["logged"]["decision"]["recall"]
    crit["selftrain_recall"] = {
        "baseline": base_recall,
        "selftrain": st_recall,
        "relative_gain": (st_recall - base_recall) / base_recall
                         if base_recall else None,
    }
    crit["listwise_vs_pointwise"] = {
        "pointwise_pre25": pre("pointwise+rule", "oracle", "0.25"),
        "listwise_pre25": pre("listwise+rule", "oracle", "0.25"),
        "pointwise_pre50": pre("pointwise+rule", "oracle", "0.50"),
        "listwise_pre50": pre("listwise+rule", "oracle", "0.50"),
    }
    crit["sl_quality"] = report["sl"]
    if "sensitivity" in report:
        crit["k1_sensitivity"] = report["sensitivity"]
    if "ablations" in report:
        crit["ablations"] = report["ablations"]
    return crit


def render_table(report: dict) -> str:
    """Fixed-width comparison table, one row per system and evaluation mode."""
    headers = ["system", "mode", "Pre@25%", "Pre@40%", "Pre@50%", "Pre@75%",
               "P", "R", "F1"]
    rows = [headers]
    for name in SYSTEMS:
        met = report["systems"][name]
        for mode in ("logged", "oracle"):
            dec = met[mode]["decision"]
            par = met[mode]["precision_at_rate"]
            cells = [name, mode]
            for rate in ("0.25", "0.40", "0.50", "0.75"):
                v = par[rate]
                cells.append("-" if v is None else f"{v:.4f}")
            for key in ("precision", "recall", "f1"):
                v = dec[key]
                cells.append("-" if v is None else f"{v:.4f}")
            rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    lines = []
    for i, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_pipeline(config: ExperimentConfig) -> dict:
    """Run every stage for one seed and return the comparison report."""
    cfg = config.resolved()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", _dumps(cfg.to_json()))
    data_dir = out / "data"

    with _stage("simulate"):
        print(f"[simulate] world seed={cfg.seed} n={cfg.n_utterances}", flush=True)
        stats = simulate_log(cfg.world, cfg.n_utterances, data_dir)
        _write(data_dir / "stats.json", _dumps(stats))
        catalog = load_catalog(data_dir / "skills.jsonl")
        interactions = load_interactions(data_dir / "interactions.jsonl")
        oracle = load_oracle(data_dir / "oracle.jsonl", catalog)

    with _stage("index"):
        index = build_index(catalog)
        save_index(data_dir / "index.json", index)

    with _stage("train-sl"):
        split = split_by_time(interactions)
        print(f"[train-sl] train={len(split.train)} val={len(split.validation)} "
              f"test={len(split.test)}", flush=True)
        sl_model = train_sl(split.train, split.validation, catalog, cfg.sl_train,
                            weights=cfg.sl_weights, min_count=cfg.sl_min_count,
                            featurizer=cfg.featurizer, loss_type=cfg.sl_loss)
        if cfg.save_models:
            save_sl(out / "models" / "sl.bin", sl_model)

    with _stage("train-rr"):
        feat_of = {it.utterance.utterance_id: featurize(it.utterance.text, cfg.featurizer)
                   for it in interactions}

        def feats_for(examples: list[RerankExample]) -> list[SparseFeatures]:
            return [feat_of[ex.utterance_id] for ex in examples]

        families = {}
        for fam, sl in (("rule", None), ("model", sl_model)):
            train_ex, rep = make_examples(split.train, sl, index, cfg.k1, cfg.k2)
            val_ex, _ = make_examples(split.validation, sl, index, cfg.k1, cfg.k2)
            test_ex, _ = make_examples(split.test, sl, index, cfg.k1, cfg.k2,
                                       include_unsuggested=True)
            families[fam] = {
                "train": train_ex, "val": val_ex, "test": test_ex,
                "edges": fit_bin_edges(train_ex), "report": rep,
                "train_feats": feats_for(train_ex), "val_feats": feats_for(val_ex),
                "test_feats": feats_for(test_ex),
            }

    systems_report: dict[str, dict] = {}
    models_dir = out / "models"

    def _evaluate(name: str, model: RRModel, fam: dict, extra: dict | None = None) -> dict:
        with _stage("evaluate"):
            cases, pairs = _build_cases(model, fam["test"], fam["test_feats"],
                                        split.test, oracle, cfg.cutoff)
            met = _system_metrics(cases, cfg.cutoff)
            met["overlap_at_1_with_logged"] = overlap_at_1(pairs)
            met["examples"] = fam["report"]
            if extra:
                met.update(extra)
            sdir = _system_dir(out, name)
            for mode in ("logged", "oracle"):
                _write(sdir / f"curves_{mode}.csv", curves_to_csv(sweep_curves(cases, mode)))
            _write(sdir / "metrics.json", _dumps(met))
        print(f"[evaluate] {name}: oracle Pre@50%="
              f"{met['oracle']['precision_at_rate']['0.50']:.4f}", flush=True)
        return met

    def _train(mode: str, fam: dict, train_ex=None, train_feats=None, ablate=()):
        with _stage("train-rr"):
            model, history = train_rr(
                train_ex if train_ex is not None else fam["train"], fam["val"],
                catalog, cfg.rr_train, mode=mode, ablate=ablate,
                featurizer=cfg.featurizer, bin_edges=fam["edges"],
                train_feats=train_feats if train_feats is not None else fam["train_feats"],
                val_feats=fam["val_feats"])
        return model, history

    for fam_name in ("rule", "model"):
        fam = families[fam_name]
        print(f"[train-rr] family={fam_name} train_examples={len(fam['train'])}", flush=True)

        if fam_name == "rule":
            model, _ = _train("pointwise", fam)
            systems_report["pointwise+rule"] = _evaluate("pointwise+rule", model, fam)
            del model

        base, _ = _train("listwise", fam)
        base_name = f"listwise+{fam_name}"
        systems_report[base_name] = _evaluate(base_name, base, fam)
        if cfg.save_models:
            save_rr(models_dir / f"{base_name.replace('+', '_')}.bin", base)

        with _stage("relabel"):
            relabeled, collab_rep = collaborative_relabel(fam["train"], cfg.featurizer,
                                                          cfg.collab)
            collab_rep["observed_changed"] = _observed_changed(fam["train"], relabeled)
        model, _ = _train("listwise", fam, train_ex=relabeled)
        name = f"collab+{fam_name}"
        systems_report[name] = _evaluate(name, model, fam, extra={"relabel": collab_rep})
        del model, relabeled

        with _stage("relabel"):
            st_examples, st_model, st_rep = self_train_relabel(
                fam["train"], fam["val"], catalog, base, cfg.rr_train,
                cfg.selftrain, train_feats=fam["train_feats"],
                val_feats=fam["val_feats"])
            st_rep["observed_changed"] = _observed_changed(fam["train"], st_examples)
        name = f"selftrain+{fam_name}"
        systems_report[name] = _evaluate(name, st_model, fam, extra={"relabel": st_rep})
        del base, st_examples, st_model

    with _stage("evaluate"):
        sl_metrics = _evaluate_sl(sl_model, index, split.test, oracle, cfg)
        _write(out / "sl" / "metrics.json", _dumps(sl_metrics))

    report: dict = {
        "seed": cfg.seed,
        "n_utterances": cfg.n_utterances,
        "cutoff": cfg.cutoff,
        "simulation": stats,
        "sl": sl_metrics,
        "systems": systems_report,
    }

    if cfg.run_sensitivity:
        with _stage("train-rr"):
            fam = families["model"]
            train_ex, rep = make_examples(split.train, sl_model, index, cfg.k1_alt, cfg.k2)
            val_ex, _ = make_examples(split.validation, sl_model, index, cfg.k1_alt, cfg.k2)
            test_ex, _ = make_examples(split.test, sl_model, index, cfg.k1_alt, cfg.k2,
                                       include_unsuggested=True)
            alt = {
                "train": train_ex, "val": val_ex, "test": test_ex,
                "edges": fit_bin_edges(train_ex), "report": rep,
                "train_feats": feats_for(train_ex), "val_feats": feats_for(val_ex),
                "test_feats": feats_for(test_ex),
            }
        model, _ = _train("listwise", alt)
        met = _evaluate(f"listwise+model@k1={cfg.k1_alt}", model, alt)
        del model, alt
        main_pre50 = systems_report["listwise+model"]["oracle"]["precision_at_rate"]["0.50"]
        alt_pre50 = met["oracle"]["precision_at_rate"]["0.50"]
        report["sensitivity"] = {
            "k1": cfg.k1,
            "k1_alt": cfg.k1_alt,
            "oracle_pre50_main": main_pre50,
            "oracle_pre50_alt": alt_pre50,
            "relative_diff": abs(alt_pre50 - main_pre50) / main_pre50
                             if main_pre50 else None,
        }

    if cfg.run_ablations:
        fam = families["rule"]
        base_pre50 = systems_report["listwise+rule"]["oracle"]["precision_at_rate"]["0.50"]
        drops = {}
        for feat in ABLATION_FEATURES:
            print(f"[train-rr] ablate {feat}", flush=True)
            model, _ = _train("listwise", fam, ablate=(feat,))
            met = _evaluate(f"listwise+rule-{feat}", model, fam)
            pre50 = met["oracle"]["precision_at_rate"]["0.50"]
            drops[feat] = {"oracle_pre50": pre50, "drop": base_pre50 - pre50}
            del model
        report["ablations"] = {
            "family": "rule",
            "base_oracle_pre50": base_pre50,
            "features": drops,
        }

    with _stage("compare"):
        report["criteria"] = _criteria_block(report)
        _write(out / "report.json", _dumps(report))
        _write(out / "table.txt", render_table(report))
    return report
