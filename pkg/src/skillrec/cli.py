"""Command-line entry point: stage subcommands plus a one-shot pipeline runner.

Every subcommand reads the same JSON experiment config (flags override it) and
works inside one experiment directory, so any artifact can be rebuilt from the
config snapshot and seed alone.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .catalog import load_catalog, load_interactions, load_oracle, split_by_time
from .keyword_sl import build_index, load_index, save_index
from .model_sl import load_sl, save_sl, train_sl
from .pipeline import (
    ABLATION_FEATURES,
    ExperimentConfig,
    PipelineError,
    _build_cases,
    _dumps,
    _stage,
    _system_dir,
    _system_metrics,
    _write,
    render_table,
    run_pipeline,
)
from .relabel import collaborative_relabel, self_train_relabel
from .reranker import fit_bin_edges, load_rr, make_examples, save_rr, train_rr
from .simulate import simulate_log
from .evalkit import curves_to_csv, overlap_at_1, sweep_curves

RR_NAMES = ("pointwise", "listwise")
FAMILIES = ("rule", "model")


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Load the JSON config if given, apply flag overrides, resolve seeds."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.out is not None:
        over["out_dir"] = args.out
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "n", None) is not None:
        over["n_utterances"] = args.n
    if over:
        cfg = replace(cfg, **over)
    return cfg.resolved()


def _data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "data"


def _snapshot(cfg: ExperimentConfig) -> None:
    _write(Path(cfg.out_dir) / "config.json", _dumps(cfg.to_json()))


def _load_data(cfg: ExperimentConfig):
    data = _data_dir(cfg)
    catalog = load_catalog(data / "skills.jsonl")
    interactions = load_interactions(data / "interactions.jsonl")
    return catalog, interactions


def _load_family(cfg: ExperimentConfig, family: str, catalog, interactions,
                 k1: int | None = None):
    """Rebuild train/val/test rerank examples for one shortlister family."""
    index = load_index(_data_dir(cfg) / "index.json")
    sl = load_sl(Path(cfg.out_dir) / "models" / "sl.bin") if family == "model" else None
    split = split_by_time(interactions)
    k1 = cfg.k1 if k1 is None else k1
    train_ex, rep = make_examples(split.train, sl, index, k1, cfg.k2)
    val_ex, _ = make_examples(split.validation, sl, index, k1, cfg.k2)
    test_ex, _ = make_examples(split.test, sl, index, k1, cfg.k2,
                               include_unsuggested=True)
    return {"split": split, "train": train_ex, "val": val_ex, "test": test_ex,
            "edges": fit_bin_edges(train_ex), "report": rep}


def cmd_simulate(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    _snapshot(cfg)
    with _stage("simulate"):
        stats = simulate_log(cfg.world, cfg.n_utterances, _data_dir(cfg))
        _write(_data_dir(cfg) / "stats.json", _dumps(stats))
    print(f"wrote {_data_dir(cfg)}: {stats['n_utterances']} utterances, "
          f"suggestion_rate={stats['suggestion_rate']:.3f}")


def cmd_index(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    with _stage("index"):
        catalog = load_catalog(_data_dir(cfg) / "skills.jsonl")
        index = build_index(catalog)
        save_index(_data_dir(cfg) / "index.json", index)
    print(f"indexed {len(catalog)} skills, vocabulary={len(index.postings)}")


def cmd_train_sl(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    with _stage("train-sl"):
        catalog, interactions = _load_data(cfg)
        split = split_by_time(interactions)
        model = train_sl(split.train, split.validation, catalog, cfg.sl_train,
                         weights=cfg.sl_weights, min_count=cfg.sl_min_count,
                         featurizer=cfg.featurizer, loss_type=cfg.sl_loss)
        path = Path(cfg.out_dir) / "models" / "sl.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_sl(path, model)
    print(f"wrote {path} (train={len(split.train)} val={len(split.validation)})")


def cmd_train_rr(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    name = args.name or f"{args.mode}+{args.family}"
    ablate = tuple(a for a in (args.ablate or "").split(",") if a)
    with _stage("train-rr"):
        catalog, interactions = _load_data(cfg)
        fam = _load_family(cfg, args.family, catalog, interactions)
        model, history = train_rr(fam["train"], fam["val"], catalog, cfg.rr_train,
                                  mode=args.mode, ablate=ablate,
                                  featurizer=cfg.featurizer, bin_edges=fam["edges"])
        path = Path(cfg.out_dir) / "models" / f"{name.replace('+', '_')}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_rr(path, model)
    print(f"wrote {path} (best_val_loss={history['best_val_loss']:.4f})")


def cmd_relabel(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    name = args.name or f"{args.method}+{args.family}"
    with _stage("relabel"):
        catalog, interactions = _load_data(cfg)
        fam = _load_family(cfg, args.family, catalog, interactions)
        if args.method == "collab":
            relabeled, report = collaborative_relabel(fam["train"], cfg.featurizer,
                                                      cfg.collab)
            model, _ = train_rr(relabeled, fam["val"], catalog, cfg.rr_train,
                                mode="listwise", featurizer=cfg.featurizer,
                                bin_edges=fam["edges"])
        else:
            base, _ = train_rr(fam["train"], fam["val"], catalog, cfg.rr_train,
                               mode="listwise", featurizer=cfg.featurizer,
                               bin_edges=fam["edges"])
            _, model, report = self_train_relabel(fam["train"], fam["val"], catalog,
                                                  base, cfg.rr_train, cfg.selftrain)
        path = Path(cfg.out_dir) / "models" / f"{name.replace('+', '_')}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_rr(path, model)
        _write(_system_dir(Path(cfg.out_dir), name) / "relabel.json", _dumps(report))
    print(f"wrote {path}")


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    name = args.name or Path(args.model).stem.replace("_", "+")
    with _stage("evaluate"):
        catalog, interactions = _load_data(cfg)
        oracle = load_oracle(_data_dir(cfg) / "oracle.jsonl", catalog)
        fam = _load_family(cfg, args.family, catalog, interactions)
        model = load_rr(args.model, catalog)
        cases, pairs = _build_cases(model, fam["test"], None, fam["split"].test,
                                    oracle, cfg.cutoff)
        met = _system_metrics(cases, cfg.cutoff)
        met["overlap_at_1_with_logged"] = overlap_at_1(pairs)
        sdir = _system_dir(Path(cfg.out_dir), name)
        for mode in ("logged", "oracle"):
            _write(sdir / f"curves_{mode}.csv", curves_to_csv(sweep_curves(cases, mode)))
        _write(sdir / "metrics.json", _dumps(met))
    print(f"{name}: oracle Pre@50%={met['oracle']['precision_at_rate']['0.50']:.4f} "
          f"logged Pre@50%={met['logged']['precision_at_rate']['0.50']:.4f}")


def cmd_compare(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    with _stage("compare"):
        path = Path(cfg.out_dir) / "report.json"
        if not path.exists():
            raise FileNotFoundError(f"no report at {path}; run the pipeline first")
        report = json.loads(path.read_text(encoding="utf-8"))
        table = render_table(report)
        _write(Path(cfg.out_dir) / "table.txt", table)
    print(table, end="")


def cmd_pipeline(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    report = run_pipeline(cfg)
    print(render_table(report), end="")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="skillrec",
        description="Two-stage skill recommender: simulate, train, relabel, evaluate.")
    p.add_argument("--config", help="experiment config JSON; flags override it")
    p.add_argument("--out", help="experiment directory (default from config)")
    p.add_argument("--seed", type=int, help="master seed override")
    sp = p.add_subparsers(dest="cmd", required=True)

    sim = sp.add_parser("simulate", help="generate the synthetic log dataset")
    sim.add_argument("--n", type=int, help="number of utterances")
    sim.set_defaults(func=cmd_simulate)

    idx = sp.add_parser("index", help="build the keyword inverted index")
    idx.set_defaults(func=cmd_index)

    tsl = sp.add_parser("train-sl", help="train the model-based shortlister")
    tsl.set_defaults(func=cmd_train_sl)

    trr = sp.add_parser("train-rr", help="train a reranker on logged labels")
    trr.add_argument("--mode", choices=RR_NAMES, default="listwise")
    trr.add_argument("--family", choices=FAMILIES, default="rule",
                     help="shortlister feeding the candidate lists")
    trr.add_argument("--ablate", help=f"comma-separated features to drop, from "
                                      f"{','.join(ABLATION_FEATURES)}")
    trr.add_argument("--name", help="model name (default mode+family)")
    trr.set_defaults(func=cmd_train_rr)

    rel = sp.add_parser("relabel", help="train a reranker on relabeled data")
    rel.add_argument("--method", choices=("collab", "selftrain"), required=True)
    rel.add_argument("--family", choices=FAMILIES, default="rule")
    rel.add_argument("--name", help="model name (default method+family)")
    rel.set_defaults(func=cmd_relabel)

    ev = sp.add_parser("evaluate", help="score a saved reranker on the test split")
    ev.add_argument("--model", required=True, help="saved reranker path")
    ev.add_argument("--family", choices=FAMILIES, default="rule")
    ev.add_argument("--name", help="system name for the report directory")
    ev.set_defaults(func=cmd_evaluate)

    cmp_ = sp.add_parser("compare", help="render the system comparison table")
    cmp_.set_defaults(func=cmd_compare)

    pipe = sp.add_parser("pipeline", help="run every stage and compare all systems")
    pipe.add_argument("--n", type=int, help="number of utterances")
    pipe.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    cfg = build_config(args)
    try:
        args.func(cfg, args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
