"""Ranking and decision metrics for suggest-or-abstain recommenders.

Logged-mode metrics score a system against what the production log recorded
(a suggestion is correct only if it matches the logged suggestion and that
suggestion was accepted); oracle-mode metrics score against the simulator's
true relevance sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reranker import cutoff_for_rate

PRECISION_RATES = (0.25, 0.40, 0.50, 0.75)


@dataclass(frozen=True)
class EvalCase:
    """One utterance's top prediction plus the references it can be scored on."""

    utterance_id: str
    top_skill: str | None
    top_score: float
    logged_suggested: str | None = None
    logged_accepted: int | None = None
    relevant: frozenset[str] | None = None


def precision_at_k(ranked_ids: list[str], relevant: frozenset[str], k: int) -> float:
    """Hits in the top k divided by k, even when fewer than k were returned."""
    if k <= 0:
        raise ValueError("k must be positive")
    hits = sum(1 for sid in ranked_ids[:k] if sid in relevant)
    return hits / k


def ndcg_at_k(ranked_ids: list[str], relevant: frozenset[str], k: int) -> float:
    """Binary-gain NDCG with log2(position + 1) discounts; 0 when nothing is relevant."""
    if k <= 0:
        raise ValueError("k must be positive")
    if not relevant:
        return 0.0
    dcg = sum(1.0 / np.log2(i + 2) for i, sid in enumerate(ranked_ids[:k]) if sid in relevant)
    idcg = sum(1.0 / np.log2(i + 2) for i in range(min(k, len(relevant))))
    return float(dcg / idcg)


def _is_correct(case: EvalCase, mode: str) -> bool:
    if mode == "logged":
        return (case.top_skill is not None
                and case.top_skill == case.logged_suggested
                and case.logged_accepted == 1)
    return (case.top_skill is not None
            and case.relevant is not None
            and case.top_skill in case.relevant)


def _recall_denominator(cases: list[EvalCase], mode: str) -> int:
    if mode == "logged":
        return sum(1 for c in cases if c.logged_accepted == 1)
    return sum(1 for c in cases if c.relevant)


def decision_metrics(cases: list[EvalCase], cutoff: float, mode: str) -> dict:
    """Precision/recall/F1 of suggest-or-abstain decisions at a score cutoff.

    A case suggests when its top score strictly exceeds the cutoff. Precision
    is None when nothing was suggested; recall is None when the reference set
    is empty.
    """
    if mode not in ("logged", "oracle"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if not cases:
        raise ValueError("decision_metrics needs at least one case")
    suggested = [c for c in cases if c.top_score > cutoff and c.top_skill is not None]
    correct = sum(1 for c in suggested if _is_correct(c, mode))
    denom = _recall_denominator(cases, mode)
    precision = correct / len(suggested) if suggested else None
    recall = correct / denom if denom else None
    if precision and recall:
        f1 = 2 * precision * recall / (precision + recall)
    elif precision is not None and recall is not None:
        f1 = 0.0
    else:
        f1 = None
    return {
        "cutoff": float(cutoff),
        "n": len(cases),
        "n_suggested": len(suggested),
        "n_correct": correct,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "suggestion_rate": len(suggested) / len(cases),
    }


def precision_at_rates(cases: list[EvalCase], mode: str,
                       rates: tuple[float, ...] = PRECISION_RATES) -> dict[float, float | None]:
    """Precision when the cutoff is tuned to suggest on a target share of traffic."""
    scores = np.array([c.top_score for c in cases], dtype=np.float64)
    out = {}
    for rate in rates:
        cutoff = cutoff_for_rate(scores, rate)
        out[rate] = decision_metrics(cases, cutoff, mode)["precision"]
    return out


def sweep_curves(cases: list[EvalCase], mode: str) -> list[dict]:
    """Decision metrics at every distinct top score, descending (one row each).

    Matches decision_metrics row for row but shares the sorting work, since a
    full sweep at one cutoff per distinct score is quadratic done naively.
    """
    if mode not in ("logged", "oracle"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    scores = np.array([c.top_score for c in cases], dtype=np.float64)
    able = np.array([c.top_skill is not None for c in cases], dtype=bool)
    correct = np.array([_is_correct(c, mode) for c in cases], dtype=bool)
    sugg_scores = np.sort(scores[able])
    corr_scores = np.sort(scores[able & correct])
    denom = _recall_denominator(cases, mode)
    n = len(cases)
    cuts = np.unique(scores)[::-1]
    n_sugg = sugg_scores.size - np.searchsorted(sugg_scores, cuts, side="right")
    n_corr = corr_scores.size - np.searchsorted(corr_scores, cuts, side="right")
    rows = []
    for i, cutoff in enumerate(cuts):
        ns = int(n_sugg[i])
        nc = int(n_corr[i])
        precision = nc / ns if ns else None
        recall = nc / denom if denom else None
        if precision and recall:
            f1 = 2 * precision * recall / (precision + recall)
        elif precision is not None and recall is not None:
            f1 = 0.0
        else:
            f1 = None
        rows.append({
            "cutoff": float(cutoff),
            "n": n,
            "n_suggested": ns,
            "n_correct": nc,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "suggestion_rate": ns / n,
        })
    return rows


def overlap_at_1(pairs: list[tuple[str | None, str | None]]) -> float | None:
    """Agreement rate of two systems' suggestions where both actually suggested."""
    both = [(a, b) for a, b in pairs if a is not None and b is not None]
    if not both:
        return None
    return sum(1 for a, b in both if a == b) / len(both)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.shape[0], dtype=np.float64)
    i = 0
    while i < v.shape[0]:
        j = i
        while j + 1 < v.shape[0] and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: list[float], y: list[float]) -> float:
    """Rank correlation with average ranks for ties."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.shape[0] < 2:
        raise ValueError("spearman needs two equal-length lists of at least 2 values")
    rx = _average_ranks(xv)
    ry = _average_ranks(yv)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        return 0.0
    return float(np.sum(rx * ry) / denom)


def curves_to_csv(rows: list[dict]) -> str:
    """Render sweep rows as cutoff,precision,recall,suggestion_rate CSV text."""
    lines = ["cutoff,precision,recall,suggestion_rate"]
    for r in rows:
        prec = "" if r["precision"] is None else f"{r['precision']:.6f}"
        rec = "" if r["recall"] is None else f"{r['recall']:.6f}"
        lines.append(f"{r['cutoff']:.6g},{prec},{rec},{r['suggestion_rate']:.6f}")
    return "\n".join(lines) + "\n"
