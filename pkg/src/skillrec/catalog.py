"""Domain records for skills, utterances, logged interactions and oracle labels,
plus JSONL persistence and time-based dataset splitting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence


class DatasetError(ValueError):
    """A data file or record violates the schema."""


@dataclass(frozen=True)
class Skill:
    skill_id: str
    name: str
    description: str
    example_phrases: tuple[str, ...]
    category: str
    subcategory: str
    popularity: int = 0

    def __post_init__(self):
        if not self.skill_id:
            raise DatasetError("skill_id must be non-empty")
        if not self.category or not self.subcategory:
            raise DatasetError(f"skill {self.skill_id!r}: category/subcategory must be non-empty")
        if self.popularity not in (0, 1):
            raise DatasetError(f"skill {self.skill_id!r}: popularity must be 0 or 1")

    def to_json(self) -> dict:
        return {
            "skill_id": self.skill_id,
            "name": self.name,
            "description": self.description,
            "example_phrases": list(self.example_phrases),
            "category": self.category,
            "subcategory": self.subcategory,
            "popularity": self.popularity,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Skill":
        return cls(
            skill_id=obj["skill_id"],
            name=obj["name"],
            description=obj["description"],
            example_phrases=tuple(obj["example_phrases"]),
            category=obj["category"],
            subcategory=obj["subcategory"],
            popularity=int(obj["popularity"]),
        )


class Catalog:
    """Immutable skill collection with O(1) lookup by skill_id."""

    def __init__(self, skills: Sequence[Skill]):
        self._skills = list(skills)
        self._by_id: dict[str, Skill] = {}
        cat_of_subcat: dict[str, str] = {}
        for s in self._skills:
            if s.skill_id in self._by_id:
                raise DatasetError(f"duplicate skill_id {s.skill_id!r}")
            self._by_id[s.skill_id] = s
            prev = cat_of_subcat.setdefault(s.subcategory, s.category)
            if prev != s.category:
                raise DatasetError(
                    f"subcategory {s.subcategory!r} appears under both "
                    f"{prev!r} and {s.category!r}"
                )

    def __len__(self) -> int:
        return len(self._skills)

    def __iter__(self) -> Iterator[Skill]:
        return iter(self._skills)

    def __contains__(self, skill_id: str) -> bool:
        return skill_id in self._by_id

    def get(self, skill_id: str) -> Skill:
        try:
            return self._by_id[skill_id]
        except KeyError:
            raise KeyError(f"unknown skill_id {skill_id!r}") from None

    @property
    def skill_ids(self) -> list[str]:
        return [s.skill_id for s in self._skills]

    def categories(self) -> list[str]:
        return sorted({s.category for s in self._skills})

    def subcategories(self) -> list[str]:
        return sorted({s.subcategory for s in self._skills})


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    text: str
    timestamp: int

    def __post_init__(self):
        if not self.text.strip():
            raise DatasetError(f"utterance {self.utterance_id!r}: empty text")


@dataclass(frozen=True)
class Candidate:
    """One shortlister hit: skill, source of the list, and the raw score."""

    skill_id: str
    source: str  # "rule" | "model"
    score: float

    def __post_init__(self):
        if self.source not in ("rule", "model"):
            raise DatasetError(f"candidate source must be 'rule' or 'model', got {self.source!r}")


@dataclass(frozen=True)
class CandidateList:
    """Score-descending, duplicate-free shortlister output of at most k entries."""

    entries: tuple[Candidate, ...]
    k: int

    def __post_init__(self):
        if len(self.entries) > self.k:
            raise DatasetError(f"candidate list longer ({len(self.entries)}) than requested k={self.k}")
        seen: set[str] = set()
        prev = None
        for c in self.entries:
            if c.skill_id in seen:
                raise DatasetError(f"duplicate candidate {c.skill_id!r}")
            seen.add(c.skill_id)
            if prev is not None and c.score > prev + 1e-12:
                raise DatasetError("candidate scores must be non-increasing")
            prev = c.score

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.entries)

    def skill_ids(self) -> list[str]:
        return [c.skill_id for c in self.entries]


@dataclass(frozen=True)
class LoggedInteraction:
    """One utterance plus the logging policy's suggestion and the user's feedback."""

    utterance: Utterance
    suggested_skill: str | None = None
    accepted: int | None = None
    logged_candidates: CandidateList | None = None

    def __post_init__(self):
        if (self.suggested_skill is None) != (self.accepted is None):
            raise DatasetError(
                f"interaction {self.utterance.utterance_id!r}: accepted must be "
                "present iff suggested_skill is present"
            )
        if self.accepted is not None and self.accepted not in (0, 1):
            raise DatasetError(f"interaction {self.utterance.utterance_id!r}: accepted must be 0 or 1")
        if (
            self.suggested_skill is not None
            and self.logged_candidates is not None
            and self.suggested_skill not in self.logged_candidates.skill_ids()
        ):
            raise DatasetError(
                f"interaction {self.utterance.utterance_id!r}: suggested skill "
                "missing from logged candidates"
            )

    @property
    def has_feedback(self) -> bool:
        return self.suggested_skill is not None

    def to_json(self) -> dict:
        cands = None
        if self.logged_candidates is not None:
            cands = [
                {"skill_id": c.skill_id, "source": c.source, "score": c.score}
                for c in self.logged_candidates
            ]
        return {
            "utterance_id": self.utterance.utterance_id,
            "text": self.utterance.text,
            "timestamp": self.utterance.timestamp,
            "suggested_skill": self.suggested_skill,
            "accepted": self.accepted,
            "logged_candidates": cands,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LoggedInteraction":
        cands = obj.get("logged_candidates")
        clist = None
        if cands is not None:
            entries = tuple(Candidate(c["skill_id"], c["source"], float(c["score"])) for c in cands)
            clist = CandidateList(entries=entries, k=len(entries))
        accepted = obj.get("accepted")
        return cls(
            utterance=Utterance(obj["utterance_id"], obj["text"], int(obj["timestamp"])),
            suggested_skill=obj.get("suggested_skill"),
            accepted=None if accepted is None else int(accepted),
            logged_candidates=clist,
        )


class RelevanceOracle:
    """Ground-truth utterance -> relevant-skill mapping (the annotation stand-in)."""

    def __init__(self, relevant: dict[str, frozenset[str]], catalog: Catalog | None = None):
        for uid, skills in relevant.items():
            if not skills:
                raise DatasetError(f"oracle entry {uid!r}: relevant set is empty")
            if catalog is not None:
                for sid in skills:
                    if sid not in catalog:
                        raise DatasetError(f"oracle entry {uid!r}: unknown skill {sid!r}")
        self._relevant = dict(relevant)

    def __len__(self) -> int:
        return len(self._relevant)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._relevant

    def relevant(self, utterance_id: str) -> frozenset[str]:
        return self._relevant[utterance_id]

    def items(self):
        return self._relevant.items()


@dataclass
class DatasetSplit:
    train: list[LoggedInteraction]
    validation: list[LoggedInteraction]
    test: list[LoggedInteraction]


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc


def load_catalog(path: str | Path) -> Catalog:
    """Load skills.jsonl into a Catalog; duplicate skill_ids are an error."""
    path = Path(path)
    skills = []
    for lineno, obj in _iter_jsonl(path):
        try:
            skills.append(Skill.from_json(obj))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad skill record: {exc}") from exc
    return Catalog(skills)


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for skill in catalog:
            f.write(_dumps(skill.to_json()) + "\n")


def load_interactions(path: str | Path) -> list[LoggedInteraction]:
    """Load interactions.jsonl preserving order; validates feedback consistency."""
    path = Path(path)
    out = []
    seen_ids: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            rec = LoggedInteraction.from_json(obj)
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad interaction record: {exc}") from exc
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        uid = rec.utterance.utterance_id
        if uid in seen_ids:
            raise DatasetError(f"{path}:{lineno}: duplicate utterance_id {uid!r}")
        seen_ids.add(uid)
        out.append(rec)
    return out


def save_interactions(interactions: Sequence[LoggedInteraction], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for rec in interactions:
            f.write(_dumps(rec.to_json()) + "\n")


def load_oracle(path: str | Path, catalog: Catalog | None = None) -> RelevanceOracle:
    path = Path(path)
    relevant: dict[str, frozenset[str]] = {}
    for lineno, obj in _iter_jsonl(path):
        uid = obj["utterance_id"]
        if uid in relevant:
            raise DatasetError(f"{path}:{lineno}: duplicate oracle entry {uid!r}")
        relevant[uid] = frozenset(obj["relevant_skills"])
    return RelevanceOracle(relevant, catalog=catalog)


def save_oracle(oracle: RelevanceOracle, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for uid, skills in oracle.items():
            f.write(_dumps({"utterance_id": uid, "relevant_skills": sorted(skills)}) + "\n")


def split_by_time(
    interactions: Sequence[LoggedInteraction],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> DatasetSplit:
    """Sort by timestamp (stable) and cut into contiguous train/validation/test parts.

    Cut sizes are within +-1 of fraction*N; records sharing a timestamp keep
    their input order.
    """
    if not interactions:
        raise DatasetError("cannot split an empty dataset")
    f_train, f_val, f_test = fractions
    if min(fractions) <= 0:
        raise DatasetError("split fractions must be positive")
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise DatasetError("split fractions must sum to 1")
    ordered = sorted(interactions, key=lambda r: r.utterance.timestamp)
    n = len(ordered)
    cut1 = int(round(f_train * n))
    cut2 = int(round((f_train + f_val) * n))
    cut2 = max(cut2, cut1)
    return DatasetSplit(train=ordered[:cut1], validation=ordered[cut1:cut2], test=ordered[cut2:])
