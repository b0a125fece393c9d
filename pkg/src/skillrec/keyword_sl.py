"""Lexical shortlister: inverted index over skill metadata with TF-IDF scoring."""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .catalog import Candidate, CandidateList, Catalog
from .neuralkit.featurize import tokenize

MAGIC = b"SKIX1"


class IndexError_(ValueError):
    """Index file or lookup problem."""


def catalog_hash(catalog: Catalog) -> str:
    """Stable digest of skill ids and documents; detects index/catalog mismatch."""
    h = hashlib.sha256()
    for skill in catalog:
        h.update(skill.skill_id.encode("utf-8"))
        h.update(b"\x00")
        h.update(_document(skill).encode("utf-8"))
        h.update(b"\x00")
        h.update(str(skill.popularity).encode("ascii"))
        h.update(b"\x01")
    return h.hexdigest()


def _document(skill) -> str:
    return " ".join([skill.name, skill.description, *skill.example_phrases])


class InvertedIndex:
    """Immutable term -> (skill rows, term frequencies) map with df counts."""

    def __init__(self, skill_ids: list[str], popularity: np.ndarray, doc_len: np.ndarray,
                 postings: dict[str, tuple[np.ndarray, np.ndarray]], source_hash: str):
        self.skill_ids = list(skill_ids)
        self.popularity = np.asarray(popularity, dtype=np.int32)
        self.doc_len = np.asarray(doc_len, dtype=np.int64)
        self.postings = postings
        self.source_hash = source_hash
        self.num_skills = len(skill_ids)
        self._row_of = {sid: i for i, sid in enumerate(skill_ids)}
        self._idf = {term: self.idf(term) for term in postings}

    def df(self, term: str) -> int:
        rows, _ = self.postings.get(term, (np.empty(0, dtype=np.int64),) * 2)
        return int(rows.shape[0])

    def idf(self, term: str) -> float:
        return float(np.log((1.0 + self.num_skills) / (1.0 + self.df(term))) + 1.0)

    def row_of(self, skill_id: str) -> int:
        if skill_id not in self._row_of:
            raise IndexError_(f"skill {skill_id!r} not in index")
        return self._row_of[skill_id]

    def score_all(self, tokens: list[str]) -> np.ndarray:
        """TF-IDF score of every indexed skill against the token sequence."""
        scores = np.zeros(self.num_skills, dtype=np.float64)
        for term in tokens:
            hit = self.postings.get(term)
            if hit is None:
                continue
            rows, tfs = hit
            scores[rows] += tfs * (self._idf[term] ** 2)
        return scores


def build_index(catalog: Catalog) -> InvertedIndex:
    """Index each skill's name, description, and example phrases as one document."""
    if len(catalog) == 0:
        raise IndexError_("cannot index an empty catalog")
    skills = sorted(catalog, key=lambda s: s.skill_id)
    skill_ids = [s.skill_id for s in skills]
    popularity = np.array([s.popularity for s in skills], dtype=np.int32)
    doc_len = np.zeros(len(skills), dtype=np.int64)
    counts: dict[str, dict[int, int]] = {}
    for row, skill in enumerate(skills):
        tokens = tokenize(_document(skill))
        doc_len[row] = len(tokens)
        for tok in tokens:
            per_term = counts.setdefault(tok, {})
            per_term[row] = per_term.get(row, 0) + 1
    postings = {}
    for term in sorted(counts):
        rows = np.array(sorted(counts[term]), dtype=np.int64)
        tfs = np.array([counts[term][r] for r in rows], dtype=np.float64)
        postings[term] = (rows, tfs)
    return InvertedIndex(skill_ids, popularity, doc_len, postings, catalog_hash(catalog))


def tfidf_score(index: InvertedIndex, query_tokens: list[str], skill_id: str) -> float:
    """score = sum over query token occurrences of tf(t, doc) * idf(t)^2."""
    row = index.row_of(skill_id)
    total = 0.0
    for term in query_tokens:
        hit = index.postings.get(term)
        if hit is None:
            continue
        rows, tfs = hit
        pos = np.searchsorted(rows, row)
        if pos < rows.shape[0] and rows[pos] == row:
            total += float(tfs[pos]) * index._idf[term] ** 2
    return total


def rank_rows(index: InvertedIndex, scores: np.ndarray) -> np.ndarray:
    """Rows with positive score, ordered by score desc, popularity desc, skill_id asc."""
    nz = np.nonzero(scores > 0.0)[0]
    if nz.shape[0] == 0:
        return nz
    order = np.lexsort((nz, -index.popularity[nz], -scores[nz]))
    return nz[order]


def retrieve(index: InvertedIndex, text: str, k: int) -> CandidateList:
    if k < 1:
        raise IndexError_("k must be >= 1")
    tokens = tokenize(text)
    scores = index.score_all(tokens)
    ranked = rank_rows(index, scores)[:k]
    entries = tuple(
        Candidate(skill_id=index.skill_ids[r], score=float(scores[r]), source="rule")
        for r in ranked
    )
    return CandidateList(entries=entries, k=k)


def save_index(path: str | Path, index: InvertedIndex) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(MAGIC)
        hb = index.source_hash.encode("ascii")
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", index.num_skills))
        for i, sid in enumerate(index.skill_ids):
            sb = sid.encode("utf-8")
            f.write(struct.pack("<I", len(sb)))
            f.write(sb)
            f.write(struct.pack("<bq", int(index.popularity[i]), int(index.doc_len[i])))
        f.write(struct.pack("<I", len(index.postings)))
        for term in sorted(index.postings):
            rows, tfs = index.postings[term]
            tb = term.encode("utf-8")
            f.write(struct.pack("<I", len(tb)))
            f.write(tb)
            f.write(struct.pack("<I", rows.shape[0]))
            f.write(rows.astype("<i8").tobytes())
            f.write(tfs.astype("<f8").tobytes())


def load_index(path: str | Path) -> InvertedIndex:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise IndexError_(f"{path}: not an index file")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    source_hash = raw[off : off + hlen].decode("ascii")
    off += hlen
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    skill_ids = []
    popularity = np.zeros(n, dtype=np.int32)
    doc_len = np.zeros(n, dtype=np.int64)
    for i in range(n):
        (slen,) = struct.unpack_from("<I", raw, off)
        off += 4
        skill_ids.append(raw[off : off + slen].decode("utf-8"))
        off += slen
        pop, dl = struct.unpack_from("<bq", raw, off)
        off += struct.calcsize("<bq")
        popularity[i] = pop
        doc_len[i] = dl
    (n_terms,) = struct.unpack_from("<I", raw, off)
    off += 4
    postings = {}
    for _ in range(n_terms):
        (tlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        term = raw[off : off + tlen].decode("utf-8")
        off += tlen
        (cnt,) = struct.unpack_from("<I", raw, off)
        off += 4
        rows = np.frombuffer(raw, dtype="<i8", count=cnt, offset=off).copy()
        off += 8 * cnt
        tfs = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).copy()
        off += 8 * cnt
        postings[term] = (rows, tfs)
    return InvertedIndex(skill_ids, popularity, doc_len, postings, source_hash)
