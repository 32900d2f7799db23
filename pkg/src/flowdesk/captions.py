"""Synthetic-caption curation over precomputed embeddings.

Per retained ten-second segment: pick the candidate caption with the highest
cosine similarity to the segment's audio embedding, reject it below the
threshold, then reject it if its text contains a low-quality keyword.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ProviderError, SchemaError

DEFAULT_KEYWORDS = (
    "ambiguous", "artifact", "background noise", "broken up", "buzzing", "choppy", "clipping",
    "compromised", "crackling", "deficient", "distant", "distorted", "dropout", "echo", "faint",
    "faulty", "feedback", "flawed", "fluctuating", "fuzzy", "garbled", "gibberish", "glitch",
    "hissing", "imprecise", "inadequate", "inaudible", "incoherent", "indistinct", "inferior",
    "insufficient", "interference", "irregular", "irrelevant", "lacking", "low quality",
    "low volume", "low-quality", "mediocre", "misheard", "misinterpretation", "muffled", "murmur",
    "noise", "noisy", "off-mic", "overlapping speech", "overmodulated", "poor", "popping",
    "reverberation", "scrambled", "second-rate", "sibilance", "skipped", "skipping", "static",
    "suboptimal", "substandard", "uncertain", "unclear", "undermodulated", "unintelligible",
    "unknown sounds", "unreliable", "unsatisfactory", "unspecific", "vague",
)

CATEGORIES = ("music", "speech", "other")
HIST_BINS = 100
_UNIT_TOL = 1e-6


@dataclass
class FilterConfig:
    threshold: float = 0.45
    candidates_per_segment: int = 10
    keyword_blocklist: tuple[str, ...] = DEFAULT_KEYWORDS
    segment_length: float = 10.0
    subsample_keep_every: int = 1

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ContractError("threshold must lie in [-1, 1]")
        if self.candidates_per_segment < 1:
            raise ContractError("candidates_per_segment must be at least 1")
        if self.segment_length <= 0:
            raise ContractError("segment_length must be positive")
        if self.subsample_keep_every < 1:
            raise ContractError("subsample_keep_every must be a positive integer")
        self.keyword_blocklist = tuple(self.keyword_blocklist)


@dataclass
class AudioRecord:
    id: str
    duration: float
    category: str
    segment_embeddings: list

    def validate(self, segment_length: float = 10.0):
        if self.category not in CATEGORIES:
            raise ContractError(f"record {self.id}: unknown category {self.category!r}")
        n = segment_count(self.duration, segment_length)
        if len(self.segment_embeddings) != n:
            raise ContractError(
                f"record {self.id}: {len(self.segment_embeddings)} segment embeddings, expected {n}"
            )
        for e in self.segment_embeddings:
            if abs(np.linalg.norm(e) - 1.0) > _UNIT_TOL:
                raise ContractError(f"record {self.id}: segment embedding is not unit-norm")


@dataclass
class CaptionCandidate:
    text: str
    embedding: np.ndarray | None = None


@dataclass
class Selection:
    index: int
    similarity: float
    accepted: bool


@dataclass
class AcceptedCaption:
    record_id: str
    segment: int
    caption: str
    similarity: float


@dataclass
class DatasetSummary:
    accepted: int = 0
    rejected_threshold: int = 0
    rejected_keyword: int = 0
    histogram: list = field(default_factory=lambda: [0] * HIST_BINS)
    total_hours: float = 0.0

    @property
    def total(self) -> int:
        return self.accepted + self.rejected_threshold + self.rejected_keyword

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected_threshold": self.rejected_threshold,
            "rejected_keyword": self.rejected_keyword,
            "total": self.total,
            "total_hours": self.total_hours,
            "histogram": list(self.histogram),
        }


def segment_count(duration: float, segment_length: float = 10.0) -> int:
    if duration < 0:
        raise ContractError(f"duration must be non-negative, got {duration}")
    return int(math.floor(duration / segment_length))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return 0.0 if denom == 0 else float(a @ b / denom)


def best_caption(candidate_embeddings, audio_embedding, threshold: float = 0.45) -> Selection:
    """Highest-similarity candidate (first index wins ties) and whether it clears the threshold."""
    cands = np.atleast_2d(np.asarray(candidate_embeddings, dtype=np.float64))
    if cands.size == 0:
        raise ContractError("best_caption needs at least one candidate")
    sims = np.array([cosine(c, audio_embedding) for c in cands])
    idx = int(np.argmax(sims))
    return Selection(idx, float(sims[idx]), bool(sims[idx] >= threshold))


def keyword_filter(text: str, blocklist: Iterable[str] = DEFAULT_KEYWORDS) -> tuple[bool, str | None]:
    """Case-insensitive substring match; returns ``(passed, earliest matched keyword)``.

    Substring semantics over-match on purpose ("unnoisy" hits "noisy").
    """
    low = text.lower()
    hits = [(low.find(k.lower()), -len(k), k) for k in blocklist if k and k.lower() in low]
    if not hits:
        return True, None
    return False, min(hits)[2]


def subsample_segments(n_segments: int, category: str, keep_every: int) -> list[int]:
    if category in ("music", "speech"):
        return list(range(n_segments))
    return list(range(0, n_segments, keep_every))


def max_sim(ids: Sequence[str], embeddings, query) -> tuple[float, str]:
    """Maximum cosine similarity of ``query`` over a dataset; earliest id wins ties."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if len(ids) == 0 or emb.size == 0:
        raise ContractError("max_sim needs a non-empty dataset")
    q = np.asarray(query, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1) * np.linalg.norm(q)
    dots = emb @ q
    sims = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    idx = int(np.argmax(sims))
    return float(sims[idx]), ids[idx]


def histogram_bin(similarity: float) -> int:
    """Bin of width 0.01 over [0, 1]; values outside are clamped to the end bins."""
    return int(min(max(math.floor(similarity * HIST_BINS + 1e-9), 0), HIST_BINS - 1))


def toy_embedder(text: str, dim: int = 64) -> np.ndarray:
    """Hashed character-trigram counts, L2-normalized. Deterministic across runs."""
    if not text or not text.strip():
        raise ProviderError("cannot embed empty text")
    padded = f" {text.lower()} "
    vec = np.zeros(dim)
    for i in range(len(padded) - 2):
        digest = hashlib.blake2b(padded[i:i + 3].encode("utf-8"), digest_size=8).digest()
        vec[int.from_bytes(digest, "little") % dim] += 1.0
    return vec / np.linalg.norm(vec)


Embedder = Callable[[str], np.ndarray]


def build_dataset(records: Sequence[AudioRecord],
                  candidates: Mapping[tuple[str, int], Sequence[CaptionCandidate]],
                  config: FilterConfig = FilterConfig(),
                  embedder: Embedder | None = None) -> tuple[list[AcceptedCaption], DatasetSummary]:
    """Run selection, thresholding and keyword filtering over every retained segment.

    Segments without candidates are skipped and not counted. Output is
    ordered by (record id, segment index).
    """
    accepted: list[AcceptedCaption] = []
    summary = DatasetSummary()
    for rec in sorted(records, key=lambda r: r.id):
        rec.validate(config.segment_length)
        keep = subsample_segments(len(rec.segment_embeddings), rec.category, config.subsample_keep_every)
        for seg in keep:
            cands = list(candidates.get((rec.id, seg), ()))[: config.candidates_per_segment]
            if not cands:
                continue
            embs = []
            for c in cands:
                if c.embedding is not None:
                    embs.append(np.asarray(c.embedding, dtype=np.float64))
                elif embedder is None:
                    raise ProviderError(f"record {rec.id} segment {seg}: candidate has no embedding")
                else:
                    try:
                        embs.append(np.asarray(embedder(c.text), dtype=np.float64))
                    except Exception as exc:
                        raise ProviderError(f"record {rec.id}: embedding provider failed: {exc}") from exc
            sel = best_caption(embs, rec.segment_embeddings[seg], config.threshold)
            if not sel.accepted:
                summary.rejected_threshold += 1
                summary.histogram[histogram_bin(sel.similarity)] += 1
                continue
            text = cands[sel.index].text
            ok, _ = keyword_filter(text, config.keyword_blocklist)
            if not ok:
                summary.rejected_keyword += 1
                continue
            summary.accepted += 1
            summary.histogram[histogram_bin(sel.similarity)] += 1
            accepted.append(AcceptedCaption(rec.id, seg, text, sel.similarity))
    summary.total_hours = summary.accepted * config.segment_length / 3600.0
    return accepted, summary


# ---------------------------------------------------------------------------
# JSON-lines I/O


def _jsonl_rows(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(row, dict):
                raise SchemaError("row must be a JSON object", path, lineno)
            yield lineno, row


def read_records(path, segment_length: float = 10.0) -> list[AudioRecord]:
    out = []
    for lineno, row in _jsonl_rows(path):
        try:
            rec = AudioRecord(str(row["id"]), float(row["duration"]), str(row["category"]),
                              [np.asarray(s, dtype=np.float64) for s in row["segments"]])
            rec.validate(segment_length)
        except KeyError as exc:
            raise SchemaError(f"missing field {exc.args[0]!r}", path, lineno) from None
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), path, lineno) from None
        out.append(rec)
    return out


def read_candidates(path) -> dict[tuple[str, int], list[CaptionCandidate]]:
    out: dict[tuple[str, int], list[CaptionCandidate]] = {}
    for lineno, row in _jsonl_rows(path):
        try:
            key = (str(row["record_id"]), int(row["segment"]))
            caps = [CaptionCandidate(str(c["text"]),
                                     None if c.get("vec") is None else np.asarray(c["vec"], dtype=np.float64))
                    for c in row["captions"]]
        except KeyError as exc:
            raise SchemaError(f"missing field {exc.args[0]!r}", path, lineno) from None
        except (TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(str(exc), path, lineno) from None
        out.setdefault(key, []).extend(caps)
    return out


def accepted_to_jsonl(accepted: Sequence[AcceptedCaption]) -> str:
    return "".join(
        json.dumps({"record_id": a.record_id, "segment": a.segment, "caption": a.caption,
                    "similarity": a.similarity}) + "\n"
        for a in accepted
    )


def histogram_to_csv(summary: DatasetSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "count"])
    for i, count in enumerate(summary.histogram):
        w.writerow([f"{i / HIST_BINS:.2f}", count])
    return buf.getvalue()
