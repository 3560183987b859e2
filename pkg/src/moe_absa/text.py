"""Review text handling: normalization, CSV ingestion, splitting, a synthetic
corpus generator and the text-to-vector providers used in place of a
pretrained encoder."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ASPECTS: tuple[str, ...] = ("host", "price", "location", "amenities", "cleanliness", "connectivity")
SENTIMENTS: tuple[str, ...] = ("negative", "neutral", "positive")

# (total, negative, neutral, positive) per aspect, from the Jabama label table.
LABEL_TABLE: dict[str, tuple[int, int, int, int]] = {
    "price": (693, 579, 40, 128),
    "amenities": (2202, 1508, 73, 621),
    "host": (1267, 188, 15, 1064),
    "location": (608, 187, 10, 411),
    "cleanliness": (1228, 359, 30, 839),
    "connectivity": (749, 580, 40, 129),
}

ZWNJ = "\u200c"


class SchemaError(ValueError):
    """Input file is missing required columns or is malformed."""


class LookupMissError(KeyError):
    """A precomputed embedding was requested for an unknown id."""


@dataclass
class ReviewRecord:
    id: str
    text: str
    aspects: set[str] = field(default_factory=set)
    sentiments: dict[str, str] = field(default_factory=dict)
    overall_sentiment: str | None = None

    def __post_init__(self) -> None:
        bad = set(self.aspects) - set(ASPECTS)
        if bad:
            raise ValueError(f"unknown aspects {sorted(bad)}")
        if not set(self.sentiments) <= set(self.aspects):
            raise ValueError("sentiment keys must be a subset of aspects")
        for s in list(self.sentiments.values()) + ([self.overall_sentiment] if self.overall_sentiment else []):
            if s not in SENTIMENTS:
                raise ValueError(f"unknown sentiment {s!r}")

    def triples(self) -> list[tuple[str, str, str]]:
        """(text, aspect, sentiment) for every aspect that carries a sentiment."""
        return [(self.text, a, self.sentiments[a]) for a in ASPECTS if a in self.sentiments]


# --- normalization ----------------------------------------------------------

_CHAR_MAP = {
    "ي": "ی",  # arabic yeh -> persian yeh
    "ى": "ی",  # alef maksura
    "ك": "ک",  # arabic kaf -> keheh
    "ـ": "",  # tatweel
    **{chr(0x0660 + d): chr(0x06F0 + d) for d in range(10)},
    **{chr(c): "" for c in range(0x064B, 0x0653)},  # harakat
}
_TRANSLATE = str.maketrans(_CHAR_MAP)

_EMOJI_RE = re.compile(
    "["
    "\U0001F000-\U0001FAFF"
    "\U00002600-\U000027BF"
    "\U00002B00-\U00002BFF"
    "\U00002300-\U000023FF"
    "\U0001F1E6-\U0001F1FF"
    "\U000E0020-\U000E007F"
    "\u200d\ufe0f\ufe0e\u20e3"
    "]+"
)
_WS_RE = re.compile(r"\s+")
_SUFFIX_RE = re.compile(r"(?<=\S) (ها|های|هایی|تر|ترین)(?=\s|$)")
_PREFIX_RE = re.compile(r"(?<!\S)(ن?می) (?=\S)")
_ZWNJ_RUN_RE = re.compile(ZWNJ + "{2,}")
_ZWNJ_EDGE_RE = re.compile(rf"{ZWNJ}+(?=\s|$)|(?<=\s){ZWNJ}+|^{ZWNJ}+")


def _clean(text: str) -> str:
    text = unicodedata.normalize("NFC", text)
    text = text.translate(_TRANSLATE)
    text = _EMOJI_RE.sub(" ", text)
    text = _ZWNJ_RUN_RE.sub(ZWNJ, text)
    text = _ZWNJ_EDGE_RE.sub("", text)
    text = _WS_RE.sub(" ", text).strip()
    text = _SUFFIX_RE.sub(ZWNJ + r"\1", text)
    return _PREFIX_RE.sub(r"\1" + ZWNJ, text)


class SpellingTable:
    """Whole-token replacements applied longest match first."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = ()):
        table: dict[str, str] = {}
        for wrong, correct in pairs:
            wrong, correct = _clean(wrong), _clean(correct)
            if wrong and wrong != correct:
                table[wrong] = correct
        for correct in table.values():
            for wrong in table:
                if re.search(rf"(?<![\w\u200c]){re.escape(wrong)}(?![\w\u200c])", correct):
                    raise ValueError(f"spelling table is not idempotent: {correct!r} contains {wrong!r}")
        self.table = table
        if table:
            alts = sorted(table, key=lambda w: (-len(w), w))
            self._re = re.compile("(?<![\\w\u200c])(" + "|".join(map(re.escape, alts)) + ")(?![\\w\u200c])")
        else:
            self._re = None

    @classmethod
    def from_csv(cls, path: str | Path) -> SpellingTable:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"wrong", "correct"} <= set(reader.fieldnames):
                raise SchemaError(f"{path}: spelling table needs columns wrong,correct")
            return cls((row["wrong"], row["correct"]) for row in reader)

    @classmethod
    def default(cls) -> SpellingTable:
        ref = resources.files("moe_absa") / "data" / "spelling_fa.csv"
        with resources.as_file(ref) as p:
            return cls.from_csv(p)

    def apply(self, text: str) -> tuple[str, int]:
        if self._re is None:
            return text, 0
        return self._re.subn(lambda m: self.table[m.group(1)], text)


_DEFAULT_TABLE: SpellingTable | None = None


def _default_table() -> SpellingTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = SpellingTable.default()
    return _DEFAULT_TABLE


def normalize_text(raw: str, spelling: SpellingTable | None = None) -> str:
    return normalize_text_counted(raw, spelling)[0]


def normalize_text_counted(raw: str, spelling: SpellingTable | None = None) -> tuple[str, int]:
    """Normalize ``raw`` and report how many spelling replacements fired."""
    table = _default_table() if spelling is None else spelling
    text = _clean(raw)
    text, n = table.apply(text)
    if n:
        text = _clean(text)
    return text, n


# --- label vocabulary ---------------------------------------------------------

def _load_label_map() -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {"aspect": {}, "sentiment": {}}
    ref = resources.files("moe_absa") / "data" / "labels_fa.csv"
    with resources.as_file(ref) as p, open(p, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["kind"]][row["persian"]] = row["canonical"]
    return out


_LABELS = _load_label_map()
ASPECT_SURFACE: dict[str, str] = {v: k for k, v in _LABELS["aspect"].items()}


def canonical_aspect(label: str) -> str | None:
    s = label.strip()
    if s.lower() in ASPECTS:
        return s.lower()
    return _LABELS["aspect"].get(normalize_text(s))


def canonical_sentiment(label: str) -> str | None:
    s = label.strip()
    if s.lower() in SENTIMENTS:
        return s.lower()
    return _LABELS["sentiment"].get(normalize_text(s))


# --- CSV I/O ------------------------------------------------------------------

REQUIRED_COLUMNS = ("review", "Category", "sentiment")


@dataclass
class IngestStats:
    rows: int = 0
    rejected: int = 0
    conflicts: int = 0
    duplicates: int = 0


def record_id_for(text: str) -> str:
    return "r-" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


def overall_from_aspects(sentiments: dict[str, str]) -> str | None:
    """Majority vote over aspect sentiments; ties leave it undefined."""
    if not sentiments:
        return None
    counts = Counter(sentiments.values()).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return None
    return counts[0][0]


def ingest_csv_with_stats(path: str | Path) -> tuple[list[ReviewRecord], IngestStats]:
    stats = IngestStats()
    by_text: dict[str, ReviewRecord] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {', '.join(missing)}")
        for row in reader:
            stats.rows += 1
            text = row["review"] or ""
            aspect = canonical_aspect(row["Category"] or "")
            raw_sent = (row["sentiment"] or "").strip()
            sentiment = canonical_sentiment(raw_sent) if raw_sent else None
            if aspect is None or (raw_sent and sentiment is None):
                stats.rejected += 1
                continue
            rec = by_text.get(text)
            if rec is None:
                rec = by_text[text] = ReviewRecord(record_id_for(text), text)
            if aspect in rec.aspects:
                if rec.sentiments.get(aspect) != sentiment:
                    stats.conflicts += 1
                else:
                    stats.duplicates += 1
                continue
            rec.aspects.add(aspect)
            if sentiment is not None:
                rec.sentiments[aspect] = sentiment
    records = list(by_text.values())
    for rec in records:
        rec.overall_sentiment = overall_from_aspects(rec.sentiments)
    if stats.rejected or stats.conflicts:
        log.warning("%s: %d rows rejected, %d conflicting duplicates", path, stats.rejected, stats.conflicts)
    return records, stats


def ingest_csv(path: str | Path) -> list[ReviewRecord]:
    return ingest_csv_with_stats(path)[0]


def write_reviews_csv(records: Iterable[ReviewRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for rec in records:
            for a in ASPECTS:
                if a in rec.aspects:
                    w.writerow([rec.text, a, rec.sentiments.get(a, "")])
                    n += 1
    return n


# --- splitting ----------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[ReviewRecord]
    validation: list[ReviewRecord]
    test: list[ReviewRecord]
    seed: int


def split_dataset(
    records: Sequence[ReviewRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 42,
) -> DatasetSplit:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    n = len(records)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    n_val = max(1, math.floor(ratios[1] * n + 0.5))
    n_test = max(1, math.floor(ratios[2] * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [records[i] for i in order]
    n_train = n - n_val - n_test
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
        seed,
    )


# --- synthetic corpus -----------------------------------------------------------

ASPECT_WORDS: dict[str, tuple[str, ...]] = {
    "host": ("میزبان", "صاحبخانه", "پذیرش", "برخورد میزبان"),
    "price": ("قیمت", "هزینه", "اجاره", "نرخ"),
    "location": ("موقعیت", "لوکیشن", "منظره", "دسترسی"),
    "amenities": ("امکانات", "آشپزخانه", "استخر", "سیستم گرمایش", "پکیج"),
    "cleanliness": ("نظافت", "تمیزی", "بهداشت", "ملحفه"),
    "connectivity": ("اینترنت", "وای‌فای", "آنتن", "سیگنال"),
}
POLARITY_WORDS: dict[str, tuple[str, ...]] = {
    "negative": ("افتضاح", "ضعیف", "خیلی بد", "ناامیدکننده", "داغون"),
    "neutral": ("معمولی", "متوسط", "قابل‌قبول", "معمولی و عادی"),
    "positive": ("عالی", "فوق‌العاده", "بی‌نظیر", "خیلی خوب", "رضایت‌بخش"),
}
FILLER_WORDS: tuple[str, ...] = (
    "ویلا", "سوئیت", "سفر", "اقامت", "خانواده", "شب", "ما", "این", "هم", "واقعا", "دوستان", "تعطیلات",
)
# raw-text noise the preprocessing step is expected to undo
_MISSPELLINGS = {"نظافت": "نضافت", "امکانات": "امکانت", "قیمت": "قیمط", "میزبان": "میزبون"}
_EMOJIS = ("😊", "👍", "😡", "🏠", "⭐")


def label_distribution() -> dict[tuple[str, str], float]:
    """Joint (aspect, sentiment) probabilities: aspect share from the totals
    column, sentiment split from the per-cell counts of that aspect."""
    grand = sum(v[0] for v in LABEL_TABLE.values())
    out = {}
    for a in ASPECTS:
        total, *cells = LABEL_TABLE[a]
        for s, c in zip(SENTIMENTS, cells):
            out[(a, s)] = (total / grand) * (c / sum(cells))
    return out


def _systematic_pair(probs: np.ndarray, rng: np.random.Generator) -> list[int]:
    """Two distinct indices whose inclusion probabilities are exactly 2*probs."""
    pi = 2.0 * probs
    if pi.max() > 1.0 + 1e-12:
        raise ValueError("a single category exceeds half the mass; cannot draw a distinct pair")
    edges = np.concatenate([[0.0], np.cumsum(pi)])
    u = rng.random()
    picks = []
    for point in (u, u + 1.0):
        idx = int(np.searchsorted(edges, point, side="right") - 1)
        picks.append(min(idx, len(probs) - 1))
    return picks


def synth_corpus(seed: int, n_records: int, multi_aspect_prob: float = 0.25, decorate: bool = True) -> list[ReviewRecord]:
    """Reviews whose (aspect, sentiment) labels follow the Jabama label table.

    Every review carries one sentiment shared by all of its aspects, so the
    label is recoverable from the surface text. Two-aspect reviews draw their
    aspects with inclusion probabilities proportional to P(aspect | sentiment),
    which keeps the per-pair marginals equal to the table proportions.
    """
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    rng = np.random.default_rng(seed)
    joint = label_distribution()
    sent_p = np.array([sum(joint[(a, s)] for a in ASPECTS) for s in SENTIMENTS])
    cond = {
        s: np.array([joint[(a, s)] for a in ASPECTS]) / sent_p[k] for k, s in enumerate(SENTIMENTS)
    }
    seen: set[str] = set()
    records = []
    for i in range(n_records):
        s = SENTIMENTS[int(rng.choice(3, p=sent_p))]
        if rng.random() < multi_aspect_prob:
            aspects = [ASPECTS[k] for k in _systematic_pair(cond[s], rng)]
            rng.shuffle(aspects)
        else:
            aspects = [ASPECTS[int(rng.choice(6, p=cond[s]))]]
        text = _compose(aspects, s, rng, decorate)
        tries = 0
        while normalize_text(text) in seen:
            tries += 1
            text = _compose(aspects, s, rng, decorate, extra_fill=1 + tries // 4)
        seen.add(normalize_text(text))
        records.append(
            ReviewRecord(
                f"syn-{i:06d}",
                text,
                set(aspects),
                {a: s for a in aspects},
                s,
            )
        )
    return records


def _pick(words: Sequence[str], rng: np.random.Generator) -> str:
    return words[int(rng.integers(len(words)))]


def _compose(aspects: list[str], sentiment: str, rng: np.random.Generator, decorate: bool, extra_fill: int = 0) -> str:
    clauses = []
    for a in aspects:
        kw = _pick(ASPECT_WORDS[a], rng)
        if decorate and kw in _MISSPELLINGS and rng.random() < 0.05:
            kw = _MISSPELLINGS[kw]
        clauses.append(f"{kw} {_pick(POLARITY_WORDS[sentiment], rng)} بود")
    n_fill = int(rng.integers(1, 4)) + extra_fill
    fill = [_pick(FILLER_WORDS, rng) for _ in range(n_fill)]
    cut = int(rng.integers(0, n_fill + 1))
    text = " ".join(fill[:cut] + [" و ".join(clauses)] + fill[cut:])
    if decorate:
        if rng.random() < 0.1:
            text = text.replace("ی", "ي")
        if rng.random() < 0.1:
            text = f"{text} {_pick(_EMOJIS, rng)}"
    return text


# --- embedding providers ------------------------------------------------------

class HashedNgramProvider:
    """Signed feature hashing of whitespace tokens and padded character 2/3-grams."""

    kind = "hashed_ngram"

    def __init__(self, dim: int = 256, seed: int = 42):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self._key = int(seed).to_bytes(8, "little", signed=True)
        self._bucket: dict[str, tuple[int, float]] = {}
        self._aspect_cache: dict[str, np.ndarray] = {}

    def features(self, text: str) -> list[str]:
        feats = []
        for tok in text.split():
            feats.append("w:" + tok)
            padded = f" {tok} "
            for n in (2, 3):
                feats.extend("c:" + padded[i : i + n] for i in range(len(padded) - n + 1))
        return feats

    def _hash(self, feat: str) -> tuple[int, float]:
        hit = self._bucket.get(feat)
        if hit is None:
            h = int.from_bytes(hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=self._key).digest(), "little")
            hit = (h % self.dim, -1.0 if (h >> 63) & 1 else 1.0)
            self._bucket[feat] = hit
        return hit

    def embed(self, text: str, record_id: str | None = None) -> np.ndarray:
        vec = np.zeros(self.dim)
        feats = self.features(text)
        if not feats:
            return vec
        for f in feats:
            idx, sign = self._hash(f)
            vec[idx] += sign
        return vec / math.sqrt(len(feats))

    def aspect_embedding(self, aspect: str) -> np.ndarray:
        if aspect not in ASPECTS:
            raise ValueError(f"unknown aspect {aspect!r}")
        if aspect not in self._aspect_cache:
            self._aspect_cache[aspect] = self.embed(ASPECT_SURFACE[aspect])
        return self._aspect_cache[aspect]

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed}


class PrecomputedProvider:
    """Vectors read from a file keyed by record id; aspects use ``aspect:<name>`` ids."""

    kind = "precomputed_file"

    def __init__(self, table: dict[str, np.ndarray], dim: int, path: str | None = None):
        self.table = table
        self.dim = dim
        self.path = path

    @classmethod
    def from_file(cls, path: str | Path) -> PrecomputedProvider:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or len(header) != 2 or header[0] != "id":
                raise SchemaError(f"{path}: first line must be 'id,<dim>'")
            dim = int(header[1])
            table = {}
            for lineno, row in enumerate(reader, start=2):
                if len(row) != dim + 1:
                    raise SchemaError(f"{path}:{lineno}: expected {dim} values, got {len(row) - 1}")
                table[row[0]] = np.array([float(v) for v in row[1:]])
        return cls(table, dim, str(path))

    def embed(self, text: str, record_id: str | None = None) -> np.ndarray:
        if record_id is None or record_id not in self.table:
            raise LookupMissError(f"no precomputed embedding for id {record_id!r}")
        return self.table[record_id]

    def aspect_embedding(self, aspect: str) -> np.ndarray:
        if aspect not in ASPECTS:
            raise ValueError(f"unknown aspect {aspect!r}")
        return self.embed(ASPECT_SURFACE[aspect], f"aspect:{aspect}")

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "path": self.path}


EmbeddingProvider = HashedNgramProvider | PrecomputedProvider


def write_precomputed(path: str | Path, vectors: dict[str, np.ndarray]) -> None:
    dims = {len(v) for v in vectors.values()}
    if len(dims) != 1:
        raise ValueError("all vectors must share one dimension")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", dims.pop()])
        for k, v in vectors.items():
            w.writerow([k, *(repr(float(x)) for x in v)])


def make_provider(kind: str = "hashed_ngram", dim: int = 256, seed: int = 42, path: str | None = None) -> EmbeddingProvider:
    if kind == "hashed_ngram":
        return HashedNgramProvider(dim, seed)
    if kind == "precomputed_file":
        if path is None:
            raise ValueError("precomputed_file provider needs a path")
        return PrecomputedProvider.from_file(path)
    raise ValueError(f"unknown provider kind {kind!r}")


def embed(provider: EmbeddingProvider, text: str, record_id: str | None = None) -> np.ndarray:
    return provider.embed(text, record_id)


def aspect_embedding(provider: EmbeddingProvider, aspect: str) -> np.ndarray:
    return provider.aspect_embedding(aspect)
