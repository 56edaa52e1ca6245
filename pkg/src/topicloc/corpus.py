"""Corpus data model, file I/O and a synthetic-corpus generator.

A document is one image reduced to a bag of (visual word, location)
observations plus an optional image-level label set.  Labels are class
indices; ``labels=None`` marks a document whose classes are unknown
(the semi-supervised case), which is different from an empty label set
(known to contain none of the classes).

The synthetic generator samples the same hierarchy the inference engine
assumes (per-topic word distributions, per-document topic mixtures, one
spatial Gaussian per present class, uniform background locations) and
returns the true generating boxes, so trained models can be scored
against a known answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Document",
    "Corpus",
    "GroundTruth",
    "SynthConfig",
    "CorpusError",
    "validate_document",
    "load_corpus",
    "save_corpus",
    "load_ground_truth",
    "save_ground_truth",
    "generate_synthetic",
]

UNLABELLED = None

# Generator-internal Dirichlet concentrations for the per-document topic
# mixture: present foreground classes get a heavier weight than background
# topics so a labelled object reliably owns enough observations to be
# localisable at all (a class with 2 of 100 words has no recoverable box).
_THETA_CONC_FG = 2.0
_THETA_CONC_BG = 1.0


class CorpusError(ValueError):
    """Raised on malformed corpus files or invariant violations."""


@dataclass(frozen=True, eq=False)
class Document:
    """One image as a bag of located visual words.

    ``words`` is an int array of vocabulary ids, ``xy`` the matching
    ``(N, 2)`` array of pixel locations.  Locations live in the closed
    box ``[0, width] x [0, height]`` (grid samples may sit on the edge).
    """

    id: str
    width: int
    height: int
    labels: frozenset[int] | None
    words: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "words", np.asarray(self.words, dtype=np.int64))
        object.__setattr__(self, "xy", np.asarray(self.xy, dtype=np.float64).reshape(-1, 2))
        if self.labels is not None:
            object.__setattr__(self, "labels", frozenset(int(c) for c in self.labels))
        if len(self.words) != len(self.xy):
            raise CorpusError(f"document {self.id!r}: {len(self.words)} words but {len(self.xy)} locations")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def area(self) -> float:
        return float(self.width) * float(self.height)


@dataclass(frozen=True, eq=False)
class Corpus:
    documents: list[Document]
    vocab_size: int
    num_classes: int

    def __post_init__(self):
        seen = set()
        for doc in self.documents:
            if doc.id in seen:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def labelled_documents(self) -> list[Document]:
        return [d for d in self.documents if d.labels is not None]

    def subset(self, ids: set[str]) -> "Corpus":
        docs = [d for d in self.documents if d.id in ids]
        return Corpus(docs, self.vocab_size, self.num_classes)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-document list of (class, box) pairs, boxes as (x0, y0, x1, y1)."""

    boxes: dict[str, list[tuple[int, tuple[float, float, float, float]]]]

    def classes_in(self, doc_id: str) -> set[int]:
        return {c for c, _ in self.boxes.get(doc_id, [])}


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    num_bg_topics: int = 2
    num_documents: int = 200
    words_per_document: int = 100
    vocab_size: int = 200
    width: int = 400
    height: int = 300
    appearance_sharpness: float = 0.1
    fg_sigma: float = 40.0
    label_density: float = 0.5
    unlabelled_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "num_bg_topics": self.num_bg_topics,
            "num_documents": self.num_documents,
            "words_per_document": self.words_per_document,
            "vocab_size": self.vocab_size,
            "width": self.width,
            "height": self.height,
        }
        for name, value in counts.items():
            if value <= 0:
                raise CorpusError(f"SynthConfig.{name} must be positive, got {value}")
        if self.num_classes < 0:
            raise CorpusError("SynthConfig.num_classes must be >= 0")
        if not 0.0 <= self.label_density <= 1.0:
            raise CorpusError("SynthConfig.label_density must lie in [0, 1]")
        if not 0.0 <= self.unlabelled_fraction <= 1.0:
            raise CorpusError("SynthConfig.unlabelled_fraction must lie in [0, 1]")
        if self.appearance_sharpness <= 0:
            raise CorpusError("SynthConfig.appearance_sharpness must be positive")
        if self.fg_sigma <= 0:
            raise CorpusError("SynthConfig.fg_sigma must be positive")


def validate_document(doc: Document, vocab_size: int, num_classes: int) -> list[str]:
    """Return every invariant violation for ``doc`` (empty list = ok)."""
    violations = []
    if doc.width <= 0 or doc.height <= 0:
        violations.append(f"non-positive image size {doc.width}x{doc.height}")
    if len(doc) == 0:
        violations.append("no observations")
    bad_words = np.flatnonzero((doc.words < 0) | (doc.words >= vocab_size))
    for i in bad_words:
        violations.append(f"word {int(doc.words[i])} at index {int(i)} outside vocabulary [0, {vocab_size})")
    x, y = doc.xy[:, 0], doc.xy[:, 1]
    bad_loc = np.flatnonzero(
        (x < 0) | (x > doc.width) | (y < 0) | (y > doc.height) | ~np.isfinite(x) | ~np.isfinite(y)
    )
    for i in bad_loc:
        violations.append(
            f"location ({doc.xy[i, 0]}, {doc.xy[i, 1]}) at index {int(i)} outside "
            f"[0, {doc.width}] x [0, {doc.height}]"
        )
    if doc.labels is not None:
        for c in sorted(doc.labels):
            if c < 0 or c >= num_classes:
                violations.append(f"label {c} outside [0, {num_classes})")
    return violations


def _doc_from_record(record: dict, line_no: int) -> Document:
    try:
        labels = record["labels"]
        return Document(
            id=str(record["id"]),
            width=int(record["w"]),
            height=int(record["h"]),
            labels=None if labels is None else frozenset(int(c) for c in labels),
            words=np.array([w[0] for w in record["words"]], dtype=np.int64),
            xy=np.array([[w[1], w[2]] for w in record["words"]], dtype=np.float64).reshape(-1, 2),
        )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise CorpusError(f"line {line_no}: malformed corpus record ({exc})") from exc


def load_corpus(path, vocab_size: int, num_classes: int) -> Corpus:
    """Load and validate a JSONL corpus file.

    Raises :class:`CorpusError` with the line number on parse failures and
    with the document id on invariant violations.
    """
    documents = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: invalid JSON ({exc})") from exc
            doc = _doc_from_record(record, line_no)
            violations = validate_document(doc, vocab_size, num_classes)
            if violations:
                raise CorpusError(f"document {doc.id!r} (line {line_no}): " + "; ".join(violations))
            documents.append(doc)
    return Corpus(documents, vocab_size, num_classes)


def _doc_to_record(doc: Document) -> dict:
    return {
        "id": doc.id,
        "w": doc.width,
        "h": doc.height,
        "labels": None if doc.labels is None else sorted(doc.labels),
        "words": [[int(v), float(x), float(y)] for v, (x, y) in zip(doc.words, doc.xy)],
    }


def save_corpus(path, corpus: Corpus) -> None:
    from .ioutil import atomic_write_text

    lines = [json.dumps(_doc_to_record(d), separators=(",", ":")) for d in corpus]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_ground_truth(path) -> GroundTruth:
    boxes: dict[str, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                doc_id = str(record["id"])
                entries = [
                    (int(b["c"]), (float(b["x0"]), float(b["y0"]), float(b["x1"]), float(b["y1"])))
                    for b in record["boxes"]
                ]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"line {line_no}: malformed ground-truth record ({exc})") from exc
            boxes[doc_id] = entries
    return GroundTruth(boxes)


def save_ground_truth(path, gt: GroundTruth) -> None:
    from .ioutil import atomic_write_text

    lines = []
    for doc_id, entries in gt.boxes.items():
        record = {
            "id": doc_id,
            "boxes": [
                {"c": c, "x0": b[0], "y0": b[1], "x1": b[2], "y1": b[3]} for c, b in entries
            ],
        }
        lines.append(json.dumps(record, separators=(",", ":")))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


@dataclass(frozen=True, eq=False)
class SynthTruth:
    """Generator internals kept for white-box tests: the drawn mixtures,
    topic assignments and per-(document, class) Gaussians."""

    topic_words: np.ndarray            # (K, vocab) true appearance distributions
    thetas: list[np.ndarray]           # per doc, full-length K mixture (zeros on absent fg)
    assignments: list[np.ndarray]      # per doc, topic index per observation
    gaussians: list[dict[int, tuple[np.ndarray, np.ndarray]]]  # per doc: class -> (mu, cov)


def generate_synthetic(cfg: SynthConfig):
    """Sample (corpus, ground truth) from the generative hierarchy.

    Deterministic given ``cfg.seed``.  Ground-truth boxes are the
    two-standard-deviation axis-aligned boxes of the generating Gaussians,
    clamped to the image.
    """
    corpus, gt, _ = generate_synthetic_with_truth(cfg)
    return corpus, gt


def generate_synthetic_with_truth(cfg: SynthConfig):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C, Kbg = cfg.num_classes, cfg.num_bg_topics
    K = C + Kbg
    nv = cfg.vocab_size

    topic_words = rng.dirichlet(np.full(nv, cfg.appearance_sharpness), size=K)
    topic_cdf = np.cumsum(topic_words, axis=1)

    n_unlab = int(np.floor(cfg.unlabelled_fraction * cfg.num_documents))
    unlab_ids = set(rng.choice(cfg.num_documents, size=n_unlab, replace=False).tolist())

    documents = []
    gt_boxes: dict[str, list] = {}
    thetas, assignments, gaussians = [], [], []
    for j in range(cfg.num_documents):
        present = np.flatnonzero(rng.random(C) < cfg.label_density) if C > 0 else np.array([], dtype=int)
        avail = np.concatenate([present, np.arange(C, K)])

        conc = np.where(avail < C, _THETA_CONC_FG, _THETA_CONC_BG)
        theta_avail = rng.dirichlet(conc)
        theta = np.zeros(K)
        theta[avail] = theta_avail

        # one spatial component per present class, kept mostly inside the image
        doc_gauss = {}
        for c in present:
            sx, sy = cfg.fg_sigma * rng.uniform(0.8, 1.2, size=2)
            mx = rng.uniform(min(2.0 * sx, cfg.width / 2), max(cfg.width - 2.0 * sx, cfg.width / 2))
            my = rng.uniform(min(2.0 * sy, cfg.height / 2), max(cfg.height - 2.0 * sy, cfg.height / 2))
            doc_gauss[int(c)] = (np.array([mx, my]), np.diag([sx**2, sy**2]))

        n = cfg.words_per_document
        y = avail[rng.choice(len(avail), size=n, p=theta_avail)]
        u = rng.random(n)
        words = np.empty(n, dtype=np.int64)
        for t in np.unique(y):
            mask = y == t
            words[mask] = np.minimum(np.searchsorted(topic_cdf[t], u[mask], side="right"), nv - 1)

        xy = np.empty((n, 2))
        for c in present:
            mask = y == c
            mu, cov = doc_gauss[int(c)]
            pts = mu + rng.standard_normal((mask.sum(), 2)) * np.sqrt(np.diag(cov))
            xy[mask] = pts
        bg_mask = y >= C
        xy[bg_mask, 0] = rng.uniform(0, cfg.width, size=bg_mask.sum())
        xy[bg_mask, 1] = rng.uniform(0, cfg.height, size=bg_mask.sum())
        np.clip(xy[:, 0], 0, cfg.width, out=xy[:, 0])
        np.clip(xy[:, 1], 0, cfg.height, out=xy[:, 1])

        doc_id = f"d{j:05d}"
        label_set = None if j in unlab_ids else frozenset(int(c) for c in present)
        documents.append(Document(doc_id, cfg.width, cfg.height, label_set, words, xy))

        entries = []
        for c in sorted(doc_gauss):
            mu, cov = doc_gauss[c]
            ex, ey = 2.0 * np.sqrt(np.diag(cov))
            box = (
                float(np.clip(mu[0] - ex, 0, cfg.width)),
                float(np.clip(mu[1] - ey, 0, cfg.height)),
                float(np.clip(mu[0] + ex, 0, cfg.width)),
                float(np.clip(mu[1] + ey, 0, cfg.height)),
            )
            entries.append((c, box))
        gt_boxes[doc_id] = entries
        thetas.append(theta)
        assignments.append(y)
        gaussians.append(doc_gauss)

    corpus = Corpus(documents, nv, C)
    truth = SynthTruth(topic_words, thetas, assignments, gaussians)
    return corpus, GroundTruth(gt_boxes), truth
