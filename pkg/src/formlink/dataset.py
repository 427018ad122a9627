"""Form pages: FUNSD ingestion, BIES tagging, reading order and synthetic pages."""

from __future__ import annotations

import json
import logging
import statistics
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import named_stream

logger = logging.getLogger(__name__)

TAGS = ("B", "I", "E", "S")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
CATEGORIES = ("question", "answer", "header", "other")
SPLIT_DIRS = {"train": "training_data", "test": "testing_data"}


class DatasetLoadError(IOError):
    pass


class PageParseError(ValueError):
    def __init__(self, filename: str, reason: str):
        super().__init__(f"{filename}: {reason}")
        self.filename = filename
        self.reason = reason


class StructureError(ValueError):
    """Entity ranges do not partition the word sequence."""


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WordBox:
    text: str
    box: tuple[int, int, int, int]
    entity_id: int


@dataclass(frozen=True)
class Entity:
    id: int
    category: str
    start: int
    end: int
    out_links: tuple[int, ...] = ()

    @property
    def word_indices(self) -> range:
        return range(self.start, self.end)

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Page:
    id: str
    width: int
    height: int
    words: tuple[WordBox, ...]
    entities: tuple[Entity, ...]
    gold_tags: tuple[str, ...]

    @property
    def links(self) -> list[tuple[int, int]]:
        return [(e.id, t) for e in self.entities for t in e.out_links]

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise KeyError(entity_id)

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise StructureError(f"page {self.id}: non-positive size {self.width}x{self.height}")
        if len(self.gold_tags) != len(self.words):
            raise StructureError(f"page {self.id}: {len(self.gold_tags)} tags for {len(self.words)} words")
        ids = {e.id for e in self.entities}
        for w in self.words:
            x1, y1, x2, y2 = w.box
            if x1 > x2 or y1 > y2 or not w.text.strip() or w.entity_id not in ids:
                raise StructureError(f"page {self.id}: invalid word {w}")
        if tuple(tags_from_entities(self.entities, len(self.words))) != self.gold_tags:
            raise StructureError(f"page {self.id}: gold tags disagree with entity ranges")
        for e in self.entities:
            if any(self.words[i].entity_id != e.id for i in e.word_indices):
                raise StructureError(f"page {self.id}: entity {e.id} word membership mismatch")
            if e.id in e.out_links or len(set(e.out_links)) != len(e.out_links) or not set(e.out_links) <= ids:
                raise StructureError(f"page {self.id}: bad links on entity {e.id}")


@dataclass
class Dataset:
    pages: list[Page]
    split: str = "train"
    stats: Counter = field(default_factory=Counter)

    def __post_init__(self):
        ids = [p.id for p in self.pages]
        if len(set(ids)) != len(ids):
            raise DatasetLoadError(f"duplicate page ids in split {self.split}")

    def __len__(self):
        return len(self.pages)

    def counts(self) -> dict[str, int]:
        return {
            "forms": len(self.pages),
            "boxes": sum(len(p.words) for p in self.pages),
            "entities": sum(len(p.entities) for p in self.pages),
            "links": sum(len(p.links) for p in self.pages),
        }


def _span_of(e) -> tuple[int, int]:
    if isinstance(e, Entity):
        return e.start, e.end
    start, end = e
    return int(start), int(end)


def tags_from_entities(entities: Iterable, n_words: int) -> list[str]:
    """BIES tags for a partition of ``range(n_words)`` into contiguous ranges.

    ``entities`` may be :class:`Entity` objects or ``(start, end)`` pairs.
    """
    spans = sorted(_span_of(e) for e in entities)
    tags: list[str] = []
    pos = 0
    for start, end in spans:
        if start != pos or end <= start:
            raise StructureError(f"entity range [{start}, {end}) breaks the partition at word {pos}")
        k = end - start
        tags.extend(["S"] if k == 1 else ["B"] + ["I"] * (k - 2) + ["E"])
        pos = end
    if pos != n_words:
        raise StructureError(f"entities cover {pos} of {n_words} words")
    return tags


def normalize_box(box: Sequence[float], width: float, height: float) -> tuple[float, float, float, float]:
    if width <= 0 or height <= 0:
        raise ValueError(f"page dimensions must be positive, got {width}x{height}")
    x1, y1, x2, y2 = box
    clip = lambda v: min(max(v, 0.0), 1.0)
    return (clip(x1 / width), clip(y1 / height), clip(x2 / width), clip(y2 / height))


def reading_order(boxes: Sequence, page_size=None) -> list[int]:
    """Row-major reading order for unordered word boxes.

    Boxes whose vertical centers lie within half the median box height of a
    row's first (topmost) center share the row; rows go top to bottom and
    boxes within a row left to right. Ties fall back to the input index.
    """
    coords = [b.box if isinstance(b, WordBox) else tuple(b) for b in boxes]
    if not coords:
        return []
    tau = statistics.median(y2 - y1 for _, y1, _, y2 in coords) / 2.0
    cy = [(y1 + y2) / 2.0 for _, y1, _, y2 in coords]
    rows: list[list[int]] = []
    anchor = 0.0
    for i in sorted(range(len(coords)), key=lambda i: (cy[i], i)):
        if rows and cy[i] - anchor <= tau:
            rows[-1].append(i)
        else:
            rows.append([i])
            anchor = cy[i]
    return [i for row in rows for i in sorted(row, key=lambda i: (coords[i][0], i))]


# -- FUNSD format ------------------------------------------------------------

def _png_size(path: Path) -> tuple[int, int] | None:
    try:
        with open(path, "rb") as fh:
            head = fh.read(24)
    except OSError:
        return None
    if len(head) < 24 or head[:8] != b"\x89PNG\r\n\x1a\n":
        return None
    w, h = struct.unpack(">II", head[16:24])
    return int(w), int(h)


def _parse_box(raw, filename: str, what: str) -> tuple[int, int, int, int]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise PageParseError(filename, f"{what}: missing or malformed box {raw!r}")
    try:
        x1, y1, x2, y2 = (int(round(float(v))) for v in raw)
    except (TypeError, ValueError):
        raise PageParseError(filename, f"{what}: non-numeric box {raw!r}") from None
    return (min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def parse_page(record: dict, page_id: str, filename: str = "",
               image_size: tuple[int, int] | None = None, stats: Counter | None = None) -> Page:
    """Build a :class:`Page` from one FUNSD annotation record.

    Words keep the annotation's entity order; links come from every entity's
    ``linking`` pairs, read as first id -> second id and de-duplicated.
    """
    stats = stats if stats is not None else Counter()
    filename = filename or page_id
    form = record.get("form") if isinstance(record, dict) else None
    if not isinstance(form, list):
        raise PageParseError(filename, "missing 'form' list")

    words: list[WordBox] = []
    raw_entities = []
    pairs: list[tuple[int, int]] = []
    seen_ids: set[int] = set()
    for item in form:
        try:
            eid = int(item["id"])
        except (KeyError, TypeError, ValueError):
            raise PageParseError(filename, f"entity without integer id: {item!r:.80}") from None
        if eid in seen_ids:
            raise PageParseError(filename, f"duplicate entity id {eid}")
        seen_ids.add(eid)
        for pair in item.get("linking") or []:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise PageParseError(filename, f"entity {eid}: malformed link {pair!r}")
            pairs.append((int(pair[0]), int(pair[1])))
        entity_words = []
        for w in item.get("words") or []:
            box = _parse_box(w.get("box"), filename, f"entity {eid} word")
            text = str(w.get("text", "")).strip()
            if not text:
                stats["dropped_words"] += 1
                continue
            entity_words.append(WordBox(text, box, eid))
        if not entity_words:
            stats["dropped_entities"] += 1
            continue
        label = str(item.get("label", "other")).lower()
        raw_entities.append((eid, label if label in CATEGORIES else "other", len(words), len(words) + len(entity_words)))
        words.extend(entity_words)

    if not raw_entities:
        raise PageParseError(filename, "page has no entities with words")
    kept = {eid for eid, *_ in raw_entities}
    out_links: dict[int, list[int]] = {eid: [] for eid in kept}
    for a, b in dict.fromkeys(pairs):
        if a == b or a not in kept or b not in kept:
            stats["dropped_links"] += 1
            continue
        out_links[a].append(b)
    entities = tuple(Entity(eid, cat, s, e, tuple(out_links[eid])) for eid, cat, s, e in raw_entities)

    if isinstance(record.get("width"), int) and isinstance(record.get("height"), int):
        width, height = record["width"], record["height"]
    elif image_size is not None:
        width, height = image_size
    else:
        width = max(1, max(w.box[2] for w in words))
        height = max(1, max(w.box[3] for w in words))
    page = Page(page_id, int(width), int(height), tuple(words), entities,
                tuple(tags_from_entities(entities, len(words))))
    try:
        page.validate()
    except StructureError as exc:
        raise PageParseError(filename, str(exc)) from None
    return page


def load_funsd(root_dir, split: str = "train", allow_empty: bool = False) -> Dataset:
    """Load ``<root>/{training,testing}_data/annotations/*.json`` in file-name order."""
    if split not in SPLIT_DIRS:
        raise DatasetLoadError(f"unknown split {split!r}")
    ann_dir = Path(root_dir) / SPLIT_DIRS[split] / "annotations"
    if not ann_dir.is_dir():
        raise DatasetLoadError(f"annotation directory not found: {ann_dir}")
    files = sorted(ann_dir.glob("*.json"))
    if not files and not allow_empty:
        raise DatasetLoadError(f"no annotation files in {ann_dir}")

    stats: Counter = Counter()
    pages = []
    for path in files:
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise PageParseError(path.name, f"unreadable: {exc}") from None
        size = _png_size(ann_dir.parent / "images" / f"{path.stem}.png")
        pages.append(parse_page(record, path.stem, path.name, size, stats))
    if stats:
        logger.warning("load_funsd(%s): %s", split, dict(stats))
    return Dataset(pages, split, stats)


def page_to_record(page: Page) -> dict:
    links = page.links
    form = []
    for e in page.entities:
        ws = [page.words[i] for i in e.word_indices]
        form.append({
            "id": e.id,
            "text": " ".join(w.text for w in ws),
            "label": e.category,
            "box": [min(w.box[0] for w in ws), min(w.box[1] for w in ws),
                    max(w.box[2] for w in ws), max(w.box[3] for w in ws)],
            "words": [{"text": w.text, "box": list(w.box)} for w in ws],
            "linking": [[a, b] for a, b in links if e.id in (a, b)],
        })
    return {"form": form, "width": page.width, "height": page.height}


def write_funsd(dataset: Dataset, root_dir, split: str | None = None) -> Path:
    ann_dir = Path(root_dir) / SPLIT_DIRS[split or dataset.split] / "annotations"
    ann_dir.mkdir(parents=True, exist_ok=True)
    for page in dataset.pages:
        text = json.dumps(page_to_record(page), indent=1, sort_keys=True)
        (ann_dir / f"{page.id}.json").write_text(text + "\n", encoding="utf-8")
    return ann_dir


# -- synthetic pages ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    pages: int = 8
    pairs_per_page: int = 6
    key_vocab: int = 24
    value_vocab: int = 48
    jitter: int = 4
    width: int = 1000
    height: int = 1000
    test_pages: int = 4

    word_height = 20
    char_width = 10
    word_gap = 8
    margin = 40


_SYLLABLES = ("ka", "to", "mi", "re", "su", "no", "la", "ve", "di", "po", "ge", "ru", "an", "el", "or", "is")


def _vocabulary(size: int, stream: str) -> list[str]:
    rng = named_stream(0, stream)
    vocab: list[str] = []
    while len(vocab) < size:
        word = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 5))))
        if word not in vocab:
            vocab.append(word)
    return vocab


def gen_synthetic(config: SynthConfig = SynthConfig(), seed: int = 0, split: str = "train",
                  n_pages: int | None = None) -> Dataset:
    """Two-column key/value pages with one key -> value link per row.

    Rows are drawn without replacement from the vertical slots that fit on the
    page, so pages differ in spacing as well as wording.
    """
    K = config.pairs_per_page
    if K < 1 or config.pages < 0 or config.key_vocab < 1 or config.value_vocab < 1 or config.jitter < 0:
        raise SynthConfigError(f"invalid synth config {config}")
    pitch = config.word_height + 2 * config.jitter + config.word_gap
    slots = (config.height - 2 * config.margin) // pitch
    if K > slots:
        raise SynthConfigError(f"{K} pairs do not fit: page holds {slots} rows of {pitch}px")
    col_width = config.width // 2 - config.margin - 2 * config.jitter
    longest = 4 * (8 * config.char_width + 4 + 2) + 3 * config.word_gap
    if longest > col_width:
        raise SynthConfigError(f"page width {config.width} too narrow for the value column")

    keys = _vocabulary(config.key_vocab, "synth-keys")
    values = _vocabulary(config.value_vocab, "synth-values")
    rng = named_stream(seed, "synth", {"train": 0, "test": 1}.get(split, 2))
    count = config.pages if n_pages is None else n_pages

    pages = []
    for p in range(count):
        rows = np.sort(rng.choice(slots, size=K, replace=False))
        words: list[WordBox] = []
        entities: list[Entity] = []
        for r, slot in enumerate(rows):
            y = config.margin + int(slot) * pitch + config.jitter
            for col, (vocab, lo, hi, label) in enumerate(((keys, 1, 3, "question"), (values, 1, 4, "answer"))):
                eid = 2 * r + col
                n = int(rng.integers(lo, hi + 1))
                texts = [str(t) for t in rng.choice(vocab, size=n)]
                if col == 0:
                    texts[-1] += ":"
                x = config.margin + col * (config.width // 2) + int(rng.integers(-config.jitter, config.jitter + 1))
                dy = int(rng.integers(-config.jitter, config.jitter + 1))
                start = len(words)
                for t in texts:
                    w = config.char_width * len(t) + 4
                    words.append(WordBox(t, (x, y + dy, x + w, y + dy + config.word_height), eid))
                    x += w + config.word_gap
                links = (eid + 1,) if col == 0 else ()
                entities.append(Entity(eid, label, start, len(words), links))
        page = Page(f"synth_{split}_{seed}_{p:04d}", config.width, config.height, tuple(words),
                    tuple(entities), tuple(tags_from_entities(entities, len(words))))
        pages.append(page)
    return Dataset(pages, split)
