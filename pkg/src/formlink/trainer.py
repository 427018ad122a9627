"""Joint training of the grouping and linking heads, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import serialize
from .dataset import TAG_INDEX, TAGS, Dataset, Page, normalize_box
from .features import HashedTextEncoder, LayoutProjection, WindowConfig, concat_features, encode_text
from .grouper import BiLSTM, CRF, crf_loss, grouping_accuracy, tags_to_spans, viterbi_decode
from .linker import EntityEncoder, Relation, neg_sampling_loss, rank_candidates, sample_negatives, score_matrix
from .metrics import MetricReport, RankedQuery, aggregate, make_query
from .nn import Module, named_stream
from .optim import Adam, AdamState
from .tensor import NonFiniteError, Tape, Tensor, dropout

logger = logging.getLogger(__name__)

MODES = ("grouping_only", "linking_only", "joint")
CHECKPOINT_FORMAT = "formlink-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    window_length: int = 512
    window_stride: int = 256
    text_dim: int = 64
    vocab_buckets: int = 4096
    text_heads: int = 4
    layout_dim: int = 128
    lstm_layers: int = 2
    trm_layers: int = 3
    heads: int = 4
    ff_mult: int = 4
    max_entity_len: int = 512
    entity_positions: bool = True
    dropout: float = 0.0

    @property
    def feature_dim(self) -> int:
        return self.text_dim + self.layout_dim

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.window_length, self.window_stride)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    epochs: int = 10
    lr: float = 1e-3
    batch_size_pages: int = 4
    teacher_forcing_rate: float = 0.5
    negative_sample_size: int = 50
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.teacher_forcing_rate <= 1.0:
            raise ValueError(f"teacher_forcing_rate {self.teacher_forcing_rate} outside [0, 1]")
        if self.batch_size_pages < 1 or self.negative_sample_size < 1 or self.epochs < 0:
            raise ValueError("batch_size_pages and negative_sample_size must be >= 1, epochs >= 0")


class GroupLinkModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        if cfg.feature_dim % 2:
            raise ValueError(f"feature width {cfg.feature_dim} must be even for the BiLSTM")
        rng = named_stream(seed, "init")
        d = cfg.feature_dim
        self.config = cfg
        self.text = HashedTextEncoder(rng, cfg.text_dim, cfg.vocab_buckets, cfg.window_length, cfg.text_heads)
        self.layout = LayoutProjection(rng, cfg.layout_dim)
        self.bilstm = BiLSTM(rng, d, d // 2, cfg.lstm_layers)
        self.crf = CRF(rng, d)
        self.entity = EntityEncoder(rng, d, cfg.trm_layers, cfg.heads, cfg.ff_mult,
                                    cfg.max_entity_len, cfg.entity_positions)
        self.relation = Relation(rng, d)

    GROUPING_PREFIXES = ("bilstm.", "crf.")
    LINKING_PREFIXES = ("entity.", "relation.")

    def features(self, page: "PreparedPage", rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        text = encode_text(page.tokens, self.text, self.config.window)
        feats = concat_features(text, self.layout(page.geo))
        return dropout(feats, self.config.dropout, rng, training)

    def emissions(self, feats: Tensor) -> Tensor:
        return self.crf.emissions(self.bilstm(feats))

    def entity_scores(self, feats: Tensor, spans: Sequence[tuple[int, int]]) -> Tensor:
        return score_matrix(self.entity(feats, spans), self.relation.M)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


@dataclass
class PreparedPage:
    page: Page
    tokens: list[str]
    geo: np.ndarray
    tags: list[int]
    spans: list[tuple[int, int]]
    entity_ids: list[int]
    links: list[tuple[int, int]]  # (source id, target id)

    @property
    def has_gold(self) -> bool:
        return bool(self.tags)


def prepare_page(page: Page) -> PreparedPage:
    geo = np.array([normalize_box(w.box, page.width, page.height) for w in page.words], dtype=np.float64)
    return PreparedPage(
        page=page,
        tokens=[w.text for w in page.words],
        geo=geo.reshape(-1, 4),
        tags=[TAG_INDEX[t] for t in page.gold_tags],
        spans=[e.span for e in page.entities],
        entity_ids=[e.id for e in page.entities],
        links=page.links,
    )


@dataclass
class Counters:
    gold_source: int = 0
    predicted_source: int = 0
    unmatched_links: int = 0
    no_negatives: int = 0
    skipped_pages: int = 0

    def add(self, other: "Counters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


@dataclass
class StepResult:
    total: float
    l_crf: float
    l_neg: float
    counters: Counters


@dataclass
class StepRngs:
    teacher: np.random.Generator
    negatives: np.random.Generator
    dropout: np.random.Generator

    @classmethod
    def for_epoch(cls, seed: int, epoch: int) -> "StepRngs":
        return cls(named_stream(seed, "teacher-forcing", epoch), named_stream(seed, "negatives", epoch),
                   named_stream(seed, "dropout", epoch))


def linking_cases(page: PreparedPage, spans: Sequence[tuple[int, int]], k: int,
                  rng: np.random.Generator, counters: Counters) -> list[tuple[int, int, list[int]]]:
    """Positive (source, target) index pairs over ``spans`` with sampled negatives.

    Gold links whose endpoints are not among ``spans`` (exact match) are skipped.
    """
    where = {s: i for i, s in enumerate(spans)}
    span_of = dict(zip(page.entity_ids, page.spans))
    positives = []
    for a, b in page.links:
        i, j = where.get(span_of[a]), where.get(span_of[b])
        if i is None or j is None:
            counters.unmatched_links += 1
        else:
            positives.append((i, j))
    sources: dict[int, set[int]] = {}
    for i, j in positives:
        sources.setdefault(j, set()).add(i)
    cases = []
    for i, j in positives:
        negs = sample_negatives(j, sorted(sources[j]), range(len(spans)), k, rng)
        if not negs:
            counters.no_negatives += 1
            continue
        cases.append((i, j, negs))
    return cases


def train_step(batch: Sequence[PreparedPage], model: GroupLinkModel, optimizer: Adam | None,
               cfg: TrainConfig, rngs: StepRngs) -> StepResult:
    """Forward all pages on one tape, backpropagate L_CRF + L_Neg, take one optimizer step."""
    counters = Counters()
    grouping = cfg.mode in ("grouping_only", "joint")
    linking = cfg.mode in ("linking_only", "joint")
    with Tape() as tape:
        l_crf, l_neg = Tensor(0.0), Tensor(0.0)
        for page in batch:
            try:
                feats = model.features(page, rngs.dropout, training=True)
                emissions = None
                if grouping:
                    emissions = model.emissions(feats)
                    l_crf = l_crf + crf_loss(emissions, page.tags, model.crf)
                if not linking:
                    continue
                use_gold = cfg.mode == "linking_only" or rngs.teacher.random() < cfg.teacher_forcing_rate
                if use_gold:
                    counters.gold_source += 1
                    spans = page.spans
                else:
                    counters.predicted_source += 1
                    spans = tags_to_spans(viterbi_decode(emissions, model.crf))
                if len(spans) < 2:
                    counters.skipped_pages += 1
                    continue
                cases = linking_cases(page, spans, cfg.negative_sample_size, rngs.negatives, counters)
                if cases:
                    l_neg = l_neg + neg_sampling_loss(model.entity_scores(feats, spans), cases)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value on page {page.page.id}: {exc}") from exc
        total = l_crf + l_neg
        tape.backward(total, params=model.parameters())
    if optimizer is not None:
        optimizer.step()
    return StepResult(float(total.data), float(l_crf.data), float(l_neg.data), counters)


@dataclass
class EpochRecord:
    epoch: int
    l_crf: float
    l_neg: float
    total: float
    report: dict | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = ["grouping_accuracy", "map", "mrank", "hit1", "hit2", "hit5"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "l_crf", "l_neg", "total", *keys])
        for r in self.records:
            rep = r.report or {}
            writer.writerow([r.epoch, repr(r.l_crf), repr(r.l_neg), repr(r.total),
                             *("" if rep.get(k) is None else repr(rep[k]) for k in keys)])
        return buf.getvalue()


@dataclass
class TrainState:
    model: GroupLinkModel
    optimizer: Adam
    config: TrainConfig
    epoch: int = 0
    history: TrainHistory = field(default_factory=TrainHistory)


def new_state(cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig()) -> TrainState:
    model = GroupLinkModel(model_cfg, cfg.seed)
    return TrainState(model, Adam(model.parameters(), lr=cfg.lr), cfg)


def _prepared(dataset) -> list[PreparedPage]:
    pages = dataset.pages if isinstance(dataset, Dataset) else dataset
    return [p if isinstance(p, PreparedPage) else prepare_page(p) for p in pages]


def train(dataset, cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(),
          state: TrainState | None = None, eval_dataset=None,
          until_epoch: int | None = None) -> TrainState:
    """Run epochs ``state.epoch + 1 .. cfg.epochs`` (or ``until_epoch``).

    Every random draw comes from a per-epoch named stream of ``cfg.seed``, so
    resuming from a checkpoint reproduces an uninterrupted run exactly.
    """
    pages = _prepared(dataset)
    if not pages:
        raise ValueError("train: empty training split")
    state = state or new_state(cfg, model_cfg)
    eval_pages = _prepared(eval_dataset) if eval_dataset is not None else pages
    last = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    for epoch in range(state.epoch + 1, last + 1):
        order = named_stream(cfg.seed, "shuffle", epoch).permutation(len(pages))
        rngs = StepRngs.for_epoch(cfg.seed, epoch)
        sums = np.zeros(3)
        for step, start in enumerate(range(0, len(pages), cfg.batch_size_pages)):
            batch = [pages[i] for i in order[start:start + cfg.batch_size_pages]]
            try:
                res = train_step(batch, state.model, state.optimizer, cfg, rngs)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
            sums += (res.l_crf, res.l_neg, res.total)
        record = EpochRecord(epoch, float(sums[0]), float(sums[1]), float(sums[2]))
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            record.report = evaluate(state.model, eval_pages, True).to_dict()
        state.history.records.append(record)
        state.epoch = epoch
        logger.info("epoch %d: l_crf=%.4f l_neg=%.4f total=%.4f", epoch, *sums)
    return state


# -- inference ---------------------------------------------------------------

@dataclass
class PagePrediction:
    page_id: str
    tags: list[int]
    spans: list[tuple[int, int]]
    entity_ids: list[int]
    rankings: dict[int, list[tuple[int, float]]]
    queries: list[RankedQuery]
    correct: int = 0
    total: int = 0
    unmatched_queries: int = 0


def analyze_page(model: GroupLinkModel, page: PreparedPage, use_gold_segmentation: bool = False,
                 rank_all: bool = False) -> PagePrediction:
    """Decode tags, pick the span source, and rank candidate sources per target.

    Predicted spans that match a gold entity exactly take its id; the rest get
    fresh ids above the page's largest gold id.
    """
    feats = model.features(page)
    tags = viterbi_decode(model.emissions(feats), model.crf)
    pred = PagePrediction(page.page.id, tags, [], [], {}, [])
    if page.has_gold:
        pred.correct = int(sum(a == b for a, b in zip(tags, page.tags)))
        pred.total = len(tags)

    if use_gold_segmentation and page.has_gold:
        spans, ids = list(page.spans), list(page.entity_ids)
    else:
        spans = tags_to_spans(tags)
        gold_id = dict(zip(page.spans, page.entity_ids))
        fresh = max(page.entity_ids, default=-1) + 1
        ids = []
        for s in spans:
            if s in gold_id:
                ids.append(gold_id[s])
            else:
                ids.append(fresh)
                fresh += 1
    pred.spans, pred.entity_ids = spans, ids
    if len(spans) < 2:
        return pred

    S = model.entity_scores(feats, spans).data
    pos = {eid: i for i, eid in enumerate(ids)}
    score = lambda src, dst: S[pos[src], pos[dst]]
    sources: dict[int, set[int]] = {}
    for a, b in page.links:
        sources.setdefault(b, set()).add(a)
    targets = ids if rank_all or not page.has_gold else [t for t in page.entity_ids if t in sources]
    for t in targets:
        if t not in pos:
            pred.unmatched_queries += 1
            continue
        ranked = rank_candidates(t, ids, score)
        pred.rankings[t] = ranked
        if t in sources:
            gold = sources[t] & set(ids)
            if gold:
                pred.queries.append(make_query(t, [c for c, _ in ranked], gold))
            else:
                pred.unmatched_queries += 1
    return pred


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FORMLINK_THREADS", "1")))
    except ValueError:
        return 1


def predict_pages(model: GroupLinkModel, dataset, use_gold_segmentation: bool = False,
                  rank_all: bool = False) -> list[PagePrediction]:
    pages = _prepared(dataset)
    work = lambda p: analyze_page(model, p, use_gold_segmentation, rank_all)
    threads = min(_threads(), max(len(pages), 1))
    if threads == 1:
        return [work(p) for p in pages]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, pages))


def evaluate(model: GroupLinkModel, dataset, use_gold_segmentation: bool = True) -> MetricReport:
    """Grouping accuracy from Viterbi tags plus ranking metrics over gold-linked targets."""
    preds = predict_pages(model, dataset, use_gold_segmentation)
    if not preds:
        return MetricReport()
    total = sum(p.total for p in preds)
    accuracy = sum(p.correct for p in preds) / total if total else None
    report = aggregate([q for p in preds for q in p.queries], accuracy, len(preds))
    report.excluded += sum(p.unmatched_queries for p in preds)
    return report


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    tensors = {f"param/{name}": p.data for name, p in state.model.named_parameters()}
    opt = state.optimizer.state
    names = [name for name, _ in state.model.named_parameters()]
    for name, m, v in zip(names, opt.m, opt.v):
        tensors[f"adam.m/{name}"] = m
        tensors[f"adam.v/{name}"] = v
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tags": list(TAGS),
        "model_config": asdict(state.model.config),
        "train_config": asdict(state.config),
        "epoch": state.epoch,
        "optimizer": {"step": opt.step, "lr": state.optimizer.lr, "beta1": state.optimizer.beta1,
                      "beta2": state.optimizer.beta2, "eps": state.optimizer.eps},
        "history": [asdict(r) for r in state.history.records],
    }
    serialize.save(path, tensors, meta)


def load_checkpoint(path, model_cfg: ModelConfig | None = None) -> TrainState:
    """Rebuild the full training state; raises CheckpointError on any inconsistency."""
    try:
        tensors, meta = serialize.load(path)
    except serialize.ContainerError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint format/version "
                              f"{meta.get('format')!r} v{meta.get('version')!r}")
    if meta.get("tags") != list(TAGS):
        raise CheckpointError(f"{path}: tag set {meta.get('tags')} differs from {list(TAGS)}")
    try:
        saved_cfg = ModelConfig(**meta["model_config"])
        train_cfg = TrainConfig(**meta["train_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    if model_cfg is not None and model_cfg != saved_cfg:
        diff = {k: (getattr(saved_cfg, k), getattr(model_cfg, k)) for k in asdict(saved_cfg)
                if getattr(saved_cfg, k) != getattr(model_cfg, k)}
        raise CheckpointError(f"{path}: model config mismatch (checkpoint, requested): {diff}")

    model = GroupLinkModel(saved_cfg, train_cfg.seed)
    named = list(model.named_parameters())
    expected = {f"param/{n}" for n, _ in named}
    present = {k for k in tensors if k.startswith("param/")}
    if expected != present:
        raise CheckpointError(f"{path}: parameter names differ: missing {sorted(expected - present)[:5]}, "
                              f"unexpected {sorted(present - expected)[:5]}")
    for name, p in named:
        arr = tensors[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {p.shape}")
    for name, p in named:
        p.data = tensors[f"param/{name}"]

    o = meta.get("optimizer", {})
    optimizer = Adam(model.parameters(), lr=o.get("lr", train_cfg.lr), beta1=o.get("beta1", 0.9),
                     beta2=o.get("beta2", 0.999), eps=o.get("eps", 1e-8))
    if o.get("step", 0):
        try:
            optimizer.state = AdamState(int(o["step"]), [tensors[f"adam.m/{n}"] for n, _ in named],
                                        [tensors[f"adam.v/{n}"] for n, _ in named])
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing optimizer moment {exc}") from exc
    history = TrainHistory([EpochRecord(**r) for r in meta.get("history", [])])
    return TrainState(model, optimizer, train_cfg, int(meta.get("epoch", 0)), history)
