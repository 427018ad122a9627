"""Command-line entry point: ``formlink {synth,train,eval,predict}``.

Exit codes: 0 success, 1 partial failure (predict), 2 invalid config, input or
checkpoint, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .dataset import (
    TAGS,
    DatasetLoadError,
    Page,
    PageParseError,
    SynthConfigError,
    WordBox,
    gen_synthetic,
    load_funsd,
    parse_page,
    reading_order,
    write_funsd,
)
from .trainer import (
    MODES,
    CheckpointError,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    predict_pages,
    prepare_page,
    save_checkpoint,
    train,
)

SCHEMA_VERSION = 1
CHECKPOINT_NAME = "checkpoint.flt"
HISTORY_NAME = "history.csv"
REPORT_NAME = "report.json"
PREDICTIONS_NAME = "predictions.json"

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "mode", None) is not None:
        out["train.mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        out["train.seed" if args.command == "train" else "synth.seed"] = args.seed
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = args.out or (cfg.output_dir if cfg else None)
    if not out:
        raise UsageError("no output directory: pass --out or set output.dir")
    return Path(out)


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# -- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_set = gen_synthetic(cfg.synth, cfg.synth_seed, "train")
    test_set = gen_synthetic(cfg.synth, cfg.synth_seed, "test", cfg.synth.test_pages)
    try:
        for ds in (train_set, test_set):
            write_funsd(ds, out)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    for ds in (train_set, test_set):
        c = ds.counts()
        print(f"{ds.split}: {c['forms']} pages, {c['boxes']} words, {c['entities']} entities, {c['links']} links")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    errors = []
    if not cfg.data_root:
        errors.append("data.root is not set")
    elif not Path(cfg.data_root).is_dir():
        errors.append(f"data.root does not exist: {cfg.data_root}")
    if args.resume and not Path(args.resume).is_file():
        errors.append(f"--resume checkpoint not found: {args.resume}")
    try:
        out = _out_dir(args, cfg)
    except UsageError as exc:
        errors.append(str(exc))
    if errors:
        raise ConfigError(errors)

    dataset = load_funsd(cfg.data_root, cfg.train_split)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, cfg.model)
        if state.config != cfg.train:
            # Only the epoch budget may grow on resume.
            if {**vars(state.config), "epochs": 0} != {**vars(cfg.train), "epochs": 0}:
                raise CheckpointError(f"{args.resume}: training config differs from --config")
            state.config = cfg.train
    state = train(dataset, cfg.train, cfg.model, state=state)

    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / CHECKPOINT_NAME)
    _write_text(out / HISTORY_NAME, state.history.to_csv())
    last = state.history.records[-1] if state.history.records else None
    if last is not None:
        print(f"epoch {last.epoch}: l_crf={last.l_crf:.6f} l_neg={last.l_neg:.6f} total={last.total:.6f}")
    print(f"wrote {out / CHECKPOINT_NAME} and {out / HISTORY_NAME}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _config(args) if args.config else None
    root = args.data or (cfg.data_root if cfg else None)
    split = args.split or (cfg.eval_split if cfg else "test")
    errors = []
    if not root:
        errors.append("no dataset: pass --data or set data.root")
    elif not Path(root).is_dir():
        errors.append(f"dataset root does not exist: {root}")
    if not Path(args.checkpoint).is_file():
        errors.append(f"checkpoint not found: {args.checkpoint}")
    if errors:
        raise ConfigError(errors)

    state = load_checkpoint(args.checkpoint, cfg.model if cfg else None)
    dataset = load_funsd(root, split, allow_empty=True)
    report = evaluate(state.model, dataset, use_gold_segmentation=args.gold_segmentation)
    source = "gold" if args.gold_segmentation else "predicted"
    print(f"split={split} segmentation={source}" + ("  (empty)" if report.empty else ""))
    print(report.table())
    out = args.out or (cfg.output_dir if cfg else None)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_text(Path(out) / REPORT_NAME, report.to_json() + "\n")
        print(f"wrote {Path(out) / REPORT_NAME}")
    else:
        print(report.to_json())
    return EXIT_OK


# -- predict -----------------------------------------------------------------

def page_from_words(record: dict, page_id: str, filename: str) -> Page:
    """Unannotated page from ``{"words": [{"text", "box"}], "width", "height"}`` in reading order."""
    raw = record.get("words")
    if not isinstance(raw, list) or not raw:
        raise PageParseError(filename, "'words' must be a non-empty list")
    words = []
    for w in raw:
        box = w.get("box") if isinstance(w, dict) else None
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise PageParseError(filename, f"word with malformed box: {w!r:.80}")
        try:
            x1, y1, x2, y2 = (int(round(float(v))) for v in box)
        except (TypeError, ValueError):
            raise PageParseError(filename, f"non-numeric box {box!r}") from None
        text = str(w.get("text", "")).strip()
        if text:
            words.append(WordBox(text, (min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)), -1))
    if not words:
        raise PageParseError(filename, "no non-empty words")
    words = [words[i] for i in reading_order(words)]
    width = record.get("width") or max(w.box[2] for w in words)
    height = record.get("height") or max(w.box[3] for w in words)
    if not isinstance(width, int) or not isinstance(height, int) or width <= 0 or height <= 0:
        raise PageParseError(filename, f"bad page size {width!r} x {height!r}")
    return Page(page_id, width, height, tuple(words), (), ())


def read_input_pages(path: Path) -> tuple[list[Page], list[dict]]:
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    pages, errors = [], []
    for f in files:
        try:
            try:
                record = json.loads(f.read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise PageParseError(f.name, f"unreadable: {exc}") from None
            if isinstance(record, dict) and "form" in record:
                pages.append(parse_page(record, f.stem, f.name, stats=Counter()))
            elif isinstance(record, dict) and "words" in record:
                pages.append(page_from_words(record, f.stem, f.name))
            else:
                raise PageParseError(f.name, "neither a FUNSD 'form' nor a 'words' list")
        except PageParseError as exc:
            errors.append({"file": f.name, "error": exc.reason})
    return pages, errors


def prediction_report(preds, pages: list[Page], errors: list[dict]) -> dict:
    out_pages = []
    for pred, page in zip(preds, pages):
        entry = {
            "page_id": pred.page_id,
            "words": [w.text for w in page.words],
            "tags": [TAGS[t] for t in pred.tags],
            "spans": [list(s) for s in pred.spans],
            "entities": [{"id": i, "span": list(s)} for i, s in zip(pred.entity_ids, pred.spans)],
            "rankings": [
                {"target": t, "candidates": [{"id": c, "score": s} for c, s in ranked]}
                for t, ranked in sorted(pred.rankings.items())
            ],
        }
        if pred.total:
            entry["accuracy"] = pred.correct / pred.total
        out_pages.append(entry)
    return {"schema_version": SCHEMA_VERSION, "pages": out_pages, "errors": errors}


def cmd_predict(args) -> int:
    inp = Path(args.input)
    errors = []
    if not inp.exists():
        errors.append(f"input not found: {inp}")
    if not Path(args.checkpoint).is_file():
        errors.append(f"checkpoint not found: {args.checkpoint}")
    if errors:
        raise ConfigError(errors)
    cfg = _config(args) if args.config else None
    state = load_checkpoint(args.checkpoint, cfg.model if cfg else None)
    pages, bad = read_input_pages(inp)
    preds = predict_pages(state.model, [prepare_page(p) for p in pages],
                          use_gold_segmentation=args.gold_segmentation)
    report = prediction_report(preds, pages, bad)
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    out = args.out or (cfg.output_dir if cfg else None)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_text(Path(out) / PREDICTIONS_NAME, text)
        print(f"wrote {Path(out) / PREDICTIONS_NAME}: {len(pages)} pages, {len(bad)} errors")
    else:
        sys.stdout.write(text)
    for e in bad:
        print(f"error: {e['file']}: {e['error']}", file=sys.stderr)
    return EXIT_PARTIAL if bad else EXIT_OK


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formlink", description="Word grouping and entity linking on forms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", metavar="PATH", help="INI run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth", help="write a synthetic dataset in FUNSD layout")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    common(p)
    p.add_argument("--mode", choices=MODES, help="training scenario (overrides train.mode)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--data", metavar="ROOT", help="dataset root (overrides data.root)")
    p.add_argument("--split", choices=("train", "test"), help="split to evaluate (overrides data.eval_split)")
    p.add_argument("--gold-segmentation", action="store_true", help="rank over gold entity spans")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="tag, group and rank links on input pages")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--input", required=True, metavar="PATH", help="JSON page file or directory of them")
    p.add_argument("--gold-segmentation", action="store_true", help="use annotated spans when present")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (UsageError, DatasetLoadError, PageParseError, SynthConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
