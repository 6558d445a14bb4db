"""Command-line entry point: ``lingspot <command> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, snapshot
from .config import ConfigError, RunConfig, load_config
from .corpus import SOURCE_TAGS, SourceFile, build_corpus, read_corpus, write_corpus, write_desk_sources
from .evaluation import Instance, Lexicon, analyze, match_detections, read_predictions, write_predictions, PredictionRecord
from .plm import build_plm, plm_meta, pretrain, write_metrics
from .render import load_sample, render_suite, save_sample
from .spotter import build_spotter, infer, init_from_plm, spotter_from_checkpoint, train
from .vocab import build_vocabulary

logger = logging.getLogger("lingspot")

OUTPUT_ROOT_ENV = "LINGSPOT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# Output directories ----------------------------------------------------------

def version_stamp() -> dict:
    return {"lingspot": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


def prepare_output(cfg: RunConfig, command: str, out: str | None, overwrite: bool) -> Path:
    if out is None:
        out = cfg.output_dir
    if out is None:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / f"{command}-seed{cfg.seed}"
    path = Path(out)
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {path} is not empty (pass --overwrite to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg.dump(path / "config.yaml")
    (path / "version.json").write_text(json.dumps({**version_stamp(), "command": command}, indent=1) + "\n")
    return path


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, files: list[Path], extra: dict | None = None) -> None:
    entries = {str(f.relative_to(directory)): file_hash(f) for f in sorted(files)}
    (directory / "manifest.json").write_text(json.dumps({"files": entries, **(extra or {})}, indent=1) + "\n")


# Commands --------------------------------------------------------------------

def corpus_from_config(cfg: RunConfig, vocab, workdir: Path):
    """Corpus entries per config; synthetic desk sources are written under ``workdir``."""
    sources = [SourceFile(Path(s["path"]), s["tag"]) for s in cfg.corpus.sources]
    for s in sources:
        if s.tag not in SOURCE_TAGS:
            raise UsageError(f"unknown source tag {s.tag!r}")
    if not sources:
        if not cfg.corpus.synthetic:
            raise UsageError("no corpus sources configured")
        sources = write_desk_sources(workdir, seed=cfg.seed)
    entries = build_corpus(sources, vocab, window=cfg.corpus.window, max_unknown_ratio=cfg.corpus.max_unknown_ratio,
                           max_tokens=cfg.plm.max_length)
    if cfg.corpus.max_entries is not None:
        entries = entries[: cfg.corpus.max_entries]
    return entries


def scenes_from_config(cfg: RunConfig, entries, seed: int | None = None):
    """Rendered scenes whose words come from the configured corpus source."""
    sc = cfg.scenes
    words = [e.text for e in entries if e.source == sc.word_source and " " not in e.text]
    extra = {"occlusion": sc.occlusion, "blur": tuple(sc.blur)} if sc.degraded else {}
    return render_suite(words, sc.count, seed=cfg.seed if seed is None else seed,
                        words_per_scene=tuple(sc.words_per_scene), height=sc.height, width=sc.width,
                        noise=sc.noise, **extra)


def cmd_build_corpus(cfg: RunConfig, args) -> int:
    vocab = build_vocabulary(cfg.vocab.build())
    if not cfg.corpus.sources and not cfg.corpus.synthetic:
        raise UsageError("no corpus sources configured")
    out = prepare_output(cfg, "build-corpus", args.out, args.overwrite)
    entries = corpus_from_config(cfg, vocab, out / "sources")
    write_corpus(entries, out / "corpus.tsv")
    scenes = scenes_from_config(cfg, entries)
    for i, s in enumerate(scenes):
        save_sample(s, out / "scenes", f"{i:05d}")
    files = [out / "corpus.tsv", *sorted((out / "scenes").iterdir())]
    write_manifest(out, files, {"entries": len(entries), "scenes": len(scenes), "seed": cfg.seed,
                                "vocab_hash": vocab.fingerprint()})
    print(f"wrote {len(entries)} corpus entries and {len(scenes)} scenes to {out}")
    return EXIT_OK


def _load_scenes(data: Path):
    scene_dir = data / "scenes" if (data / "scenes").is_dir() else data
    names = sorted(p.stem for p in scene_dir.glob("*.json"))
    if not names:
        raise UsageError(f"no scenes found under {data}")
    return names, [load_sample(scene_dir, n) for n in names]


def cmd_pretrain_plm(cfg: RunConfig, args) -> int:
    vocab = build_vocabulary(cfg.vocab.build())
    corpus_path = Path(args.corpus)
    if corpus_path.is_dir():
        corpus_path = corpus_path / "corpus.tsv"
    try:
        entries = read_corpus(corpus_path)
    except OSError as exc:
        raise UsageError(f"cannot read corpus {corpus_path}: {exc}") from exc
    torch.manual_seed(cfg.seed)
    model = build_plm(cfg.plm.model(vocab.size), seed=cfg.seed)
    start = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        model.load_state_dict(ck.state_dict())
        start = int(ck.meta.get("steps", 0))
    out = prepare_output(cfg, "pretrain-plm", args.out, args.overwrite)
    sched = cfg.plm.schedule(cfg.seed)
    if sched.epochs == 0:
        ckpt, metrics = snapshot(model, plm_meta(model, vocab, start)), []
    else:
        ckpt, metrics = pretrain(entries, model, vocab, sched, log=lambda r: logger.info("%s", r), start_step=start)
    save_checkpoint(ckpt, out / "checkpoint")
    write_metrics(metrics, out / "metrics.jsonl")
    print(f"checkpoint at {out / 'checkpoint'} after {ckpt.meta['steps']} steps")
    return EXIT_OK


def cmd_train_spotter(cfg: RunConfig, args) -> int:
    vocab = build_vocabulary(cfg.vocab.build())
    init = args.init or cfg.spotter.init
    if init not in ("plm", "random"):
        raise UsageError(f"unknown init {init!r}")
    plm = None
    if init == "plm":
        if not args.plm:
            raise UsageError("init=plm needs --plm CHECKPOINT")
        try:
            plm = load_checkpoint(args.plm)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load PLM checkpoint: {exc}") from exc
    _, samples = _load_scenes(Path(args.data))
    model = build_spotter(cfg.spotter_config(vocab.size), seed=cfg.seed)
    if plm is not None:
        init_from_plm(plm, model, vocab)
    out = prepare_output(cfg, "train-spotter", args.out, args.overwrite)
    ckpt, metrics = train(samples, model, vocab, cfg.spotter.schedule(cfg.seed), log=lambda r: logger.info("%s", r))
    ckpt.meta["init"] = init
    save_checkpoint(ckpt, out / "checkpoint")
    write_metrics(metrics, out / "metrics.jsonl")
    print(f"spotter checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    vocab = build_vocabulary(cfg.vocab.build())
    model = spotter_from_checkpoint(load_checkpoint(args.model))
    names, samples = _load_scenes(Path(args.data))
    lexicon = _lexicon(cfg, args)
    out = prepare_output(cfg, "infer", args.out, args.overwrite)
    results = infer(samples, model, vocab, lexicon=lexicon)
    records = [PredictionRecord(n, d.polygon.tolist(), d.transcription, d.score)
               for n, r in zip(names, results) for d in r.detections]
    write_predictions(records, out / "predictions.jsonl")
    print(f"{len(records)} detections in {len(names)} images -> {out / 'predictions.jsonl'}")
    return EXIT_OK


def _pairings(pred_path: str, names, samples, lexicon, cfg: RunConfig):
    preds = read_predictions(pred_path)
    out = []
    for n, s in zip(names, samples):
        gts = [Instance(i.polygon(), i.transcription) for i in s.instances]
        out.append(match_detections(preds.get(n, []), gts, cfg.evaluation.iou_threshold, lexicon,
                                    cfg.evaluation.case_sensitive))
    return out


def _lexicon(cfg: RunConfig, args) -> Lexicon | None:
    mode = args.mode or cfg.evaluation.lexicon
    path = args.lexicon or cfg.evaluation.lexicon_file
    if args.lexicon not in (None, "none") and args.mode is None and mode == "none":
        mode = "absolute"  # a word list given on the command line implies the default threshold
    if path in (None, "none") or mode == "none":
        return None
    return Lexicon.from_file(path, mode)


def _train_words(path: str | None) -> list[str] | None:
    if path is None:
        return None
    p = Path(path)
    if p.is_dir():
        p = p / "corpus.tsv"
    if p.suffix == ".tsv":
        return [e.text for e in read_corpus(p)]
    return [w.strip() for w in p.read_text(encoding="utf-8").splitlines() if w.strip()]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    names, samples = _load_scenes(Path(args.annotations))
    lexicon = _lexicon(cfg, args)
    pairings = _pairings(args.predictions, names, samples, lexicon, cfg)
    report = analyze(pairings, _train_words(args.train_words), cfg.evaluation.case_sensitive)
    out = prepare_output(cfg, "evaluate", args.out, args.overwrite)
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.render() + "\n", encoding="utf-8")
    print(report.render())
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    if args.compare:
        if not (args.annotations and args.predictions):
            raise UsageError("--compare needs --annotations and --predictions")
        names, samples = _load_scenes(Path(args.annotations))
        lexicon = _lexicon(cfg, args)
        a = _pairings(args.predictions, names, samples, lexicon, cfg)
        b = _pairings(args.compare, names, samples, lexicon, cfg)
        report = analyze(a, _train_words(args.train_words), cfg.evaluation.case_sensitive, other=b)
        text = report.render()
        if args.out:
            out = prepare_output(cfg, "report", args.out, args.overwrite)
            report.save(out / "comparison.json")
            (out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    elif args.report:
        path = Path(args.report)
        if path.is_dir():
            path = path / "report.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read report {path}: {exc}") from exc
        text = json.dumps(data, indent=2)
        txt = path.with_suffix(".txt")
        if txt.exists():
            text = txt.read_text(encoding="utf-8").rstrip()
    else:
        raise UsageError("report needs --report or --compare")
    print(text)
    return EXIT_OK


COMMANDS = {
    "build-corpus": cmd_build_corpus,
    "pretrain-plm": cmd_pretrain_plm,
    "train-spotter": cmd_train_spotter,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lingspot", description="Character-level PLM plus scene text spotter.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. plm.epochs=10")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("build-corpus", help="build the pretraining corpus and render scenes")
    common(p)
    p = sub.add_parser("pretrain-plm", help="denoising pretraining of the character PLM")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus.tsv or a build-corpus directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="PLM checkpoint to continue from")
    p = sub.add_parser("train-spotter", help="train the spotter on rendered scenes")
    common(p)
    p.add_argument("--data", required=True, help="build-corpus directory or scene directory")
    p.add_argument("--plm", help="PLM checkpoint directory")
    p.add_argument("--init", choices=["plm", "random"])
    p.add_argument("--steps", type=int)
    p = sub.add_parser("infer", help="run a trained spotter over scenes")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lexicon", help="word list for post-hoc correction, or 'none'")
    p.add_argument("--mode", choices=["absolute", "normalized", "none"])
    for name, helptext in (("evaluate", "score predictions"), ("report", "render or compare reports")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--predictions", required=(name == "evaluate"))
        p.add_argument("--annotations", required=(name == "evaluate"), help="scene directory with JSON sidecars")
        p.add_argument("--lexicon", help="word list file, or 'none'")
        p.add_argument("--mode", choices=["absolute", "normalized", "none"])
        p.add_argument("--train-words", help="training words (file or corpus) for the OOV split")
        if name == "report":
            p.add_argument("--report", help="report.json (or its directory) to render")
            p.add_argument("--compare", help="second predictions file for a two-model comparison")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"plm.epochs={args.epochs}")
    if getattr(args, "steps", None) is not None:
        overrides.append(f"spotter.steps={args.steps}")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, OSError, ValueError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
