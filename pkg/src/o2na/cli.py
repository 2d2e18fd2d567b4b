"""Command-line front end: synth, train, generate, eval, bench.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Every artifact written here embeds the effective config and seed (delimited
files as '#'-prefixed header lines, trace files as a leading sentinel
record, checkpoints as metadata records).
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import tensor as T
from .config import RunConfig, load_config
from .decoding import ControlSpec, ar_decode, decode_o2na, npd_decode
from .errors import (ConfigError, DataError, EmptyTargetError, FormatError,
                     NumericError, ShapeError, VocabError)
from .metrics import EvalCorpus, EvalEntry, bleu, cider, diversity, rouge_l
from .model import ModelDims, O2NAModel
from .baseline import ARModel
from .train import load_trained, save_trained, train_ar, train_o2na

log = logging.getLogger("o2na")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="o2na", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic toy-world corpus")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--videos", type=int, default=2000)
    sp.add_argument("--captions", type=int, default=3)
    sp.add_argument("--sigma", type=float, default=0.1)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--feature-dim", type=int, default=64)
    sp.add_argument("--seed", type=int, default=1)

    tp = sub.add_parser("train", help="train the captioner (or the AR baseline)")
    tp.add_argument("--features", required=True)
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--objects", help="object vocabulary file, one word per line")
    tp.add_argument("--config", help="flat key=value config file")
    tp.add_argument("--out", default="model.o2nackpt")
    tp.add_argument("--arch", choices=["o2na", "ar"], default="o2na")
    for key, typ in (("epochs", int), ("batch-size", int), ("lr", float),
                     ("seed", int), ("d-h", int), ("heads", int), ("d-ff", int),
                     ("n-layers", int), ("dropout", float), ("min-count", int),
                     ("l-max", int), ("mask-ratio", float)):
        tp.add_argument(f"--{key}", type=typ, default=None)
    tp.add_argument("--no-plots", action="store_true")

    gp = sub.add_parser("generate", help="decode captions with object control")
    gp.add_argument("--checkpoint", required=True)
    gp.add_argument("--features", required=True)
    gp.add_argument("--manifest", help="supplies video ids (positional otherwise)")
    gp.add_argument("--config")
    gp.add_argument("--out", default="generated", help="output prefix")
    gp.add_argument("--objects", help="comma-separated object words forced on")
    gp.add_argument("--length", type=int, default=None)
    gp.add_argument("--iterations", type=int, default=None)
    gp.add_argument("--gamma", type=float, default=None)
    gp.add_argument("--lock-objects", action="store_true")
    gp.add_argument("--npd", type=int, default=None,
                    help="decode this many candidate lengths and keep the best")
    gp.add_argument("--teacher", help="AR checkpoint for candidate re-scoring")
    gp.add_argument("--no-dedup", action="store_true")
    gp.add_argument("--limit", type=int, default=None, help="decode only the first K videos")

    ep = sub.add_parser("eval", help="score generated captions")
    ep.add_argument("--input", help="JSON lines of {video_id, hypothesis, references[]}")
    ep.add_argument("--pred", help="captions.tsv from generate (needs --manifest)")
    ep.add_argument("--manifest", help="reference manifest for --pred")
    ep.add_argument("--train-manifest", help="training manifest, enables Novel")
    ep.add_argument("--checkpoint", help="supplies the lexicon for Vocab Usage")
    ep.add_argument("--config")
    ep.add_argument("--out", default="report.txt")
    ep.add_argument("--unique-words", action="store_true",
                    help="word-level Unique instead of caption-level")
    ep.add_argument("--no-plots", action="store_true")

    bp = sub.add_parser("bench", help="AR-vs-NA latency per target length")
    bp.add_argument("--lengths", default="5,15,25")
    bp.add_argument("--repeats", type=int, default=5)
    bp.add_argument("--videos", type=int, default=16)
    bp.add_argument("--iterations", type=int, default=None)
    bp.add_argument("--checkpoint", help="trained captioner (random weights otherwise)")
    bp.add_argument("--ar-checkpoint", help="trained baseline (random weights otherwise)")
    bp.add_argument("--config")
    bp.add_argument("--seed", type=int, default=None)
    bp.add_argument("--out", default="bench", help="output prefix")
    bp.add_argument("--no-plots", action="store_true")
    return p


def _resolve_config(args, flag_keys):
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for flag, key in flag_keys.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg.apply_overrides(overrides)
    if getattr(args, "no_plots", False):
        cfg.set("plots", False)
    return cfg


def _config_header(cfg):
    return "".join(f"# {line}\n" for line in cfg.to_text().strip().splitlines())


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = dg.WorldSpec(n_videos=args.videos, captions_per_video=args.captions,
                        noise_sigma=args.sigma, n_frames=args.frames,
                        feature_dim=args.feature_dim, seed=args.seed)
    features, manifest = dg.synth_corpus(spec)
    dg.save_features(out / "features.o2nafeat", features)
    dg.write_manifest(out / "manifest.jsonl", manifest)
    (out / "objects.txt").write_text("\n".join(spec.objects) + "\n", encoding="utf-8")
    n_caps = sum(len(r["captions"]) for r in manifest)
    print(f"wrote {len(manifest)} videos / {n_caps} captions to {out}")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

_TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
                "seed": "seed", "d_h": "d_h", "heads": "heads", "d_ff": "d_ff",
                "n_layers": "n_layers", "dropout": "dropout",
                "min_count": "min_count", "l_max": "l_max", "mask_ratio": "mask_ratio"}


def cmd_train(args):
    cfg = _resolve_config(args, _TRAIN_FLAGS)
    features = dg.load_features(args.features)
    manifest = dg.read_manifest(args.manifest)
    object_words = dg.read_word_list(args.objects) if args.objects else None
    vocab, obj_vocab = dg.build_vocab(manifest, min_count=cfg.min_count,
                                      object_words=object_words)
    cfg.features, cfg.manifest = args.features, args.manifest
    cfg.checkpoint = args.out
    log.info("training %s: %d videos, |D|=%d, %d objects", args.arch,
             len(manifest), len(vocab), len(obj_vocab))

    def progress(record):
        pretty = "  ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch")
        log.info("epoch %d  %s", record["epoch"], pretty)

    trainer = train_o2na if args.arch == "o2na" else train_ar
    t0 = time.perf_counter()
    model, history = trainer(cfg, features, manifest, vocab, obj_vocab, progress=progress)
    log.info("trained in %.1f s", time.perf_counter() - t0)
    save_trained(args.out, model, vocab, obj_vocab, cfg, args.arch)

    base = Path(args.out).with_suffix("")
    loss_path = Path(f"{base}.loss.tsv")
    keys = [k for k in history[0] if k != "epoch"]
    with open(loss_path, "w", encoding="utf-8") as f:
        f.write(_config_header(cfg))
        f.write("epoch\t" + "\t".join(keys) + "\n")
        for rec in history:
            f.write(str(rec["epoch"]) + "\t" +
                    "\t".join(f"{rec[k]:.17g}" for k in keys) + "\n")
    if cfg.plots:
        from . import plots
        plots.loss_curves(history, f"{base}.loss.png")
    print(f"checkpoint: {args.out}")
    print(f"loss log:   {loss_path}")
    return 0


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

def cmd_generate(args):
    model, vocab, obj_vocab, cfg, arch = load_trained(args.checkpoint)
    if arch != "o2na":
        raise DataError(f"{args.checkpoint} holds an '{arch}' model; "
                        "generate needs the parallel captioner")
    if args.config:
        cfg = load_config(args.config)
    if args.iterations is not None:
        cfg.set("iterations", args.iterations)
    if args.gamma is not None:
        cfg.set("gamma", args.gamma)
    features = dg.load_features(args.features)
    n = model.dims.n_frames
    if features.shape[1] != 2 * n or features.shape[2] != model.dims.d_image:
        raise DataError(f"feature geometry {features.shape[1:]} does not match the "
                        f"checkpoint ({2 * n} rows x {model.dims.d_image})")
    ids = [r["video_id"] for r in dg.read_manifest(args.manifest)] if args.manifest \
        else [f"v{i:05d}" for i in range(features.shape[0])]
    if len(ids) != features.shape[0]:
        raise DataError(f"manifest lists {len(ids)} videos, feature file has "
                        f"{features.shape[0]}")

    forced = frozenset(obj_vocab.ids_for([w.strip() for w in args.objects.split(",")])) \
        if args.objects else frozenset()
    spec = ControlSpec(forced_on=forced, gamma=cfg.gamma, length=args.length,
                       iterations=cfg.iterations, mask_ratio=cfg.mask_ratio,
                       lock_objects=args.lock_objects or cfg.lock_objects,
                       npd_k=args.npd or cfg.npd_k,
                       dedup=not args.no_dedup and cfg.dedup)
    teacher = None
    if args.teacher:
        teacher, _, _, _, teacher_arch = load_trained(args.teacher)
        if teacher_arch != "ar":
            raise DataError(f"{args.teacher} is not an AR checkpoint")

    limit = args.limit or features.shape[0]
    cap_path = Path(f"{args.out}.captions.tsv")
    trace_path = Path(f"{args.out}.trace.jsonl")
    sentinel = {"video_id": "__config__", "objects": [], "length": 0, "draft": [],
                "iterations": [], "final": [], "stage_ms": {},
                "config": cfg.to_text(), "seed": cfg.seed}
    with open(cap_path, "w", encoding="utf-8") as caps, \
            open(trace_path, "w", encoding="utf-8") as traces:
        caps.write(_config_header(cfg))
        traces.write(json.dumps(sentinel) + "\n")
        for i in range(limit):
            v = model.project_features(features[i: i + 1, :n], features[i: i + 1, n:])
            if args.npd or args.teacher:
                tokens, trace, _ = npd_decode(model, v, spec, video_id=ids[i],
                                              teacher=teacher)
            else:
                tokens, trace = decode_o2na(model, v, spec, video_id=ids[i])
            caption = " ".join(vocab.decode(tokens))
            caps.write(f"{ids[i]}\t{caption}\n")
            traces.write(json.dumps(trace.to_record(vocab)) + "\n")
    print(f"captions: {cap_path}")
    print(f"trace:    {trace_path}")
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _tokens(x):
    return dg.tokenize(x) if isinstance(x, str) else list(x)


def read_eval_jsonl(path):
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("video_id") == "__config__":
                continue
            for key in ("video_id", "hypothesis", "references"):
                if key not in rec:
                    raise FormatError(f"{path}:{lineno}: missing '{key}'")
            entries.append(EvalEntry(rec["video_id"], _tokens(rec["hypothesis"]),
                                     [_tokens(r) for r in rec["references"]]))
    return entries


def read_captions_tsv(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            vid, _, caption = line.rstrip("\n").partition("\t")
            out[vid] = dg.tokenize(caption)
    return out


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.input:
        entries = read_eval_jsonl(args.input)
    elif args.pred and args.manifest:
        hyps = read_captions_tsv(args.pred)
        refs = {r["video_id"]: r["captions"] for r in dg.read_manifest(args.manifest)}
        missing = sorted(set(hyps) - set(refs))
        if missing:
            raise DataError(f"predictions for unknown videos: {missing[:5]}")
        entries = [EvalEntry(vid, hyp, [_tokens(c) for c in refs[vid]])
                   for vid, hyp in hyps.items()]
    else:
        raise UsageError("eval needs --input, or --pred together with --manifest")
    train_caps = set()
    if args.train_manifest:
        for rec in dg.read_manifest(args.train_manifest):
            train_caps.update(tuple(_tokens(c)) for c in rec["captions"])
    corpus = EvalCorpus(entries, train_captions=train_caps)

    lexicon = None
    if args.checkpoint:
        _, vocab, _, _, _ = load_trained(args.checkpoint)
        lexicon = [w for w in vocab.words if not w.startswith("[")]
    novel, unique, usage = diversity(corpus, lexicon=lexicon,
                                     unique_words=args.unique_words)
    report = {
        "n_videos": len(entries),
        "bleu_4": bleu(corpus, n=4),
        "rouge_l": rouge_l(corpus),
        # conventional 0-10 metric scaled to the usual table presentation
        "cider": cider(corpus) * 10.0 if len(entries) >= 2 else float("nan"),
        "novel": novel,
        "unique": unique,
        "vocab_usage": usage,
    }
    lines = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
             for k, v in report.items()]
    lines += [f"config.{line}" for line in cfg.to_text().strip().splitlines()]
    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if cfg.plots and not args.no_plots:
        from . import plots
        plots.metric_bars(report, str(Path(args.out).with_suffix("")) + ".png")
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def _random_models(cfg):
    dims = ModelDims(n_objects=24, vocab_size=64, d_h=cfg.d_h, n_heads=cfg.heads,
                     d_ff=cfg.d_ff, n_layers=cfg.n_layers, n_frames=cfg.n_frames,
                     d_image=cfg.d_image, d_motion=cfg.d_motion, l_max=cfg.l_max,
                     dropout=0.0)
    na = O2NAModel(dims, mask_id=2, pad_id=0, rng=np.random.default_rng(cfg.seed))
    ar = ARModel(dims, pad_id=0, rng=np.random.default_rng(cfg.seed + 1))
    return na, ar


def cmd_bench(args):
    cfg = _resolve_config(args, {"iterations": "iterations", "seed": "seed"})
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}")
    if not lengths or any(l < 1 for l in lengths):
        raise UsageError(f"--lengths needs positive integers, got {args.lengths!r}")
    na = ar = None
    if args.checkpoint:
        na, _, _, na_cfg, arch = load_trained(args.checkpoint)
        if arch != "o2na":
            raise DataError(f"{args.checkpoint} is not a parallel-captioner checkpoint")
    if args.ar_checkpoint:
        ar, _, _, _, arch = load_trained(args.ar_checkpoint)
        if arch != "ar":
            raise DataError(f"{args.ar_checkpoint} is not an AR checkpoint")
    if na is None or ar is None:
        rand_na, rand_ar = _random_models(cfg)
        na = na or rand_na
        ar = ar or rand_ar
    if max(lengths) > na.dims.l_max:
        raise UsageError(f"--lengths includes {max(lengths)} beyond l_max={na.dims.l_max}")

    rng = np.random.default_rng(cfg.seed)
    videos = [T.constant(rng.normal(size=(1, 2 * na.dims.n_frames, na.dims.d_h)))
              for _ in range(args.videos)]
    rows = []
    for length in lengths:
        spec = ControlSpec(length=length, iterations=cfg.iterations, dedup=False)
        decode_o2na(na, videos[0], spec)  # warm-up
        ar_decode(ar, videos[0], max_len=length, min_len=length)
        na_times, ar_times = [], []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            for v in videos:
                decode_o2na(na, v, spec)
            na_times.append((time.perf_counter() - t0) / len(videos))
            t0 = time.perf_counter()
            for v in videos:
                ar_decode(ar, v, max_len=length, min_len=length)
            ar_times.append((time.perf_counter() - t0) / len(videos))
        na_ms = float(np.median(na_times) * 1000)
        ar_ms = float(np.median(ar_times) * 1000)
        rows.append({"length": length, "na_ms": na_ms, "ar_ms": ar_ms,
                     "na_vps": 1000.0 / na_ms, "ar_vps": 1000.0 / ar_ms})
    table = Path(f"{args.out}.bench.tsv")
    with open(table, "w", encoding="utf-8") as f:
        f.write(_config_header(cfg))
        f.write("length\tna_ms\tar_ms\tna_vps\tar_vps\n")
        for r in rows:
            f.write(f"{r['length']}\t{r['na_ms']:.3f}\t{r['ar_ms']:.3f}"
                    f"\t{r['na_vps']:.2f}\t{r['ar_vps']:.2f}\n")
    header = f"{'length':>6} {'na_ms':>10} {'ar_ms':>10} {'na_vps':>9} {'ar_vps':>9}"
    print(header)
    for r in rows:
        print(f"{r['length']:>6} {r['na_ms']:>10.3f} {r['ar_ms']:>10.3f} "
              f"{r['na_vps']:>9.2f} {r['ar_vps']:>9.2f}")
    if cfg.plots:
        from . import plots
        plots.latency_figure(rows, f"{args.out}.bench.png")
    print(f"table: {table}")
    return 0


# --------------------------------------------------------------------------

def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
                   "eval": cmd_eval, "bench": cmd_bench}[args.command]
        return handler(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, FormatError, VocabError, ShapeError,
            EmptyTargetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
