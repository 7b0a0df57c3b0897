"""``avgen`` command line: corpus synthesis, training, enhancement, evaluation, diagnostics, spectrogram images.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error, 3 failed diagnostic.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conditioner import ConditionerError, read_embeddings
from .corpus import read_meta
from .experiment import ConfigError, ExperimentConfig, dump_json, evaluate_dirs, load_config, write_corpus
from .sampler import SamplerError, enhance
from .scorenet import ScoreNet
from .signal import SignalError, Waveform, read_wav, stft, write_wav
from .training import MODES, TrainingError, derangement, load_items, new_trainer, validate

log = logging.getLogger("avgen")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIAG = 0, 1, 2, 3
FULL_SCALE_MAG = 127.5  # |STFT| peak of a unit sinusoid under the 510-point Hann window


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--workers", type=int, default=1)
    if "steps" in flags:
        p.add_argument("--steps", type=int, help="optimizer steps (train) or sampler steps (enhance)")
    if "corrector" in flags:
        p.add_argument("--corrector", type=int, help="corrector steps per predictor step")
    if "mode" in flags:
        p.add_argument("--mode", choices=MODES)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-corpus", help="write a synthetic clean/noisy/labels/emb corpus")
    p.add_argument("out_dir")
    _common(p)

    p = sub.add_parser("train", help="train a score network on a corpus")
    p.add_argument("corpus")
    p.add_argument("out_ckpt")
    p.add_argument("--log", help="JSON-lines training log (default: <out_ckpt>.log.jsonl)")
    p.add_argument("--val-split", default="test")
    _common(p, "steps", "mode")

    p = sub.add_parser("enhance", help="enhance one file or a whole corpus split")
    p.add_argument("ckpt")
    p.add_argument("in_wav", nargs="?")
    p.add_argument("in_ave", nargs="?", help="embedding file; '-' for none")
    p.add_argument("out_wav", nargs="?")
    p.add_argument("--corpus", help="enhance every noisy file of a corpus split instead")
    p.add_argument("--split", default="test")
    p.add_argument("--out-dir")
    _common(p, "steps", "corrector", "mode")

    p = sub.add_parser("evaluate", help="score estimates against corpus references")
    p.add_argument("ref_dir", help="corpus directory")
    p.add_argument("est_dir", help="directory of <id>.wav estimates")
    p.add_argument("out_json")
    p.add_argument("--split", default="test")
    _common(p)

    p = sub.add_parser("diagnose", help="run an oracle suite")
    p.add_argument("kind")
    p.add_argument("--out", help="also write the JSON report here")
    _common(p)

    p = sub.add_parser("plot-spec", help="log-magnitude spectrogram as a binary PGM")
    p.add_argument("in_wav")
    p.add_argument("out_image")
    _common(p)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, mode=getattr(args, "mode", None))


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)


# -- commands ----------------------------------------------------------------------------


def cmd_synth_corpus(args) -> int:
    cfg = _config(args)
    meta = write_corpus(cfg, args.out_dir, force=args.force)
    print(json.dumps({"config_hash": cfg.hash, "files": len(meta.items), "out_dir": str(args.out_dir)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args).with_overrides(train_steps=args.steps)
    cfg = replace(cfg, train=replace(cfg.train, workers=args.workers))
    out = Path(args.out_ckpt)
    _check_out(out, args.force)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    _check_out(log_path, args.force)
    items = load_items(args.corpus, "train")
    trainer = new_trainer(cfg.net, cfg.sde, cfg.train)
    with open(log_path, "w") as fh:
        trainer.fit(items, log_fh=fh)
    val_items = load_items(args.corpus, args.val_split)
    val_loss = validate(val_items, trainer.params, cfg.net, cfg.sde, cfg.train)
    meta = {
        "config_hash": cfg.hash,
        "corpus_hash": read_meta(args.corpus).config_hash,
        "mode": cfg.train.mode,
        "step": trainer.state.step,
        "val_loss": val_loss,
        "val_split": args.val_split,
    }
    save_checkpoint(out, trainer.params, trainer.state, cfg.to_json(), meta)
    print(json.dumps(meta, sort_keys=True))
    return EXIT_OK


def _enhance_one(y: Waveform, emb, params, cfg: ExperimentConfig, seed: int):
    net = ScoreNet(cfg.net)
    return enhance(y, emb, params, net, cfg.sde, replace(cfg.sampler, seed=seed))


def _file_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def cmd_enhance(args) -> int:
    params, _, cfg, meta = load_checkpoint(args.ckpt)
    if args.config:
        user = load_config(args.config)
        if user.net != cfg.net or user.sde != cfg.sde:
            raise UsageError("config network/SDE settings do not match the checkpoint")
        cfg = replace(cfg, sampler=user.sampler)
    cfg = cfg.with_overrides(seed=args.seed, sampler_steps=args.steps, corrector=args.corrector)
    mode = args.mode or meta.get("mode", "av")
    if args.corpus:
        if args.in_wav or not args.out_dir:
            raise UsageError("corpus mode takes --corpus and --out-dir and no positional files")
        return _enhance_corpus(args, params, cfg, mode, meta)
    if not (args.in_wav and args.in_ave and args.out_wav):
        raise UsageError("enhance needs CKPT IN_WAV IN_AVE OUT_WAV (or --corpus/--out-dir)")
    out = Path(args.out_wav)
    _check_out(out, args.force)
    y = read_wav(args.in_wav)
    emb = None if mode == "audio_only" or args.in_ave == "-" else read_embeddings(args.in_ave)
    x, report = _enhance_one(y, emb, params, cfg, cfg.sampler.seed)
    write_wav(out, _clip(x))
    log.info("enhanced %s in %.2fs", args.in_wav, report["seconds"])
    dump_json(out.with_name(out.name + ".json"), _report(cfg, meta, mode, report))
    return EXIT_OK


def _clip(w: Waveform) -> Waveform:
    return Waveform(np.clip(w.samples, -1.0, 32767 / 32768))


def _report(cfg, meta, mode, report) -> dict:
    return {
        "config_hash": cfg.hash,
        "ckpt_config_hash": meta.get("config_hash"),
        "mode": mode,
        "nfe": report["nfe"],
        "steps": report["steps"],
        "corrector_steps": report["corrector_steps"],
        "seed": cfg.sampler.seed,
    }


def _enhance_corpus(args, params, cfg, mode, meta) -> int:
    corpus, out_dir = Path(args.corpus), Path(args.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise FileExistsError(f"{out_dir} is not empty (use --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    items = sorted(read_meta(corpus).split(args.split), key=lambda it: it.id)
    if not items:
        raise UsageError(f"no items in split {args.split!r}")
    embs = [read_embeddings(corpus / "emb" / f"{it.id}.ave") for it in items]
    if mode == "audio_only":
        embs = [None] * len(items)
    elif mode == "shuffled_emb":
        perm = derangement(len(items), np.random.default_rng([cfg.sampler.seed, 7]))
        embs = [embs[j] for j in perm]

    def work(i):
        it = items[i]
        y = read_wav(corpus / "noisy" / f"{it.id}.wav")
        emb = embs[i].fit_frames(round(len(y) / 640)) if mode == "shuffled_emb" else embs[i]
        x, rep = _enhance_one(y, emb, params, cfg, _file_seed(cfg.sampler.seed, i))
        write_wav(out_dir / f"{it.id}.wav", _clip(x))
        log.info("%s: %d NFE in %.2fs", it.id, rep["nfe"], rep["seconds"])
        return it.id, rep

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            results = list(pool.map(work, range(len(items))))
    else:
        results = [work(i) for i in range(len(items))]
    manifest = _report(cfg, meta, mode, results[0][1])
    manifest["files"] = [r[0] for r in results]
    manifest["split"] = args.split
    dump_json(out_dir / "enhance.json", manifest)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out_json)
    _check_out(out, args.force)
    est_dir = Path(args.est_dir)
    if args.config:
        config_hash = _config(args).hash
    elif (est_dir / "enhance.json").exists():
        config_hash = json.loads((est_dir / "enhance.json").read_text())["config_hash"]
    else:
        config_hash = read_meta(args.ref_dir).config_hash
    cfg = load_config(args.config)
    result = evaluate_dirs(
        args.ref_dir, est_dir, args.split, config_hash, workers=args.workers, alphabet=(cfg.corpus.alphabet_size, cfg.corpus.alphabet_seed)
    )
    dump_json(out, result)
    print(json.dumps({"mean": result["mean"], "pooled_wer": result["pooled_wer"]}, sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.kind not in diagnostics.KINDS:
        raise UsageError(f"unknown diagnostic kind {args.kind!r}; expected one of {', '.join(diagnostics.KINDS)}")
    report = diagnostics.run(args.kind, seed=args.seed or 0)
    report["config_hash"] = _config(args).hash
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        _check_out(out, args.force)
        out.write_text(text + "\n")
    return EXIT_OK if report["passed"] else EXIT_DIAG


def spectrogram_image(w: Waveform) -> np.ndarray:
    """uint8 image, rows = frequency bins with the highest bin on top, columns = frames."""
    mag = np.abs(stft(w).data)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / FULL_SCALE_MAG)
    db = np.clip(np.nan_to_num(db, neginf=-60.0), -60.0, 0.0)
    img = np.round((db + 60.0) * (255.0 / 60.0)).astype(np.uint8)
    return img[::-1]


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_plot_spec(args) -> int:
    out = Path(args.out_image)
    _check_out(out, args.force)
    write_pgm(out, spectrogram_image(read_wav(args.in_wav)))
    return EXIT_OK


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "plot-spec": cmd_plot_spec,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"avgen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, ConditionerError, SignalError) as exc:
        print(f"avgen: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, SamplerError, ValueError) as exc:
        print(f"avgen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
