"""Command-line entry points: ``gen-corpus``, ``train``, ``synth`` and ``eval``.

Failures exit with status 1 (2 for usage errors) and print a single line
``error kind=<kind> message=<json string>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_corpus_config, load_run_config
from .errors import ConfigError, ParseError, SingVAEError, ValidationError
from .score import MusicScore, generate_synthetic_corpus, parse_corpus, write_corpus, write_wav

log = logging.getLogger("singvae")


def cmd_gen_corpus(args) -> None:
    cfg = load_corpus_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    entries = generate_synthetic_corpus(cfg)
    try:
        manifest = write_corpus(entries, args.out)
    except OSError as exc:
        raise ValidationError(f"cannot write corpus to {args.out}: {exc}") from exc
    print(f"wrote {len(entries)} songs to {manifest}")


def _run_config(args):
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    return cfg


def cmd_train(args) -> None:
    from .training import prepare_corpus, train

    cfg = _run_config(args)
    if cfg.data is None:
        raise ConfigError("run config has no 'data' manifest")
    entries = parse_corpus(cfg.data, cfg.spectrogram.hop_size)
    clips = prepare_corpus(entries, cfg)
    steps = args.steps if args.steps is not None else cfg.train.steps
    every = max(1, steps // 20)

    def progress(state, report):
        if state.step % every == 0:
            log.info("step %d  total_g %.4f  recon %.4f  adv_d %.4f", state.step, report.total_g,
                     report.recon, report.adv_d)

    state, _ = train(cfg, clips, steps=steps, out_dir=cfg.out_dir, callback=progress)
    print(f"trained to step {state.step}; checkpoints and losses.csv in {cfg.out_dir}")


def read_score(path) -> MusicScore:
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read score {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from exc
    if not isinstance(rec, dict):
        raise ParseError(f"{path}: score must be a JSON object")
    missing = [k for k in ("phonemes", "note_pitch", "note_dur") if k not in rec]
    if missing:
        raise ParseError(f"{path}: missing keys {missing}")
    return MusicScore.from_record(rec).without_durations()


def _load_state(args, checkpoint):
    from .training import load_checkpoint

    expected = load_run_config(args.config) if getattr(args, "config", None) else None
    return load_checkpoint(checkpoint, expected=expected)


def cmd_synth(args) -> None:
    from .training import synthesize

    state = _load_state(args, args.checkpoint)
    score = read_score(args.score)
    audio, d_hat, lf0 = synthesize(score, state, args.noise_scale, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, audio)
    sidecar = {
        "durations": [int(d) for d in d_hat],
        "hop_size": state.config.spectrogram.hop_size,
        "samples": len(audio),
        "lf0": None if lf0 is None else [float(v) for v in np.round(lf0, 6)],
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar) + "\n")
    print(f"wrote {out} ({len(audio)} samples, {int(d_hat.sum())} frames)")


def cmd_eval(args) -> None:
    from .evaluate import evaluate

    state = _load_state(args, args.checkpoint)
    baseline = _load_state(argparse.Namespace(), args.baseline) if args.baseline else None
    data = args.data or state.config.data
    if data is None:
        raise ConfigError("no test manifest given (--data)")
    entries = parse_corpus(data, state.config.spectrogram.hop_size)
    report = evaluate(state, entries, args.out, baseline=baseline, noise_scale=args.noise_scale, seed=args.seed)
    print(report.summary_text(), end="")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error kind=usage message={json.dumps(message)}", file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="singvae", description="Score-to-waveform singing synthesis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="write a synthetic singing corpus")
    g.add_argument("--config", required=True, help="corpus generator YAML")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the generator seed")
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True, help="run config YAML")
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--steps", type=int, help="override the step budget")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="render a score to WAV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--score", required=True, help="JSON object with phonemes, note_pitch, note_dur")
    s.add_argument("--out", required=True, help="output WAV; a .json sidecar is written next to it")
    s.add_argument("--noise-scale", type=float, default=0.667)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="refuse checkpoints whose architecture differs from this config")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="objective metrics and plots on a labeled test manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="test manifest (defaults to the run config's data)")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--baseline", help="second checkpoint for the duration-error comparison")
    e.add_argument("--noise-scale", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", help="refuse checkpoints whose architecture differs from this config")
    e.set_defaults(func=cmd_eval)
    return p


def _fail(kind: str, message: str) -> int:
    print(f"error kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SingVAEError as exc:
        return _fail(exc.kind, str(exc))
    except FloatingPointError as exc:
        return _fail("nonfinite", str(exc))
    except OSError as exc:
        return _fail("io", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
