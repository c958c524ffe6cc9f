"""Command line: ``xrecosa {train,eval,generate,chat}``.

Runs are driven by an INI config file with ``[model]``, ``[train]``,
``[decode]`` and ``[paths]`` sections; command-line flags win over file values.
Relative paths in the config file resolve against the file's directory.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, TextIO

from . import tensor as T
from .corpus import (
    Vocab, build_vocab, expand_all, load_contexts, load_dialogues, load_references, make_batches,
)
from .decoding import DecodeConfig, decode, decode_many
from .errors import (
    ConfigError, ContractError, CorruptionError, FormatError, NumericError, VersionError,
)
from .metrics import evaluate_model
from .model import DECODER_MODES, ModelConfig, XReCoSa
from .trainer import TrainConfig, Trainer, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("xrecosa")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)  # "section.key" names set by file or flag


_PATH_KEYS = ("train", "dev", "test", "refs", "vocab", "checkpoint", "contexts", "replies", "report", "output")


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if value.strip().lower() in ("none", ""):
        return None
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if default is None:
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
    return value


def _apply(obj, section: str, items: dict):
    defaults = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in defaults:
            raise ConfigError(f"unknown key [{section}] {key}")
        try:
            changes[key] = _coerce(raw, defaults[key]) if isinstance(raw, str) else raw
        except ValueError:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from None
    return dataclasses.replace(obj, **changes)


def load_run_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Read the INI file (if any) and apply ``{"section.key": value}`` overrides on top."""
    sections = {"model": {}, "train": {}, "decode": {}, "paths": {}}
    base = Path(".")
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        parser = configparser.ConfigParser()
        parser.read(p, encoding="utf-8")
        base = p.parent
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}]")
            sections[name].update(parser[name])
        for key, value in sections["paths"].items():
            if key not in _PATH_KEYS:
                raise ConfigError(f"unknown key [paths] {key}")
            sections["paths"][key] = str(base / value) if value and not Path(value).is_absolute() else value
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        sections[section][key] = value
    model = _apply(ModelConfig(), "model", sections["model"])
    return RunConfig(
        explicit={f"{sec}.{k}" for sec, items in sections.items() for k in items},
        model=model,
        train=_apply(TrainConfig(), "train", sections["train"]),
        decode=_apply(DecodeConfig(), "decode", sections["decode"]),
        paths=dict(sections["paths"]),
    )


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config", default=None)
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides [train] seed)")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--decoder-mode", choices=DECODER_MODES, default=None, help="decoder memory routing")
    p.add_argument("--beam-width", type=int, default=None, help="beam width; 1 or unset means greedy")
    p.add_argument("--precision", choices=("f32", "f64"), default=None, help="float precision")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value, e.g. model.d=64")
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="xrecosa", description="X-ReCoSa dialogue generation", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _shared(p)
    p.add_argument("--train", default=None, help="training corpus (__eou__ format)")
    p.add_argument("--dev", default=None, help="dev corpus for validation NLL")
    p.add_argument("--vocab", default=None, help="existing vocab file; built from --train if absent")
    p.add_argument("--epochs", type=int, default=None, help="training epochs")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimiser steps")
    p.add_argument("--resume", action="store_true", default=False, help="continue from <checkpoint>/last")

    p = sub.add_parser("eval", help="decode a test set and report metrics", formatter_class=fmt)
    _shared(p)
    p.add_argument("--test", default=None, help="test corpus; with --refs each line is a context only")
    p.add_argument("--refs", default=None, help="TAB-separated multi-reference sidecar")
    p.add_argument("--replies", default=None, help="where to write decoded replies")
    p.add_argument("--report", default=None, help="where to write the metric report")
    p.add_argument("--vocab", default=None, help="vocab file expected to match the checkpoint")

    p = sub.add_parser("generate", help="reply to each context in a file", formatter_class=fmt)
    _shared(p)
    p.add_argument("--contexts", default=None, help="contexts, one per line, __eou__ separated")
    p.add_argument("--output", default=None, help="output file (default: stdout)")

    p = sub.add_parser("chat", help="interactive chat", formatter_class=fmt)
    _shared(p)
    return parser


def _overrides(args) -> dict:
    out = {
        "train.seed": args.seed,
        "paths.checkpoint": args.checkpoint,
        "train.precision": args.precision,
    }
    if args.decoder_mode:
        out["model.decoder_mode"] = args.decoder_mode
    if args.beam_width is not None:
        if args.beam_width < 1:
            raise UsageError("--beam-width must be >= 1")
        out["decode.beam_width"] = args.beam_width
        out["decode.strategy"] = "beam" if args.beam_width > 1 else "greedy"
    for name in ("train", "dev", "test", "refs", "vocab", "contexts", "replies", "report"):
        if getattr(args, name, None) is not None:
            out[f"paths.{name}"] = getattr(args, name)
    if getattr(args, "output", None) is not None:
        out["paths.output"] = args.output
    if getattr(args, "epochs", None) is not None:
        out["train.epochs"] = args.epochs
    if getattr(args, "max_steps", None) is not None:
        out["train.max_steps"] = args.max_steps
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key.split(".", 1)[0] not in ("model", "train", "decode", "paths"):
            raise UsageError(f"--set: unknown section in {key!r}")
        out[key] = value
    return out


def _require(paths: dict, key: str, what: str) -> Path:
    value = paths.get(key)
    if not value:
        raise UsageError(f"no {what} given (use --{key} or [paths] {key})")
    p = Path(value)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _log(out: TextIO, **fields) -> None:
    out.write(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()) + "\n")
    out.flush()


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(rc: RunConfig, resume: bool = False, out: TextIO = sys.stdout) -> int:
    train_path = _require(rc.paths, "train", "training corpus")
    ckpt = rc.paths.get("checkpoint")
    if not ckpt:
        raise UsageError("no checkpoint directory given (use --checkpoint or [paths] checkpoint)")
    ckpt = Path(ckpt)
    dialogues = load_dialogues(train_path)
    if rc.paths.get("vocab"):
        vocab = Vocab.load(_require(rc.paths, "vocab", "vocab file"))
    else:
        vocab = build_vocab(dialogues, rc.model.vocab_size)
    model_cfg = rc.model.replace(vocab_size=len(vocab))
    tc = dataclasses.replace(rc.train, checkpoint_dir=str(ckpt))
    ckpt.mkdir(parents=True, exist_ok=True)
    vocab.save(ckpt / "vocab.txt")

    with T.precision(tc.precision):
        samples = expand_all(dialogues, vocab, model_cfg.max_turns)
        batches = make_batches(samples, vocab, tc.batch_size, model_cfg.max_turns, model_cfg.max_sentence_len, tc.seed)
        dev_batches = None
        if rc.paths.get("dev"):
            dev = expand_all(load_dialogues(_require(rc.paths, "dev", "dev corpus")), vocab, model_cfg.max_turns)
            dev_batches = make_batches(dev, vocab, tc.batch_size, model_cfg.max_turns, model_cfg.max_sentence_len)

        optimizer = None
        if resume and (ckpt / "last" / "manifest.json").exists():
            model, optimizer, meta = load_checkpoint(ckpt / "last", vocab.hash, model_cfg)
        else:
            model = XReCoSa(model_cfg, seed=tc.seed)
        _log(out, event="start", dialogues=len(dialogues), samples=len(samples), batches=len(batches),
             vocab=len(vocab), params=model.params.num_parameters(), mode=model_cfg.decoder_mode,
             precision=tc.precision)
        trainer = Trainer(model, tc, optimizer, log=lambda line: _log(out, event="epoch", **_kv(line)),
                          vocab_hash=vocab.hash)
        history = trainer.fit(batches, dev_batches)
    final = history[-1] if history else {}
    _log(out, event="done", step=trainer.step, **{k: v for k, v in final.items() if k.endswith("nll")})
    return EXIT_OK


def _kv(line: str) -> dict:
    return dict(part.split("=", 1) for part in line.split())


def _resolve_checkpoint(rc: RunConfig) -> Path:
    ckpt = _require(rc.paths, "checkpoint", "checkpoint")
    if (ckpt / "manifest.json").exists():
        return ckpt
    for name in ("best", "last"):
        if (ckpt / name / "manifest.json").exists():
            return ckpt / name
    raise FileNotFoundError(f"no checkpoint manifest under {ckpt}")


def _load(rc: RunConfig):
    path = _resolve_checkpoint(rc)
    if rc.paths.get("vocab"):
        vocab_file = _require(rc.paths, "vocab", "vocab file")
    else:
        vocab_file = next((p / "vocab.txt" for p in (path, path.parent) if (p / "vocab.txt").exists()), None)
        if vocab_file is None:
            raise FileNotFoundError(f"no vocab.txt next to checkpoint {path}")
    vocab = Vocab.load(vocab_file)
    model, _, meta = load_checkpoint(path, expected_vocab_hash=vocab.hash)
    if "model.decoder_mode" in rc.explicit and model.cfg.decoder_mode != rc.model.decoder_mode:
        raise VersionError(f"checkpoint was trained with decoder_mode={model.cfg.decoder_mode}, "
                           f"not {rc.model.decoder_mode}")
    return model, vocab


def _decode_cfg(rc: RunConfig, model: XReCoSa) -> DecodeConfig:
    return dataclasses.replace(rc.decode, max_len=rc.decode.max_len or model.cfg.max_sentence_len)


def cmd_eval(rc: RunConfig, out: TextIO = sys.stdout) -> int:
    test_path = _require(rc.paths, "test", "test corpus")
    refs_path = _require(rc.paths, "refs", "reference file") if rc.paths.get("refs") else None
    model, vocab = _load(rc)
    cfg = _decode_cfg(rc, model)
    if refs_path is not None:
        raw_contexts = load_contexts(test_path)
        refs = load_references(refs_path)
        if len(raw_contexts) != len(refs):
            raise ContractError(f"{len(raw_contexts)} contexts in {test_path} but {len(refs)} reference lines")
        contexts = [[vocab.encode_text(u) for u in c] for c in raw_contexts]
    else:
        contexts, refs = [], []
        for d in load_dialogues(test_path):
            for j in range(1, len(d)):
                ctx = d.utterances[max(0, j - (model.cfg.max_turns - 1)):j]
                contexts.append([vocab.encode_text(u) for u in ctx])
                refs.append([d.utterances[j]])
    replies_path = rc.paths.get("replies") or str(_resolve_checkpoint(rc) / "replies.txt")
    with T.precision(model.params[next(iter(model.params))].dtype.type):
        report = evaluate_model(model, contexts, refs, vocab, cfg, replies_path=replies_path)
    text = report.to_text()
    if rc.paths.get("report"):
        Path(rc.paths["report"]).write_text(text, encoding="utf-8")
    out.write(text)
    return EXIT_OK


def cmd_generate(rc: RunConfig, out: TextIO = sys.stdout) -> int:
    ctx_path = _require(rc.paths, "contexts", "contexts file")
    model, vocab = _load(rc)
    cfg = _decode_cfg(rc, model)
    contexts = load_contexts(ctx_path)
    encoded = [[vocab.encode_text(u) for u in c] for c in contexts]
    live = [i for i, c in enumerate(encoded) if c]
    replies = [""] * len(encoded)
    for i, ids in zip(live, decode_many(model, [encoded[i] for i in live], cfg)):
        replies[i] = vocab.decode_text(ids)
    text = "".join(r + "\n" for r in replies)
    if rc.paths.get("output"):
        Path(rc.paths["output"]).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_OK


def cmd_chat(rc: RunConfig, stdin: TextIO = sys.stdin, out: TextIO = sys.stdout) -> int:
    """REPL with a rolling window of the last ``max_turns - 1`` turns.

    ``/reset`` clears the context, ``/context`` prints it and ``/quit`` exits.
    """
    model, vocab = _load(rc)
    cfg = _decode_cfg(rc, model)
    window = model.cfg.max_turns - 1
    turns: List[str] = []
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            turns.clear()
            out.write("[context cleared]\n")
            continue
        if line == "/context":
            out.write("".join(f"[{i}] {t}\n" for i, t in enumerate(turns)))
            continue
        turns = (turns + [line])[-window:]
        reply = vocab.decode_text(decode(model, [vocab.encode_text(t) for t in turns], cfg))
        out.write(reply + "\n")
        out.flush()
        turns = (turns + [reply])[-window:] if reply else turns
    return EXIT_OK


def main(argv: Optional[List[str]] = None, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None) -> int:
    out = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="level=%(levelname)s logger=%(name)s msg=%(message)s")
    try:
        rc = load_run_config(args.config, _overrides(args))
        if args.command == "train":
            return cmd_train(rc, resume=args.resume, out=out)
        if args.command == "eval":
            return cmd_eval(rc, out=out)
        if args.command == "generate":
            return cmd_generate(rc, out=out)
        return cmd_chat(rc, stdin=stdin or sys.stdin, out=out)
    except (UsageError, ConfigError) as exc:
        print(f"xrecosa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, FormatError, VersionError, CorruptionError, ContractError,
            UnicodeDecodeError) as exc:
        print(f"xrecosa: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"xrecosa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
