"""``loraudio`` command line: synthesize corpora, train, adapt, evaluate, inspect.

Exit codes: 0 success, 1 validation error (bad flags, config, inputs),
2 runtime error (fingerprint mismatch, corrupt files, I/O failures).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import CliConfig, derive_seed
from .corpus import Corpus, load_corpus, save_corpus, split_corpus, synth_corpus
from .errors import LoraudioError, ValidationError
from .lora import load_adapters, matrix_shape, read_adapter_header, save_adapters
from .senet import MAGIC as CKPT_MAGIC
from .senet import load_checkpoint, read_checkpoint_tensors, save_checkpoint
from .trainer import SequencePlan, evaluate, finetune, run_sequence, train_adapter, train_base

log = logging.getLogger("loraudio")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; those are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def load_config(args) -> CliConfig:
    overrides = dict(getattr(args, "set", None) or [])
    for flag, key in (("seed", "seed"), ("mode", "mode"), ("rank", "rank"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "paper_literal_init", False):
        overrides["paper_literal_init"] = "true"
    return CliConfig.load(args.config, overrides)


def _existing(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{flag}: no such file or directory {p}")
    return p


def _corpus(args, cfg: CliConfig) -> Corpus:
    root = _existing(args.data, "--data")
    if not (root / "protocol.txt").is_file():
        raise ValidationError(f"--data: {root} has no protocol.txt")
    return load_corpus(root, getattr(args, "tag", None), expected_rate=int(cfg.get("sample_rate")))


def build_plan(cfg: CliConfig, mode: str) -> SequencePlan:
    corpora = [(tag, synth_corpus(cfg.corpus(tag, algos))) for tag, algos in cfg.sequence()]
    return SequencePlan(corpora, mode, float(cfg.get("train_fraction")), derive_seed(cfg.seed, "split"), str(cfg.get("note")))


# -- commands --------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = load_config(args)
    plan = dict(cfg.sequence())
    if args.tag is not None:
        if args.algorithms:
            plan = {args.tag: tuple(a.strip() for a in args.algorithms.split(","))}
        elif args.tag in plan:
            plan = {args.tag: plan[args.tag]}
        else:
            raise ValidationError(f"--tag {args.tag!r} is not in the configured sequence; pass --algorithms")
    out = Path(args.out)
    split_seed = derive_seed(cfg.seed, "split")
    for tag, algos in plan.items():
        corpus = synth_corpus(cfg.corpus(tag, algos))
        train, held = split_corpus(corpus, float(cfg.get("train_fraction")), split_seed)
        save_corpus(train, out / tag / "train")
        save_corpus(held, out / tag / "eval")
        print(f"{tag}: {'+'.join(algos)} train={len(train)} eval={len(held)} -> {out / tag}")
    return 0


def cmd_train_base(args) -> int:
    cfg = load_config(args)
    corpus = _corpus(args, cfg)
    model, result = train_base(corpus, cfg.train(), cfg.model(), cfg.lfcc())
    size = save_checkpoint(model, args.out)
    print(f"base: {model.num_params()} params, {size} bytes, final loss {result.final_loss:.6f} -> {args.out}")
    return 0


def cmd_train_adapter(args) -> int:
    cfg = load_config(args)
    base = load_checkpoint(_existing(args.base, "--base"), cfg.model().stem_stride)
    corpus = _corpus(args, cfg)
    aset, result = train_adapter(base, corpus, cfg.train(mode="lora"), cfg.lfcc(), tag=args.tag)
    size = save_adapters(aset, args.out)
    print(f"adapters {args.tag}: {aset.num_params()} params, {size} bytes, final loss {result.final_loss:.6f} -> {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args)
    base = load_checkpoint(_existing(args.base, "--base"), cfg.model().stem_stride)
    corpus = _corpus(args, cfg)
    model, result = finetune(base, corpus, cfg.train(mode="finetune"), cfg.lfcc())
    size = save_checkpoint(model, args.out)
    print(f"finetuned: {size} bytes, final loss {result.final_loss:.6f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    base = load_checkpoint(_existing(args.base, "--base"), cfg.model().stem_stride)
    adapters = load_adapters(_existing(args.adapters, "--adapters"), base) if args.adapters else None
    corpus = _corpus(args, cfg)
    eer, records = evaluate(base, adapters, corpus, cfg.lfcc(), score_path=args.out, jobs=args.jobs)
    print(f"EER {100 * eer:.4f}% over {len(records)} utterances -> {args.out}")
    return 0


def cmd_sequence(args) -> int:
    cfg = load_config(args)
    mode = str(cfg.get("mode"))
    result = run_sequence(build_plan(cfg, mode), cfg.train(), cfg.model(), cfg.lfcc(), out_dir=args.out)
    print(result.report.to_text(), end="")
    print(f"base fingerprint {result.base_fingerprint_end:016x} -> {args.out}")
    return 0


def _table(rows: list[tuple[str, str, int]]) -> str:
    width = max([len(r[0]) for r in rows] + [4])
    lines = [f"{'name'.ljust(width)}  {'shape':>18}  {'bytes':>10}"]
    lines += [f"{n.ljust(width)}  {s:>18}  {b:>10}" for n, s, b in rows]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    path = _existing(args.file, "file")
    magic = path.read_bytes()[:8]
    if magic == CKPT_MAGIC:
        arrays = read_checkpoint_tensors(path)
        rows = [(n, "x".join(map(str, a.shape)), 4 * a.size) for n, a in arrays.items()]
        print(_table(rows))
        print(f"checkpoint {path}: {len(rows)} tensors, {sum(a.size for a in arrays.values())} params, {path.stat().st_size} bytes")
        return 0
    version, fp = read_adapter_header(path)
    size = path.stat().st_size
    print(f"adapter file {path}: version {version}, base fingerprint {fp:016x}, {size} bytes")
    if args.base is None:
        print("pass --base to list pairs and the storage ratio")
        return 0
    base_path = _existing(args.base, "--base")
    base = load_checkpoint(base_path)
    aset = load_adapters(path, base)
    rows = []
    for name, pair in aset.pairs.items():
        d_out, d_in = matrix_shape(base[name].shape)
        rows.append((f"{name}.A", f"{d_out}x{pair.rank}", 4 * pair.A.data.size))
        rows.append((f"{name}.B", f"{pair.rank}x{d_in}", 4 * pair.B.data.size))
    print(_table(rows))
    base_size = base_path.stat().st_size
    print(f"pairs {len(aset.pairs)}, adapter params {aset.num_params()}, base params {base.num_params()}")
    print(f"ratio adapter_bytes/base_bytes = {size}/{base_size} = {size / base_size:.6f}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loraudio", description="Low-rank adaptation for synthetic fake-audio detection.")
    parser.add_argument("--version", action="version", version=f"loraudio {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_, data=True, out_help="output path"):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", required=True, help="key = value run configuration")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        if data:
            p.add_argument("--data", required=True, help="corpus directory holding protocol.txt and wav/")
        return p

    p = command("synth-data", cmd_synth_data, "write synthetic corpora as train/eval directories", data=False, out_help="output directory")
    p.add_argument("--tag", help="only this corpus")
    p.add_argument("--algorithms", help="comma-separated spoofing algorithms for --tag")

    p = command("train-base", cmd_train_base, "train the source model", out_help="checkpoint path")
    p.add_argument("--epochs", type=int)

    p = command("train-adapter", cmd_train_adapter, "train one adapter set on a frozen base", out_help="adapter file path")
    p.add_argument("--base", required=True)
    p.add_argument("--tag", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--paper-literal-init", action="store_true", help="start with A = B = 0 (never trains)")

    p = command("finetune", cmd_finetune, "continue full training of a base on a new corpus", out_help="checkpoint path")
    p.add_argument("--base", required=True)
    p.add_argument("--epochs", type=int)

    p = command("eval", cmd_eval, "score a corpus and print its EER", out_help="score file path")
    p.add_argument("--base", required=True)
    p.add_argument("--adapters")
    p.add_argument("--jobs", type=int, default=1)

    p = command("sequence", cmd_sequence, "run the full corpus sequence and write the report", data=False, out_help="output directory")
    p.add_argument("--mode", choices=("lora", "finetune"))
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--paper-literal-init", action="store_true")

    p = sub.add_parser("inspect", help="list tensors of a checkpoint or adapter file")
    p.set_defaults(func=cmd_inspect)
    p.add_argument("file")
    p.add_argument("--base", help="base checkpoint; needed to size adapter pairs and report the storage ratio")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"loraudio {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (LoraudioError, OSError) as exc:
        print(f"loraudio {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
