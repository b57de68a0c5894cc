"""Command-line driver.

Subcommands map onto the two learning phases plus data and reporting::

    latentbank generate   --out corpus.json
    latentbank train      --method m3 --corpus train.json --out runs/m3
    latentbank accumulate --params runs/m3/params_m3.json --corpus eval.json --out banks/m3
    latentbank evaluate   --params runs/m3/params_m3.json --corpus eval.json --out report

Settings are merged as defaults < ``--config`` JSON file < ``LATENTBANK_SEED``
(seed only) < explicit flags.  Every command writes the merged settings to
``config.json`` in its output directory.

Exit codes: 0 success, 2 invalid flags, 3 missing or invalid inputs,
4 training divergence, 5 bank/parameter dimension mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import adapters as A
from . import corpus as C
from . import evaluation as E
from . import store
from . import training as TR
from .adapters import MemoryHyper, MethodId
from .backbone import BackboneConfig, init_frozen

log = logging.getLogger("latentbank")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED, EXIT_DIMS = 0, 2, 3, 4, 5
SEED_ENV = "LATENTBANK_SEED"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    preset: str = "toy"
    capacity: int = 1
    # memory
    gamma: float = 0.95
    n_P: int | None = None
    d_h: int | None = None
    S: int | None = None
    k: int | None = None
    b_g: float = -4.0
    # training
    lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_steps: int = 200
    grad_clip: float = 1.0
    epochs: int = 10
    batch: int = 2
    grad_accum: int = 8
    tbptt_window: int = 8
    max_answer_len: int = 4
    # backbone
    vocab_size: int = 64
    d: int = 32
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 2
    max_len: int = 64
    # evaluation
    eps: float = 1e-6
    lag_scale: float = 1.0
    max_steps: int = 4
    min_len: int = 1

    def hyper(self) -> MemoryHyper:
        base = MemoryHyper.toy(self.capacity) if self.preset == "toy" else MemoryHyper.paper(self.capacity)
        over = {k: getattr(self, k) for k in ("n_P", "d_h", "S", "k") if getattr(self, k) is not None}
        return replace(base, gamma=self.gamma, b_g=self.b_g, **over)

    def train_config(self) -> TR.TrainConfig:
        names = {f.name for f in fields(TR.TrainConfig)}
        return TR.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.vocab_size, d=self.d, n_layers_enc=self.n_layers_enc,
            n_layers_dec=self.n_layers_dec, n_heads=self.n_heads, max_len=self.max_len, seed=self.seed,
        )

    def buckets(self) -> E.LagBuckets:
        return E.LagBuckets.scaled(self.lag_scale)


CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def merge_config(flags: dict, config_path: str | None, environ=os.environ) -> RunConfig:
    values: dict = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as e:
            raise CliError(EXIT_INPUT, f"cannot read config file {config_path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise CliError(EXIT_USAGE, f"config file {config_path} is not valid JSON: {e.msg}") from e
        if not isinstance(raw, dict):
            raise CliError(EXIT_USAGE, "config file must hold a JSON object")
        unknown = sorted(set(raw) - CONFIG_FIELDS)
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown config keys: {', '.join(unknown)}")
        values.update(raw)
    if environ.get(SEED_ENV):
        try:
            values["seed"] = int(environ[SEED_ENV])
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"{SEED_ENV} must be an integer") from e
    values.update({k: v for k, v in flags.items() if k in CONFIG_FIELDS and v is not None})
    try:
        cfg = RunConfig(**values)
        if cfg.preset not in ("toy", "paper"):
            raise ValueError("preset must be 'toy' or 'paper'")
        cfg.hyper()
        cfg.train_config()
        cfg.backbone_config()
        cfg.buckets()
    except (TypeError, ValueError) as e:
        raise CliError(EXIT_USAGE, f"invalid settings: {e}") from e
    return cfg


def _methods(names) -> list[MethodId]:
    out = []
    for n in names or []:
        for part in n.split(","):
            try:
                out.append(MethodId.parse(part))
            except ValueError as e:
                raise CliError(EXIT_USAGE, str(e)) from e
    return out


def _load_corpus(path) -> list[C.Conversation]:
    try:
        return C.load_json(path)
    except C.CorpusError as e:
        raise CliError(EXIT_INPUT, f"corpus error: {e}") from e


def _load_params(path):
    try:
        return store.load_params(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_INPUT, f"missing parameter file {path}") from e
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(EXIT_INPUT, f"unreadable parameter file {path}: {e}") from e


def _echo(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {"command": command, "config": asdict(cfg), **(extra or {})}
    store.write_atomic(out / "config.json", json.dumps(doc, indent=1, sort_keys=True))


_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


def bank_name(conversation_id: str) -> str:
    return _SAFE.sub("_", conversation_id) + ".lmb"


# -- commands -----------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig) -> int:
    shares = None
    if args.lag_distribution:
        try:
            shares = tuple(float(x) for x in args.lag_distribution.split(","))
        except ValueError as e:
            raise CliError(EXIT_USAGE, "--lag-distribution takes comma-separated numbers") from e
    try:
        spec = C.SyntheticSpec(
            n_sessions=args.sessions,
            turns_per_session=args.turns_per_session,
            n_facts=args.facts,
            distractor_ratio=args.distractor_ratio,
            lag_distribution=shares,
            lag_edges=cfg.buckets().edges,
            seed=cfg.seed,
        )
        convs = C.generate_corpus(spec, args.conversations, args.prefix)
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"invalid synthetic spec: {e}") from e
    out = Path(args.out)
    store.write_atomic(out, C.dump_json(convs))
    _echo(out.parent, "generate", cfg, {"spec": asdict(spec), "conversations": args.conversations})
    log.info("wrote %d conversations to %s", len(convs), out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    methods = _methods(args.method)
    if not methods:
        raise CliError(EXIT_USAGE, "give at least one --method")
    convs = _load_corpus(args.corpus)
    out = Path(args.out)
    bcfg = cfg.backbone_config()
    try:
        tok = C.build_tokenizer(convs, bcfg.vocab_size, cfg.seed)
    except C.CorpusError as e:
        raise CliError(EXIT_INPUT, str(e)) from e
    backbone = init_frozen(bcfg)
    encoder = TR.TurnEncoder(backbone, tok)
    hyper, tcfg = cfg.hyper(), cfg.train_config()
    hashes = {}
    for m in methods:
        log.info("training %s", m.label)
        try:
            params, trace = TR.type1_train(m, convs, encoder, hyper, tcfg)
        except TR.TrainingDivergence as e:
            raise CliError(EXIT_DIVERGED, f"training diverged: {e}") from e
        except ValueError as e:
            raise CliError(EXIT_USAGE, str(e)) from e
        store.save_params(out / f"params_{m.value}.json", params, bcfg, tok, {"seed": cfg.seed})
        store.write_atomic(out / f"loss_{m.value}.csv", TR.trace_csv(trace))
        hashes[m.value] = params.trainable_hash()
        if trace:
            log.info("%s: %d steps, final loss %.4f", m.value, len(trace), trace[-1].loss)
    _echo(out, "train", cfg, {"methods": [m.value for m in methods], "params_sha256": hashes, "backbone_sha256": backbone.weight_hash()})
    return EXIT_OK


def _session_range(args, n: int) -> range:
    lo = 1 if args.from_session is None else args.from_session
    hi = n if args.to_session is None else min(args.to_session, n)
    if lo < 1:
        raise CliError(EXIT_USAGE, "--from-session counts from 1")
    return range(lo, hi + 1)


def cmd_accumulate(args, cfg: RunConfig) -> int:
    params, bcfg, tok, _ = _load_params(args.params)
    convs = _load_corpus(args.corpus)
    encoder = TR.TurnEncoder(init_frozen(bcfg), tok)
    out = Path(args.out)
    written = 0
    for conv in convs:
        if args.resume:
            path = Path(args.resume) / bank_name(conv.id)
            try:
                state = store.load_bank(path, params.method)
            except FileNotFoundError as e:
                raise CliError(EXIT_INPUT, f"no bank to resume for {conv.id} at {path}") from e
            except store.BankFileError as e:
                raise CliError(EXIT_INPUT, f"{path}: {e}") from e
            try:
                store.check_bank_dims(state, params)
            except ValueError as e:
                raise CliError(EXIT_DIMS, f"{path}: {e}") from e
        else:
            state = A.zero_state(params.method, params.hyper, params.d)
        for s in _session_range(args, conv.n_sessions):
            state = TR.type2_accumulate(params, state, conv.sessions[s - 1], encoder)
        store.save_bank(state, out / bank_name(conv.id), params.method, params.hyper.capacity_scale)
        written += 1
    _echo(out, "accumulate", cfg, {
        "params": str(args.params), "method": params.method.value,
        "from_session": args.from_session, "to_session": args.to_session, "resume": args.resume,
    })
    log.info("wrote %d banks to %s", written, out)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    convs = _load_corpus(args.corpus)
    loaded = [_load_params(p) for p in (args.params or [])]
    if loaded:
        bcfg, tok = loaded[0][1], loaded[0][2]
        for _, b2, t2, _ in loaded[1:]:
            if b2 != bcfg or t2.fingerprint() != tok.fingerprint():
                raise CliError(EXIT_INPUT, "parameter files disagree on backbone or tokenizer")
    else:
        bcfg = cfg.backbone_config()
        tok = C.build_tokenizer(convs, bcfg.vocab_size, cfg.seed)
    params = {p.method: p for p, *_ in loaded}
    banks = {}
    for spec in args.banks or []:
        if "=" not in spec:
            raise CliError(EXIT_USAGE, "--banks takes METHOD=DIR")
        name, directory = spec.split("=", 1)
        m = _methods([name])[0]
        if m not in params:
            raise CliError(EXIT_INPUT, f"banks given for {m.value} but no parameters")
        per = {}
        for conv in convs:
            path = Path(directory) / bank_name(conv.id)
            try:
                state = store.load_bank(path, m)
            except FileNotFoundError as e:
                raise CliError(EXIT_INPUT, f"missing bank {path}") from e
            except store.BankFileError as e:
                raise CliError(EXIT_INPUT, f"{path}: {e}") from e
            try:
                store.check_bank_dims(state, params[m])
            except ValueError as e:
                raise CliError(EXIT_DIMS, f"{path}: {e}") from e
            per[conv.id] = state.values
        banks[m] = per
    encoder = TR.TurnEncoder(init_frozen(bcfg), tok)
    hyper = next((p.hyper for p in params.values()), cfg.hyper())
    report = E.run_protocol(
        params, convs, encoder, cfg.buckets(), eps=cfg.eps, max_steps=cfg.max_steps, min_len=cfg.min_len,
        banks=banks, config={"capacity": hyper.capacity_scale, "hyper": hyper.to_dict(), "seed": cfg.seed},
    )
    out = Path(args.out)
    store.write_atomic(out / "report.json", report.to_json())
    store.write_atomic(out / "curves.csv", report.curve_csv())
    _echo(out, "evaluate", cfg, {"params": [str(p) for p in args.params or []], "banks": args.banks or []})
    for label, r in report.methods.items():
        b0 = r.curve[0]
        log.info("%s: bucket-0 rho %s (n=%d)", label, "absent" if b0.raw is None else f"{b0.raw:.4f}", b0.n)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--lag-scale", dest="lag_scale", type=float, help="multiplier on lag bucket edges 0,32,64,128,256")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentbank", description="Persistent latent memory adapters over a frozen toy encoder-decoder.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic fact-recall corpus")
    _common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--conversations", type=int, default=200)
    g.add_argument("--sessions", type=int, default=10)
    g.add_argument("--turns-per-session", type=int, default=8)
    g.add_argument("--facts", type=int, default=20)
    g.add_argument("--distractor-ratio", type=float, default=0.5)
    g.add_argument("--lag-distribution", help="comma-separated share per lag bucket")
    g.add_argument("--prefix", default="syn")

    t = sub.add_parser("train", help="Type-1 training of adapter read parameters")
    _common(t)
    t.add_argument("--method", action="append", help="method id m0..m6; repeatable or comma-separated")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=("toy", "paper"))
    t.add_argument("--capacity", type=int, choices=(1, 10))
    for name, typ in (("lr", float), ("weight-decay", float), ("warmup-steps", int), ("grad-clip", float),
                      ("epochs", int), ("batch", int), ("grad-accum", int), ("tbptt-window", int),
                      ("gamma", float), ("n-P", int), ("d-h", int), ("S", int), ("k", int), ("b-g", float)):
        t.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)

    a = sub.add_parser("accumulate", help="Type-2 accumulation of memory banks")
    _common(a)
    a.add_argument("--params", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--from-session", type=int)
    a.add_argument("--to-session", type=int)
    a.add_argument("--resume", help="directory of banks to continue from")

    e = sub.add_parser("evaluate", help="forgetting curves, knowledge curves and interference")
    _common(e)
    e.add_argument("--params", action="append", help="parameter file; repeatable")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--banks", action="append", help="METHOD=DIR of accumulated banks; repeatable")
    e.add_argument("--eps", type=float)
    e.add_argument("--max-steps", dest="max_steps", type=int)
    e.add_argument("--min-len", dest="min_len", type=int)
    return ap


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "accumulate": cmd_accumulate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = merge_config(vars(args), args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"latentbank: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
