"""Command-line entry point: ``surt {simulate,train,eval,gradcheck,losscheck}``.

Errors print one line ``surt: error: <CODE>: <message>`` to stderr and exit
nonzero, so scripts can match on the code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .functional import ConfigError
from .mixsim import CorpusConfig, SimulationError, read_manifest, simulate_corpus, single_talker_corpus, write_manifest
from .model import ModelConfig, SURTModel, latency_budget_check

log = logging.getLogger("surt")

EXIT_CODES = {
    "USAGE": 2,
    "OUTPUT_EXISTS": 3,
    "CONFIG": 4,
    "DATA": 5,
    "CHECKPOINT": 6,
    "TRAINING_ABORTED": 7,
    "CHECK_FAILED": 8,
}
SPLITS = ("train", "dev", "test")


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _tau_list(text: str) -> list[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from exc
    if not taus or any(t < 0 for t in taus):
        raise argparse.ArgumentTypeError("tau values must be non-negative")
    return taus


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def manifest_name(split: str, tau: float | None) -> str:
    return f"{split}.single.jsonl" if tau is None else f"{split}.tau{tau:g}.jsonl"


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise CLIError("OUTPUT_EXISTS", f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _split_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    corpus = CorpusConfig.from_dict(json.loads(Path(args.corpus).read_text())) if args.corpus else CorpusConfig()
    corpus.validate()
    sizes = {"train": args.train, "dev": args.dev, "test": args.test}
    written = {}
    for si, split in enumerate(SPLITS):
        if sizes[split] <= 0:
            continue
        if args.single:
            recs = single_talker_corpus(sizes[split], _split_seed(args.seed, si, 999), corpus, prefix=f"{split}")
            name = manifest_name(split, None)
            write_manifest(out / name, recs)
            written[name] = len(recs)
            continue
        for ti, tau in enumerate(args.tau):
            recs = simulate_corpus(sizes[split], tau, _split_seed(args.seed, si, ti), corpus, prefix=f"{split}-tau{tau:g}")
            bad = [r["id"] for r in recs if not (tau - 1e-9 <= r["delay_s"] <= _first_duration(r) + 1e-9)]
            if bad:
                raise CLIError("DATA", f"{len(bad)} delays outside [tau, nu], first {bad[0]}")
            name = manifest_name(split, tau)
            write_manifest(out / name, recs)
            written[name] = len(recs)
    info = {"seed": args.seed, "tau": args.tau, "single": args.single, "sizes": sizes, "manifests": written}
    (out / "simulate.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    for name, n in written.items():
        print(f"{out / name}\t{n}")
    return 0


def _first_duration(rec: dict) -> float:
    spec = rec["synth_spec"]
    sr = spec["corpus"]["sample_rate"]
    return sum(spec["utts"][0]["token_samples"]) / sr


def _load_model_config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    over = {}
    if args.unmix is not None:
        over["unmix"] = args.unmix
    if args.mixenc is not None:
        over["mixenc"] = args.mixenc
    if over:
        cfg = cfg.replace(**over)
    cfg.validate()
    return cfg


def _read_split(data: Path, split: str, tau: float | None) -> list[dict]:
    path = data / manifest_name(split, tau)
    if not path.exists():
        raise CLIError("DATA", f"missing manifest {path}")
    return read_manifest(path)


def cmd_train(args) -> int:
    from .train import TrainConfig, Trainer, TrainingAborted, load_examples, save_train_config, warm_start

    out = Path(args.out)
    if not args.resume:
        _prepare_out(out, args.force)
    cfg = _load_model_config(args)
    single = cfg.unmix == "none"  # single-talker models read the single-talker manifests
    latency_budget_check(cfg)
    data = Path(args.data)
    tau = None if single else args.tau[0]
    train = load_examples(_read_split(data, "train", tau))
    dev = load_examples(_read_split(data, "dev", tau))
    if args.train_limit:
        train = train[: args.train_limit]
    tcfg = TrainConfig(
        loss=args.loss,
        updates=args.updates,
        batch_frames=args.batch_frames,
        lr=args.lr,
        halve_every=args.halve_every,
        valid_every=args.valid_every,
        checkpoint_every=args.valid_every,
        seed=args.seed,
    )
    model = SURTModel(cfg, seed=args.seed)
    if args.init and not args.resume:
        copied = warm_start(model, ckpt_io.load(args.init).params)
        log.info("warm start copied %d of %d parameters from %s", len(copied), len(model.params), args.init)
    trainer = Trainer(model, tcfg, train, dev, out)
    if args.resume:
        last = out / "last.ckpt"
        if not last.exists():
            raise CLIError("CHECKPOINT", f"nothing to resume: {last} missing")
        trainer.restore(ckpt_io.load(last))
    else:
        save_train_config(out / "train_config.json", tcfg, cfg)
        (out / "model.conf").write_text(cfg.to_text())
    try:
        summary = trainer.run()
    except TrainingAborted as exc:
        raise CLIError("TRAINING_ABORTED", f"{exc}; last good checkpoint kept at {out / 'last.ckpt'}") from exc
    print(json.dumps(summary, sort_keys=True))
    return 0


def load_model_from_checkpoint(path: Path | str, config: Path | str | None = None) -> SURTModel:
    ck = ckpt_io.load(path)
    stored = ModelConfig.from_text(ck.config_text) if ck.config_text else None
    cfg = ModelConfig.load(config) if config else stored
    if cfg is None:
        raise ckpt_io.CheckpointError("checkpoint has no model config; pass --config")
    if stored is not None and stored.vocab_size != cfg.vocab_size:
        raise ckpt_io.CheckpointError(f"vocabulary mismatch: checkpoint has {stored.vocab_size} tokens, config {cfg.vocab_size}")
    model = SURTModel(cfg)
    try:
        model.load_arrays(ck.params)
    except ValueError as exc:
        raise ckpt_io.CheckpointError(str(exc)) from exc
    return model


def cmd_eval(args) -> int:
    from .evaluate import decode_examples, write_reports
    from .train import load_examples

    out = Path(args.out)
    _prepare_out(out, args.force)
    model = load_model_from_checkpoint(args.checkpoint, args.config)
    data = Path(args.data)
    per_condition = {}
    if model.cfg.unmix == "none":
        per_condition["single"] = decode_examples(model, load_examples(_read_split(data, args.split, None)))
    else:
        for tau in args.tau:
            per_condition[f"tau={tau:g}"] = decode_examples(model, load_examples(_read_split(data, args.split, tau)))
    summary = write_reports(out, per_condition, title=f"{Path(args.checkpoint).name} on {args.split}")
    print((out / "score.txt").read_text(), end="")
    log.info("summary %s", summary)
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck_suite

    results = run_gradcheck_suite(seed=args.seed)
    return _report_checks(results)


def cmd_losscheck(args) -> int:
    from .checks import run_losscheck_suite

    results = run_losscheck_suite(seed=args.seed, n=args.instances)
    return _report_checks(results)


def _report_checks(results) -> int:
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        ok &= passed
    if not ok:
        raise CLIError("CHECK_FAILED", f"{sum(not r[1] for r in results)} check(s) failed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bit-reproducible runs")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = argparse.ArgumentParser(prog="surt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write synthetic corpus manifests")
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=_tau_list, default=[0.0], help="comma list of minimum delays, e.g. 0,0.5")
    s.add_argument("--train", type=int, default=2000)
    s.add_argument("--dev", type=int, default=200)
    s.add_argument("--test", type=int, default=200)
    s.add_argument("--single", action="store_true", help="single-talker corpus instead of mixtures")
    s.add_argument("--corpus", help="JSON file overriding corpus parameters")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="model config file (key = value)")
    t.add_argument("--unmix", choices=["sd", "mask", "none"])
    t.add_argument("--mixenc", type=_on_off)
    t.add_argument("--loss", choices=["heat", "pit"], default="heat")
    t.add_argument("--tau", type=_tau_list, default=[0.0])
    t.add_argument("--updates", type=int, default=2000)
    t.add_argument("--batch-frames", type=int, default=500)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--halve-every", type=int, default=1500)
    t.add_argument("--valid-every", type=int, default=200)
    t.add_argument("--train-limit", type=int, default=0)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    t.add_argument("--init", help="checkpoint whose matching parameters seed the model")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="decode and score")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="test")
    e.add_argument("--tau", type=_tau_list, default=[0.0, 0.5])
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.set_defaults(func=cmd_gradcheck)

    lc = sub.add_parser("losscheck", parents=[common], help="transducer loss vs path enumeration")
    lc.add_argument("--instances", type=int, default=100)
    lc.set_defaults(func=cmd_losscheck)
    return p


def _set_threads(n: int) -> None:
    if n < 1:
        raise CLIError("USAGE", "--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("SURT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        _set_threads(args.threads)
        code = args.func(args)
    except CLIError as exc:
        return _fail(exc.code, str(exc))
    except ckpt_io.CheckpointError as exc:
        return _fail("CHECKPOINT", str(exc))
    except (ConfigError, SimulationError) as exc:
        return _fail("CONFIG", str(exc))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail("DATA", str(exc))
    except ValueError as exc:
        return _fail("CONFIG", str(exc))
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return code


def _fail(code: str, message: str) -> int:
    one_line = " ".join(message.split())
    print(f"surt: error: {code}: {one_line}", file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
