"""Command-line entry point: ``diffnet <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .harness import (ABLATIONS, ANALYSIS_MODES, EvalReport, evaluate, format_table, majority_vote,
                      rows_to_json, run_ablation, run_quantitative)
from .model import ModelConfig, gradient_check
from .stemmer import porter_stem
from .text import (DataError, compute_features, generate_synthetic, load_dataset, load_external_features,
                   save_dataset, tokenize)
from .train import CheckpointError, TrainConfig, fit, load_checkpoint, prepare, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRADCHECK_TOL = 1e-6
COMMANDS = ("gen-data", "train", "eval", "ablate", "analyze", "ensemble", "gradcheck", "stem", "features")

log = logging.getLogger("diffnet")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag name -> config field
FLAG_FIELDS = {
    "seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "lr_decay": "lr_decay",
    "clip_norm": "clip_norm", "beta1": "beta1", "beta2": "beta2", "eps": "eps",
    "hidden": "hidden", "embed_dim": "embed_dim", "enriched": "enriched", "dropout": "dropout",
    "activation": "activation", "aoa": "aoa_mode", "external_dim": "external_feature_dim", "l2": "l2",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key: value file of config fields")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--enriched", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--activation", choices=["selu", "tanh"])
    p.add_argument("--aoa", "--aoa-mode", dest="aoa", choices=["modified", "original", "dot"])
    p.add_argument("--no-match", action="store_true")
    p.add_argument("--no-diff", action="store_true")
    p.add_argument("--no-cosine-loss", action="store_true")
    p.add_argument("--no-features", action="store_true")
    p.add_argument("--no-feature", action="append", choices=["ee", "es", "es-fuzzy"], default=[])
    p.add_argument("--embeddings", metavar="PATH")
    p.add_argument("--external-features", metavar="PATH")
    p.add_argument("--external-dim", "--external-feature-dim", dest="external_dim", type=int)
    p.add_argument("--dataset", metavar="PATH")
    p.add_argument("--eval-dataset", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--mode", action="append", help=f"analysis mode(s): {', '.join(ANALYSIS_MODES)}")
    p.add_argument("--members", type=int, default=3, help="ensemble size")
    p.add_argument("--seeds", help="comma-separated seeds for ablate/analyze (default: seed, seed+1, seed+2)")
    p.add_argument("--ids", help=f"comma-separated ablation ids (default: all of {','.join(ABLATIONS)})")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--n", type=int, default=2000, help="gen-data: number of stories")
    p.add_argument("--cue-prob", type=float, default=1.0, help="gen-data: probability the cue is sentence 4")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> Parser:
    parser = Parser(prog="diffnet", description="Diff-Net story ending prediction")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "stem":
            p.add_argument("words", nargs="+")
        elif name == "features":
            p.add_argument("story")
            p.add_argument("ending")
            p.add_argument("other_ending")
    return parser


def resolve(args) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the config file, then explicit flags."""
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(path)
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise DataError(f"{path}: expected flat key: value pairs")
        known = {f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
        unknown = set(loaded) - known
        if unknown:
            raise UsageError(f"{path}: unknown config key(s) {sorted(unknown)}")
        values.update(loaded)
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    for flag, name in [("no_match", "use_match"), ("no_diff", "use_diff"),
                       ("no_cosine_loss", "use_cosine_loss"), ("no_features", "use_features")]:
        if getattr(args, flag):
            values[name] = False
    if args.no_feature:
        feats = values.get("features", ["ee", "es", "es-fuzzy"])
        values["features"] = [f for f in feats if f not in args.no_feature]
    if args.external_features and "external_feature_dim" not in values:
        raise UsageError("--external-features needs --external-dim")
    try:
        mcfg = ModelConfig.from_dict(values)
        tcfg = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return mcfg, tcfg


def _echo_config(out: Path, command: str, mcfg: ModelConfig, tcfg: TrainConfig, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command}
    resolved.update(mcfg.to_dict())
    resolved.update(asdict(tcfg))
    for key in ("dataset", "eval_dataset", "embeddings", "external_features", "checkpoint"):
        if getattr(args, key, None):
            resolved[key] = getattr(args, key)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False))


def _need(path, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def _splits(args):
    """Training and evaluation sets; without --eval-dataset the last 20% is held out."""
    train_set = load_dataset(_need(args.dataset, "dataset"))
    if args.eval_dataset:
        return train_set, load_dataset(_need(args.eval_dataset, "eval-dataset"))
    cut = max(1, int(round(len(train_set) * 0.8)))
    if cut >= len(train_set):
        raise DataError("dataset too small to hold out an evaluation split")
    return train_set[:cut], train_set[cut:]


def _seeds(args, tcfg: TrainConfig) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    return [tcfg.seed, tcfg.seed + 1, tcfg.seed + 2]


def _external(args, mcfg):
    if not args.external_features:
        return None
    return load_external_features(_need(args.external_features, "external-features"), mcfg.external_feature_dim)


def cmd_gen_data(args, mcfg, tcfg, out):
    data = generate_synthetic(args.n, tcfg.seed, args.cue_prob)
    path = out / "synthetic.jsonl"
    save_dataset(data, path)
    print(f"wrote {len(data)} stories to {path}")


def cmd_train(args, mcfg, tcfg, out):
    train_set = load_dataset(_need(args.dataset, "dataset"))
    eval_set = load_dataset(_need(args.eval_dataset, "eval-dataset")) if args.eval_dataset else None
    embeddings = _need(args.embeddings, "embeddings") if args.embeddings else None
    res = fit(train_set, mcfg, tcfg, eval_set, embeddings_path=embeddings, external=_external(args, mcfg),
              log_path=out / "train_log.jsonl")
    save_checkpoint(res.best_params, out / "checkpoint.bin", mcfg, res.vocab, tcfg.seed, res.best_epoch, tcfg)
    last = res.log[-1]
    print(f"trained {tcfg.epochs} epochs; best epoch {res.best_epoch}; final loss {last['loss']:.4f}; "
          f"eval_acc {last['eval_acc']}")


def cmd_eval(args, mcfg, tcfg, out):
    ckpt = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    data = load_dataset(_need(args.dataset, "dataset"))
    enc = prepare(data, ckpt.vocab, ckpt.config, _external(args, ckpt.config))
    report = evaluate(ckpt.params, ckpt.config, enc, ckpt.seed)
    report.save(out / "eval_report.json")
    report.write_csv(out / "eval_rows.csv")
    print(f"accuracy {report.accuracy:.4f} ({report.correct}/{report.n})")


def cmd_ablate(args, mcfg, tcfg, out):
    train_set, eval_set = _splits(args)
    ids = [i.strip() for i in args.ids.split(",")] if args.ids else None
    if ids:
        for i in ids:
            if i not in ABLATIONS:
                raise UsageError(f"unknown ablation id {i!r}")
    rows = run_ablation(mcfg, train_set, eval_set, _seeds(args, tcfg), tcfg, ids, args.jobs)
    (out / "ablation.json").write_text(rows_to_json(rows))
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)


def cmd_analyze(args, mcfg, tcfg, out):
    train_set, eval_set = _splits(args)
    modes = []
    for m in args.mode or ANALYSIS_MODES:
        modes += [x.strip() for x in m.split(",") if x.strip()]
    for m in modes:
        if m not in ANALYSIS_MODES:
            raise UsageError(f"unknown analysis mode {m!r}")
    rows = run_quantitative(mcfg, train_set, eval_set, modes, _seeds(args, tcfg), tcfg, args.jobs)
    (out / "quantitative.json").write_text(rows_to_json(rows))
    table = format_table(rows, title="Settings")
    (out / "quantitative.txt").write_text(table + "\n")
    print(table)


def cmd_ensemble(args, mcfg, tcfg, out):
    if args.members < 1:
        raise UsageError("--members must be at least 1")
    train_set, eval_set = _splits(args)
    ext = _external(args, mcfg)
    reports = []
    for k in range(args.members):
        seed = tcfg.seed + k
        cfg = TrainConfig.from_dict({**asdict(tcfg), "seed": seed})
        res = fit(train_set, mcfg, cfg, eval_set, external=ext)
        rep = evaluate(res.best_params, mcfg, prepare(eval_set, res.vocab, mcfg, ext), seed)
        rep.save(out / f"member_{seed}.json")
        reports.append(rep)
        print(f"member seed {seed}: accuracy {rep.accuracy:.4f}")
    ens = majority_vote(reports)
    ens.save(out / "ensemble_report.json")
    ens.write_csv(out / "ensemble_rows.csv")
    print(f"ensemble accuracy {ens.accuracy:.4f} ({ens.correct}/{ens.n})")


def cmd_gradcheck(args, mcfg, tcfg, out):
    overrides = {}
    for name in ("activation", "aoa_mode", "use_match", "use_diff", "use_cosine_loss", "use_features"):
        if getattr(mcfg, name) != getattr(ModelConfig(), name):
            overrides[name] = getattr(mcfg, name)
    err = float(gradient_check(seed=tcfg.seed, **overrides))
    ok = bool(err < GRADCHECK_TOL)
    (out / "gradcheck.json").write_text(json.dumps({"max_relative_error": err, "passed": ok}))
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_stem(args, mcfg, tcfg, out):
    for word in args.words:
        for tok in tokenize(word):
            print(f"{tok}\t{porter_stem(tok)}")


def cmd_features(args, mcfg, tcfg, out):
    story, ending, other = tokenize(args.story), tokenize(args.ending), tokenize(args.other_ending)
    ann = compute_features(ending, other, story)
    print("token\tee\tes\tes-fuzzy")
    for i, tok in enumerate(ending):
        print(f"{tok}\t{ann.ee[i]}\t{ann.es[i]}\t{ann.es_fuzzy[i]}")


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "analyze": cmd_analyze, "ensemble": cmd_ensemble, "gradcheck": cmd_gradcheck, "stem": cmd_stem,
    "features": cmd_features,
}
NO_OUTPUT = {"stem", "features"}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        mcfg, tcfg = resolve(args)
        out = Path(args.out)
        if args.command not in NO_OUTPUT:
            _echo_config(out, args.command, mcfg, tcfg, args)
        status = HANDLERS[args.command](args, mcfg, tcfg, out)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"diffnet: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, CheckpointError, ValueError) as exc:
        print(f"diffnet: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
