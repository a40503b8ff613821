"""Command-line entry point: synth, train, transfer, eval.

Experiment configs are flat `key = value` text files; command-line flags
override file values, and every run's resolved config is echoed into the
output directory so an experiment can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import evaluation, models, textpipe, training
from .training import TrainConfig

_TRAIN_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_EXTRA_FIELDS = {"data_dir": "str", "out_dir": "str", "n_runs": "int"}
_ALL_FIELDS = {**_TRAIN_FIELD_TYPES, **_EXTRA_FIELDS}


def parse_config_file(path: str | Path) -> dict:
    """Flat key = value lines; unknown keys are rejected with their line number."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = key.strip(), raw.strip()
        if key not in _ALL_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kind = _ALL_FIELDS[key]
        try:
            if kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {err}") from err
    return values


def resolve_config(file_values: dict, overrides: dict) -> tuple[TrainConfig, dict]:
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    extra = {k: merged.pop(k) for k in list(merged) if k in _EXTRA_FIELDS}
    config = TrainConfig(**merged).validate()
    return config, extra


def write_resolved_config(path: Path, config: TrainConfig, extra: dict) -> None:
    lines = [f"{k} = {v}" for k, v in asdict(config).items()]
    lines += [f"{k} = {v}" for k, v in sorted(extra.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    if not 0.0 <= args.entanglement <= 1.0:
        raise ValueError(f"entanglement must be in [0,1], got {args.entanglement}")
    if args.n <= 0:
        raise ValueError(f"--n must be positive, got {args.n}")
    seed = args.seed if args.seed is not None else 0
    train_set = textpipe.generate_synthetic_corpus(seed, args.n, args.entanglement)
    eval_set = textpipe.generate_synthetic_corpus(seed + 1, max(1, args.n // 4),
                                                  args.entanglement)
    written = textpipe.write_corpus_files(args.out, train_set, eval_set)
    for path in written:
        _say(args.quiet, f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {"variant": args.variant, "seed": args.seed}
    config, extra = resolve_config(file_values, overrides)
    data_dir = Path(args.data or extra.get("data_dir", ""))
    if not data_dir or not (data_dir / "train.txt").exists():
        raise FileNotFoundError(f"no train.txt under data dir {data_dir or '(unset)'}; "
                                "run `stylesplit synth` first or set data_dir")
    n_runs = args.runs if args.runs is not None else int(extra.get("n_runs", 1))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = textpipe.load_corpus(data_dir / "train.txt", data_dir / "train.labels")
    vocab = textpipe.build_vocab([s.tokens for s in corpus])
    extra_resolved = {"data_dir": str(data_dir), "out_dir": str(out_dir), "n_runs": n_runs}
    write_resolved_config(out_dir / "config.resolved", config, extra_resolved)
    _say(args.quiet, f"training {n_runs} run(s) of variant '{config.variant}' "
                     f"on {len(corpus)} sentences (vocab {len(vocab)})")
    results = training.multi_retrain(config, corpus, n_runs, vocab=vocab, out_dir=out_dir)
    for i, (_, records) in enumerate(results):
        final = records[-1]
        _say(args.quiet, f"run_{i}: epoch {final.epoch} "
                         f"loss_ae {final.losses['ae']:.4f} d_acc {final.d_accuracy:.3f}")
    return 0


def cmd_transfer(args) -> int:
    cp = training.load_checkpoint(args.checkpoint)
    params, vocab = training.params_from_checkpoint(cp)
    max_len = cp.config.max_len
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    unlabeled = 0
    sentences = []
    for line in lines:
        tokens = line.split()
        label = evaluation.style_oracle(tokens)
        if label is None:
            unlabeled += 1
            label = 0
        sentences.append(textpipe.LabeledSentence(tokens, label))
    if unlabeled:
        print(f"warning: {unlabeled} input line(s) carried no style marker; "
              "treated as negative", file=sys.stderr)
    outputs = evaluation.transfer_greedy(params, sentences, vocab, max_len)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(" ".join(toks) for toks in outputs) + "\n",
                        encoding="utf-8")
    _say(args.quiet, f"wrote {out_path} ({len(outputs)} lines)")
    return 0


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    refs_path = Path(args.refs) if args.refs else data_dir / "eval.refs"
    sentences = textpipe.load_corpus(
        data_dir / "eval.txt", data_dir / "eval.labels",
        refs_path if refs_path.exists() else None)
    out_dir = Path(args.out)
    eval_dir = out_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, cp_path in enumerate(args.checkpoint):
        cp = training.load_checkpoint(cp_path)
        params, vocab = training.params_from_checkpoint(cp)
        report, artifacts = evaluation.evaluate_model(
            params, sentences, vocab, cp.config.max_len,
            probe_seed=args.seed if args.seed is not None else 0)
        reports.append(report)
        evaluation.dump_latents(eval_dir / f"latents_{i}.txt", artifacts["mu"],
                                artifacts["logvar"], artifacts["labels"])
        projected = evaluation.project_latents(artifacts["mu"], artifacts["labels"])
        evaluation.dump_projection(eval_dir / f"projection_{i}.csv", projected)
        transfers_path = eval_dir / f"transfers_{i}.txt"
        transfers_path.write_text(
            "\n".join(" ".join(toks) for toks in artifacts["transfers"]) + "\n",
            encoding="utf-8")
        _say(args.quiet, f"checkpoint {cp_path}: probe {report.probe_accuracy:.3f} "
                         f"bleu {report.bleu if report.bleu is None else round(report.bleu, 4)} "
                         f"cos {report.mean_cosine_distance:.4f}")
    mean, std = evaluation.aggregate_runs(reports)
    payload = {
        "n_runs": len(reports),
        "per_run": [r.to_dict() for r in reports],
        "mean": mean.to_dict(),
    }
    if len(reports) >= 2:
        payload["std"] = std.to_dict()
    report_path = eval_dir / "report.json"
    report_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    _say(args.quiet, f"wrote {report_path}")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylesplit",
        description="Disentangled style transfer on synthetic text")
    parser.add_argument("--seed", type=int, default=None,
                        help="global seed (default 0; config files may set their own)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus files")
    p.add_argument("--n", type=int, default=2000, help="training sentences (eval gets n/4)")
    p.add_argument("--entanglement", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant with independent retrains")
    p.add_argument("--config", help="key = value experiment config file")
    p.add_argument("--variant", choices=models.VARIANTS)
    p.add_argument("--runs", type=int)
    p.add_argument("--data", help="directory with train.txt / train.labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="flip the style of every input line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="measure checkpoints and aggregate a report")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--data", required=True, help="directory with eval.txt / eval.labels")
    p.add_argument("--refs", help="reference file (default: <data>/eval.refs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except (ValueError, OSError, training.CheckpointError,
            training.TrainingDiverged) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
