"""Command-line front end: ``attention-geometry {score,train,verify,count,inspect}``.

Exit codes: 0 success, 1 a verification check failed, 2 bad usage or I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, gradlab, inspector, scores, training, verify
from .errors import AttentionGeometryError
from .transformer import ModelConfig, init_params

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("attention_geometry")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers


def _emit(text: str, out_dir: str | None, filename: str) -> None:
    if out_dir is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / filename).write_text(text)


def _read_csv_matrix(path: Path) -> np.ndarray:
    rows = []
    with path.open(newline="") as fh:
        for row in csv.reader(line for line in fh if not line.lstrip().startswith("#")):
            if row and any(cell.strip() for cell in row):
                rows.append([float(cell) for cell in row])
    if not rows:
        raise UsageError(f"{path}: no matrix rows")
    if len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: rows have different lengths")
    return np.array(rows)


def _is_container(path: Path) -> bool:
    with path.open("rb") as fh:
        head = fh.read(9)
    return len(head) == 9 and head[8:9] == b"{"


def _score_rows_csv(rows: list[tuple[str, float, float]]) -> str:
    buf = io.StringIO()
    buf.write(inspector.CSV_VERSION_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "s", "d"])
    for name, s, d in rows:
        w.writerow([name, repr(s), repr(d)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# subcommands


def cmd_score(args) -> int:
    path = Path(args.file)
    if _is_container(path):
        container = inspector.load_container(path)
        named = [(n, container.array(n)) for n in container.names()]
        named = [(n, m) for n, m in named if m.ndim == 2 and m.shape[0] == m.shape[1]]
        if not named:
            raise UsageError(f"{path}: container holds no square matrices")
    else:
        named = [("matrix", _read_csv_matrix(path))]
    rows = [(n, scores.symmetry_score(m), scores.directionality_score(m, args.gamma)) for n, m in named]
    if args.format == "json":
        text = json.dumps([{"name": n, "s": s, "d": d, "gamma": args.gamma} for n, s, d in rows], indent=2)
    elif args.format == "csv":
        text = _score_rows_csv(rows)
    else:
        text = "\n".join(f"{n}: s={s:.6f} d={d:.6f}" for n, s, d in rows)
    _emit(text, args.out, "scores." + ("json" if args.format == "json" else "csv"))
    return EXIT_OK


# JSON config keys for ``train`` and their defaults; flags override them.
TRAIN_DEFAULTS = {
    "layers": 2, "heads": 2, "dim": 32, "ff_dim": 64,
    "init": "iid", "sigma": 0.1,
    "corpus": None, "corpus_bytes": 100_000,
}

# Toy-scale recipe used when neither config nor flags say otherwise.
TOY_TRAINING = {"lr": 1e-2, "batch_size": 16, "seq_len": 64, "steps": 2000, "score_every": 100}

_TRAINING_FIELDS = {f.name for f in fields(training.TrainingConfig)} - {"mask_id"}


def _train_settings(args) -> dict:
    settings = dict(TRAIN_DEFAULTS)
    settings.update({k: getattr(training.TrainingConfig(), k) for k in _TRAINING_FIELDS})
    settings.update(TOY_TRAINING)
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(cfg) - set(settings)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(cfg)
    overrides = {"layers": args.layers, "heads": args.heads, "dim": args.dim, "init": args.init,
                 "objective": args.objective, "mask_prob": args.mask_prob, "steps": args.steps,
                 "seed": args.seed, "gamma": args.gamma}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    return settings


def _training_log_csv(log_: training.TrainingLog) -> str:
    buf = io.StringIO()
    buf.write(inspector.CSV_VERSION_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "layer", "s", "d"])
    for row in log_.csv_rows():
        w.writerow([row[0], repr(row[1]), row[2], repr(row[3]), repr(row[4])])
    return buf.getvalue()


def cmd_train(args) -> int:
    st = _train_settings(args)
    if st["corpus"]:
        text = Path(st["corpus"]).read_bytes()
    else:
        text = training.synthetic_corpus(st["corpus_bytes"], seed=0)
    ids, tok = training.char_tokenizer(text)
    model_cfg = ModelConfig(num_layers=st["layers"], num_heads=st["heads"], model_dim=st["dim"],
                            ff_dim=st["ff_dim"], vocab_size=tok.vocab_size, max_seq=st["seq_len"])
    train_cfg = training.TrainingConfig(mask_id=tok.mask_id,
                                        **{k: st[k] for k in _TRAINING_FIELDS})
    params = init_params(model_cfg, st["init"], st["sigma"], st["seed"])
    log_ = training.train(params, ids, train_cfg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "training_log.csv").write_text(_training_log_csv(log_))
    data = log_.to_dict()
    data["settings"] = st
    (out / "training_log.json").write_text(json.dumps(data, indent=2, sort_keys=True))
    inspector.save_params(params, out / "final.safetensors",
                          extra_metadata={"settings": json.dumps(st, sort_keys=True)})
    final = log_.final
    print(f"step {final.step} loss {final.loss:.4f} median s {final.report.median_s:.4f} "
          f"median d {final.report.median_d:.4f} -> {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run(args.suite, args.seed)
    result = verify.summary(checks, args.suite, args.seed)
    if args.format == "csv":
        buf = io.StringIO()
        buf.write(inspector.CSV_VERSION_LINE + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["suite", "name", "value", "threshold", "margin", "passed"])
        for c in checks:
            w.writerow([c.suite, c.name, repr(c.value), repr(c.threshold), repr(c.margin), c.passed])
        text = buf.getvalue()
    else:
        text = json.dumps(result, indent=2)
    _emit(text, args.out, "verify." + ("csv" if args.format == "csv" else "json"))
    return EXIT_OK if result["passed"] else EXIT_FAILED


def parse_distribution(spec: str, n: int) -> np.ndarray:
    """``uniform``, ``point:K`` (1-based), ``geometric:Q``, a comma list, or a JSON file."""
    if spec == "uniform":
        return np.full(n, 1.0 / n)
    if spec.startswith("point:"):
        k = int(spec.split(":", 1)[1])
        if not 1 <= k <= n:
            raise UsageError(f"point position {k} outside 1..{n}")
        p = np.zeros(n)
        p[k - 1] = 1.0
        return p
    if spec.startswith("geometric:"):
        q = float(spec.split(":", 1)[1])
        if not 0 < q < 1:
            raise UsageError("geometric ratio must be in (0, 1)")
        p = q ** np.arange(n)
        return p / p.sum()
    if Path(spec).is_file():
        values = json.loads(Path(spec).read_text())
    else:
        try:
            values = [float(v) for v in spec.split(",")]
        except ValueError:
            raise UsageError(f"cannot parse distribution {spec!r}") from None
    p = np.asarray(values, dtype=np.float64)
    if p.size != n:
        raise UsageError(f"distribution has {p.size} entries but N = {n}")
    return p


def cmd_count(args) -> int:
    probs = parse_distribution(args.dist, args.n)
    mode = training.normalize_objective(args.mode)
    res = gradlab.counting_ratio(probs, mode)
    record = {"N": args.n, "mode": mode, "ratio": res.ratio, "mean_position": res.mean_position,
              "mean_position_form": res.mean_position_form}
    if args.samples:
        mc_probs = probs / probs.max()
        record["monte_carlo"] = gradlab.counting_ratio_mc(mc_probs, mode, args.samples, args.seed,
                                                          args.mask_prob or 0.15)
    if args.format == "csv":
        buf = io.StringIO()
        buf.write(inspector.CSV_VERSION_LINE + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(record))
        w.writerow([repr(v) if isinstance(v, float) else v for v in record.values()])
        text = buf.getvalue()
    else:
        # json.dumps writes inf as Infinity, which is what the sentinel means
        text = json.dumps(record, indent=2)
    _emit(text, args.out, "count." + ("csv" if args.format == "csv" else "json"))
    return EXIT_OK


def cmd_inspect(args) -> int:
    container = inspector.load_container(args.container)
    pattern = inspector.load_pattern(args.pattern) if args.pattern else inspector.LayerPattern.native(
        args.heads or 1)
    result = inspector.inspect_report(container, pattern, args.gamma)
    if args.out:
        _emit(result.to_csv(), args.out, "inspect.csv")
        _emit(result.to_json(), args.out, "inspect.json")
    else:
        _emit(result.to_json() if args.format == "json" else result.to_csv(), None, "")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--gamma", type=float, default=None)
    common.add_argument("--out", default=None, help="output directory (default: stdout)")
    common.add_argument("--format", choices=("text", "csv", "json"), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="attention-geometry",
                     description="Audit and train the query-key bilinear form of self-attention.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", parents=[common], help="score a matrix (CSV) or every square tensor of a container")
    p.add_argument("file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", parents=[common], help="train the toy model and log scores")
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--init", choices=("iid", "symmetric"))
    p.add_argument("--objective", choices=("ar", "mlm"))
    p.add_argument("--mask-prob", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dim", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", parents=[common], help="run property suites")
    p.add_argument("suite", choices=verify.SUITES + ("all",))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("count", parents=[common], help="context/prediction counting ratio")
    p.add_argument("--n", type=int, required=True, help="sequence length N")
    p.add_argument("--dist", default="uniform",
                   help="uniform | point:K | geometric:Q | comma list | JSON file")
    p.add_argument("--mode", default="ar", choices=("ar", "mlm", "autoregressive", "bidirectional"))
    p.add_argument("--samples", type=int, default=0, help="also run sequence-sampling Monte Carlo")
    p.add_argument("--mask-prob", type=float)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("inspect", parents=[common], help="audit a checkpoint container")
    p.add_argument("container")
    p.add_argument("--pattern", help="JSON pattern config; default matches checkpoints written by train")
    p.add_argument("--heads", type=int)
    p.set_defaults(func=cmd_inspect)
    return parser


_FORMAT_DEFAULTS = {"score": "text", "verify": "json", "count": "json", "inspect": "csv", "train": "csv"}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.format is None:
            args.format = _FORMAT_DEFAULTS[args.command]
        if args.command != "train":
            args.seed = 0 if args.seed is None else args.seed
            args.gamma = scores.DEFAULT_GAMMA if args.gamma is None else args.gamma
        return args.func(args)
    except UsageError as exc:
        print(f"attention-geometry: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, TypeError, AttentionGeometryError) as exc:
        print(f"attention-geometry: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
