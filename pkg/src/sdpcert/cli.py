"""Command line entry point: ``sdpcert {train,certify,attack,report}``.

Every option can come from a flat ``key = value`` config file (``--config``)
or from the matching ``--key`` flag; flags win. See docs/formats.md.
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import attacks, bounds
from .data import LabeledDataset, load_idx, synth_blobs
from .errors import (ConfigError, DivergenceError, IntegrityError, InvalidCertificateError,
                     InvalidInputError, ParseError)
from .experiments import BOUND_COLUMNS, bounds_table
from .model import Network, predict, weight_hash
from .seeding import substream
from .train import TrainConfig, save_checkpoint, train, write_log_csv

log = logging.getLogger("sdpcert")

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2


def _float_list(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


def _str_list(text):
    return [t for t in str(text).replace(",", " ").split()]


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


DATASET_KEYS = {
    "images": (str, None, "IDX images file"),
    "labels": (str, None, "IDX labels file"),
    "synth_k": (int, None, "synthetic blobs: classes (used when images/labels are unset)"),
    "synth_d": (int, 20, "synthetic blobs: input dimension"),
    "synth_n": (int, 500, "synthetic blobs: number of points"),
    "synth_separation": (float, 1.0, "synthetic blobs: spread of class centres"),
    "synth_seed": (int, 0, "synthetic blobs: seed"),
    "start": (int, 0, "skip the first N examples"),
    "limit": (int, None, "then keep at most N examples"),
}


def _field_parser(tp):
    if tp is bool:
        return _bool
    for base in (int, float, str):
        if tp is base or base in getattr(tp, "__args__", ()):
            return base
    raise TypeError(f"no parser for {tp!r}")


TRAIN_KEYS = {f.name: (_field_parser(f.type), None, "") for f in fields(TrainConfig)}

COMMANDS = {
    "train": {
        **DATASET_KEYS, **TRAIN_KEYS,
        "out": (str, None, "output directory"),
    },
    "certify": {
        **DATASET_KEYS,
        "weights": (str, None, "network file (CERTNET1)"),
        "epsilons": (_float_list, [0.0, 0.1], "radii, comma separated"),
        "dual_steps": (int, 2000, "subgradient steps per pair (0: use --certificate as is)"),
        "certificate": (str, None, "start from an existing certificate"),
        "workers": (int, 1, "threads for per-pair certification"),
        "out": (str, None, "output directory"),
    },
    "attack": {
        **DATASET_KEYS,
        "weights": (str, None, "network file (CERTNET1)"),
        "attacks": (_str_list, ["fgsm", "pgd"], "attacks to run"),
        "epsilons": (_float_list, [0.0, 0.1], "radii, comma separated"),
        "step_size": (float, 0.1, "PGD step"),
        "iterations": (int, 40, "PGD iterations"),
        "restarts": (int, 5, "PGD random restarts"),
        "loss": (str, "cross_entropy", "attack objective"),
        "seed": (int, 0, "top-level seed"),
        "out": (str, None, "output directory"),
    },
    "report": {
        **DATASET_KEYS,
        "weights": (str, None, "network file (CERTNET1)"),
        "certificate": (str, None, "certificate JSON"),
        "attack_csv": (str, None, "attack CSV from `sdpcert attack`"),
        "attack_summary": (str, None, "attack summary JSON (default: next to the CSV)"),
        "attack": (str, "pgd", "which attack provides the lower bound"),
        "out": (str, None, "write report.csv here"),
    },
}

REQUIRED = {
    "train": ("out",),
    "certify": ("weights", "out"),
    "attack": ("weights", "out"),
    "report": ("weights", "certificate", "attack_csv"),
}


def parse_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Returns ``{key: (value, line)}``."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno, path=path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno, path=path)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, path=path)
        out[key] = (value, lineno)
    return out


def resolve_options(command: str, config_path, flags: dict) -> dict:
    schema = COMMANDS[command]
    opts = {key: default for key, (_, default, _) in schema.items()}
    if config_path is not None:
        for key, (value, lineno) in parse_config(config_path).items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} for '{command}'", line=lineno,
                                  path=config_path)
            try:
                opts[key] = schema[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", line=lineno,
                                  path=config_path) from exc
    for key, value in flags.items():
        if value is not None:
            try:
                opts[key] = schema[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}") from exc
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")
    if "epsilons" in opts:
        eps = opts["epsilons"]
        if not eps or any(e < 0 for e in eps) or list(eps) != sorted(eps):
            raise ConfigError("epsilons must be a non-empty ascending list of radii >= 0")
    return opts


def _check_paths(opts, keys):
    for key in keys:
        if opts.get(key) is not None and not Path(opts[key]).is_file():
            raise ConfigError(f"{key}: no such file {opts[key]!r}")


def load_dataset(opts) -> LabeledDataset:
    if opts["images"] or opts["labels"]:
        if not (opts["images"] and opts["labels"]):
            raise ConfigError("images and labels must be given together")
        ds = load_idx(opts["images"], opts["labels"])
    elif opts["synth_k"]:
        ds = synth_blobs(opts["synth_k"], opts["synth_d"], opts["synth_n"],
                         opts["synth_separation"], opts["synth_seed"])
    else:
        raise ConfigError("no dataset: set images/labels or synth_k")
    start, limit = opts["start"], opts["limit"]
    if start < 0 or start >= ds.n or (limit is not None and limit < 1):
        raise ConfigError(f"start={start} / limit={limit} select no examples of {ds.n}")
    if start or limit:
        ds = ds.subset(slice(start, None if limit is None else start + limit))
    return ds


def _fmt(x):
    return repr(float(x))


def _write_rows(path, header, rows):
    lines = [",".join(header)] + [",".join(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ commands


def cmd_train(opts) -> int:
    _check_paths(opts, ("images", "labels"))
    ds = load_dataset(opts)
    cfg_kwargs = {f.name: opts[f.name] for f in fields(TrainConfig) if opts[f.name] is not None}
    try:
        cfg = TrainConfig(**cfg_kwargs)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    log.info("training %s on n=%d d=%d k=%d", cfg.objective, ds.n, ds.d, ds.k)
    result = train(cfg, ds, on_epoch_end=lambda s, row: log.info("epoch %s", row))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    result.net.save(out / "network.certnet")
    save_checkpoint(out / "checkpoint.npz", result.state)
    write_log_csv(out / "train_log.csv", result.log)
    if result.certificate is not None:
        result.certificate.save(out / "certificate.json")
    return EXIT_OK


def cmd_certify(opts) -> int:
    _check_paths(opts, ("images", "labels", "weights", "certificate"))
    net = Network.load(opts["weights"])
    ds = load_dataset(opts)
    eps_grid = opts["epsilons"]
    start = None
    if opts["certificate"]:
        start = bounds.DualCertificate.load(opts["certificate"])
        start.check(net)
    if start is not None and opts["dual_steps"] == 0:
        cert = bounds.certificate_from_duals(
            net, {key: p.c for key, p in start.pairs.items()}, eps_grid)
    else:
        cert = bounds.certify_network(net, steps=max(1, opts["dual_steps"]), epsilon=eps_grid,
                                      workers=opts["workers"], start=start)
    table = bounds_table(net, ds.inputs, ds.labels, eps_grid, cert)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    cert.save(out / "certificate.json")
    _write_rows(out / "bounds.csv", BOUND_COLUMNS,
                [[_fmt(row[c]) for c in BOUND_COLUMNS] for row in table])
    return EXIT_OK


def cmd_attack(opts) -> int:
    _check_paths(opts, ("images", "labels", "weights"))
    net = Network.load(opts["weights"])
    ds = load_dataset(opts)
    for a in opts["attacks"]:
        if a not in attacks.ATTACKS:
            raise ConfigError(f"unknown attack {a!r}")
    results = []
    cfg = None
    for eps in opts["epsilons"]:
        try:
            cfg = attacks.PgdConfig(eps, opts["step_size"], opts["iterations"], opts["restarts"],
                                    opts["loss"])
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
        for name in opts["attacks"]:
            seed = int(substream(opts["seed"], f"attack/{name}/{eps!r}").integers(2**62))
            rep = attacks.run_attack(net, ds.inputs, ds.labels, name, cfg, seed)
            results.append((name, eps, rep))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    attacks.write_attack_csv(out / "attack.csv", results)
    attacks.write_attack_summary(out / "attack_summary.json", weight_hash(net), cfg,
                                 opts["seed"], results)
    return EXIT_OK


def build_report(net: Network, ds: LabeledDataset, cert: bounds.DualCertificate,
                 groups: dict, attack: str):
    """Rows ``(eps, clean, lower, upper, violations)`` and a list of problems."""
    problems = []
    X, y = ds.inputs, ds.labels
    clean_correct = predict(net, X) == y
    rows = []
    for (name, eps), g in sorted(groups.items(), key=lambda kv: kv[0][1]):
        if name != attack:
            continue
        if len(g["example_id"]) != ds.n or not np.array_equal(g["example_id"], np.arange(ds.n)):
            problems.append(f"eps={eps}: attack rows do not cover the dataset in order")
            continue
        if not np.array_equal(g["clean_correct"].astype(bool), clean_correct):
            problems.append(f"eps={eps}: attack was run on different data or weights")
            continue
        upper_margin = bounds.certified_margins(net, X, y, eps, cert)
        certified = upper_margin < 0
        broken = certified & (g["attacked_correct"] == 0)
        # a realised margin above its certified upper bound is also a contradiction
        slack = 1e-9 * np.maximum(1.0, np.abs(upper_margin))
        broken |= g["attack_margin"] > upper_margin + slack
        lower = float(np.mean(g["attacked_correct"] == 0))
        upper = float(np.mean(~certified))
        n_bad = int(broken.sum())
        if n_bad or lower > upper:
            problems.append(f"eps={eps}: sandwich violated on {n_bad} example(s) "
                            f"(attack error {lower:.4f} vs certified {upper:.4f})")
        rows.append((eps, 1.0 - float(np.mean(clean_correct)), lower, upper, n_bad))
    if not rows and not problems:
        problems.append(f"no rows for attack {attack!r} in the attack CSV")
    return rows, problems


def cmd_report(opts) -> int:
    summary_path = opts["attack_summary"] or str(Path(opts["attack_csv"]).with_name(
        "attack_summary.json"))
    opts["attack_summary"] = summary_path
    _check_paths(opts, ("images", "labels", "weights", "certificate", "attack_csv",
                        "attack_summary"))
    net = Network.load(opts["weights"])
    ds = load_dataset(opts)
    cert = bounds.DualCertificate.load(opts["certificate"])
    summary = json.loads(Path(summary_path).read_text())
    h = weight_hash(net)
    if cert.weight_hash != h or summary.get("weight_hash") != h:
        raise IntegrityError("certificate, attack report and weights have different hashes")
    cert.check(net)
    problems = [f"pair ({i},{j}): stored dual value {s:.6g} < recomputed {a:.6g}"
                for i, j, s, a in bounds.verify_certificate(net, cert)]
    rows, more = build_report(net, ds, cert, attacks.read_attack_csv(opts["attack_csv"]),
                              opts["attack"])
    problems += more
    print(f"{'epsilon':>8} {'clean':>8} {opts['attack'] + ' (lower)':>14} "
          f"{'certified (upper)':>18}")
    for eps, clean, lower, upper, _ in rows:
        print(f"{eps:8.3f} {clean:8.2%} {lower:14.2%} {upper:18.2%}")
    if opts["out"]:
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "report.csv",
                    ("epsilon", "clean_error", "attack_error", "certified_error", "violations"),
                    [[_fmt(e), _fmt(c), _fmt(lo), _fmt(up), str(n)] for e, c, lo, up, n in rows])
    if problems:
        for p in problems:
            print(f"INTEGRITY FAILURE: {p}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


HANDLERS = {"train": cmd_train, "certify": cmd_certify, "attack": cmd_attack,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdpcert", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        for key, (_, _default, help_text) in schema.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=help_text or None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items()
             if k in COMMANDS[args.command] and v is not None}
    try:
        opts = resolve_options(args.command, args.config, flags)
        return HANDLERS[args.command](opts)
    except (ConfigError, ParseError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, InvalidCertificateError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
