"""Command-line pipelines: prepare, pretrain, train, eval, sweep, simulate, report.

Settings resolve in this order, later winning: dataclass defaults, the
``--config`` file (INI sections ``run``, ``data``, ``vae``, ``train``,
``eval``, ``synth``, ``sweep``), the ``SLFR_SEED`` environment variable, and
command-line flags. Every command writes its resolved config and a
``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 bad config or input, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .data import (
    RULES,
    DataError,
    binarize,
    interaction_matrix,
    leave_one_out_split,
    load_dense_ratings,
    load_interactions,
    load_split,
    save_interactions,
    save_split,
)
from .evaluation import EvalReport, evaluate, load_labels, save_labels
from .experiments import GAMMA_GRID
from .model import MfModel
from .optim import DivergenceError
from .synth import SynthConfig, generate_world, save_round_stats, save_world, simulate_exposure, \
    true_label_testset
from .train import TrainConfig, train_slfr
from .vae import ConfounderReps, VaeBlock, VaeConfig, extract_confounders, latent_terms, train_vae

logger = logging.getLogger("slfr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _fields(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "seed":  # driven by run.seed
            continue
        t = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = {"int": int, "float": float, "bool": bool}.get(t, str)
    return out


SECTIONS: dict[str, dict[str, type]] = {
    "run": {"seed": int, "out": str},
    "data": {"input": str, "format": str, "rule": str, "split": str},
    "vae": {**_fields(VaeConfig), "side": str, "reps": str},
    "train": _fields(TrainConfig),
    "eval": {"ks": str, "labels": str, "model": str, "runs": str},
    "synth": _fields(SynthConfig),
    "sweep": {"param": str, "grid": str},
}

def _defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls) if f.name != "seed"}


DEFAULTS = {
    "run": {"seed": 0},
    "train": _defaults(TrainConfig),
    "synth": _defaults(SynthConfig),
    "data": {"format": "csv", "rule": "passthrough"},
    "vae": {**_defaults(VaeConfig), "side": "both"},
    "eval": {"ks": "10,20,30", "labels": "heldout"},
    "sweep": {"param": "gamma"},
}


def _coerce(section: str, key: str, raw):
    kind = SECTIONS[section][key]
    if raw is None or not isinstance(raw, str):
        return raw
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def read_config(path) -> dict[str, dict]:
    """Parse an INI file, rejecting unknown sections and keys."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; known: {', '.join(SECTIONS)}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = _coerce(section, key, raw)
    return out


def resolve(args: argparse.Namespace) -> dict[str, dict]:
    cfg = {s: dict(DEFAULTS.get(s, {})) for s in SECTIONS}
    if getattr(args, "config", None):
        for s, vals in read_config(args.config).items():
            cfg[s].update(vals)
    if os.environ.get("SLFR_SEED"):
        cfg["run"]["seed"] = _coerce("run", "seed", os.environ["SLFR_SEED"])
    for dest, val in vars(args).items():
        if "." in dest and val is not None:
            s, k = dest.split(".", 1)
            cfg[s][k] = _coerce(s, k, val) if isinstance(val, str) else val
    if not cfg["run"].get("out"):
        raise ConfigError("no output directory: pass --out or set [run] out")
    return cfg


def _build(cls, section: dict, seed: int):
    kwargs = {k: v for k, v in section.items() if k in {f.name for f in dataclasses.fields(cls)}}
    try:
        return cls(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _require(cfg, section, key, flag):
    val = cfg[section].get(key)
    if val in (None, ""):
        raise ConfigError(f"missing {flag} (or [{section}] {key})")
    return val


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad numeric list {text!r}") from None


# ---------------------------------------------------------------------------
# outputs


def _sha1(path) -> str:
    h = hashlib.sha1()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_resolved(cfg: dict, out_dir: str) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        vals = {k: str(v) for k, v in sorted(cfg[section].items()) if v is not None}
        if vals:
            parser[section] = vals
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        parser.write(fh)


def write_manifest(command: str, cfg: dict, out_dir: str) -> None:
    """List every file under ``out_dir`` with its digest; no wall-clock fields, so reruns match."""
    files = []
    for root, _, names in os.walk(out_dir):
        for name in sorted(names):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            if rel == "manifest.json":
                continue
            files.append({"path": rel, "bytes": os.path.getsize(path), "sha1": _sha1(path)})
    files.sort(key=lambda f: f["path"])
    doc = {"command": command, "version": __version__, "seed": cfg["run"]["seed"],
           "config": {s: v for s, v in cfg.items() if v}, "files": files}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg) -> None:
    path = _require(cfg, "data", "input", "--input")
    fmt, rule, seed = cfg["data"]["format"], cfg["data"]["rule"], cfg["run"]["seed"]
    if rule not in RULES:
        raise ConfigError(f"unknown rule {rule!r}; valid rules: {', '.join(RULES)}")
    if fmt == "dense":
        d = load_dense_ratings(path)
    else:
        d = load_interactions(path, fmt)
    split = leave_one_out_split(binarize(d, rule), seed=seed, rule=rule)
    save_split(split, cfg["run"]["out"])
    print(f"split: {split.n_users} users, {split.n_items} items, {len(split.train)} train rows, "
          f"{len(split.test)} test users")


def _vae_blocks(cfg, split):
    vcfg = _build(VaeConfig, cfg["vae"], cfg["run"]["seed"])
    return vcfg, {"user": (interaction_matrix(split, "by_user"), vcfg),
                  "item": (interaction_matrix(split, "by_item"),
                           dataclasses.replace(vcfg, seed=vcfg.seed + 1))}


def cmd_pretrain(cfg) -> None:
    split = load_split(_require(cfg, "data", "split", "--split"))
    out = cfg["run"]["out"]
    side = cfg["vae"]["side"]
    if side not in ("user", "item", "both"):
        raise ConfigError(f"--side must be user, item or both, not {side!r}")
    _, blocks = _vae_blocks(cfg, split)
    for name in ("user", "item"):
        if side not in (name, "both"):
            continue
        matrix, vcfg = blocks[name]
        block, log = train_vae(matrix, vcfg, return_log=True)
        block.save(os.path.join(out, f"vae_{name}.npz"), dataclasses.asdict(vcfg))
        _write_rows(os.path.join(out, f"vae_{name}.log.csv"), log)
        print(f"{name} block: final loss {log[-1]['loss']:.4f}")
    paths = [os.path.join(out, f"vae_{n}.npz") for n in ("user", "item")]
    if all(os.path.exists(p) for p in paths):
        ub, ib = (VaeBlock.load(p) for p in paths)
        reps = extract_confounders(ub, ib, blocks["user"][0], blocks["item"][0])
        reps.save(os.path.join(out, "reps.npz"))
        print(f"confounder reps: d={reps.d}")


def _load_reps(cfg, gamma_needed: bool):
    path = cfg["vae"].get("reps")
    if not path:
        if gamma_needed:
            raise ConfigError("gamma > 0 needs --reps")
        return None
    if not os.path.exists(path):
        raise ConfigError(f"reps file not found: {path}")
    return ConfounderReps.load(path)


def cmd_train(cfg) -> None:
    split = load_split(_require(cfg, "data", "split", "--split"))
    tcfg = _build(TrainConfig, cfg["train"], cfg["run"]["seed"])
    reps = _load_reps(cfg, tcfg.gamma > 0)
    prefix = os.path.join(cfg["run"]["out"], "model")
    try:
        res = train_slfr(split, reps, tcfg)
    except DivergenceError as exc:
        if getattr(exc, "model", None) is not None:
            exc.model.save(prefix + ".partial.npz")
        raise
    res.save(prefix)
    print(f"best epoch {res.best_epoch}, valid ndcg@10 {res.best_valid_ndcg:.4f}")


def _eval_report(model, split, cfg, extra_config=None) -> EvalReport:
    ks = [int(k) for k in _floats(cfg["eval"]["ks"])]
    if not ks or min(ks) < 1:
        raise ConfigError("--ks needs positive cutoffs")
    labels = cfg["eval"]["labels"]
    conf = {"eval": cfg["eval"], "seed": cfg["run"]["seed"], **(extra_config or {})}
    if labels == "heldout":
        return evaluate(model, split, ks, config=conf)
    if not os.path.exists(labels):
        raise ConfigError(f"label file not found: {labels}")
    try:
        return evaluate(model, split, ks, "external", load_labels(labels), config=conf)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(cfg) -> None:
    split = load_split(_require(cfg, "data", "split", "--split"))
    path = _require(cfg, "eval", "model", "--model")
    if not os.path.exists(path):
        raise ConfigError(f"model not found: {path}")
    m = MfModel.load(path)
    if (m.n_users, m.n_items) != (split.n_users, split.n_items):
        raise ConfigError(f"model shape {(m.n_users, m.n_items)} does not match split")
    rep = _eval_report(m, split, cfg, {"model": path})
    out = cfg["run"]["out"]
    rep.to_json(os.path.join(out, "report.json"))
    rep.append_csv(os.path.join(out, "reports.csv"))
    for k, v in sorted(rep.metrics.items()):
        print(f"recall@{k} {v['recall']:.4f}  ndcg@{k} {v['ndcg']:.4f}")


def cmd_sweep(cfg) -> None:
    split = load_split(_require(cfg, "data", "split", "--split"))
    param = cfg["sweep"]["param"]
    if param not in ("gamma", "alpha"):
        raise ConfigError(f"--param must be gamma or alpha, not {param!r}")
    grid_text = cfg["sweep"].get("grid")
    grid = _floats(grid_text) if grid_text else (list(GAMMA_GRID) if param == "gamma" else [1.0, 5.0, 10.0])
    seed, out = cfg["run"]["seed"], cfg["run"]["out"]
    rows = []
    reps = None
    for value in grid:
        tcfg = _build(TrainConfig, cfg["train"], seed)
        row = {param: value}
        if param == "gamma":
            tcfg = dataclasses.replace(tcfg, gamma=value)
            reps = _load_reps(cfg, value > 0) if reps is None else reps
        else:
            vcfg, blocks = _vae_blocks(cfg, split)
            trained = {n: train_vae(mat, dataclasses.replace(vc, alpha=value)) for n, (mat, vc) in blocks.items()}
            row["index_code_mi_user"] = latent_terms(trained["user"], blocks["user"][0], seed).index_code_mi
            reps = extract_confounders(trained["user"], trained["item"], blocks["user"][0], blocks["item"][0])
        res = train_slfr(split, reps if tcfg.gamma > 0 else None, tcfg)
        rep = _eval_report(res.model, split, cfg, {param: value})
        point = os.path.join(out, "points", f"{param}={value:g}")
        os.makedirs(point, exist_ok=True)
        rep.to_json(os.path.join(point, "report.json"))
        row.update({"best_epoch": res.best_epoch, "valid_ndcg@10": res.best_valid_ndcg})
        row.update(rep.flat())
        rows.append(row)
        print(f"{param}={value:g}: " + " ".join(f"{k}={v:.4f}" for k, v in rep.flat().items()
                                                if "@" in k))
    _write_rows(os.path.join(out, "sweep.csv"), rows)


def cmd_simulate(cfg) -> None:
    scfg = _build(SynthConfig, cfg["synth"], cfg["run"]["seed"])
    out = cfg["run"]["out"]
    world = generate_world(scfg)
    data, stats = simulate_exposure(world, scfg)
    save_world(world, scfg, out)
    save_interactions(data, os.path.join(out, "interactions.csv"))
    save_round_stats(stats, os.path.join(out, "round_stats.csv"))
    split = leave_one_out_split(data, seed=scfg.seed)
    save_split(split, os.path.join(out, "split"))
    labels, excluded = true_label_testset(world, split)
    save_labels(labels, os.path.join(out, "true_labels.csv"))
    for s in stats:
        print(f"round {s.round}: fpr {s.false_positive_rate:.4f} fnr {s.false_negative_rate:.4f} "
              f"positive rate {s.positive_rate:.4f}")
    if excluded:
        print(f"{excluded} users have no unobserved true positives and are left out of true_labels.csv")


def _collect_runs(runs_dir: str) -> list[dict]:
    rows = []
    for root, _, names in sorted(os.walk(runs_dir)):
        if "report.json" in names:
            rep = EvalReport.from_json(os.path.join(root, "report.json"))
            rows.append({"run": os.path.relpath(root, runs_dir), **rep.flat()})
    return rows


def format_table(rows: list[dict]) -> str:
    cols = list(dict.fromkeys(k for r in rows for k in r))
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_report(cfg) -> None:
    runs = _require(cfg, "eval", "runs", "--runs")
    if not os.path.isdir(runs):
        raise ConfigError(f"runs directory not found: {runs}")
    rows = _collect_runs(runs)
    if not rows:
        raise ConfigError(f"no report.json found under {runs}")
    out = cfg["run"]["out"]
    text = format_table(rows)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    cols = list(dict.fromkeys(k for r in rows for k in r))
    _write_rows(os.path.join(out, "report.csv"), [{c: r.get(c, "") for c in cols} for r in rows])
    print(text)


COMMANDS = {"prepare": cmd_prepare, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "simulate": cmd_simulate, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing


def _add(p, flag, dest, kind=str, **kw):
    p.add_argument(flag, dest=dest, type=kind, default=None, **kw)


def _train_flags(p):
    _add(p, "--gamma", "train.gamma", float)
    _add(p, "--lr", "train.lr", float)
    _add(p, "--l2", "train.l2", float)
    _add(p, "--dim", "train.d", int)
    _add(p, "--epochs", "train.epochs", int)
    _add(p, "--patience", "train.patience", int)
    _add(p, "--neg-ratio", "train.neg_ratio", int)
    _add(p, "--batch", "train.batch", int)
    _add(p, "--composition", "train.composition", choices=("literal", "additive"))
    _add(p, "--ips-eta", "train.ips_eta", float)


def _vae_flags(p, prefix=""):
    _add(p, "--alpha", "vae.alpha", float)
    _add(p, "--dz", "vae.d_z", int)
    _add(p, "--hidden", "vae.hidden", int)
    _add(p, f"--{prefix}epochs", "vae.epochs", int)
    _add(p, f"--{prefix}batch", "vae.batch", int)
    _add(p, f"--{prefix}lr", "vae.lr", float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slfr", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file with [run]/[data]/[vae]/[train]/[eval]/[synth]/[sweep]")
        _add(p, "--out", "run.out", help="output directory")
        _add(p, "--seed", "run.seed", int)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("prepare", "load raw interactions, binarize and split")
    _add(p, "--input", "data.input")
    _add(p, "--format", "data.format", choices=("csv", "tsv", "dense"))
    _add(p, "--rule", "data.rule")

    p = command("pretrain", "fit the user/item VAE blocks and extract confounder reps")
    _add(p, "--split", "data.split")
    _add(p, "--side", "vae.side")
    _vae_flags(p)

    p = command("train", "train the MF model with the confounder-aware loss")
    _add(p, "--split", "data.split")
    _add(p, "--reps", "vae.reps")
    _train_flags(p)

    p = command("eval", "rank all items and report Recall@K / NDCG@K")
    _add(p, "--model", "eval.model")
    _add(p, "--split", "data.split")
    _add(p, "--Ks", "eval.ks", help="comma-separated cutoffs")
    _add(p, "--labels", "eval.labels", help="'heldout' or a user,item CSV")

    p = command("sweep", "train and evaluate over a grid of gamma or alpha")
    _add(p, "--param", "sweep.param", choices=("gamma", "alpha"))
    _add(p, "--grid", "sweep.grid", help="comma-separated values")
    _add(p, "--split", "data.split")
    _add(p, "--reps", "vae.reps")
    _add(p, "--Ks", "eval.ks")
    _add(p, "--labels", "eval.labels")
    _train_flags(p)
    _vae_flags(p, prefix="vae-")

    p = command("simulate", "generate a confounded world and run the feedback loop")
    for key, kind in SECTIONS["synth"].items():
        _add(p, "--" + key.replace("_", "-"), f"synth.{key}", kind)

    p = command("report", "tabulate report.json files under a runs directory")
    _add(p, "--runs", "eval.runs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report" and args.__dict__.get("run.out") is None:
            args.__dict__["run.out"] = args.__dict__.get("eval.runs")
        cfg = resolve(args)
        out = cfg["run"]["out"]
        os.makedirs(out, exist_ok=True)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg)
        write_resolved(cfg, out)
        write_manifest(args.command, cfg, out)
        logger.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except FileNotFoundError as exc:
        print(f"slfr {args.command}: error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DataError) as exc:
        print(f"slfr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"slfr {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"slfr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
