"""Command-line entry point: ``pssp {fetch,inspect,train,eval,decode,gradcheck}``.

Exit codes: 0 success, 1 unexpected failure or failed grad check, 2 invalid
configuration/arguments, 3 missing file, 4 malformed input file, 5 checksum
mismatch, 6 download failure, 7 training divergence.
"""
import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

from . import data, decode
from .autodiff import RngStream
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, data_dir, load_datasets
from .errors import ConfigError, FetchError, IntegrityError, MissingFileError, PSSPError
from .gradcheck import run_suite
from .netgraph import build_model, param_count
from .optim import train_loop

log = logging.getLogger("pssp")

DEFAULT_URL = "http://www.princeton.edu/~jzthree/datasets/ICML2014/"
MANIFEST = Path(__file__).parent / "manifest.json"


# ---------------------------------------------------------------- fetch

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_fetch(args):
    manifest_path = Path(args.manifest) if args.manifest else MANIFEST
    if not manifest_path.exists():
        raise MissingFileError(f"no such manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    base = args.url or manifest.get("url", DEFAULT_URL)
    out = Path(args.out) if args.out else data_dir()
    out.mkdir(parents=True, exist_ok=True)
    for name, expected in manifest["files"].items():
        target = out / name
        if target.exists():
            actual = sha256_file(target)
            if expected is None or actual == expected:
                print(f"{name}: present, skipping")
                continue
            raise IntegrityError(f"{target} exists but its sha256 {actual} does not match {expected}")
        url = base.rstrip("/") + "/" + name
        with tempfile.NamedTemporaryFile(dir=out, delete=False) as tmp:
            try:
                with urllib.request.urlopen(url, timeout=args.timeout) as resp:
                    shutil.copyfileobj(resp, tmp)
            except (urllib.error.URLError, OSError) as exc:
                tmp.close()
                Path(tmp.name).unlink(missing_ok=True)
                raise FetchError(
                    f"could not download {url} ({exc}). Download it by hand into {out} "
                    f"and re-run fetch to verify it.") from exc
        actual = sha256_file(tmp.name)
        if expected is not None and actual != expected:
            Path(tmp.name).unlink(missing_ok=True)
            raise IntegrityError(f"{name}: sha256 {actual} does not match manifest {expected}")
        Path(tmp.name).replace(target)
        if expected is None:
            log.warning("%s has no pinned checksum; sha256 is %s", name, actual)
        print(f"{name}: fetched, sha256 {actual}")
    return 0


# --------------------------------------------------------------- inspect

def cmd_inspect(args):
    layout = data.ColumnLayout.from_json(args.layout) if args.layout else data.DEFAULT_LAYOUT
    path = Path(args.data_path)
    if not path.exists():
        alt = data_dir() / path
        if not alt.exists():
            raise MissingFileError(f"no such data file: {path}")
        path = alt
    raw = data.parse_npy(path)
    records = [data.extract_features(raw[i], layout, f"protein{i}") for i in range(raw.shape[0])]
    summary = data.summarize(records)
    summary["raw_shape"] = list(raw.shape)
    print(json.dumps(summary, indent=2))
    return 0


# ----------------------------------------------------------------- train

def _experiment(args):
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    return cfg


def cmd_train(args):
    from .plotting import plot_learning_curve

    cfg = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, _, stats = load_datasets(cfg.data, cfg.seed)
    model = build_model(cfg.architecture, RngStream(cfg.seed).fork("init"))
    log.info("model with %d parameters, effective window %d", param_count(model), model.effective_window)
    meta = {"norm_stats": stats.to_dict() if stats else None, "experiment": cfg.to_dict()}
    ckpt = out / "best.ocf"

    def on_improve(m, iteration, q8):
        save_checkpoint(ckpt, m, iteration=iteration, val_q8=q8, **meta)

    result = train_loop(model, train, val, cfg.train, log_path=out / "log.csv", on_improve=on_improve)
    plot_learning_curve(result.rows, out / "learning_curve.png")
    print(json.dumps({"best_val_q8": result.best_val_q8, "best_iteration": result.best_iteration,
                      "iterations": result.iterations, "stopped_early": result.stopped_early,
                      "checkpoint": str(ckpt), "log": str(out / "log.csv")}, indent=2))
    return 0


# ------------------------------------------------------------ eval/decode

def _records_for(args, cfg, stats_dict):
    if getattr(args, "input", None):
        path = Path(args.input)
        if not path.exists():
            raise MissingFileError(f"no such input: {path}")
        records = data.load_records(path)
        if stats_dict:
            records = data.apply_normalization(data.NormStats.from_dict(stats_dict), records)
        return records
    if cfg is None:
        raise ConfigError("need --config (for its data section) or --input")
    train, val, test, _ = load_datasets(cfg.data, cfg.seed)
    split = {"train": train, "val": val, "test": test}[args.split]
    if not split:
        raise ConfigError(f"split {args.split!r} is empty for this config")
    return split


def _predict(model, records, beam, cond_model=None, blend=None, pair_model=None):
    preds = []
    for r in records:
        if pair_model is not None:
            preds.append(decode.ensemble_pair_uniform(model, pair_model, r))
        elif cond_model is not None:
            preds.append(decode.ensemble_beam_search(model, cond_model, r, beam=beam, blend=blend))
        elif model.cfg.conditioned:
            preds.append(decode.beam_search(model, r, beam=beam))
        else:
            preds.append(decode.greedy_decode(model, r))
    return preds


def cmd_eval(args):
    from .plotting import plot_confusion

    cfg = ExperimentConfig.load(args.config) if args.config else None
    if args.seed is not None and cfg is not None:
        cfg.seed = args.seed
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        stats = meta.get("norm_stats")
    else:
        if cfg is None:
            raise ConfigError("eval needs --checkpoint or --config")
        model = build_model(cfg.architecture, RngStream(cfg.seed).fork("init"))
        stats = None
    beam = args.beam if args.beam is not None else (cfg.decode.beam if cfg else 8)
    records = _records_for(args, cfg, stats)
    preds = _predict(model, records, beam)
    report = decode.EvalReport.from_predictions(
        np.stack(preds), np.stack([r.labels for r in records]), np.stack([r.mask for r in records]))
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        plot_confusion(report.confusion, out.with_suffix(".png"), title=f"Q8 = {report.q8:.3f}")
    print(text)
    return 0


def cmd_decode(args):
    cfg = ExperimentConfig.load(args.config) if args.config else None
    model, meta = load_checkpoint(args.checkpoint)
    cond = pair = None
    if args.cond_checkpoint:
        cond, _ = load_checkpoint(args.cond_checkpoint)
        if model.cfg.conditioned or not cond.cfg.conditioned:
            raise ConfigError("--checkpoint must be unconditioned and --cond-checkpoint conditioned")
    if args.pair_checkpoint:
        pair, _ = load_checkpoint(args.pair_checkpoint)
    beam = args.beam if args.beam is not None else (cfg.decode.beam if cfg else 8)
    blend = args.blend if args.blend is not None else (cfg.decode.blend if cfg else 0.45)
    if not 0.0 <= blend <= 1.0:
        raise ConfigError(f"--blend must lie in [0, 1], got {blend}")
    records = _records_for(args, cfg, meta.get("norm_stats"))
    preds = _predict(model, records, beam, cond_model=cond, blend=blend, pair_model=pair)
    lines = [decode.format_label_line(r.id, p, r) for r, p in zip(records, preds)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------- gradcheck

def cmd_gradcheck(args):
    rows = run_suite(seeds=tuple(range(args.seeds)))
    print(f"{'op':<22}{'seed':>5}{'max rel err':>14}{'tol':>9}  result")
    for op, seed, err, tol, ok in rows:
        print(f"{op:<22}{seed:>5}{err:>14.3e}{tol:>9.0e}  {'PASS' if ok else 'FAIL'}")
    failed = sum(not r[4] for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 1


# ------------------------------------------------------------------ main

def build_parser():
    p = argparse.ArgumentParser(prog="pssp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", help="download and verify the public dataset files")
    f.add_argument("--url", help="base URL (default: manifest's url)")
    f.add_argument("--out", help="target directory (default: $PSSP_DATA_DIR or ./data)")
    f.add_argument("--manifest", help="JSON manifest of file names and sha256 sums")
    f.add_argument("--timeout", type=float, default=60.0)
    f.set_defaults(func=cmd_fetch)

    i = sub.add_parser("inspect", help="summarise a raw dataset file")
    i.add_argument("data_path")
    i.add_argument("--layout", help="JSON column layout overriding the default")
    i.set_defaults(func=cmd_inspect)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--out", default="runs/latest")
    t.set_defaults(func=cmd_train)

    for name, helptext, func in (("eval", "score a model and write an EvalReport", cmd_eval),
                                 ("decode", "write decoded label strings", cmd_decode)):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=(name == "decode"))
        e.add_argument("--config")
        e.add_argument("--input", help="raw dataset file to decode instead of a config split")
        e.add_argument("--split", choices=("train", "val", "test"), default="test")
        e.add_argument("--beam", type=int)
        e.add_argument("--seed", type=int)
        e.add_argument("--deterministic", action="store_true")
        e.add_argument("--out")
        if name == "decode":
            e.add_argument("--cond-checkpoint", help="conditioned model for ensemble beam search")
            e.add_argument("--pair-checkpoint", help="second unconditioned model for an equal-weight ensemble")
            e.add_argument("--blend", type=float, help="weight on the conditioned model (default 0.45)")
        e.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    g.add_argument("--seeds", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PSSPError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
