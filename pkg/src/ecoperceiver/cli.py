"""Command-line interface: ``ecoperceiver <command> [options]``.

Commands: synth, pipeline, split, train, eval, baseline, ablate. Flags of
the experiment commands are generated from :mod:`ecoperceiver.config`, so
``--help`` lists every key with its default. Exit status is 0 on success,
1 on an internal error and 2 on a usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from . import config, dataio, metrics, pipeline, plotting, trainer
from .checkpoint import CheckpointError
from .errors import ConfigError, InputError
from .model import log_parameter_count

logger = logging.getLogger("ecoperceiver")

HASH_MANIFEST = "MANIFEST.sha256"
CONFIG_ECHO = "config.txt"
# wall-clock files are excluded from the hash manifest
VOLATILE = ("timing.csv",)

COMMAND_GROUPS = {
    "synth": (),
    "pipeline": ("pipeline",),
    "split": (),
    "train": ("data", "model", "train", "run"),
    "eval": ("run", "baseline"),
    "baseline": ("data", "baseline"),
    "ablate": ("data", "model", "train", "run", "baseline", "ablate"),
}


class UsageError(ConfigError):
    """Bad command-line usage."""


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------
def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_hash_manifest(root) -> Path:
    """``<sha256>  <relative path>`` for every produced file, sorted by path."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != HASH_MANIFEST
                   and p.name not in VOLATILE)
    lines = [f"{_sha256(p)}  {p.relative_to(root).as_posix()}\n" for p in files]
    out = root / HASH_MANIFEST
    out.write_text("".join(lines), encoding="utf-8")
    return out


def _echo_config(out: Path, values: dict, extra: dict | None = None) -> None:
    text = config.render(values)
    if extra:
        text = "".join(f"# {k}={v}\n" for k, v in sorted(extra.items())) + text
    (out / CONFIG_ECHO).write_text(text, encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# processed corpus access
# ---------------------------------------------------------------------------
def _sites_root(corpus) -> Path:
    root = Path(corpus)
    return root / "sites" if (root / "sites").is_dir() else root


def load_processed_corpus(data_dir):
    """Sites, normalisation manifest and split plan written by ``pipeline``."""
    root = Path(data_dir)
    for name in ("manifest.txt", "split.txt"):
        if not (root / name).is_file():
            raise InputError(f"{root}: missing {name}; run the pipeline command first")
    manifest = pipeline.NormalizationManifest.load(root / "manifest.txt")
    plan = pipeline.SplitPlan.load(root / "split.txt")
    ids = dataio.site_ids(root / "sites")
    missing = sorted(set(plan.igbp_of()) - set(ids))
    if missing:
        raise InputError(f"{root}: split plan names sites without data: {', '.join(missing)}")
    sites = {sid: dataio.load_processed_site(root / "sites" / sid) for sid in ids}
    return sites, manifest, plan


def _manifest_digest(data_dir) -> str:
    return _sha256(Path(data_dir) / "manifest.txt")


def _window_sets(sites, manifest, plan, values, T):
    train_ids, val_ids = pipeline.train_val_split(plan.train_sites, values["val_fraction"], plan.seed)
    code = values["target_code"]

    def build(ids, stride=1):
        return dataio.windows_for_sites([sites[i] for i in ids], manifest, T, code, stride)

    return build(train_ids, values["stride"]), build(val_ids), build(plan.test_sites)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_synth(args, values) -> int:
    spec = dataio.CorpusSpec()
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise InputError(f"spec file not found: {path}")
        raw = {}
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InputError(f"{path}:{n}: expected key=value")
            raw[key.strip()] = value.strip()
        spec = dataio.CorpusSpec.from_dict(raw)
    out = _out_dir(args.out)
    dirs = dataio.generate_corpus(spec, out)
    (out / "synth_spec.txt").write_text(
        "".join(f"{k}={','.join(v) if isinstance(v, tuple) else v}\n" for k, v in sorted(spec.to_dict().items())),
        encoding="utf-8")
    write_hash_manifest(out)
    print(f"wrote {len(dirs)} synthetic sites to {out}")
    return 0


def cmd_pipeline(args, values) -> int:
    in_dir = Path(args.in_dir)
    ids = dataio.site_ids(in_dir)
    if not ids:
        raise InputError(f"{in_dir}: no site directories (expected <site>/meta.txt and <site>/releases/*.csv)")
    sites = [dataio.load_raw_site(in_dir / sid, values["max_qc"]) for sid in ids]
    igbp = {s.site_id: s.igbp for s in sites}
    if args.split:
        plan = pipeline.SplitPlan.load(args.split)
        if set(plan.igbp_of()) != set(igbp):
            raise InputError(f"split plan {args.split} does not cover exactly the input sites")
    else:
        plan = pipeline.stratified_split(igbp, values["split_seed"])
    by_id = {s.site_id: s for s in sites}
    manifest = pipeline.compute_manifest(
        {sid: by_id[sid].table for sid in plan.train_sites}, igbp=igbp,
        band_pixels={sid: by_id[sid].imagery.with_nan() for sid in plan.train_sites})

    out = _out_dir(args.out)
    (out / "reports").mkdir(exist_ok=True)
    for site in sites:
        site_dir = out / "sites" / site.site_id
        site_dir.mkdir(parents=True, exist_ok=True)
        pipeline.write_metadata(site.meta, site_dir / "meta.txt")
        pipeline.write_table_csv(site.table, site_dir / "fused.csv",
                                 {"release_id": "fused", "release_date": "1970-01-01"})
        dataio.write_imagery(site.imagery, site_dir / "imagery.csim")
        site.qc_report.to_csv(out / "reports" / f"{site.site_id}_qc.csv")
    manifest.save(out / "manifest.txt")
    plan.save(out / "split.txt")
    _echo_config(out, values, {"input": in_dir.as_posix()})
    write_hash_manifest(out)
    print(plan.distribution())
    print(f"processed {len(sites)} sites into {out}")
    return 0


def cmd_split(args, values) -> int:
    root = _sites_root(args.corpus)
    ids = dataio.site_ids(root)
    if not ids:
        raise InputError(f"{root}: no sites with meta.txt")
    igbp = {sid: pipeline.read_metadata(root / sid / "meta.txt")["igbp"] for sid in ids}
    plan = pipeline.stratified_split(igbp, args.seed)
    path = Path(args.out) if args.out else Path(args.corpus) / "split.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(path)
    print(plan.distribution())
    print(f"wrote {path}")
    return 0


def _train_seeds(values, model_cfg, sets, out: Path, meta: dict) -> dict:
    """Train one model per seed, sequentially; returns seed -> TrainResult."""
    wtr, wva, _ = sets
    mean, std = trainer.target_scaling(wtr)
    results = {}
    for seed in values["seeds"]:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg = config.train_config(values, seed)
        res = trainer.train(model_cfg, wtr, wva, cfg, mean, std, meta={**meta, "seed": seed})
        ckpt_io.save(res.checkpoint, run_dir / "checkpoint.epck")
        res.log.to_csv(run_dir / "train_log.csv")
        res.log.timing_csv(run_dir / "timing.csv")
        logger.info("seed %d: best epoch %d, val loss %.5f", seed, res.log.best_epoch,
                    res.checkpoint.meta["best_val_loss"])
        results[seed] = res
    return results


def cmd_train(args, values) -> int:
    sites, manifest, plan = load_processed_corpus(args.data)
    model_cfg = config.model_config(values)
    log_parameter_count(model_cfg)
    sets = _window_sets(sites, manifest, plan, values, model_cfg.T)
    out = _out_dir(args.out)
    meta = {"target_code": values["target_code"], "manifest_sha256": _manifest_digest(args.data)}
    results = _train_seeds(values, model_cfg, sets, out, meta)
    plotting.plot_loss_curves({f"seed {s}": r.log for s, r in results.items()}, out / "loss_curves.png")
    _echo_config(out, values)
    write_hash_manifest(out)
    print(f"trained {len(results)} seed(s); checkpoints under {out}")
    return 0


def _seed_predictions(checkpoints: dict, windows, batch_size: int, threads: int) -> dict:
    def run(seed):
        ck = checkpoints[seed]
        return trainer.predict(ck.to_model(), windows, ck.meta["target_mean"], ck.meta["target_std"], batch_size)

    seeds = sorted(checkpoints)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        preds = list(pool.map(run, seeds))
    return dict(zip(seeds, preds))


def _baseline_report(lb, windows, seeds) -> metrics.EvalReport:
    pred = lb.predict(windows)
    return metrics.evaluate({s: (lambda w, p=pred: p) for s in seeds}, windows, "linear")


def _write_eval_outputs(out: Path, report, base, windows, preds) -> None:
    report.to_csv(out / "eval_report.csv")
    base.to_csv(out / "baseline_report.csv")
    metrics.comparison_csv(metrics.compare(report, base), out / "summary.csv", report.model, base.model)
    plotting.plot_nse_by_igbp([report, base], out / "nse_by_igbp.png")
    first = min(preds)
    plotting.plot_predictions(preds[first], windows.targets, out / "predictions.png",
                              f"{report.model}, seed {first}")


def cmd_eval(args, values) -> int:
    sites, manifest, plan = load_processed_corpus(args.data)
    runs = Path(args.runs)
    checkpoints = {}
    for seed in values["seeds"]:
        checkpoints[seed] = ckpt_io.load(runs / f"seed_{seed}" / "checkpoint.epck")
    digest = _manifest_digest(args.data)
    Ts = {ck.config.T for ck in checkpoints.values()}
    codes = {ck.meta.get("target_code", "NEE_VUT_REF") for ck in checkpoints.values()}
    if len(Ts) != 1 or len(codes) != 1:
        raise InputError("checkpoints disagree on context window or target variable")
    for seed, ck in checkpoints.items():
        if ck.meta.get("manifest_sha256") not in (None, digest):
            raise InputError(f"seed {seed}: checkpoint was trained on a different normalisation manifest")
    T, code = Ts.pop(), codes.pop()
    test = dataio.windows_for_sites([sites[i] for i in plan.test_sites], manifest, T, code)
    train_all = dataio.windows_for_sites([sites[i] for i in plan.train_sites], manifest, T, code)
    preds = _seed_predictions(checkpoints, test, values["eval_batch_size"], values["threads"])
    report = metrics.evaluate({s: (lambda w, p=p: p) for s, p in preds.items()}, test, "ecoperceiver")
    lb = metrics.fit_linear_baseline(train_all, values["ridge_lambda"])
    base = _baseline_report(lb, test, sorted(preds))
    out = _out_dir(args.out)
    _write_eval_outputs(out, report, base, test, preds)
    _echo_config(out, values, {"target_code": code, "context_window": T})
    write_hash_manifest(out)
    for label, (a_nse, _, n) in report.summary().items():
        print(f"{label}: ecoperceiver NSE {a_nse:.4f} vs linear {base.summary()[label][0]:.4f} ({n} seeds)")
    return 0


def cmd_baseline(args, values) -> int:
    sites, manifest, plan = load_processed_corpus(args.data)
    T, code = values["context_window"], values["target_code"]
    train_all = dataio.windows_for_sites([sites[i] for i in plan.train_sites], manifest, T, code)
    test = dataio.windows_for_sites([sites[i] for i in plan.test_sites], manifest, T, code)
    lb = metrics.fit_linear_baseline(train_all, values["ridge_lambda"])
    out = _out_dir(args.out)
    report = _baseline_report(lb, test, [0])
    report.to_csv(out / "baseline_report.csv")
    names = metrics.baseline_feature_names()
    with (out / "coefficients.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "weight"])
        w.writerow(["intercept", repr(lb.intercept)])
        for i, wt in enumerate(lb.weights):
            w.writerow([names[i], repr(float(wt))])
    _echo_config(out, values)
    write_hash_manifest(out)
    for label, (nse, rmse, _) in report.summary().items():
        print(f"{label}: linear NSE {nse:.4f} RMSE {rmse:.4f}")
    return 0


ABLATION_COLUMNS = ["model", "nse_t_mean", "nse_t_std", "nse_median", "nse_iqr",
                    "rmse_t_mean", "rmse_t_std", "rmse_median", "rmse_iqr"]


def ablation_row(name: str, report: metrics.EvalReport) -> list:
    """Summary statistics over per-IGBP mean scores.

    The truncated mean and std drop classes whose mean NSE falls more than
    1.5 IQR below the lower quartile (none when fewer than 4 classes).
    """
    summary = report.summary()
    nse = np.array([v[0] for v in summary.values()])
    rmse = np.array([v[1] for v in summary.values()])
    keep = np.ones(len(nse), bool)
    if len(nse) >= 4:
        q1, q3 = np.percentile(nse, [25, 75])
        keep = nse >= q1 - 1.5 * (q3 - q1)

    def stats(x):
        q1, q3 = np.percentile(x, [25, 75])
        return [float(np.mean(x[keep])), float(np.std(x[keep])), float(np.median(x)), float(q3 - q1)]

    return [name, *stats(nse), *stats(rmse)]


def cmd_ablate(args, values) -> int:
    sites, manifest, plan = load_processed_corpus(args.data)
    variants = [("full", {})] + [(s, config.ablation_changes(s)) for s in values["switch"]]
    out = _out_dir(args.out)
    digest = _manifest_digest(args.data)
    rows, per_igbp, reports = [], {}, []
    for name, changes in variants:
        v = {**values, **changes}
        model_cfg = config.model_config(v)
        logger.info("variant %s: H_i=%d, %d parameters", name, model_cfg.encoding().H_i,
                    log_parameter_count(model_cfg))
        sets = _window_sets(sites, manifest, plan, v, model_cfg.T)
        vdir = out / name
        vdir.mkdir(exist_ok=True)
        meta = {"target_code": v["target_code"], "manifest_sha256": digest, "variant": name}
        results = _train_seeds(v, model_cfg, sets, vdir, meta)
        ckpts = {s: r.checkpoint for s, r in results.items()}
        preds = _seed_predictions(ckpts, sets[2], v["eval_batch_size"], v["threads"])
        report = metrics.evaluate({s: (lambda w, p=p: p) for s, p in preds.items()}, sets[2], name)
        report.to_csv(vdir / "eval_report.csv")
        reports.append(report)
        rows.append(ablation_row(name, report))
        per_igbp[name] = {k: s[0] for k, s in report.summary().items()}
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r[0], *(f"{x:.4f}" for x in r[1:])])
    plotting.plot_ablation(per_igbp, out / "ablation.png")
    plotting.plot_nse_by_igbp(reports, out / "ablation_nse.png", "NSE per IGBP class by variant")
    _echo_config(out, values)
    write_hash_manifest(out)
    for r in rows:
        print(f"{r[0]:<16} NSE t_mean {r[1]:.4f}  median {r[3]:.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "pipeline": cmd_pipeline, "split": cmd_split, "train": cmd_train,
            "eval": cmd_eval, "baseline": cmd_baseline, "ablate": cmd_ablate}

HELP = {
    "synth": "write a synthetic corpus with known ground truth",
    "pipeline": "fuse, downsample and QC-filter raw sites; write normalisation manifest and split",
    "split": "IGBP-stratified train/test site split",
    "train": "train one model per seed",
    "eval": "score trained checkpoints on test sites against the linear baseline",
    "baseline": "fit and score the linear baseline",
    "ablate": "train and score the ablation variants",
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecoperceiver", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, groups in COMMAND_GROUPS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        if name == "synth":
            p.add_argument("--spec", help="key=value corpus spec (keys of CorpusSpec); omitted = default corpus")
            p.add_argument("--out", required=True, help="output corpus directory")
        elif name == "pipeline":
            p.add_argument("--in", dest="in_dir", required=True, help="raw corpus directory")
            p.add_argument("--out", required=True, help="processed corpus directory")
            p.add_argument("--split", help="existing split plan; omitted = new split from --split-seed")
        elif name == "split":
            p.add_argument("--corpus", required=True, help="raw or processed corpus directory")
            p.add_argument("--seed", type=int, default=0, help="split seed")
            p.add_argument("--out", help="plan file (default: <corpus>/split.txt)")
        else:
            p.add_argument("--data", required=True, help="processed corpus directory (pipeline output)")
            if name == "eval":
                p.add_argument("--runs", required=True, help="output directory of the train command")
            p.add_argument("--out", required=True, help="output directory")
        if groups:
            p.add_argument("--config", help="key=value config file")
        for key in config.keys_for(groups):
            p.add_argument(key.flag, dest=key.name, default=None, metavar=key.name.upper(),
                           help=f"{key.help} (default: {key.render(key.default)})")
    return parser


def resolve_values(args) -> dict:
    groups = COMMAND_GROUPS[args.command]
    if not groups:
        return {}
    flags = {k.name: config.parse_value(k.name, getattr(args, k.name))
             for k in config.keys_for(groups) if getattr(args, k.name, None) is not None}
    file_values = config.read_config_file(args.config) if getattr(args, "config", None) else {}
    return config.resolve(flags, file_values, groups)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        values = resolve_values(args)
        with threadpool_limits(limits=values.get("threads", 1)):
            return COMMANDS[args.command](args, values)
    except (ConfigError, InputError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
