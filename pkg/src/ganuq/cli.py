"""Command-line driver: generate / train / distill / evaluate / scan.

Every command reads one JSON config, derives all randomness from the single
global seed through named substreams, and writes deterministic artifacts
into the output directory (timestamps go only to the run.log sidecar), so a
rerun with the same config and seed is byte-identical.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import config_hash, load_config, portable_config
from .data import (
    ConfigError,
    DegenerateFeatureError,
    IngestionError,
    Normalizer,
    default_spec,
    extrapolation_split,
    fit_normalizer,
    generate_synthetic,
    load_csv,
    normalize_dataset,
    save_csv,
    uniform_split,
)
from .distill import (
    RegressorConfig,
    SystUncertainty,
    VarianceRegressor,
    VarianceRegressorPair,
    build_ensemble_pairs,
    build_reference_pairs,
    expanded_condition_sample,
    train_variance_regressor,
)
from .ensemble import AdversarialSchedule, load_ensemble, save_ensemble, train_adversarial_ensemble
from .evaluate import (
    Binning,
    ThresholdSpec,
    report_to_csv,
    report_to_svg,
    run_scan_experiment,
    run_uniform_experiment,
    sigma_syst_bands,
)
from .gan import GanConfig, GeneratorModel, TrainingError
from .mcdropout import StructuredDropoutSpec, train_mc_dropout_gan, virtual_ensemble
from .ndmath.serialize import dump_json, load_json, load_mlp, save_mlp
from .rng import substream

log = logging.getLogger("ganuq")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_INGESTION = 4


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _setup_logging():
    level = os.environ.get("GANUQ_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


class OutputLock:
    """Exclusive lock file guarding the output directory."""

    def __init__(self, out):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            ) from None
        os.write(fd, f"pid {os.getpid()}\n".encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _sidecar(out, message):
    """Timestamped progress note; the only artifact allowed to differ
    between reruns."""
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(Path(out) / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def normalizer_to_dict(nz):
    return {
        "cond_mean": nz.cond_mean.tolist(),
        "cond_scale": nz.cond_scale.tolist(),
        "resp_mean": nz.resp_mean.tolist(),
        "resp_scale": nz.resp_scale.tolist(),
    }


def normalizer_from_dict(doc):
    return Normalizer(
        np.array(doc["cond_mean"]),
        np.array(doc["cond_scale"]),
        np.array(doc["resp_mean"]),
        np.array(doc["resp_scale"]),
    )


def _write_resolved(cfg, out):
    dump_json(portable_config(cfg), Path(out) / "resolved_config.json")


def _load_dataset(cfg, out):
    if cfg["data"]["source"] == "csv":
        path = Path(cfg["data"]["csv_path"])
    else:
        path = Path(out) / "dataset.csv"
    try:
        return load_csv(path)
    except OSError as exc:
        raise IngestionError(f"cannot read dataset: {exc}") from None


def _split_uniform(cfg, ds):
    tf = cfg["data"]["split"]["train_fraction"]
    return uniform_split(ds, (tf, 1.0 - tf), seed=cfg["seed"])


def _split_bands(cfg, ds):
    s = cfg["data"]["split"]
    direction = None if s["direction"] is None else np.array(s["direction"])
    return extrapolation_split(
        ds,
        direction=direction,
        train_fraction=s["train_fraction"],
        n_test_bands=s["n_test_bands"],
        n_train_bands=s["n_train_bands"],
    )


def _train_part(cfg, ds):
    if cfg["data"]["split"]["kind"] == "uniform":
        return _split_uniform(cfg, ds)[0]
    return _split_bands(cfg, ds).train_dataset()


def _gan_config(cfg):
    return GanConfig(seed=cfg["seed"], **cfg["model"]["gan"])


def _load_normalizer(out):
    path = Path(out) / "normalizer.json"
    if not path.exists():
        raise ConfigError(f"missing {path}; run `train` first")
    return normalizer_from_dict(load_json(path))


def _load_uncertain_generator(cfg, out):
    """The trained generator family: real ensemble or virtual one."""
    model_dir = Path(out) / "model"
    if not model_dir.exists():
        raise ConfigError(f"missing {model_dir}; run `train` first")
    if cfg["model"]["method"] == "ensemble":
        return load_ensemble(model_dir)
    meta = load_json(model_dir / "dropout.json")
    gen = GeneratorModel(load_mlp(model_dir / "generator.json"), meta["d_noise"])
    spec = StructuredDropoutSpec(p=meta["p"], k=meta["k"], layers=meta["layers"])
    return virtual_ensemble(gen, spec, meta["n_masks"], meta["mask_seed"])


def _threshold_specs(cfg):
    return [
        ThresholdSpec(t["signal"], t["score_index"], t["target_efficiency"])
        for t in cfg["eval"]["thresholds"]
    ]


def _binning(cfg):
    b = cfg["eval"]["binning"]
    return Binning(feature=b["feature"], n_bins=b["n_bins"])


def _emit_reports(reports, out, prefix):
    rdir = Path(out) / "reports"
    rdir.mkdir(exist_ok=True)
    for rep in reports:
        stem = rdir / f"{prefix}_{rep.species}"
        dump_json(rep.to_dict(), stem.with_suffix(".json"))
        report_to_csv(rep, stem.with_suffix(".csv"))
        report_to_svg(rep, stem.with_suffix(".svg"))
        print(f"{rep.species} coverage {rep.coverage!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg, out):
    d = cfg["data"]
    if d["source"] != "synthetic":
        raise ConfigError("generate requires data.source = 'synthetic'")
    spec = default_spec(c=d["c"], k=d["k"], seed=cfg["seed"])
    ds = generate_synthetic(spec, d["n"])
    save_csv(ds, Path(out) / "dataset.csv")
    _write_resolved(cfg, out)
    _sidecar(out, f"generate: {len(ds)} rows, fingerprint {ds.fingerprint()[:12]}")
    log.info("wrote %d rows", len(ds))


def cmd_train(cfg, out):
    ds = _load_dataset(cfg, out)
    train = _train_part(cfg, ds)
    nz = fit_normalizer(train)
    train_norm = normalize_dataset(train, nz)
    gcfg = _gan_config(cfg)

    model_dir = Path(out) / "model"
    model_dir.mkdir(exist_ok=True)
    method = cfg["model"]["method"]
    if method == "ensemble":
        sched = AdversarialSchedule(**cfg["model"]["schedule"])
        ens = train_adversarial_ensemble(
            gcfg, sched, cfg["model"]["n_members"], train_norm
        )
        save_ensemble(ens, model_dir)
        training_log = ens.log
    else:
        drop = cfg["model"]["dropout"]
        spec = StructuredDropoutSpec(p=drop["p"], k=drop["k"])
        gen, critic, tlog = train_mc_dropout_gan(gcfg, spec, train_norm)
        save_mlp(gen.mlp, model_dir / "generator.json")
        save_mlp(critic.mlp, model_dir / "critic.json")
        dump_json(
            {
                "p": spec.p,
                "k": spec.k,
                "layers": spec.layers,
                "n_masks": drop["n_masks"],
                "mask_seed": cfg["seed"],
                "d_noise": gcfg.d_noise,
            },
            model_dir / "dropout.json",
        )
        training_log = {
            "ed_initial": tlog.ed_initial,
            "ed_final": tlog.ed_final,
            "dropout": tlog.dropout,
        }

    dump_json(normalizer_to_dict(nz), Path(out) / "normalizer.json")
    dump_json(training_log, Path(out) / "training_log.json")
    dump_json(
        {
            "method": method,
            "seed": cfg["seed"],
            "config_hash": config_hash(cfg),
            "dataset_fingerprint": ds.fingerprint(),
            "train_fingerprint": train.fingerprint(),
        },
        Path(out) / "manifest.json",
    )
    _write_resolved(cfg, out)
    _sidecar(out, f"train: method={method}")
    log.info("trained %s model", method)


def _grid_check(cfg, ug, pair, conds_norm, seed):
    """Built-in consistency check: compare the distilled sigma_syst against
    a direct Monte Carlo at a few training-support quantile points."""
    gc = cfg["distill"]["grid_check"]
    qs = np.linspace(0.1, 0.9, gc["n_points"])
    grid = np.quantile(conds_norm, qs, axis=0)
    n_mc = gc["n_mc"]
    rng = substream(seed, "distill", "grid-check")
    rows = []
    for point in grid:
        conds = np.tile(point, (n_mc, 1))
        ref = build_reference_pairs(
            lambda c, r: ug.sample_member(0, c, r), conds, rng
        )
        ens = build_ensemble_pairs(ug, conds, rng)
        var_pdf = 0.5 * ref.targets.mean(axis=0)
        var_tot = 0.5 * ens.targets.mean(axis=0)
        direct = np.sqrt(np.maximum(0.0, var_tot - var_pdf))
        distilled = SystUncertainty(pair)(point[None, :])[0]
        rows.append(
            {
                "point": point.tolist(),
                "direct": direct.tolist(),
                "distilled": distilled.tolist(),
            }
        )
    return rows


def cmd_distill(cfg, out):
    if not cfg["distill"]["enabled"]:
        raise ConfigError("distill.enabled is false")
    ds = _load_dataset(cfg, out)
    train = _train_part(cfg, ds)
    nz = _load_normalizer(out)
    ug = _load_uncertain_generator(cfg, out)
    seed = cfg["seed"]

    conds_norm = nz.apply_conditions(train.conditions)
    sample_conds = expanded_condition_sample(
        conds_norm, cfg["distill"]["n_conditions"], substream(seed, "distill", "conditions")
    )
    ref_pairs = build_reference_pairs(
        lambda c, r: ug.sample_member(0, c, r),
        sample_conds,
        substream(seed, "distill", "reference"),
    )
    ens_pairs = build_ensemble_pairs(
        ug, sample_conds, substream(seed, "distill", "ensemble")
    )
    rcfg = RegressorConfig(seed=seed, **cfg["distill"]["regressor"])
    f_r = train_variance_regressor(ref_pairs, rcfg)
    f_e = train_variance_regressor(ens_pairs, rcfg)
    pair = VarianceRegressorPair(f_r, f_e)

    ddir = Path(out) / "distill"
    ddir.mkdir(exist_ok=True)
    save_mlp(f_r.mlp, ddir / "f_r.json")
    save_mlp(f_e.mlp, ddir / "f_e.json")

    syst = SystUncertainty(pair)
    probe = syst(conds_norm)
    manifest = {
        "sources": {"f_r": "reference", "f_e": "ensemble"},
        "f_r_final_mse": f_r.train_mse[-1],
        "f_e_final_mse": f_e.train_mse[-1],
        "sigma_syst_mean": probe.mean(axis=0).tolist(),
        "sigma_syst_max": probe.max(axis=0).tolist(),
        "clamped_fraction": syst.clamped / probe.size,
        "n_pairs": len(sample_conds),
        "seed": seed,
        "config_hash": config_hash(cfg),
    }
    if cfg["distill"]["grid_check"]["enabled"]:
        manifest["grid_check"] = _grid_check(cfg, ug, pair, conds_norm, seed)
    dump_json(manifest, ddir / "manifest.json")
    _write_resolved(cfg, out)
    _sidecar(out, "distill: regressors written")
    log.info("distilled sigma_syst, clamped fraction %.3f", manifest["clamped_fraction"])


def _load_regressor_pair(out):
    ddir = Path(out) / "distill"
    if not (ddir / "f_r.json").exists():
        raise ConfigError(f"missing {ddir}/f_r.json; run `distill` first")
    return VarianceRegressorPair(
        VarianceRegressor(load_mlp(ddir / "f_r.json"), "reference"),
        VarianceRegressor(load_mlp(ddir / "f_e.json"), "ensemble"),
    )


def cmd_evaluate(cfg, out):
    if cfg["data"]["split"]["kind"] != "uniform":
        raise ConfigError("evaluate requires data.split.kind = 'uniform'")
    ds = _load_dataset(cfg, out)
    train, test = _split_uniform(cfg, ds)
    nz = _load_normalizer(out)
    ug = _load_uncertain_generator(cfg, out)
    reports = run_uniform_experiment(
        ug,
        train,
        test,
        _threshold_specs(cfg),
        _binning(cfg),
        substream(cfg["seed"], "evaluate"),
        normalizer=nz,
    )
    _emit_reports(reports, out, "uniform")
    if cfg["eval"]["use_sigma_syst"]:
        pair = _load_regressor_pair(out)
        syst = SystUncertainty(pair)
        distilled = [
            sigma_syst_bands(
                rep, syst, ug, test, _binning(cfg),
                substream(cfg["seed"], "evaluate", "sigma-syst"),
                normalizer=nz,
            )
            for rep in reports
        ]
        _emit_reports(distilled, out, "uniform_syst")
    _write_resolved(cfg, out)
    _sidecar(out, f"evaluate: {len(reports)} reports")


def cmd_scan(cfg, out):
    if cfg["data"]["split"]["kind"] != "bands":
        raise ConfigError("scan requires data.split.kind = 'bands'")
    ds = _load_dataset(cfg, out)
    split = _split_bands(cfg, ds)
    nz = _load_normalizer(out)
    ug = _load_uncertain_generator(cfg, out)
    reports = run_scan_experiment(
        ug,
        split,
        _threshold_specs(cfg),
        substream(cfg["seed"], "scan"),
        n_per_band=cfg["eval"]["n_per_band"],
        normalizer=nz,
        sample_seed=cfg["seed"],
    )
    _emit_reports(reports, out, "scan")
    _write_resolved(cfg, out)
    _sidecar(out, f"scan: {len(reports)} reports over {split.n_bands} bands")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "scan": cmd_scan,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ganuq",
        description="Uncertainty estimation for conditional generative simulators",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON path")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output=args.out)
        out = cfg["output"]
        if not out:
            raise ConfigError("no output directory: set --out or config `output`")
        Path(out).mkdir(parents=True, exist_ok=True)
        with OutputLock(out):
            COMMANDS[args.command](cfg, out)
        return EXIT_OK
    except (ConfigError, DegenerateFeatureError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION


if __name__ == "__main__":
    sys.exit(main())
