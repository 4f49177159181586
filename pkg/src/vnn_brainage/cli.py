"""Command-line entry point: ``vnn-brainage {gen,train,brainage,transfer,stats}``.

All commands share one experiment directory (``--out``)::

    <out>/data/       cohort_m<m>.csv, <site>_m<m>.csv, ground_truth.json
    <out>/train/      ensemble.json, train_reports.json
    <out>/brainage/   delta_age.json, delta_age.csv, boxplot.csv, corrector.json
    <out>/transfer/   transfer_<tag>.json, boxplot_<tag>.csv
    <out>/stats/      stats.json, tukey.csv

Each command also writes ``manifest.json`` (config hash, seed, library
versions, output checksums). Nothing time-dependent is written, so repeated
runs are byte-identical.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
from dataclasses import replace
import sys
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .brainage import (
    DeltaAgeReport,
    corrector_from_dict,
    corrector_to_dict,
    evaluate_cohort,
    prepare_cohort,
    protocol_train_config,
)
from .dataset import SplitSpec, load_cohort, save_cohort
from .errors import DataError, NumericalError
from .stats import group_statistics
from .synth import GraphonSpec, PathologySpec, ScaleSpec, SiteSpec, generate_multiscale, generate_site_variant
from .synth import write_sample
from .training import TrainConfig, load_ensemble, save_ensemble, train_ensemble
from .transfer import TransferConfig, transfer_pipeline
from .vnn import VnnConfig

log = logging.getLogger("vnn_brainage")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_GROUP_MAP = {"type": "object", "propertyNames": {"enum": ["HC", "MCI", "AD", "OTHER"]}, "additionalProperties": _NUM}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "vnn-brainage experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 10},
                "scales": {"type": "array", "items": _POS_INT, "minItems": 1},
                "fine_size": {"type": "integer", "minimum": 2},
                "length_scale": {"type": "number", "exclusiveMinimum": 0},
                "variance": {"type": "number", "minimum": 0},
                "nugget": {"type": "number", "minimum": 0},
                "shifts": _GROUP_MAP,
                "proportions": _GROUP_MAP,
                "sites": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["tag", "m"],
                        "properties": {
                            "tag": {"type": "string", "pattern": "^[A-Za-z0-9_-]+$"},
                            "m": _POS_INT,
                            "gain_sd": {"type": "number", "minimum": 0},
                            "offset_sd": {"type": "number", "minimum": 0},
                            "smoothness": {"type": "number", "exclusiveMinimum": 0},
                            "n": {"type": "integer", "minimum": 10},
                            "proportions": _GROUP_MAP,
                        },
                    },
                },
            },
        },
        "source": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"path": {"type": "string"}, "scale": _POS_INT},
        },
        "vnn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": _POS_INT,
                "taps_per_layer": {"type": "integer", "minimum": 0},
                "widths": {"type": "array", "items": _POS_INT, "minItems": 1},
                "nonlinearity": {"enum": ["relu", "tanh"]},
                "readout": {"enum": ["mean_then_linear"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": _POS_INT,
                "ensemble_size": _POS_INT,
                "train_frac": _NUM,
                "val_frac": _NUM,
                "test_frac": _NUM,
                "stratify_by_group": {"type": "boolean"},
                "covariance_binding": {"enum": ["train_split", "whole"]},
                "clip_norm": {"type": ["number", "null"]},
            },
        },
        "protocol": {"enum": ["hc_only", "full_cohort"]},
        "standardize_features": {"type": "boolean"},
        "eval_binding": {"enum": ["whole", "train_pool"]},
        "transfer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rebias": {"enum": ["keep_source_corrector", "refit_on_target_hc"]},
                "targets": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "minProperties": 1,
                        "maxProperties": 1,
                        "properties": {"path": {"type": "string"}, "scale": _POS_INT, "site": {"type": "string"}},
                    },
                },
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "synth": {"n": 300, "scales": [50, 100, 300, 500], "sites": [{"tag": "siteB", "m": 96, "n": 300}]},
    "source": {"scale": 100},
    "vnn": {"layers": 2, "taps_per_layer": 1, "widths": [8, 8]},
    "train": {"ensemble_size": 10},
    "protocol": "hc_only",
    "standardize_features": True,
    "eval_binding": "whole",
    "transfer": {"rebias": "refit_on_target_hc", "targets": [{"scale": 50}, {"scale": 300}, {"scale": 500}]},
}


class UsageError(Exception):
    """Bad flags or an invalid config document."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | None, seed: int | None = None) -> dict:
    """Validated config with defaults filled in and the ``--seed`` override applied."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["vnn"].get("layers", 2) != len(cfg["vnn"]["widths"]):
        raise UsageError("config error at vnn: one width per layer is required")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# -- config -> domain objects -------------------------------------------------


def vnn_config(cfg: dict) -> VnnConfig:
    v = cfg["vnn"]
    widths = tuple(v["widths"])
    return VnnConfig(
        layers=v.get("layers", len(widths)),
        taps_per_layer=v.get("taps_per_layer", 1),
        widths=widths,
        nonlinearity=v.get("nonlinearity", "relu"),
        readout=v.get("readout", "mean_then_linear"),
        seed=cfg["seed"],
    )


def train_config(cfg: dict, workers: int = 1) -> TrainConfig:
    t = dict(cfg["train"])
    split_keys = ("train_frac", "val_frac", "test_frac", "stratify_by_group")
    split_spec = SplitSpec(seed=cfg["seed"], **{k: t.pop(k) for k in split_keys if k in t})
    return TrainConfig(split=split_spec, workers=workers, **t)


def _dirs(out: Path) -> dict[str, Path]:
    return {name: out / name for name in ("data", "train", "brainage", "transfer", "stats")}


def source_path(cfg: dict, out: Path) -> Path:
    src = cfg["source"]
    if "path" in src:
        return Path(src["path"])
    return _dirs(out)["data"] / f"cohort_m{src['scale']}.csv"


def target_path(target: dict, cfg: dict, out: Path) -> Path:
    data = _dirs(out)["data"]
    if "path" in target:
        return Path(target["path"])
    if "scale" in target:
        return data / f"cohort_m{target['scale']}.csv"
    sites = {s["tag"]: s for s in cfg["synth"].get("sites", [])}
    if target["site"] not in sites:
        raise UsageError(f"transfer target site {target['site']!r} is not defined under synth.sites")
    return data / f"{target['site']}_m{sites[target['site']]['m']}.csv"


def _read_cohort(path: Path, tag: str = ""):
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    return load_cohort(path, tag or path.stem)


# -- outputs ---------------------------------------------------------------------


def _write(path: Path, text: str, written: dict[str, str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    written[path.name] = hashlib.sha256(text.encode()).hexdigest()


def write_manifest(directory: Path, command: str, cfg: dict, outputs: dict[str, str], inputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "inputs": inputs,
        "outputs": dict(sorted(outputs.items())),
        "versions": {
            "vnn_brainage": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1) + "\n"


# -- commands -------------------------------------------------------------------


def cmd_gen(cfg: dict, out: Path) -> None:
    s = cfg["synth"]
    seed = cfg["seed"]
    gspec = GraphonSpec(
        fine_size=s.get("fine_size", 1500),
        length_scale=s.get("length_scale", 0.08),
        variance=s.get("variance", 0.01),
        nugget=s.get("nugget", 0.0),
        seed=seed,
    )
    pkw = {k: s[k] for k in ("shifts", "proportions") if k in s}
    sample = generate_multiscale(gspec, ScaleSpec(tuple(s["scales"])), s["n"], PathologySpec(**pkw))
    data = _dirs(out)["data"]
    written = {p.name: _file_digest(p) for p in write_sample(sample, data)}
    for i, site in enumerate(s.get("sites", [])):
        base = sample
        if "n" in site:  # fresh subjects from the same population, with their own case mix
            site_pkw = dict(pkw)
            if "proportions" in site:
                site_pkw["proportions"] = site["proportions"]
            base = generate_multiscale(
                replace(gspec, seed=seed + 1000 + i),
                ScaleSpec((site["m"],)),
                site["n"],
                PathologySpec(**site_pkw),
                id_prefix=f"{site['tag']}-",
            )
        spec = SiteSpec(
            gain_sd=site.get("gain_sd", 0.05),
            offset_sd=site.get("offset_sd", 0.05),
            smoothness=site.get("smoothness", 0.2),
            m=site["m"],
            seed=seed + 1 + i,
            tag=site["tag"],
        )
        cohort = generate_site_variant(base, spec)
        path = data / f"{site['tag']}_m{site['m']}.csv"
        save_cohort(cohort, path)
        written[path.name] = _file_digest(path)
    write_manifest(data, "gen", cfg, written, {})


def cmd_train(cfg: dict, out: Path, workers: int = 1) -> None:
    src = source_path(cfg, out)
    cohort = _read_cohort(src)
    tcfg = protocol_train_config(cohort, cfg["protocol"], train_config(cfg, workers))
    work = prepare_cohort(cohort, cfg["standardize_features"])
    ens = train_ensemble(work, vnn_config(cfg), tcfg)
    d = _dirs(out)["train"]
    d.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}
    save_ensemble(ens, d / "ensemble.json")
    written["ensemble.json"] = _file_digest(d / "ensemble.json")
    reports = [dict(member=i, **r.to_dict()) for i, r in enumerate(ens.reports)]
    summary = {
        "members": len(reports),
        # later members resplit the pool, so only member 0's test split is held out from everything it saw
        "test_mae": ens.reports[0].test_mae,
        "test_set": f"member 0 {ens.reports[0].test_set}",
        "reports": reports,
    }
    _write(d / "train_reports.json", _dumps(summary), written)
    write_manifest(d, "train", cfg, written, {src.name: _file_digest(src)})


def _load_ensemble(out: Path):
    path = _dirs(out)["train"] / "ensemble.json"
    if not path.exists():
        raise DataError(f"no trained ensemble at {path}; run `train` first")
    return load_ensemble(path), path


def cmd_brainage(cfg: dict, out: Path) -> None:
    src = source_path(cfg, out)
    cohort = _read_cohort(src)
    ens, ens_path = _load_ensemble(out)
    tcfg = protocol_train_config(cohort, cfg["protocol"], train_config(cfg))
    res = evaluate_cohort(
        ens,
        cohort,
        tcfg,
        protocol=cfg["protocol"],
        standardize_features=cfg["standardize_features"],
        eval_binding=cfg["eval_binding"],
    )
    res.report.metadata["seed"] = cfg["seed"]
    d = _dirs(out)["brainage"]
    written: dict[str, str] = {}
    _write(d / "delta_age.json", res.report.to_json() + "\n", written)
    _write(d / "delta_age.csv", res.report.to_csv(), written)
    _write(d / "boxplot.csv", res.report.boxplot_csv(), written)
    _write(d / "corrector.json", _dumps(corrector_to_dict(res.corrector)), written)
    write_manifest(d, "brainage", cfg, written, {src.name: _file_digest(src), ens_path.name: _file_digest(ens_path)})


def _target_tag(target: dict, path: Path) -> str:
    if "scale" in target:
        return f"m{target['scale']}"
    if "site" in target:
        return target["site"]
    return path.stem


def cmd_transfer(cfg: dict, out: Path) -> None:
    src = source_path(cfg, out)
    source = _read_cohort(src)
    ens, ens_path = _load_ensemble(out)
    corr_path = _dirs(out)["brainage"] / "corrector.json"
    if not corr_path.exists():
        raise DataError(f"no bias corrector at {corr_path}; run `brainage` first")
    corrector = corrector_from_dict(json.loads(corr_path.read_text(encoding="utf-8")))
    tcfg = TransferConfig(cfg["transfer"]["rebias"], standardize_features=cfg["standardize_features"])
    d = _dirs(out)["transfer"]
    written: dict[str, str] = {}
    inputs = {src.name: _file_digest(src), ens_path.name: _file_digest(ens_path), corr_path.name: _file_digest(corr_path)}
    for target in cfg["transfer"]["targets"]:
        path = target_path(target, cfg, out)
        tgt = _read_cohort(path)
        inputs[path.name] = _file_digest(path)
        paired = sorted(tgt.ids) == sorted(source.ids)
        rep = transfer_pipeline(ens, corrector, tgt, tcfg, source=source if paired else None)
        rep.metadata["seed"] = cfg["seed"]
        tag = _target_tag(target, path)
        _write(d / f"transfer_{tag}.json", rep.to_json() + "\n", written)
        _write(d / f"boxplot_{tag}.csv", rep.report.boxplot_csv(), written)
    write_manifest(d, "transfer", cfg, written, inputs)


def _load_report(path: Path) -> DeltaAgeReport:
    if not path.exists():
        raise DataError(f"report not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"report is not valid JSON: {exc}") from exc
    if "delta_age" in doc:  # a transfer report wraps the Delta-Age report
        doc = doc["delta_age"]
    if "records" not in doc:
        raise DataError("report has no per-subject records")
    return DeltaAgeReport.from_dict(doc)


def cmd_stats(cfg: dict, out: Path, report_path: Path | None = None) -> None:
    path = report_path or _dirs(out)["brainage"] / "delta_age.json"
    report = _load_report(path)
    gs = group_statistics(report)
    d = _dirs(out)["stats"]
    written: dict[str, str] = {}
    doc = {"report": path.name, "group_mean_delta_age": report.group_mean_delta(), **gs.to_dict()}
    _write(d / "stats.json", _dumps(doc), written)
    _write(d / "tukey.csv", gs.tukey.to_csv(), written)
    write_manifest(d, "stats", cfg, written, {path.name: _file_digest(path)})


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vnn-brainage", description="VNN brain-age experiments on cortical-thickness cohorts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "generate synthetic multi-scale and multi-site cohorts",
        "train": "train the VNN ensemble on the source cohort",
        "brainage": "bias-corrected brain age and Delta-Age for the source cohort",
        "transfer": "evaluate the trained ensemble on other scales or sites",
        "stats": "ANOVA and Tukey HSD on a Delta-Age report",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
        p.add_argument("--out", default="runs", help="experiment directory (default: runs)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--threads", type=int, default=1, help="ensemble members trained concurrently")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "stats":
            p.add_argument("--report", help="Delta-Age or transfer report JSON (default: <out>/brainage/delta_age.json)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be >= 0")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "gen":
            cmd_gen(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.threads)
        elif args.command == "brainage":
            cmd_brainage(cfg, out)
        elif args.command == "transfer":
            cmd_transfer(cfg, out)
        else:
            cmd_stats(cfg, out, Path(args.report) if args.report else None)
    except UsageError as exc:
        print(f"vnn-brainage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"vnn-brainage: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"vnn-brainage: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
