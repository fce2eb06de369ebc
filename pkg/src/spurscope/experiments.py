"""Declarative experiment runner and deterministic report emission.

A config is a JSON document validated against :data:`CONFIG_SCHEMA` before
any compute. ``run_experiment`` writes into the output directory:

* ``config.json``    byte-identical copy of the input config
* ``report.json``    deterministic results (floats at 6 significant digits)
* ``*.csv``          histogram, trace and summary tables
* ``metadata.json``  wall-clock, timestamps and library versions
* ``manifest.json``  every artifact with its size and sha256
* ``FAILED``         only on failure: the stage that raised
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from . import datagen as dg
from .checkpoint import save_checkpoint
from .infometrics import (DatasetMetrics, knn_v_information, min_separation_psi, pd_pvi_binned_correlation,
                          prop1_gap_check, pvi_dataset, train_null_model)
from .models import ModelSpec, build_model, reference_spec
from .probes import (PdHistogram, build_probe_set, early_peak_detector, epoch_snapshot_series,
                     pd_trace)
from .saliency import core_only_accuracy, ensemble_entropy, harmfulness_verdict
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
KINDS = ("patch-pd", "domino", "pd-evolution", "pd-pvi", "prop1", "harmfulness", "ensemble-baseline")

_GLYPH = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "pair": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 9}},
        "jitter": {"type": ["number", "null"], "minimum": 0},
        "rotation": {"type": "number", "minimum": 0},
        "noise": {"type": "number", "minimum": 0},
        "extent": {"type": "number", "exclusiveMinimum": 0},
        "thickness": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "clutter": {"type": "integer", "minimum": 0},
    },
}
_SPURIOUS = {
    "type": "object", "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["patch", "source-token"]},
        "size": {"type": "integer", "minimum": 1},
        "locations": {"type": ["array", "null"], "items": {"type": "array", "items": {"type": "integer"},
                                                           "minItems": 2, "maxItems": 2}},
        "rho": {"type": "number", "minimum": 0.5, "maximum": 1},
        "content_shared": {"type": "boolean"},
        "intensity": {"type": "number"},
    },
}
_TRAINING = {
    "type": "object", "additionalProperties": False, "required": ["seed"],
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["sgd", "adam"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "patience": {"type": ["integer", "null"], "minimum": 1},
    },
}
_MODEL = {
    "type": "object",
    "oneOf": [
        {"additionalProperties": False, "required": ["reference"],
         "properties": {"reference": {"enum": ["cnn-small", "mlp-2", "patchpool", "linear", "conv-relu-linear"]}}},
        {"additionalProperties": False, "required": ["layers", "input_shape", "classes"],
         "properties": {"layers": {"type": "array"}, "input_shape": {"type": "array"},
                        "classes": {"type": "integer"}, "probes": {}}},
    ],
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "experiment config",
    "type": "object", "additionalProperties": False,
    "required": ["kind", "seed", "dataset", "training"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object", "additionalProperties": False, "required": ["seed"],
            "properties": {
                "generator": {"enum": ["glyphs", "idx"]},
                "classes": {"type": "integer", "minimum": 2},
                "per_class": {"type": "integer", "minimum": 1},
                "size": {"type": "integer", "minimum": 4},
                "glyph": _GLYPH,
                "spurious": {"oneOf": [{"type": "null"}, _SPURIOUS]},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "binary_pair": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "split": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "seed": {"type": "integer"},
            },
        },
        "model": _MODEL,
        "training": _TRAINING,
        "probes": {
            "type": "object", "additionalProperties": False,
            "properties": {"m": {"type": "integer", "minimum": 1}, "k": {"type": "integer", "minimum": 1},
                           "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                           "seed": {"type": "integer"}},
        },
        "snapshot_epochs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "detector": {
            "type": "object", "additionalProperties": False,
            "properties": {"alpha": {"type": "number"}, "mass": {"type": "number"}},
        },
        "domino": {
            "type": "object", "additionalProperties": False,
            "properties": {"core": _GLYPH, "hard_top": _GLYPH, "easy_top": _GLYPH, "patch": _SPURIOUS,
                           "per_class": {"type": "integer", "minimum": 1}},
        },
        "harmfulness": {
            "type": "object", "additionalProperties": False, "required": ["seeds"],
            "properties": {"families": {"type": "array", "items": {"type": "string"}},
                           "metric": {"enum": ["accuracy", "mean-pd", "v-info"]},
                           "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1}},
        },
        "ensemble": {
            "type": "object", "additionalProperties": False,
            "properties": {"count": {"type": "integer", "minimum": 2},
                           "family": {"enum": ["linear", "conv-relu-linear"]},
                           "epochs": {"type": "integer", "minimum": 1}},
        },
        "prop1": {
            "type": "object", "additionalProperties": False,
            "properties": {"psi": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                           "L": {"type": ["integer", "null"]}, "K": {"type": ["integer", "null"]}},
        },
        "pvi": {
            "type": "object", "additionalProperties": False,
            "properties": {"bin_width": {"type": "integer", "minimum": 1},
                           "null_steps": {"type": "integer", "minimum": 1}},
        },
    },
}

_HIST = {
    "type": "object", "required": ["counts", "undefined", "mean_pd", "total"],
    "properties": {"counts": {"type": "object", "patternProperties": {"^[0-9]+$": {"type": "integer"}},
                              "additionalProperties": False},
                   "undefined": {"type": "integer", "minimum": 0},
                   "mean_pd": {"type": ["number", "null"]},
                   "total": {"type": "integer"}},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "experiment report",
    "type": "object", "additionalProperties": False,
    "required": ["schema_version", "engine_version", "kind", "config_sha256", "results"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "engine_version": {"type": "string"},
        "kind": {"enum": list(KINDS)},
        "config_sha256": {"type": "string"},
        "results": {"type": "object"},
    },
    "$defs": {"histogram": _HIST},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- config ------------------------------------------------------------------------------

def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    ds = cfg["dataset"]
    if ds.get("generator", "glyphs") == "idx":
        for key in ("images", "labels"):
            if key not in ds:
                raise ConfigError(f"idx dataset needs {key!r}")
            if not Path(ds[key]).exists():
                raise ConfigError(f"referenced file does not exist: {ds[key]}")


def load_config(path) -> tuple:
    """Return ``(config dict, raw bytes)``; validation happens here."""
    raw = Path(path).read_bytes()
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg, raw


def with_seed(cfg: dict, seed: int) -> dict:
    """Copy of ``cfg`` with every seed replaced by ``seed``."""
    out = json.loads(json.dumps(cfg))
    out["seed"] = seed
    out["dataset"]["seed"] = seed
    out["training"]["seed"] = seed
    if "probes" in out:
        out["probes"]["seed"] = seed
    return out


def train_config(cfg: dict, **over) -> TrainConfig:
    return TrainConfig(**{**cfg["training"], **over})


def model_spec(cfg: dict, input_shape, classes: int) -> ModelSpec:
    m = cfg.get("model", {"reference": "cnn-small"})
    if "reference" in m:
        return reference_spec(m["reference"], tuple(input_shape), classes)
    return ModelSpec.from_json(m)


# -- datasets ----------------------------------------------------------------------------

def _spurious_spec(d: Optional[dict]) -> Optional[dg.SpuriousSpec]:
    if d is None:
        return None
    d = dict(d)
    rho = d.get("rho", 1.0)
    if d.get("locations") is not None:
        d["locations"] = [tuple(x) for x in d["locations"]]
    return dg.SpuriousSpec(**d), rho


def make_dataset(cfg: dict) -> dg.LabeledDataset:
    """Observational dataset from the recipe (spurious feature injected if configured)."""
    d = cfg["dataset"]
    if d.get("generator", "glyphs") == "idx":
        ds = dg.load_idx(d["images"], d["labels"])
        if "binary_pair" in d:
            ds = dg.binary_subset(ds, *d["binary_pair"])
    else:
        ds = dg.gen_glyphs(d.get("classes", 2), d.get("per_class", 500), d.get("size", 28),
                           seed=d["seed"], **d.get("glyph", {}))
    sp = _spurious_spec(d.get("spurious"))
    if sp is not None:
        spec, rho = sp
        ds = dg.inject_patch(ds, spec, rho, seed=d["seed"])
    return ds


def dataset_pair(cfg: dict) -> tuple:
    ds = make_dataset(cfg)
    if ds.spurious is None:
        raise ConfigError(f"experiment kind {cfg['kind']!r} needs dataset.spurious")
    return ds, dg.intervene_randomize_spurious(ds, seed=cfg["dataset"]["seed"])


def _split(cfg: dict, ds: dg.LabeledDataset) -> tuple:
    fr = cfg["dataset"].get("split", [0.75, 0.25])
    return tuple(dg.split(ds, fr, seed=cfg["dataset"]["seed"]))


def _probe_kw(cfg: dict) -> dict:
    p = cfg.get("probes", {})
    return {"m": p.get("m", 500), "k": p.get("k", 29), "delta": p.get("delta", 0.1),
            "seed": p.get("seed", cfg["seed"])}


# -- report formatting ---------------------------------------------------------------------

def round6(x):
    """Recursively round floats to 6 significant digits; non-finite floats become None."""
    if isinstance(x, dict):
        return {str(k): round6(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [round6(v) for v in x]
    if isinstance(x, np.ndarray):
        return round6(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(f"{x:.6g}") if math.isfinite(x) else None
    return x


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}" if math.isfinite(x) else "nan"
    return str(x)


def csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def histogram_csv(hist: PdHistogram) -> str:
    rows = [(p, int(c)) for p, c in enumerate(hist.counts, 1)]
    rows += [("undefined", hist.undefined), ("mean_pd", hist.mean_pd)]
    return csv_text(["probe_index", "count"], rows)


def read_histogram_csv(text: str) -> PdHistogram:
    rows = list(csv.reader(io.StringIO(text)))[1:]
    counts = [int(c) for p, c in rows if p.isdigit()]
    undefined = next(int(c) for p, c in rows if p == "undefined")
    return PdHistogram(np.asarray(counts, dtype=np.int64), undefined, sum(counts) + undefined)


def trace_csv(trace) -> str:
    rows = [(int(i), "undefined" if pd < 0 else int(pd), int(trace.pred[n, -1]),
             int(trace.valid[n, -3:].all())) for n, (i, pd) in enumerate(zip(trace.sample_ids, trace.pd))]
    return csv_text(["sample_id", "pd", "final_class", "valid_tail"], rows)


@dataclass
class Report:
    kind: str
    results: dict
    config_sha256: str
    artifacts: dict  # file name -> text content

    def to_json(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "engine_version": __version__,
                "kind": self.kind, "config_sha256": self.config_sha256,
                "results": round6(self.results)}


def export_report(report: Report, out_dir, formats=("json", "csv")) -> list:
    """Write the report JSON (validated) and CSV artifacts; return written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        doc = report.to_json()
        jsonschema.validate(doc, REPORT_SCHEMA)
        p = out / "report.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        written.append(p)
    if "csv" in formats:
        for name, text in sorted(report.artifacts.items()):
            p = out / name
            p.write_text(text)
            written.append(p)
    return written


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path) -> Path:
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            rel = p.relative_to(out).as_posix()
            if p.name == "metadata.json":
                entries.append({"path": rel, "deterministic": False})
            else:
                entries.append({"path": rel, "bytes": p.stat().st_size, "sha256": _sha(p), "deterministic": True})
    mp = out / "manifest.json"
    mp.write_text(json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "artifacts": entries},
                             indent=2, sort_keys=True) + "\n")
    return mp


# -- pipelines -----------------------------------------------------------------------------

class _Stages:
    def __init__(self):
        self.current = "setup"

    def __call__(self, name: str):
        self.current = name
        log.info("stage %s", name)


def _train_model(cfg, train_ds, seed_offset=0):
    spec = model_spec(cfg, train_ds.images.shape[1:], train_ds.classes)
    seed = cfg["training"]["seed"] + seed_offset
    model = build_model(spec, seed)
    res = train(model, train_ds, train_config(cfg, seed=seed))
    return model, res


def _pd_block(cfg, model, train_ds, test_ds, tag, artifacts):
    kw = _probe_kw(cfg)
    ps = build_probe_set(model, train_ds, m=min(kw["m"], len(train_ds)), k=kw["k"], delta=kw["delta"],
                         seed=kw["seed"])
    trace = pd_trace(ps, model, test_ds)
    hist = PdHistogram.from_depths(trace.pd, ps.n_probes)
    artifacts[f"pd_{tag}.csv"] = histogram_csv(hist)
    artifacts[f"trace_{tag}.csv"] = trace_csv(trace)
    return ps, trace, hist


def _detector(cfg, hist, mu_ref=None):
    d = cfg.get("detector", {})
    return early_peak_detector(hist, d.get("alpha", 0.25), d.get("mass", 0.5), mu_ref)


def _run_patch_pd(cfg, stage, out, with_pvi=False):
    stage("data")
    ds_s, ds_i = dataset_pair(cfg)
    results, artifacts, extra = {}, {}, {}
    for tag, ds in (("spurious", ds_s), ("intervened", ds_i)):
        tr, te = _split(cfg, ds)
        stage(f"train:{tag}")
        model, res = _train_model(cfg, tr)
        save_checkpoint(out / f"model_{tag}.dsck", model, res.state, model.meta.get("epochs", 0))
        stage(f"probe:{tag}")
        ps, trace, hist = _pd_block(cfg, model, tr, te, tag, artifacts)
        block = {"histogram": hist.to_json(), **{f"test_{k}": v for k, v in evaluate(model, te).items()}}
        if with_pvi:
            stage(f"pvi:{tag}")
            g = train_null_model(tr.labels, model.spec, cfg["seed"], **_null_kw(cfg))
            rec = pvi_dataset(g, model, te)
            block["pvi"] = rec.summary()
            extra[tag] = (trace, rec, ps, model, te, tr)
        results[tag] = block
    stage("analyze")
    mu_i = results["intervened"]["histogram"]["mean_pd"]
    for tag in ("spurious", "intervened"):
        h = results[tag]["histogram"]
        hist = PdHistogram(np.array([h["counts"][k] for k in sorted(h["counts"], key=int)]),
                           h["undefined"], h["total"])
        results[tag]["detector"] = _detector(cfg, hist, mu_i if tag == "spurious" else None).to_json()
    return results, artifacts, extra


def _null_kw(cfg):
    p = cfg.get("pvi", {})
    return {"steps": p["null_steps"]} if "null_steps" in p else {}


def _run_pd_pvi(cfg, stage, out, prop1=False):
    results, artifacts, extra = _run_patch_pd(cfg, stage, out, with_pvi=True)
    stage("correlate")
    trace_i, rec_i = extra["intervened"][0], extra["intervened"][1]
    bw = cfg.get("pvi", {}).get("bin_width", 2)
    corr = pd_pvi_binned_correlation(trace_i.pd, rec_i.neg_log2_gprime, bw, trace_i.n_probes)
    results["binned_correlation_intervened"] = corr.to_json()
    artifacts["pd_entropy_bins.csv"] = csv_text(["pd_from", "pd_to", "count", "mean_entropy_bits"], corr.bins)
    results["ordering"] = {
        "mean_pd_gap": results["spurious"]["histogram"]["mean_pd"] < results["intervened"]["histogram"]["mean_pd"],
        "v_info_gap": rec_i.v_information < extra["spurious"][1].v_information}
    if prop1:
        stage("prop1")
        results["prop1"] = _prop1(cfg, extra)
    return results, artifacts


def _prop1(cfg, extra):
    p = cfg.get("prop1", {})
    (tc_s, rec_s, ps_s, m_s, te_s, _), (tc_i, rec_i, ps_i, m_i, te_i, _) = extra["spurious"], extra["intervened"]
    n = tc_s.n_probes
    psi_min, t = min_separation_psi(tc_s.pd, tc_i.pd, n)
    psi = p.get("psi") or max(psi_min, 1e-6)
    L = p.get("L") or t
    K = p.get("K") or t
    metrics = []
    for trace, rec, ps, model, te in ((tc_s, rec_s, ps_s, m_s, te_s), (tc_i, rec_i, ps_i, m_i, te_i)):
        metrics.append(DatasetMetrics(trace.pd, rec.v_information, -rec.h_y_given_x,
                                      knn_v_information(ps, model, te, rec.h_y)))
    marg = np.bincount(te_s.labels, minlength=te_s.classes) / len(te_s)
    rep = prop1_gap_check(metrics[0], metrics[1], psi, L, K, n, marg)
    out = rep.to_json()
    out["min_separation_psi"] = psi_min
    out["min_separation_depth"] = t
    out["knn_v_information_spurious"] = metrics[0].knn_v_information
    out["knn_v_information_intervened"] = metrics[1].knn_v_information
    return out


def _run_pd_evolution(cfg, stage, out):
    stage("data")
    ds, _ = dataset_pair(cfg)
    tr, te = _split(cfg, ds)
    epochs = cfg["training"].get("epochs", 5)
    snaps = cfg.get("snapshot_epochs") or list(range(1, epochs + 1))
    spec = model_spec(cfg, tr.images.shape[1:], tr.classes)
    model = build_model(spec, cfg["training"]["seed"])
    kw = _probe_kw(cfg)
    stage("train+snapshots")
    hists, res = epoch_snapshot_series(model, tr, te, train_config(cfg), snaps, m=min(kw["m"], len(tr)),
                                       k=kw["k"], delta=kw["delta"], probe_seed=kw["seed"])
    stage("analyze")
    series, rows, artifacts = [], [], {}
    first = None
    for e, h in zip(snaps, hists):
        v = _detector(cfg, h)
        if v.suspicious and first is None:
            first = e
        series.append({"epoch": e, "histogram": h.to_json(), "detector": v.to_json()})
        rows.append([e, *[int(c) for c in h.counts], h.undefined, h.mean_pd, v.label])
        artifacts[f"pd_epoch{e:03d}.csv"] = histogram_csv(h)
    n = hists[0].n_probes if hists else 0
    artifacts["pd_evolution.csv"] = csv_text(
        ["epoch", *[f"probe_{p}" for p in range(1, n + 1)], "undefined", "mean_pd", "verdict"], rows)
    save_checkpoint(out / "model_final.dsck", model, res.state, model.meta.get("epochs", 0))
    return {"snapshots": series, "first_suspicious_epoch": first,
            "undefined_first": hists[0].undefined if hists else None,
            "undefined_last": hists[-1].undefined if hists else None,
            "history": res.history}, artifacts


def _run_domino(cfg, stage, out):
    d = cfg.get("domino", {})
    seed = cfg["dataset"]["seed"]
    n = d.get("per_class", cfg["dataset"].get("per_class", 1000))
    size = cfg["dataset"].get("size", 32)
    stage("data")
    bottom = dg.gen_glyphs(2, n, size, seed=seed + 100, **d.get("core", {}))
    hard = dg.gen_glyphs(2, n, size, seed=seed + 200, **d.get("hard_top", {}))
    patch, rho = _spurious_spec(d.get("patch", {"kind": "patch", "size": 5}))
    easy = dg.inject_patch(dg.gen_glyphs(2, n, size, seed=seed + 300, **d.get("easy_top", d.get("hard_top", {}))),
                           patch, rho, seed=seed)
    results, rows = {}, []
    for tag, top in (("easy", easy), ("hard", hard)):
        dom = dg.compose_dominoes(top, bottom, seed=seed)
        tr, te = _split(cfg, dom)
        stage(f"train:{tag}")
        model, res = _train_model(cfg, tr)
        val, core = core_only_accuracy(model, te)
        results[tag] = {"validation_accuracy": val, "core_only_accuracy": core}
        rows.append([tag, val, core])
    return results, {"domino_summary.csv": csv_text(["spurious", "validation_accuracy", "core_only_accuracy"], rows)}


def _run_harmfulness(cfg, stage, out):
    stage("data")
    ds = make_dataset(cfg)
    h = cfg["harmfulness"]
    results, rows = {}, []
    for fam in h.get("families", ["mlp-2", "patchpool"]):
        stage(f"verdict:{fam}")
        v = harmfulness_verdict(fam, ds, h.get("metric", "accuracy"), h["seeds"], train_config(cfg),
                                tuple(cfg["dataset"].get("split", [0.75, 0.25])))
        results[fam] = v.to_json()
        rows.append([fam, v.metric, v.verdict, min(v.psi_observational), max(v.psi_observational),
                     min(v.psi_interventional), max(v.psi_interventional)])
    return results, {"harmfulness.csv": csv_text(
        ["family", "metric", "verdict", "psi_obs_min", "psi_obs_max", "psi_int_min", "psi_int_max"], rows)}


def _run_ensemble(cfg, stage, out):
    stage("data")
    ds_s, ds_i = dataset_pair(cfg)
    e = cfg.get("ensemble", {})
    tcfg = train_config(cfg, epochs=e.get("epochs", cfg["training"].get("epochs", 5)))
    results, rows = {}, []
    for tag, ds in (("spurious", ds_s), ("intervened", ds_i)):
        tr, te = _split(cfg, ds)
        stage(f"ensemble:{tag}")
        per, mean = ensemble_entropy(tr, e.get("count", 5), e.get("family", "linear"), cfg["seed"], tcfg, te)
        results[tag] = {"mean_entropy_nats": mean, "samples": len(per)}
        rows.append([tag, mean])
    return results, {"ensemble_entropy.csv": csv_text(["dataset", "mean_entropy_nats"], rows)}


_RUNNERS = {
    "patch-pd": lambda c, s, o: _run_patch_pd(c, s, o)[:2],
    "pd-pvi": _run_pd_pvi,
    "prop1": lambda c, s, o: _run_pd_pvi(c, s, o, prop1=True),
    "pd-evolution": _run_pd_evolution,
    "domino": _run_domino,
    "harmfulness": _run_harmfulness,
    "ensemble-baseline": _run_ensemble,
}


def run_config(cfg: dict, raw: Optional[bytes], out_dir) -> Report:
    """Run a validated config dict; ``raw`` is echoed byte-for-byte as config.json."""
    validate_config(cfg)
    if raw is None:
        raw = (json.dumps(cfg, indent=2, sort_keys=True) + "\n").encode()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    (out / "config.json").write_bytes(raw)
    stage = _Stages()
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        results, artifacts = _RUNNERS[cfg["kind"]](cfg, stage, out)
        stage("emit")
        report = Report(cfg["kind"], results, hashlib.sha256(raw).hexdigest(), artifacts)
        export_report(report, out)
    except Exception as exc:
        failed.write_text(f"{stage.current}\n{type(exc).__name__}: {exc}\n")
        raise StageError(stage.current, exc) from exc
    meta = {"started_utc": started.isoformat(), "wall_clock_s": time.perf_counter() - t0,
            "engine_version": __version__, "numpy": np.__version__, "python": platform.python_version()}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_manifest(out)
    return report


def run_experiment(config_path, out_dir=None, seed_override: Optional[int] = None,
                   snapshot_epochs: Optional[list] = None) -> Report:
    cfg, raw = load_config(config_path)
    if seed_override is not None or snapshot_epochs is not None:
        if seed_override is not None:
            cfg = with_seed(cfg, seed_override)
        if snapshot_epochs is not None:
            cfg["snapshot_epochs"] = list(snapshot_epochs)
        raw = (json.dumps(cfg, indent=2, sort_keys=True) + "\n").encode()
    out = out_dir or cfg.get("output_dir")
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return run_config(cfg, raw, out)
