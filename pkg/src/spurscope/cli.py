"""Command-line entry points; most verbs are thin wrappers over experiment configs."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datagen as dg
from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .infometrics import pvi_dataset, train_null_model
from .models import build_model
from .probes import PdHistogram, build_probe_set, early_peak_detector, pd_trace
from .saliency import SoftKnnHead, soft_knn_saliency
from .training import evaluate, train

CONFIG_VERBS = {"prop1-check": "prop1", "ensemble-entropy": "ensemble-baseline", "domino-eval": "domino",
                "harmfulness": "harmfulness", "monitor": "pd-evolution", "run": None}


def _load_cfg(args) -> tuple:
    if not args.config:
        raise ex.ConfigError(f"{args.verb}: --config is required")
    cfg, raw = ex.load_config(args.config)
    if args.seed_override is not None:
        cfg = ex.with_seed(cfg, args.seed_override)
        raw = None
    if getattr(args, "snapshot_epochs", None):
        cfg["snapshot_epochs"] = args.snapshot_epochs
        raw = None
    return cfg, raw


def _out(args, cfg=None) -> Path:
    out = args.out or (cfg or {}).get("output_dir")
    if not out:
        raise ex.ConfigError(f"{args.verb}: --out is required")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(ex.round6(doc), indent=2, sort_keys=True) + "\n")


def cmd_config(args) -> int:
    cfg, raw = _load_cfg(args)
    want = CONFIG_VERBS[args.verb]
    if want is not None and cfg["kind"] != want:
        raise ex.ConfigError(f"{args.verb}: config kind is {cfg['kind']!r}, expected {want!r}")
    rep = ex.run_config(cfg, raw, _out(args, cfg))
    print(json.dumps(rep.to_json()["results"], indent=2, sort_keys=True)[:4000])
    return 0


def cmd_gen_data(args) -> int:
    cfg, _ = _load_cfg(args)
    out = _out(args, cfg)
    ds = ex.make_dataset(cfg)
    paths = {"observational": str(dg.save_dataset(ds, out / "observational"))}
    if ds.spurious is not None:
        iv = dg.intervene_randomize_spurious(ds, seed=cfg["dataset"]["seed"])
        paths["intervened"] = str(dg.save_dataset(iv, out / "intervened"))
    print(json.dumps(paths, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg, _ = _load_cfg(args)
    out = _out(args, cfg)
    ds = dg.load_dataset(args.data) if args.data else ex.make_dataset(cfg)
    tr, te = dg.split(ds, cfg["dataset"].get("split", [0.75, 0.25]), seed=cfg["dataset"]["seed"])
    spec = ex.model_spec(cfg, tr.images.shape[1:], tr.classes)
    model = build_model(spec, cfg["training"]["seed"])
    res = train(model, tr, ex.train_config(cfg), val=te)
    save_checkpoint(out / "model.dsck", model, res.state, model.meta.get("epochs", 0))
    dg.save_dataset(tr, out / "train")
    dg.save_dataset(te, out / "test")
    keys = sorted({k for row in res.history for k in row})
    (out / "history.csv").write_text(ex.csv_text(keys, [[row.get(k, "") for k in keys] for row in res.history]))
    _write_json(out / "eval.json", evaluate(model, te))
    print(json.dumps(ex.round6(evaluate(model, te))))
    return 0


def _model_and_data(args):
    if not args.checkpoint or not args.data:
        raise ex.ConfigError(f"{args.verb}: --checkpoint and --data are required")
    model, _, _ = load_checkpoint(args.checkpoint)
    return model, dg.load_dataset(args.data)


def _probe_set(args, model, eval_ds):
    bank = dg.load_dataset(args.bank_data) if args.bank_data else eval_ds
    return build_probe_set(model, bank, m=min(args.m, len(bank)), k=args.k, delta=args.delta, seed=args.probe_seed)


def cmd_probe(args) -> int:
    model, ds = _model_and_data(args)
    out = _out(args)
    trace = pd_trace(_probe_set(args, model, ds), model, ds)
    (out / "trace.csv").write_text(ex.trace_csv(trace))
    print(out / "trace.csv")
    return 0


def cmd_pd_report(args) -> int:
    model, ds = _model_and_data(args)
    out = _out(args)
    ps = _probe_set(args, model, ds)
    trace = pd_trace(ps, model, ds)
    hist = PdHistogram.from_depths(trace.pd, ps.n_probes)
    (out / "pd.csv").write_text(ex.histogram_csv(hist))
    (out / "trace.csv").write_text(ex.trace_csv(trace))
    doc = {"histogram": hist.to_json(), "detector": early_peak_detector(hist).to_json()}
    _write_json(out / "pd.json", doc)
    print(json.dumps(ex.round6(doc), indent=2))
    return 0


def cmd_pvi_report(args) -> int:
    model, ds = _model_and_data(args)
    out = _out(args)
    train_ds = dg.load_dataset(args.bank_data) if args.bank_data else ds
    g = train_null_model(train_ds.labels, model.spec, args.probe_seed)
    rec = pvi_dataset(g, model, ds)
    rows = [[i, p, h] for i, p, h in zip(rec.sample_ids, rec.pvi, rec.neg_log2_gprime)]
    (out / "pvi.csv").write_text(ex.csv_text(["sample_id", "pvi_bits", "neg_log2_gprime_bits"], rows))
    _write_json(out / "pvi.json", rec.summary())
    print(json.dumps(ex.round6(rec.summary()), indent=2))
    return 0


def cmd_saliency(args) -> int:
    model, ds = _model_and_data(args)
    out = _out(args)
    ps = _probe_set(args, model, ds)
    head = SoftKnnHead.from_probe_set(ps, args.probe, k=args.head_k)
    sal = soft_knn_saliency(model, head, ds.images[args.index], args.method)
    paths = sal.save(out / f"saliency_{args.index}_p{args.probe}")
    print("\n".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spurscope", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed-override", type=int)
        p.add_argument("--snapshot-epochs", type=lambda s: [int(x) for x in s.split(",") if x])

    def model_io(p):
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="dataset manifest.json to evaluate")
        p.add_argument("--bank-data", help="manifest of the reference/training set (default: --data)")
        p.add_argument("--m", type=int, default=500)
        p.add_argument("--k", type=int, default=29)
        p.add_argument("--delta", type=float, default=0.1)
        p.add_argument("--probe-seed", type=int, default=0)

    for verb, fn in (("gen-data", cmd_gen_data), ("train", cmd_train), ("probe", cmd_probe),
                     ("pd-report", cmd_pd_report), ("pvi-report", cmd_pvi_report), ("saliency", cmd_saliency)):
        p = sub.add_parser(verb)
        common(p)
        p.set_defaults(fn=fn)
        if verb == "train":
            p.add_argument("--data", help="dataset manifest.json (default: generate from --config)")
        elif verb != "gen-data":
            model_io(p)
        if verb == "saliency":
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--probe", type=int, default=1)
            p.add_argument("--method", choices=["gradcam-softknn", "input-grad"], default="gradcam-softknn")
            p.add_argument("--head-k", type=int, default=101)
    for verb in CONFIG_VERBS:
        p = sub.add_parser(verb)
        common(p)
        p.set_defaults(fn=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ex.ConfigError, ex.StageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
