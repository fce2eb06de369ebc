"""Experiments as declarative configs.

Every shipped experiment is a JSON file under configs/. Running one writes
config.json (byte copy), report.json (schema-validated, floats rounded to 6
significant digits), CSV artifacts and a sha256 manifest. The same config
gives byte-identical reports; --seed-override re-seeds every stage at once.

    python demos/05_config_runner.py [configs/ensemble-baseline.json] [out-dir]
"""
import json
import sys
import tempfile
from pathlib import Path

from spurscope.experiments import run_experiment

config = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "configs/ensemble-baseline.json")
out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path(tempfile.mkdtemp(prefix="spurscope-"))

first = run_experiment(config, out / "a")
second = run_experiment(config, out / "b")
same = (out / "a/report.json").read_bytes() == (out / "b/report.json").read_bytes()
print(json.dumps(first.to_json()["results"], indent=2))
print("artifacts:", sorted(p.name for p in (out / "a").iterdir()))
print("byte-identical reports:", same)
