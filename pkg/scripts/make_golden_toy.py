"""Rebuild the frozen toy run under tests/golden/toy.

The test suite re-evaluates this checkpoint on the frozen eval scenes and
requires a byte-identical metrics.json. Only rerun this after an intentional
change to the model, the generator or the metrics.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

from crossmodal.cli import main

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "toy.json"
OUT = ROOT / "tests" / "golden" / "toy"


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


def build():
    if OUT.exists():
        shutil.rmtree(OUT)
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        run("gen", "--config", CONFIG, "--out", data)
        run("train", "--config", CONFIG, "--data", data, "--out", OUT / "run")
        # keep only the eval split; the run records it relative to itself
        shutil.copytree(data / "eval", OUT / "data" / "eval")
        manifest = json.loads((data / "dataset.json").read_text())
        manifest["train"] = []
        (OUT / "data" / "dataset.json").write_text(json.dumps(manifest, indent=2))
    info = json.loads((OUT / "run" / "run.json").read_text())
    info["data"] = "../data"
    (OUT / "run" / "run.json").write_text(json.dumps(info, indent=2) + "\n")
    run("eval", "--run", OUT / "run")
    print(json.dumps(json.loads((OUT / "run" / "metrics.json").read_text()), indent=2))


if __name__ == "__main__":
    build()
