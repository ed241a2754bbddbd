"""Run a bundled scenario programmatically and read its report.

This is what ``nelsonvc --scenario constant-1d --out <dir>`` does, minus
argument parsing.
"""

import json
import sys
import tempfile
from pathlib import Path

from nelsonvc import expcli

cfg = expcli.ScenarioConfig.load("constant-1d")
run = expcli.run_scenario(cfg, only="van_hove", log=print)
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
paths = expcli.emit_report(run, out)
print("wrote", *[p.name for p in paths])

manifest = json.loads((out / "manifest.json").read_text())
for exp, rec in manifest["experiments"].items():
    for c in rec["checks"]:
        print(f"{exp}: {c['name']} = {c['value']} ({c['op']} {c['threshold']}) "
              f"{'PASS' if c['passed'] else 'FAIL'}")
print("exit code", run.exit_code)
