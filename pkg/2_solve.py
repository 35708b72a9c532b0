"""
2_solve.py
----------
Global solve, forward paths and the ||Theta||^2 / I0^2 certificate for the
example24 benchmark and the coupled_s3 problem.
"""

import json
from pathlib import Path

from fbsde_lab import console
from fbsde_lab.cli import main

RUNS = ["configs/example24.json", "configs/coupled_s3.json"]


def run_solves():
    console.banner("STEP 2: GLOBAL SOLVE")
    for config in RUNS:
        if main(["solve", "--config", config]) != 0:
            console.fail(f"{config} failed")
            continue
        out = json.loads(Path(config).read_text())["output"]["directory"]
        summary = json.loads((Path(out) / "solve" / "summary.json").read_text())
        console.ok(f"{Path(config).stem}: Y0 = {summary['Y0']}, m = {summary['m']}")
        if "Y0_error" in summary:
            console.note(f"error against the closed form: {summary['Y0_error']:.3e}")
    console.footer()


if __name__ == "__main__":
    run_solves()
