"""
5_lipschitz_report.py
---------------------
Measured Lip(g_i)^2 against the propagation schedule, plus the sampled
slope of x -> Y0 against Kbar0.
"""

import json
from pathlib import Path

import pandas as pd

from fbsde_lab import console
from fbsde_lab.cli import main
from fbsde_lab.exports import read_csv

RUNS = ["configs/brownian_identity.json", "configs/coupled_s3.json", "configs/example24.json"]


def run_lipschitz_report():
    console.banner("STEP 5: LIPSCHITZ PROPAGATION")
    rows = []
    for config in RUNS:
        if main(["lipschitz", "--config", config]) != 0:
            console.fail(f"{config} failed")
            continue
        out = Path(json.loads(Path(config).read_text())["output"]["directory"]) / "lipschitz"
        table = read_csv(out / "lipschitz.csv")
        probe = json.loads((out / "lipschitz_probe.json").read_text())
        rows.append({
            "problem": Path(config).stem,
            "max_measured_lip_sq": table["measured_lip_sq"].max(),
            "fitted_C_K": probe["fitted_C_K"],
            "probe_slope": probe["probe"]["max_slope"],
            "kbar0_fitted": probe["probe"]["kbar0_fitted"],
        })
    console.console.print(pd.DataFrame(rows).to_string(index=False))
    console.footer()


if __name__ == "__main__":
    run_lipschitz_report()
