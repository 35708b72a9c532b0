"""
4_stability.py
--------------
Stability harness: ||dTheta||^2 against the perturbation size along paired
paths, for a decoupled and a coupled problem.
"""

from fbsde_lab import console
from fbsde_lab.cli import main

RUNS = ["configs/brownian_identity.json", "configs/coupled_s3.json"]


def run_stability():
    console.banner("STEP 4: STABILITY HARNESS")
    for config in RUNS:
        code = main(["stability", "--config", config])
        (console.ok if code == 0 else console.fail)(f"{config}: exit {code}")
    console.footer()


if __name__ == "__main__":
    run_stability()
