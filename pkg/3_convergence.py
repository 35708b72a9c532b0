"""
3_convergence.py
----------------
Refinement study (dt and dx halved per level) against closed forms or the
brute-force reference.
"""

from fbsde_lab import console
from fbsde_lab.cli import main

RUNS = ["configs/brownian_square.json", "configs/example24.json", "configs/coupled_s3.json"]


def run_convergence():
    console.banner("STEP 3: CONVERGENCE STUDY")
    codes = {config: main(["converge", "--config", config]) for config in RUNS}
    for config, code in codes.items():
        (console.ok if code == 0 else console.fail)(f"{config}: exit {code}")
    console.footer()


if __name__ == "__main__":
    run_convergence()
