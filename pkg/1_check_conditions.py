"""
1_check_conditions.py
---------------------
Runs the condition audit (key condition + sufficient conditions) for every
bundled problem and checks each result against the stored profile.
"""

from pathlib import Path

import pandas as pd

from fbsde_lab import console
from fbsde_lab.cli import main

CONFIGS = sorted(Path("configs").glob("*.json"))


def run_condition_audit():
    console.banner("STEP 1: CONDITION AUDIT")
    rows = []
    for config in CONFIGS:
        code = main(["check", "--config", str(config)])
        rows.append({"config": config.stem, "exit_code": code, "profile_match": code == 0})

    df = pd.DataFrame(rows)
    console.console.print(df.to_string(index=False))
    if df["profile_match"].all():
        console.ok("All stored condition profiles reproduced.")
    else:
        console.fail(f"Profile mismatch: {df.loc[~df['profile_match'], 'config'].tolist()}")
    console.footer()


if __name__ == "__main__":
    run_condition_audit()
