"""Pilot run that freezes the Step-1 coupled-branch frequency used as a regression fixture.

Runs independent Step-1 attempts for ``scalar_sin`` from x1 = 1, x2 = -1 with a
zero past and no thinning, counts the branches and writes
``tests/fixtures/step1_pilot.json``.  The acceptance test replays the same
configuration with a different seed and compares frequencies.

    python3 scripts/pilot_regression.py [--attempts 10000] [--seed 1]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from fracouple import coupling_engine as ce
from fracouple.sde_models import get_model

CONFIG = dict(H=0.7, theta=0.65, alpha=0.25, K=4.0, c3=4.0, beta=2.5, varsigma=1.25, dt=1 / 32,
              T_hist=16.0, delta1=0.0, C_K=1.0, rho_hat=0.8, local_radius=1.5, kappa2=3.0)


def step1_branches(config: dict, n: int, seed: int):
    """Branch counts and the innovation increments of both systems over ``n`` attempts."""
    rng = np.random.default_rng(seed)
    ctx = ce.build_context(get_model("scalar_sin"), ce.CouplingConfig(**config), np.random.default_rng(seed + 1))
    eng = ce.CouplingEngine(ctx)
    n1 = ctx.config.n1
    W1 = np.empty((n, n1))
    W2 = np.empty((n, n1))
    counts = {"coupled": 0, "swapped": 0, "diagonal": 0, "success": 0}
    for i in range(n):
        st = ce.initial_state(ctx.config, [1.0], [-1.0], "zero", capacity_time=4.0)
        rec = ce.TrialRecord(1, st.i)
        i0 = st.i
        eng.step1_attempt(st, rng, rec)
        W1[i] = st.dW1[0, i0:i0 + n1]
        W2[i] = st.W2_increments(i0, i0 + n1)[0]
        counts[rec.branch] += 1
        counts["success"] += int(rec.step1_success)
    return counts, W1, W2, ctx


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--attempts", type=int, default=10000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "step1_pilot.json"))
    a = p.parse_args()
    t = time.time()
    counts, _, _, ctx = step1_branches(CONFIG, a.attempts, a.seed)
    out = {"config": CONFIG, "model": "scalar_sin", "x1": 1.0, "x2": -1.0, "attempts": a.attempts, "seed": a.seed,
           "counts": counts, "coupled_frequency": counts["coupled"] / a.attempts,
           "kappa1": ctx.kappa1, "kappa2": ctx.kappa2}
    Path(a.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(json.dumps(out, indent=2, sort_keys=True))
    print(f"{time.time() - t:.1f} s")


if __name__ == "__main__":
    main()
