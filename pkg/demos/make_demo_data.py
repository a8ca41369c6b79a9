"""Write a small simulated data set for trying the command-line tool.

Usage::

    python demos/make_demo_data.py [OUTDIR]

Creates ``demo_data.csv`` and ``demo_covariates.csv`` (60 subjects, eight
time points per curve, 12% of values missing at random) next to the model
file ``sim2_demo.fsem``.
"""
import os
import sys

import numpy as np

from fsem.dataset import write_covariate_csv, write_long_csv
from fsem.sim import SimScenario, generate


def main(outdir=None):
    outdir = outdir or os.path.dirname(os.path.abspath(__file__))
    scenario = SimScenario.defaults("sim2", N=60, reps=1)
    data, _ = generate(scenario, np.random.default_rng([2024, 0]))
    with open(os.path.join(outdir, "demo_data.csv"), "w", newline="") as fh:
        write_long_csv(data, fh)
    with open(os.path.join(outdir, "demo_covariates.csv"), "w", newline="") as fh:
        write_covariate_csv(data, fh)
    print(f"wrote {data.N} subjects to {outdir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
