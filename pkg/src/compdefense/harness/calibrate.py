"""Trials = 0 calibration of the noise level.

For each sigma in a grid, attack every conv-family victim under default
schedules twice: once with a corpus that holds the victim's own shapes and
once with the foreign default corpus. Prints mean fidelity per family, the
transformer's UNKNOWN share and the unknown threshold the DB settles on.
The default sigma in sweep.py was frozen from this table.

    python3 -m compdefense.harness.calibrate --sigmas 0.02 0.05 0.1
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import replace

from ..zoo import CONV_FAMILIES
from .sweep import DEFAULT_SIGMA, ExperimentConfig, run_sweep


def calibrate(sigma: float, seeds=(0, 1, 2, 3, 4), workers: int = 1) -> dict:
    """One row of the calibration table for a single sigma."""
    base = ExperimentConfig.from_dict({"trial_grid": [0], "seeds": list(seeds), "noise_sigma": sigma, "workers": workers})
    row = {"sigma": sigma}
    for label, include in (("with", True), ("without", False)):
        cfg = replace(base, corpus=replace(base.corpus, include_victims=include))
        with tempfile.TemporaryDirectory() as tmp:
            result = run_sweep(cfg, tmp)
        row[f"tau_{label}"] = result.meta["signature_db"]["tau"]
        for name in result.models():
            r = result.row(name, 0)
            family = name.split("-")[0]
            if family in CONV_FAMILIES:
                row[f"{family}_{label}"] = r.fidelity_mean
            elif label == "without":
                row["transformer_unknown"] = r.unknown_fraction_mean
    return row


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="compdefense-calibrate", description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.02, DEFAULT_SIGMA, 0.1, 0.2])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    args = ap.parse_args(argv)

    cols = ["sigma", "tau_with", "tau_without"]
    cols += [f"{f}_{w}" for w in ("with", "without") for f in CONV_FAMILIES]
    cols.append("transformer_unknown")
    print(",".join(cols))
    for sigma in args.sigmas:
        row = calibrate(sigma, tuple(args.seeds), args.workers)
        print(",".join(f"{row[c]:.4g}" for c in cols))
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
