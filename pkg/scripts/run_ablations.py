"""Paired ablation of each input/processing flag, plus DCE on washout-defined phantoms.

    python scripts/run_ablations.py --out runs/ablations
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from voxelseg.experiments import ABLATIONS, RunConfig, run_ablation
from voxelseg.phantom import DatasetConfig, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--flags", nargs="+", default=sorted(ABLATIONS), choices=sorted(ABLATIONS))
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--iterations", type=int, default=200)
    a = p.parse_args()
    cfg = replace(RunConfig(), epochs=a.epochs, iterations=a.iterations)
    split = dict(val_fraction=0.1, test_fraction=0.4)
    std, wash = a.out / "data_standard", a.out / "data_washout"
    if not (std / "manifest.json").is_file():
        generate_dataset(40, 40, 9, std, DatasetConfig(**split))
    if not (wash / "manifest.json").is_file():
        generate_dataset(40, 40, 5, wash, DatasetConfig(washout_defined=True, **split))
    results = []
    jobs = [(std, f, "two-sided") for f in a.flags] + [(wash, "dce", "greater")]
    for data, flag, alt in jobs:
        r = run_ablation(data, flag, cfg, alternative=alt)
        tag = f"{data.name}_{flag}"
        r.write_csv(a.out / f"{tag}.csv")
        s = r.summary()
        s["dataset"] = data.name
        results.append(s)
        print(f"{tag}: {r.values[0]} {r.median_a:.3f} vs {r.values[1]} {r.median_b:.3f}, "
              f"Wilcoxon ({alt}) p={r.test.p_value:.3g}", flush=True)
    (a.out / "ablations.json").write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
