"""Best validation Dice after training on 16, 64 and 160 malignant (+ as many benign) phantoms.

    python scripts/run_size_trend.py --out runs/size --seeds 0 1 2
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from voxelseg.experiments import RunConfig, config_dict, size_trend
from voxelseg.phantom import DatasetConfig, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 160])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--data-seed", type=int, default=21)
    a = p.parse_args()
    data = a.out / "data"
    n = max(a.sizes) + 16
    if not (data / "manifest.json").is_file():
        generate_dataset(n, n, a.data_seed, data, DatasetConfig(val_fraction=16 / n))
    cfg = replace(RunConfig(), epochs=a.epochs, iterations=a.iterations)
    t = size_trend(data, a.sizes, a.seeds, cfg, progress=lambda row: print(json.dumps(row), flush=True))
    s = t.summary()
    s["config"] = config_dict(cfg)
    (a.out / "size_trend.json").write_text(json.dumps(s, indent=1))
    for size, m in zip(t.sizes, t.means):
        print(f"n={size}: mean val Dice {m:.3f}  {t.val_dice[size]}")
    print(f"trend holds: {t.holds()}")


if __name__ == "__main__":
    main()
