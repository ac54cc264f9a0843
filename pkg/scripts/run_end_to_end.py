"""Train on 64+64 phantoms, evaluate on 16 held-out malignant phantoms against 4 virtual raters.

    python scripts/run_end_to_end.py --out runs/e2e
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from voxelseg.experiments import RunConfig, config_dict, evaluate_run, train_run
from voxelseg.phantom import DatasetConfig, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=7, help="dataset seed")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--washout-defined", action="store_true")
    a = p.parse_args()
    t0 = time.time()
    data = a.out / "data"
    if not (data / "manifest.json").is_file():
        generate_dataset(96, 96, a.seed, data, DatasetConfig(val_fraction=1 / 6, test_fraction=1 / 6,
                                                             washout_defined=a.washout_defined))
    cfg = replace(RunConfig(patience=3), epochs=a.epochs, iterations=a.iterations)
    run = train_run(data, cfg, progress=lambda row: print(json.dumps(row), flush=True))
    run.graph.save(a.out / "checkpoint.ckpt")
    report = evaluate_run(run, data, "test")
    report.write(a.out / "evaluation")
    s = report.summary
    s["config"] = config_dict(cfg)
    s["history"] = run.state.history
    s["minutes"] = (time.time() - t0) / 60
    (a.out / "summary.json").write_text(json.dumps(s, indent=1))
    print(f"median Dice model {s['median_dice_model']:.3f}, raters {s['median_dice_rater']:.3f}, "
          f"TOST equivalent {s['tost']['equivalent']}, {s['minutes']:.1f} min")


if __name__ == "__main__":
    main()
