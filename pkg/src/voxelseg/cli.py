"""Command-line entry point: phantom-gen, harmonize, train, predict, evaluate,
tune-threshold and grad-check.

Settings come from built-in defaults, then an optional INI file
(``--config``, one section per subcommand), then command-line flags, then
the ``VOXELSEG_SEED`` environment variable for the seed. Every run writes
the resolved settings to ``resolved_config.ini`` next to its outputs.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _onoff(v) -> bool:
    s = str(v).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {v!r}")


def _triple(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    parts = str(v).replace("x", ",").split(",")
    out = tuple(int(p) for p in parts if p.strip())
    if len(out) != 3:
        raise ValueError(f"expected three integers, got {v!r}")
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# (name, type, default, help); name uses dashes on the command line, underscores in INI
COMMANDS = {
    "phantom-gen": [
        ("out", str, None, "output directory (required)"),
        ("malignant", int, 4, "number of malignant exams"),
        ("benign", int, 4, "number of benign exams"),
        ("seed", int, 1, "dataset seed"),
        ("val-fraction", float, 0.2, "validation share per class"),
        ("test-fraction", float, 0.0, "test share per class"),
        ("washout-defined", _onoff, False, "lesions differ from parenchyma only by washout"),
        ("dims", _triple, (12, 64, 64), "volume dims slices,rows,cols"),
        ("raters", int, 4, "virtual raters per malignant exam"),
    ],
    "harmonize": [
        ("manifest", str, None, "dataset directory or manifest.json (required)"),
        ("out", str, None, "output directory (required)"),
        ("style", str, "exam", "exam | scanner"),
        ("partition", str, "all", "partition to write (train, val, test or all)"),
        ("seed", int, 1, "unused; recorded for provenance"),
    ],
    "train": [
        ("manifest", str, None, "dataset directory or manifest.json (required)"),
        ("out", str, None, "run directory (required)"),
        ("arch", str, "unet3d", "unet3d | deepmedic"),
        ("prior-mask", _onoff, True, "breast-mask prior channel (U-Net) or TPM (DeepMedic)"),
        ("use-t2", _onoff, False, "append T2 as an input channel"),
        ("harmonize", str, "exam", "exam | scanner intensity harmonization"),
        ("crf", _onoff, False, "CRF post-processing at prediction time"),
        ("dce", _onoff, True, "DCE-in and DCE-out input channels"),
        ("batch-size", int, 16, "patches per update"),
        ("lr", float, 1e-6, "Adam learning rate"),
        ("iterations", int, 2976, "updates per epoch"),
        ("patches-per-epoch", int, 48000, "patches drawn per epoch"),
        ("epochs", int, 100, "maximum epochs"),
        ("patience", int, 5, "early-stopping patience in epochs"),
        ("base-channels", int, 42, "U-Net width of the first level"),
        ("patch", _triple, (19, 75, 75), "U-Net input patch"),
        ("tile", _triple, (1, 37, 37), "U-Net output tile"),
        ("rel-threshold", float, 0.60, "relative threshold for validation Dice"),
        ("seed", int, 1, "initialization seed; sampling uses seed+1"),
    ],
    "predict": [
        ("model", str, None, "run directory written by train (required)"),
        ("exam", str, None, "exam bundle directory (required)"),
        ("out", str, None, "output directory (required)"),
        ("slice", int, -1, "evaluation slice; -1 picks the slice holding the maximum"),
        ("rel-threshold", float, 0.60, "fraction of the slice maximum"),
        ("keep-all-components", _onoff, False, "keep components that miss the maximum"),
        ("seed", int, 1, "unused; recorded for provenance"),
    ],
    "evaluate": [
        ("manifest", str, None, "dataset directory or manifest.json (required)"),
        ("model", str, None, "run directory written by train (required)"),
        ("out", str, None, "output directory (required)"),
        ("partition", str, "test", "partition of malignant exams to evaluate"),
        ("rel-threshold", float, 0.60, "threshold when not tuning"),
        ("tune-threshold", _onoff, False, "tune on a random subset first, evaluate the rest"),
        ("tune-size", int, 16, "exams used for tuning"),
        ("svg", _onoff, True, "write ROC and threshold-sweep SVG plots"),
        ("seed", int, 1, "seed for the tuning split"),
    ],
    "tune-threshold": [
        ("manifest", str, None, "dataset directory or manifest.json (required)"),
        ("model", str, None, "run directory written by train (required)"),
        ("out", str, None, "output directory (required)"),
        ("partition", str, "val", "partition of malignant exams to tune on"),
        ("seed", int, 1, "unused; recorded for provenance"),
    ],
    "grad-check": [
        ("out", str, None, "optional directory for a JSON report"),
        ("seed", int, 0, "seed of the random probes"),
    ],
}
REQUIRED = {"out", "manifest", "model", "exam"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxelseg", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="INI file with a [%s] section" % cmd)
        for name, typ, default, help_ in opts:
            sp.add_argument(f"--{name}", type=typ, default=None, help=f"{help_} (default {_fmt(default)})")
    return p


def resolve(cmd: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, INI section and explicit flags; reject unknown INI keys."""
    opts = COMMANDS[cmd]
    types = {n.replace("-", "_"): t for n, t, _, _ in opts}
    cfg = {n.replace("-", "_"): d for n, _, d, _ in opts}
    if ns.config:
        cp = configparser.ConfigParser()
        if not cp.read(ns.config):
            raise UsageError(f"cannot read config file {ns.config}")
        unknown_sections = [s for s in cp.sections() if s not in COMMANDS]
        if unknown_sections:
            raise UsageError(f"unknown config sections: {unknown_sections}")
        if cp.has_section(cmd):
            for k, v in cp.items(cmd):
                key = k.replace("-", "_")
                if key not in types:
                    raise UsageError(f"unknown key {k!r} in [{cmd}]")
                try:
                    cfg[key] = types[key](v)
                except ValueError as exc:
                    raise UsageError(f"[{cmd}] {k}: {exc}") from exc
    for key in types:
        v = getattr(ns, key, None)
        if v is not None:
            cfg[key] = v
    env = os.environ.get("VOXELSEG_SEED")
    if env is not None and env.strip():
        try:
            cfg["seed"] = int(env)
        except ValueError as exc:
            raise UsageError(f"VOXELSEG_SEED must be an integer, got {env!r}") from exc
    missing = [k for k in cfg if k in REQUIRED and cfg[k] is None and not (cmd == "grad-check" and k == "out")]
    if missing:
        raise UsageError(f"{cmd}: missing required settings {missing}")
    return cfg


def write_resolved(cmd: str, cfg: dict, out_dir) -> Path:
    cp = configparser.ConfigParser()
    cp[cmd] = {k: _fmt(v) for k, v in cfg.items() if v is not None}
    path = Path(out_dir) / "resolved_config.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        cp.write(f)
    return path


# --- subcommands ----------------------------------------------------------


def cmd_phantom_gen(cfg: dict) -> int:
    from .phantom import DatasetConfig, generate_dataset

    dc = DatasetConfig(dims=cfg["dims"], val_fraction=cfg["val_fraction"], test_fraction=cfg["test_fraction"],
                       n_raters=cfg["raters"], washout_defined=cfg["washout_defined"])
    m = generate_dataset(cfg["malignant"], cfg["benign"], cfg["seed"], cfg["out"], dc)
    write_resolved("phantom-gen", cfg, cfg["out"])
    print(f"wrote {len(m['exams'])} exams to {cfg['out']}")
    return EXIT_OK


def cmd_harmonize(cfg: dict) -> int:
    from .harmonize import harmonize_exam, make_model_input
    from .phantom import load_manifest
    from .pipeline import fit_maps, manifest_entries
    from .volio import read_exam, write_volume

    if cfg["style"] not in ("exam", "scanner"):
        raise UsageError("--style must be exam or scanner")
    m = load_manifest(cfg["manifest"])
    out = Path(cfg["out"])
    maps = None
    if cfg["style"] == "scanner":
        maps = fit_maps(m, partitions=None)
        for sid, imap in maps.items():
            (out / "maps").mkdir(parents=True, exist_ok=True)
            imap.to_csv(out / "maps" / f"{sid}.csv")
    parts = None if cfg["partition"] == "all" else cfg["partition"]
    n = 0
    for e in manifest_entries(m, parts):
        exam = harmonize_exam(read_exam(Path(m["root"]) / e["path"]), style=cfg["style"], maps=maps)
        mi = make_model_input(exam)
        for name, vol in zip(mi.names, mi.channels):
            write_volume(vol, out / e["exam_id"] / name)
        (out / e["exam_id"] / "notes.json").write_text(json.dumps(exam.notes))
        n += 1
    write_resolved("harmonize", cfg, out)
    print(f"harmonized {n} exams into {out}")
    return EXIT_OK


def _model_spec(cfg: dict) -> dict:
    keys = ("arch", "prior_mask", "use_t2", "harmonize", "crf", "dce", "base_channels", "patch", "tile",
            "rel_threshold", "seed")
    spec = {k: cfg[k] for k in keys}
    spec["patch"], spec["tile"] = list(cfg["patch"]), list(cfg["tile"])
    return spec


def build_graph(spec: dict, in_channels: int):
    from .models import DeepMedicConfig, UNet3DConfig, build_deepmedic, build_unet3d

    if spec["arch"] == "unet3d":
        full = tuple(spec["patch"]) == (19, 75, 75) and spec["base_channels"] == 42 and in_channels == 3
        return build_unet3d(UNet3DConfig(in_channels=in_channels, base_channels=spec["base_channels"],
                                         input_patch=tuple(spec["patch"]), output_tile=tuple(spec["tile"]),
                                         prior_channel=spec["prior_mask"], seed=spec["seed"],
                                         check_param_band=full))
    if spec["arch"] == "deepmedic":
        return build_deepmedic(DeepMedicConfig(in_channels=in_channels, tpm_enabled=spec["prior_mask"],
                                               seed=spec["seed"], check_param_band=in_channels == 3))
    raise UsageError(f"unknown architecture {spec['arch']!r}")


def _channels(spec: dict) -> int:
    return (3 if spec["dce"] else 1) + (1 if spec["use_t2"] else 0)


def _load_maps(model_dir: Path):
    from .harmonize import IntensityMap

    d = model_dir / "maps"
    return {p.stem: IntensityMap.from_csv(p) for p in sorted(d.glob("*.csv"))} if d.is_dir() else None


def _priors(spec, records, model_dir: Path) -> dict:
    """Prior map per record: breast mask (U-Net) or TPM values (DeepMedic)."""
    if not spec["prior_mask"]:
        return {}
    if spec["arch"] == "unet3d":
        return {r.exam_id: r.breast for r in records}
    tpm = np.load(model_dir / "tpm.npy")
    for r in records:
        if tpm.shape != r.breast.shape:
            raise ValueError(f"TPM shape {tpm.shape} does not match exam {r.exam_id} {r.breast.shape}")
    return {r.exam_id: tpm for r in records}


def cmd_train(cfg: dict) -> int:
    from .models import build_tpm
    from .pipeline import fit_maps, load_records
    from .trainer import PatchDataset, SamplerConfig, TrainConfig, fit

    if cfg["harmonize"] not in ("exam", "scanner"):
        raise UsageError("--harmonize must be exam or scanner")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = _model_spec(cfg)
    tc = TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], iterations_per_epoch=cfg["iterations"],
                     patches_per_epoch=cfg["patches_per_epoch"], max_epochs=cfg["epochs"],
                     patience=cfg["patience"], init_seed=cfg["seed"], rel_threshold=cfg["rel_threshold"])
    graph = build_graph(spec, _channels(spec))
    maps = None
    if cfg["harmonize"] == "scanner":
        maps = fit_maps(cfg["manifest"], partitions=None)
        (out / "maps").mkdir(exist_ok=True)
        for sid, imap in maps.items():
            imap.to_csv(out / "maps" / f"{sid}.csv")
    kw = dict(style=cfg["harmonize"], maps=maps, dce=cfg["dce"], use_t2=cfg["use_t2"])
    train = load_records(cfg["manifest"], "train", **kw)
    val = load_records(cfg["manifest"], "val", **kw)
    if cfg["arch"] == "deepmedic" and cfg["prior_mask"]:
        tpm = build_tpm([r.gt for r in train if r.malignant])
        np.save(out / "tpm.npy", tpm.data)
        for r in train + val:
            r.prior = tpm.data
    sampler = SamplerConfig(patch_input=graph.input_patch, output_tile=graph.output_tile, rng_seed=cfg["seed"] + 1)
    ds = PatchDataset(train, sampler.patch_input)
    census = {"arch": cfg["arch"], "trainable_parameters": graph.n_trainable(),
              "layers": [asdict(l) for l in graph.layers]}
    (out / "census.json").write_text(json.dumps(census, indent=1))
    (out / "model.json").write_text(json.dumps(spec, indent=1))
    write_resolved("train", cfg, out)
    print(f"{cfg['arch']}: {graph.n_trainable()} trainable parameters")
    graph.save(out / "init.ckpt")
    state = fit(graph, ds, [r for r in val if r.malignant] or val, tc, sampler, log_path=out / "log.csv",
                checkpoint_path=out / "checkpoint.ckpt")
    graph.save(out / "checkpoint.ckpt")
    print(f"best epoch {state.best_epoch}, val loss {state.best_val_loss:.4f}, val dice {state.best_val_dice:.4f}")
    return EXIT_OK


def load_model(model_dir):
    model_dir = Path(model_dir)
    spec_path = model_dir / "model.json"
    ckpt = model_dir / "checkpoint.ckpt"
    if not spec_path.is_file() or not ckpt.is_file():
        raise FileNotFoundError(f"no trained model in {model_dir}")
    spec = json.loads(spec_path.read_text())
    graph = build_graph(spec, _channels(spec))
    graph.load(ckpt)
    return spec, graph


def _record_from_exam(exam_dir: Path, spec: dict, maps):
    from .harmonize import harmonize_exam, make_model_input
    from .trainer import ExamRecord
    from .volio import read_exam, read_mask

    exam = harmonize_exam(read_exam(exam_dir), style=spec["harmonize"], maps=maps)
    inputs = make_model_input(exam, dce=spec["dce"], use_t2=spec["use_t2"]).array()
    bpath = exam_dir / "breast.u8"
    breast = read_mask(exam_dir / "breast").data.astype(bool) if bpath.is_file() else np.ones(exam.dims, bool)
    return ExamRecord(exam.exam_id, inputs, breast, spacing=exam.spacing)


def cmd_predict(cfg: dict) -> int:
    from .pipeline import predict_record
    from .volio import write_mask, write_volume

    model_dir = Path(cfg["model"])
    spec, graph = load_model(model_dir)
    rec = _record_from_exam(Path(cfg["exam"]), spec, _load_maps(model_dir))
    prior = _priors(spec, [rec], model_dir).get(rec.exam_id)
    k = None if cfg["slice"] < 0 else cfg["slice"]
    if k is not None and not 0 <= k < rec.inputs.shape[1]:
        raise UsageError(f"--slice {k} outside 0..{rec.inputs.shape[1] - 1}")
    prob, mask, k = predict_record(spec, graph, rec, prior, k, cfg["rel_threshold"], cfg["keep_all_components"])
    out = Path(cfg["out"])
    write_volume(prob, out / "probability")
    write_mask(mask, out / "mask")
    write_resolved("predict", cfg, out)
    print(f"slice {k}: {int(mask.data.sum())} voxels at threshold {cfg['rel_threshold']}")
    return EXIT_OK


def _predict_partition(cfg, spec, graph, model_dir):
    from .pipeline import load_records, predict_record

    recs = load_records(cfg["manifest"], cfg["partition"], "malignant", style=spec["harmonize"],
                        maps=_load_maps(model_dir), dce=spec["dce"], use_t2=spec["use_t2"])
    if not recs:
        raise UsageError(f"no malignant exams in partition {cfg['partition']!r}")
    priors = _priors(spec, recs, model_dir)
    planes = {}
    for r in recs:
        prob, _, k = predict_record(spec, graph, r, priors.get(r.exam_id), r.slice_index)
        planes[r.exam_id] = prob.data[k]
    return recs, planes


def cmd_tune_threshold(cfg: dict) -> int:
    from .inference import select_threshold

    model_dir = Path(cfg["model"])
    spec, graph = load_model(model_dir)
    recs, planes = _predict_partition(cfg, spec, graph, model_dir)
    if any(len(r.raters) == 0 for r in recs):
        raise UsageError("every tuning exam needs rater masks")
    sel = select_threshold([planes[r.exam_id] for r in recs], [r.raters for r in recs])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "threshold.json").write_text(json.dumps(
        {"best": sel.best, "grid": list(sel.grid), "mean_dice": list(sel.scores), "n_exams": len(recs)}, indent=1))
    write_resolved("tune-threshold", cfg, out)
    print(f"best relative threshold {sel.best}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    from .evalstats import evaluate_test_set, svg_line_plot
    from .inference import select_threshold, threshold_plane
    from .volio import SegmentationMask

    model_dir = Path(cfg["model"])
    spec, graph = load_model(model_dir)
    recs, planes = _predict_partition(cfg, spec, graph, model_dir)
    if any(len(r.raters) < 2 for r in recs):
        raise UsageError("evaluation needs at least two rater masks per exam")
    thr = cfg["rel_threshold"]
    tuning = None
    eval_recs = recs
    if cfg["tune_threshold"]:
        if cfg["tune_size"] >= len(recs):
            raise UsageError(f"tune-size {cfg['tune_size']} leaves no exams to evaluate")
        rng = np.random.default_rng(cfg["seed"])
        pick = set(rng.choice(len(recs), cfg["tune_size"], replace=False).tolist())
        tune_recs = [r for i, r in enumerate(recs) if i in pick]
        eval_recs = [r for i, r in enumerate(recs) if i not in pick]
        sel = select_threshold([planes[r.exam_id] for r in tune_recs], [r.raters for r in tune_recs])
        thr = sel.best
        tuning = {"tuning_size": len(tune_recs), "exam_ids": [r.exam_id for r in tune_recs],
                  "best": sel.best, "grid": list(sel.grid), "mean_dice": list(sel.scores)}
    model_masks = {}
    for r in eval_recs:
        data = np.zeros(r.inputs.shape[1:], np.uint8)
        data[r.slice_index] = threshold_plane(planes[r.exam_id], thr)
        model_masks[r.exam_id] = SegmentationMask(data, r.slice_index, "model")
    report = evaluate_test_set(model_masks, {r.exam_id: r.raters for r in eval_recs},
                               {r.exam_id: planes[r.exam_id] for r in eval_recs}, thr)
    if tuning is not None:
        report.summary["tuning"] = tuning
    out = Path(cfg["out"])
    report.write(out)
    if cfg["svg"]:
        from .evalstats import consensus_reference, roc

        curves = {}
        for r in eval_recs[:8]:
            ref = consensus_reference(r.raters, exclude=r.raters[0].rater_id).slice2d()
            if ref.any() and not ref.all():
                c = roc(planes[r.exam_id], ref)
                curves[r.exam_id] = (c.fpr, c.tpr)
        if curves:
            svg_line_plot(curves, out / "roc.svg", "ROC per exam", "false positive rate", "true positive rate")
        if tuning is not None:
            svg_line_plot({"mean Dice": (tuning["grid"], tuning["mean_dice"])}, out / "threshold_sweep.svg",
                          "threshold sweep", "relative threshold", "mean Dice")
    write_resolved("evaluate", cfg, out)
    s = report.summary
    print(f"median Dice model {s['median_dice_model']:.3f}, raters {s['median_dice_rater']:.3f}, "
          f"Wilcoxon p {s['wilcoxon']['p_value']:.3g}, TOST equivalent {s['tost']['equivalent']}")
    return EXIT_OK


def run_grad_checks(seed: int = 0) -> dict:
    """Finite-difference checks of every differentiable op and a small U-Net."""
    from .models import UNet3DConfig, build_unet3d
    from .neuro import (Parameter, avg_pool3_s2, bilinear_up_x2, concat_crop, conv1x1, conv3d_valid,
                        generalized_dice_loss, grad_check, relu, softmax_channels)

    rng = np.random.default_rng(seed)
    k = Parameter(rng.standard_normal((3, 2, 3, 3, 3)), "k")
    b = Parameter(rng.standard_normal(3), "b")
    k1 = Parameter(rng.standard_normal((3, 2, 1, 1, 1)), "k1")
    relu_x = rng.standard_normal((1, 2, 4, 4, 4))
    relu_x = np.where(np.abs(relu_x) < 0.05, 0.5, relu_x)
    t = np.zeros((2, 2, 2, 3, 3))
    lab = rng.integers(0, 2, (2, 2, 3, 3))
    t[:, 0], t[:, 1] = lab == 0, lab == 1
    p = rng.uniform(0.05, 1, t.shape)
    p /= p.sum(axis=1, keepdims=True)
    results = {
        "conv3d_valid": grad_check(lambda xs: conv3d_valid(xs[0], k, b), [rng.standard_normal((1, 2, 5, 5, 5))], [k, b], seed=seed),
        "conv1x1": grad_check(lambda xs: conv1x1(xs[0], k1, b), [rng.standard_normal((2, 2, 3, 4, 4))], [k1, b], seed=seed),
        "avg_pool3_s2": grad_check(lambda xs: avg_pool3_s2(xs[0]), [rng.standard_normal((1, 2, 7, 7, 7))], seed=seed),
        "bilinear_up_x2": grad_check(lambda xs: bilinear_up_x2(xs[0]), [rng.standard_normal((1, 2, 3, 3, 3))], seed=seed),
        "concat_crop": grad_check(lambda xs: concat_crop(xs[0], xs[1]),
                                  [rng.standard_normal((1, 2, 5, 5, 5)), rng.standard_normal((1, 1, 3, 3, 3))], seed=seed),
        "relu": grad_check(lambda xs: relu(xs[0]), [relu_x], seed=seed),
        "softmax_channels": grad_check(lambda xs: softmax_channels(xs[0]), [rng.standard_normal((1, 3, 2, 3, 3))], seed=seed),
        "generalized_dice_loss": grad_check(lambda xs: generalized_dice_loss(xs[0], t, norm_tol=None), [p], seed=seed),
    }
    net = build_unet3d(UNet3DConfig(in_channels=2, base_channels=2, input_patch=(3, 35, 35), output_tile=(1, 17, 17),
                                    prior_channel=True, seed=seed))
    # nonzero biases keep pre-activations off the ReLU kink, where the subgradient
    # convention and a central difference legitimately disagree
    for p in net.trainable_parameters():
        if p.name.endswith(".b"):
            p.data = rng.uniform(0.05, 0.15, p.shape).astype(np.float32)
    x = rng.standard_normal((1, 2, 3, 35, 35))
    prior = rng.random((1, 1, 1, 17, 17))
    tgt = np.zeros((1, 2, 1, 17, 17))
    lab = rng.integers(0, 2, (1, 1, 17, 17))
    tgt[:, 0], tgt[:, 1] = lab == 0, lab == 1
    results["unet3d_end_to_end"] = grad_check(
        lambda xs: generalized_dice_loss(net(xs[0], prior), tgt, norm_tol=None), [x], net.trainable_parameters(),
        n_samples=8, step=1e-6, floor=1e-6, seed=seed)
    return results


def cmd_grad_check(cfg: dict) -> int:
    res = run_grad_checks(cfg["seed"])
    worst_ops = max(v for k, v in res.items() if k != "unet3d_end_to_end")
    ok = worst_ops < 1e-4 and res["unet3d_end_to_end"] < 1e-3
    for k, v in res.items():
        print(f"{k:24s} {v:.3e}")
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.json").write_text(json.dumps({"errors": res, "passed": ok}, indent=1))
        write_resolved("grad-check", cfg, out)
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {
    "phantom-gen": cmd_phantom_gen,
    "harmonize": cmd_harmonize,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "tune-threshold": cmd_tune_threshold,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    from .neuro import NonFiniteError
    from .trainer import ConfigError, TrainingAborted
    from .volio import VolioError

    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingAborted, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VolioError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
