"""Command-line interface: synth, train, infer, eval, sweep, serve.

Every verb reads one optional JSON config file (``--config path``) and
accepts ``--key value`` overrides for any config key; override values are
parsed as JSON when possible, otherwise taken as strings.  Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.

Report-producing verbs write delimited output plus a rendered figure next
to it: ``train`` emits metrics.csv and loss_curve.png in the checkpoint
directory, ``sweep`` emits sweep.csv and sweep.png.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .data import Manifest, ManifestItem, SynthSpec, Volume, generate_synthetic
from .errors import FormatError, NonFiniteError, ShapeError
from .metrics import MaskPair, arvd, dsc, metric_report
from .rays import training_center
from .sweep import average_sweeps, sweep_slice
from .train import (
    DEFAULT_NUM_RAYS,
    DEFAULT_SEQ_LEN,
    DEFAULT_STRIDE,
    Segmenter,
    TrainConfig,
    infer,
    train,
)

EXTRACTION_KEYS = {
    "num_rays": DEFAULT_NUM_RAYS,
    "stride": DEFAULT_STRIDE,
    "seq_len": DEFAULT_SEQ_LEN,
}

DEFAULTS = {
    "synth": {
        "out_dir": None,
        "slices": 40,
        "test_slices": 10,
        "image_size": 128,
        "kind": "disk",
        "radius_range": [15, 26],
        "boundary_blur_sigma": 1.2,
        "contrast": 0.6,
        "noise_sigma": 0.04,
        "distractors": 2,
        "background": 0.15,
        "center_jitter": 8,
        "spacing": [1.0, 1.0, 1.0],
        "seed": 0,
    },
    "train": {
        "manifest": None,
        "checkpoint_dir": "checkpoints",
        "variant": "full",
        "base_channels": 16,
        "epochs": 10,
        "sequences_per_batch": 16,
        "learning_rate": 1e-3,
        "weight_decay": 1e-4,
        "seed": 0,
        "patch_size": 32,
        **EXTRACTION_KEYS,
    },
    "infer": {
        "checkpoint": None,
        "volume": None,
        "mask": None,
        "slice_index": 0,
        "click_x": None,
        "click_y": None,
        "out_prefix": "segmented",
        **EXTRACTION_KEYS,
    },
    "eval": {
        "checkpoint": None,
        "manifest": None,
        "split": "test",
        "out": None,
        **EXTRACTION_KEYS,
    },
    "sweep": {
        "checkpoint": None,
        "manifest": None,
        "split": "test",
        "max_offset": 20,
        "step": 10,
        "max_slices": None,
        "out_dir": "sweep_report",
        **EXTRACTION_KEYS,
    },
    "serve": {
        "checkpoint": None,
        "manifest": None,
        "host": "127.0.0.1",
        "port": 8000,
        **EXTRACTION_KEYS,
    },
}

REQUIRED = {
    "synth": ("out_dir",),
    "train": ("manifest",),
    "infer": ("checkpoint", "volume", "click_x", "click_y"),
    "eval": ("checkpoint", "manifest"),
    "sweep": ("checkpoint", "manifest"),
    "serve": ("checkpoint", "manifest"),
}


class UsageError(Exception):
    """Bad invocation: wrong flags, unknown keys, malformed config."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 by default; the contract reserves 2 for
    # data errors, so usage problems are rethrown and mapped to 1
    def error(self, message):
        raise UsageError(message)


def _parse_overrides(pairs):
    out = {}
    i = 0
    while i < len(pairs):
        flag = pairs[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise UsageError(f"expected --key, got {flag!r}")
        if i + 1 >= len(pairs):
            raise UsageError(f"flag {flag} is missing a value")
        key = flag[2:].replace("-", "_")
        raw = pairs[i + 1]
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
        i += 2
    return out


def _load_config_file(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot parse config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _merge(verb, config_path, overrides):
    cfg = dict(DEFAULTS[verb])
    for source, name in (
        (_load_config_file(config_path) if config_path else {}, "config file"),
        (overrides, "command line"),
    ):
        for key, value in source.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise UsageError(f"unknown {verb} key {key!r} on the {name}")
            cfg[key] = value
    missing = [k for k in REQUIRED[verb] if cfg[k] is None]
    if missing:
        raise UsageError(f"{verb} requires: {', '.join('--' + k for k in missing)}")
    return cfg


def _as_int(cfg, key):
    value = cfg[key]
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise UsageError(f"{key} must be an integer, got {value!r}")
    try:
        return int(value)
    except (TypeError, ValueError) as e:
        raise UsageError(f"{key} must be an integer, got {value!r}") from e


def _extraction(cfg):
    return {k: _as_int(cfg, k) for k in EXTRACTION_KEYS}


# verbs ------------------------------------------------------------------


def cmd_synth(cfg):
    """Generate a train/test synthetic volume pair plus a manifest."""
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_test = _as_int(cfg, "slices"), _as_int(cfg, "test_slices")
    try:
        spec = SynthSpec(
            image_size=_as_int(cfg, "image_size"),
            kind=cfg["kind"],
            radius_range=tuple(cfg["radius_range"]),
            boundary_blur_sigma=cfg["boundary_blur_sigma"],
            contrast=cfg["contrast"],
            noise_sigma=cfg["noise_sigma"],
            distractors=_as_int(cfg, "distractors"),
            background=cfg["background"],
            center_jitter=_as_int(cfg, "center_jitter"),
            spacing=tuple(cfg["spacing"]),
            seed=_as_int(cfg, "seed"),
        )
    except (ShapeError, TypeError) as e:
        raise UsageError(f"bad synth configuration: {e}") from e
    whole = generate_synthetic(spec, n_train + n_test)

    items = []
    for name, lo, hi in (("train", 0, n_train), ("test", n_train, n_train + n_test)):
        if lo == hi:
            continue
        part = Volume(whole.data[lo:hi], whole.spacing, whole.mask[lo:hi])
        part.save(
            os.path.join(out_dir, f"{name}.segv1"),
            os.path.join(out_dir, f"{name}_mask.segv1"),
        )
        items.append(ManifestItem(f"{name}.segv1", f"{name}_mask.segv1", name))
    manifest = Manifest(items, base_dir=out_dir)
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest.save(manifest_path)
    print(f"wrote {n_train} train + {n_test} test slices under {out_dir}")
    print(f"manifest: {manifest_path}")
    return 0


def _write_train_report(result, directory):
    rows = [
        (epoch, loss, result.epoch_dsc[epoch])
        for epoch, loss in enumerate(result.epoch_losses)
    ]
    csv_path = os.path.join(directory, "metrics.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "heldout_dsc"])
        for epoch, loss, score in rows:
            writer.writerow([epoch, repr(float(loss)), repr(float(score))])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(epochs, [r[1] for r in rows], marker="o", label="training loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("bce loss")
    scores = [r[2] for r in rows]
    if np.isfinite(scores).any():
        twin = ax.twinx()
        twin.plot(epochs, scores, marker="s", color="tab:orange", label="held-out DSC")
        twin.set_ylabel("DSC (%)")
    ax.set_title("training curve")
    fig.tight_layout()
    png_path = os.path.join(directory, "loss_curve.png")
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return csv_path, png_path


def cmd_train(cfg):
    # validate the invocation before touching any files
    try:
        config = TrainConfig(
            variant=cfg["variant"],
            base_channels=_as_int(cfg, "base_channels"),
            epochs=_as_int(cfg, "epochs"),
            sequences_per_batch=_as_int(cfg, "sequences_per_batch"),
            learning_rate=float(cfg["learning_rate"]),
            weight_decay=float(cfg["weight_decay"]),
            seed=_as_int(cfg, "seed"),
            patch_size=_as_int(cfg, "patch_size"),
            checkpoint_dir=cfg["checkpoint_dir"],
            **_extraction(cfg),
        )
    except (ShapeError, TypeError, ValueError) as e:
        raise UsageError(f"bad train configuration: {e}") from e
    manifest = Manifest.load(cfg["manifest"])

    def progress(epoch, loss, score):
        print(f"epoch {epoch}: loss {loss:.4f} heldout_dsc {score:.2f}", flush=True)

    result = train(config, manifest, progress=progress)
    csv_path, png_path = _write_train_report(result, config.checkpoint_dir)
    print(f"best epoch {result.best_epoch} dsc {result.best_dsc:.2f} -> {result.best_path}")
    print(f"report: {csv_path} and {png_path}")
    return 0


def cmd_infer(cfg):
    from PIL import Image

    volume = Volume.load(cfg["volume"], cfg["mask"])
    slice_index = _as_int(cfg, "slice_index")
    click = (_as_int(cfg, "click_x"), _as_int(cfg, "click_y"))
    mask, lmap = infer(
        cfg["checkpoint"], volume, slice_index, click, **_extraction(cfg)
    )
    prefix = cfg["out_prefix"]
    parent = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(parent, exist_ok=True)
    mask_path, prob_path = f"{prefix}_mask.png", f"{prefix}_prob.png"
    Image.fromarray(mask * 255, mode="L").save(mask_path)
    prob = np.round(lmap.fused() * 255.0).astype(np.uint8)
    Image.fromarray(prob, mode="L").save(prob_path)
    print(f"wrote {mask_path} and {prob_path}")
    if volume.mask is not None:
        score = dsc(MaskPair(mask, volume.mask[slice_index]))
        print(f"DSC: {score:.4f}")
    return 0


def _scored_slices(manifest, split, segmenter):
    """Segment every nonempty-mask slice of a split at its mask centroid."""
    rows = []
    for item in manifest.split_items(split):
        if item.mask_path is None:
            continue
        vol = manifest.load_volume(item)
        for s in range(vol.dims[0]):
            gt = vol.mask[s]
            if not gt.any():
                continue
            predicted, _ = segmenter.segment(vol.data[s], training_center(gt))
            rows.append((item.volume_path, s, predicted, gt, vol.spacing))
    return rows


def cmd_eval(cfg):
    segmenter = Segmenter.from_checkpoint(cfg["checkpoint"], **_extraction(cfg))
    manifest = Manifest.load(cfg["manifest"])
    rows = _scored_slices(manifest, cfg["split"], segmenter)
    if not rows:
        raise FormatError(
            f"manifest has no {cfg['split']} slices with nonempty masks"
        )
    per_slice = []
    for volume_path, s, predicted, gt, spacing in rows:
        pair = MaskPair(predicted, gt, spacing[:2])
        if predicted.any():
            entry = metric_report(pair)
            entry["cd"] = list(entry["cd"])
        else:
            # boundary and centroid metrics are undefined on an empty
            # prediction; record the dice and volume scores only
            entry = {"dsc": dsc(pair), "arvd": arvd(pair), "cd": None,
                     "hd95": None, "abd": None}
        entry["volume"] = volume_path
        entry["slice"] = s
        per_slice.append(entry)

    def aggregate(key):
        values = [row[key] for row in per_slice if row[key] is not None]
        if not values:
            return None
        return {"mean": float(np.mean(values)), "std": float(np.std(values)),
                "count": len(values)}

    report = {
        "checkpoint": cfg["checkpoint"],
        "split": cfg["split"],
        "slices": len(per_slice),
        "metrics": {k: aggregate(k) for k in ("dsc", "hd95", "abd", "arvd")},
        "per_slice": per_slice,
    }
    blob = json.dumps(report, indent=2)
    if cfg["out"]:
        with open(cfg["out"], "w") as f:
            f.write(blob + "\n")
        print(f"wrote {cfg['out']}")
        print(f"mean dsc: {report['metrics']['dsc']['mean']:.4f}")
    else:
        print(blob)
    return 0


def cmd_sweep(cfg):
    segmenter = Segmenter.from_checkpoint(cfg["checkpoint"], **_extraction(cfg))
    manifest = Manifest.load(cfg["manifest"])
    step, max_offset = _as_int(cfg, "step"), _as_int(cfg, "max_offset")
    if step <= 0 or max_offset < 0 or max_offset % step:
        raise UsageError("max_offset must be a non-negative multiple of step")
    offsets = tuple(range(-max_offset, max_offset + 1, step))

    limit = None if cfg["max_slices"] is None else _as_int(cfg, "max_slices")
    results = []
    for item in manifest.split_items(cfg["split"]):
        if item.mask_path is None or (limit is not None and len(results) >= limit):
            continue
        vol = manifest.load_volume(item)
        for s in range(vol.dims[0]):
            if limit is not None and len(results) >= limit:
                break
            if not vol.mask[s].any():
                continue
            results.append(sweep_slice(vol.data[s], vol.mask[s], segmenter, offsets))
    if not results:
        raise FormatError(f"manifest has no {cfg['split']} slices with nonempty masks")
    mean = average_sweeps(results)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    csv_path = os.path.join(cfg["out_dir"], "sweep.csv")
    png_path = os.path.join(cfg["out_dir"], "sweep.png")
    mean.save_csv(csv_path)
    mean.save_heatmap(png_path)
    print(f"averaged {len(results)} slices over offsets {list(offsets)}")
    print(f"center DSC {mean.cell(0, 0):.2f}")
    print(f"report: {csv_path} and {png_path}")
    return 0


def cmd_serve(cfg):
    import uvicorn

    from .service import create_app

    manifest = Manifest.load(cfg["manifest"])
    app = create_app(cfg["checkpoint"], manifest, **_extraction(cfg))
    uvicorn.run(app, host=cfg["host"], port=_as_int(cfg, "port"))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "serve": cmd_serve,
}


def main(argv=None):
    parser = _Parser(
        prog="seqseg",
        description="Interactive point-based segmentation: data, training, "
                    "inference, evaluation, robustness sweeps, and serving.",
    )
    parser.add_argument("verb", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config file")
    try:
        args, rest = parser.parse_known_args(argv)
        cfg = _merge(args.verb, args.config, _parse_overrides(rest))
        return COMMANDS[args.verb](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (FormatError, ShapeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


def run():
    raise SystemExit(main())


if __name__ == "__main__":
    run()
