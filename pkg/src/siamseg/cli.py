"""Command-line pipeline: data generation, training, inference, evaluation,
schedule and key-frame inspection, and the gradient self-check.

Flags may also come from a flat key=value config file (`--config FILE`);
explicit flags win. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gradcheck as G
from . import inference as I
from . import schedule as S
from .dataset import NUM_CLASSES, load_dataset, overlay_image
from .errors import DataError, NumericalError
from .imageio import load_pgm, save_pgm, save_ppm
from .metrics import dice_report
from .model import ModelConfig, SegPropModel, load_checkpoint
from .synth import SynthConfig, generate_to_dir
from .trainer import TrainConfig, TrainMode, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class Opt:
    name: str                      # long flag without dashes
    type: type = str
    default: object = None
    required: bool = False
    help: str = ""
    choices: Optional[tuple] = None
    flag: bool = False             # store_true

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _opt(name, type=str, default=None, required=False, help="", choices=None, flag=False):
    return Opt(name=name, type=type, default=default, required=required,
               help=help, choices=choices, flag=flag)


MODEL_OPTS = [
    _opt("classes", int, 5, help="number of classes incl. background"),
    _opt("base-width", int, 16, help="encoder width of the first block"),
    _opt("blocks", int, 3, help="encoder block count"),
    _opt("stride", int, 4, help="feature-grid output stride"),
    _opt("prop-dim", int, 32, help="matching-feature dimensionality"),
]

COMMANDS = {
    "gen-data": [
        _opt("out", str, required=True, help="output dataset directory"),
        _opt("videos", int, 8),
        _opt("frames", int, 32, help="frames per video"),
        _opt("size", int, 64, help="square frame size"),
        _opt("label-fraction", float, 1.0),
        _opt("unlabeled-videos", int, 0, help="training videos stripped of all labels"),
        _opt("occlusion-rate", float, 0.0),
        _opt("test-videos", int, 2),
        _opt("no-shadow", flag=True, help="disable moving background shadows"),
        _opt("jump-at", int, None, help="inject a large-motion frame at this index"),
        _opt("seed", int, 0),
    ],
    "train": [
        _opt("data", str, required=True),
        _opt("out", str, required=True, help="checkpoint path"),
        _opt("mode", str, "full", choices=("full", "no-ssl", "no-consistency", "seg-only")),
        _opt("epochs", int, 20),
        _opt("batch", int, 4, help="frame pairs per step"),
        _opt("k", int, 20, help="top-k matches per point"),
        _opt("lambda", float, 1e-6, help="agreement-penalty scale"),
        _opt("t", float, 0.4, help="annealing temperature"),
        _opt("p1-min", float, 1.0 / 3.0, help="floor probability of the labeled mode"),
        _opt("aat-epochs", int, 20, help="epochs over which the schedule anneals"),
        _opt("lr", float, 2.5e-4),
        _opt("momentum", float, 0.9),
        _opt("pairs-per-case", int, 500),
        _opt("no-augment", flag=True),
        _opt("seed", int, 0),
        _opt("log", str, None, help="CSV step log path"),
    ] + MODEL_OPTS,
    "infer": [
        _opt("ckpt", str, required=True),
        _opt("data", str, required=True),
        _opt("video", str, required=True),
        _opt("out", str, required=True),
        _opt("mode", str, "msi", choices=("msi", "seg-only")),
        _opt("alpha", float, 0.98, help="watershed percentile"),
        _opt("k", int, 20),
        _opt("hard-source", flag=True, help="propagate hardened key-frame labels"),
        _opt("overlay", flag=True, help="also write palette overlays"),
    ] + MODEL_OPTS,
    "eval": [
        _opt("pred", str, required=True, help="directory of predicted label maps"),
        _opt("data", str, required=True),
        _opt("split", str, "test", choices=("train", "test")),
    ],
    "keyframes": [
        _opt("data", str, required=True),
        _opt("video", str, required=True),
        _opt("alpha", float, 0.98),
    ],
    "aat-curve": [
        _opt("t", float, 0.4),
        _opt("p1-min", float, 1.0 / 3.0),
        _opt("i-max", int, 1000),
        _opt("steps", int, 101, help="number of sampled schedule points"),
    ],
    "gradcheck": [
        _opt("seed", int, 0),
    ],
}

# flags whose defaults come straight from the published hyperparameters;
# echoed in every run header
PAPER_FLAGS = ("k", "lambda", "t", "p1-min", "alpha", "lr", "momentum")


def _build_parser() -> _Parser:
    parser = _Parser(prog="siamseg", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd, add_help=True)
        sp.add_argument("--config", default=None, help="flat key=value defaults file")
        for o in opts:
            if o.flag:
                sp.add_argument(f"--{o.name}", dest=o.dest, action="store_const",
                                const=True, default=None, help=o.help)
            else:
                sp.add_argument(f"--{o.name}", dest=o.dest, type=o.type, default=None,
                                help=o.help, choices=o.choices)
    return parser


def _read_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file {path} not found")
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(opt: Opt, raw: str):
    if opt.flag:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"--{opt.name}: expected a boolean, got {raw!r}")
    try:
        val = opt.type(raw)
    except ValueError:
        raise UsageError(f"--{opt.name}: expected {opt.type.__name__}, got {raw!r}") from None
    if opt.choices and val not in opt.choices:
        raise UsageError(f"--{opt.name}: must be one of {opt.choices}")
    return val


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    opts = COMMANDS[cmd]
    by_name = {o.name: o for o in opts}
    file_vals = {}
    if args.config:
        raw = _read_config_file(args.config)
        for key, value in raw.items():
            if key not in by_name:
                raise UsageError(f"config key {key!r} is not a {cmd} parameter")
            file_vals[key] = _coerce(by_name[key], value)
    merged = {}
    for o in opts:
        cli_val = getattr(args, o.dest)
        if cli_val is not None:
            merged[o.dest] = cli_val
        elif o.name in file_vals:
            merged[o.dest] = file_vals[o.name]
        else:
            merged[o.dest] = (False if o.flag and o.default is None else o.default)
        if o.required and merged[o.dest] is None:
            raise UsageError(f"--{o.name} is required")
    return merged


def _print_header(cmd: str, vals: dict) -> None:
    parts = []
    for flag in PAPER_FLAGS:
        dest = flag.replace("-", "_")
        if dest in vals and vals[dest] is not None:
            parts.append(f"{flag}={vals[dest]}")
    print(f"# siamseg {cmd} " + " ".join(parts))


def _model_config(vals: dict, seed: int = 0) -> ModelConfig:
    return ModelConfig(num_classes=vals["classes"], base_width=vals["base_width"],
                       encoder_blocks=vals["blocks"], output_stride=vals["stride"],
                       prop_feature_dim=vals["prop_dim"], seed=seed)


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def _cmd_gen_data(vals: dict) -> int:
    cfg = SynthConfig(videos=vals["videos"], frames_per_video=vals["frames"],
                      width=vals["size"], height=vals["size"],
                      label_fraction=vals["label_fraction"],
                      unlabeled_videos=vals["unlabeled_videos"],
                      occlusion_rate=vals["occlusion_rate"],
                      shadow=not vals["no_shadow"], test_videos=vals["test_videos"],
                      jump_at=vals["jump_at"], seed=vals["seed"])
    ds = generate_to_dir(cfg, vals["out"])
    labeled = sum(len(v.labels) for v in ds.videos)
    total = sum(v.num_frames for v in ds.videos)
    print(f"wrote {len(ds.videos)} videos, {total} frames ({labeled} labeled) "
          f"to {vals['out']}")
    return 0


def _cmd_train(vals: dict) -> int:
    _print_header("train", vals)
    dataset = load_dataset(vals["data"])
    cfg = TrainConfig(
        lr0=vals["lr"], momentum=vals["momentum"], batch_pairs=vals["batch"],
        max_epochs=vals["epochs"], lam=vals["lambda"], k_top=vals["k"],
        mode=TrainMode(vals["mode"]),
        aat=S.AatConfig(p1_floor=vals["p1_min"], t=vals["t"]),
        aat_epochs=vals["aat_epochs"], pairs_per_case=vals["pairs_per_case"],
        augment=not vals["no_augment"], model=_model_config(vals),
        seed=vals["seed"])
    result = train(dataset, cfg, ckpt_path=vals["out"], log_path=vals["log"])
    last = result.epochs[-1] if result.epochs else None
    acc = f" acc_seg={last.acc_seg:.4f} acc_prop={last.acc_prop:.4f}" if last else ""
    print(f"trained {result.global_step} steps ({len(result.epochs)} epochs, "
          f"{'plateau' if result.stopped_early else 'epoch cap'}){acc}")
    print(f"checkpoint written to {vals['out']}")
    return 0


def _load_model(vals: dict) -> SegPropModel:
    arrays, step = load_checkpoint(vals["ckpt"])
    model = SegPropModel(_model_config(vals))
    model.load_state(arrays)
    return model


def _cmd_infer(vals: dict) -> int:
    _print_header("infer", vals)
    dataset = load_dataset(vals["data"])
    video = dataset.by_id(vals["video"])
    model = _load_model(vals)
    if vals["mode"] == "msi":
        labels = I.msi_infer(model, video.frames, vals["alpha"], vals["k"],
                             hard_source=vals["hard_source"])
    else:
        labels = I.seg_infer(model, video.frames)
    out_dir = os.path.join(vals["out"], video.id)
    os.makedirs(out_dir, exist_ok=True)
    for i, lab in enumerate(labels):
        save_pgm(os.path.join(out_dir, f"label_{i:04d}.pgm"), lab.astype(np.uint8))
        if vals["overlay"]:
            save_ppm(os.path.join(out_dir, f"overlay_{i:04d}.ppm"), overlay_image(lab))
    print(f"wrote {len(labels)} label maps to {out_dir}")
    return 0


def _cmd_eval(vals: dict) -> int:
    dataset = load_dataset(vals["data"])
    pairs = []
    for vid, idx in dataset.labeled_frames(vals["split"]):
        candidates = [
            os.path.join(vals["pred"], vid, f"label_{idx:04d}.pgm"),
            os.path.join(vals["pred"], f"label_{idx:04d}.pgm"),
        ]
        pred_file = next((c for c in candidates if os.path.exists(c)), None)
        if pred_file is None:
            raise DataError(f"no prediction found for {vid} frame {idx} under "
                            f"{vals['pred']}")
        pred = load_pgm(pred_file).astype(np.int64)
        gt = dataset.by_id(vid).labels[idx]
        if pred.shape != gt.shape:
            raise DataError(f"{pred_file}: size {pred.shape} != label size {gt.shape}")
        pairs.append((pred, gt))
    report = dice_report(pairs, NUM_CLASSES)
    print(f"mean_dice={report.mean_dice:.6f}")
    print("class,dice")
    for c, d in sorted(report.per_class.items()):
        print(f"{c},{d:.6f}")
    return 0


def _cmd_keyframes(vals: dict) -> int:
    dataset = load_dataset(vals["data"])
    video = dataset.by_id(vals["video"])
    partition = I.select_clips(video.frames, vals["alpha"])
    ws = ",".join(str(i) for i in partition.watershed_indices)
    clips = ";".join(f"{c.start}..{c.end - 1}" for c in partition.clips)
    keys = ",".join(str(c.key) for c in partition.clips)
    print(f"watershed={ws} clips={clips} keys={keys}")
    return 0


def _cmd_aat_curve(vals: dict) -> int:
    cfg = S.AatConfig(p1_floor=vals["p1_min"], t=vals["t"], i_max=vals["i_max"])
    cfg.validate()
    steps = max(2, vals["steps"])
    print("step,p1,p2,p3")
    for j in range(steps):
        i = int(round(j * vals["i_max"] / (steps - 1)))
        q1, q2, q3 = S.case_probabilities(i, cfg)
        print(f"{i},{q1!r},{q2!r},{q3!r}")
    return 0


def _cmd_gradcheck(vals: dict) -> int:
    results = G.run_suite(seed=vals["seed"], report=print)
    if any(not r.passed for r in results):
        raise NumericalError("gradient check failed")
    print(f"all {len(results)} gradient checks passed")
    return 0


HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "keyframes": _cmd_keyframes,
    "aat-curve": _cmd_aat_curve,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        vals = _resolve(args.command, args)
        return HANDLERS[args.command](vals)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError,) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
