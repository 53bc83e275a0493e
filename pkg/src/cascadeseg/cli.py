"""Command-line entry point.

Data directories hold ``<patient>_image.mvol`` (float32, [K, X, Y, Z]) and
optionally ``<patient>_labels.mvol`` (uint8). Runs live in ``run/<name>/``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, trainer
from .config import RunConfig, load_run_config, save_run_config
from .models import Bundle2D, ModelVariant, build_model, load_spec, receptive_field
from .mvol import read_mvol, read_sidecar, write_mvol, write_sidecar
from .pipeline import ORIENTATIONS, FeatureVolume, VolumeSet, generate_synthetic, normalize_intensity
from .vote import Thresholds, merge_segmentations

log = logging.getLogger("cascadeseg")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# data access


def save_volume_set(v: VolumeSet, out: Path) -> None:
    img = out / f"{v.patient_id}_image.mvol"
    write_mvol(v.image.astype(np.float32), img)
    write_sidecar(img, {"patient_id": v.patient_id, "present": list(v.present)})
    if v.labels is not None:
        write_mvol(v.labels.astype(np.uint8), out / f"{v.patient_id}_labels.mvol")


def load_dataset(data: str | Path, normalization_constant: float = 1.0,
                 require_labels: bool = False) -> list[VolumeSet]:
    data = Path(data)
    if not data.is_dir():
        raise CliError(f"data directory {data} not found")
    images = sorted(data.glob("*_image.mvol"))
    if not images:
        raise CliError(f"no *_image.mvol files in {data}")
    vols = []
    for img in images:
        pid = img.name[: -len("_image.mvol")]
        lab_path = data / f"{pid}_labels.mvol"
        if require_labels and not lab_path.exists():
            raise CliError(f"missing labels for {pid}")
        labels = read_mvol(lab_path)[0] if lab_path.exists() else None
        present = read_sidecar(img).get("present")
        v = VolumeSet(pid, read_mvol(img), labels, tuple(present) if present else None)
        vols.append(normalize_intensity(v, normalization_constant))
    return vols


def load_features(directory: Path, volumes: list[VolumeSet]) -> dict[str, FeatureVolume]:
    out = {}
    for v in volumes:
        p = directory / f"{v.patient_id}_features.mvol"
        if not p.exists():
            raise CliError(f"no feature file for {v.patient_id} in {directory}")
        meta = read_sidecar(p)
        out[v.patient_id] = FeatureVolume(read_mvol(p), meta.get("source", ""),
                                          tuple(meta.get("order", ORIENTATIONS)))
    return out


def _run_dir(args, cfg: RunConfig) -> trainer.RunDir:
    run = trainer.RunDir(args.run).create()
    if not run.config_copy.exists():
        save_run_config(cfg, run.config_copy)
    return run


def _config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _2d_params(run: trainer.RunDir, model: str, orientation: str) -> Path:
    return run.params / f"{model}_{orientation}.npz"


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    out = Path(args.out)
    vols = generate_synthetic(args.seed, args.size, args.patients, args.noise)
    for v in vols:
        save_volume_set(v, out)
    print(f"wrote {len(vols)} patients to {out}")


def cmd_train2d(args) -> None:
    cfg = _config(args)
    run = _run_dir(args, cfg)
    model = args.model or cfg.architecture_2d
    spec = load_spec(model)
    vols = load_dataset(args.data, cfg.pipeline.normalization_constant, require_labels=True)
    train, monitor = trainer.split_monitor(vols, cfg.train.monitor_fraction)
    orientations = ORIENTATIONS if args.orientation == "all" else (args.orientation,)
    for o in orientations:
        net, rows = trainer.train_2d(spec, train, o, cfg, cfg.seed + 101 * ORIENTATIONS.index(o),
                                     args.iterations, monitor)
        net.save(_2d_params(run, spec.name, o))
        run.append_log(f"train2d:{spec.name}:{o}", rows)
        print(f"{spec.name} {o}: final loss {rows[-1]['loss']:.6g}")


def cmd_extract(args) -> None:
    cfg = _config(args)
    run = _run_dir(args, cfg)
    model = args.model or cfg.architecture_2d
    spec = load_spec(model)
    nets = {}
    for o in ORIENTATIONS:
        p = _2d_params(run, spec.name, o)
        if not p.exists():
            raise CliError(f"missing trained 2-D network {p}")
        net = Bundle2D(spec)
        net.load(p)
        nets[o] = net
    vols = load_dataset(args.data, cfg.pipeline.normalization_constant)
    out = run.features / spec.name
    feats = trainer.extract_training_features(vols, nets, out, source=spec.name)
    print(f"wrote {len(feats)} feature volumes to {out}")


def cmd_train3d(args) -> None:
    cfg = _config(args)
    run = _run_dir(args, cfg)
    variant = ModelVariant.parse(args.variant)
    spec = load_spec(args.arch or cfg.architecture_3d)
    vols = load_dataset(args.data, cfg.pipeline.normalization_constant, require_labels=True)
    train, monitor = trainer.split_monitor(vols, cfg.train.monitor_fraction)
    feats = None
    if args.features:
        feats = load_features(run.features / args.features, vols)
    elif variant.uses_features:
        raise CliError(f"{variant.value} needs --features <2-D model name>")
    net, rows = trainer.train_3d(spec, variant, train, feats, cfg, cfg.seed + 7, args.iterations,
                                 monitor, feats)
    name = _3d_name(variant, args.features if variant.uses_features else None)
    net.save(run.params / f"{name}.npz")
    run.append_log(f"train3d:{name}", rows)
    print(f"{name}: final loss {rows[-1]['loss']:.6g}")


def _3d_name(variant: ModelVariant, source: str | None) -> str:
    return variant.value if not source else f"{variant.value}_{source}"


def cmd_segment(args) -> None:
    cfg = _config(args)
    run = _run_dir(args, cfg)
    variant = ModelVariant.parse(args.variant)
    vols = load_dataset(args.data, cfg.pipeline.normalization_constant)
    out = run.segmentations
    if variant.is_2d:
        spec = load_spec(args.arch or variant.value)
        net = Bundle2D(spec)
        p = _2d_params(run, spec.name, args.orientation)
        name = f"{spec.name}_{args.orientation}"
    else:
        spec = load_spec(args.arch or cfg.architecture_3d)
        net = build_model(variant, spec)
        name = _3d_name(variant, args.features if variant.uses_features else None)
        p = run.params / f"{name}.npz"
    if not p.exists():
        raise CliError(f"missing trained parameters {p}")
    net.load(p)
    feats = load_features(run.features / args.features, vols) if variant.uses_features else {}
    for v in vols:
        if variant.is_2d:
            seg = trainer.segment_2d(net, v, args.orientation)
        else:
            seg = trainer.segment_3d(net, v, feats.get(v.patient_id))
        write_mvol(seg, out / name / f"{v.patient_id}_seg.mvol")
    print(f"wrote {len(vols)} segmentations to {out / name}")


def cmd_merge(args) -> None:
    segs = [read_mvol(p) for p in args.inputs]
    shapes = {s.shape for s in segs}
    if len(shapes) != 1:
        raise CliError(f"input extents differ: {sorted(shapes)}")
    t = Thresholds(args.t_tumor, args.t_core, args.t_enh, inclusive=not args.strict)
    merged = merge_segmentations([s[0] for s in segs], t)
    write_mvol(merged, args.out)
    print(f"merged {len(segs)} segmentations into {args.out}")


def _pairs(pred: Path, truth: Path) -> list[tuple[str, Path, Path]]:
    out = []
    for p in sorted(pred.glob("*_seg.mvol")):
        pid = p.name[: -len("_seg.mvol")]
        t = truth / f"{pid}_labels.mvol"
        if not t.exists():
            raise CliError(f"no ground truth for {pid} in {truth}")
        out.append((pid, p, t))
    if not out:
        raise CliError(f"no *_seg.mvol files in {pred}")
    return out


def cmd_eval(args) -> None:
    rows = []
    print("patient\tWT\tTC\tEC")
    for pid, p, t in _pairs(Path(args.pred), Path(args.truth)):
        s = metrics.evaluate(read_mvol(p)[0], read_mvol(t)[0])
        rows.append(s)
        print(f"{pid}\t{s['WT']:.4f}\t{s['TC']:.4f}\t{s['EC']:.4f}")
    print()
    print("stat\tWT\tTC\tEC")
    summ = metrics.summarize(rows)
    for stat in ("mean", "std", "median", "q25", "q75"):
        print(stat + "\t" + "\t".join(f"{summ[r][stat]:.4f}" for r in metrics.REGIONS))


def cmd_receptive_field(args) -> None:
    print(" ".join(str(v) for v in receptive_field(load_spec(args.config))))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cascadeseg")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic multi-modal volumes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True)
        p.add_argument("--run", required=True, help="run directory, e.g. run/exp1")
        p.add_argument("--config", help="run config (YAML)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train2d", help="train orientation-specific 2-D networks")
    common(p)
    p.add_argument("--model", help="2-D architecture config (default from run config)")
    p.add_argument("--orientation", default="all", choices=("all",) + ORIENTATIONS)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train2d)

    p = sub.add_parser("extract-features", help="stack 2-D logits into feature volumes")
    common(p)
    p.add_argument("--model", help="2-D architecture config (default from run config)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train3d", help="train a 3-D or 2D-3D network on patches")
    common(p)
    p.add_argument("--variant", default="standard")
    p.add_argument("--arch", help="3-D architecture config (default from run config)")
    p.add_argument("--features", help="feature source (2-D model name) under <run>/features")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train3d)

    p = sub.add_parser("segment", help="segment volumes with a trained network")
    common(p)
    p.add_argument("--variant", default="standard")
    p.add_argument("--arch")
    p.add_argument("--features")
    p.add_argument("--orientation", default="axial", choices=ORIENTATIONS)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("merge", help="hierarchical vote over label volumes")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--t-tumor", type=float, default=0.4)
    p.add_argument("--t-core", type=float, default=0.3)
    p.add_argument("--t-enh", type=float, default=0.4)
    p.add_argument("--strict", action="store_true", help="require proportion > threshold")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="Dice per patient and summary")
    p.add_argument("--pred", required=True, help="directory of <patient>_seg.mvol")
    p.add_argument("--truth", required=True, help="directory of <patient>_labels.mvol")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("receptive-field", help="theoretical receptive field of a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_receptive_field)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
