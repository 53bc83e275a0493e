"""Shared argument handling for the experiment scripts."""

import argparse
import time
from pathlib import Path

from cascadeseg.config import load_run_config
from cascadeseg.pipeline import generate_synthetic, normalize_intensity

REGIONS = ("WT", "TC", "EC")
DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", default=str(DESK), help="run config YAML (default: desk scale)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--patients", type=int, default=30)
    ap.add_argument("--test", type=int, default=5, help="held-out patients")
    ap.add_argument("--size", type=int, default=32)
    return ap


def setup(args):
    return load_run_config(args.config)


def split(args, seed):
    vols = [normalize_intensity(v) for v in generate_synthetic(seed, args.size, args.patients)]
    return vols[:-args.test], vols[-args.test:]


def row(label: str, scores: dict) -> str:
    return f"{label:18s}" + "".join(f"{scores[r]:8.3f}" for r in REGIONS)


def header(label: str = "") -> str:
    return f"{label:18s}" + "".join(f"{r:>8s}" for r in REGIONS)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
