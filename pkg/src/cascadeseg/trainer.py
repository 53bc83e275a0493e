"""Training protocols: 2-D orientation nets, feature extraction, 3-D nets,
subnetwork pretraining for missing modalities and the six-member ensemble."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .config import RunConfig
from .losses import TargetWeights, batch_loss, combined_loss
from .models import (ArchitectureSpec, Bundle2D, ModelVariant, Net3D, Network, build_model,
                     forward_training, load_spec, spatial_multiple)
from .mvol import write_mvol, write_sidecar
from .optim import (OptimizerConfig, OptimizerState, accumulate_gradient, flatten, schedule_update,
                    step, unflatten)
from .pipeline import (ORIENTATIONS, FeatureVolume, VolumeSet, crop, extract_features,
                       label_slices, orientation_logits, pad_to_multiple, sample_origins, to_slices)
from .vote import merge_segmentations

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# generic loop


def fit(net: Network, make_batch: Callable, loss_fn: Callable, opt: OptimizerConfig,
        iterations: int, rng: np.random.Generator, param_names: Sequence[str] | None = None,
        on_iteration: Callable | None = None) -> list[dict]:
    """Norm-SGD over ``iterations`` steps of ``opt.n_batches`` batches each."""
    names = list(param_names) if param_names is not None else net.parameter_names()
    params = [net.params[n] for n in names]
    state = OptimizerState.create(sum(p.data.size for p in params), opt)
    log = []

    def grad_fn(batch):
        net.zero_grad()
        loss = loss_fn(batch)
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        return loss.item(), flatten(grads)

    for it in range(iterations):
        batches = [make_batch(rng) for _ in range(opt.n_batches)]
        try:
            loss_n, g = accumulate_gradient(batches, grad_fn)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite loss or gradient at iteration {it}: {exc}") from exc
        theta = flatten([p.data for p in params])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            theta, state = step(state, g, theta)
        for p, new in zip(params, unflatten(theta, [p.data for p in params])):
            p.data = new
        schedule_update(state, loss_n)
        row = {"iteration": it, "loss": loss_n, "alpha": state.alpha, "window": state.window}
        if on_iteration is not None:
            row.update(on_iteration(it) or {})
        log.append(row)
    net.zero_grad()
    return log


def _targets(t) -> TargetWeights:
    return TargetWeights(tuple(t))


# ---------------------------------------------------------------------------
# 2-D


def _slice_bank(volumes: Sequence[VolumeSet], orientation: str, channels: slice | None = None):
    xs, ys = [], []
    for v in volumes:
        img = v.image if channels is None else v.image[channels]
        xs.append(to_slices(img, orientation))
        ys.append(label_slices(v.labels, orientation))
    return np.ascontiguousarray(np.concatenate(xs)), np.ascontiguousarray(np.concatenate(ys))


def _check_extents(spec: ArchitectureSpec, extents: Sequence[int]) -> None:
    m = spatial_multiple(spec)
    if any(e % m for e in extents):
        raise ValueError(f"{spec.name}: training extents {tuple(extents)} must be multiples of {m}")


def segment_2d(net: Bundle2D, volume: VolumeSet, orientation: str) -> np.ndarray:
    logits = orientation_logits(net, volume.image, orientation, spatial_multiple(net.spec))
    return logits.argmax(axis=0).astype(np.uint8)


def _monitor(segment: Callable, volumes: Sequence[VolumeSet]) -> dict:
    scores = [metrics.evaluate(segment(v), v.labels) for v in volumes]
    return {f"dice_{k}": v for k, v in metrics.mean_scores(scores).items()}


def train_2d(spec: ArchitectureSpec, volumes: Sequence[VolumeSet], orientation: str, cfg: RunConfig,
             seed: int, iterations: int | None = None, monitor: Sequence[VolumeSet] = (),
             init: dict | None = None) -> tuple[Bundle2D, list[dict]]:
    """Train one orientation-specific 2-D bundle on whole slices."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}")
    if not volumes or any(v.labels is None for v in volumes):
        raise ValueError("2-D training needs labelled volumes")
    net = Bundle2D(spec, seed=seed)
    if init:
        net.load_state_dict(init, strict=False)
    if len(cfg.loss.c_k) != net.num_subnetworks:
        raise ValueError(f"{len(cfg.loss.c_k)} subnetwork loss coefficients for {net.num_subnetworks} subnetworks")
    X, Y = _slice_bank(volumes, orientation)
    _check_extents(spec, X.shape[2:])
    targets = _targets(cfg.loss.targets_2d)
    bs = cfg.train.slices_per_batch

    def make_batch(rng):
        idx = rng.integers(0, len(X), size=bs)
        return X[idx], Y[idx]

    def loss_fn(batch):
        xb, yb = batch
        logits, aux = forward_training(net, ad.tensor(xb))
        main = batch_loss(logits, yb, targets)
        subs = [batch_loss(a, yb, targets) for a in aux]
        return combined_loss(main, subs, cfg.loss.c_main, cfg.loss.c_k)[0]

    every = cfg.train.monitor_every
    n_it = iterations or cfg.train.iterations_2d

    def on_iteration(it):
        if monitor and (it % every == every - 1 or it == n_it - 1):
            return _monitor(lambda v: segment_2d(net, v, orientation), monitor)
        return None

    log = fit(net, make_batch, loss_fn, cfg.optimizer_2d, n_it,
              np.random.default_rng(seed), on_iteration=on_iteration)
    return net, log


def pretrain_subnetwork(bundle: Bundle2D, modality_index: int, volumes: Sequence[VolumeSet],
                        orientation: str, cfg: RunConfig, seed: int,
                        iterations: int | None = None) -> dict[str, np.ndarray]:
    """Train subnetwork ``k`` and its auxiliary head alone on volumes that have modality ``k``."""
    k = modality_index
    if not 0 <= k < bundle.K:
        raise ValueError(f"modality index {k} out of range for {bundle.K} modalities")
    usable = [v for v in volumes if v.present[k]]
    if not usable:
        raise ValueError(f"no training volume provides modality {k}")
    X, Y = _slice_bank(usable, orientation, channels=slice(k, k + 1))
    targets = _targets(cfg.loss.targets_2d)
    bs = cfg.train.slices_per_batch

    def make_batch(rng):
        idx = rng.integers(0, len(X), size=bs)
        return X[idx], Y[idx]

    def loss_fn(batch):
        xb, yb = batch
        _, logits = bundle.subnetwork_forward(k, ad.tensor(xb), train=True)
        return batch_loss(logits, yb, targets)

    names = [n for n in bundle.parameter_names() if n.startswith(f"sub{k}.")]
    fit(bundle, make_batch, loss_fn, cfg.optimizer_2d, iterations or cfg.train.pretrain_iterations,
        np.random.default_rng(seed), param_names=names)
    return bundle.subnetwork_state(k)


def subnetwork_aux_loss(bundle: Bundle2D, k: int, volumes: Sequence[VolumeSet], orientation: str,
                        targets: Sequence[float]) -> float:
    """Mean auxiliary loss of subnetwork ``k`` over all slices (inference mode)."""
    X, Y = _slice_bank([v for v in volumes if v.present[k]], orientation, channels=slice(k, k + 1))
    t = _targets(targets)
    total = 0.0
    for i in range(0, len(X), 8):
        _, logits = bundle.subnetwork_forward(k, ad.tensor(X[i:i + 8]), train=False)
        total += batch_loss(logits, Y[i:i + 8], t).item() * len(X[i:i + 8])
    return total / len(X)


def train_orientations(spec: ArchitectureSpec, volumes: Sequence[VolumeSet], cfg: RunConfig, seed: int,
                       iterations: int | None = None) -> dict[str, Bundle2D]:
    return {o: train_2d(spec, volumes, o, cfg, seed + 101 * i, iterations)[0]
            for i, o in enumerate(ORIENTATIONS)}


def extract_training_features(volumes: Sequence[VolumeSet], nets: dict[str, Bundle2D],
                              out_dir: str | Path | None = None, source: str = "") -> dict[str, FeatureVolume]:
    """One feature volume per patient; written as MVOL + JSON sidecar when ``out_dir`` is given."""
    missing = [o for o in ORIENTATIONS if o not in nets]
    if missing:
        raise ValueError(f"missing 2-D networks for {missing}")
    multiple = spatial_multiple(nets["axial"].spec)
    out = {}
    for v in volumes:
        if v is None or v.image is None:
            raise ValueError("missing patient volume")
        fv = extract_features(v, nets["axial"], nets["coronal"], nets["sagittal"], multiple, source)
        out[v.patient_id] = fv
        if out_dir is not None:
            path = Path(out_dir) / f"{v.patient_id}_features.mvol"
            write_mvol(fv.features, path)
            write_sidecar(path, {"patient_id": v.patient_id, "source": source,
                                 "order": list(fv.order), "channels": fv.channel_names()})
    return out


# ---------------------------------------------------------------------------
# 3-D


def train_3d(spec: ArchitectureSpec, variant: ModelVariant | str, volumes: Sequence[VolumeSet],
             features: dict[str, FeatureVolume] | None, cfg: RunConfig, seed: int,
             iterations: int | None = None, monitor: Sequence[VolumeSet] = (),
             monitor_features: dict[str, FeatureVolume] | None = None) -> tuple[Net3D, list[dict]]:
    """Train a 3-D net on random patches, with feature channels for 2D-3D variants."""
    variant = ModelVariant.parse(variant)
    if variant.is_2d:
        raise ValueError(f"{variant.value} is not a 3-D variant")
    if not variant.uses_features and features is not None:
        warnings.warn("standard 3-D model ignores the provided feature volumes", UserWarning, stacklevel=2)
        features = None
    if variant.uses_features:
        if features is None:
            raise ValueError(f"{variant.value} needs feature volumes")
        absent = [v.patient_id for v in volumes if v.patient_id not in features]
        if absent:
            raise ValueError(f"no feature volume for patients {absent}")
    net = build_model(variant, spec, seed=seed)
    patch = tuple(cfg.pipeline.patch)
    _check_extents(spec, patch)
    targets = _targets(cfg.loss.targets_3d)
    n_patch = cfg.train.patches_per_batch

    def make_batch(rng):
        imgs, feats, labs = [], [], []
        for _ in range(n_patch):
            v = volumes[int(rng.integers(len(volumes)))]
            o = sample_origins(v.extents, patch, 1, rng, v.labels, cfg.pipeline.balanced_sampling)[0]
            p = crop(v, features[v.patient_id] if features else None, o, patch)
            imgs.append(p.image)
            labs.append(p.labels)
            if p.features is not None:
                feats.append(p.features)
        return np.stack(imgs), (np.stack(feats) if feats else None), np.stack(labs)

    def loss_fn(batch):
        xb, fb, yb = batch
        logits = net.forward(ad.tensor(xb), None if fb is None else ad.tensor(fb), train=True)
        return batch_loss(logits, yb, targets)

    every = cfg.train.monitor_every
    n_it = iterations or cfg.train.iterations_3d

    def on_iteration(it):
        if monitor and (it % every == every - 1 or it == n_it - 1):
            return _monitor(lambda v: segment_3d(net, v, monitor_features[v.patient_id]
                                                 if monitor_features else None), monitor)
        return None

    log = fit(net, make_batch, loss_fn, cfg.optimizer_3d, n_it,
              np.random.default_rng(seed), on_iteration=on_iteration)
    return net, log


def segment_3d(net: Net3D, volume: VolumeSet, features: FeatureVolume | None = None) -> np.ndarray:
    """Whole-volume inference (padded up to the pooling multiple), argmax over classes."""
    m = spatial_multiple(net.spec)
    axes = (2, 3, 4)
    x = pad_to_multiple(volume.image[None].astype(np.float32), m, axes)
    f = None
    if net.variant.uses_features:
        if features is None:
            raise ValueError(f"{net.variant.value} needs features for segmentation")
        f = ad.tensor(pad_to_multiple(features.features[None], m, axes))
    logits = net.forward(ad.tensor(x), f, train=False).data[0]
    X, Y, Z = volume.extents
    return logits[:, :X, :Y, :Z].argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# experiment protocols


def split_monitor(volumes: Sequence[VolumeSet], fraction: float) -> tuple[list, list]:
    n_mon = int(round(len(volumes) * fraction))
    if n_mon == 0:
        return list(volumes), []
    return list(volumes[:-n_mon]), list(volumes[-n_mon:])


def evaluate_all(segs: dict[str, np.ndarray], volumes: Sequence[VolumeSet]) -> dict[str, float]:
    return metrics.mean_scores([metrics.evaluate(segs[v.patient_id], v.labels) for v in volumes])


def compare_2d3d(train: Sequence[VolumeSet], test: Sequence[VolumeSet], cfg: RunConfig, seed: int,
                 nets_2d: dict[str, Bundle2D] | None = None) -> dict:
    """Standard 3-D net vs 2D-3D model A trained identically; mean Dice per region."""
    spec2d = load_spec(cfg.architecture_2d)
    spec3d = load_spec(cfg.architecture_3d)
    nets_2d = nets_2d or train_orientations(spec2d, train, cfg, seed)
    f_train = extract_training_features(train, nets_2d)
    f_test = extract_training_features(test, nets_2d)
    std, _ = train_3d(spec3d, ModelVariant.ThreeD_standard, train, None, cfg, seed + 7)
    var_a, _ = train_3d(spec3d, ModelVariant.TwoThreeD_A, train, f_train, cfg, seed + 7)
    result = {
        "2d_axial": evaluate_all({v.patient_id: segment_2d(nets_2d["axial"], v, "axial") for v in test}, test),
        "3d_standard": evaluate_all({v.patient_id: segment_3d(std, v) for v in test}, test),
        "2d3d_a": evaluate_all({v.patient_id: segment_3d(var_a, v, f_test[v.patient_id]) for v in test}, test),
    }
    return {"scores": result, "nets_2d": nets_2d, "features": (f_train, f_test), "model_a": var_a}


def missing_modality_split(volumes: Sequence[VolumeSet], seed: int) -> list[VolumeSet]:
    """Five equal subsets: the first keeps every modality, subset k+1 lacks modality k."""
    order = np.random.default_rng(seed).permutation(len(volumes))
    parts = np.array_split(order, 5)
    out = [None] * len(volumes)
    for j, part in enumerate(parts):
        for i in part:
            out[i] = volumes[i] if j == 0 else volumes[i].without_modality(j - 1)
    return out


def missing_modality_experiment(train: Sequence[VolumeSet], test: Sequence[VolumeSet], cfg: RunConfig,
                                seed: int, orientation: str = "axial") -> dict:
    """2-D model 1 trained on the full-modality subset, with and without pretrained subnetworks."""
    spec = load_spec(cfg.architecture_2d)
    split = missing_modality_split(train, seed)
    full = [v for v in split if all(v.present)]
    baseline, _ = train_2d(spec, full, orientation, cfg, seed + 1)

    donor = Bundle2D(spec, seed=seed + 1)
    init = {}
    for k in range(donor.K):
        init.update(pretrain_subnetwork(donor, k, split, orientation, cfg, seed + 11 + k))
    pretrained, _ = train_2d(spec, full, orientation, cfg, seed + 1, init=init)

    def score(net):
        return evaluate_all({v.patient_id: segment_2d(net, v, orientation) for v in test}, test)

    return {"baseline": score(baseline), "pretrained": score(pretrained),
            "n_full": len(full), "n_train": len(train)}


@dataclass
class EnsembleResult:
    members: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    merged: dict[str, np.ndarray] = field(default_factory=dict)
    member_scores: dict[str, dict[str, float]] = field(default_factory=dict)
    merged_scores: dict[str, float] = field(default_factory=dict)


def run_ensemble_protocol(train: Sequence[VolumeSet], test: Sequence[VolumeSet], cfg: RunConfig, seed: int,
                          nets_model1: dict[str, Bundle2D] | None = None,
                          trained: dict[str, Net3D] | None = None) -> EnsembleResult:
    """Variants A/B/C x features from 2-D model 1/2, merged by the hierarchical vote."""
    spec3d = load_spec(cfg.architecture_3d)
    sources = {
        "model1": nets_model1 or train_orientations(load_spec("2d_model1"), train, cfg, seed),
        "model2": train_orientations(load_spec("2d_model2"), train, cfg, seed + 1),
    }
    trained = dict(trained or {})
    res = EnsembleResult()
    for src, nets in sources.items():
        f_train = extract_training_features(train, nets, source=src)
        f_test = extract_training_features(test, nets, source=src)
        for variant in (ModelVariant.TwoThreeD_A, ModelVariant.TwoThreeD_B, ModelVariant.TwoThreeD_C):
            name = f"{variant.value}_{src}"
            net = trained.get(name)
            if net is None:
                net, _ = train_3d(spec3d, variant, train, f_train, cfg, seed + 7)
            res.members[name] = {v.patient_id: segment_3d(net, v, f_test[v.patient_id]) for v in test}
            res.member_scores[name] = evaluate_all(res.members[name], test)
    thresholds = cfg.ensemble.thresholds()
    for v in test:
        res.merged[v.patient_id] = merge_segmentations([m[v.patient_id] for m in res.members.values()],
                                                       thresholds)
    res.merged_scores = evaluate_all(res.merged, test)
    return res


# ---------------------------------------------------------------------------
# run directories


class RunDir:
    """``run/<name>/{config.copy, params/, features/, segmentations/, log.tsv}``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def params(self) -> Path:
        return self.root / "params"

    @property
    def features(self) -> Path:
        return self.root / "features"

    @property
    def segmentations(self) -> Path:
        return self.root / "segmentations"

    @property
    def config_copy(self) -> Path:
        return self.root / "config.copy"

    @property
    def log(self) -> Path:
        return self.root / "log.tsv"

    def create(self) -> "RunDir":
        for p in (self.params, self.features, self.segmentations):
            p.mkdir(parents=True, exist_ok=True)
        return self

    def append_log(self, stage: str, rows: Sequence[dict]) -> None:
        cols = ["stage", "iteration", "loss", "alpha", "window", "dice_WT", "dice_TC", "dice_EC"]
        new = not self.log.exists()
        with open(self.log, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, delimiter="\t", extrasaction="ignore")
            if new:
                w.writeheader()
            for r in rows:
                w.writerow({"stage": stage, **r})
