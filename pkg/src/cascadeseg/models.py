"""Config-driven networks: the 2-D subnetwork bundles and the 3-D / 2D-3D nets.

A network is a list of named layers forming a DAG. Layers read from earlier
layers or from the external sources ``input`` (image channels) and
``features`` (imported 2-D class maps). A conv layer with several inputs is
the sum of one convolution per input, which equals a convolution of their
channel concatenation.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import autodiff as ad

LAYER_KINDS = ("conv", "pool", "upsample", "concat", "batchnorm", "classify")
IMPORT_POINTS = ("none", "input_layer", "pre_final", "second_stream")
ORIENTATIONS = ("axial", "coronal", "sagittal")
SOURCES = ("input", "features")


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    out: int = 0
    kernel: int = 3
    stride: int | None = None  # conv: 1, pool: the window
    window: int = 2
    factor: int = 2
    padding: str | None = None  # conv: same, pool: valid

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.stride is None:
            self.stride = self.window if self.kind == "pool" else 1
        if self.padding is None:
            self.padding = "valid" if self.kind == "pool" else "same"
        if self.padding not in ("same", "valid"):
            raise ValueError(f"layer {self.name!r}: unknown padding {self.padding!r}")
        if isinstance(self.inputs, str):
            self.inputs = [self.inputs]
        self.inputs = list(self.inputs)


@dataclass
class ArchitectureSpec:
    name: str
    ndim: int
    in_channels: int
    num_classes: int
    layers: list[LayerSpec]
    batchnorm: bool = False
    feature_import_point: str = "none"
    final_sequence: str | None = None
    subnetwork: list[LayerSpec] | None = None
    patch: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ValueError(f"{self.name}: ndim must be 2 or 3")
        if self.feature_import_point not in IMPORT_POINTS:
            raise ValueError(f"{self.name}: unknown feature import point {self.feature_import_point!r}")
        _fill_default_inputs(self.layers)
        if self.subnetwork is not None:
            _fill_default_inputs(self.subnetwork)
        self.validate()

    @property
    def feature_channels(self) -> int:
        return 3 * self.num_classes

    def validate(self) -> None:
        _validate_layers(self.layers, self.name, need_classifier=True)
        if self.subnetwork is not None:
            _validate_layers(self.subnetwork, self.name + "/subnetwork", need_classifier=False)
        if self.final_sequence is not None and self.final_sequence not in {l.name for l in self.layers}:
            raise ValueError(f"{self.name}: final_sequence {self.final_sequence!r} is not a layer")
        if self.feature_import_point in ("pre_final", "second_stream") and self.final_sequence is None:
            raise ValueError(f"{self.name}: import point {self.feature_import_point} needs final_sequence")

    def to_dict(self) -> dict:
        d = {
            "name": self.name, "ndim": self.ndim, "in_channels": self.in_channels,
            "num_classes": self.num_classes, "batchnorm": self.batchnorm,
            "feature_import_point": self.feature_import_point,
            "final_sequence": self.final_sequence,
            "layers": [_layer_dict(l) for l in self.layers],
        }
        if self.subnetwork is not None:
            d["subnetwork"] = [_layer_dict(l) for l in self.subnetwork]
        if self.patch is not None:
            d["patch"] = list(self.patch)
        return d


def _layer_dict(layer: LayerSpec) -> dict:
    base = LayerSpec(layer.name, layer.kind)
    d = {"name": layer.name, "kind": layer.kind, "inputs": list(layer.inputs)}
    for k in ("out", "kernel", "stride", "window", "factor", "padding"):
        if getattr(layer, k) != getattr(base, k):
            d[k] = getattr(layer, k)
    return d


def _fill_default_inputs(layers: list[LayerSpec]) -> None:
    prev = "input"
    for layer in layers:
        if not layer.inputs:
            layer.inputs = [prev]
        prev = layer.name


def _validate_layers(layers: list[LayerSpec], where: str, need_classifier: bool) -> None:
    if not layers:
        raise ValueError(f"{where}: no layers")
    seen = set(SOURCES)
    for layer in layers:
        if layer.name in seen:
            raise ValueError(f"{where}: duplicate layer name {layer.name!r}")
        for src in layer.inputs:
            if src not in seen:
                raise ValueError(f"{where}: layer {layer.name!r} reads {src!r} before it is defined")
        if layer.kind == "conv" and layer.out < 1:
            raise ValueError(f"{where}: conv layer {layer.name!r} needs out >= 1")
        if layer.kind in ("pool", "upsample", "batchnorm") and len(layer.inputs) != 1:
            raise ValueError(f"{where}: {layer.kind} layer {layer.name!r} takes exactly one input")
        seen.add(layer.name)
    n_cls = sum(l.kind == "classify" for l in layers)
    if need_classifier and (n_cls != 1 or layers[-1].kind != "classify"):
        raise ValueError(f"{where}: needs exactly one classification layer, placed last")
    if not need_classifier and n_cls:
        raise ValueError(f"{where}: subnetwork layers may not classify (auxiliary heads are added automatically)")


# ---------------------------------------------------------------------------
# config files


def config_dir() -> Path:
    return Path(str(resources.files("cascadeseg") / "configs"))


def resolve_config(path: str | Path) -> Path:
    """Accept a file path, the same path without ``.yaml``, or a shipped config name."""
    p = Path(path)
    for cand in (p, p.with_name(p.name + ".yaml"), config_dir() / p.name, config_dir() / (p.name + ".yaml")):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"architecture config not found: {path}")


def _parse_layers(items: list[dict]) -> list[LayerSpec]:
    return [LayerSpec(**item) for item in items]


def spec_from_dict(d: dict[str, Any]) -> ArchitectureSpec:
    d = dict(d)
    while "base" in d:
        merged = load_spec_dict(d.pop("base"))
        merged.update(d)
        d = merged
    d["layers"] = _parse_layers(d["layers"])
    if d.get("subnetwork") is not None:
        d["subnetwork"] = _parse_layers(d["subnetwork"])
    if d.get("patch") is not None:
        d["patch"] = tuple(d["patch"])
    return ArchitectureSpec(**d)


def load_spec_dict(path: str | Path) -> dict:
    with open(resolve_config(path)) as fh:
        return yaml.safe_load(fh)


def load_spec(path: str | Path) -> ArchitectureSpec:
    return spec_from_dict(load_spec_dict(path))


# ---------------------------------------------------------------------------
# receptive field


def _rf_walk(layers: Sequence[LayerSpec], start: dict[str, tuple[Fraction, Fraction]]):
    state = dict(start)
    for layer in layers:
        rf, jump = max((state[s] for s in layer.inputs), key=lambda t: t[0])
        if layer.kind in ("conv", "classify"):
            k = layer.kernel if layer.kind == "conv" else 1
            rf = rf + (k - 1) * jump
            jump = jump * layer.stride
        elif layer.kind == "pool":
            rf = rf + (layer.window - 1) * jump
            jump = jump * layer.stride
        elif layer.kind == "upsample":
            jump = jump / layer.factor
        state[layer.name] = (rf, jump)
    return state


def receptive_field(spec: ArchitectureSpec) -> tuple[int, ...]:
    """Theoretical receptive field along the deepest path, per spatial axis."""
    one = (Fraction(1), Fraction(1))
    start = {"input": one, "features": one}
    if spec.subnetwork is not None:
        sub = _rf_walk(spec.subnetwork, start)[spec.subnetwork[-1].name]
        start = {"input": sub, "features": one}
    state = _rf_walk(spec.layers, start)
    rf = state[spec.layers[-1].name][0]
    return (int(rf),) * spec.ndim


# ---------------------------------------------------------------------------
# variants


class ModelVariant(enum.Enum):
    TwoD_1 = "2d_model1"
    TwoD_2 = "2d_model2"
    ThreeD_standard = "3d_standard"
    TwoThreeD_A = "2d3d_a"
    TwoThreeD_B = "2d3d_b"
    TwoThreeD_C = "2d3d_c"

    @property
    def is_2d(self) -> bool:
        return self in (ModelVariant.TwoD_1, ModelVariant.TwoD_2)

    @property
    def import_point(self) -> str:
        return {
            ModelVariant.TwoThreeD_A: "input_layer",
            ModelVariant.TwoThreeD_B: "pre_final",
            ModelVariant.TwoThreeD_C: "second_stream",
        }.get(self, "none")

    @property
    def uses_features(self) -> bool:
        return self.import_point != "none"

    @classmethod
    def parse(cls, s: str | "ModelVariant") -> "ModelVariant":
        if isinstance(s, cls):
            return s
        key = str(s).lower().replace("-", "_")
        aliases = {"a": "2d3d_a", "b": "2d3d_b", "c": "2d3d_c", "standard": "3d_standard",
                   "3d": "3d_standard", "model1": "2d_model1", "model2": "2d_model2"}
        key = aliases.get(key, key)
        for v in cls:
            if v.value == key or v.name.lower() == key:
                return v
        raise ValueError(f"unknown model variant {s!r}")


def _with_features(layers: list[LayerSpec], import_point: str, final_sequence: str | None) -> list[LayerSpec]:
    """Rewrite a 3-D layer list so it also reads the ``features`` source."""
    layers = copy.deepcopy(layers)
    if import_point == "none":
        return layers
    if import_point == "input_layer":
        out = []
        for layer in layers:
            if "input" in layer.inputs:
                if layer.kind in ("conv", "concat", "classify"):
                    layer.inputs = layer.inputs + ["features"]
                else:
                    joined = LayerSpec(f"{layer.name}_import", "concat", ["input", "features"])
                    layer.inputs = [joined.name if s == "input" else s for s in layer.inputs]
                    out.append(joined)
            out.append(layer)
        return out
    names = [l.name for l in layers]
    cut = names.index(final_sequence)
    if import_point == "pre_final":
        head = layers[cut]
        if head.kind in ("conv", "concat", "classify"):
            head.inputs = head.inputs + ["features"]
        else:
            joined = LayerSpec(f"{head.name}_import", "concat", head.inputs + ["features"])
            head.inputs = [joined.name]
            layers.insert(cut, joined)
        return layers
    if import_point == "second_stream":
        # a copy of everything before the final sequence reads image + features
        renamed = {"input": "stream2_input"}
        stream2 = [LayerSpec("stream2_input", "concat", ["input", "features"])]
        for layer in layers[:cut]:
            twin = copy.deepcopy(layer)
            twin.name = "stream2_" + layer.name
            twin.inputs = [renamed.get(s, s) for s in layer.inputs]
            renamed[layer.name] = twin.name
            stream2.append(twin)
        tail = layers[cut:]
        head = tail[0]
        head.inputs = head.inputs + [renamed[s] for s in head.inputs if s in renamed and s != "input"]
        return layers[:cut] + stream2 + tail
    raise ValueError(f"unknown import point {import_point!r}")


# ---------------------------------------------------------------------------
# execution


class Graph:
    """Parameters and forward pass for one layer list."""

    def __init__(self, layers: list[LayerSpec], sources: dict[str, int], ndim: int,
                 num_classes: int, batchnorm: bool, params: dict, bn_states: dict,
                 rng: np.random.Generator, prefix: str = ""):
        self.layers = layers
        self.ndim = ndim
        self.batchnorm = batchnorm
        self.prefix = prefix
        self.params = params
        self.bn_states = bn_states
        channels = dict(sources)
        dtype = ad.default_dtype()
        for layer in layers:
            ins = [channels[s] for s in layer.inputs]
            key = prefix + layer.name
            if layer.kind in ("conv", "classify"):
                out = layer.out if layer.kind == "conv" else num_classes
                k = layer.kernel if layer.kind == "conv" else 1
                fan_in = sum(ins) * k ** ndim
                bound = np.sqrt((6.0 if layer.kind == "conv" else 1.0) / fan_in)
                for i, c in enumerate(ins):
                    w = rng.uniform(-bound, bound, size=(out, c) + (k,) * ndim)
                    params[f"{key}.w{i}"] = ad.Tensor(w.astype(dtype), requires_grad=True)
                use_bn = batchnorm and layer.kind == "conv"
                if not use_bn:
                    params[f"{key}.b"] = ad.Tensor(np.zeros(out, dtype=dtype), requires_grad=True)
                else:
                    self._add_bn(key, out, dtype)
                channels[layer.name] = out
            elif layer.kind == "batchnorm":
                self._add_bn(key, ins[0], dtype)
                channels[layer.name] = ins[0]
            elif layer.kind == "concat":
                channels[layer.name] = sum(ins)
            else:
                channels[layer.name] = ins[0]
        self.channels = channels
        self.output = layers[-1].name

    def _add_bn(self, key: str, c: int, dtype) -> None:
        self.params[f"{key}.gamma"] = ad.Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.params[f"{key}.beta"] = ad.Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.bn_states[key] = ad.BatchNormState(c)

    def forward(self, sources: dict[str, ad.Tensor], train: bool) -> dict[str, ad.Tensor]:
        vals = dict(sources)
        mode = "train" if train else "infer"
        for layer in self.layers:
            key = self.prefix + layer.name
            xs = [vals[s] for s in layer.inputs]
            if len(xs) > 1:
                ext = tuple(min(x.shape[2 + i] for x in xs) for i in range(self.ndim))
                xs = [ad.crop_spatial(x, ext) for x in xs]
            if layer.kind in ("conv", "classify"):
                stride = layer.stride if layer.kind == "conv" else 1
                y = None
                for i, x in enumerate(xs):
                    b = self.params.get(f"{key}.b") if i == 0 else None
                    term = ad.conv_nd(x, self.params[f"{key}.w{i}"], b, stride=stride, padding=layer.padding)
                    y = term if y is None else ad.add(y, term)
                if layer.kind == "conv":
                    if key in self.bn_states:
                        y = ad.batchnorm(y, self.params[f"{key}.gamma"], self.params[f"{key}.beta"],
                                         self.bn_states[key], mode)
                    y = ad.relu(y)
            elif layer.kind == "pool":
                y = ad.maxpool_nd(xs[0], layer.window, layer.stride, padding=layer.padding)
            elif layer.kind == "upsample":
                y = ad.upsample_linear_nd(xs[0], layer.factor)
            elif layer.kind == "concat":
                y = ad.concat_channels(xs)
            elif layer.kind == "batchnorm":
                y = ad.batchnorm(xs[0], self.params[f"{key}.gamma"], self.params[f"{key}.beta"],
                                 self.bn_states[key], mode)
            vals[layer.name] = y
        return vals


class Network:
    """Common parameter handling for the 2-D and 3-D networks."""

    def __init__(self):
        self.params: dict[str, ad.Tensor] = {}
        self.bn_states: dict[str, ad.BatchNormState] = {}

    def parameters(self) -> list[ad.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {k: v.data.copy() for k, v in self.params.items()}
        for k, s in self.bn_states.items():
            d[f"{k}.running_mean"] = s.running_mean.copy()
            d[f"{k}.running_var"] = s.running_var.copy()
        return d

    def load_state_dict(self, d: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, p in self.params.items():
            if k in d:
                arr = np.asarray(d[k])
                if arr.shape != p.data.shape:
                    raise ValueError(f"parameter {k}: shape {arr.shape} != {p.data.shape}")
                p.data = arr.astype(p.data.dtype).copy()
            elif strict:
                raise KeyError(f"missing parameter {k}")
        for k, s in self.bn_states.items():
            if f"{k}.running_mean" in d:
                s.running_mean = np.asarray(d[f"{k}.running_mean"], dtype=float).copy()
                s.running_var = np.asarray(d[f"{k}.running_var"], dtype=float).copy()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **self.state_dict())
        tmp.replace(path)

    def load(self, path: str | Path) -> None:
        with np.load(path) as f:
            self.load_state_dict(dict(f))


class Net3D(Network):
    """Standard 3-D net or a 2D-3D variant importing 3*C feature channels."""

    def __init__(self, spec: ArchitectureSpec, variant: ModelVariant, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.variant = variant
        rng = np.random.default_rng(seed)
        layers = _with_features(spec.layers, variant.import_point, spec.final_sequence)
        sources = {"input": spec.in_channels}
        if variant.uses_features:
            sources["features"] = spec.feature_channels
        self.graph = Graph(layers, sources, spec.ndim, spec.num_classes, spec.batchnorm,
                           self.params, self.bn_states, rng)

    @property
    def input_channels(self) -> int:
        return self.spec.in_channels + (self.spec.feature_channels if self.variant.uses_features else 0)

    def forward(self, image: ad.Tensor, features: ad.Tensor | None = None, train: bool = False) -> ad.Tensor:
        sources = {"input": image}
        if self.variant.uses_features:
            if features is None:
                raise ValueError(f"{self.variant.value} needs feature channels")
            if features.shape[1] != self.spec.feature_channels:
                raise ValueError(f"expected {self.spec.feature_channels} feature channels, got {features.shape[1]}")
            sources["features"] = features
        return self.graph.forward(sources, train)[self.graph.output]

    def forward_training(self, image, features=None):
        return self.forward(image, features, train=True), []


class Bundle2D(Network):
    """K modality subnetworks + one all-modality subnetwork feeding a U-Net-style trunk.

    Each subnetwork carries an auxiliary classification head that is only
    evaluated in training.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        super().__init__()
        if spec.subnetwork is None:
            raise ValueError(f"{spec.name}: a 2-D bundle needs subnetwork layers")
        self.spec = spec
        self.K = spec.in_channels
        rng = np.random.default_rng(seed)
        self.subnets: list[Graph] = []
        self.aux: list[Graph] = []
        final = spec.subnetwork[-1].name
        for k in range(self.K + 1):
            cin = 1 if k < self.K else self.K
            g = Graph(copy.deepcopy(spec.subnetwork), {"input": cin}, 2, spec.num_classes,
                      spec.batchnorm, self.params, self.bn_states, rng, prefix=f"sub{k}.")
            head = Graph([LayerSpec("aux", "classify", [final])], {final: g.channels[final]}, 2,
                         spec.num_classes, spec.batchnorm, self.params, self.bn_states, rng,
                         prefix=f"sub{k}.")
            self.subnets.append(g)
            self.aux.append(head)
        trunk_in = sum(g.channels[final] for g in self.subnets)
        self.trunk = Graph(copy.deepcopy(spec.layers), {"input": trunk_in}, 2, spec.num_classes,
                           spec.batchnorm, self.params, self.bn_states, rng, prefix="trunk.")

    @property
    def num_subnetworks(self) -> int:
        return len(self.subnets)

    def subnetwork_input(self, k: int, x: ad.Tensor) -> ad.Tensor:
        if k < self.K:
            return ad.tensor(x.data[:, k:k + 1])
        return x

    def subnetwork_forward(self, k: int, x_k: ad.Tensor, train: bool = False) -> tuple[ad.Tensor, ad.Tensor]:
        """Final layer and auxiliary logits of subnetwork ``k`` on its own input channels."""
        g = self.subnets[k]
        feats = g.forward({"input": x_k}, train)[g.output]
        logits = self.aux[k].forward({g.output: feats}, train)["aux"]
        return feats, logits

    def subnetwork_state(self, k: int) -> dict[str, np.ndarray]:
        prefix = f"sub{k}."
        return {name: arr for name, arr in self.state_dict().items() if name.startswith(prefix)}

    def load_subnetwork(self, k: int, state: dict[str, np.ndarray]) -> None:
        prefix = f"sub{k}."
        own = {n: a for n, a in state.items() if n.startswith(prefix)}
        if not own:
            raise KeyError(f"no parameters for subnetwork {k}")
        self.load_state_dict(own, strict=False)

    def _forward(self, x: ad.Tensor, train: bool, with_aux: bool):
        if x.shape[1] != self.K:
            raise ValueError(f"expected {self.K} input channels, got shape {x.shape}")
        finals, aux = [], []
        for k, g in enumerate(self.subnets):
            feats = g.forward({"input": self.subnetwork_input(k, x)}, train)[g.output]
            finals.append(feats)
            if with_aux:
                aux.append(self.aux[k].forward({g.output: feats}, train)["aux"])
        trunk_in = ad.concat_channels(finals)
        logits = self.trunk.forward({"input": trunk_in}, train)[self.trunk.output]
        return logits, aux

    def forward(self, x: ad.Tensor, train: bool = False) -> ad.Tensor:
        return self._forward(x, train, with_aux=False)[0]

    def forward_training(self, x: ad.Tensor):
        return self._forward(x, True, with_aux=True)


def build_model(variant: ModelVariant | str, spec: ArchitectureSpec, seed: int = 0) -> Network:
    variant = ModelVariant.parse(variant)
    if variant.is_2d:
        if spec.ndim != 2:
            raise ValueError(f"{variant.value} needs a 2-D spec, got ndim={spec.ndim}")
        if spec.feature_import_point != "none":
            raise ValueError(f"2-D variant {variant.value} cannot import features "
                             f"(import point {spec.feature_import_point!r})")
        return Bundle2D(spec, seed)
    if spec.ndim != 3:
        raise ValueError(f"{variant.value} needs a 3-D spec, got ndim={spec.ndim}")
    if spec.feature_import_point not in ("none", variant.import_point):
        raise ValueError(f"spec imports features at {spec.feature_import_point!r} "
                         f"but {variant.value} imports at {variant.import_point!r}")
    spec = replace(spec, feature_import_point=variant.import_point)
    return Net3D(spec, variant, seed)


def forward_training(network: Network, batch) -> tuple[ad.Tensor, list[ad.Tensor]]:
    """Main logits plus auxiliary logits (one per subnetwork; none for 3-D nets)."""
    if isinstance(network, Bundle2D):
        return network.forward_training(batch)
    image, features = batch if isinstance(batch, tuple) else (batch, None)
    return network.forward_training(image, features)


def spatial_multiple(spec: ArchitectureSpec) -> int:
    """Input extents must be multiples of this for the U-Net skips to line up."""
    m = 1
    for layers in (spec.subnetwork or [], spec.layers):
        m = max(m, int(np.prod([l.stride for l in layers if l.kind == "pool"] or [1])))
    return m
