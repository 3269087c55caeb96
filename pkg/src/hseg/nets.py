"""Network architectures as declarative specs plus their runtime binding.

Three architectures are provided:

* ``liver``: 9-conv dilated FCN over the six contrast phases. Seven 3x3 layers
  of 32 kernels with dilations (1, 1, 2, 4, 8, 16, 1), then a 1x1x32 layer,
  dropout 0.5, and the 1x1x2 softmax classifier. Receptive field 67x67.
* ``dual``: two parallel pathways (6-channel dynamic contrast input and
  3-channel diffusion input), each 13 conv layers of 64 kernels in five blocks
  sized (2, 2, 3, 3, 3) with block dilations (1, 2, 4, 8, 8). The five
  block-end feature maps of both pathways are concatenated channelwise
  (pathway-major, block order) into 640 channels and fed to a fusion head:
  dropout 0.2, 1x1x128 conv + BN + ReLU, dropout 0.2, 1x1x2 conv + softmax.
* ``single6`` / ``single9``: one such pathway (320 concatenated channels) with
  the same fusion head, taking 6 or 9 input channels.

Every conv is stride 1 with same padding, so the receptive field of a serial
chain is 1 + sum((k - 1) * dilation) per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, HeaderMismatchError
from .nn.checkpoint import load_checkpoint, restore_layers, save_checkpoint
from .nn.layers import (BatchNorm, Conv2D, Dropout, Layer, ReLU, Softmax,
                        enable_malloc_tuning)
from .volume import MultiChannelSlice, Volume, extract_slice, stack_probability_slices

LIVER_DILATIONS = (1, 1, 2, 4, 8, 16, 1)
PATHWAY_BLOCK_SIZES = (2, 2, 3, 3, 3)
PATHWAY_BLOCK_DILATIONS = (1, 2, 4, 8, 8)
PATHWAY_KERNELS = 64


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | bn | relu | softmax | dropout
    kernel: tuple[int, int] = (1, 1)
    out_channels: int = 0
    dilation: int = 1
    rate: float = 0.0


@dataclass(frozen=True)
class PathwaySpec:
    in_channels: int
    in_offset: int
    layers: tuple[LayerSpec, ...]
    collect_after: tuple[int, ...] = ()


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    in_channels: int
    pathways: tuple[PathwaySpec, ...]
    head: tuple[LayerSpec, ...] = field(default=())


def _conv_bn_relu(out_c: int, dilation: int, k: int = 3):
    return [
        LayerSpec("conv", kernel=(k, k), out_channels=out_c, dilation=dilation),
        LayerSpec("bn"),
        LayerSpec("relu"),
    ]


def build_liver_net() -> NetworkSpec:
    layers: list[LayerSpec] = []
    for d in LIVER_DILATIONS:
        layers += _conv_bn_relu(32, d, k=3)
    layers += _conv_bn_relu(32, 1, k=1)
    layers.append(LayerSpec("dropout", rate=0.5))
    layers.append(LayerSpec("conv", kernel=(1, 1), out_channels=2))
    layers.append(LayerSpec("softmax"))
    pathway = PathwaySpec(in_channels=6, in_offset=0, layers=tuple(layers))
    return NetworkSpec(name="liver", in_channels=6, pathways=(pathway,))


def build_detect_pathway(in_channels: int, in_offset: int = 0) -> PathwaySpec:
    layers: list[LayerSpec] = []
    collect: list[int] = []
    for size, d in zip(PATHWAY_BLOCK_SIZES, PATHWAY_BLOCK_DILATIONS):
        for _ in range(size):
            layers += _conv_bn_relu(PATHWAY_KERNELS, d, k=3)
        collect.append(len(layers) - 1)  # the block-end ReLU
    return PathwaySpec(in_channels=in_channels, in_offset=in_offset,
                       layers=tuple(layers), collect_after=tuple(collect))


def _fusion_head() -> tuple[LayerSpec, ...]:
    head: list[LayerSpec] = [LayerSpec("dropout", rate=0.2)]
    head += _conv_bn_relu(128, 1, k=1)
    head.append(LayerSpec("dropout", rate=0.2))
    head.append(LayerSpec("conv", kernel=(1, 1), out_channels=2))
    head.append(LayerSpec("softmax"))
    return tuple(head)


def build_dual_pathway_net() -> NetworkSpec:
    dce = build_detect_pathway(6, in_offset=0)
    dw = build_detect_pathway(3, in_offset=6)
    return NetworkSpec(name="dual", in_channels=9, pathways=(dce, dw),
                       head=_fusion_head())


def build_single_pathway_net(in_channels: int) -> NetworkSpec:
    if in_channels not in (6, 9):
        raise DataError(f"single pathway accepts 6 or 9 input channels, got {in_channels}")
    pathway = build_detect_pathway(in_channels, in_offset=0)
    return NetworkSpec(name=f"single{in_channels}", in_channels=in_channels,
                       pathways=(pathway,), head=_fusion_head())


BUILDERS = {
    "liver": build_liver_net,
    "dual": build_dual_pathway_net,
    "single6": lambda: build_single_pathway_net(6),
    "single9": lambda: build_single_pathway_net(9),
}


def _chain_channels(layers, in_c: int):
    """Walk a layer chain, yielding (spec, in_channels) with consistency checks."""
    c = in_c
    for spec in layers:
        yield spec, c
        if spec.kind == "conv":
            c = spec.out_channels


def conv_layer_count(spec: NetworkSpec) -> int:
    n = sum(sum(1 for l in p.layers if l.kind == "conv") for p in spec.pathways)
    return n + sum(1 for l in spec.head if l.kind == "conv")


def _chain_rf(layers) -> tuple[int, int]:
    rh = rw = 1
    for l in layers:
        if l.kind == "conv":
            rh += (l.kernel[0] - 1) * l.dilation
            rw += (l.kernel[1] - 1) * l.dilation
    return rh, rw


def receptive_field(spec) -> tuple[int, int]:
    """Receptive field of a NetworkSpec or a single PathwaySpec, (h, w)."""
    if isinstance(spec, PathwaySpec):
        return _chain_rf(spec.layers)
    hh, hw = _chain_rf(spec.head)
    best_h = best_w = 1
    for p in spec.pathways:
        ph, pw = _chain_rf(p.layers)
        best_h, best_w = max(best_h, ph), max(best_w, pw)
    return best_h + hh - 1, best_w + hw - 1


def concat_channels(spec: NetworkSpec) -> int:
    """Channel width presented to the fusion head (or the output width if none)."""
    total = 0
    for p in spec.pathways:
        widths = {}
        c = p.in_channels
        for i, l in enumerate(p.layers):
            if l.kind == "conv":
                c = l.out_channels
            widths[i] = c
        if p.collect_after:
            total += sum(widths[i] for i in p.collect_after)
        else:
            total += c
    return total


def describe(spec: NetworkSpec) -> str:
    """Human-readable one-layer-per-line rendering of a network spec."""
    lines = [f"net {spec.name}: input {spec.in_channels}ch"]
    for pi, p in enumerate(spec.pathways):
        lines.append(f"pathway {pi}: channels {p.in_offset}:{p.in_offset + p.in_channels}")
        for i, (l, cin) in enumerate(_chain_channels(p.layers, p.in_channels)):
            mark = "  -> collect" if i in p.collect_after else ""
            lines.append(f"  {_layer_line(l, cin)}{mark}")
    if spec.head:
        lines.append(f"head: input {concat_channels(spec)}ch")
        for l, cin in _chain_channels(spec.head, concat_channels(spec)):
            lines.append(f"  {_layer_line(l, cin)}")
    return "\n".join(lines)


def _layer_line(l: LayerSpec, cin: int) -> str:
    if l.kind == "conv":
        return f"conv {l.kernel[0]}x{l.kernel[1]}x{l.out_channels} d{l.dilation} (in {cin})"
    if l.kind == "dropout":
        return f"dropout {l.rate}"
    return l.kind


def _make_layer(spec: LayerSpec, in_c: int) -> Layer:
    if spec.kind == "conv":
        return Conv2D(spec.kernel[0], spec.kernel[1], in_c, spec.out_channels,
                      dilation=spec.dilation)
    if spec.kind == "bn":
        return BatchNorm(in_c)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "softmax":
        return Softmax()
    if spec.kind == "dropout":
        return Dropout(spec.rate)
    raise DataError(f"unknown layer kind {spec.kind!r}")


class Network:
    """Runtime binding of a NetworkSpec: owns layers, runs forward/backward."""

    def __init__(self, spec: NetworkSpec):
        enable_malloc_tuning()
        self.spec = spec
        self.pathway_layers: list[list[Layer]] = []
        for p in spec.pathways:
            self.pathway_layers.append(
                [_make_layer(l, cin) for l, cin in _chain_channels(p.layers, p.in_channels)])
        self.head_layers = [_make_layer(l, cin)
                            for l, cin in _chain_channels(spec.head, concat_channels(spec))]
        for layer in self.layers_flat():
            if isinstance(layer, ReLU):
                layer.inplace = True  # safe: every producer hands over a fresh buffer
        for layers in self.pathway_layers:
            convs = [l for l in layers if isinstance(l, Conv2D)]
            if convs:
                convs[0].needs_input_grad = False
        self._collect_widths: list[int] = []
        self._concat_buf = None

    # -- parameter plumbing ------------------------------------------------

    def layers_flat(self) -> list[Layer]:
        out: list[Layer] = []
        for layers in self.pathway_layers:
            out.extend(layers)
        out.extend(self.head_layers)
        return out

    def parameters(self):
        return [arr for layer in self.layers_flat() for _, arr in layer.parameters()]

    def gradients(self):
        return [arr for layer in self.layers_flat() for _, arr in layer.gradients()]

    def param_count(self, pathways_only: bool = False) -> int:
        layers = ([l for group in self.pathway_layers for l in group]
                  if pathways_only else self.layers_flat())
        return sum(arr.size for layer in layers for _, arr in layer.parameters())

    def initialize(self, rng, scheme: str) -> None:
        for layer in self.layers_flat():
            if isinstance(layer, Conv2D):
                if scheme == "glorot":
                    layer.init_glorot(rng)
                elif scheme == "he":
                    layer.init_he(rng)
                else:
                    raise DataError(f"unknown init scheme {scheme!r}")

    def mark_trained(self, steps: int) -> None:
        for layer in self.layers_flat():
            if isinstance(layer, BatchNorm):
                layer.n_updates = steps

    # -- execution -----------------------------------------------------------

    def forward(self, x, training: bool = False, rng=None, return_features: bool = False):
        if x.ndim != 4 or x.shape[3] != self.spec.in_channels:
            raise DataError(
                f"input must be (N,H,W,{self.spec.in_channels}), got {x.shape}")
        feats = []
        self._collect_widths = []
        for p, layers in zip(self.spec.pathways, self.pathway_layers):
            h = x[..., p.in_offset:p.in_offset + p.in_channels]
            collected = []
            for i, layer in enumerate(layers):
                h = layer.forward(h, training=training, rng=rng)
                if i in p.collect_after:
                    collected.append(h)
            if not p.collect_after:
                collected = [h]
            feats.extend(collected)
        self._collect_widths = [f.shape[3] for f in feats]
        if len(feats) > 1:
            shape = feats[0].shape[:3] + (sum(self._collect_widths),)
            if training:
                if self._concat_buf is None or self._concat_buf.shape != shape:
                    self._concat_buf = np.empty(shape, dtype=np.float32)
                z = np.concatenate(feats, axis=-1, out=self._concat_buf)
            else:
                z = np.concatenate(feats, axis=-1)
        else:
            z = feats[0]
        for layer in self.head_layers:
            z = layer.forward(z, training=training, rng=rng)
        if return_features:
            return z, feats
        return z

    def backward(self, dprobs) -> None:
        """Backpropagate d(loss)/d(softmax output); fills every layer gradient."""
        g = dprobs
        for layer in reversed(self.head_layers):
            g = layer.backward(g)
        # split the concatenated-feature gradient back per collected map
        splits = np.cumsum(self._collect_widths)[:-1]
        feat_grads = np.split(g, splits, axis=-1) if len(self._collect_widths) > 1 else [g]
        fi = 0
        for p, layers in zip(self.spec.pathways, self.pathway_layers):
            if p.collect_after:
                local = {idx: feat_grads[fi + k] for k, idx in enumerate(p.collect_after)}
                fi += len(p.collect_after)
            else:
                local = {len(layers) - 1: feat_grads[fi]}
                fi += 1
            g_above = None
            for i in range(len(layers) - 1, -1, -1):
                g_in = g_above
                if i in local:
                    if g_in is None:
                        g_in = local[i]
                    else:
                        g_in += local[i]  # layer-private buffer, safe to reuse
                g_above = layers[i].backward(g_in)


def build_network(name: str) -> Network:
    if name not in BUILDERS:
        raise DataError(f"unknown network kind {name!r}")
    return Network(BUILDERS[name]())


def save_network(path, net: Network, trained_steps: int, adam=None) -> None:
    save_checkpoint(path, net.spec.name, net.layers_flat(), trained_steps, adam)


def restore_network(path):
    """Load a checkpoint into a freshly built network. Returns (net, steps, adam)."""
    name, steps, records, adam = load_checkpoint(path)
    if name not in BUILDERS:
        raise HeaderMismatchError(f"{path}: unknown network kind {name!r}")
    net = Network(BUILDERS[name]())
    restore_layers(net.layers_flat(), records, path=str(path))
    net.mark_trained(steps)
    return net, steps, adam


def forward_volume(net: Network, v: Volume, batch_slices: int = 4) -> Volume:
    """Inference over a whole volume, slice by slice; returns the foreground
    probability as a 1-channel volume on the input grid."""
    nx, ny, nz = v.dims
    if v.channels != net.spec.in_channels:
        raise DataError(
            f"volume has {v.channels} channels, network expects {net.spec.in_channels}")
    slices = []
    for z0 in range(0, nz, batch_slices):
        zs = list(range(z0, min(z0 + batch_slices, nz)))
        x = np.stack([extract_slice(v, z).data for z in zs])
        probs = net.forward(x, training=False)
        for bi, z in enumerate(zs):
            slices.append(MultiChannelSlice(data=np.ascontiguousarray(probs[bi]), z_index=z))
    stacked = stack_probability_slices(slices, spacing=v.spacing)
    return Volume(dims=v.dims, channels=1, spacing=v.spacing,
                  data=np.ascontiguousarray(stacked.data[1:2]))
