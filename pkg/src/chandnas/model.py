"""Searchable CNNs built from a :class:`~chandnas.spec.NetworkSpec`.

Masking goes beyond the convolution kernel: the gate of a mask group also
scales the bias of the producing convolution and the affine parameters of
every batch-norm and depthwise layer downstream on the same channel path.
A dead channel therefore carries exact zeros everywhere, and the masked
network computes the same function as the physically shrunk one returned by
:func:`materialize`.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np

from . import tensor as T
from .masks import ChannelMask, apply_mask
from .spec import LayerSpec, NetworkSpec, SpecError
from .tensor import Tensor


class Model:
    """Weights, batch-norm state and channel masks for one network."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.params: dict[str, dict[str, Tensor]] = {}
        self.bn_stats: dict[str, dict[str, np.ndarray]] = {}
        self.masks: dict[str, ChannelMask] = {
            gid: ChannelMask(size, gid) for gid, size in spec.groups.items()
        }
        self.training = True
        self.relaxed = False
        self.bn_momentum: float | None = 0.1
        self.bn_eps = 1e-5

    # ------------------------------------------------------------ params

    def weight_params(self) -> list[Tensor]:
        return [t for lay in self.spec.layers for t in self.params.get(lay.id, {}).values()]

    def theta_params(self) -> list[Tensor]:
        return [m.theta for m in self.masks.values() if not m.frozen]

    def freeze_masks(self, frozen: bool = True) -> None:
        for m in self.masks.values():
            m.frozen = frozen

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def layer_mask(self, lay: LayerSpec) -> ChannelMask | None:
        """Mask acting on the output channels of ``lay`` (None if unmasked)."""
        src = self.spec.sources.get(lay.id)
        return self.masks[src] if src is not None else None

    def input_mask(self, lay: LayerSpec) -> ChannelMask | None:
        src = self.spec.input_source(lay)
        return self.masks[src] if src is not None else None

    def live_channels(self, layer_id: str) -> int:
        """Live output channels of a feature-map layer under the current masks."""
        lay = self.spec.layer(layer_id)
        m = self.layer_mask(lay)
        return self.spec.shapes[layer_id][0] if m is None else m.alive_count()

    def channel_config(self) -> dict[str, int]:
        """Live output channels of every convolution, keyed by layer id."""
        return {lay.id: self.live_channels(lay.id) for lay in self.spec.conv_layers()}

    # ----------------------------------------------------------- forward

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(
                f"model {self.spec.name}: expected input (N, {', '.join(map(str, self.spec.input_shape))}), "
                f"got {x.shape}"
            )
        gates = {gid: m.gate(self.relaxed) for gid, m in self.masks.items()}
        acts: dict[str, Tensor] = {"input": x}
        for lay in self.spec.layers:
            acts[lay.id] = self._layer_forward(lay, acts, gates)
        return acts[self.spec.layers[-1].id]

    def _layer_forward(self, lay: LayerSpec, acts, gates) -> Tensor:
        h = acts[lay.inputs[0]]
        p = self.params.get(lay.id, {})
        kind = lay.kind
        if kind in ("conv2d", "dw_conv2d"):
            src = self.spec.sources[lay.id]
            w, b = p["w"], p.get("b")
            if src is not None:
                w = apply_mask(w, gates[src])
                b = apply_mask(b, gates[src]) if b is not None else None
            op = T.conv2d if kind == "conv2d" else T.dw_conv2d
            return op(h, w, b, stride=(lay.sy, lay.sx), padding=lay.padding)
        if kind == "batchnorm":
            return self._batchnorm(lay, h, gates)
        if kind == "relu":
            return T.relu(h)
        if kind == "maxpool":
            return T.maxpool2d(h, (lay.ky, lay.kx), (lay.sy, lay.sx), lay.padding)
        if kind == "avgpool":
            return T.avgpool2d(h, (lay.ky, lay.kx), (lay.sy, lay.sx), lay.padding)
        if kind == "global_avgpool":
            return T.global_avgpool(h)
        if kind == "flatten":
            return h.reshape(h.shape[0], -1)
        if kind == "add":
            out = h
            for src in lay.inputs[1:]:
                out = out + acts[src]
            return out
        if kind == "dense":
            out = h @ p["w"].transpose()
            return out + p["b"] if "b" in p else out
        raise SpecError(f"layer {lay.id!r}: unsupported kind {kind!r}")

    def _batchnorm(self, lay: LayerSpec, h: Tensor, gates) -> Tensor:
        p = self.params[lay.id]
        stats = self.bn_stats[lay.id]
        gamma, beta = p["gamma"], p["beta"]
        src = self.spec.sources[lay.id]
        if src is not None:
            gamma = apply_mask(gamma, gates[src])
            beta = apply_mask(beta, gates[src])
        attrs = {"training": self.training, "eps": self.bn_eps}
        if self.training:
            axes = (0, 2, 3) if h.ndim == 4 else (0,)
            mean, var = h.data.mean(axis=axes), h.data.var(axis=axes)
            if self.bn_momentum is None:
                # cumulative average, used for recalibration passes
                k = stats["count"] + 1
                stats["running_mean"] += (mean - stats["running_mean"]) / k
                stats["running_var"] += (var - stats["running_var"]) / k
                stats["count"] = k
            else:
                mom = self.bn_momentum
                stats["running_mean"] = (1 - mom) * stats["running_mean"] + mom * mean
                stats["running_var"] = (1 - mom) * stats["running_var"] + mom * var
        else:
            attrs["running_mean"] = stats["running_mean"]
            attrs["running_var"] = stats["running_var"]
        return T.forward_op("batchnorm", [h, gamma, beta], attrs)

    # --------------------------------------------------------- snapshots

    def state_dict(self) -> dict:
        return {
            "params": {lid: {k: t.data.copy() for k, t in p.items()} for lid, p in self.params.items()},
            "bn_stats": copy.deepcopy(self.bn_stats),
            "theta": {gid: m.theta.data.copy() for gid, m in self.masks.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        for lid, p in state["params"].items():
            for k, arr in p.items():
                self.params[lid][k].data = np.array(arr, dtype=np.float64)
        self.bn_stats = copy.deepcopy(state["bn_stats"])
        for gid, arr in state["theta"].items():
            self.masks[gid].theta.data = np.array(arr, dtype=np.float64)

    def save(self, path: str | Path) -> None:
        """Full-precision checkpoint (weights, BN statistics, theta)."""
        flat: dict[str, np.ndarray] = {}
        for lid, p in self.params.items():
            for k, t in p.items():
                flat[f"p/{lid}/{k}"] = t.data
        for lid, st in self.bn_stats.items():
            flat[f"bn/{lid}/running_mean"] = st["running_mean"]
            flat[f"bn/{lid}/running_var"] = st["running_var"]
        for gid, m in self.masks.items():
            flat[f"theta/{gid}"] = m.theta.data
        np.savez(path, **flat)

    def load(self, path: str | Path) -> None:
        with np.load(path) as z:
            for key in z.files:
                kind, name, *rest = key.split("/")
                arr = np.array(z[key], dtype=np.float64)
                if kind == "p":
                    self.params[name][rest[0]].data = arr
                elif kind == "bn":
                    self.bn_stats[name][rest[0]] = arr
                else:
                    self.masks[name].theta.data = arr

    def export_weights(self, path: str | Path) -> None:
        """Write the weights in single precision."""
        np.savez(path, **{
            f"{lid}/{k}": t.data.astype(np.float32) for lid, p in self.params.items() for k, t in p.items()
        })


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_seed(spec: NetworkSpec, rng_seed: int = 0) -> Model:
    """Allocate and initialize every weight; all gates start at theta = 1, frozen."""
    rng = np.random.default_rng(rng_seed)
    model = Model(spec)
    for lay in spec.layers:
        if lay.kind == "conv2d":
            fan_in = lay.c_in * lay.kx * lay.ky
            model.params[lay.id] = {
                "w": Tensor(_he_uniform(rng, (lay.c_out, lay.c_in, lay.ky, lay.kx), fan_in), name=f"{lay.id}.w"),
                "b": Tensor(np.zeros(lay.c_out), name=f"{lay.id}.b"),
            }
        elif lay.kind == "dw_conv2d":
            fan_in = lay.kx * lay.ky
            model.params[lay.id] = {
                "w": Tensor(_he_uniform(rng, (lay.c_out, 1, lay.ky, lay.kx), fan_in), name=f"{lay.id}.w"),
                "b": Tensor(np.zeros(lay.c_out), name=f"{lay.id}.b"),
            }
        elif lay.kind == "dense":
            model.params[lay.id] = {
                "w": Tensor(_he_uniform(rng, (lay.c_out, lay.c_in), lay.c_in), name=f"{lay.id}.w"),
                "b": Tensor(np.zeros(lay.c_out), name=f"{lay.id}.b"),
            }
        elif lay.kind == "batchnorm":
            model.params[lay.id] = {
                "gamma": Tensor(np.ones(lay.c_out), name=f"{lay.id}.gamma"),
                "beta": Tensor(np.zeros(lay.c_out), name=f"{lay.id}.beta"),
            }
            model.bn_stats[lay.id] = {
                "running_mean": np.zeros(lay.c_out),
                "running_var": np.ones(lay.c_out),
                "count": 0,
            }
    for t in model.weight_params():
        t.requires_grad = True
    return model


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy."""
    return T.softmax_cross_entropy(logits, labels)


def model_forward(model: Model, batch) -> Tensor:
    return model.forward(batch)


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits in inference mode, without recording a graph."""
    was = model.training
    model.eval()
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model.forward(x[i : i + batch_size]).data)
    model.train(was)
    return np.concatenate(outs, axis=0)


# ------------------------------------------------------------ materialize


def alive_indices(model: Model) -> dict[str | None, np.ndarray]:
    return {gid: np.flatnonzero(m.binarized()) for gid, m in model.masks.items()}


def shrunk_spec(model: Model) -> NetworkSpec:
    """The network description with every dead channel removed."""
    spec = model.spec
    keep = alive_indices(model)
    layers: list[LayerSpec] = []
    new_shapes: dict[str, tuple[int, ...]] = {"input": spec.input_shape}
    for lay in spec.layers:
        in_shape = new_shapes[lay.inputs[0]]
        c_in = in_shape[0]
        if lay.kind == "conv2d":
            c_out = len(keep[spec.sources[lay.id]])
        elif lay.kind == "dense":
            c_out = lay.c_out
        elif lay.kind == "flatten":
            _, h, w = spec.shapes[lay.inputs[0]]
            c_out = c_in * h * w
        else:
            c_out = c_in
        new = copy.copy(lay)
        new.c_in, new.c_out = c_in, c_out
        layers.append(new)
        new_shapes[lay.id] = (c_out,) + tuple(spec.shapes[lay.id][1:])
    return NetworkSpec(spec.name, spec.input_shape, layers, spec.output_classes, dict(spec.training))


def materialize(model: Model) -> Model:
    """A physically smaller copy of ``model`` with dead channels sliced out."""
    spec = model.spec
    keep = alive_indices(model)
    new = Model(shrunk_spec(model))
    for lay in spec.layers:
        p = model.params.get(lay.id)
        if p is None:
            continue
        out_keep = keep.get(spec.sources.get(lay.id)) if spec.sources.get(lay.id) else None
        in_src = spec.input_source(lay)
        in_keep = keep.get(in_src) if in_src is not None else None
        if lay.kind == "conv2d":
            w = p["w"].data
            if out_keep is not None:
                w = w[out_keep]
            if in_keep is not None:
                w = w[:, in_keep]
            b = p["b"].data[out_keep] if out_keep is not None else p["b"].data
            new.params[lay.id] = {"w": Tensor(w, True), "b": Tensor(b, True)}
        elif lay.kind == "dw_conv2d":
            sel = in_keep if in_keep is not None else slice(None)
            new.params[lay.id] = {"w": Tensor(p["w"].data[sel], True), "b": Tensor(p["b"].data[sel], True)}
        elif lay.kind == "batchnorm":
            sel = in_keep if in_keep is not None else slice(None)
            new.params[lay.id] = {k: Tensor(t.data[sel], True) for k, t in p.items()}
            st = model.bn_stats[lay.id]
            new.bn_stats[lay.id] = {
                "running_mean": st["running_mean"][sel].copy(),
                "running_var": st["running_var"][sel].copy(),
                "count": st["count"],
            }
        elif lay.kind == "dense":
            w = p["w"].data
            if in_keep is not None:
                feat_layer = lay.inputs[0]
                feeder = spec.layer(feat_layer)
                if feeder.kind == "flatten":
                    _, h, wd = spec.shapes[feeder.inputs[0]]
                    cols = (in_keep[:, None] * (h * wd) + np.arange(h * wd)[None, :]).reshape(-1)
                else:
                    cols = in_keep
                w = w[:, cols]
            new.params[lay.id] = {"w": Tensor(w, True), "b": Tensor(p["b"].data.copy(), True)}
    new.training = model.training
    new.bn_momentum = model.bn_momentum
    new.bn_eps = model.bn_eps
    return new
