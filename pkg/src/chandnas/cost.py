"""Model size and inference OPs as functions of the channel gates.

Size counts the effective kernel weights of the convolutional layers:
a standard convolution contributes ``live_in * live_out * kx * ky`` where
``live_in`` is the live output count of its producer (the data channels for
the first layer), and a depthwise layer contributes ``live * kx * ky``.
OPs weight each layer's size by its output feature-map area, i.e. one OP
per multiply-accumulate.  The dense head, biases and batch-norm parameters
are left out of both totals and reported separately.

Live counts are sums of straight-through gates, so the differentiable totals
equal the exact integer ones whenever the gates are hard.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .model import Model
from .spec import LayerSpec
from .tensor import Tensor


@dataclass
class LayerCost:
    layer_id: str
    kind: str
    c_in: int
    c_out: int
    params: int
    ops: int


@dataclass
class CostReport:
    per_layer: list[LayerCost]
    total_params: int
    total_ops: int
    total_params_diff: float
    total_ops_diff: float
    dense_params: int = 0
    dense_ops: int = 0
    bias_params: int = 0
    bn_params: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def total_params_inclusive(self) -> int:
        """Conv kernels plus dense head, biases and batch-norm affine terms."""
        return self.total_params + self.dense_params + self.bias_params + self.bn_params

    @property
    def total_ops_inclusive(self) -> int:
        return self.total_ops + self.dense_ops

    def layer(self, layer_id: str) -> LayerCost:
        return next(lc for lc in self.per_layer if lc.layer_id == layer_id)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_params_inclusive"] = self.total_params_inclusive
        d["total_ops_inclusive"] = self.total_ops_inclusive
        return d


def _live_terms(model: Model, gates: dict[str, Tensor]):
    """Yield (layer, live_in, live_out) with Tensor or int counts."""
    spec = model.spec
    live = {gid: g.sum() for gid, g in gates.items()}
    for lay in spec.conv_layers():
        in_src = spec.input_source(lay)
        live_in = live[in_src] if in_src is not None else lay.c_in
        if lay.kind == "dw_conv2d":
            yield lay, live_in, live_in
        else:
            yield lay, live_in, live[spec.sources[lay.id]]


def _layer_size(lay: LayerSpec, live_in, live_out):
    k = lay.kx * lay.ky
    if lay.kind == "dw_conv2d":
        return live_in * k
    return live_in * live_out * k


def cost_terms(model: Model) -> tuple[Tensor, Tensor]:
    """Differentiable ``(size, ops)`` scalars under the model's current gates."""
    gates = {gid: m.gate(model.relaxed) for gid, m in model.masks.items()}
    size = Tensor(0.0)
    ops = Tensor(0.0)
    for lay, live_in, live_out in _live_terms(model, gates):
        s = _layer_size(lay, live_in, live_out)
        size = size + s
        ops = ops + s * model.spec.output_area(lay.id)
    return size, ops


def size_cost(model: Model) -> Tensor:
    return cost_terms(model)[0]


def ops_cost(model: Model) -> Tensor:
    return cost_terms(model)[1]


def exact_counts(model: Model) -> CostReport:
    """Integer size/OPs at the binarized gates, plus the excluded extras."""
    spec = model.spec
    live = {gid: m.alive_count() for gid, m in model.masks.items()}
    per_layer: list[LayerCost] = []
    bias = bn = 0
    for lay in spec.layers:
        in_src = spec.input_source(lay)
        live_in = live[in_src] if in_src is not None else lay.c_in
        if lay.kind in ("conv2d", "dw_conv2d"):
            live_out = live_in if lay.kind == "dw_conv2d" else live[spec.sources[lay.id]]
            params = _layer_size(lay, live_in, live_out)
            per_layer.append(
                LayerCost(lay.id, lay.kind, live_in, live_out, params, params * spec.output_area(lay.id))
            )
            bias += live_out
        elif lay.kind == "batchnorm":
            bn += 2 * live_in
    dense_params = dense_ops = 0
    head = spec.layers[-1]
    feeder = spec.layer(head.inputs[0])
    src = spec.sources[feeder.id]
    if src is None:
        features = head.c_in
    elif feeder.kind == "flatten":
        _, h, w = spec.shapes[feeder.inputs[0]]
        features = live[src] * h * w
    else:
        features = live[src]
    dense_params = dense_ops = features * head.c_out
    bias += head.c_out

    with_grad = [m.theta.requires_grad for m in model.masks.values()]
    for m in model.masks.values():
        m.theta.requires_grad = False
    try:
        size_d, ops_d = cost_terms(model)
    finally:
        for m, rg in zip(model.masks.values(), with_grad):
            m.theta.requires_grad = rg
    return CostReport(
        per_layer=per_layer,
        total_params=sum(lc.params for lc in per_layer),
        total_ops=sum(lc.ops for lc in per_layer),
        total_params_diff=size_d.item(),
        total_ops_diff=ops_d.item(),
        dense_params=dense_params,
        dense_ops=dense_ops,
        bias_params=bias,
        bn_params=bn,
        meta={"network": spec.name},
    )
