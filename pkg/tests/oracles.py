"""Independent reference implementations used by the tests.

Nothing here imports the cost model or the fast conv kernels; the oracles
are deliberately naive loops so they can be trusted on their own.
"""

from __future__ import annotations

import numpy as np

from chandnas import tensor as T
from chandnas.masks import project
from chandnas.model import Model, build_seed
from chandnas.spec import NetworkSpec, spec_from_dict


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0), depthwise=False):
    """Direct loop convolution (cross-correlation), N,C,H,W layout."""
    n, c, h, wd = x.shape
    co, ci, ky, kx = w.shape
    sy, sx = stride
    py, px = padding
    xp = np.zeros((n, c, h + 2 * py, wd + 2 * px))
    xp[:, :, py : py + h, px : px + wd] = x
    oh = (h + 2 * py - ky) // sy + 1
    ow = (wd + 2 * px - kx) // sx + 1
    out = np.zeros((n, co, oh, ow))
    for i in range(n):
        for o in range(co):
            for yy in range(oh):
                for xx in range(ow):
                    s = 0.0
                    chans = [o] if depthwise else range(ci)
                    for cc_idx, cc in enumerate(chans):
                        for u in range(ky):
                            for v in range(kx):
                                wv = w[o, 0 if depthwise else cc, u, v]
                                s += wv * xp[i, cc, yy * sy + u, xx * sx + v]
                    out[i, o, yy, xx] = s + (b[o] if b is not None else 0.0)
    return out


def logsumexp_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


# ------------------------------------------------------------ finite diffs


def fd_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7, what=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > rtol * scale + atol
    assert not bad.any(), (
        f"{what}: {int(bad.sum())} of {bad.size} entries differ; "
        f"max abs err {np.abs(analytic - numeric).max():.3e}"
    )


def check_gradients(build, tensors, rtol=1e-4, eps=1e-5, what=""):
    """``build()`` returns a scalar Tensor; compare backprop with finite differences."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    root = build()
    T.backward(root)
    analytic = [t.grad.copy() for t in tensors]
    with T.no_grad():
        for t, a in zip(tensors, analytic):
            num = fd_grad(lambda: build().item(), t.data, eps)
            assert_grad_close(a, num, rtol=rtol, what=f"{what} d/d{t.name or 'x'}")


# --------------------------------------------------------- random networks


def random_spec(rng: np.random.Generator, max_blocks: int = 4, dense_head: str | None = None) -> NetworkSpec:
    """A small random CNN mixing plain/depthwise convs, pools and residual adds."""
    c = int(rng.integers(1, 4))
    h0 = h = int(rng.integers(6, 11))
    w0 = w = int(rng.integers(6, 11))
    layers: list[dict] = []
    prev = "input"
    n = 0

    def add(**kw):
        nonlocal prev, n
        kw.setdefault("id", f"l{n}")
        kw.setdefault("inputs", [prev])
        layers.append(kw)
        prev = kw["id"]
        n += 1
        return kw["id"]

    for _ in range(int(rng.integers(1, max_blocks + 1))):
        kind = rng.choice(["conv", "conv", "dw", "pool", "res"])
        if kind == "conv" or (kind in ("dw", "res") and not layers):
            k = int(rng.choice([1, 3]))
            s = int(rng.choice([1, 2])) if min(h, w) >= 5 else 1
            p = k // 2 if rng.random() < 0.7 or min(h, w) < 5 else 0
            add(kind="conv2d", c_out=int(rng.integers(2, 7)), kx=k, ky=int(rng.choice([1, k])), sx=s, sy=s, padding=p)
            lay = layers[-1]
            h = T.conv_output_size(h, lay["ky"], s, p)
            w = T.conv_output_size(w, k, s, p)
            if rng.random() < 0.7:
                add(kind="batchnorm")
            add(kind="relu")
        elif kind == "dw":
            s = int(rng.choice([1, 2])) if min(h, w) >= 5 else 1
            add(kind="dw_conv2d", kx=3, ky=3, sx=s, sy=s, padding=1)
            h = T.conv_output_size(h, 3, s, 1)
            w = T.conv_output_size(w, 3, s, 1)
            add(kind="batchnorm")
            add(kind="relu")
        elif kind == "pool":
            if min(h, w) < 4:
                continue
            add(kind=str(rng.choice(["maxpool", "avgpool"])), kx=2, ky=2)
            h, w = h // 2, w // 2
        else:
            g = f"g{n}"
            c_res = int(rng.integers(2, 6))
            a = add(kind="conv2d", c_out=c_res, kx=3, padding=1, mask_group=g)
            add(kind="relu")
            add(kind="conv2d", c_out=c_res, kx=3, padding=1, mask_group=g)
            if rng.random() < 0.5:
                add(kind="batchnorm")
            b = prev
            add(kind="add", inputs=[a, b])
    head = dense_head or str(rng.choice(["gap", "flatten"]))
    if head == "gap":
        add(kind="global_avgpool")
    else:
        add(kind="flatten")
    add(kind="dense", c_out=int(rng.integers(2, 5)))
    return spec_from_dict({"name": "rand", "input_shape": [c, h0, w0],
                           "output_classes": layers[-1]["c_out"], "layers": layers})


def random_masks(model: Model, rng: np.random.Generator, p_dead: float | None = None) -> None:
    """Random theta in [-1, 1] for every group, then the min-alive projection."""
    for m in model.masks.values():
        p = rng.uniform(0.1, 0.8) if p_dead is None else p_dead
        dead = rng.random(len(m)) < p
        m.theta.data[:] = np.where(dead, -rng.uniform(0.01, 1.0, len(m)), rng.uniform(0.0, 1.0, len(m)))
    project(model.masks.values())


def randomize_bn(model: Model, rng: np.random.Generator) -> None:
    for lid, st in model.bn_stats.items():
        st["running_mean"][:] = rng.normal(0, 0.5, st["running_mean"].shape)
        st["running_var"][:] = rng.uniform(0.5, 2.0, st["running_var"].shape)
        model.params[lid]["gamma"].data[:] = rng.uniform(0.5, 1.5, st["running_mean"].shape)
        model.params[lid]["beta"].data[:] = rng.normal(0, 0.3, st["running_mean"].shape)
    for lid, p in model.params.items():
        if "b" in p:
            p["b"].data[:] = rng.normal(0, 0.3, p["b"].shape)


def random_model(rng: np.random.Generator, **kw) -> Model:
    spec = random_spec(rng, **kw)
    model = build_seed(spec, int(rng.integers(0, 2**31)))
    randomize_bn(model, rng)
    random_masks(model, rng)
    return model


def brute_force_counts(model: Model, x: np.ndarray) -> tuple[int, int]:
    """Kernel weights and MACs of a materialized network, read off its arrays.

    Runs the network layer by layer to observe actual output shapes and counts
    one MAC per kernel tap per output element.
    """
    spec = model.spec
    acts = {"input": T.Tensor(x)}
    gates = {gid: m.gate() for gid, m in model.masks.items()}
    params = macs = 0
    was = model.training
    model.eval()  # keep batch-norm running statistics untouched
    with T.no_grad():
        for lay in spec.layers:
            out = model._layer_forward(lay, acts, gates)
            acts[lay.id] = out
            if lay.kind in ("conv2d", "dw_conv2d"):
                w = model.params[lay.id]["w"].data
                params += w.size
                _, co, oh, ow = out.shape
                taps = w.shape[1] * w.shape[2] * w.shape[3]
                for _o in range(co):
                    for _y in range(oh):
                        for _x in range(ow):
                            macs += taps
    model.train(was)
    return params, macs
