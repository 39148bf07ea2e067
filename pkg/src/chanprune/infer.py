"""Forward execution, im2col extraction and FLOP accounting.

Activations are float32 NCHW arrays. A convolution is computed as
``im2col(x) @ W.T + b``; the im2col row layout is channel-major, so columns
``[i*kh*kw, (i+1)*kh*kw)`` always belong to input channel ``i``.
"""
import json
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import Graph, GraphError, TensorShape, conv_geometry, infer_shapes

FLOP_CONVENTION = "1 multiply-accumulate = 2 FLOPs; elementwise ops = 1 FLOP per output element"


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id):
        self.node_id = node_id
        super().__init__(f"non-finite values produced at node {node_id!r}")


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise GraphError(f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]}")
    # (N, C, Ho, Wo, kh, kw)
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def im2col(x, attrs):
    """Unroll a batch of NCHW activations into receptive-field rows.

    Returns an ``(N*Ho*Wo, C*kh*kw)`` matrix; rows are ordered batch-major,
    then output row, then output column.
    """
    kh, kw, stride, pad, _ = conv_geometry(attrs)
    win = _windows(np.asarray(x), kh, kw, stride, pad)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def im2col_at(x, attrs, positions):
    """im2col rows only at ``positions``, an ``(P, 3)`` array of (image, y, x)."""
    kh, kw, stride, pad, _ = conv_geometry(attrs)
    win = _windows(np.asarray(x), kh, kw, stride, pad)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    if pos.size and (pos[:, 1].max() >= win.shape[2] or pos[:, 2].max() >= win.shape[3] or pos.min() < 0):
        raise IndexError("sample position outside the conv output grid")
    rows = win[pos[:, 0], :, pos[:, 1], pos[:, 2]]  # (P, C, kh, kw)
    return rows.reshape(len(pos), -1)


def conv2d(x, weight, bias, attrs):
    kh, kw, stride, pad, groups = conv_geometry(attrs)
    n = x.shape[0]
    out_c = weight.shape[0]
    win = _windows(x, kh, kw, stride, pad)
    ho, wo = win.shape[2], win.shape[3]
    cin_g, out_g = x.shape[1] // groups, out_c // groups
    out = np.empty((n, ho, wo, out_c), dtype=np.float32)
    for gi in range(groups):
        cols = win[:, gi * cin_g:(gi + 1) * cin_g].transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        w = weight[gi * out_g:(gi + 1) * out_g].reshape(out_g, -1)
        out[..., gi * out_g:(gi + 1) * out_g] = (cols @ w.T).reshape(n, ho, wo, out_g)
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _pool(x, window, stride, op):
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return op(win, axis=(4, 5)).astype(np.float32)


def forward(g: Graph, x, capture=(), check_finite=True) -> Dict[str, np.ndarray]:
    """Run the graph on a float32 NCHW batch.

    Returns activations for every id in ``capture`` plus the Output node.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.input_shape()[1:]):
        raise GraphError(f"input of shape {x.shape} does not match graph input {g.input_shape()}")
    keep = set(capture) | {g.output_id}
    remaining = {}
    for nid in g.topo_order:
        for src in g.nodes[nid].inputs:
            remaining[src] = remaining.get(src, 0) + 1
    acts, out = {}, {}
    for nid in g.topo_order:
        nd = g.nodes[nid]
        ins = [acts[i] for i in nd.inputs]
        k = nd.kind
        if k == "Input":
            y = x
        elif k in ("Output",):
            y = ins[0]
        elif k == "ReLU":
            y = np.maximum(ins[0], 0)
        elif k == "Add":
            if ins[0].shape != ins[1].shape:
                raise GraphError(f"Add {nid!r} got shapes {ins[0].shape} and {ins[1].shape}")
            y = ins[0] + ins[1]
        elif k == "Conv2D":
            bias = g.weights.get(f"{nid}.bias")
            y = conv2d(ins[0], g.weights[nid], bias, nd.attrs)
        elif k == "BatchNorm":
            gamma, beta, mean, var = g.weights[nid]
            scale = gamma / np.sqrt(var + np.float32(nd.attrs["eps"]))
            y = (ins[0] - mean[:, None, None]) * scale[:, None, None] + beta[:, None, None]
        elif k == "MaxPool":
            y = _pool(ins[0], int(nd.attrs["window"]), int(nd.attrs.get("stride", nd.attrs["window"])), np.max)
        elif k == "AvgPool":
            y = _pool(ins[0], int(nd.attrs["window"]), int(nd.attrs.get("stride", nd.attrs["window"])), np.mean)
        elif k == "Dense":
            flat = ins[0].reshape(ins[0].shape[0], -1)
            y = flat @ g.weights[nid].T
            if f"{nid}.bias" in g.weights:
                y = y + g.weights[f"{nid}.bias"]
            y = y.reshape(y.shape[0], -1, 1, 1)
        elif k == "ChannelSelect":
            y = ins[0][:, list(nd.attrs["indices"])]
        else:
            raise GraphError(f"unknown node kind {k!r}")
        y = y.astype(np.float32, copy=False)
        if check_finite and k in ("Conv2D", "Dense", "BatchNorm", "Add") and not np.isfinite(y).all():
            raise NonFiniteError(nid)
        acts[nid] = y
        if nid in keep:
            out[nid] = y
        for src in nd.inputs:
            remaining[src] -= 1
            if remaining[src] == 0:
                del acts[src]
    return out


def forward_batched(g: Graph, images, capture=(), batch_size=256):
    """:func:`forward` over a large stack of images, concatenating captures."""
    parts = {}
    for start in range(0, len(images), batch_size):
        res = forward(g, images[start:start + batch_size], capture)
        for k, v in res.items():
            parts.setdefault(k, []).append(v)
    return {k: np.concatenate(v) for k, v in parts.items()}


@dataclass
class FlopsReport:
    per_layer: Dict[str, int] = field(default_factory=dict)
    batch: int = 1

    @property
    def total(self):
        return sum(self.per_layer.values())

    def to_dict(self):
        return {
            "convention": FLOP_CONVENTION,
            "batch": self.batch,
            "per_layer": dict(self.per_layer),
            "total": self.total,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def node_flops(kind, attrs, in_shape: TensorShape, out_shape: TensorShape):
    if kind == "Conv2D":
        kh, kw, _, _, groups = conv_geometry(attrs)
        per_item = 2 * out_shape.c * (in_shape.c // groups) * kh * kw * out_shape.h * out_shape.w
        return per_item * out_shape.n
    if kind == "Dense":
        return 2 * attrs["in_features"] * attrs["out_features"] * out_shape.n
    if kind in ("ReLU", "Add", "MaxPool", "AvgPool", "BatchNorm"):
        return out_shape.size
    return 0


def count_flops(g: Graph, input_shape: TensorShape = None) -> FlopsReport:
    if input_shape is None:
        input_shape = g.input_shape()
    shapes = infer_shapes(g, input_shape)
    per_layer = {}
    for nid in g.topo_order:
        nd = g.nodes[nid]
        in_shape = shapes[nd.inputs[0]] if nd.inputs else shapes[nid]
        per_layer[nid] = int(node_flops(nd.kind, nd.attrs, in_shape, shapes[nid]))
    return FlopsReport(per_layer, batch=input_shape.n)


def speedup_ratio(orig: FlopsReport, pruned: FlopsReport) -> float:
    if orig.total <= 0:
        raise ValueError("original FLOP total must be positive")
    if pruned.total <= 0:
        raise ZeroDivisionError("pruned FLOP total is zero")
    return orig.total / pruned.total
