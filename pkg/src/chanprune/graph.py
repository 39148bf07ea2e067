"""Compute-graph data model, file formats and the pruning rewrites.

A :class:`Graph` is a DAG of :class:`LayerNode` objects plus a weight store of
float32 tensors. Graph values are treated as immutable: every rewrite returns
a new graph and stored arrays are marked read-only.

On disk a graph is two files: a JSON document describing the nodes and a
``PKW1`` binary blob holding the tensors.
"""
import copy
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

FORMAT_VERSION = 1
WEIGHTS_MAGIC = b"PKW1"

KINDS = (
    "Input", "Output", "Conv2D", "ReLU", "BatchNorm", "Add",
    "MaxPool", "AvgPool", "Dense", "ChannelSelect",
)
PARAM_KINDS = ("Conv2D", "Dense", "BatchNorm")
# Ops that act on each channel independently; filters may be removed through them.
CHANNELWISE_KINDS = ("ReLU", "MaxPool", "AvgPool")


class GraphError(ValueError):
    pass


class TensorShape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    def __str__(self):
        return f"{self.n}x{self.c}x{self.h}x{self.w}"

    @property
    def size(self):
        return self.n * self.c * self.h * self.w


def parse_shape(text):
    """Parse ``NxCxHxW`` into a :class:`TensorShape`."""
    parts = str(text).lower().split("x")
    if len(parts) != 4:
        raise ValueError(f"shape must look like NxCxHxW, got {text!r}")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"shape must look like NxCxHxW, got {text!r}") from None
    if min(dims) < 1:
        raise ValueError(f"shape extents must be >= 1, got {text!r}")
    return TensorShape(*dims)


def bias_key(node_id):
    return f"{node_id}.bias"


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: List[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "attrs": self.attrs}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(id=str(d["id"]), kind=str(d["kind"]), inputs=[str(i) for i in d.get("inputs", [])],
                       attrs=dict(d.get("attrs", {})))
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed node entry {d!r}") from exc


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class Graph:
    nodes: Dict[str, LayerNode]
    topo_order: List[str]
    weights: Dict[str, np.ndarray]

    def __post_init__(self):
        self.weights = {k: _frozen(v) for k, v in self.weights.items()}

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if self.topo_order != other.topo_order:
            return False
        if {k: v.to_dict() for k, v in self.nodes.items()} != {k: v.to_dict() for k, v in other.nodes.items()}:
            return False
        if self.weights.keys() != other.weights.keys():
            return False
        return all(
            self.weights[k].shape == other.weights[k].shape
            and self.weights[k].tobytes() == other.weights[k].tobytes()
            for k in self.weights
        )

    def node(self, node_id) -> LayerNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GraphError(f"unknown node id {node_id!r}") from None

    def consumers(self, node_id) -> List[str]:
        return [nid for nid in self.topo_order if node_id in self.nodes[nid].inputs]

    @property
    def input_id(self):
        ids = [nid for nid in self.topo_order if self.nodes[nid].kind == "Input"]
        if len(ids) != 1:
            raise GraphError(f"graph must have exactly one Input node, found {len(ids)}")
        return ids[0]

    @property
    def output_id(self):
        ids = [nid for nid in self.topo_order if self.nodes[nid].kind == "Output"]
        if len(ids) != 1:
            raise GraphError(f"graph must have exactly one Output node, found {len(ids)}")
        return ids[0]

    def input_shape(self, batch=1):
        c, h, w = self.node(self.input_id).attrs["shape"]
        return TensorShape(batch, int(c), int(h), int(w))

    def conv_weight(self, node_id):
        return self.weights[node_id]

    def bias(self, node_id):
        """Bias vector of a Conv2D/Dense node; zeros when the node has none."""
        node = self.node(node_id)
        key = bias_key(node_id)
        if key in self.weights:
            return self.weights[key]
        n = node.attrs["out_channels"] if node.kind == "Conv2D" else node.attrs["out_features"]
        return np.zeros(n, dtype=np.float32)

    def conv_ids(self):
        return [nid for nid in self.topo_order if self.nodes[nid].kind == "Conv2D"]

    def copy(self):
        return Graph(copy.deepcopy(self.nodes), list(self.topo_order), dict(self.weights))


def make_graph(nodes: Sequence[LayerNode], weights=None, validate_graph=True):
    """Build a graph from nodes listed in any order; topo order is computed."""
    node_map = {}
    for nd in nodes:
        if nd.id in node_map:
            raise GraphError(f"duplicate node id {nd.id!r}")
        node_map[nd.id] = nd
    g = Graph(node_map, topo_sort(node_map, [nd.id for nd in nodes]), dict(weights or {}))
    if validate_graph:
        validate(g)
    return g


def topo_sort(nodes, order_hint=None):
    """Kahn's algorithm; ties resolved by ``order_hint`` for stable output."""
    hint = list(order_hint) if order_hint is not None else list(nodes)
    rank = {nid: i for i, nid in enumerate(hint)}
    for nid, nd in nodes.items():
        for src in nd.inputs:
            if src not in nodes:
                raise GraphError(f"node {nid!r} references unknown input {src!r}")
    indeg = {nid: len(set(nd.inputs)) for nid, nd in nodes.items()}
    users = {nid: [] for nid in nodes}
    for nid, nd in nodes.items():
        for src in set(nd.inputs):
            users[src].append(nid)
    ready = sorted((nid for nid, d in indeg.items() if d == 0), key=lambda x: rank.get(x, len(rank)))
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
        ready.sort(key=lambda x: rank.get(x, len(rank)))
    if len(order) != len(nodes):
        raise GraphError("cycle detected in graph")
    return order


def _pair(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise GraphError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_geometry(attrs):
    kh, kw = _pair(attrs["kernel"])
    return kh, kw, int(attrs.get("stride", 1)), int(attrs.get("padding", 0)), int(attrs.get("groups", 1))


def conv_out_extent(size, k, stride, pad):
    out = (size + 2 * pad - k) // stride + 1
    return out


def expected_weight_shapes(node):
    a = node.attrs
    if node.kind == "Conv2D":
        kh, kw, _, _, groups = conv_geometry(a)
        shapes = {node.id: (a["out_channels"], a["in_channels"] // groups, kh, kw)}
        if a.get("has_bias", False):
            shapes[bias_key(node.id)] = (a["out_channels"],)
        return shapes
    if node.kind == "Dense":
        shapes = {node.id: (a["out_features"], a["in_features"])}
        if a.get("has_bias", False):
            shapes[bias_key(node.id)] = (a["out_features"],)
        return shapes
    if node.kind == "BatchNorm":
        # rows: gamma, beta, running mean, running variance
        return {node.id: (4, a["num_features"])}
    return {}


def infer_shapes(g: Graph, input_shape: Optional[TensorShape] = None) -> Dict[str, TensorShape]:
    """Propagate a :class:`TensorShape` through every node."""
    if input_shape is None:
        input_shape = g.input_shape()
    shapes = {}
    for nid in g.topo_order:
        nd = g.nodes[nid]
        a = nd.attrs
        ins = [shapes[i] for i in nd.inputs]
        k = nd.kind
        if k == "Input":
            declared = tuple(int(x) for x in a.get("shape", input_shape[1:]))
            if declared != tuple(input_shape[1:]):
                raise GraphError(f"input shape {input_shape} does not match declared {declared}")
            out = TensorShape(*input_shape)
        elif len(ins) != (2 if k == "Add" else 1):
            raise GraphError(f"{k} node {nid!r} has {len(ins)} inputs")
        elif k in ("Output", "ReLU"):
            out = ins[0]
        elif k == "BatchNorm":
            if ins[0].c != a["num_features"]:
                raise GraphError(f"BatchNorm {nid!r} expects {a['num_features']} channels, got {ins[0].c}")
            out = ins[0]
        elif k == "Add":
            if ins[0] != ins[1]:
                raise GraphError(f"Add {nid!r} has incompatible inputs {ins[0]} and {ins[1]}")
            out = ins[0]
        elif k == "Conv2D":
            s = ins[0]
            kh, kw, stride, pad, groups = conv_geometry(a)
            if a["in_channels"] != s.c:
                raise GraphError(f"Conv2D {nid!r} expects {a['in_channels']} input channels, got {s.c}")
            if a["in_channels"] % groups or a["out_channels"] % groups:
                raise GraphError(f"Conv2D {nid!r} channel counts not divisible by groups={groups}")
            ho, wo = conv_out_extent(s.h, kh, stride, pad), conv_out_extent(s.w, kw, stride, pad)
            if ho < 1 or wo < 1:
                raise GraphError(f"Conv2D {nid!r} produces non-positive output extent {ho}x{wo}")
            out = TensorShape(s.n, a["out_channels"], ho, wo)
        elif k in ("MaxPool", "AvgPool"):
            s = ins[0]
            win, stride = int(a["window"]), int(a.get("stride", a["window"]))
            ho, wo = conv_out_extent(s.h, win, stride, 0), conv_out_extent(s.w, win, stride, 0)
            if ho < 1 or wo < 1:
                raise GraphError(f"{k} {nid!r} produces non-positive output extent {ho}x{wo}")
            out = TensorShape(s.n, s.c, ho, wo)
        elif k == "Dense":
            s = ins[0]
            if s.c * s.h * s.w != a["in_features"]:
                raise GraphError(f"Dense {nid!r} expects {a['in_features']} features, got {s.c * s.h * s.w}")
            out = TensorShape(s.n, a["out_features"], 1, 1)
        elif k == "ChannelSelect":
            idx = list(a["indices"])
            if any(i < 0 or i >= ins[0].c for i in idx):
                raise GraphError(f"ChannelSelect {nid!r} index out of range for {ins[0].c} channels")
            out = TensorShape(ins[0].n, len(idx), ins[0].h, ins[0].w)
        else:
            raise GraphError(f"unknown node kind {k!r}")
        shapes[nid] = out
    return shapes


def validate(g: Graph):
    """Check structural invariants; raises :class:`GraphError` on violation."""
    for nid, nd in g.nodes.items():
        if nd.id != nid:
            raise GraphError(f"node key {nid!r} does not match id {nd.id!r}")
        if nd.kind not in KINDS:
            raise GraphError(f"unknown node kind {nd.kind!r} for {nid!r}")
        if nd.kind == "ChannelSelect":
            idx = list(nd.attrs.get("indices", []))
            if not idx or any(b <= a for a, b in zip(idx, idx[1:])):
                raise GraphError(f"ChannelSelect {nid!r} indices must be non-empty and strictly increasing")
        if nd.kind == "BatchNorm" and not float(nd.attrs.get("eps", 0.0)) > 0:
            raise GraphError(f"BatchNorm {nid!r} needs eps > 0")
    if sorted(g.topo_order) != sorted(g.nodes):
        raise GraphError("topo_order does not list every node exactly once")
    pos = {nid: i for i, nid in enumerate(g.topo_order)}
    for nid, nd in g.nodes.items():
        for src in nd.inputs:
            if src not in g.nodes:
                raise GraphError(f"node {nid!r} references unknown input {src!r}")
            if pos[src] >= pos[nid]:
                topo_sort(g.nodes)  # raises on a genuine cycle
                raise GraphError(f"topo_order is not a valid topological sort at {nid!r}")
    expected = {}
    for nd in g.nodes.values():
        expected.update(expected_weight_shapes(nd))
    for key, shape in expected.items():
        if key not in g.weights:
            raise GraphError(f"missing weight tensor {key!r}")
        if tuple(g.weights[key].shape) != tuple(shape):
            raise GraphError(f"weight {key!r} has shape {g.weights[key].shape}, expected {tuple(shape)}")
    extra = set(g.weights) - set(expected)
    if extra:
        raise GraphError(f"weight store has entries for no node: {sorted(extra)}")
    g.input_id, g.output_id  # noqa: B018 - existence checks
    infer_shapes(g)
    return g


# ---------------------------------------------------------------- file formats

def save_graph(g: Graph, graph_path, weights_path):
    doc = {
        "format_version": FORMAT_VERSION,
        "nodes": [g.nodes[nid].to_dict() for nid in g.topo_order],
        "topo_order": list(g.topo_order),
    }
    with open(graph_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(weights_path, "wb") as fh:
        fh.write(encode_weights(g))


def weight_keys_in_order(g: Graph):
    keys = []
    for nid in g.topo_order:
        for key in (nid, bias_key(nid)):
            if key in g.weights:
                keys.append(key)
    return keys


def encode_weights(g: Graph) -> bytes:
    out = bytearray(WEIGHTS_MAGIC)
    for key in weight_keys_in_order(g):
        arr = g.weights[key]
        name = key.encode("utf-8")
        out += struct.pack("<I", len(name)) + name
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def decode_weights(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != WEIGHTS_MAGIC:
        raise GraphError("weights file has bad magic bytes")
    pos, out = 4, {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise GraphError("weights file is truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        key = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if key in out:
            raise GraphError(f"duplicate tensor {key!r} in weights file")
        out[key] = arr
    return out


def _read_graph_doc(graph_path):
    try:
        with open(graph_path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GraphError(f"cannot parse graph file {graph_path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise GraphError(f"graph file {graph_path} is not format_version {FORMAT_VERSION}")
    nodes = [LayerNode.from_dict(d) for d in doc.get("nodes", [])]
    node_map = {}
    for nd in nodes:
        if nd.id in node_map:
            raise GraphError(f"duplicate node id {nd.id!r}")
        node_map[nd.id] = nd
    for nd in nodes:
        for src in nd.inputs:
            if src not in node_map:
                raise GraphError(f"dangling input {src!r} on node {nd.id!r}")
    topo_sort(node_map)  # cycle check before trusting the stored order
    return node_map, [str(x) for x in doc.get("topo_order", [])]


def load_graph(graph_path, weights_path) -> Graph:
    node_map, order = _read_graph_doc(graph_path)
    with open(weights_path, "rb") as fh:
        weights = decode_weights(fh.read())
    g = Graph(node_map, order, weights)
    validate(g)
    return g


def load_structure(graph_path) -> Graph:
    """Graph without weights; enough for shape inference and FLOP counting."""
    node_map, order = _read_graph_doc(graph_path)
    if sorted(order) != sorted(node_map):
        raise GraphError("topo_order does not list every node exactly once")
    g = Graph(node_map, order, {})
    infer_shapes(g)
    return g


# ---------------------------------------------------------------- rewrites

def fold_batchnorm(g: Graph) -> Graph:
    """Merge every BatchNorm into the Conv2D feeding it.

    The conv gains a bias (materialized even when zero) and consumers of the
    BatchNorm are rewired to the conv.
    """
    new = g.copy()
    weights = dict(new.weights)
    for nid in g.topo_order:
        bn = g.nodes[nid]
        if bn.kind != "BatchNorm":
            continue
        conv = g.nodes[bn.inputs[0]]
        if conv.kind != "Conv2D":
            raise GraphError(f"BatchNorm {nid!r} is not preceded by a Conv2D (got {conv.kind})")
        if len(g.consumers(conv.id)) != 1:
            raise GraphError(f"Conv2D {conv.id!r} feeds more than its BatchNorm; cannot fold")
        eps = float(bn.attrs.get("eps", 0.0))
        if not eps > 0:
            raise GraphError(f"BatchNorm {nid!r} needs eps > 0")
        gamma, beta, mean, var = g.weights[nid].astype(np.float64)
        scale = gamma / np.sqrt(var + eps)
        w = weights[conv.id].astype(np.float64)
        b = new.bias(conv.id).astype(np.float64)
        weights[conv.id] = (w * scale[:, None, None, None]).astype(np.float32)
        weights[bias_key(conv.id)] = (scale * (b - mean) + beta).astype(np.float32)
        new.nodes[conv.id].attrs["has_bias"] = True
        del weights[nid]
        del new.nodes[nid]
        for other in new.nodes.values():
            other.inputs = [conv.id if i == nid else i for i in other.inputs]
    new.topo_order = [nid for nid in g.topo_order if nid in new.nodes]
    new = Graph(new.nodes, new.topo_order, weights)
    validate(new)
    return new


def producer_chain(g: Graph, conv_id) -> Tuple[Optional[str], List[str]]:
    """Find the Conv2D whose filters feed ``conv_id`` exclusively.

    Walks back through channel-wise ops (ReLU, pools). Returns
    ``(producer_id, chain)`` when every node on the path has exactly one
    consumer and the producer is a groups=1 Conv2D, else ``(None, chain)``.
    """
    chain = []
    cur = g.node(conv_id).inputs[0]
    while True:
        nd = g.node(cur)
        if len(g.consumers(cur)) != 1:
            return None, chain
        if nd.kind == "Conv2D":
            if int(nd.attrs.get("groups", 1)) != 1:
                return None, chain
            return cur, chain
        if nd.kind in CHANNELWISE_KINDS:
            chain.append(cur)
            cur = nd.inputs[0]
            continue
        return None, chain


def _check_prunable_conv(g, conv_id):
    nd = g.node(conv_id)
    if nd.kind != "Conv2D":
        raise GraphError(f"{conv_id!r} is a {nd.kind}, not a Conv2D")
    if int(nd.attrs.get("groups", 1)) != 1:
        raise GraphError(f"grouped convolution {conv_id!r} cannot be pruned")
    return nd


def _check_kept(kept, c):
    kept = [int(i) for i in kept]
    if not kept:
        raise GraphError("kept index list is empty")
    if any(i < 0 or i >= c for i in kept):
        raise GraphError(f"kept index out of range [0, {c})")
    if any(b <= a for a, b in zip(kept, kept[1:])):
        raise GraphError("kept indices must be strictly increasing (no duplicates)")
    return kept


def _conv_weight_tensor(nd, new_weights, n_in):
    kh, kw, _, _, _ = conv_geometry(nd.attrs)
    n = nd.attrs["out_channels"]
    arr = np.asarray(new_weights)
    if arr.size != n * n_in * kh * kw:
        raise GraphError(
            f"new weights for {nd.id!r} have {arr.size} entries, expected {n}x{n_in * kh * kw}")
    return arr.reshape(n, n_in, kh, kw)


def apply_channel_prune(g: Graph, conv_id, kept, new_weights, new_bias=None) -> Graph:
    """Remove input channels of ``conv_id`` and the producer filters making them.

    ``new_weights`` is the refit ``n x (len(kept)*kh*kw)`` matrix for
    ``conv_id``; ``new_bias`` optionally replaces its bias.
    """
    nd = _check_prunable_conv(g, conv_id)
    producer, _ = producer_chain(g, conv_id)
    if producer is None:
        src = g.node(nd.inputs[0])
        raise GraphError(
            f"input of {conv_id!r} is not produced exclusively by a Conv2D (found {src.kind} {src.id!r}); "
            "use insert_channel_select instead")
    kept = _check_kept(kept, nd.attrs["in_channels"])
    new = g.copy()
    weights = dict(new.weights)
    prod = new.nodes[producer]
    weights[producer] = g.weights[producer][kept]
    if bias_key(producer) in g.weights:
        weights[bias_key(producer)] = g.weights[bias_key(producer)][kept]
    prod.attrs["out_channels"] = len(kept)
    cons = new.nodes[conv_id]
    cons.attrs["in_channels"] = len(kept)
    weights[conv_id] = _conv_weight_tensor(cons, new_weights, len(kept))
    if new_bias is not None:
        weights[bias_key(conv_id)] = np.asarray(new_bias, dtype=np.float32).reshape(-1)
        cons.attrs["has_bias"] = True
    new = Graph(new.nodes, new.topo_order, weights)
    validate(new)
    return new


def _unique_id(g, base):
    nid, k = base, 1
    while nid in g.nodes:
        k += 1
        nid = f"{base}_{k}"
    return nid


def insert_channel_select(g: Graph, edge, kept) -> Graph:
    """Splice a ChannelSelect onto the single edge ``(producer, consumer)``.

    The consumer's weights are not touched; unless ``kept`` covers every
    channel the caller must follow up with :func:`replace_conv_weights`.
    """
    producer, consumer = edge
    if producer not in g.nodes or consumer not in g.nodes or producer not in g.nodes[consumer].inputs:
        raise GraphError(f"edge {producer!r} -> {consumer!r} not found")
    c = infer_shapes(g)[producer].c
    kept = _check_kept(kept, c)
    new = g.copy()
    sel_id = _unique_id(new, f"{consumer}.select")
    new.nodes[sel_id] = LayerNode(sel_id, "ChannelSelect", [producer], {"indices": kept})
    cons = new.nodes[consumer]
    cons.inputs = [sel_id if i == producer else i for i in cons.inputs]
    order = list(new.topo_order)
    order.insert(order.index(consumer), sel_id)
    new.topo_order = order
    return new


def replace_conv_weights(g: Graph, conv_id, new_weights, new_bias=None, in_channels=None) -> Graph:
    """Set a conv's weights (and input channel count) and re-validate."""
    nd = g.node(conv_id)
    if nd.kind != "Conv2D":
        raise GraphError(f"{conv_id!r} is a {nd.kind}, not a Conv2D")
    new = g.copy()
    cons = new.nodes[conv_id]
    if in_channels is None:
        kh, kw, _, _, _ = conv_geometry(cons.attrs)
        in_channels = np.asarray(new_weights).size // (cons.attrs["out_channels"] * kh * kw)
    cons.attrs["in_channels"] = int(in_channels)
    weights = dict(new.weights)
    weights[conv_id] = _conv_weight_tensor(cons, new_weights, int(in_channels))
    if new_bias is not None:
        weights[bias_key(conv_id)] = np.asarray(new_bias, dtype=np.float32).reshape(-1)
        cons.attrs["has_bias"] = True
    new = Graph(new.nodes, new.topo_order, weights)
    validate(new)
    return new


def select_input_channels(g: Graph, conv_id, kept, new_weights, new_bias=None) -> Graph:
    """Reduce a conv's inputs with a ChannelSelect, composing with an existing one."""
    nd = _check_prunable_conv(g, conv_id)
    kept = _check_kept(kept, nd.attrs["in_channels"])
    src = g.node(nd.inputs[0])
    if src.kind == "ChannelSelect" and g.consumers(src.id) == [conv_id]:
        new = g.copy()
        new.nodes[src.id].attrs["indices"] = [src.attrs["indices"][i] for i in kept]
    else:
        new = insert_channel_select(g, (src.id, conv_id), kept)
    return replace_conv_weights(new, conv_id, new_weights, new_bias, in_channels=len(kept))

