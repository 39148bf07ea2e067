"""Datasets of network-input tensors and per-layer (X, Y) sample sets.

X rows are receptive fields of a conv layer's input taken from the current
(possibly pruned) network; Y rows are the same layer's outputs in the
reference network, read at identical output positions.
"""
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import Graph, GraphError, TensorShape, conv_geometry, infer_shapes
from .infer import forward, im2col_at

TENSORSET_MAGIC = b"PKT1"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, c, h, w) float32
    source: Optional[str] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be a (count, c, h, w) stack, got {self.images.shape}")
        if len(self.images) == 0:
            raise DatasetError("empty dataset")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return TensorShape(1, *self.images.shape[1:])

    def head(self, count):
        return Dataset(self.images[:count], self.source)


def save_dataset(ds: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(TENSORSET_MAGIC)
        fh.write(struct.pack("<I", len(ds)))
        for img in ds.images:
            img = img[None]
            fh.write(struct.pack("<I", img.ndim) + struct.pack(f"<{img.ndim}I", *img.shape))
            fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSORSET_MAGIC:
        raise DatasetError(f"{path}: bad magic bytes")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos, images = 8, []
    try:
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{ndim}I", blob, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims))
            if pos + 4 * size > len(blob):
                raise DatasetError(f"{path}: truncated payload")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            if arr.ndim == 4 and arr.shape[0] == 1:
                arr = arr[0]
            if arr.ndim != 3:
                raise DatasetError(f"{path}: image tensor must be 1xCxHxW or CxHxW, got {dims}")
            images.append(arr)
    except struct.error as exc:
        raise DatasetError(f"{path}: truncated header") from exc
    if not images:
        raise DatasetError("empty dataset")
    if len({im.shape for im in images}) != 1:
        raise DatasetError(f"{path}: images have inconsistent shapes")
    return Dataset(np.stack(images).astype(np.float32), source=str(path))


def sample_positions(num_images, out_shape: TensorShape, per_image, seed):
    """Distinct random output positions per image, as an ``(N, 3)`` int array.

    Every position is used when an image has fewer than ``per_image``.
    Rows are ordered by image, then by draw order.
    """
    if isinstance(num_images, Dataset):
        num_images = len(num_images)
    if per_image < 1:
        raise ValueError("per_image must be >= 1")
    hw = out_shape.h * out_shape.w
    rng = np.random.default_rng(seed)
    if per_image >= hw:
        flat = np.tile(np.arange(hw), (num_images, 1))
    else:
        # argsort of iid keys == uniform sample without replacement per row
        flat = np.argsort(rng.random((num_images, hw)), axis=1, kind="stable")[:, :per_image]
    img = np.repeat(np.arange(num_images), flat.shape[1])
    flat = flat.reshape(-1)
    return np.stack([img, flat // out_shape.w, flat % out_shape.w], axis=1).astype(np.int64)


@dataclass
class SampleSet:
    layer_id: str
    X: np.ndarray  # (N, c*kh*kw) float64
    Y: np.ndarray  # (N, n) float64, bias removed
    positions: np.ndarray  # (N, 3)
    rng_seed: Optional[object] = None
    kernel: tuple = (1, 1)
    # bias already removed from Y; a refit's new bias is bias + intercept
    bias: Optional[np.ndarray] = None
    # added back to Y to recover the quantity whose error is reported
    offset: Optional[np.ndarray] = None

    @property
    def n_rows(self):
        return len(self.positions)

    @property
    def channels(self):
        return self.X.shape[1] // (self.kernel[0] * self.kernel[1])

    def rows(self, idx):
        return SampleSet(self.layer_id, self.X[idx], self.Y[idx], self.positions[idx], self.rng_seed,
                         self.kernel, self.bias, None if self.offset is None else self.offset[idx])

    def split(self):
        """Even rows for fitting, odd rows held out for error measurement."""
        n = self.n_rows
        return self.rows(np.arange(0, n, 2)), self.rows(np.arange(1, n, 2))


def _conv_input_id(g, layer_id):
    nd = g.node(layer_id)
    if nd.kind != "Conv2D":
        raise GraphError(f"{layer_id!r} is a {nd.kind}, not a Conv2D")
    return nd.inputs[0]


def gather_outputs(acts, positions):
    pos = np.asarray(positions)
    return acts[pos[:, 0], :, pos[:, 1], pos[:, 2]]


def gather_at(g: Graph, node_id, ds: Dataset, positions, batch_size=256):
    """Activations of ``node_id`` at ``positions`` as an ``(N, C)`` float64 array."""
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(pos), infer_shapes(g)[node_id].c))
    for start in range(0, len(ds), batch_size):
        sel = np.flatnonzero((pos[:, 0] >= start) & (pos[:, 0] < start + batch_size))
        if not sel.size:
            continue
        p = pos[sel].copy()
        p[:, 0] -= start
        acts = forward(g, ds.images[start:start + batch_size], capture=[node_id])[node_id]
        out[sel] = gather_outputs(acts, p)
    return out


def build_sampleset(g_current: Graph, g_original: Graph, layer_id, ds: Dataset, positions,
                    target_id=None, batch_size=256, seed=None) -> SampleSet:
    """Collect X from ``g_current`` and Y from ``g_original`` at ``positions``.

    ``target_id`` overrides the node whose output forms Y (default: the layer
    itself; its bias is subtracted so Y is the linear part of the response).
    """
    nd_cur = g_current.node(layer_id)
    in_id = _conv_input_id(g_current, layer_id)
    _conv_input_id(g_original, layer_id)
    target_id = layer_id if target_id is None else target_id
    shapes_cur = infer_shapes(g_current)
    shapes_orig = infer_shapes(g_original)
    if shapes_cur[layer_id][2:] != shapes_orig[target_id][2:]:
        raise GraphError(f"spatial shapes at {layer_id!r} differ between graphs")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    out = shapes_cur[layer_id]
    if pos.size and (pos[:, 0].max() >= len(ds) or pos[:, 1].max() >= out.h or pos[:, 2].max() >= out.w
                     or pos.min() < 0):
        raise IndexError("sample position out of range")
    idxs, xs, ys = [], [], []
    same = g_current is g_original
    for start in range(0, len(ds), batch_size):
        stop = min(start + batch_size, len(ds))
        sel = np.flatnonzero((pos[:, 0] >= start) & (pos[:, 0] < stop))
        if not sel.size:
            continue
        chunk = ds.images[start:stop]
        p = pos[sel].copy()
        p[:, 0] -= start
        cur = forward(g_current, chunk, capture=[in_id] + ([target_id] if same else []))
        xs.append(im2col_at(cur[in_id], nd_cur.attrs, p).astype(np.float64))
        orig = cur if same else forward(g_original, chunk, capture=[target_id])
        ys.append(gather_outputs(orig[target_id], p).astype(np.float64))
        idxs.append(sel)
    kh, kw = conv_geometry(nd_cur.attrs)[:2]
    X = np.empty((len(pos), shapes_cur[in_id].c * kh * kw))
    Y = np.empty((len(pos), shapes_orig[target_id].c))
    for sel, x, y in zip(idxs, xs, ys):
        X[sel] = x
        Y[sel] = y
    bias = None
    if target_id == layer_id:
        bias = g_original.bias(layer_id).astype(np.float64)
        Y -= bias
    return SampleSet(layer_id, X, Y, pos, seed, (int(kh), int(kw)), bias)


def build_exit_sampleset(g_current: Graph, g_original: Graph, layer_id, add_id, ds: Dataset, positions,
                         batch_size=256, seed=None) -> SampleSet:
    """Samples for the last conv of a residual branch, targeting the block output.

    Y is the reference block output (after the Add) minus the current
    shortcut contribution and the layer's current bias, so a refit makes
    branch + shortcut match the reference sum. ``offset`` holds what was
    subtracted, so ``Y + offset`` is the reference block output.
    """
    add = g_current.node(add_id)
    if add.kind != "Add" or layer_id not in add.inputs:
        raise GraphError(f"{layer_id!r} does not feed Add node {add_id!r}")
    shortcut_id = add.inputs[1] if add.inputs[0] == layer_id else add.inputs[0]
    s = build_sampleset(g_current, g_original, layer_id, ds, positions, target_id=add_id,
                        batch_size=batch_size, seed=seed)
    shortcut = gather_at(g_current, shortcut_id, ds, s.positions, batch_size)
    bias = g_current.bias(layer_id).astype(np.float64)
    offset = shortcut + bias
    return SampleSet(layer_id, s.X, s.Y - offset, s.positions, seed, s.kernel, bias, offset)
