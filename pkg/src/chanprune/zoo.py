"""Random-weight model builders used by tests, demos and benchmarks."""
import numpy as np

from .graph import LayerNode, bias_key, make_graph

VGG16_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


class Builder:
    """Incrementally assemble a graph with He-initialized random weights."""

    def __init__(self, input_shape, seed=0, bias=True):
        self.rng = np.random.default_rng(seed)
        self.nodes = [LayerNode("input", "Input", [], {"shape": list(input_shape)})]
        self.weights = {}
        self.channels = {"input": input_shape[0]}
        self.bias = bias
        self.last = "input"

    def _add(self, node, channels):
        self.nodes.append(node)
        self.channels[node.id] = channels
        self.last = node.id
        return node.id

    def conv(self, nid, out_channels, kernel=3, stride=1, padding=None, src=None, groups=1, bias=None):
        src = src or self.last
        c = self.channels[src]
        padding = kernel // 2 if padding is None else padding
        bias = self.bias if bias is None else bias
        attrs = {"in_channels": c, "out_channels": out_channels, "kernel": [kernel, kernel], "stride": stride,
                 "padding": padding, "groups": groups, "has_bias": bool(bias)}
        fan_in = c // groups * kernel * kernel
        self.weights[nid] = self.rng.normal(0, np.sqrt(2.0 / fan_in), (out_channels, c // groups, kernel, kernel))
        if bias:
            self.weights[bias_key(nid)] = self.rng.normal(0, 0.1, out_channels)
        return self._add(LayerNode(nid, "Conv2D", [src], attrs), out_channels)

    def relu(self, nid, src=None):
        src = src or self.last
        return self._add(LayerNode(nid, "ReLU", [src]), self.channels[src])

    def bn(self, nid, src=None):
        src = src or self.last
        c = self.channels[src]
        gamma = self.rng.uniform(0.5, 1.5, c)
        beta = self.rng.normal(0, 0.2, c)
        mean = self.rng.normal(0, 0.2, c)
        var = self.rng.uniform(0.5, 2.0, c)
        self.weights[nid] = np.stack([gamma, beta, mean, var])
        return self._add(LayerNode(nid, "BatchNorm", [src], {"num_features": c, "eps": 1e-5}), c)

    def pool(self, nid, window=2, kind="MaxPool", src=None):
        src = src or self.last
        return self._add(LayerNode(nid, kind, [src], {"window": window, "stride": window}), self.channels[src])

    def add(self, nid, a, b):
        return self._add(LayerNode(nid, "Add", [a, b]), self.channels[a])

    def dense(self, nid, in_features, out_features, src=None):
        src = src or self.last
        self.weights[nid] = self.rng.normal(0, np.sqrt(1.0 / in_features), (out_features, in_features))
        self.weights[bias_key(nid)] = np.zeros(out_features)
        return self._add(LayerNode(nid, "Dense", [src], {"in_features": in_features, "out_features": out_features,
                                                         "has_bias": True}), out_features)

    def output(self, src=None):
        src = src or self.last
        return self._add(LayerNode("output", "Output", [src]), self.channels[src])

    def build(self):
        return make_graph(self.nodes, self.weights)


def conv_chain(widths, input_shape=(3, 12, 12), kernel=3, seed=0, bias=True, batchnorm=False):
    """Plain conv/ReLU stack; conv ``i`` is named ``conv{i}``."""
    b = Builder(input_shape, seed, bias)
    for i, w in enumerate(widths):
        b.conv(f"conv{i}", w, kernel)
        if batchnorm:
            b.bn(f"bn{i}")
        b.relu(f"relu{i}")
    b.output()
    return b.build()


def vgg16(input_shape=(3, 224, 224), seed=0, num_classes=10, head=True):
    """VGG-16 conv topology (13 convs, 5 max-pools), with a small dense head."""
    b = Builder(input_shape, seed)
    h = input_shape[1]
    for s, stage in enumerate(VGG16_STAGES, start=1):
        for j, width in enumerate(stage, start=1):
            b.conv(f"conv{s}_{j}", width)
            b.relu(f"relu{s}_{j}")
        b.pool(f"pool{s}")
        h //= 2
    if head:
        b.dense("fc", 512 * h * h, num_classes)
    b.output()
    return b.build()


def residual_net(input_shape=(8, 8, 8), width=8, mid=4, blocks=1, seed=0, stem=True):
    """Stem conv then bottleneck blocks ``res{i}`` with identity shortcuts.

    Each block has branch convs ``res{i}_2a`` (1x1), ``res{i}_2b`` (3x3) and
    ``res{i}_2c`` (1x1) summed with the block input at ``res{i}_add``.
    """
    b = Builder(input_shape, seed)
    if stem:
        b.conv("stem", width, 3)
        b.relu("stem_relu")
    for i in range(blocks):
        entry = b.last
        b.conv(f"res{i}_2a", mid, 1, src=entry)
        b.relu(f"res{i}_2a_relu")
        b.conv(f"res{i}_2b", mid, 3)
        b.relu(f"res{i}_2b_relu")
        b.conv(f"res{i}_2c", b.channels[entry], 1)
        b.add(f"res{i}_add", f"res{i}_2c", entry)
        b.relu(f"res{i}_relu")
    b.output()
    return b.build()


def random_images(count, shape, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 1, (count,) + tuple(shape)).astype(np.float32)


def correlated_images(count, shape, rank=None, seed=0):
    """Images whose channels are mixtures of ``rank`` latent planes plus noise.

    Correlated channels are what make channel selection non-trivial.
    """
    rng = np.random.default_rng(seed)
    c, h, w = shape
    rank = rank or max(1, c // 2)
    latent = rng.normal(0, 1, (count, rank, h, w))
    mix = rng.normal(0, 1, (c, rank)) * rng.uniform(0.2, 2.0, (c, 1))
    imgs = np.einsum("cr,nrhw->nchw", mix, latent) + 0.1 * rng.normal(0, 1, (count, c, h, w))
    return imgs.astype(np.float32)
