import numpy as np
import pytest

from chanprune import zoo
from chanprune.sampler import Dataset


def direct_conv(x, w, b, stride=1, pad=0, groups=1):
    """Reference convolution by explicit loops; independent of im2col."""
    x = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    oc, cg, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    og = oc // groups
    for o in range(oc):
        g = o // og
        for i in range(ho):
            for j in range(wo):
                patch = x[:, g * cg:(g + 1) * cg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[:, o, i, j] = np.einsum("nchw,chw->n", patch, w[o])
        if b is not None:
            out[:, o] += b[o]
    return out


@pytest.fixture
def chain():
    return zoo.conv_chain([6, 6, 6], input_shape=(3, 8, 8), seed=3)


@pytest.fixture
def chain_ds():
    return Dataset(zoo.correlated_images(48, (3, 8, 8), rank=2, seed=4))


def layer_instance(seed, c=8, n=8, N=256, kernel=(3, 3), rank=None, noise=0.05):
    """A random single-layer problem: correlated input channels, Y from the full layer."""
    from chanprune.sampler import SampleSet

    rng = np.random.default_rng(seed)
    k = kernel[0] * kernel[1]
    rank = rank or c
    latent = rng.normal(size=(N, rank, k))
    mix = rng.normal(size=(c, rank)) * rng.uniform(0.2, 2.0, (c, 1))
    X = np.einsum("cr,Nrk->Nck", mix, latent) + 0.3 * rng.normal(size=(N, c, k))
    X = X.reshape(N, c * k)
    W = rng.normal(size=(n, c * k)) / np.sqrt(c * k)
    Y = X @ W.T
    Y += noise * Y.std() * rng.normal(size=Y.shape)
    pos = np.c_[np.arange(N), np.zeros((N, 2), dtype=np.int64)]
    return SampleSet("layer", X, Y, pos, seed, tuple(kernel)), W


def exhaustive_subsets(samples, budget):
    """Every C(c, budget) subset refit on the fit rows: {subset: (fit_err, held_out_err)}."""
    import itertools

    from chanprune.pruner import refit, sample_error

    fit, hold = samples.split()
    out = {}
    for sub in itertools.combinations(range(samples.channels), budget):
        rec = refit(fit, list(sub))
        out[sub] = (sample_error(rec, fit), sample_error(rec, hold))
    return out


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
