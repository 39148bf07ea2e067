"""Single-layer pruning, FLOP-targeted schedules and whole-model pruning.

Pruning a conv layer ``L`` down to ``c'`` input channels is two steps:

1. choose which channels survive (LASSO, or one of the naive baselines);
2. refit ``L``'s weights on the survivors by least squares so its response
   matches the reference network's response.

The graph is then rewritten so the producer of the dropped channels stops
computing them, or, when that producer is shared (residual entries), a
ChannelSelect is spliced in front of ``L``.
"""
import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .graph import (
    Graph, GraphError, LayerNode, TensorShape, apply_channel_prune, infer_shapes,
    producer_chain, select_input_channels,
)
from .infer import FLOP_CONVENTION, count_flops, forward_batched, speedup_ratio
from .lasso import build_channel_design, search_lambda
from .sampler import Dataset, SampleSet, build_exit_sampleset, build_sampleset, sample_positions
from .tensorcore import RankDeficientError, lstsq

STRATEGIES = ("lasso", "first_k", "max_response")


class ScheduleError(ValueError):
    pass


class PruneError(ValueError):
    pass


# ---------------------------------------------------------------- selectors

def _check_budget(c, budget):
    if not 1 <= budget <= c:
        raise ValueError(f"budget {budget} outside [1, {c}]")


def select_first_k(c, budget):
    _check_budget(c, budget)
    return list(range(budget))


def channel_weight_sums(w, channels=None):
    """Sum of |w| over every filter entry reading each input channel."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 4:
        return np.abs(w).sum(axis=(0, 2, 3))
    if channels is None:
        raise ValueError("channels is required for a 2-D weight matrix")
    n = w.shape[0]
    return np.abs(w.reshape(n, channels, -1)).sum(axis=(0, 2))


def select_max_response(w, budget, channels=None):
    """Top-``budget`` channels by absolute filter weight sum, sorted ascending."""
    score = channel_weight_sums(w, channels)
    _check_budget(len(score), budget)
    order = sorted(range(len(score)), key=lambda i: (-score[i], i))
    return sorted(order[:budget])


# ---------------------------------------------------------------- reconstruction

@dataclass
class Reconstruction:
    kept: List[int]
    weights: np.ndarray  # (n, len(kept)*k)
    intercept: np.ndarray  # (n,)
    dropped_columns: int = 0


def kept_columns(kept, kernel_area):
    kept = np.asarray(kept, dtype=np.int64)
    return (kept[:, None] * kernel_area + np.arange(kernel_area)).reshape(-1)


def reconstruction_design(X, kept, kernel_area):
    """``[X restricted to kept channel blocks | 1]``."""
    Xk = np.asarray(X)[:, kept_columns(kept, kernel_area)]
    return np.hstack([Xk, np.ones((len(Xk), 1))])


def refit(samples: SampleSet, kept, w_ref=None) -> Reconstruction:
    """Least-squares weights (plus intercept) for the kept channels.

    The solve is for a correction to ``w_ref`` (the layer's current
    ``n x (c*k)`` weights, or zeros). All-zero and exactly duplicated
    columns carry no information in the sample, so they are left out of the
    solve and keep their reference weights; a channel that never fired in
    the fit rows therefore keeps the weights it had.
    """
    kh, kw = samples.kernel
    A = reconstruction_design(samples.X, kept, kh * kw)
    n = samples.Y.shape[1]
    prior = np.zeros((A.shape[1], n))
    if w_ref is not None:
        prior[:-1] = np.asarray(w_ref, dtype=np.float64)[:, kept_columns(kept, kh * kw)].T
    nonzero = np.flatnonzero(np.any(A != 0, axis=0))
    _, first = np.unique(A[:, nonzero], axis=1, return_index=True)
    use = np.sort(nonzero[first])
    coef = prior.copy()
    try:
        coef[use] += lstsq(A[:, use], samples.Y - A @ prior)
    except RankDeficientError as exc:
        raise PruneError(
            f"layer {samples.layer_id!r}: reconstruction design has rank {exc.rank} < {exc.cols} "
            f"({len(samples.X)} fit rows); draw more samples") from exc
    return Reconstruction(list(kept), coef[:-1].T.copy(), coef[-1].copy(), A.shape[1] - len(use))


def predict(rec: Reconstruction, samples: SampleSet):
    kh, kw = samples.kernel
    Xk = samples.X[:, kept_columns(rec.kept, kh * kw)]
    return Xk @ rec.weights.T + rec.intercept


def sample_error(rec: Reconstruction, samples: SampleSet):
    """Relative error of the refit on ``samples``.

    Measured against ``Y + offset`` when the samples carry an offset (block
    outputs), else against Y.
    """
    pred = predict(rec, samples)
    ref = samples.Y if samples.offset is None else samples.Y + samples.offset
    diff = pred - samples.Y
    denom = np.linalg.norm(ref)
    return float(np.linalg.norm(diff) / denom) if denom > 0 else float(np.linalg.norm(diff))


# ---------------------------------------------------------------- single layer

@dataclass
class SamplingConfig:
    per_image: int = 10
    seed: object = 0
    batch_size: int = 256


@dataclass
class LayerPruneResult:
    layer_id: str
    kept: List[int]
    strategy: str
    rel_err: float
    lam: float = 0.0
    padded: bool = False
    c_before: int = 0
    rewrite: str = "remove"
    target: str = "layer"
    fit_err: float = 0.0
    samples: int = 0
    lasso_steps: int = 0
    lasso_converged: bool = True

    @property
    def c_after(self):
        return len(self.kept)

    def to_dict(self):
        d = asdict(self)
        d["c_after"] = self.c_after
        return d


def layer_weight_matrix(g: Graph, layer_id):
    w = g.weights[layer_id]
    return w.reshape(w.shape[0], -1).astype(np.float64)


def choose_channels(samples: SampleSet, w, budget, strategy, lasso_tol=1e-6, max_iter=10000):
    """Kept channel indices plus LASSO diagnostics (``None`` for baselines)."""
    kh, kw = samples.kernel
    c = samples.X.shape[1] // (kh * kw)
    if strategy == "first_k":
        return select_first_k(c, budget), None
    if strategy == "max_response":
        return select_max_response(w, budget, channels=c), None
    if strategy != "lasso":
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    _check_budget(c, budget)
    d = build_channel_design(samples, w)
    # relative tolerance keeps the certificate meaningful for any data scale
    tol = lasso_tol * max(d.lambda_max, np.finfo(float).tiny)
    search = search_lambda(d, budget, tol=tol, max_iter=max_iter)
    return search.kept, search


def fit_layer(samples: SampleSet, w, budget, strategy, alternations=1, lasso_tol=1e-6):
    """Select channels on the even rows, refit, and score on the odd rows."""
    fit, hold = samples.split()
    kh, kw = samples.kernel
    k = kh * kw
    kept, search = choose_channels(fit, w, budget, strategy, lasso_tol)
    rec = refit(fit, kept, w)
    for _ in range(1, alternations if strategy == "lasso" else 1):
        # re-select against the refit weights; dropped channels keep their old
        # weights so they can re-enter
        w_iter = np.array(w, dtype=np.float64, copy=True)
        w_iter[:, kept_columns(kept, k)] = rec.weights
        kept, search = choose_channels(fit, w_iter, budget, strategy, lasso_tol)
        rec = refit(fit, kept, w)
    return rec, search, sample_error(rec, fit), sample_error(rec, hold)


def rewrite_layer(g: Graph, layer_id, rec: Reconstruction, bias_ref):
    """Apply a reconstruction to the graph; returns (graph, rewrite kind)."""
    new_bias = (np.asarray(bias_ref, dtype=np.float64) + rec.intercept) if bias_ref is not None else rec.intercept
    producer, _ = producer_chain(g, layer_id)
    if producer is not None:
        return apply_channel_prune(g, layer_id, rec.kept, rec.weights, new_bias), "remove"
    return select_input_channels(g, layer_id, rec.kept, rec.weights, new_bias), "select"


def layer_samples(g_current, g_original, layer_id, ds, sampling: SamplingConfig, exit_add=None,
                  target_source="original"):
    shapes = infer_shapes(g_current)
    positions = sample_positions(len(ds), shapes[layer_id], sampling.per_image, sampling.seed)
    reference = g_original if target_source == "original" else g_current
    if target_source not in ("original", "current"):
        raise ValueError(f"target_source must be 'original' or 'current', got {target_source!r}")
    if exit_add is not None:
        return build_exit_sampleset(g_current, reference, layer_id, exit_add, ds, positions,
                                    sampling.batch_size, sampling.seed)
    return build_sampleset(g_current, reference, layer_id, ds, positions, batch_size=sampling.batch_size,
                           seed=sampling.seed)


def prune_layer(g_current: Graph, g_original: Graph, layer_id, budget, strategy="lasso", ds: Dataset = None,
                sampling: SamplingConfig = None, samples: SampleSet = None, exit_add=None, alternations=1,
                target_source="original"):
    """Prune ``layer_id`` to ``budget`` input channels.

    Either pass precomputed ``samples`` or a dataset to draw them from.
    ``exit_add`` names the Add node closing a residual block; the layer is
    then refit so that branch plus current shortcut match the reference
    block output.
    """
    nd = g_current.node(layer_id)
    if nd.kind != "Conv2D" or int(nd.attrs.get("groups", 1)) != 1:
        raise GraphError(f"{layer_id!r} is not a prunable (groups=1) Conv2D")
    c = nd.attrs["in_channels"]
    if not 1 <= budget <= c:
        raise ValueError(f"budget {budget} for {layer_id!r} outside [1, {c}]")
    if samples is None:
        if ds is None:
            raise ValueError("prune_layer needs either samples or a dataset")
        samples = layer_samples(g_current, g_original, layer_id, ds, sampling or SamplingConfig(), exit_add,
                                target_source)
    w = layer_weight_matrix(g_current, layer_id)
    rec, search, fit_err, hold_err = fit_layer(samples, w, budget, strategy, alternations)
    g_new, kind = rewrite_layer(g_current, layer_id, rec, samples.bias)
    result = LayerPruneResult(
        layer_id=layer_id, kept=list(rec.kept), strategy=strategy, rel_err=hold_err,
        lam=float(search.lam) if search else 0.0, padded=bool(search.padded) if search else False,
        c_before=c, rewrite=kind, target="block_exit" if exit_add else "layer", fit_err=fit_err,
        samples=samples.n_rows, lasso_steps=len(search.path) if search else 0,
        lasso_converged=bool(search.beta.converged) if search else True,
    )
    return result, g_new


# ---------------------------------------------------------------- schedules

def channel_source(g: Graph, conv_id):
    """First node upstream of ``conv_id`` that is not a channel-wise op."""
    cur = g.node(conv_id).inputs[0]
    while g.node(cur).kind in ("ReLU", "MaxPool", "AvgPool"):
        cur = g.node(cur).inputs[0]
    return cur


def prunable_layers(g: Graph):
    """Convs whose input channels can be reduced: groups=1, not fed by the network input."""
    out = []
    for nid in g.conv_ids():
        nd = g.nodes[nid]
        if int(nd.attrs.get("groups", 1)) != 1:
            continue
        if g.node(channel_source(g, nid)).kind == "Input":
            continue
        out.append(nid)
    return out


@dataclass
class PruneSchedule:
    per_layer: Dict[str, int]
    shallow_deep_ratio: float = 1.0
    frozen: List[str] = field(default_factory=list)
    boundary: Optional[str] = None
    target_speedup: float = 1.0
    predicted_speedup: float = 1.0
    deep_ratio: float = 1.0

    def to_dict(self):
        return {
            "per_layer": dict(self.per_layer),
            "shallow_deep_ratio": self.shallow_deep_ratio,
            "frozen": list(self.frozen),
            "boundary": self.boundary,
            "target_speedup": self.target_speedup,
            "predicted_speedup": self.predicted_speedup,
            "deep_ratio": self.deep_ratio,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            per_layer={str(k): int(v) for k, v in d.get("per_layer", {}).items()},
            shallow_deep_ratio=float(d.get("shallow_deep_ratio", 1.0)),
            frozen=list(d.get("frozen", [])),
            boundary=d.get("boundary"),
            target_speedup=float(d.get("target_speedup", 1.0)),
            predicted_speedup=float(d.get("predicted_speedup", 1.0)),
            deep_ratio=float(d.get("deep_ratio", 1.0)),
        )


def resized_structure(g: Graph, kept_counts: Dict[str, int]) -> Graph:
    """Weightless copy of ``g`` with channel counts as a schedule would leave them."""
    nodes = copy.deepcopy(g.nodes)
    order = list(g.topo_order)
    for layer_id, cnt in kept_counts.items():
        producer, _ = producer_chain(g, layer_id)
        nodes[layer_id].attrs["in_channels"] = int(cnt)
        if producer is not None:
            nodes[producer].attrs["out_channels"] = int(cnt)
        else:
            src = nodes[layer_id].inputs[0]
            sel = f"{layer_id}.select"
            nodes[sel] = LayerNode(sel, "ChannelSelect", [src], {"indices": list(range(int(cnt)))})
            nodes[layer_id].inputs = [sel]
            order.insert(order.index(layer_id), sel)
    return Graph(nodes, order, {})


def predict_speedup(g: Graph, input_shape: TensorShape, kept_counts):
    base = count_flops(g, input_shape)
    return speedup_ratio(base, count_flops(resized_structure(g, kept_counts), input_shape))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def make_schedule(g: Graph, input_shape: TensorShape = None, target_speedup=2.0, shallow_deep_ratio=1 / 1.5,
                  frozen: Sequence[str] = (), boundary=None, layers: Sequence[str] = None,
                  overrides: Dict[str, int] = None) -> PruneSchedule:
    """Per-layer kept counts hitting ``target_speedup`` in predicted FLOPs.

    Layers before ``boundary`` (shallow) keep ``shallow_deep_ratio`` times
    the fraction that deep layers keep. Both fractions are capped at 1.
    ``overrides`` pins individual layers to explicit counts.
    """
    if target_speedup < 1:
        raise ScheduleError("target speedup must be >= 1")
    if shallow_deep_ratio <= 0:
        raise ScheduleError("shallow_deep_ratio must be positive")
    input_shape = input_shape or g.input_shape()
    frozen = list(frozen)
    overrides = dict(overrides or {})
    candidates = list(layers) if layers is not None else prunable_layers(g)
    for f in frozen:
        if f not in g.nodes:
            raise ScheduleError(f"frozen layer {f!r} not in graph")
    layer_ids = [nid for nid in candidates if nid not in frozen]
    if boundary is not None and boundary not in g.nodes:
        raise ScheduleError(f"boundary layer {boundary!r} not in graph")
    pos = {nid: i for i, nid in enumerate(g.topo_order)}
    b_pos = pos[boundary] if boundary is not None else -1
    shallow = {nid for nid in layer_ids if pos[nid] < b_pos}
    in_c = {nid: g.nodes[nid].attrs["in_channels"] for nid in layer_ids}
    for nid, cnt in overrides.items():
        if nid not in in_c:
            raise ScheduleError(f"override for {nid!r}, which is not a schedulable layer")
        if not 1 <= cnt <= in_c[nid]:
            raise ScheduleError(f"override {cnt} for {nid!r} outside [1, {in_c[nid]}]")

    rho = float(shallow_deep_ratio)
    t_max = max(1.0, 1.0 / rho)

    def counts(t):
        r_deep, r_shallow = min(1.0, t), min(1.0, rho * t)
        out = {}
        for nid in layer_ids:
            r = r_shallow if nid in shallow else r_deep
            out[nid] = overrides.get(nid, min(in_c[nid], max(1, _round_half_up(r * in_c[nid]))))
        return out

    def speed(t):
        return predict_speedup(g, input_shape, counts(t))

    if target_speedup <= 1.0 or not layer_ids:
        t_best = t_max
    else:
        t_min = 1.0 / max(in_c.values()) / max(1.0, rho)
        lo_speed = speed(t_min * 0.5)
        if lo_speed < target_speedup:
            raise ScheduleError(
                f"target speedup {target_speedup} unreachable: at most {lo_speed:.3f} with one channel per layer")
        lo, hi = 0.0, t_max  # speed(lo) >= target > speed(hi) unless hi already suffices
        if speed(hi) >= target_speedup:
            lo = hi
        else:
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if speed(mid) >= target_speedup:
                    lo = mid
                else:
                    hi = mid
        cand = [t for t in (lo, hi) if t > 0] or [t_min]
        t_best = min(cand, key=lambda t: (abs(speed(t) - target_speedup), -t))
    kept = counts(t_best)
    return PruneSchedule(
        per_layer={nid: kept[nid] for nid in layer_ids},
        shallow_deep_ratio=rho, frozen=frozen, boundary=boundary, target_speedup=float(target_speedup),
        predicted_speedup=predict_speedup(g, input_shape, kept), deep_ratio=min(1.0, t_best),
    )


# ---------------------------------------------------------------- whole model

@dataclass
class PruneReport:
    layers: List[LayerPruneResult]
    flops_before: dict
    flops_after: dict
    achieved_speedup: float
    config: dict
    seed: object
    output_rel_err: Optional[float] = None
    predicted_speedup: Optional[float] = None

    def to_dict(self):
        return {
            "tool": "chanprune",
            "version": __version__,
            "flop_convention": FLOP_CONVENTION,
            "seed": self.seed,
            "config": self.config,
            "layers": [r.to_dict() for r in self.layers],
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "predicted_speedup": self.predicted_speedup,
            "achieved_speedup": self.achieved_speedup,
            "output_rel_err": self.output_rel_err,
        }

    def to_json(self):
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def exit_add_of(g: Graph, layer_id):
    """The Add node ``layer_id`` feeds directly and exclusively, if any."""
    cons = g.consumers(layer_id)
    if len(cons) == 1 and g.node(cons[0]).kind == "Add":
        return cons[0]
    return None


def output_error(g_a: Graph, g_b: Graph, ds: Dataset, batch_size=256):
    """Mean over images of the relative error between the two graphs' outputs."""
    out_a = forward_batched(g_a, ds.images, batch_size=batch_size)[g_a.output_id]
    out_b = forward_batched(g_b, ds.images, batch_size=batch_size)[g_b.output_id]
    if out_a.shape != out_b.shape:
        raise GraphError(f"output shapes differ: {out_a.shape} vs {out_b.shape}")
    errs = []
    for a, b in zip(out_a.astype(np.float64), out_b.astype(np.float64)):
        nb = np.linalg.norm(a)
        errs.append(np.linalg.norm(b - a) / nb if nb > 0 else np.linalg.norm(b - a))
    return float(np.mean(errs))


def prune_model(g: Graph, ds: Dataset, schedule: PruneSchedule, strategy="lasso", seed=0, per_image=10,
                target_source="original", multi_branch=False, alternations=1, batch_size=256, config=None,
                progress=None):
    """Prune every scheduled layer in topological order.

    X is always re-extracted from the partly pruned graph, so each refit
    compensates the error accumulated upstream.
    """
    unknown = [nid for nid in schedule.per_layer if nid not in g.nodes]
    if unknown:
        raise ScheduleError(f"schedule names unknown layers {unknown}")
    g_current = g
    results = []
    order = [nid for nid in g.topo_order if nid in schedule.per_layer]
    for idx, layer_id in enumerate(order):
        exit_add = exit_add_of(g_current, layer_id) if multi_branch else None
        sampling = SamplingConfig(per_image=per_image, seed=[int(seed), idx], batch_size=batch_size)
        res, g_current = prune_layer(
            g_current, g, layer_id, schedule.per_layer[layer_id], strategy, ds=ds, sampling=sampling,
            exit_add=exit_add, alternations=alternations, target_source=target_source)
        results.append(res)
        if progress is not None:
            progress(res)
    input_shape = TensorShape(1, *ds.images.shape[1:])
    before = count_flops(g, input_shape)
    after = count_flops(g_current, input_shape)
    report = PruneReport(
        layers=results, flops_before=before.to_dict(), flops_after=after.to_dict(),
        achieved_speedup=speedup_ratio(before, after), config=dict(config or {}), seed=seed,
        output_rel_err=output_error(g, g_current, ds, batch_size) if order else 0.0,
        predicted_speedup=schedule.predicted_speedup,
    )
    return g_current, report


# ---------------------------------------------------------------- residual blocks

@dataclass
class ResidualBlock:
    branch: List[str]  # conv ids along the residual branch, entry first
    add: str  # the Add joining branch and shortcut


def branch_budget_fractions(base, ratios=(2, 4, 3)):
    """Per-branch-layer kept fractions from a block-level base fraction.

    Scaled so that a base of 30% with ratios 2:4:3 keeps 40%, 80% and 60%.
    Fractions are capped at 1.
    """
    unit = base / 1.5
    return [min(1.0, unit * r) for r in ratios]


def branch_budgets(g: Graph, block: ResidualBlock, base, ratios=(2, 4, 3)):
    fr = branch_budget_fractions(base, ratios)
    return [max(1, min(g.node(l).attrs["in_channels"], _round_half_up(f * g.node(l).attrs["in_channels"])))
            for l, f in zip(block.branch, fr)]


def check_block(g: Graph, block: ResidualBlock):
    add = g.node(block.add)
    if add.kind != "Add":
        raise GraphError(f"block end {block.add!r} is a {add.kind}, not an Add")
    if block.branch[-1] not in add.inputs or g.consumers(block.branch[-1]) != [block.add]:
        raise GraphError(f"last branch layer {block.branch[-1]!r} must feed only {block.add!r}")
    for nid in block.branch:
        if g.node(nid).kind != "Conv2D":
            raise GraphError(f"branch member {nid!r} is not a Conv2D")


def prune_residual_block(g_current: Graph, g_original: Graph, block: ResidualBlock, budgets, ds: Dataset,
                         seed=0, per_image=10, strategy="lasso", batch_size=256):
    """Prune one residual branch: sampled entry, ordinary middle, corrected exit.

    The entry layer reads the block input, which the shortcut also uses, so
    its channel reduction becomes a ChannelSelect on the branch edge only.
    The exit layer is refit against the reference block output minus the
    current shortcut.
    """
    check_block(g_current, block)
    if len(budgets) != len(block.branch):
        raise ValueError("need one budget per branch layer")
    results = []
    for idx, (layer_id, budget) in enumerate(zip(block.branch, budgets)):
        exit_add = block.add if idx == len(block.branch) - 1 else None
        sampling = SamplingConfig(per_image=per_image, seed=[int(seed), idx], batch_size=batch_size)
        res, g_current = prune_layer(g_current, g_original, layer_id, budget, strategy, ds=ds,
                                     sampling=sampling, exit_add=exit_add)
        results.append(res)
    return g_current, results
