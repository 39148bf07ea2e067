"""Command-line entry point: ``chanprune {fold-bn,prune,eval,flops,demo}``.

Data tables go to stdout, diagnostics to stderr. Every command exits 0 on
success and 1 on any error.
"""
import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import __version__
from .graph import load_graph, load_structure, parse_shape, save_graph
from .graph import fold_batchnorm
from .infer import FLOP_CONVENTION, count_flops, forward, forward_batched
from .pruner import STRATEGIES, PruneSchedule, make_schedule, output_error, prune_model
from .sampler import Dataset, load_dataset, save_dataset


class CliError(Exception):
    pass


def default_weights_path(model_path):
    root, _ = os.path.splitext(model_path)
    return root + ".pkw"


def _log(msg):
    print(msg, file=sys.stderr)


@dataclass
class RunConfig:
    model: str = None
    weights: Optional[str] = None
    data: str = None
    out_model: str = "pruned.json"
    out_weights: Optional[str] = None
    report: str = "report.json"
    figures_dir: Optional[str] = None
    seed: int = 0
    target_speedup: float = 2.0
    strategy: str = "lasso"
    shallow_deep_ratio: float = 1.0
    boundary: Optional[str] = None
    frozen: List[str] = field(default_factory=list)
    samples_per_image: int = 10
    image_count: Optional[int] = None
    target_source: str = "original"
    alternations: int = 1
    multi_branch: bool = False
    schedule: Optional[str] = None
    overrides: dict = field(default_factory=dict)
    batch_size: int = 256

    PATH_FIELDS = ("model", "weights", "data", "out_model", "out_weights", "report", "figures_dir", "schedule")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"cannot parse config {path}: {exc}") from None
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise CliError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**raw)
        base = os.path.dirname(os.path.abspath(path))
        for name in cls.PATH_FIELDS:
            val = getattr(cfg, name)
            if val and not os.path.isabs(val):
                setattr(cfg, name, os.path.join(base, val))
        return cfg

    def finalize(self):
        if not self.model or not self.data:
            raise CliError("config needs 'model' and 'data'")
        self.weights = self.weights or default_weights_path(self.model)
        self.out_weights = self.out_weights or default_weights_path(self.out_model)
        for p in (self.model, self.weights, self.data) + ((self.schedule,) if self.schedule else ()):
            if not os.path.exists(p):
                raise CliError(f"file not found: {p}")
        if self.strategy not in STRATEGIES:
            raise CliError(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if self.target_source not in ("original", "current"):
            raise CliError("target_source must be 'original' or 'current'")
        if self.samples_per_image < 1:
            raise CliError("samples_per_image must be >= 1")
        return self

    def echo(self):
        d = dataclasses.asdict(self)
        return {k: d[k] for k in sorted(d)}


def _need(path):
    if not os.path.exists(path):
        raise CliError(f"file not found: {path}")
    return path


def cmd_fold_bn(args):
    weights = args.weights or default_weights_path(args.model)
    g = load_graph(_need(args.model), _need(weights))
    out_weights = args.out_weights or default_weights_path(args.out_model)
    n_bn = sum(1 for nd in g.nodes.values() if nd.kind == "BatchNorm")
    folded = fold_batchnorm(g) if n_bn else g
    save_graph(folded, args.out_model, out_weights)
    if not n_bn:
        _log("no BN nodes; graph written unchanged")
    probe = np.random.default_rng(args.seed).normal(0, 1, (args.probe_batch,) + tuple(g.input_shape()[1:]))
    a = forward(g, probe)[g.output_id]
    b = forward(folded, probe)[folded.output_id]
    diff = float(np.max(np.abs(a.astype(np.float64) - b)))
    print(f"folded_bn_nodes\t{n_bn}")
    print(f"max_abs_diff\t{diff:.6g}")
    return 0


def _apply_overrides(cfg, args):
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


def _print_layer_table(report):
    print("layer\tc\tc_kept\trel_err\tlambda\tpadded\trewrite")
    for r in report.layers:
        print(f"{r.layer_id}\t{r.c_before}\t{r.c_after}\t{r.rel_err:.6g}\t{r.lam:.6g}\t{int(r.padded)}\t{r.rewrite}")
    print(f"achieved_speedup\t{report.achieved_speedup:.6g}")
    print(f"output_rel_err\t{report.output_rel_err:.6g}")


def cmd_prune(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args).finalize()
    g = load_graph(cfg.model, cfg.weights)
    ds = load_dataset(cfg.data)
    if cfg.image_count:
        ds = ds.head(cfg.image_count)
    if tuple(ds.images.shape[1:]) != tuple(g.input_shape()[1:]):
        raise CliError(f"dataset images {ds.images.shape[1:]} do not match model input {g.input_shape()[1:]}")
    if cfg.schedule:
        with open(cfg.schedule) as fh:
            schedule = PruneSchedule.from_dict(json.load(fh))
    else:
        schedule = make_schedule(g, g.input_shape(), cfg.target_speedup, cfg.shallow_deep_ratio, cfg.frozen,
                                 cfg.boundary, overrides=cfg.overrides)
    _log(f"schedule: {len(schedule.per_layer)} layers, predicted speedup {schedule.predicted_speedup:.4f}")
    pruned, report = prune_model(
        g, ds, schedule, strategy=cfg.strategy, seed=cfg.seed, per_image=cfg.samples_per_image,
        target_source=cfg.target_source, multi_branch=cfg.multi_branch, alternations=cfg.alternations,
        batch_size=cfg.batch_size, config=cfg.echo(),
        progress=lambda r: _log(f"pruned {r.layer_id}: {r.c_before} -> {r.c_after}, rel_err {r.rel_err:.4g}"))
    save_graph(pruned, cfg.out_model, cfg.out_weights)
    with open(cfg.report, "w") as fh:
        fh.write(report.to_json())
    _print_layer_table(report)
    if cfg.figures_dir:
        from .plots import render_report_figures

        for path in render_report_figures(json.loads(report.to_json()), cfg.figures_dir).values():
            _log(f"wrote {path}")
    return 0


def _per_layer_errors(ga, gb, ds, batch_size):
    common = [nid for nid in ga.topo_order if nid in gb.nodes and ga.nodes[nid].kind == gb.nodes[nid].kind
              and ga.nodes[nid].kind not in ("Input", "Output")]
    acts_a = forward_batched(ga, ds.images, capture=common, batch_size=batch_size)
    acts_b = forward_batched(gb, ds.images, capture=common, batch_size=batch_size)
    out = []
    for nid in common:
        a, b = acts_a[nid].astype(np.float64), acts_b[nid].astype(np.float64)
        if a.shape != b.shape:
            continue
        na = np.linalg.norm(a)
        out.append((nid, float(np.linalg.norm(b - a) / na) if na > 0 else float(np.linalg.norm(b - a))))
    return out


def cmd_eval(args):
    ga = load_graph(_need(args.model_a), _need(args.weights_a or default_weights_path(args.model_a)))
    gb = load_graph(_need(args.model_b), _need(args.weights_b or default_weights_path(args.model_b)))
    ds = load_dataset(_need(args.data))
    for g in (ga, gb):
        if tuple(ds.images.shape[1:]) != tuple(g.input_shape()[1:]):
            raise CliError(f"dataset images {ds.images.shape[1:]} do not match model input {g.input_shape()[1:]}")
    err = output_error(ga, gb, ds, args.batch_size)
    print("layer\trel_err")
    for nid, e in _per_layer_errors(ga, gb, ds, args.batch_size):
        print(f"{nid}\t{e:.6g}")
    print(f"mean_output_rel_err\t{err:.6g}")
    return 0


def cmd_flops(args):
    shape = parse_shape(args.input_shape)
    g = load_structure(_need(args.model))
    report = count_flops(g, shape)
    if args.json:
        print(report.to_json())
        return 0
    print(f"# {FLOP_CONVENTION}; input {shape}")
    print("layer\tkind\tflops")
    for nid, v in report.per_layer.items():
        print(f"{nid}\t{g.nodes[nid].kind}\t{v}")
    print(f"total\t\t{report.total}")
    return 0


def cmd_demo(args):
    """Write a small random model, dataset and config to try the other commands on."""
    from . import zoo

    os.makedirs(args.out, exist_ok=True)
    g = zoo.conv_chain([16, 16, 32, 32], input_shape=(3, 16, 16), seed=args.seed, batchnorm=True)
    save_graph(g, os.path.join(args.out, "model_bn.json"), os.path.join(args.out, "model_bn.pkw"))
    save_graph(fold_batchnorm(g), os.path.join(args.out, "model.json"), os.path.join(args.out, "model.pkw"))
    imgs = zoo.correlated_images(args.images, (3, 16, 16), rank=2, seed=args.seed + 1)
    save_dataset(Dataset(imgs), os.path.join(args.out, "data.pkt"))
    cfg = {"model": "model.json", "data": "data.pkt", "out_model": "pruned.json", "report": "report.json",
           "figures_dir": "figures", "target_speedup": 2.0, "strategy": "lasso", "seed": 0,
           "samples_per_image": 10, "shallow_deep_ratio": 1.0}
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")
    print(os.path.abspath(args.out))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="chanprune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fold-bn", help="merge BatchNorm layers into the preceding convolutions")
    f.add_argument("--model", required=True)
    f.add_argument("--weights")
    f.add_argument("--out-model", required=True)
    f.add_argument("--out-weights")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--probe-batch", type=int, default=4)
    f.set_defaults(func=cmd_fold_bn)

    pr = sub.add_parser("prune", help="prune a model to a target FLOP speed-up")
    pr.add_argument("--config")
    pr.add_argument("--model")
    pr.add_argument("--weights")
    pr.add_argument("--data")
    pr.add_argument("--out-model")
    pr.add_argument("--out-weights")
    pr.add_argument("--report")
    pr.add_argument("--figures-dir")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--target-speedup", type=float)
    pr.add_argument("--strategy", choices=STRATEGIES)
    pr.add_argument("--shallow-deep-ratio", type=float)
    pr.add_argument("--boundary")
    pr.add_argument("--frozen", nargs="*")
    pr.add_argument("--samples-per-image", type=int)
    pr.add_argument("--image-count", type=int)
    pr.add_argument("--target-source", choices=("original", "current"))
    pr.add_argument("--alternations", type=int)
    pr.add_argument("--multi-branch", action="store_true", default=None)
    pr.add_argument("--schedule")
    pr.add_argument("--batch-size", type=int)
    pr.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="compare two models' outputs on a dataset")
    e.add_argument("--model-a", required=True)
    e.add_argument("--weights-a")
    e.add_argument("--model-b", required=True)
    e.add_argument("--weights-b")
    e.add_argument("--data", required=True)
    e.add_argument("--batch-size", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    fl = sub.add_parser("flops", help="per-layer FLOP counts")
    fl.add_argument("--model", required=True)
    fl.add_argument("--input-shape", required=True, help="NxCxHxW")
    fl.add_argument("--json", action="store_true")
    fl.set_defaults(func=cmd_flops)

    d = sub.add_parser("demo", help="write a random model, dataset and config")
    d.add_argument("--out", default="demo")
    d.add_argument("--images", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _log(f"error: file not found: {exc.filename}")
    except (CliError, ValueError, OSError, ArithmeticError, KeyError) as exc:
        _log(f"error: {exc}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
