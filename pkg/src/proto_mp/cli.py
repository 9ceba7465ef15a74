"""proto-mp command line: train, ablate, analyze, generate, gradcheck.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import apply_overrides, config_items, load_config
from .data import (DataError, export_embeddings, fmt, generate_planted_partition, load_dataset,
                   make_split, resolve_dataset, save_dataset)
from .graph import SEGMENTS, GraphError, edge_homophily, node_homophily, segment_by_homophily
from .metrics import segment_accuracy
from .report import write_report
from .training import (ConfigError, DivergenceError, ExperimentConfig, fit_seed, paired_t_test,
                       run_ablation, summarize)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4
FIXTURES = Path(__file__).parent / "fixtures"

log = logging.getLogger("proto_mp")


def _timestamp(t0: float) -> str:
    now = datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat()
    return f"{now} elapsed_s={time.perf_counter() - t0:.3f}"


def _dataset_path(ref: str, config_dir: Path | None = None) -> Path:
    if not ref:
        raise ConfigError("no dataset given (config [data] dataset or --dataset)")
    if config_dir is not None and not Path(ref).is_absolute() and (config_dir / ref).exists():
        return config_dir / ref
    try:
        return resolve_dataset(ref)
    except DataError:
        if (FIXTURES / ref).is_dir():
            return FIXTURES / ref
        raise


def _load(ref: str, config_dir: Path | None = None):
    return load_dataset(_dataset_path(ref, config_dir))


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def _config_section(cfg: ExperimentConfig) -> dict:
    return {key: text for _, key, text in config_items(cfg)}


def _prepare(args):
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, dataset=args.dataset)
    g = _load(cfg.dataset, Path(args.config).parent)
    return cfg, g


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg, g = _prepare(args)
    seeds = _parse_seeds(args.seeds) or [cfg.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sections = {"config": _config_section(cfg)}
    accs, base_accs = [], []
    for s in seeds:
        run_cfg = replace(cfg, seed=s)
        split_g = make_split(g, run_cfg.split_spec())
        res = fit_seed(g, run_cfg)
        accs.append(res.test_acc)
        sec = {
            "best_val_acc": fmt(res.best_val_acc),
            "test_acc": fmt(res.test_acc),
            "best_epoch": res.best_epoch,
            "epochs_run": res.epochs_run,
            "final_train_loss": fmt(res.train_loss[-1]),
            "param_checksum": res.param_checksum,
        }
        for k, v in res.attention.items():
            sec[f"attention.{k}"] = fmt(v)
        try:
            seg = segment_accuracy(res.predictions, split_g, split_g.mask("test"))
            for name in SEGMENTS:
                sec[f"segments.{name}.count"] = seg.counts[name]
                if name in seg.accuracies:
                    sec[f"segments.{name}.acc"] = fmt(seg.accuracies[name])
        except GraphError:
            pass
        sections[f"seed.{s}"] = sec
        if args.export_embeddings:
            export_embeddings(split_g, res.embeddings, out / f"embeddings_seed{s}.tsv")
        if args.compare_backbone:
            base_accs.append(fit_seed(g, run_cfg.variant("backbone")).test_acc)
        print(f"seed {s}: test_acc={res.test_acc:.4f} best_val={res.best_val_acc:.4f} epoch={res.best_epoch}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mean, std = summarize(accs)
    sections["aggregate"] = {"n_seeds": len(seeds), "test_acc_mean": fmt(mean), "test_acc_std": fmt(std)}
    if args.compare_backbone and len(seeds) >= 2:
        tt = paired_t_test(accs, base_accs)
        bmean, bstd = summarize(base_accs)
        sections["ttest"] = {"baseline": "backbone", "baseline_mean": fmt(bmean), "baseline_std": fmt(bstd),
                             "p_value": fmt(tt.p_value), "degenerate": str(tt.degenerate).lower()}
    path = write_report(out / "train_report.ini", "train", sections, _timestamp(t0))
    print(f"test accuracy {100 * mean:.2f} ± {100 * std:.2f} over {len(seeds)} seed(s); report: {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    cfg, g = _prepare(args)
    seeds = _parse_seeds(args.seeds) or [cfg.seed, cfg.seed + 1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = run_ablation(g, cfg, seeds, workers=args.workers)
    sections = {"config": _config_section(cfg)}
    print(f"{'variant':<10} {'mean':>8} {'std':>7} {'p vs backbone':>14}")
    for row in table.rows:
        sec = {"seeds": ",".join(str(s) for s in table.seeds),
               "accuracies": ",".join(fmt(a) for a in row.accuracies),
               "mean": fmt(row.mean), "std": fmt(row.std)}
        if row.variant != "backbone":
            sec["p_value"] = fmt(row.p_value) if row.p_value is not None else "nan"
            sec["degenerate"] = str(row.degenerate).lower()
        sections[f"variant.{row.variant}"] = sec
        p = "" if row.p_value is None else f"{row.p_value:.4g}"
        print(f"{row.variant:<10} {100 * row.mean:8.2f} {100 * row.std:7.2f} {p:>14}")
    path = write_report(Path(args.out) / "ablation_report.ini", "ablate", sections, _timestamp(t0))
    print(f"report: {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    ref = args.dataset_pos or args.dataset
    if not ref:
        raise ConfigError("analyze needs a dataset (positional or --dataset)")
    g = _load(ref)
    hom = node_homophily(g)
    ratios = hom.ratios[~np.isnan(hom.ratios)]
    seg = segment_by_homophily(ratios) if ratios.size else np.array([])
    counts = {s: int(np.sum(seg == s)) for s in SEGMENTS}
    body = {
        "name": g.name,
        "num_nodes": g.num_nodes,
        "num_edges": len(g.raw_edges),
        "num_undirected_edges": g.undirected_edge_count(),
        "feature_dim": g.feature_dim,
        "num_classes": g.num_classes,
        "mean_node_homophily": fmt(hom.mean),
        "edge_homophily": fmt(edge_homophily(g)),
        "isolated_nodes": int(np.isnan(hom.ratios).sum()),
    }
    body.update({f"segment.{s}": counts[s] for s in SEGMENTS})
    print(f"dataset {g.name}: V={g.num_nodes} E={body['num_edges']} (undirected pairs "
          f"{body['num_undirected_edges']}) d0={g.feature_dim} C={g.num_classes}")
    print(f"mean node homophily H_node = {hom.mean:.4f}; edge homophily = {float(body['edge_homophily']):.4f}")
    print("segments: " + ", ".join(f"{s}={counts[s]}" for s in SEGMENTS))
    if args.out:
        path = write_report(Path(args.out) / "analyze_report.ini", "analyze", {"dataset": body}, _timestamp(t0))
        print(f"report: {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        g = generate_planted_partition(args.n, args.classes, args.homophily, args.feature_dim, args.noise,
                                       seed=args.seed if args.seed is not None else 0,
                                       mean_degree=args.mean_degree)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    path = save_dataset(g, args.out, name=args.name or g.name)
    print(f"wrote {g.num_nodes} nodes, {g.undirected_edge_count()} edges "
          f"(edge homophily {edge_homophily(g):.3f}) to {path.parent}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck

    report = run_gradcheck(seed=args.seed if args.seed is not None else 0, programs=args.programs)
    for name, err in report.results:
        mark = "ok  " if err < report.tolerance else "FAIL"
        print(f"{mark} {name:<60} max_rel_err={err:.3e}")
    worst_name, worst = report.worst
    if report.passed:
        print(f"PASS: worst {worst_name} {worst:.3e} < {report.tolerance:g}")
        return EXIT_OK
    print("FAIL: " + ", ".join(n for n, _ in report.failures) + f" (worst {worst_name} {worst:.3e})")
    return EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proto-mp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--dataset", help="dataset name (under $PROTO_MP_DATA_DIR) or path")

    t = sub.add_parser("train", help="train one configuration over one or more seeds")
    common(t)
    t.add_argument("--export-embeddings", action="store_true")
    t.add_argument("--compare-backbone", action="store_true",
                   help="also train the plain backbone per seed and report a paired t-test")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="backbone / +P_N / +P_N+P_A over seeds")
    common(a)
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    an = sub.add_parser("analyze", help="dataset statistics and homophily segments")
    an.add_argument("dataset_pos", nargs="?", metavar="DATASET")
    an.add_argument("--dataset")
    an.add_argument("--out")
    an.set_defaults(func=cmd_analyze)

    gen = sub.add_parser("generate", help="write a planted-partition dataset")
    gen.add_argument("--n", type=int, default=400)
    gen.add_argument("--classes", type=int, default=2)
    gen.add_argument("--homophily", type=float, default=0.2)
    gen.add_argument("--feature-dim", type=int, default=16)
    gen.add_argument("--noise", type=float, default=1.0)
    gen.add_argument("--mean-degree", type=float, default=10.0)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--name")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every gradient path")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--programs", type=int, default=100)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
