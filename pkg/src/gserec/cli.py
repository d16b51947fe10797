"""``gserec`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import plots
from .config import ABLATIONS, dump_config, load_config
from .data import (
    TEST,
    VALID,
    SynthConfig,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    validate_dataset,
)
from .graph import build_graph
from .metrics import MetricsReport
from .prefs import (
    HashEmbedder,
    HttpEmbedder,
    HttpSummaryClient,
    MockSummaryClient,
    PipelineError,
    PreferenceRecord,
    ReplayClient,
    embed_preference,
    load_prefs,
    preference_matrices,
    render_all,
    summarize_preferences,
    write_prefs_index,
)
from .quantizer import TrainedQuantizer, export_codes, read_codes, train_rqvae, write_codes
from .training import (
    SWEEP_PARAMS,
    Preferences,
    Recommender,
    dump_embeddings,
    evaluate_recommender,
    prepare_preferences,
    run_ablation,
    sparsity_grouping,
    sweep,
    train,
)

SUMMARIES = "summaries.jsonl"


class _CacheOnlyEmbedder:
    """Embedder for ``--client replay``: every vector must already be cached."""

    def __init__(self, embedder_id: str):
        self.embedder_id = embedder_id

    def embed(self, texts):
        raise PipelineError(f"{len(texts)} embeddings missing from the replay cache")


def _config(args):
    return load_config(args.config, args.set or ())


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def _summary_client(args):
    if args.client == "mock":
        return MockSummaryClient()
    if args.client == "http":
        return HttpSummaryClient()
    return ReplayClient(args.replay_dir or args.cache, args.replay_source)


def _embedder(args, dim: int):
    if args.client == "mock":
        return HashEmbedder(dim)
    if args.client == "http":
        return HttpEmbedder()
    return _CacheOnlyEmbedder(args.replay_source)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------


def cmd_data_validate(args) -> int:
    dataset = load_dataset(args.data)
    problems = validate_dataset(dataset)
    _print_json({"stats": dataset.stats(), "problems": problems})
    return 1 if problems else 0


def cmd_data_synth(args) -> int:
    cfg = SynthConfig(users=args.users, items=args.items, clusters=args.clusters, seed=args.seed)
    dataset = generate_synthetic_dataset(cfg)
    save_dataset(dataset, args.out)
    _print_json(dataset.stats())
    return 0


def cmd_prefs_summarize(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.data)
    result = summarize_preferences(
        _summary_client(args), render_all(dataset, cfg.prompt_window), args.cache,
        retries=cfg.summary_retries, workers=cfg.workers,
    )
    with (Path(args.cache) / SUMMARIES).open("w", encoding="utf-8") as fh:
        for r in sorted(result.records, key=lambda r: (r.user_id, r.kind)):
            fh.write(json.dumps({"user": r.user_id, "kind": r.kind, "summary": r.summary}) + "\n")
    _print_json({"summaries": len(result.records), "failures": len(result.failures), "calls": result.calls})
    return 1 if result.failures else 0


def cmd_prefs_embed(args) -> int:
    cfg = _config(args)
    records = []
    with (Path(args.cache) / SUMMARIES).open(encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            records.append(PreferenceRecord(obj["user"], obj["kind"], obj["summary"]))
    embedder = _embedder(args, cfg.embed_dim)
    records = embed_preference(records, embedder, args.cache)
    write_prefs_index(args.cache, records, embedder.embedder_id)
    _print_json({"embedded": len(records), "dim": int(records[0].embedding.shape[0]) if records else 0})
    return 0


def _load_matrices(prefs_dir):
    records = load_prefs(prefs_dir)
    n_users = max(r.user_id for r in records) + 1
    return preference_matrices(records, n_users)


def cmd_quantize_train(args) -> int:
    cfg = _config(args)
    v_s, v_r = _load_matrices(args.prefs)
    quantizer = train_rqvae(v_s, v_r, cfg.quantizer(), seed=cfg.seed)
    quantizer.save(args.out)
    _print_json(quantizer.trace[-1] if quantizer.trace else {})
    return 0


def cmd_quantize_export(args) -> int:
    quantizer = TrainedQuantizer.load(args.ckpt)
    v_s, v_r = _load_matrices(args.prefs)
    codes_s, codes_r = export_codes(quantizer, v_s, v_r)
    write_codes(args.out, codes_s, codes_r)
    return 0


def _graph(args):
    codes_s, codes_r = read_codes(args.codes)
    return build_graph(codes_s if args.channel == "s" else codes_r, args.channel)


def cmd_graph_build(args) -> int:
    graph = _graph(args)
    graph.dump(args.out)
    _print_json(graph.stats())
    return 0


def cmd_graph_stats(args) -> int:
    _print_json(_graph(args).stats())
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.data)
    codes_s, codes_r = read_codes(args.codes)
    result = train(dataset, codes_s, codes_r, cfg)
    result.recommender.save(args.out)
    if args.trace:
        Path(args.trace).write_text(json.dumps(result.trace, indent=2) + "\n", encoding="utf-8")
    if args.dump_embeddings:
        dump_embeddings(result.recommender, args.dump_embeddings)
    _print_json({"epochs": len(result.trace), "best_epoch": result.best_epoch, "stopped_early": result.stopped_early})
    return 0


def cmd_eval(args) -> int:
    rec = Recommender.load(args.ckpt)
    dataset = load_dataset(args.data)
    report = evaluate_recommender(rec, dataset, args.split, sparsity_grouping(dataset, rec.config))
    if args.out:
        report.save(args.out)
    print(report.to_json())
    return 0


def cmd_report(args) -> int:
    reports = {"baseline": MetricsReport.load(args.baseline)}
    for item in args.compare or ():
        name, _, path = item.partition("=")
        if not path:
            raise SystemExit(f"--compare expects NAME=REPORT, got {item!r}")
        reports[name] = MetricsReport.load(path)
    if args.data:
        cfg = _config(args)
        dataset = load_dataset(args.data)
        grouping = sparsity_grouping(dataset, cfg)
        if grouping is not None:
            plots.write_group_sizes(args.out, dataset, grouping)
    print(plots.write_improvements(args.out, reports))
    return 0


def _preferences(args, cfg, dataset):
    if args.prefs:
        v_s, v_r = _load_matrices(args.prefs)
        return Preferences(v_s, v_r)
    return prepare_preferences(dataset, cfg)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.data)
    toggles = [t for t in (args.toggles or "").split(",") if t]
    reports = run_ablation(dataset, cfg, toggles, prefs=_preferences(args, cfg, dataset))
    out = Path(args.out)
    for name, report in reports.items():
        report.save(out / f"{name}.json")
    grouping = sparsity_grouping(dataset, cfg)
    if grouping is not None:
        plots.write_group_sizes(out, dataset, grouping)
    if len(reports) > 1:
        plots.write_improvements(out, reports)
    _print_json({name: r.overall for name, r in reports.items()})
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.data)
    grid = [float(x) for x in args.grid.split(",") if x.strip()]
    points = sweep(dataset, cfg, args.param, grid, prefs=_preferences(args, cfg, dataset))
    out = Path(args.out)
    for p in points:
        p.report.save(out / f"{args.param}={p.value!r}.json")
    rows = [p.row() for p in points]
    plots.write_sweep(out, args.param, rows)
    _print_json(rows)
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(_config(args)))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gserec", description="Search-enhanced recommendation with user-code graphs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset utilities").add_subparsers(dest="action", required=True)
    p = data.add_parser("validate")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_data_validate)
    p = data.add_parser("synth")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data_synth)

    prefs = sub.add_parser("prefs", help="preference summaries and embeddings").add_subparsers(dest="action", required=True)
    for name, func in (("summarize", cmd_prefs_summarize), ("embed", cmd_prefs_embed)):
        p = prefs.add_parser(name)
        if name == "summarize":
            p.add_argument("--data", required=True)
        p.add_argument("--cache", required=True, help="cache / prefs directory")
        p.add_argument("--client", choices=("http", "mock", "replay"), default="mock")
        p.add_argument("--replay-dir", help="recorded cache to replay (defaults to --cache)")
        p.add_argument("--replay-source", default="mock", help="client id the replay cache was recorded with")
        _add_config_flags(p)
        p.set_defaults(func=func)

    quant = sub.add_parser("quantize", help="RQ-VAE training and code export").add_subparsers(dest="action", required=True)
    p = quant.add_parser("train")
    p.add_argument("--prefs", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_quantize_train)
    p = quant.add_parser("export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prefs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize_export)

    graph = sub.add_parser("graph", help="user-code graphs").add_subparsers(dest="action", required=True)
    for name, func in (("build", cmd_graph_build), ("stats", cmd_graph_stats)):
        p = graph.add_parser(name)
        p.add_argument("--codes", required=True)
        p.add_argument("--channel", choices=("s", "r"), required=True)
        if name == "build":
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train the recommender")
    p.add_argument("--data", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--dump-embeddings", help="write propagated tables to this .npz")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=(VALID, TEST), default=TEST)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="per-group relative improvements between reports")
    p.add_argument("--baseline", required=True)
    p.add_argument("--compare", action="append", metavar="NAME=REPORT")
    p.add_argument("--data", help="dataset, for fig1_groups.csv")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="baseline plus one run per ablation toggle")
    p.add_argument("--data", required=True)
    p.add_argument("--toggles", default="", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    p.add_argument("--prefs", help="prefs directory (default: mock summaries)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over one loss weight")
    p.add_argument("--data", required=True)
    p.add_argument("--param", choices=tuple(SWEEP_PARAMS), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--prefs")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("config", help="print the effective configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
