"""``recmem`` command line: probe campaigns, recommendation runs and reports.

Every subcommand writes its results under the output directory as JSON
(full detail) plus CSV (plot-ready), so later ``tiers``, ``scale-summary``
and ``report`` invocations work from files alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetParseError, load_movielens, popularity_tiers, dataset_summary, split_leave_n_out
from .evaluate import (
    EvalRun,
    IncompleteCoverageError,
    RankedListParseError,
    evaluate_baseline,
    evaluate_llm_as_recommender,
    flag_inconsistencies,
    sample_users,
    scale_summary,
)
from .llm_gateway import (
    CacheMissError,
    DecodingConfig,
    Gateway,
    GatewayConfigError,
    ModelEndpoint,
    OracleSpec,
    ProtocolError,
    StorageError,
    TransportError,
)
from .probe import CoverageReport, run_campaign, tier_counts
from .recsys import BASELINES, TrainingError
from .recsys.ease import NumericError
from .recsys.persist import ModelFormatError, save_model
from .report import TierReport, emit_report

log = logging.getLogger("recmem")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_TRANSPORT = 4
EXIT_PARTIAL = 5

PROBE_KINDS = {"items": "item", "users": "user", "interactions": "interaction"}
REC_MAX_TOKENS = 2048


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8", newline="\n")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


class Context:
    """Resolved configuration for one invocation."""

    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        if getattr(args, "dataset_dir", None):
            cfg.dataset_dir = Path(args.dataset_dir)
        if getattr(args, "out", None):
            cfg.output_dir = Path(args.out)
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        self._ds = None

    def opt(self, name, default=None):
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return self.cfg.campaign.get(name, default)

    @property
    def out(self) -> Path:
        return Path(self.cfg.output_dir)

    def dataset(self):
        if self._ds is None:
            self._ds = load_movielens(self.cfg.require_dataset())
        return self._ds

    def decoding(self, **defaults) -> DecodingConfig:
        values = {"seed": self.cfg.seed, **defaults, **self.cfg.decoding}
        try:
            return DecodingConfig(**values)
        except TypeError as exc:
            raise ConfigError(f"[decoding]: {exc}") from None

    def endpoint(self) -> ModelEndpoint:
        args = self.args
        if not args.model:
            raise ConfigError("--model is required")
        ep = dict(self.cfg.endpoints.get(args.model, {}))
        backend = args.backend or ep.get("backend", "http")
        cache = args.cache or ep.get("cache")
        base_url = args.base_url or ep.get("base_url")
        auth_env = args.auth_env or ep.get("auth_token_env")
        oracle = None
        if backend == "oracle":
            fraction = args.fraction if args.fraction is not None else ep.get("fraction", self.cfg.campaign.get("fraction"))
            if fraction is None:
                raise ConfigError("oracle backend needs --fraction")
            oracle = OracleSpec(
                float(fraction), self.dataset(), selection_seed=self.cfg.seed, split_ratio=float(self.opt("ratio", 0.8))
            )
        return ModelEndpoint(
            model_name=ep.get("model_name", args.model),
            backend=backend,
            base_url=base_url,
            auth_token_env=auth_env,
            cache_path=cache,
            oracle=oracle,
            timeout=float(ep.get("timeout", 60.0)),
        )


def _coverage_path(out: Path, model: str, kind: str) -> Path:
    return out / "coverage" / f"{_slug(model)}__{kind}.json"


def _load_coverage(out: Path) -> list[CoverageReport]:
    reports = []
    for path in sorted((out / "coverage").glob("*.json")):
        reports.extend(CoverageReport.from_dict(d) for d in _read_json(path)["coverage"])
    return reports


def _load_runs(out: Path) -> list[EvalRun]:
    runs = []
    for path in sorted((out / "runs").glob("*.json")):
        runs.extend(EvalRun.from_dict(d) for d in _read_json(path)["runs"])
    return runs


def cmd_probe(ctx: Context) -> int:
    kind = PROBE_KINDS[ctx.args.kind]
    ds = ctx.dataset()
    gateway = Gateway(ctx.endpoint())
    limit = ctx.opt("limit")
    report = run_campaign(
        kind,
        ds,
        gateway,
        ctx.decoding(),
        shots=int(ctx.opt("shots", 2)),
        seed=ctx.cfg.seed,
        limit=int(limit) if limit is not None else None,
        workers=int(ctx.opt("workers", 4)),
        partial=bool(ctx.opt("partial", False)),
        sliding=bool(ctx.opt("sliding", False)),
    )
    path = _coverage_path(ctx.out, report.model, kind)
    emit_report([report], "json", path)
    emit_report([report], "csv", path.with_suffix(".csv"))
    log.info("cache hits %d, misses %d", gateway.hits, gateway.misses)
    sys.stdout.write(path.with_suffix(".csv").read_text(encoding="utf-8"))
    return EXIT_PARTIAL if report.partial else EXIT_OK


def _split(ctx: Context):
    ds = ctx.dataset()
    return ds, split_leave_n_out(ds.ratings, float(ctx.opt("ratio", 0.8)), seed=ctx.cfg.seed)


def _save_run(ctx: Context, run: EvalRun) -> Path:
    path = ctx.out / "runs" / f"{_slug(run.model)}.json"
    emit_report([run], "json", path)
    emit_report([run], "csv", path.with_suffix(".csv"))
    sys.stdout.write(path.with_suffix(".csv").read_text(encoding="utf-8"))
    return path


def cmd_llm_rec(ctx: Context) -> int:
    ds, split = _split(ctx)
    gateway = Gateway(ctx.endpoint())
    n_sample = ctx.opt("sample_users")
    users = sample_users(split, int(n_sample), seed=ctx.cfg.seed) if n_sample else None
    run = evaluate_llm_as_recommender(
        ds, split, gateway, ctx.decoding(max_tokens=REC_MAX_TOKENS), users=users, workers=int(ctx.opt("workers", 4))
    )
    _save_run(ctx, run)
    log.info("unresolved titles %d, excluded users %d", run.unresolved, len(run.excluded))
    return EXIT_PARTIAL if run.partial else EXIT_OK


def cmd_baseline(ctx: Context) -> int:
    name = ctx.args.name
    ds, split = _split(ctx)
    if ctx.args.save_model and name not in ("ease", "bprmf"):
        raise ConfigError("--save-model supports ease and bprmf only")
    hyper = dict(ctx.cfg.baselines.get(name, {}))
    if name in ("random", "bprmf", "lightgcn"):
        hyper.setdefault("seed", ctx.cfg.seed)
    n_sample = ctx.opt("sample_users")
    users = sample_users(split, int(n_sample), seed=ctx.cfg.seed) if n_sample else None
    try:
        run = evaluate_baseline(ds, split, name, hyper, users=users)
    except TypeError as exc:
        raise ConfigError(f"[baselines.{name}]: {exc}") from None
    _save_run(ctx, run)
    if ctx.args.save_model:
        model, matrix = run.fitted
        save_model(model, ctx.args.save_model, matrix.item_ids, matrix.user_ids)
    return EXIT_OK


def cmd_tiers(ctx: Context) -> int:
    ds = ctx.dataset()
    tiers = popularity_tiers(ds.ratings, ds.items)
    _write_json(ctx.out / "tiers" / "summary.json", dataset_summary(ds, tiers))
    rows = [TierReport(r.model, tier_counts(r, tiers)) for r in _load_coverage(ctx.out) if r.kind == "item"]
    if not rows:
        log.warning("no item coverage reports under %s; wrote tier boundaries only", ctx.out / "coverage")
        return EXIT_OK
    emit_report(rows, "csv", ctx.out / "tiers" / "tier_coverage.csv")
    emit_report(rows, "json", ctx.out / "tiers" / "tier_coverage.json")
    sys.stdout.write((ctx.out / "tiers" / "tier_coverage.csv").read_text(encoding="utf-8"))
    return EXIT_OK


def _reported(pairs) -> dict[str, float]:
    out = {}
    for pair in pairs or []:
        model, sep, value = pair.rpartition("=")
        if not sep or not model:
            raise ConfigError(f"--reported expects MODEL=FRACTION, got {pair!r}")
        out[model] = float(value)
    return out


def cmd_scale_summary(ctx: Context) -> int:
    coverages: dict[str, dict[str, float]] = {}
    for r in _load_coverage(ctx.out):
        if r.total:
            coverages.setdefault(r.model, {})[r.kind] = r.coverage
    if not coverages:
        raise ConfigError(f"no coverage reports under {ctx.out / 'coverage'}")
    metrics = {run.model: run.metrics for run in _load_runs(ctx.out) if run.model in coverages}
    summary = scale_summary(coverages, metrics)
    flagged = flag_inconsistencies(summary, _reported(ctx.args.reported))
    emit_report([summary], "csv", ctx.out / "scale_summary.csv")
    doc = summary.to_dict()
    doc["flagged"] = flagged
    _write_json(ctx.out / "scale_summary.json", doc)
    sys.stdout.write((ctx.out / "scale_summary.csv").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_report(ctx: Context) -> int:
    coverage = _load_coverage(ctx.out)
    runs = _load_runs(ctx.out)
    if not coverage and not runs:
        raise ConfigError(f"nothing to report under {ctx.out}")
    formats = ("csv", "json") if ctx.args.format == "both" else (ctx.args.format,)
    for fmt in formats:
        if coverage:
            emit_report(coverage, fmt, ctx.out / f"coverage.{fmt}")
        if runs:
            emit_report(runs, fmt, ctx.out / f"metrics.{fmt}")
    partial = any(r.partial for r in coverage) or any(r.partial for r in runs)
    return EXIT_PARTIAL if partial else EXIT_OK


def _common(p: argparse.ArgumentParser, endpoint: bool = False, dataset: bool = True) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out", help="output directory (default: output_dir from config, else ./out)")
    p.add_argument("--seed", type=int, help="master seed (default 42)")
    if dataset:
        p.add_argument("--dataset-dir", help="directory holding movies.dat, users.dat, ratings.dat")
    if endpoint:
        p.add_argument("--model", help="model name; also selects [endpoints.<name>] from the config")
        p.add_argument("--backend", choices=("http", "replay", "oracle"))
        p.add_argument("--cache", help="JSONL response cache")
        p.add_argument("--base-url", help="OpenAI-compatible API root for the http backend")
        p.add_argument("--auth-env", help="name of the environment variable holding the API key")
        p.add_argument("--fraction", type=float, help="memorized fraction for the oracle backend")
        p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recmem", description="Probe LLM memorization of MovieLens-1M and evaluate recommenders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="run a memorization campaign")
    p.add_argument("kind", choices=sorted(PROBE_KINDS))
    _common(p, endpoint=True)
    p.add_argument("--limit", type=int, help="probe only the first N ids")
    p.add_argument("--shots", type=int)
    p.add_argument("--partial", action="store_true", default=None, help="record failed probes instead of aborting")
    p.add_argument("--sliding", action="store_true", default=None, help="probe every position of each history")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("llm-rec", help="evaluate an LLM as a recommender")
    _common(p, endpoint=True)
    p.add_argument("--sample-users", type=int)
    p.add_argument("--ratio", type=float)
    p.set_defaults(func=cmd_llm_rec)

    p = sub.add_parser("baseline", help="fit and evaluate a classical recommender")
    p.add_argument("name", choices=sorted(BASELINES))
    _common(p)
    p.add_argument("--sample-users", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--save-model", help="write the fitted model (ease, bprmf) to this file")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("tiers", help="popularity tiers and per-tier item coverage")
    _common(p)
    p.set_defaults(func=cmd_tiers)

    p = sub.add_parser("scale-summary", help="mean memorization and relative deltas between models")
    _common(p, dataset=False)
    p.add_argument("--reported", action="append", metavar="MODEL=FRACTION", help="published mean to check against")
    p.set_defaults(func=cmd_scale_summary)

    p = sub.add_parser("report", help="combine saved results into coverage and metrics tables")
    _common(p, dataset=False)
    p.add_argument("--format", choices=("csv", "json", "both"), default="both")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        ctx = Context(args, load_config(args.config))
        return args.func(ctx)
    except (ConfigError, GatewayConfigError, IncompleteCoverageError, FileNotFoundError) as exc:
        log.error("configuration: %s", exc)
        return EXIT_CONFIG
    except (DatasetParseError, RankedListParseError, ModelFormatError) as exc:
        log.error("parse: %s", exc)
        return EXIT_PARSE
    except (TransportError, ProtocolError, CacheMissError, StorageError) as exc:
        log.error("transport: %s", exc)
        return EXIT_TRANSPORT
    except (TrainingError, NumericError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
