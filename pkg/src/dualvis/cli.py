"""``dualvis`` command-line entry point.

Subcommands: plan, run, train, score, curve, judge. Settings resolve in the
order defaults < flags < config document. Every command that takes ``--out``
writes ``manifest.json`` there with the resolved config hash, seed, library
versions, and a sha256 per artifact; nothing in it depends on wall-clock time.

Exit codes: 0 success, 2 usage or config error, 3 runtime error, 4 judge
service error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from . import budget as bg
from . import evalkit as ev
from . import numerics as nx
from .encoders import GeometryError, dry_run_shapes
from .pipeline import FLAT, HIER, DualEncoderModel, ModelConfig, ShapeError, VocabError, decode_loss, fuse
from .sampler import EmptySubsetError, InsufficientFramesError, plan_frames
from . import training as tr

log = logging.getLogger("dualvis")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SERVICE = 0, 2, 3, 4
DEFAULT_SEED = 0

USAGE_ERRORS = (
    bg.ConfigError,
    bg.InvalidStageError,
    GeometryError,
    ShapeError,
    VocabError,
    InsufficientFramesError,
    EmptySubsetError,
    ev.RecordError,
    ev.KindError,
    ev.InputError,
    nx.SerializationError,
    FileNotFoundError,
    NotADirectoryError,
    KeyError,
    ValueError,
)
SERVICE_ERRORS = (ev.TransportError, ev.ServiceError, ev.JudgeParseError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# artifacts


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def versions() -> dict:
    return {
        "dualvis": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, resolved: dict, seed: int | None, files: list[str]) -> Path:
    manifest = {
        "command": command,
        "config": resolved,
        "config_hash": config_hash(resolved),
        "seed": seed,
        "versions": versions(),
        "outputs": {f: sha256_file(out / f) for f in sorted(files)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def make_out(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def budget_dict(cfg: bg.TokenBudgetConfig) -> dict:
    return dataclasses.asdict(cfg)


def read_document(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise bg.ConfigError(f"cannot parse {path}: {e}") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise bg.ConfigError(f"{path}: config document must be a mapping")
    return doc


# ---------------------------------------------------------------------------
# budget resolution shared by plan and run

SCALES = {
    "full": (bg.FULL_FLAT_GEOMETRY, bg.FULL_HIER_GEOMETRY),
    "toy": (bg.TOY_FLAT_GEOMETRY, bg.TOY_HIER_GEOMETRY),
}
TRIPLET_FLAGS = ("n_total", "n_hiera", "s_stage", "s_pool", "flat_pool")


def add_budget_flags(p: argparse.ArgumentParser, default_scale: str) -> None:
    p.add_argument("--config", help="YAML document; its budget keys override flags")
    p.add_argument(
        "--scale",
        choices=sorted(SCALES),
        default=None,
        help=f"encoder geometry preset (default: {default_scale})",
    )
    p.add_argument("--n-total", type=int, help="frames for the flat encoder (default 64)")
    p.add_argument("--n-hiera", type=int, help="frames for the hierarchical encoder (default 32)")
    p.add_argument("--s-stage", type=int, help="hierarchical stage to tap, 1-based (default 4)")
    p.add_argument("--s-pool", type=int, help="hierarchical pooling stride (default 2)")
    p.add_argument("--flat-pool", type=int, help="flat pooling stride (default 2)")
    p.add_argument("--precision", type=int, default=2, help="decimal places for the ratio (default 2)")


def resolve_budget(args, default_scale: str) -> bg.TokenBudgetConfig:
    geom_flat, geom_hier = SCALES[args.scale or default_scale]
    cfg = bg.TokenBudgetConfig(geom_flat=geom_flat, geom_hier=geom_hier)
    flags = {k: getattr(args, k) for k in TRIPLET_FLAGS if getattr(args, k) is not None}
    cfg = dataclasses.replace(cfg, **flags)
    if args.config:
        cfg = bg.load_config(args.config, cfg)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    cfg = resolve_budget(args, "full")
    out = make_out(args.out)
    resolved = {"budget": budget_dict(cfg), "budget_max_tokens": args.budget, "sweep": args.sweep}
    files = []
    if args.sweep or args.budget is not None:
        limit = args.budget if args.budget is not None else sys.maxsize
        found = bg.enumerate_configs(limit, cfg.geom_flat, cfg.geom_hier, cfg.n_total, cfg.flat_pool)
        if args.sweep:
            text = bg.to_csv(found)
            name = "sweep.csv"
        elif not found:
            text = f"no feasible config: the flat stream alone needs {bg.compute_budget(cfg).t_siglip:,} tokens\n"
            name = "plan.txt"
        else:
            best_cfg, best_rep = found[0]
            text = (
                f"{len(found)} feasible configs within {args.budget:,} tokens; most hierarchical tokens:\n"
                + bg.render_table(best_cfg, dataclasses.replace(best_rep, precision=args.precision))
            )
            name = "plan.txt"
    else:
        text = bg.render_table(cfg, bg.compute_budget(cfg, args.precision))
        name = "plan.txt"
    sys.stdout.write(text)
    if out:
        (out / name).write_text(text)
        files.append(name)
        if not args.sweep:
            rows = [(cfg, bg.compute_budget(cfg, args.precision))]
            (out / "plan.csv").write_text(bg.to_csv(rows))
            files.append("plan.csv")
        write_manifest(out, "plan", resolved, None, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def measured_report(cfg: bg.TokenBudgetConfig, fused, grid_flat: int, grid_hier: int, precision: int):
    """Token accounting read off the fused stream's provenance."""
    prov = fused.provenance

    def side(enc, grid, s_pool):
        sel = prov.encoder == enc
        if not sel.any():
            p = bg.pooled_side(grid, s_pool)
            return p, p
        return int(prov.row[sel].max()) + 1, int(prov.col[sel].max())

    def per_frame(enc, n):
        counts = {v for (e, _), v in prov.per_frame_counts().items() if e == enc}
        if len(counts) > 1:
            raise ShapeError(f"{enc} frames carry differing token counts: {sorted(counts)}")
        return counts.pop() if counts else None

    ph_f, pw_f = side(FLAT, grid_flat, cfg.flat_pool)
    ph_h, pw_h = side(HIER, grid_hier, cfg.s_pool)
    per_f = per_frame("flat", cfg.n_total) or bg.tokens_per_frame(ph_f, pw_f)
    per_h = per_frame("hier", cfg.n_hiera) or bg.tokens_per_frame(ph_h, pw_h)
    t_s, t_h = prov.count(FLAT), prov.count(HIER)
    if t_s + t_h != len(fused):
        raise ShapeError("fused stream holds tokens of unknown origin")
    if ph_f != pw_f or ph_h != pw_h:
        raise ShapeError("pooled grids are not square")
    return bg.TokenBudgetReport(
        grid_flat=grid_flat,
        grid_hier=grid_hier,
        pooled_flat=ph_f,
        pooled_hier=ph_h,
        per_frame_flat=per_f,
        per_frame_hier=per_h,
        t_siglip=t_s,
        t_hiera=t_h,
        ratio=t_s / t_h if t_h else float("inf"),
        precision=precision,
    )


def provenance_lines(fused) -> list[str]:
    lines = ["encoder  frame  tokens  row_tokens"]
    prov = fused.provenance
    for (enc, frame), n in prov.per_frame_counts().items():
        code = FLAT if enc == "flat" else HIER
        sel = (prov.encoder == code) & (prov.frame == frame)
        lines.append(f"{enc:<7}  {frame:>5}  {n:>6}  {int(prov.is_row_token[sel].sum()):>10}")
    return lines


def cmd_run(args) -> int:
    cfg = resolve_budget(args, "full" if args.dry_run else "toy")
    out = make_out(args.out)
    frames = args.frames or cfg.n_total
    resolved = {"budget": budget_dict(cfg), "frames": frames, "dry_run": args.dry_run, "loss": args.loss}
    files = []
    if args.dry_run:
        shapes = dry_run_shapes(cfg.geom_flat, cfg.geom_hier, cfg.n_total, cfg.n_hiera, cfg.s_stage)
        text = "".join(f"{k} encoder output: {tuple(v)}\n" for k, v in shapes.items())
    else:
        if cfg.geom_flat.input_size > 128 or cfg.geom_hier.input_size > 256:
            raise UsageError("full forward passes are limited to toy geometries; use --dry-run")
        torch.manual_seed(args.seed)
        model = DualEncoderModel(
            ModelConfig(geom_flat=cfg.geom_flat, geom_hier=cfg.geom_hier, seed=args.seed), s_stage=cfg.s_stage
        )
        size = max(cfg.geom_flat.input_size, cfg.geom_hier.input_size)
        ex = tr.synthetic_task("captioning", args.seed, n_examples=1, frames=frames, size=size)[0]
        with torch.no_grad():
            plan = plan_frames(frames, cfg.n_total, cfg.n_hiera)
            model.check_budget_config(cfg)
            flat_grids = model.flat_grids(ex.video[list(plan.flat_indices)])
            hier_grids = model.hier_grids(ex.video[list(plan.hier_indices)])
            fused = fuse(
                model.flat_stream_from_grids(flat_grids, plan.flat_indices, cfg.flat_pool),
                model.hier_stream(hier_grids, plan.hier_indices, cfg.s_pool),
            )
            g_flat = flat_grids.shape[1]
            g_hier = hier_grids.shape[1]
            rep = measured_report(cfg, fused, g_flat, g_hier, args.precision)
            text = bg.render_table(cfg, rep)
            text += "\n" + "\n".join(provenance_lines(fused)) + "\n"
            if args.loss:
                loss = decode_loss(model.decoder, fused, ex.text_ids, n_prompt=len(ex.prompt_ids))
                text += f"\ncaption loss: {loss.item():.6f}\n"
        if out:
            nx.save_checkpoint(out / "fused.dvck", {"tokens": fused.tokens})
            files.append("fused.dvck")
    sys.stdout.write(text)
    if out:
        (out / "run.txt").write_text(text)
        files.append("run.txt")
        write_manifest(out, "run", resolved, args.seed, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

STAGE_CHOICES = ("base",) + tuple(s.name for s in tr.build_stage_schedule())


def cmd_train(args) -> int:
    doc = read_document(args.config)
    cfg = tr.TRAINING_BUDGET
    if "budget" in doc:
        cfg = bg.config_from_mapping(doc["budget"], cfg)
    train_doc = doc.get("train") or {}
    unknown = set(train_doc) - {"steps", "learning_rate", "examples", "batch_size"}
    if unknown:
        raise bg.ConfigError(f"unknown train keys: {sorted(unknown)}")
    steps = train_doc.get("steps", args.steps)
    lr = train_doc.get("learning_rate", args.lr)
    examples = train_doc.get("examples", args.examples)
    batch = train_doc.get("batch_size", args.batch_size)
    out = make_out(args.out)

    torch.manual_seed(args.seed)
    model = DualEncoderModel(
        ModelConfig(geom_flat=cfg.geom_flat, geom_hier=cfg.geom_hier, seed=args.seed), s_stage=cfg.s_stage
    )
    store = nx.ParamStore(model)
    if args.init:
        store.load_state(nx.load_checkpoint(args.init))
    resolved = {
        "budget": budget_dict(cfg),
        "stage": args.stage,
        "steps": steps,
        "learning_rate": lr,
        "examples": examples,
        "batch_size": batch,
        "init_sha256": sha256_file(Path(args.init)) if args.init else None,
    }
    if args.stage == "base":
        data = tr.synthetic_task("captioning", args.seed, examples) + tr.synthetic_task("alignment", args.seed, examples)
        lossl = tr._train_loop(
            tr.BASE_SPEC, model, steps, [dataclasses.replace(cfg, n_hiera=0)], data, args.seed, batch, lr, 50
        )
    else:
        spec = tr.stage_by_name(args.stage)
        data = tr.synthetic_task(spec.task, args.seed, examples)
        lossl = tr.run_stage(spec, model, steps, cfg, data, seed=args.seed, batch_size=batch, learning_rate=lr)
    summary = lossl.summary()
    # exact parameter accounting for this toy model under the stage's mask
    summary["trainable_params"] = store.num_params(store.trainable_paths())
    summary["total_params"] = store.num_params()
    files = ["loss.csv", "checkpoint.dvck", "summary.json"]
    if out:
        lossl.to_csv(out / "loss.csv")
        nx.save_checkpoint(out / "checkpoint.dvck", store.state())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "train", resolved, args.seed, files)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# score / curve


def _thresholds(doc: dict, flag: str | None):
    raw = (doc.get("eval") or {}).get("thresholds")
    if raw is None and flag:
        raw = [t for t in flag.split(",") if t.strip()]
    if raw is None:
        return ev.MRA_THRESHOLDS
    try:
        ts = tuple(ev.Fraction(str(t).strip()) for t in raw)
    except (ValueError, ZeroDivisionError) as e:
        raise bg.ConfigError(f"bad MRA thresholds {raw!r}: {e}") from e
    if not ts or any(not 0 <= t < 1 for t in ts):
        raise bg.ConfigError("MRA thresholds must lie in [0, 1)")
    return ts


def cmd_score(args) -> int:
    doc = read_document(args.config)
    thresholds = _thresholds(doc, args.thresholds)
    records = ev.load_predictions(args.predictions)
    rep, md = ev.emit_report(records, thresholds, method=args.method)
    sys.stdout.write(md)
    out = make_out(args.out)
    if out:
        (out / "report.md").write_text(md)
        (out / "report.csv").write_text(rep.to_csv())
        (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        resolved = {
            "predictions_sha256": sha256_file(Path(args.predictions)),
            "thresholds": [str(t) for t in thresholds],
            "method": args.method,
        }
        write_manifest(out, "score", resolved, None, ["report.md", "report.csv", "report.json"])
    return EXIT_OK


def _curve_point(spec: str) -> tuple[float, ev.ScoreReport]:
    frac, sep, path = spec.partition("=")
    if not sep:
        raise UsageError(f"curve points look like FRACTION=REPORT.json, got {spec!r}")
    try:
        f = float(frac)
    except ValueError:
        raise UsageError(f"bad fraction {frac!r}") from None
    return f, ev.ScoreReport.from_dict(json.loads(Path(path).read_text()))


def cmd_curve(args) -> int:
    points = [_curve_point(p) for p in args.points]
    csv_text, chart = ev.emit_scaling_curve(points)
    sys.stdout.write(chart)
    out = make_out(args.out)
    if out:
        (out / "curve.csv").write_text(csv_text)
        (out / "curve.txt").write_text(chart)
        resolved = {"points": [[f, r.to_dict()] for f, r in points]}
        write_manifest(out, "curve", resolved, None, ["curve.csv", "curve.txt"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# judge


def cmd_judge(args) -> int:
    doc = read_document(args.config).get("judge") or {}
    items = ev.load_descriptions(args.descriptions)
    requests = [ev.JudgeRequest(vid, ev.build_judge_prompt(texts)) for vid, texts in items]
    client = ev.JudgeClient(
        endpoint=doc.get("endpoint", args.endpoint),
        model=doc.get("model", args.model),
        offline=True if args.offline else None,
        fixtures_dir=doc.get("fixtures", args.fixtures) or (Path(args.descriptions) if args.offline else None),
        max_attempts=args.attempts,
    )
    results = ev.judge_many(client, requests, max_in_flight=args.max_in_flight)
    means = ev.aggregate_judge_scores([s for _, s in results])
    lines = ["video_id," + ",".join(ev.JUDGE_KEYS)]
    lines += [vid + "," + ",".join(str(s[k]) for k in ev.JUDGE_KEYS) for vid, s in results]
    summary = "".join(f"model {k}: mean {means[k]:.4f} over {len(results)} videos\n" for k in ev.JUDGE_KEYS)
    sys.stdout.write(summary)
    out = make_out(args.out)
    if out:
        (out / "judge_scores.csv").write_text("\n".join(lines) + "\n")
        (out / "judge_means.json").write_text(json.dumps(means, indent=2, sort_keys=True) + "\n")
        client.write_audit(out / "audit.jsonl")
        resolved = {
            "endpoint": client.endpoint if not client.offline else None,
            "model": client.model,
            "offline": client.offline,
            "prompts_sha256": hashlib.sha256("".join(r.prompt for r in requests).encode()).hexdigest(),
        }
        write_manifest(out, "judge", resolved, None, ["judge_scores.csv", "judge_means.json", "audit.jsonl"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualvis", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v for info logs, -vv for debug")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="token budget for one config, or a sweep under a budget")
    add_budget_flags(p, "full")
    p.add_argument("--budget", type=int, help="max fused tokens; reports the feasible triplets")
    p.add_argument("--sweep", action="store_true", help="CSV of every feasible triplet (all if no --budget)")
    p.add_argument("--out", help="directory for plan.txt / sweep.csv / plan.csv and the manifest")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="forward a synthetic video and print the measured token accounting")
    add_budget_flags(p, "toy")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"model and video seed (default {DEFAULT_SEED})")
    p.add_argument("--frames", type=int, help="frames in the synthetic video (default n_total)")
    p.add_argument("--dry-run", action="store_true", help="shapes only, on the meta device (default scale: full)")
    p.add_argument("--loss", action="store_true", help="also print the caption loss of the random model")
    p.add_argument("--out", help="directory for run.txt, fused.dvck and the manifest")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="run one training stage on synthetic data")
    p.add_argument("--stage", choices=STAGE_CHOICES, required=True, help="base is the flat-only starting fit")
    p.add_argument("--steps", type=int, default=100, help="optimizer steps (default 100)")
    p.add_argument("--lr", type=float, help="override the stage's learning rate")
    p.add_argument("--examples", type=int, default=64, help="synthetic examples per task (default 64)")
    p.add_argument("--batch-size", type=int, default=4, help="examples per step (default 4)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"model, data and batch seed (default {DEFAULT_SEED})")
    p.add_argument("--init", help="checkpoint to start from (e.g. a previous stage's checkpoint.dvck)")
    p.add_argument("--config", help="YAML document with optional budget: and train: sections")
    p.add_argument("--out", required=True, help="directory for loss.csv, checkpoint.dvck, summary.json, manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a JSONL prediction file")
    p.add_argument("predictions", help="one JSON record per line: task, question_id, predicted, gold")
    p.add_argument("--thresholds", help="comma-separated MRA thresholds (default 0.50,...,0.95)")
    p.add_argument("--method", default="model", help="row label in the table")
    p.add_argument("--config", help="YAML document; eval: thresholds: overrides --thresholds")
    p.add_argument("--out", help="directory for report.md/.csv/.json and the manifest")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("curve", help="scaling curve from report.json files")
    p.add_argument("points", nargs="+", help="FRACTION=path/to/report.json, fractions strictly increasing")
    p.add_argument("--out", help="directory for curve.csv, curve.txt and the manifest")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("judge", help="score description sets with the judge prompt")
    p.add_argument("descriptions", help="directory of <video_id>/{A,B,C,D}.txt")
    p.add_argument(
        "--offline",
        action="store_true",
        help=f"read canned responses instead of calling out (also via {ev.OFFLINE_ENV}=1)",
    )
    p.add_argument("--fixtures", help="offline responses as <video_id>.txt (default: the descriptions dir)")
    p.add_argument("--endpoint", help=f"chat-completions URL (default ${ev.ENDPOINT_ENV} or {ev.DEFAULT_ENDPOINT})")
    p.add_argument("--model", default=ev.DEFAULT_JUDGE_MODEL, help="judge model name")
    p.add_argument("--attempts", type=int, default=3, help="tries per request (default 3)")
    p.add_argument("--max-in-flight", type=int, default=4, help="parallel requests (default 4)")
    p.add_argument("--config", help="YAML document; judge: endpoint/model/fixtures override flags")
    p.add_argument("--out", help="directory for judge_scores.csv, judge_means.json, audit.jsonl, manifest")
    p.set_defaults(func=cmd_judge)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SERVICE_ERRORS as e:
        print(f"dualvis: judge service error: {e}", file=sys.stderr)
        return EXIT_SERVICE
    except (UsageError, *USAGE_ERRORS) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"dualvis: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # anything else is a runtime failure
        print(f"dualvis: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
