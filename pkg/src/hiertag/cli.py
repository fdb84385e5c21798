"""Command-line interface.

Typical session::

    hiertag generate --hierarchy h.json --n 2000 --d 16 --seed 1 --out data/
    hiertag split --data data/ --seed 0 --out splits/
    hiertag train --data splits/ --variant resatt --seeds 3 --out runs/
    hiertag eval --runs runs/ --data splits/
    hiertag report --runs runs/ --out table
    hiertag export-attention --checkpoint runs/resatt/seed0/checkpoint.npz \\
        --data splits/test --ids s0001,s0002 --out attention/

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
input files).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from . import data, heads, trainer
from .errors import HierarchyMismatch, HierTagError, IntegrityError, MissingFile, VariantMismatch
from .heads import Variant
from .hierarchy import load_hierarchy
from .metrics import LEVELS, METRIC_NAMES, MetricsReport

log = logging.getLogger("hiertag")

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunManifest:
    variant: str
    lambda_weight: float
    seed: int
    config: dict
    config_hash: str
    dataset_fingerprint: str
    checkpoint_path: str
    checkpoint_sha256: str
    traces: dict
    metrics_path: Optional[str] = None
    metrics_sha256: Optional[str] = None

    def write(self, run_dir: Path) -> None:
        (run_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        """Load and re-verify every recorded hash."""
        m = cls(**json.loads((run_dir / MANIFEST).read_text()))
        if config_hash(m.config) != m.config_hash:
            raise IntegrityError(f"{run_dir}: config hash mismatch")
        if sha256_file(run_dir / m.checkpoint_path) != m.checkpoint_sha256:
            raise IntegrityError(f"{run_dir}: checkpoint hash mismatch")
        if m.metrics_path is not None and sha256_file(run_dir / m.metrics_path) != m.metrics_sha256:
            raise IntegrityError(f"{run_dir}: metrics hash mismatch")
        return m

    @property
    def complete(self) -> bool:
        return self.metrics_path is not None


def find_runs(root: Path) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob(MANIFEST))


def split_fingerprint(train_set, val_set) -> str:
    return hashlib.sha256((train_set.fingerprint() + val_set.fingerprint()).encode()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def _load_split(root: Path, name: str) -> data.Dataset:
    path = Path(root) / name
    if not path.is_dir():
        raise UsageError(f"{path} is not a dataset directory (run `hiertag split` first)")
    return data.load_dataset(path)


def cmd_generate(args) -> int:
    if not Path(args.hierarchy).is_file():
        raise UsageError(f"hierarchy file {args.hierarchy} not found")
    h = load_hierarchy(args.hierarchy)
    cfg = data.SynthConfig(args.n, args.d, h, args.noise, args.mask_rate, args.seed)
    out = data.save_dataset(data.generate(cfg), args.out)
    log.info("wrote %d samples to %s", args.n, out)
    return 0


def cmd_split(args) -> int:
    ds = data.load_dataset(args.data)
    rest, test = data.stratified_split(ds, args.test_fraction, seed=args.seed)
    train_set, val_set = data.stratified_split(rest, args.val_fraction, seed=args.seed + 1)
    out = Path(args.out)
    for name, part in zip(SPLITS, (train_set, val_set, test)):
        data.save_dataset(part, out / name)
    log.info("split %d samples: train=%d val=%d test=%d", len(ds), len(train_set), len(val_set), len(test))
    return 0


def _train_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig.from_json(args.config) if args.config else trainer.TrainConfig()
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("max_lr", "max_lr"),
                      ("warmup_epochs", "warmup_epochs"), ("weight_decay", "weight_decay")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if args.epochs is not None and args.warmup_epochs is None:
        # short runs: keep the default warmup from exceeding the epoch count
        overrides["warmup_epochs"] = min(cfg.warmup_epochs, args.epochs)
    if args.hidden is not None:
        overrides["hidden"] = tuple(int(w) for w in args.hidden.split(",") if w)
    if args.lambda_weight is not None:
        overrides["lambda_weight"] = args.lambda_weight
    if args.lambda_grid is not None:
        overrides["lambda_grid"] = tuple(float(v) for v in args.lambda_grid.split(","))
    if args.seed_list is not None:
        overrides["seeds"] = tuple(int(v) for v in args.seed_list.split(","))
    elif args.seeds is not None:
        overrides["seeds"] = tuple(range(args.seed, args.seed + args.seeds))
    return replace(cfg, **overrides)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    variant = Variant.parse(args.variant)
    cfg = _train_config(args)
    train_set, val_set = _load_split(args.data, "train"), _load_split(args.data, "val")
    fingerprint = split_fingerprint(train_set, val_set)
    search = args.lambda_weight is None and trainer.uses_coarse_loss(variant)
    for seed in cfg.seeds:
        seed_cfg = replace(cfg, seed=seed)
        run_dir = Path(args.out) / variant.value / f"seed{seed}"
        (run_dir / "traces").mkdir(parents=True, exist_ok=True)
        if search:
            grid = trainer.grid_search(variant, train_set, val_set, seed_cfg)
            runs, best = grid.runs, grid.best
        else:
            best = trainer.train(trainer.fresh_model(variant, train_set, seed_cfg), train_set, val_set, seed_cfg)
            runs = {best.lambda_weight: best}
        traces = {}
        for lam, res in sorted(runs.items()):
            name = f"traces/lambda_{lam:.2f}.json"
            _write_json(run_dir / name, {
                "variant": variant.value, "seed": seed, "lambda": lam, "best_epoch": res.best_epoch,
                "best_val_fine_loss": res.best_val_loss, "epochs": res.trace_dicts(),
            })
            traces[f"{lam:.2f}"] = name
        final_cfg = replace(seed_cfg, lambda_weight=best.lambda_weight).to_dict()
        heads.save_checkpoint(best.model, run_dir / "checkpoint.npz",
                              extra={"lambda": best.lambda_weight, "seed": seed, "config": final_cfg})
        RunManifest(variant.value, best.lambda_weight, seed, final_cfg, config_hash(final_cfg), fingerprint,
                    "checkpoint.npz", sha256_file(run_dir / "checkpoint.npz"), traces).write(run_dir)
        log.info("%s seed %d: lambda=%.2f best epoch %d val fine BCE %.5f", variant.value, seed,
                 best.lambda_weight, best.best_epoch, best.best_val_loss)
    return 0


def cmd_eval(args) -> int:
    val_set, test_set = _load_split(args.data, "val"), _load_split(args.data, "test")
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint {ckpt} not found")
        targets = [(ckpt.parent, ckpt.name)]
    else:
        targets = [(d, None) for d in find_runs(args.runs)]
    if not targets:
        raise UsageError(f"no runs found under {args.runs}")
    rows = []
    for run_dir, ckpt_name in targets:
        manifest = RunManifest.read(run_dir) if (run_dir / MANIFEST).is_file() else None
        ckpt_path = run_dir / (manifest.checkpoint_path if manifest else ckpt_name)
        model, meta = heads.load_checkpoint(ckpt_path, hierarchy=test_set.hierarchy)
        thresholds, report = trainer.evaluate_model(model, val_set, test_set)
        (run_dir / "metrics.json").write_text(report.to_json())
        (run_dir / "metrics.csv").write_text(report.to_csv())
        _write_json(run_dir / "thresholds.json", {k: v.tolist() for k, v in thresholds.items()})
        if manifest is not None:
            manifest.metrics_path = "metrics.json"
            manifest.metrics_sha256 = sha256_file(run_dir / "metrics.json")
            manifest.write(run_dir)
            rows.append(_seed_row(manifest.variant, manifest.seed, manifest.lambda_weight, report))
        else:
            extra = meta.get("extra") or {}
            rows.append(_seed_row(model.variant.value, extra.get("seed"), extra.get("lambda"), report))
    out = Path(args.out) if args.out else (Path(args.runs) if args.runs else targets[0][0])
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "per_seed.csv", rows)
    log.info("evaluated %d runs; per-seed metrics in %s", len(rows), out / "per_seed.csv")
    return 0


def _seed_row(variant: str, seed, lam, report: MetricsReport) -> dict:
    row = {"variant": variant, "seed": seed, "lambda": lam}
    for lvl in LEVELS:
        for metric in METRIC_NAMES:
            row[f"{lvl}_{metric}"] = report.macro(lvl, metric)
    return row


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


VARIANT_ORDER = [v.value for v in Variant]
COLUMNS = [f"{lvl}_{m}" for lvl in LEVELS for m in METRIC_NAMES]


def aggregate_table(rows: list[dict]) -> list[dict]:
    """Mean over seeds per variant, rows in a fixed method order."""
    by_variant: dict[str, list[dict]] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r)
    table = []
    for v in sorted(by_variant, key=VARIANT_ORDER.index):
        runs = by_variant[v]
        entry = {"method": v, "seeds": len(runs)}
        for col in COLUMNS:
            vals = [r[col] for r in runs if r[col] is not None]
            entry[col] = float(np.mean(vals)) if vals else None
        table.append(entry)
    return table


def table_markdown(table: list[dict]) -> str:
    lines = [
        "| Method | Seeds | Fine ROC-AUC | Fine PR-AUC | Fine F1 | Coarse ROC-AUC | Coarse PR-AUC | Coarse F1 |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for e in table:
        cells = ["-" if e[c] is None else f"{100 * e[c]:.1f}" for c in COLUMNS]
        lines.append(f"| {e['method']} | {e['seeds']} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = []
    for run_dir in find_runs(args.runs):
        manifest = RunManifest.read(run_dir)
        if not manifest.complete:
            log.warning("%s has not been evaluated; skipping", run_dir)
            continue
        report = MetricsReport.from_dict(json.loads((run_dir / manifest.metrics_path).read_text()))
        rows.append(_seed_row(manifest.variant, manifest.seed, manifest.lambda_weight, report))
    if not rows:
        raise UsageError(f"no evaluated runs under {args.runs}")
    rows.sort(key=lambda r: (VARIANT_ORDER.index(r["variant"]), r["seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "per_seed.csv", rows)
    table = aggregate_table(rows)
    _write_rows(out / "table.csv", table)
    (out / "table.md").write_text(table_markdown(table))
    sys.stdout.write(table_markdown(table))
    return 0


# ---------------------------------------------------------------------------
# attention maps


def round_columns(att: np.ndarray, decimals: int = 6) -> np.ndarray:
    """Integer micro-units per cell, rounded so every column sums to exactly 10**decimals.

    Plain rounding can leave a column off by up to F/2 units; the largest-remainder
    method keeps each cell within one unit of its true value and the sum exact.
    """
    scale = 10 ** decimals
    raw = np.asarray(att, dtype=np.float64) * scale
    units = np.floor(raw).astype(np.int64)
    for c in range(raw.shape[1]):
        short = scale - int(units[:, c].sum())
        order = np.argsort(-(raw[:, c] - units[:, c]), kind="stable")
        units[order[:short], c] += 1
    return units


def attention_csv(att: np.ndarray, fine_tags, coarse_tags) -> str:
    units = round_columns(att)
    lines = ["fine_tag," + ",".join(coarse_tags)]
    for f, name in enumerate(fine_tags):
        lines.append(name + "," + ",".join(f"{u // 10**6}.{u % 10**6:06d}" for u in units[f]))
    return "\n".join(lines) + "\n"


def attention_svg(att: np.ndarray, p_fine: np.ndarray, p_coarse: np.ndarray, fine_tags, coarse_tags,
                  title: str = "") -> str:
    """Heatmap with coarse predictions on top and fine probabilities by the row labels."""
    cell, left, top = 64, 190, 96
    F, C = att.shape
    width, height = left + C * cell + 20, top + F * cell // 2 + 20
    rh = cell // 2
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="8" y="18" font-weight="bold">{escape(title)}</text>')
    for c, name in enumerate(coarse_tags):
        x = left + c * cell + cell / 2
        out.append(f'<text class="coarse" x="{x:.1f}" y="{top - 30}" text-anchor="middle">{escape(name)}</text>')
        out.append(f'<text class="coarse-prob" x="{x:.1f}" y="{top - 12}" text-anchor="middle">'
                   f'{100 * p_coarse[c]:.1f}%</text>')
    for f, name in enumerate(fine_tags):
        y = top + f * rh
        out.append(f'<text class="fine" x="{left - 8}" y="{y + rh / 2 + 4:.1f}" text-anchor="end">'
                   f'{escape(name)} ({100 * p_fine[f]:.1f}%)</text>')
        for c in range(C):
            w = float(att[f, c])
            shade = int(round(255 * (1.0 - w)))
            ink = "white" if w > 0.5 else "black"
            out.append(f'<rect class="cell" data-fine="{escape(name)}" data-coarse="{escape(coarse_tags[c])}" '
                       f'data-weight="{w:.6f}" x="{left + c * cell}" y="{y}" width="{cell}" height="{rh}" '
                       f'fill="rgb({shade},{shade},255)" stroke="#ccc"/>')
            out.append(f'<text x="{left + c * cell + cell / 2:.1f}" y="{y + rh / 2 + 4:.1f}" '
                       f'text-anchor="middle" fill="{ink}">{100 * w:.0f}%</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_export_attention(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    model, _ = heads.load_checkpoint(ckpt)
    if model.variant is not Variant.RESATT:
        raise VariantMismatch(f"attention maps need a resatt checkpoint, got {model.variant.value}")
    ds = data.load_dataset(args.data)
    if ds.hierarchy.fingerprint() != model.hierarchy.fingerprint():
        raise HierarchyMismatch(f"{args.data} uses a different hierarchy than {ckpt}")
    wanted = [s for s in args.ids.split(",") if s] if args.ids else list(ds.ids[: args.limit])
    index = {sid: i for i, sid in enumerate(ds.ids)}
    missing = [s for s in wanted if s not in index]
    if missing:
        raise UsageError(f"unknown sample ids: {missing}")
    rows = [index[s] for s in wanted]
    pred = heads.predict(model, ds.features[rows])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = model.hierarchy
    for k, sid in enumerate(wanted):
        (out / f"{sid}.csv").write_text(attention_csv(pred.attention[k], h.fine_tags, h.coarse_tags))
        (out / f"{sid}.svg").write_text(attention_svg(pred.attention[k], pred.p_fine[k], pred.p_coarse[k],
                                                      h.fine_tags, h.coarse_tags, title=sid))
    log.info("wrote %d attention maps to %s", len(wanted), out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiertag", description="Hierarchical multi-label tagging experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--hierarchy", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--d", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--mask-rate", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="stratified train/val/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--val-fraction", type=float, default=0.15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one variant over seeds (and the lambda grid)")
    t.add_argument("--data", required=True, help="split root with train/ and val/")
    t.add_argument("--variant", required=True, choices=[v.value for v in Variant] + ["gmp", "gap", "lp", "sdt"])
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--lambda", dest="lambda_weight", type=float,
                   help="fixed fine-level weight; omit to grid-search")
    t.add_argument("--lambda-grid")
    t.add_argument("--seed", type=int, default=0, help="first seed when --seeds is a count")
    t.add_argument("--seeds", type=int, help="number of consecutive seeds")
    t.add_argument("--seed-list", help="comma-separated seeds")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-lr", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--hidden", help="comma-separated encoder widths, e.g. 128")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="tune thresholds on val, report on test")
    e.add_argument("--data", required=True, help="split root with val/ and test/")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--runs")
    src.add_argument("--checkpoint")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate evaluated runs into a method table")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("export-attention", help="attention maps of a resatt checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True, help="dataset directory holding the samples")
    a.add_argument("--ids", help="comma-separated sample ids")
    a.add_argument("--limit", type=int, default=4, help="first N samples when --ids is omitted")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, MissingFile, FileNotFoundError) as exc:
        print(f"hiertag {args.command}: {exc}", file=sys.stderr)
        return 2
    except (HierTagError, ValueError, OSError) as exc:
        print(f"hiertag {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
