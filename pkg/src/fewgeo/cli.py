"""Command-line entry points: synth, preprocess, train, ablate.

Every command is replayable: `train` emits a run manifest that can be fed
back as `--config` to reproduce the metric files byte-identically. No
command touches the network, and outputs stay under --out.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import torch

from .config import (
    ConfigError,
    RunConfig,
    load_run_config,
    override_config,
    run_config_from_dict,
    run_config_to_dict,
)
from .corpus import (
    filter_minority_classes,
    load_dataset,
    load_split_manifest,
    make_shot_subsets,
    make_split,
    save_split_manifest,
    stable_seed,
)
from .eval import EvalReport, plot_accuracy_vs_shots, report_text_table, write_report_json
from .geo_prompt import TEMPLATE_BANK, split_template
from .synth import write_corpus
from .trainer import RunResult, build_run_manifest, dataset_digest, run_fewshot, run_zeroshot

ALL_SHOTS = tuple(range(1, 9))


def _write_json(obj: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(obj, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _digest_with_cache(path: str) -> str:
    """sha256 of the dataset, memoized under $FEWGEO_CACHE_DIR when set."""
    cache_dir = os.environ.get("FEWGEO_CACHE_DIR")
    if not cache_dir:
        return dataset_digest(path)
    stat = os.stat(path)
    key = f"{os.path.abspath(path)}|{stat.st_mtime_ns}|{stat.st_size}"
    cache_file = Path(cache_dir) / "digests.json"
    memo = {}
    if cache_file.exists():
        memo = json.loads(cache_file.read_text(encoding="utf-8"))
    if key not in memo:
        memo[key] = dataset_digest(path)
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(memo, indent=2, sort_keys=True), encoding="utf-8")
    return memo[key]


def _prepare_data(cfg: RunConfig, shots: tuple[int, ...]):
    users, labels = load_dataset(cfg.dataset_path)
    users, labels = filter_minority_classes(users, labels, cfg.split.min_count)
    if cfg.split.manifest:
        split = load_split_manifest(cfg.split.manifest)
    else:
        split = make_split(users, cfg.split.ratios, cfg.split.global_seed, cfg.split.dev_cap)
        split = make_shot_subsets(split, users, shots, cfg.split.shot_seeds)
    return users, labels, split


def _write_curve_csv(curve: list[dict], path: Path) -> None:
    if not curve:
        path.write_text("", encoding="utf-8")
        return
    columns = ["epoch"] + [k for k in ("loss_contrast", "loss_match", "loss_class", "dev_acc") if k in curve[0]]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for point in curve:
            writer.writerow({k: point[k] for k in columns})


def _write_fewshot_outputs(result: RunResult, out: Path) -> None:
    shot_dir = out / f"shot{result.s}"
    shot_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(result.averaged, shot_dir / "report_avg.json")
    for i, (report, curve, snapshot) in enumerate(zip(result.per_subset, result.curves, result.snapshots)):
        write_report_json(report, shot_dir / f"report_subset{i}.json")
        _write_curve_csv(curve, shot_dir / f"curve_subset{i}.csv")
        torch.save(snapshot, shot_dir / f"model_subset{i}.pt")
    if result.shortfall:
        _write_json({"s": result.s, "classes": result.shortfall}, shot_dir / "shortfall.json")


def cmd_synth(args) -> int:
    n_users, n_classes = write_corpus(
        args.out,
        n_classes=args.classes,
        users_per_class=args.users_per_class,
        posts_per_user=args.posts,
        seed=args.seed,
        with_coords=not args.no_coords,
        class_token_in_posts=not args.no_class_token,
    )
    print(f"wrote {n_users} users over {n_classes} classes to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    users, labels = load_dataset(args.data)
    users, labels = filter_minority_classes(users, labels, args.min_count)
    split = make_split(users, global_seed=args.seed, dev_cap=args.dev_cap)
    shot_seeds = tuple(stable_seed("shot-seed", args.seed, i) for i in range(3))
    split = make_shot_subsets(split, users, args.shots, shot_seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_split_manifest(split, out / "split_manifest.json")
    print(
        f"{len(users)} users, {len(labels)} classes -> "
        f"{len(split.train_ids)} train / {len(split.dev_ids)} dev / {len(split.test_ids)} test"
    )
    print(f"wrote {out / 'split_manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shots = cfg.train.shots if cfg.train.mode == "fewshot" else ()
    users, labels, split = _prepare_data(cfg, shots)

    table_rows: list[tuple[str, EvalReport]] = []
    shot_accs: dict[int, float] = {}
    run_details: list[dict] = []
    if cfg.train.mode == "zeroshot":
        report = run_zeroshot(users, labels, split, cfg)
        write_report_json(report, out / "report_zeroshot.json")
        table_rows.append(("zero-shot", report))
    else:
        for s in cfg.train.shots:
            result = run_fewshot(users, labels, split, s, cfg)
            _write_fewshot_outputs(result, out)
            table_rows.append((f"{s}-shot", result.averaged))
            shot_accs[s] = result.averaged.acc
            run_details.append(
                {"s": s, "model_seeds": result.model_seeds, "shortfall_classes": result.shortfall}
            )

    manifest = build_run_manifest(
        cfg, digest=_digest_with_cache(cfg.dataset_path), extra={"runs": run_details}
    )
    _write_json(manifest, out / "run_manifest.json")
    if cfg.eval.write_text_table:
        (out / "report.txt").write_text(report_text_table(table_rows), encoding="utf-8")
    if cfg.eval.write_plot and len(shot_accs) > 1:
        plot_accuracy_vs_shots(shot_accs, out / "accuracy_vs_shots.png")
    print(report_text_table(table_rows), end="")
    return 0


_INTEGRATIONS = ["In1", "In2", "InT", "InUser+1", "InUser+T", "NoIn"]
_FUSIONS = ["MeanPool", "Adapter", "TransformerEnc", "MLP", "LSTM", "BiLSTM", "RNN", "GRU"]
_FIELD_SETS = ["All", "NoPostTime", "NoPostMeta"]
_BACKBONE_SIZES = [16, 32, 64]


def _run_cell(cfg: RunConfig, users, labels, split, s: int) -> float:
    return run_fewshot(users, labels, split, s, cfg).averaged.acc * 100.0


def _write_table(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.train.shots[0]
    users, labels, split = _prepare_data(cfg, (s,))

    def sweep(values, key, row_cfg: RunConfig) -> list[str]:
        cells = []
        for value in values:
            cells.append(f"{_run_cell(override_config(row_cfg, key, value), users, labels, split, s):.2f}")
        return cells

    contrastive = override_config(cfg, "objective.kind", "contrastive")
    classifier = override_config(cfg, "objective.kind", "classifier")

    if args.axis == "integration":
        header = ["model"] + _INTEGRATIONS
        rows = [
            ["contrastive"] + sweep(_INTEGRATIONS, "representation.strategy", contrastive),
            ["classifier"] + sweep(_INTEGRATIONS, "representation.strategy", classifier),
        ]
        _write_table(out / "integration.tsv", header, rows)
    elif args.axis == "fusion":
        base_c = override_config(contrastive, "representation.strategy", "In2")
        base_k = override_config(classifier, "representation.strategy", "In2")
        header = ["model"] + _FUSIONS
        rows = [
            ["contrastive"] + sweep(_FUSIONS, "representation.fusion", base_c),
            ["classifier"] + sweep(_FUSIONS, "representation.fusion", base_k),
        ]
        _write_table(out / "fusion.tsv", header, rows)
    elif args.axis == "tweets":
        counts = list(range(2, 11))
        header = ["model"] + [str(t) for t in counts]
        rows = [
            ["contrastive"] + sweep(counts, "representation.num_posts", contrastive),
            ["classifier"] + sweep(counts, "representation.num_posts", classifier),
        ]
        _write_table(out / "tweets.tsv", header, rows)
    elif args.axis == "fields":
        header = ["model"] + _FIELD_SETS
        rows = [
            ["contrastive"] + sweep(_FIELD_SETS, "representation.field_filter", contrastive),
            ["classifier"] + sweep(_FIELD_SETS, "representation.field_filter", classifier),
        ]
        _write_table(out / "fields.tsv", header, rows)
    elif args.axis == "prompt":
        header = ["template", "hard", "semisoft"]
        rows = []
        for template in TEMPLATE_BANK:
            hard_cfg = overrides_prompt(contrastive, "hard", template)
            hard_acc = f"{_run_cell(hard_cfg, users, labels, split, s):.2f}"
            semi = _semisoft_cell(contrastive, template, users, labels, split, s)
            rows.append([template, hard_acc, semi])
        _write_table(out / "prompt_templates.tsv", header, rows)
        soft_counts = list(range(1, 15))
        soft_row = []
        for m in soft_counts:
            soft_cfg = overrides_prompt(contrastive, "soft", None, m=m)
            soft_row.append(f"{_run_cell(soft_cfg, users, labels, split, s):.2f}")
        _write_table(out / "prompt_soft.tsv", ["m"] + [str(m) for m in soft_counts], [["acc"] + soft_row])
    elif args.axis == "backbone":
        header = ["model"] + [f"toy-H{h}" for h in _BACKBONE_SIZES]
        rows = [["contrastive"] + sweep(_BACKBONE_SIZES, "representation.encoder.hidden_size", contrastive)]
        _write_table(out / "backbone.tsv", header, rows)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown ablation axis {args.axis!r}")
    print(f"wrote ablation table(s) for axis '{args.axis}' to {out}")
    return 0


def overrides_prompt(cfg: RunConfig, kind: str, template: str | None, m: int | None = None) -> RunConfig:
    obj = run_config_to_dict(cfg)
    prompt: dict = {"kind": kind}
    if template is not None:
        prompt["template"] = template
    if m is not None:
        prompt["m"] = m
    obj["prompt"] = prompt
    return run_config_from_dict(obj)


def _semisoft_cell(cfg: RunConfig, template: str, users, labels, split, s: int) -> str:
    pre, _, _, post = split_template(template)
    if not pre and not post:
        return "-"  # no template words, nothing to train: identical to hard
    return f"{_run_cell(overrides_prompt(cfg, 'semisoft', template), users, labels, split, s):.2f}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewgeo", description="Few-shot user geolocation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=20)
    p_synth.add_argument("--users-per-class", type=int, default=40)
    p_synth.add_argument("--posts", type=int, default=8)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--no-coords", action="store_true")
    p_synth.add_argument("--no-class-token", action="store_true")
    p_synth.set_defaults(func=cmd_synth)

    p_prep = sub.add_parser("preprocess", help="filter, split, and draw shot subsets")
    p_prep.add_argument("--data", required=True)
    p_prep.add_argument("--out", required=True)
    p_prep.add_argument("--seed", type=int, default=0)
    p_prep.add_argument("--min-count", type=int, default=3)
    p_prep.add_argument("--dev-cap", type=int, default=None)
    p_prep.add_argument("--shots", type=int, nargs="+", default=list(ALL_SHOTS))
    p_prep.set_defaults(func=cmd_preprocess)

    p_train = sub.add_parser("train", help="run a few-shot or zero-shot experiment")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_abl = sub.add_parser("ablate", help="sweep one axis, holding the rest at config values")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument(
        "--axis", required=True,
        choices=["integration", "fusion", "prompt", "tweets", "fields", "backbone"],
    )
    p_abl.add_argument("--out", required=True)
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
