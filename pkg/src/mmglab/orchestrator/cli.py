"""``mmglab`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..dataeng import PRESETS, DatasetSpec, generate_synthetic, load_dataset, validate_splits
from ..errors import ConfigError, DataError, NumericError
from ..modality import ModalityMask
from .checkpoint import load_checkpoint, read_header
from .config import RunConfig, load_config
from .report import load_records, merge_records, write_report
from .runner import fewshot_eval, fewshot_metric, run_pipeline, supervised_eval
from .stages import SETTINGS, TASKS

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which we reserve for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def check_task_masks(task: str, support: ModalityMask, query: ModalityMask) -> None:
    if task == "regular" and support != query:
        raise ConfigError(f"regular task needs equal masks, got {support} -> {query}")
    if task == "missing" and not (query.issubset(support) and query != support):
        raise ConfigError(f"missing-modality task needs query {query} to be a strict subset of support {support}")
    if task == "zeroshot" and not support.isdisjoint(query):
        raise ConfigError(f"zero-shot task needs disjoint masks, got {support} -> {query}")


def _cmd_gen_synth(a) -> int:
    raw = {}
    if a.spec:
        p = Path(a.spec)
        if not p.exists():
            raise ConfigError(f"spec file not found: {p}")
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if a.seed is not None:
        raw["seed"] = a.seed
    spec = DatasetSpec.preset(a.preset, **raw)
    out = generate_synthetic(spec, a.out)
    report = validate_splits(load_dataset(out))
    print(json.dumps({"out": str(out), "split_violations": len(report.violations)}))
    return EXIT_OK


def _cmd_run(a) -> int:
    cfg = load_config(a.config)
    data = load_dataset(a.data)
    out = Path(a.out)
    records = []
    for seed in a.seed:
        rec, _ = run_pipeline(data, cfg, a.setting, a.task, seed, out_dir=out)
        records.append(rec)
        for row in rec.rows:
            print(f"{a.setting}/{a.task} seed={seed} {row.train_mask} -> {row.test_mask}: "
                  f"{row.metric}={row.value:.4f} ci={row.ci:.4f}")
    existing = load_records(out / "results.json") if (out / "results.json").exists() else []
    write_report(merge_records(existing, records), out)
    return EXIT_OK


def _load_model_and_config(a):
    model, head = load_checkpoint(a.checkpoint)
    cfg = load_config(a.config) if a.config else RunConfig.from_dict(head.get("config"))
    data = load_dataset(a.data or head.get("data"))
    return model, cfg, data


def _cmd_eval_fewshot(a) -> int:
    support, query = ModalityMask.parse(a.support_mask), ModalityMask.parse(a.query_mask)
    support.require_nonempty()
    query.require_nonempty()
    if a.task:
        check_task_masks(a.task, support, query)
    model, cfg, data = _load_model_and_config(a)
    if a.workers:
        cfg = cfg.replace(eval={"workers": a.workers})
    r = fewshot_eval(model, data, cfg, support, query, a.seed, episodes=a.episodes)
    print(json.dumps({"support_mask": str(support), "query_mask": str(query), "metric": fewshot_metric(cfg),
                      "value": r.mean, "ci": r.ci95, "episodes": r.num_episodes}))
    return EXIT_OK


def _cmd_eval_supervised(a) -> int:
    mask = ModalityMask.parse(a.test_mask).require_nonempty()
    model, _, data = _load_model_and_config(a)
    print(json.dumps({"test_mask": str(mask), "split": a.split, "metric": "top1",
                      "value": supervised_eval(model, data, mask, a.split)}))
    return EXIT_OK


def _cmd_report(a) -> int:
    jpath, cpath = write_report(load_records(a.inp), a.out)
    print(cpath.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _cmd_validate(a) -> int:
    report = validate_splits(load_dataset(a.data))
    for v in report.violations:
        print(f"{v.kind}: {v.detail}")
    print(json.dumps({"violations": len(report.violations), **report.kinds()}))
    return EXIT_OK if report.ok else EXIT_DATA


def _cmd_inspect(a) -> int:
    print(json.dumps(read_header(a.checkpoint), indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmglab", description="Multimodal generalization experiments on MMGT datasets.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--spec", help="YAML/JSON file of dataset spec overrides")
    g.add_argument("--preset", default="default", choices=sorted(PRESETS),
                   help="complementary: equal noise, each modality blind to part of the latent; null: no class signal")
    g.set_defaults(fn=_cmd_gen_synth)

    r = sub.add_parser("run", help="train and evaluate one pipeline")
    r.add_argument("--data", required=True)
    r.add_argument("--setting", required=True, choices=SETTINGS)
    r.add_argument("--task", required=True, choices=TASKS)
    r.add_argument("--seed", type=int, nargs="+", default=[0])
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_run)

    for name, fn in (("eval-fewshot", _cmd_eval_fewshot), ("eval-supervised", _cmd_eval_supervised)):
        e = sub.add_parser(name, help=f"{name.split('-')[1]} evaluation of a checkpoint")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", help="dataset directory (default: the one recorded in the checkpoint)")
        e.add_argument("--config", help="override the config stored in the checkpoint")
        if name == "eval-fewshot":
            e.add_argument("--support-mask", required=True)
            e.add_argument("--query-mask", required=True)
            e.add_argument("--task", choices=TASKS, help="reject mask pairs that do not fit this task")
            e.add_argument("--episodes", type=int)
            e.add_argument("--seed", type=int, default=0)
            e.add_argument("--workers", type=int)
        else:
            e.add_argument("--test-mask", required=True)
            e.add_argument("--split", default="base-test")
        e.set_defaults(fn=fn)

    rep = sub.add_parser("report", help="merge results.json files into results.json/results.csv")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(fn=_cmd_report)

    v = sub.add_parser("validate", help="check split hygiene of a dataset")
    v.add_argument("--data", required=True)
    v.set_defaults(fn=_cmd_validate)

    i = sub.add_parser("inspect", help="print a checkpoint header")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=_cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"mmglab: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"mmglab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"mmglab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
