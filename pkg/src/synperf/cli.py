"""Command line entry point.

Every subcommand accepts the global flags ``--config`` (key=value file),
``--seed`` and ``--out-dir``. Config keys carry a section prefix:
``phantom.``, ``preprocess.``, ``split.``, ``model.``, ``train.``. Failures
print one line ``error<TAB>kind<TAB>message`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import from_kv, load_config_file, to_kv, unknown_keys
from .data import (DataError, MapKind, Split, assign_splits, list_cases, load_cases, read_case, read_manifest,
                   write_array, write_case, write_kv, write_manifest)
from .evaluate import ABLATION_VARIANTS, curve_to_tsv, evaluate, run_ablations, shift_sweep, write_text
from .model import Model, ModelConfig, default_patch_rows
from .panels import emit_panels
from .phantom import DatasetConfig, write_ground_truth
from .preprocess import PreprocessConfig, config_for, preprocess_case
from .train import PreparedCase, TrainConfig, train

log = logging.getLogger("synperf")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class SplitConfig:
    ratios: tuple = (0.5, 0.2, 0.3)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key=value config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="synperf", description="Perfusion map regression on synthetic DSC phantoms.",
                     parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    ph = sub.add_parser("phantom", help="phantom datasets")
    ph_sub = ph.add_subparsers(dest="phantom_command", parser_class=_Parser)
    gen = ph_sub.add_parser("generate", parents=[common], help="synthesize a seeded phantom dataset")
    gen.add_argument("--count", type=int)
    gen.add_argument("--shape", help="frames,slices,rows,cols")
    gen.add_argument("--no-truth", action="store_true", help="skip the ground-truth sidecar")

    pre = sub.add_parser("preprocess", parents=[common], help="pad, standardize and smooth raw cases")
    pre.add_argument("--data", type=Path, required=True)

    sp = sub.add_parser("split", parents=[common], help="assign train/val/test")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--ratios", help="train,val,test")

    tr = sub.add_parser("train", parents=[common], help="train one model")
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--manifest", type=Path, required=True)
    tr.add_argument("--variant", choices=ABLATION_VARIANTS)

    pr = sub.add_parser("predict", parents=[common], help="predict maps for cases")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--data", type=Path, required=True)
    pr.add_argument("--cases", help="comma separated case ids (default: all)")

    ev = sub.add_parser("evaluate", parents=[common], help="MAEC report for one split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", default="val", choices=[s.value for s in Split])

    ab = sub.add_parser("ablate", parents=[common], help="train and score variants A-E")
    ab.add_argument("--data", type=Path, required=True)
    ab.add_argument("--manifest", type=Path, required=True)
    ab.add_argument("--seeds", help="comma separated training seeds (default: --seed)")
    ab.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    ab.add_argument("--keep-checkpoints", action="store_true")

    sw = sub.add_parser("shift-sweep", parents=[common], help="MAEC against temporal shifts of the input")
    sw.add_argument("--checkpoint", action="append", required=True, help="PATH or LABEL=PATH, repeatable")
    sw.add_argument("--data", type=Path, required=True)
    sw.add_argument("--manifest", type=Path, required=True)
    sw.add_argument("--split", default="val", choices=[s.value for s in Split])
    sw.add_argument("--shifts", default="-5:10", help="LO:HI inclusive or a comma list")

    pn = sub.add_parser("panels", parents=[common], help="target | prediction | variance image")
    pn.add_argument("--checkpoint", type=Path, required=True)
    pn.add_argument("--data", type=Path, required=True)
    pn.add_argument("--case", required=True)
    pn.add_argument("--slices", help="comma separated slice indices (default: all)")
    return parser


# ---------------------------------------------------------------------------
# config plumbing


@dataclasses.dataclass
class Settings:
    seed: int
    out_dir: Path
    items: dict

    def dataset(self) -> DatasetConfig:
        return from_kv(DatasetConfig, self.items, "phantom.")

    def model(self) -> ModelConfig:
        return from_kv(ModelConfig, self.items, "model.")

    def train(self) -> TrainConfig:
        cfg = from_kv(TrainConfig, self.items, "train.")
        return dataclasses.replace(cfg, seed=self.seed) if "train.seed" not in self.items else cfg

    def split(self) -> SplitConfig:
        return from_kv(SplitConfig, self.items, "split.")

    def preprocess(self, cases) -> PreprocessConfig:
        # target shapes default to the largest volume among the cases
        return from_kv(PreprocessConfig, self.items, "preprocess.", base=config_for(cases))


def _settings(args) -> Settings:
    items = load_config_file(args.config) if getattr(args, "config", None) else {}
    bad = unknown_keys(items, (DatasetConfig, "phantom."), (PreprocessConfig, "preprocess."),
                       (SplitConfig, "split."), (ModelConfig, "model."), (TrainConfig, "train."))
    if bad:
        raise UsageError(f"unknown config keys: {','.join(bad)}")
    return Settings(seed=getattr(args, "seed", 0), out_dir=getattr(args, "out_dir", Path(".")), items=items)


def _write_config(settings: Settings, path: Path, **sections):
    items = {}
    for prefix, cfg in sections.items():
        items.update(to_kv(cfg, prefix=prefix + "."))
    items["seed"] = settings.seed
    write_kv(path, items)


def _split_cases(data: Path, manifest_path: Path, split) -> list:
    manifest = read_manifest(manifest_path)
    ids = manifest.ids(split)
    if not ids:
        raise DataError(f"split {Split(split).value} of {manifest_path} is empty")
    return load_cases(data, ids)


def _parse_shifts(text: str) -> list:
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi) + 1))
    return [int(k) for k in text.split(",") if k]


def _prepared(cases, kind) -> list:
    missing = [c.case_id for c in cases if MapKind(kind) not in c.targets]
    if missing:
        raise DataError(f"cases without {MapKind(kind).value} targets: {','.join(missing)}")
    return [PreparedCase.from_record(c, kind) for c in cases]


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, st: Settings) -> int:
    cfg = st.dataset()
    if args.count is not None:
        cfg = dataclasses.replace(cfg, count=args.count)
    if args.shape:
        cfg = dataclasses.replace(cfg, shape=tuple(int(v) for v in args.shape.split(",")))
    root = st.out_dir / "cases"
    for case, truth in cfg.generate(st.seed):
        write_case(case, root / case.case_id)
        if not args.no_truth:
            write_ground_truth(truth, st.out_dir / "truth" / case.case_id)
        log.info("wrote %s", case.case_id)
    _write_config(st, st.out_dir / "phantom_config.txt", phantom=cfg)
    return 0


def cmd_preprocess(args, st: Settings) -> int:
    cases = load_cases(args.data)
    if not cases:
        raise DataError(f"no cases under {args.data}")
    cfg = st.preprocess(cases)
    root = st.out_dir / "preprocessed"
    for c in cases:
        write_case(preprocess_case(c, cfg), root / c.case_id)
    _write_config(st, st.out_dir / "preprocess_config.txt", preprocess=cfg)
    return 0


def cmd_split(args, st: Settings) -> int:
    cfg = st.split()
    if args.ratios:
        cfg = SplitConfig(tuple(float(r) for r in args.ratios.split(",")))
    manifest = assign_splits(list_cases(args.data), cfg.ratios, seed=st.seed)
    st.out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, st.out_dir / "manifest.tsv")
    return 0


def _history_tsv(history) -> str:
    lines = ["epoch\tlr\ttrain_loss\tval_maec"]
    lines += [f"{h.epoch}\t{h.lr!r}\t{h.train_loss:.9g}\t{h.val_maec:.9f}" for h in history]
    return "\n".join(lines) + "\n"


def cmd_train(args, st: Settings) -> int:
    model_cfg, train_cfg = st.model(), st.train()
    if args.variant:
        from .model import variant

        model_cfg = variant(args.variant, model_cfg)
    tr = _split_cases(args.data, args.manifest, Split.TRAIN)
    va = _split_cases(args.data, args.manifest, Split.VAL)
    res = train(_prepared(tr, model_cfg.target_kind), _prepared(va, model_cfg.target_kind), model_cfg, train_cfg)
    res.model.save(st.out_dir / "checkpoint", extra={"best_epoch": res.best_epoch, **to_kv(train_cfg, "train.")})
    write_text(st.out_dir / "history.tsv", _history_tsv(res.history))
    return 0


def cmd_predict(args, st: Settings) -> int:
    model = Model.load(args.checkpoint)
    ids = args.cases.split(",") if args.cases else list_cases(args.data)
    lines = ["case_id\tslices\trows\tcols\tinference_seconds"]
    for cid in ids:
        case = read_case(args.data / cid)
        res = model.predict_case(case, default_patch_rows(case.sequence.spatial_shape[1]))
        out = st.out_dir / "predictions" / cid
        out.mkdir(parents=True, exist_ok=True)
        write_array(out / "p_hat.pfsn", res.p_hat.data)
        write_array(out / "b_hat.pfsn", res.b_hat.astype(np.float32))
        write_array(out / "sigma2.pfsn", res.sigma2.astype(np.float32))
        lines.append(cid + "\t" + "\t".join(str(s) for s in res.p_hat.data.shape) + f"\t{res.seconds:.3f}")
    write_text(st.out_dir / "predict.tsv", "\n".join(lines) + "\n")
    return 0


def cmd_evaluate(args, st: Settings) -> int:
    model = Model.load(args.checkpoint)
    cases = _split_cases(args.data, args.manifest, args.split)
    report = evaluate(model, _prepared(cases, model.cfg.target_kind), args.split)
    write_text(st.out_dir / f"evaluate_{args.split}.tsv", report.to_tsv())
    write_text(st.out_dir / f"timings_{args.split}.tsv", report.timings_tsv())
    return 0


def cmd_ablate(args, st: Settings) -> int:
    base, train_cfg = st.model(), st.train()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [st.seed]
    variants = [v for v in args.variants.split(",") if v]
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise UsageError(f"unknown variants: {','.join(bad)}")
    kind = base.target_kind
    sets = [_prepared(_split_cases(args.data, args.manifest, s), kind) for s in (Split.TRAIN, Split.VAL, Split.TEST)]
    result = run_ablations(*sets, base_cfg=base, train_cfg=train_cfg, seeds=seeds, variants=variants,
                           keep_models=args.keep_checkpoints,
                           callback=lambda row: log.info("variant %s seed %d: val %.4f test %.4f",
                                                         row.variant, row.seed, row.maec_val, row.maec_test))
    write_text(st.out_dir / "ablation.tsv", result.to_tsv())
    write_text(st.out_dir / "ablation_summary.tsv", result.summary_tsv())
    for (name, seed), model in result.models.items():
        model.save(st.out_dir / "ablation" / f"{name}_seed{seed}")
    return 0


def cmd_shift_sweep(args, st: Settings) -> int:
    shifts = _parse_shifts(args.shifts)
    cases = _split_cases(args.data, args.manifest, args.split)
    curves = {}
    for i, spec in enumerate(args.checkpoint):
        label, _, path = spec.rpartition("=")
        label = label or (Path(path).name if len(args.checkpoint) > 1 else "maec")
        model = Model.load(path)
        curves[label] = shift_sweep(model, _prepared(cases, model.cfg.target_kind), shifts)
    write_text(st.out_dir / "shift_sweep.tsv", curve_to_tsv(curves))
    return 0


def cmd_panels(args, st: Settings) -> int:
    model = Model.load(args.checkpoint)
    case = read_case(args.data / args.case)
    kind = model.cfg.target_kind
    target = _prepared([case], kind)[0].target
    res = model.predict_case(case, default_patch_rows(case.sequence.spatial_shape[1]))
    slices = [int(s) for s in args.slices.split(",")] if args.slices else None
    window = (0.0, 20.0) if kind is MapKind.TMAX else (float(target.min()), float(target.max()))
    emit_panels(target, res.p_hat.data, res.sigma2, st.out_dir / f"panels_{args.case}.png", slices, window)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "shift-sweep": cmd_shift_sweep,
    "panels": cmd_panels,
}


def _one_line(text) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        if args.command is None:
            raise UsageError("missing subcommand")
        if args.command == "phantom":
            if args.phantom_command != "generate":
                raise UsageError("expected 'phantom generate'")
            handler = cmd_generate
        else:
            handler = COMMANDS[args.command]
        return handler(args, _settings(args))
    except UsageError as exc:
        print(f"error\tusage\t{_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileExistsError, FileNotFoundError, KeyError, ValueError, RuntimeError, OSError) as exc:
        print(f"error\t{type(exc).__name__}\t{_one_line(exc)}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
