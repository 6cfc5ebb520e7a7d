"""Command-line entry point: ``lowbridge <subcommand> ...``.

Every run writes into its own ``--out`` directory: the fully resolved
configuration (``config.json``, loadable again with ``--config``), the
artifacts, and a JSON-lines run record. Exit status is 0 on success, 1 for
invalid input or usage, 2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from lowbridge.data import (
    SynthConfig,
    generate_synthetic_benchmark,
    load_image,
    load_label,
    load_manifest,
    save_image,
    save_label,
)
from lowbridge.edge import CannyParams, extract_edges
from lowbridge.metrics import evaluate_dataset
from lowbridge.model import CheckpointError, ModelSpec, load_checkpoint
from lowbridge.pipeline import (
    RunRecord,
    TrainConfig,
    TrainingDivergedError,
    adapt_and_segment,
    evaluate_predictions,
    generator_config,
    predict_raw,
    segmenter_config,
    train_generator,
    train_raw_segmenter,
    train_segmenter,
)

log = logging.getLogger("lowbridge")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SECTIONS = ("data", "canny", "generator", "segmenter", "train", "eval")
TRAIN_KEYS = {"preset", "seed", "gen", "seg"}
EVAL_KEYS = {"asd_method", "batch_size"}
# per-stage keys; the model and Canny settings live in their own sections
STAGE_KEYS = {f.name for f in fields(TrainConfig)} - {"model", "canny", "checkpoint_path"}


class UsageError(ValueError):
    """Bad flags or configuration; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------------
# configuration


def _check_keys(section: str, d, allowed) -> dict:
    if not isinstance(d, dict):
        raise UsageError(f"config section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise UsageError(f"unknown key(s) in config section {section!r}: {sorted(unknown)}")
    return d


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    _check_keys("<root>", raw, SECTIONS)
    _check_keys("train", raw.get("train", {}), TRAIN_KEYS)
    for stage in ("gen", "seg"):
        _check_keys(f"train.{stage}", raw.get("train", {}).get(stage, {}), STAGE_KEYS)
    _check_keys("eval", raw.get("eval", {}), EVAL_KEYS)
    _check_keys("canny", raw.get("canny", {}), {f.name for f in fields(CannyParams)})
    for section in ("generator", "segmenter"):
        _check_keys(section, raw.get(section, {}), {f.name for f in fields(ModelSpec)})
    _check_keys("data", raw.get("data", {}), {f.name for f in fields(SynthConfig)})
    return raw


class Resolved:
    """Defaults <- preset <- config file <- command-line flags."""

    def __init__(self, raw: dict, args, num_classes: int | None = None):
        train = raw.get("train", {})
        self.preset = getattr(args, "preset", None) or train.get("preset", "desk")
        seed = train.get("seed")
        if getattr(args, "seed", None) is not None:
            seed = args.seed

        data = dict(raw.get("data", {}))
        if getattr(args, "seed", None) is not None:
            data["seed"] = args.seed
        self.synth = SynthConfig.from_dict(data)

        self.canny = CannyParams.from_dict(raw.get("canny", {}))
        n = num_classes or self.synth.num_classes
        gen_base = generator_config(self.preset)
        seg_base = segmenter_config(n, self.preset)
        gen_spec = {**gen_base.model.to_dict(), **raw.get("generator", {})}
        seg_spec = {**seg_base.model.to_dict(), **raw.get("segmenter", {})}
        if num_classes is not None and "out_channels" not in raw.get("segmenter", {}):
            seg_spec["out_channels"] = num_classes
        self.gen_spec = ModelSpec.from_dict(gen_spec)
        self.seg_spec = ModelSpec.from_dict(seg_spec)

        self.stages = {}
        for stage, base in (("gen", gen_base), ("seg", seg_base)):
            d = {k: v for k, v in base.to_dict().items() if k in STAGE_KEYS}
            if seed is not None:
                d["seed"] = seed
            d.update(train.get(stage, {}))
            if getattr(args, "epochs", None) is not None:
                d["epochs"] = args.epochs
            self.stages[stage] = d
        ev = raw.get("eval", {})
        self.eval = {"asd_method": ev.get("asd_method", "bruteforce"), "batch_size": int(ev.get("batch_size", 8))}
        if self.eval["asd_method"] not in ("bruteforce", "edt"):
            raise UsageError(f"eval.asd_method must be 'bruteforce' or 'edt', got {self.eval['asd_method']!r}")
        if self.eval["batch_size"] < 1:
            raise UsageError("eval.batch_size must be >= 1")
        # build once so that bad values fail before any work starts
        self.gen_cfg()
        self.seg_cfg()

    def gen_cfg(self, checkpoint_path=None) -> TrainConfig:
        return TrainConfig.from_dict({**self.stages["gen"], "model": self.gen_spec.to_dict(),
                                      "canny": self.canny.to_dict(), "checkpoint_path": checkpoint_path})

    def seg_cfg(self, checkpoint_path=None) -> TrainConfig:
        return TrainConfig.from_dict({**self.stages["seg"], "model": self.seg_spec.to_dict(),
                                      "canny": self.canny.to_dict(), "checkpoint_path": checkpoint_path})

    def to_dict(self) -> dict:
        def stage(name):
            cfg = self.gen_cfg() if name == "gen" else self.seg_cfg()
            return {k: v for k, v in cfg.to_dict().items() if k in STAGE_KEYS}

        return {
            "data": self.synth.to_dict(),
            "canny": self.canny.to_dict(),
            "generator": self.gen_spec.to_dict(),
            "segmenter": self.seg_spec.to_dict(),
            "train": {"preset": self.preset, "gen": stage("gen"), "seg": stage("seg")},
            "eval": dict(self.eval),
        }


def _echo_config(out: Path, resolved: Resolved) -> None:
    (out / "config.json").write_text(json.dumps(resolved.to_dict(), indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(path):
    if path is None:
        raise UsageError("--manifest is required")
    return load_manifest(path)


def _write_run(out: Path, entries: list[dict]) -> None:
    RunRecord(epochs=entries).write(out / "run_record.jsonl")


def _stems(manifest) -> list[str]:
    stems = [Path(r.image).stem for r in manifest.records]
    if len(set(stems)) != len(stems):
        raise UsageError("manifest image file names must have unique stems")
    return stems


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    resolved = Resolved(read_config(args.config), args)
    synth = resolved.synth
    overrides = {k: getattr(args, k) for k in ("n_train", "n_test", "image_size") if getattr(args, k) is not None}
    if overrides:
        synth = SynthConfig.from_dict({**synth.to_dict(), **overrides})
        resolved.synth = synth
    out = _out_dir(args)
    generate_synthetic_benchmark(synth, out)
    _echo_config(out, resolved)


def cmd_edges(args) -> None:
    if (args.input is None) == (args.manifest is None):
        raise UsageError("give exactly one of --in or --manifest")
    resolved = Resolved(read_config(args.config), args)
    out = _out_dir(args)
    if args.input is not None:
        sources = [Path(args.input)]
    else:
        m = _manifest(args.manifest)
        _stems(m)
        sources = [m.image_path(i) for i in range(len(m))]
    for src in sources:
        em = extract_edges(load_image(src), resolved.canny, source=str(src))
        save_image(out / f"{src.stem}.edges.pgm", em.data)
    _echo_config(out, resolved)


def cmd_train_gen(args) -> None:
    source = _manifest(args.manifest)
    resolved = Resolved(read_config(args.config), args, source.num_classes)
    out = _out_dir(args)
    _echo_config(out, resolved)
    params, record = train_generator(source, resolved.gen_cfg(str(out / "generator.lbck")))
    record.write(out / "run_record.jsonl")


def cmd_train_seg(args) -> None:
    source = _manifest(args.manifest)
    if not args.gen_ckpt:
        raise UsageError("--gen-ckpt is required")
    resolved = Resolved(read_config(args.config), args, source.num_classes)
    gen = load_checkpoint(args.gen_ckpt)
    out = _out_dir(args)
    _echo_config(out, resolved)
    params, record = train_segmenter(source, gen, resolved.seg_cfg(str(out / "segmenter.lbck")))
    record.write(out / "run_record.jsonl")


def cmd_infer(args) -> None:
    target = _manifest(args.manifest)
    if not args.gen_ckpt or not args.seg_ckpt:
        raise UsageError("--gen-ckpt and --seg-ckpt are required")
    stems = _stems(target)
    resolved = Resolved(read_config(args.config), args, target.num_classes)
    gen, seg = load_checkpoint(args.gen_ckpt), load_checkpoint(args.seg_ckpt)
    if not (gen.checksum_ok and seg.checksum_ok):
        raise UsageError("refusing to run inference from a checkpoint that failed its checksum")
    out = _out_dir(args)
    _echo_config(out, resolved)
    t0 = time.perf_counter()
    preds = adapt_and_segment(target, gen, seg, resolved.canny, resolved.eval["batch_size"])
    for stem, pred in zip(stems, preds):
        save_label(out / f"{stem}.pred.pgm", pred, target.num_classes)
    _write_run(out, [{"epoch": 0, "loss": None, "seconds": round(time.perf_counter() - t0, 3)}])


def cmd_eval(args) -> None:
    truth = _manifest(args.manifest)
    if not truth.labeled:
        raise UsageError("eval needs a labeled manifest")
    if not args.pred_dir:
        raise UsageError("--pred-dir is required")
    resolved = Resolved(read_config(args.config), args, truth.num_classes)
    pred_dir = Path(args.pred_dir)
    preds = [load_label(pred_dir / f"{stem}.pred.pgm", truth.num_classes) for stem in _stems(truth)]
    truths = [truth.load_label(i) for i in range(len(truth))]
    spacings = [truth.spacing(i) for i in range(len(truth))]
    report = evaluate_dataset(preds, truths, spacings, truth.num_classes, method=resolved.eval["asd_method"])
    out = _out_dir(args)
    _echo_config(out, resolved)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    print(report.row())


def cmd_baseline(args) -> None:
    train = _manifest(args.manifest)
    if args.test_manifest is None:
        raise UsageError("--test-manifest is required")
    test = load_manifest(args.test_manifest)
    if not train.labeled or not test.labeled:
        raise UsageError(f"baseline {args.mode} needs labeled train and test manifests")
    resolved = Resolved(read_config(args.config), args, train.num_classes)
    out = _out_dir(args)
    _echo_config(out, resolved)
    params, record = train_raw_segmenter(train, resolved.seg_cfg(str(out / "segmenter.lbck")))
    record.write(out / "run_record.jsonl")
    stems = _stems(test)
    preds = predict_raw(params, test, resolved.eval["batch_size"])
    for stem, pred in zip(stems, preds):
        save_label(out / f"{stem}.pred.pgm", pred, test.num_classes)
    report = evaluate_predictions(preds, test)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    print(report.row())


# ----------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lowbridge", description="Edge-bridged cross-modality segmentation.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, manifest=True):
        sp.add_argument("--out", required=True, help="run directory (created if missing)")
        sp.add_argument("--config", help="JSON config with sections " + ", ".join(SECTIONS))
        sp.add_argument("--seed", type=int)
        if manifest:
            sp.add_argument("--manifest")

    sp = sub.add_parser("synth", help="write the synthetic two-modality benchmark")
    common(sp, manifest=False)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("edges", help="write Canny edge maps as PGM")
    common(sp)
    sp.add_argument("--in", dest="input", help="single input PGM")
    sp.set_defaults(func=cmd_edges)

    for name, func, help_ in (
        ("train-gen", cmd_train_gen, "stage 1: edge-to-image generator on the source manifest"),
        ("train-seg", cmd_train_seg, "stage 2: segmenter on generated source images"),
    ):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--preset", choices=("desk", "full"))
        sp.add_argument("--epochs", type=int)
        if name == "train-seg":
            sp.add_argument("--gen-ckpt")
        sp.set_defaults(func=func)

    sp = sub.add_parser("infer", help="segment target images through edges and the frozen generator")
    common(sp)
    sp.add_argument("--gen-ckpt")
    sp.add_argument("--seg-ckpt")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score <stem>.pred.pgm files against a labeled manifest")
    common(sp)
    sp.add_argument("--pred-dir")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", help="no-adaptation or supervised reference run")
    common(sp)
    sp.add_argument("--mode", choices=("no_adapt", "supervised"), required=True)
    sp.add_argument("--test-manifest")
    sp.add_argument("--preset", choices=("desk", "full"))
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_baseline)
    return p


def _thread_limit():
    raw = os.environ.get("LOWBRIDGE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"LOWBRIDGE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ValueError, FileNotFoundError, IsADirectoryError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
