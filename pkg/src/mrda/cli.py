"""Command-line entry point: ``mrda <command> [options]``.

Every command works inside a run directory (``--run-dir``, default
``$MRDA_RUN_ROOT/default`` or ``./runs/default``).  Layout::

    config.json              resolved training configuration
    run_manifest.json        per-command record, artifact hashes, checkpoint lineage
    corpus/                  synth output: hr/, lr/, manifest.jsonl
    stage1/ stage2/ stage3/  checkpoints and CSV logs
    eval/ idr/ curve/        reports

Exit codes: 0 success, 1 user error, 2 internal error.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import netcore as nc
from .data import load_png_dir, save_png, synthetic_dataset, synthetic_hr
from .degradation import MODES, SCALES, DegradationSpec, KernelSpec, degrade, gaussian8_suite, sample_degradation
from .den import init_den
from .evaluation import (
    adaptation_curve,
    evaluate,
    export_idr,
    separability_score,
    student_extractor,
    student_sr_fn,
    teacher_extractor,
    teacher_sr_fn,
    write_jsonl,
)
from .mln import init_mln, make_task
from .rdan import init_rdan
from .training import (
    Student,
    Teacher,
    TrainConfig,
    run_stage1,
    toy_config,
    train_stage2_teacher,
    train_stage3_student,
)

# held-out evaluation images use a seed stream disjoint from training
EVAL_SEED_OFFSET = 1_000_003


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration and run directory


def default_run_dir():
    return Path(os.environ.get("MRDA_RUN_ROOT", "runs")) / "default"


def resolve_config(args, run_dir):
    """Base values, then ``--config``, then flags.

    ``stage1`` starts from the ``--toy`` or full-size defaults and saves the
    result; later commands start from that saved config so the whole run
    stays consistent.
    """
    saved = run_dir / "config.json"
    if args.command != "stage1" and saved.exists():
        values = json.loads(saved.read_text())
    else:
        values = (toy_config() if args.toy else TrainConfig()).to_dict()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            values.update(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise UserError(f"config file {path} is not valid JSON: {e}") from e
    for key in ("seed", "scale", "mode"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    try:
        return TrainConfig.from_dict(values)
    except (ValueError, TypeError) as e:
        raise UserError(f"invalid configuration: {e}") from e


def sha256(path):
    return nc.file_digest(path)


def _rel(path, run_dir):
    try:
        return str(Path(path).relative_to(run_dir))
    except ValueError:
        return str(path)


def record(run_dir, command, argv, config, outputs, inputs=(), lineage=None, started=None):
    """Merge this command's entry into ``run_manifest.json`` (the only file carrying timestamps)."""
    path = run_dir / "run_manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}, "lineage": {}}
    manifest["commands"][command] = {
        "argv": argv,
        "config_digest": config.digest() if config else None,
        "seed": config.seed if config else None,
        "started": started,
        "finished": time.time(),
        "inputs": {_rel(p, run_dir): sha256(p) for p in inputs},
        "outputs": {_rel(p, run_dir): sha256(p) for p in outputs},
    }
    if lineage:
        manifest["lineage"].update(lineage)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def write_csv(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})


def hr_source(args, config):
    if getattr(args, "hr_dir", None):
        try:
            return load_png_dir(args.hr_dir)
        except FileNotFoundError as e:
            raise UserError(str(e)) from e
    return synthetic_dataset(config.hr_count, config.hr_size, config.seed)


def eval_images(args, config):
    if getattr(args, "hr_dir", None):
        return hr_source(args, config)
    return synthetic_dataset(args.count, args.size, config.seed + EVAL_SEED_OFFSET)


# ---------------------------------------------------------------------------
# checkpoints


def ckpt_paths(run_dir):
    return {
        "mln": run_dir / "stage1" / "mln.ckpt",
        "den_t": run_dir / "stage2" / "den_t.ckpt",
        "rdan_t": run_dir / "stage2" / "rdan_t.ckpt",
        "den_s": run_dir / "stage3" / "den_s.ckpt",
        "rdan_s": run_dir / "stage3" / "rdan_s.ckpt",
    }


def require(path, producer):
    if not path.exists():
        raise UserError(f"missing checkpoint {path}; run `mrda {producer}` with the same --run-dir first")
    return path


def load_into(path, template, producer):
    """Load ``path`` into a model shaped like ``template`` after a structural check."""
    params, meta = nc.load_checkpoint(require(path, producer))
    expected, found = template.params.shapes(), params.shapes()
    if expected != found:
        problems = {
            "missing": sorted(set(expected) - set(found)),
            "unexpected": sorted(set(found) - set(expected)),
            "shape_mismatch": {n: {"checkpoint": list(found[n]), "config": list(expected[n])}
                               for n in expected if n in found and found[n] != expected[n]},
        }
        raise UserError(f"checkpoint {path} does not match the configuration: {json.dumps(problems)}")
    # the saved meta mask (e.g. a frozen upscaler) travels with the parameters
    return type(template)(template.config, params.to(config_dtype(template))), meta


def config_dtype(model):
    return next(iter(model.params.values())).dtype


def load_mln(run_dir, config):
    template = init_mln(config.mln_config(), dtype=config.torch_dtype)
    return load_into(ckpt_paths(run_dir)["mln"], template, "stage1")[0]


def load_teacher(run_dir, config):
    p = ckpt_paths(run_dir)
    den, _ = load_into(p["den_t"], init_den(config.den_config(teacher=True), dtype=config.torch_dtype), "stage2")
    rdan, _ = load_into(p["rdan_t"], init_rdan(config.rdan_config(), dtype=config.torch_dtype), "stage2")
    return Teacher(load_mln(run_dir, config), den, rdan)


def load_student(run_dir, config):
    p = ckpt_paths(run_dir)
    den, _ = load_into(p["den_s"], init_den(config.den_config(teacher=False), dtype=config.torch_dtype), "stage3")
    rdan, _ = load_into(p["rdan_s"], init_rdan(config.rdan_config(), dtype=config.torch_dtype), "stage3")
    return Student(den, rdan)


def save_model(path, model, stage, config, parents=None):
    meta = {"stage": stage, "config_digest": config.digest(), "parents": parents or {}}
    nc.save_checkpoint(path, model.params, meta)
    return path


# ---------------------------------------------------------------------------
# commands


def _synth_item(i, args, rng_seed, hr_images):
    rng = np.random.default_rng([rng_seed, i])
    hr = hr_images[i] if hr_images is not None else synthetic_hr(args.size, rng)
    spec = sample_degradation(args.mode, args.scale, rng)
    return hr, spec, degrade(hr, spec)


def cmd_synth(args, run_dir, argv):
    if args.count < 1:
        raise UserError("--count must be >= 1")
    if args.size % args.scale:
        raise UserError(f"--size {args.size} is not divisible by --scale {args.scale}")
    hr_images = load_png_dir(args.hr_dir) if args.hr_dir else None
    if hr_images is not None:
        args.count = min(args.count, len(hr_images))
    out = run_dir / "corpus"
    started = time.time()
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        items = list(pool.map(lambda i: _synth_item(i, args, args.seed, hr_images), range(args.count)))
    rows, outputs = [], []
    for i, (hr, spec, lr) in enumerate(items):
        hr_path, lr_path = out / "hr" / f"{i:04d}.png", out / "lr" / f"{i:04d}.png"
        save_png(hr_path, hr)
        save_png(lr_path, lr)
        outputs += [hr_path, lr_path]
        rows.append({"id": i, "hr": _rel(hr_path, out), "lr": _rel(lr_path, out), "spec": spec.to_dict(),
                     "hr_sha256": sha256(hr_path), "lr_sha256": sha256(lr_path)})
    write_jsonl(out / "manifest.jsonl", rows)
    outputs.append(out / "manifest.jsonl")
    record(run_dir, "synth", argv, None, outputs, started=started)
    print(f"wrote {len(rows)} pairs to {out}")


def cmd_stage1(args, run_dir, argv, config):
    started = time.time()
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    logs = []
    mln = run_stage1(config, hr_source(args, config), log=logs.append)
    path = save_model(ckpt_paths(run_dir)["mln"], mln, "stage1", config)
    write_csv(run_dir / "stage1" / "log.csv", logs)
    record(run_dir, "stage1", argv, config, [path, run_dir / "stage1" / "log.csv", run_dir / "config.json"],
           lineage={"stage1": {"mln": sha256(path)}}, started=started)
    print(f"stage1 checkpoint: {path}")


def cmd_stage2(args, run_dir, argv, config):
    started = time.time()
    p = ckpt_paths(run_dir)
    mln = load_mln(run_dir, config)
    logs = []
    teacher = train_stage2_teacher(config, mln, hr_source(args, config), log=logs.append)
    parents = {"mln": sha256(p["mln"])}
    save_model(p["den_t"], teacher.den, "stage2", config, parents)
    save_model(p["rdan_t"], teacher.rdan, "stage2", config, parents)
    write_csv(run_dir / "stage2" / "log.csv", logs)
    record(run_dir, "stage2", argv, config, [p["den_t"], p["rdan_t"], run_dir / "stage2" / "log.csv"],
           inputs=[p["mln"]], started=started,
           lineage={"stage2": {"den_t": sha256(p["den_t"]), "rdan_t": sha256(p["rdan_t"]), "parents": parents}})
    print(f"stage2 checkpoints: {p['den_t']}, {p['rdan_t']}")


def cmd_stage3(args, run_dir, argv, config):
    started = time.time()
    p = ckpt_paths(run_dir)
    teacher = load_teacher(run_dir, config)
    logs = []
    student = train_stage3_student(config, teacher, hr_source(args, config), log=logs.append)
    parents = {k: sha256(p[k]) for k in ("mln", "den_t", "rdan_t")}
    save_model(p["den_s"], student.den, "stage3", config, parents)
    save_model(p["rdan_s"], student.rdan, "stage3", config, parents)
    write_csv(run_dir / "stage3" / "log.csv", logs)
    record(run_dir, "stage3", argv, config, [p["den_s"], p["rdan_s"], run_dir / "stage3" / "log.csv"],
           inputs=[p["mln"], p["den_t"], p["rdan_t"]], started=started,
           lineage={"stage3": {"den_s": sha256(p["den_s"]), "rdan_s": sha256(p["rdan_s"]), "parents": parents}})
    print(f"stage3 checkpoints: {p['den_s']}, {p['rdan_s']}")


def _parse_widths(text):
    try:
        widths = [float(w) for w in text.split(",") if w.strip()]
    except ValueError as e:
        raise UserError(f"--widths must be comma-separated numbers, got {text!r}") from e
    if not widths or min(widths) <= 0:
        raise UserError("--widths needs positive values")
    return widths


def _specs(args, config):
    if args.widths:
        kernels = [KernelSpec.isotropic(w) for w in _parse_widths(args.widths)]
    else:
        kernels = gaussian8_suite(config.scale)
    return [DegradationSpec(kernel=k, scale=config.scale, noise_sigma=args.noise, rng_seed=config.seed)
            for k in kernels]


def cmd_eval(args, run_dir, argv, config):
    started = time.time()
    p = ckpt_paths(run_dir)
    if args.path == "teacher":
        sr_fn, inputs = teacher_sr_fn(load_teacher(run_dir, config), config.n, config.alpha), [p["mln"], p["den_t"], p["rdan_t"]]
    else:
        sr_fn, inputs = student_sr_fn(load_student(run_dir, config)), [p["den_s"], p["rdan_s"]]
    images = eval_images(args, config)
    checkpoint = hashlib.sha256("".join(sha256(x) for x in inputs).encode()).hexdigest()
    specs = _specs(args, config)
    if args.workers > 1:
        torch.set_num_threads(1)
    report = _evaluate_parallel(sr_fn, images, specs, args.workers, checkpoint, args.dataset)
    out = run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{args.path}.csv", out / f"{args.path}.json"
    report.to_csv(csv_path)
    report.to_json(json_path)
    record(run_dir, f"eval-{args.path}", argv, config, [csv_path, json_path], inputs=inputs, started=started)
    agg = report.aggregate()
    print(f"{args.path}: PSNR {agg['psnr']:.4f} dB  SSIM {agg['ssim']:.5f} over {agg['count']} images")


def _evaluate_parallel(sr_fn, images, specs, workers, checkpoint, dataset):
    if workers <= 1:
        return evaluate(sr_fn, images, specs, dataset=dataset, checkpoint=checkpoint)
    # one report per spec, merged in spec order so the output does not depend on scheduling
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda s: evaluate(sr_fn, images, [s], dataset=dataset, checkpoint=checkpoint), specs))
    report = parts[0]
    for part in parts[1:]:
        report.rows.extend(part.rows)
    return report


def cmd_export_idr(args, run_dir, argv, config):
    started = time.time()
    p = ckpt_paths(run_dir)
    if args.path == "teacher":
        extractor, inputs = teacher_extractor(load_teacher(run_dir, config), config.n, config.alpha), [p["mln"], p["den_t"]]
    elif args.path == "student":
        extractor, inputs = student_extractor(load_student(run_dir, config).den), [p["den_s"]]
    else:
        # untrained student extractor: the reference point for separability
        extractor, inputs = student_extractor(init_den(config.den_config(teacher=False), seed=config.seed + 4,
                                                       dtype=config.torch_dtype)), []
    specs = _specs(args, config)
    if len(specs) < 2:
        raise UserError("export needs at least two degradations")
    rows = export_idr(extractor, eval_images(args, config), specs, args.path)
    path = run_dir / "idr" / f"{args.path}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, rows)
    score = separability_score(rows)
    record(run_dir, f"export-idr-{args.path}", argv, config, [path], inputs=inputs, started=started)
    print(f"{args.path}: {len(rows)} rows, separability {score:.4f} -> {path}")


def cmd_adapt_curve(args, run_dir, argv, config):
    started = time.time()
    mln = load_mln(run_dir, config)
    widths = _parse_widths(args.widths) if args.widths else (config.widths or [0.5, 1.5, 2.5, 3.5])
    rng = np.random.default_rng(config.seed + 40)
    hr = eval_images(args, config)
    tasks = []
    for t in range(args.tasks):
        spec = DegradationSpec(kernel=KernelSpec.isotropic(widths[t % len(widths)]), scale=config.scale,
                               rng_seed=int(rng.integers(2**31 - 1)))
        tasks.append(make_task(hr, spec, rng, support_size=config.support_size, query_size=config.query_size,
                               patch_size=config.patch_size, dtype=config.torch_dtype))
    curve = adaptation_curve(mln, tasks, args.max_steps, config.alpha)
    path = run_dir / "curve" / "adapt_curve.csv"
    write_csv(path, [{"step": k, "psnr": f"{v:.6f}"} for k, v in curve])
    record(run_dir, "adapt-curve", argv, config, [path], inputs=[ckpt_paths(run_dir)["mln"]], started=started)
    for k, v in curve:
        print(f"{k:3d}  {v:.4f}")


# ---------------------------------------------------------------------------
# parser


def _common(p, training=True):
    p.add_argument("--run-dir", type=Path, default=None, help="run directory (default $MRDA_RUN_ROOT/default)")
    p.add_argument("--seed", type=int, default=None)
    if training:
        p.add_argument("--toy", action="store_true", help="desk-scale preset")
        p.add_argument("--config", default=None, help="JSON file with TrainConfig fields (flags win)")
        p.add_argument("--scale", type=int, choices=SCALES, default=None)
        p.add_argument("--mode", choices=MODES, default=None)
        p.add_argument("--hr-dir", default=None, help="directory of HR PNGs instead of synthetic images")


def _eval_opts(p, count=10, size=64):
    p.add_argument("--widths", default=None, help="comma-separated isotropic widths (default: Gaussian8 suite)")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--count", type=int, default=count, help="held-out synthetic images")
    p.add_argument("--size", type=int, default=size, help="held-out image size")


def build_parser():
    parser = _Parser(prog="mrda", description="Blind SR with meta-learned degradation representations.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="write an HR/LR corpus")
    _common(p, training=False)
    p.add_argument("--mode", choices=MODES, default="classic_iso")
    p.add_argument("--scale", type=int, choices=SCALES, default=4)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--hr-dir", default=None)
    p.add_argument("--workers", type=int, default=1)

    for name, text in (("stage1", "meta-pretrain the MLN"), ("stage2", "train the teacher"),
                       ("stage3", "distill the student")):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("eval", help="PSNR/SSIM report")
    _common(p)
    _eval_opts(p)
    p.add_argument("--path", choices=("student", "teacher"), default="student")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("export-idr", help="export degradation representations")
    _common(p)
    _eval_opts(p)
    p.add_argument("--path", choices=("student", "teacher", "baseline"), default="student")

    p = sub.add_parser("adapt-curve", help="query PSNR against inner-step count")
    _common(p)
    _eval_opts(p)
    p.add_argument("--tasks", type=int, default=20)
    p.add_argument("--max-steps", type=int, default=10)
    return parser


COMMANDS = {
    "stage1": cmd_stage1, "stage2": cmd_stage2, "stage3": cmd_stage3, "eval": cmd_eval,
    "export-idr": cmd_export_idr, "adapt-curve": cmd_adapt_curve,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        run_dir = Path(args.run_dir) if args.run_dir else default_run_dir()
        run_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            if args.seed is None:
                args.seed = 0
            if args.workers < 1:
                raise UserError("--workers must be >= 1")
            cmd_synth(args, run_dir, argv)
        else:
            if getattr(args, "workers", 1) < 1:
                raise UserError("--workers must be >= 1")
            config = resolve_config(args, run_dir)
            COMMANDS[args.command](args, run_dir, argv, config)
        return 0
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
