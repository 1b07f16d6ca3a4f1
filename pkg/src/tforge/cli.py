"""``tforge inject|train|scan|report``.

A run directory (``--out``) collects every stage::

    RUN/inject/        trigger.json, poisoned.pt, samples.png, manifest.json
    RUN/model/         params.pt, meta.json, metrics.json, manifest.json
    RUN/scan/unicorn/  report.json, verdict.json, preview.pt, label_*/..., manifest.json
    RUN/scan/nc/       same layout for the baseline
    REPORT/            summary.json, summary.txt, figure.png, manifest.json

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__, attacks, data, inversion, nc, training
from .config import RunConfig, write_manifest
from .errors import TForgeError, UsageError
from .metrics import compute_sim, tabulate_detection
from .models import build_model, freeze

log = logging.getLogger("tforge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ENGINES = ("unicorn", "nc")
PREVIEW = 8


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="run directory (report: output directory)")
    p.add_argument("--jobs", type=int, default=1, help="parallel per-label workers for scan")
    p.add_argument("--force", action="store_true", help="overwrite existing stage output")
    p.add_argument("--data-root", help="CIFAR-10 directory (default: $TF_DATA_ROOT)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; VALUE is parsed as YAML")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tforge", description="Plant and invert backdoor triggers in image classifiers.")
    parser.add_argument("--version", action="version", version=f"tforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("inject", help="build the trigger spec and poisoned training set"))
    _common(sub.add_parser("train", help="train a (possibly backdoored) classifier"))
    p = sub.add_parser("scan", help="invert triggers for every label of the trained model")
    _common(p)
    p.add_argument("--engine", choices=ENGINES, default="unicorn")
    p = sub.add_parser("report", help="tabulate verdicts and render comparison figures")
    _common(p)
    p.add_argument("--engine", choices=ENGINES, default=None, help="restrict to one engine")
    p.add_argument("runs", nargs="*", help="run directories to summarize")
    return parser


def load_config(args) -> RunConfig:
    import yaml

    doc = {}
    if args.config:
        doc = RunConfig.load(args.config).to_dict()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        doc[key.strip()] = yaml.safe_load(value)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.data_root:
        doc["data_root"] = args.data_root
    return RunConfig.from_dict(doc)


def _claim(directory: Path, force: bool) -> Path:
    """Prepare a stage directory; existing output is replaced only with ``--force``."""
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise UsageError(f"{directory} already exists; pass --force to overwrite")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _load_data(cfg: RunConfig):
    return data.load_dataset(cfg.dataset, cfg.data_root, seed=cfg.seed, **cfg.dataset_kwargs())


def _load_spec(run: Path) -> attacks.TriggerSpec | None:
    path = run / "inject" / "trigger.json"
    return attacks.TriggerSpec.load(path) if path.is_file() else None


def cmd_inject(cfg: RunConfig, run: Path, force: bool) -> Path:
    if cfg.attack == "none":
        raise UsageError("inject needs an attack family; set 'attack' in the config")
    out = _claim(run / "inject", force)
    train, test = _load_data(cfg)
    spec = attacks.make_spec(cfg.attack, cfg.target_label, train.image_shape, seed=cfg.seed,
                             poison_rate=cfg.poison_rate, **cfg.attack_params)
    spec.save(out / "trigger.json")
    if spec.training_controlled:
        # the trigger is stamped on the fly during training; the stored set stays clean
        poisoned, idx = train, []
    else:
        poisoned = attacks.poison_dataset(train, spec, seed=cfg.seed)
        idx = poisoned.meta["poisoned_indices"]
    torch.save({"pixels": (poisoned.pixels * 255).round().to(torch.uint8), "labels": poisoned.labels,
                "num_classes": poisoned.num_classes, "poisoned_indices": torch.as_tensor(idx, dtype=torch.long)},
               out / "poisoned.pt")
    sample = test.pixels[:PREVIEW]
    data.render_png(torch.cat([sample, attacks.apply(spec, sample)]), out / "samples.png", grid=True, nrow=PREVIEW)
    write_manifest(out, "inject", cfg, family=spec.family, space=spec.space, poisoned=len(idx))
    log.info("inject: %s -> label %d, %d poisoned samples", spec.family, spec.target_label, len(idx))
    return out


def _training_set(cfg: RunConfig, run: Path, train: data.ImageBatch):
    if cfg.attack == "none":
        return train, None
    spec = _load_spec(run)
    path = run / "inject" / "poisoned.pt"
    if spec is None or not path.is_file():
        raise UsageError(f"missing injection output under {run / 'inject'}; run 'tforge inject' first")
    if spec.family != cfg.attack:
        raise UsageError(f"config attack {cfg.attack!r} does not match injected {spec.family!r}")
    doc = torch.load(path, map_location="cpu", weights_only=True)
    return data.ImageBatch(doc["pixels"].float() / 255.0, doc["labels"], doc["num_classes"]), spec


def cmd_train(cfg: RunConfig, run: Path, force: bool) -> Path:
    train_clean, test = _load_data(cfg)
    train_set, spec = _training_set(cfg, run, train_clean)
    out = _claim(run / "model", force)
    model = build_model(cfg.arch, train_set.num_classes, train_set.image_shape, seed=cfg.seed)
    t0 = time.time()
    ck = training.train(model, train_set, cfg.train_config(), spec)
    acc, asr = training.evaluate(model, test, spec)
    ck.metrics = {"accuracy": acc, "asr_inj": asr, "seconds": time.time() - t0}
    ck.config_digest = cfg.digest()
    ck.save(out)
    (out / "metrics.json").write_text(json.dumps(ck.metrics, indent=2))
    write_manifest(out, "train", cfg, trigger=spec.family if spec else "clean")
    log.info("train: accuracy %.4f, ASR-Inj %s", acc, "n/a" if asr is None else f"{asr:.4f}")
    return out


def cmd_scan(cfg: RunConfig, run: Path, engine: str, jobs: int, force: bool) -> Path:
    ck = training.Checkpoint.load(run / "model")
    _, test = _load_data(cfg)
    out = _claim(run / "scan" / engine, force)
    model = freeze(ck.model())
    defense = data.sample_defense_set(test, cfg.per_class, cfg.seed)
    eval_set = data.heldout(test, defense)
    if engine == "unicorn":
        report = inversion.scan_model(model, defense, cfg.budget(), cfg.opt_config(), eval_set,
                                      cfg.labels, jobs, out)
    else:
        report = nc.nc_scan(model, defense, cfg.nc_config(), eval_set, cfg.labels, jobs, out)
    verdict = inversion.decide_backdoor(report, cfg.detection_threshold)
    spec = _load_spec(run) if cfg.attack != "none" else None

    preview = {"original": defense.samples.pixels[:PREVIEW]}
    best = report.rows[0]
    hyp = _restore(model, engine, best, cfg) if best.error is None else None
    with torch.no_grad():
        if hyp is not None:
            preview["inverted"] = _stamp(hyp, engine, preview["original"])
        if spec is not None:
            preview["injected"] = attacks.apply(spec, preview["original"])
            if hyp is not None:
                report.meta["sim"] = compute_sim(model, lambda x: attacks.apply(spec, x),
                                                 lambda x: _stamp(hyp, engine, x), eval_set.subset(range(min(500, len(eval_set)))))
    torch.save(preview, out / "preview.pt")
    (out / "report.json").write_text(report.to_json())
    (out / "verdict.json").write_text(json.dumps({
        **asdict(verdict),
        "engine": engine,
        "ground_truth": spec is not None,
        "true_target": spec.target_label if spec else None,
        "family": spec.family if spec else "clean",
        "space": spec.space if spec else "clean",
    }, indent=2))
    write_manifest(out, f"scan:{engine}", cfg, checkpoint_digest=ck.config_digest, jobs=jobs,
                   verdict=asdict(verdict))
    log.info("scan[%s]: backdoored=%s label=%s score=%.4f", engine, verdict.backdoored, verdict.target_label,
             verdict.score)
    return out


def _restore(model, engine: str, row, cfg: RunConfig):
    path = Path(row.artifacts or "") / "hypothesis.pt"
    if not path.is_file():
        return None
    if engine == "nc":
        doc = torch.load(path, map_location="cpu", weights_only=True)
        return doc
    hyp = inversion.build_hypothesis(model, row.label, cfg.budget(), cfg.opt_config(), torch.Generator())
    return hyp.load_tensors(path).eval()


def _stamp(hyp, engine: str, x):
    if engine == "nc":
        m = hyp["mask"]
        return ((1 - m) * x + m * hyp["pattern"]).clamp(0, 1)
    return inversion.synthesize(x, hyp)


def _scan_dirs(runs, engine):
    found = []
    for run in runs:
        run = Path(run)
        if not run.is_dir():
            raise UsageError(f"run directory not found: {run}")
        for eng in (engine,) if engine else ENGINES:
            d = run / "scan" / eng
            if (d / "verdict.json").is_file():
                found.append((run, eng, d))
    return found


def cmd_report(runs, out: Path, engine: str | None, force: bool) -> Path:
    if not runs:
        raise UsageError("report needs at least one run directory")
    scans = _scan_dirs(runs, engine)
    if not scans:
        raise UsageError(f"no scan results found under {', '.join(map(str, runs))}")
    out = _claim(out, force)
    summary, lines, panels = {}, [], []
    for eng in ENGINES:
        rows = [(run, d) for run, e, d in scans if e == eng]
        if not rows:
            continue
        verdicts, truth, asr_by_space, sims, models = [], [], {}, {}, []
        for run, d in rows:
            v = json.loads((d / "verdict.json").read_text())
            rep = inversion.InversionReport.from_json((d / "report.json").read_text())
            verdicts.append(v["backdoored"])
            truth.append(v["ground_truth"])
            if v["ground_truth"]:
                true_row = next((r for r in rep.rows if r.label == v["true_target"]), None)
                if true_row is not None and true_row.asr_inv is not None:
                    asr_by_space.setdefault(v["family"], []).append(true_row.asr_inv)
                if "sim" in rep.meta:
                    sims.setdefault(v["family"], []).append(rep.meta["sim"])
            models.append({"run": str(run), **v})
            pv = torch.load(d / "preview.pt", map_location="cpu", weights_only=True)
            panels.append(pv)
        means = {k: sum(vs) / len(vs) for k, vs in asr_by_space.items()}
        sim = {k: sum(vs) / len(vs) for k, vs in sims.items()}
        table = tabulate_detection(verdicts, truth, means, sim)
        summary[eng] = {"detection": json.loads(table.to_json()), "models": models}
        lines.append(table.table(f"[{eng}] {len(rows)} model(s)"))
        for m in models:
            lines.append(f"  {m['run']}: {m['family']:<12} flagged={m['backdoored']!s:<5} "
                         f"label={m['target_label']} true={m['true_target']} score={m['score']:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    _figure(panels, out / "figure.png")
    cfg = RunConfig()
    write_manifest(out, "report", cfg, runs=[str(r) for r in runs])
    sys.stdout.write(text)
    return out


def _figure(panels, path: Path) -> None:
    """Original / injected / inverted rows per scanned model, stacked vertically."""
    strips = []
    for pv in panels:
        orig = pv["original"]
        blank = torch.ones_like(orig)
        strips += [orig, pv.get("injected", blank), pv.get("inverted", blank)]
    data.render_png(torch.cat(strips), path, grid=True, nrow=len(panels[0]["original"]))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        torch.set_num_threads(max(1, (os.cpu_count() or 1) // args.jobs))
        if args.command == "report":
            cmd_report(args.runs, Path(args.out), args.engine, args.force)
            return EXIT_OK
        cfg = load_config(args)
        run = Path(args.out)
        if args.command == "inject":
            cmd_inject(cfg, run, args.force)
        elif args.command == "train":
            cmd_train(cfg, run, args.force)
        else:
            cmd_scan(cfg, run, args.engine, args.jobs, args.force)
        return EXIT_OK
    except UsageError as exc:
        sys.stderr.write(f"tforge: error: {exc}\n")
        return EXIT_USAGE
    except (TForgeError, RuntimeError, OSError) as exc:
        sys.stderr.write(f"tforge: failed: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
