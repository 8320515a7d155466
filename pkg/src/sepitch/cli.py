"""``sepitch`` command line: corpus synthesis, both training stages, evaluation, reports.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .audio import read_wav, write_wav
from .config import ConfigValidationError, RunConfig, load_config, parse_overrides
from .pitch import read_track, write_track

log = logging.getLogger("sepitch")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

RUN_CONFIG = "config.txt"
PSEUDO_INDEX = "pseudo/pseudo.tsv"


class MissingArtifactError(FileNotFoundError):
    """A prerequisite file is absent; the message names the subcommand that makes it."""


class ArtifactExistsError(FileExistsError):
    pass


class GradCheckFailed(ad.NumericalError):
    pass


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `sepitch {producer}` first")
    return path


def _claim(paths, force: bool):
    """Refuse to overwrite existing outputs unless forced."""
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise ArtifactExistsError(f"{existing[0]} already exists; pass --force to overwrite")


def _config(args, base: RunConfig | None = None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, args.overrides)
        return cfg
    return parse_overrides(args.overrides, base).validate()


def _run_config(args) -> RunConfig:
    """Configuration for a run directory: the stored one, then CLI overrides."""
    stored = Path(args.run) / RUN_CONFIG
    if args.config or not stored.exists():
        return _config(args)
    return load_config(stored, args.overrides)


def _write_manifest(out_dir: Path, name: str, cfg: RunConfig, argv) -> Path:
    path = out_dir / f"manifest_{name}.txt"
    text = cfg.manifest_text() + f"command=sepitch {' '.join(argv)}\n"
    path.write_text(text)
    return path


def _corpus(path):
    from .synth import Manifest
    root = Path(path)
    _require(root / "manifest.txt", "synth")
    return Manifest.load(root)


# --- subcommands -----------------------------------------------------------------

def cmd_synth(args, argv):
    from .synth import make_corpus
    cfg = _config(args)
    out = Path(args.out)
    _claim([out / "manifest.txt"], args.force)
    manifest = make_corpus(cfg.synth_spec(), out, cfg.grid())
    (out / RUN_CONFIG).write_text(cfg.manifest_text())
    _write_manifest(out, "synth", cfg, argv)
    counts = {}
    for e in manifest.entries:
        counts[(e.split, e.label_kind)] = counts.get((e.split, e.label_kind), 0) + 1
    for (split, kind), n in sorted(counts.items()):
        print(f"{split:5s} {kind:8s} {n}")
    return EXIT_OK


def _write_epochs(rows, path):
    from .report import write_rows_csv
    cols = ["epoch", "lr", "l_mss", "l_pe", "l_dwhs", "l_total", "val_rpa", "val_sdr"]
    write_rows_csv(rows, path, cols)


def _train_stage(args, argv, stage: int):
    from .semisup import init_model, manifest_items, train
    manifest = _corpus(args.corpus)
    run = Path(args.run)
    if stage == 1:
        base_stored = Path(args.corpus) / RUN_CONFIG
        cfg = _config(args, load_config(base_stored) if base_stored.exists() and not args.config
                      else None)
    else:
        _require(run / PSEUDO_INDEX, "pseudo-label")
        cfg = _run_config(args)
    outs = [run / f"stage{stage}.ckpt", run / f"stage{stage}_steps.jsonl",
            run / f"stage{stage}_epochs.csv"]
    _claim(outs, args.force)
    run.mkdir(parents=True, exist_ok=True)
    val = manifest_items(manifest, "val")
    train_items = [it for it in manifest_items(manifest, "train") if it.label_kind == "fully"]
    model = None
    if stage == 2:
        train_items += _load_pseudo(manifest, run)
        model = init_model(cfg, "stage2")
        if cfg.warm_start_dwm and model.dwm is not None:
            tensors, _ = ad.load_checkpoint(_require(run / "stage1.ckpt", "train-stage1"))
            for k, t in model.params.items():
                if k.startswith("dwm."):
                    t.data[...] = tensors[k]
    if stage == 1:
        (run / RUN_CONFIG).write_text(cfg.manifest_text())
    with open(outs[1], "w") as step_log:
        res = train(train_items, cfg, "stage1" if stage == 1 else "stage2", stage2=stage == 2,
                    val_items=val or None, step_log=step_log, model=model)
    ad.save_checkpoint(outs[0], res.model.params, res.optimizer, cfg.as_dict(),
                       extra={"stage": stage, "epochs": len(res.epochs),
                              "weighting": cfg.weighting, "code_version": __version__})
    _write_epochs(res.epochs, outs[2])
    _write_manifest(run, f"train-stage{stage}", cfg, argv)
    last = res.epochs[-1]
    print(f"stage {stage}: {len(res.epochs)} epochs, l_mss={last['l_mss']:.5f} "
          f"l_pe={last['l_pe']:.4f}" +
          (f" val_rpa={last['val_rpa']:.4f} val_sdr={last['val_sdr']:.3f}"
           if "val_rpa" in last else ""))
    return EXIT_OK


def cmd_train_stage1(args, argv):
    return _train_stage(args, argv, 1)


def cmd_train_stage2(args, argv):
    return _train_stage(args, argv, 2)


def _load_model(cfg: RunConfig, ckpt: Path, stream: str):
    from .semisup import init_model
    tensors, header = ad.load_checkpoint(ckpt)
    if header["config_hash"] != cfg.hash():
        log.warning("%s was trained with a different configuration (hash %s, now %s)",
                    ckpt, header["config_hash"], cfg.hash())
    model = init_model(cfg, stream)
    ad.restore(model.params, tensors)
    model.trained = True
    return model


def cmd_pseudo_label(args, argv):
    from .semisup import gate, generate_pseudo, manifest_items
    manifest = _corpus(args.corpus)
    run = Path(args.run)
    ckpt = _require(run / "stage1.ckpt", "train-stage1")
    cfg = _run_config(args)
    index = run / PSEUDO_INDEX
    _claim([index], args.force)
    index.parent.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, ckpt, "stage1")
    single = [it for it in manifest_items(manifest, "train") if it.label_kind != "fully"]
    lines = ["# id\tlabel_kind\tpseudo\tfile\tconfidence\tkept\n"]
    for it in single:
        p = generate_pseudo(model, it, cfg.stft_config())
        if p.pseudo == "pe":
            rel, conf = f"{it.id}.f0.txt", p.confi_pe
            write_track(index.parent / rel, p.pitch)
        else:
            rel, conf = f"{it.id}.vocal.wav", p.confi_mss
            write_wav(index.parent / rel, p.target)
        np.savetxt(index.parent / f"{it.id}.confi.txt", conf, fmt="%.17g")
        kept = float(np.mean(gate(conf, cfg.th)))
        lines.append(f"{it.id}\t{it.label_kind}\t{p.pseudo}\t{rel}\t{it.id}.confi.txt\t{kept!r}\n")
    index.write_text("".join(lines))
    _write_manifest(run, "pseudo-label", cfg, argv)
    print(f"pseudo-labelled {len(single)} items -> {index}")
    return EXIT_OK


def _load_pseudo(manifest, run: Path) -> list:
    from dataclasses import replace
    from .semisup import manifest_items
    index = _require(run / PSEUDO_INDEX, "pseudo-label")
    by_id = {it.id: it for it in manifest_items(manifest, "train")}
    out = []
    for line in index.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        item_id, kind, pseudo, rel, conf_rel, _ = line.split("\t")
        if item_id not in by_id:
            raise ConfigValidationError(f"pseudo label for unknown item {item_id!r}")
        conf = np.atleast_1d(np.loadtxt(index.parent / conf_rel))
        it = by_id[item_id]
        if pseudo == "pe":
            out.append(replace(it, pitch=read_track(index.parent / rel), confi_pe=conf,
                               pseudo="pe", _stft_cache={}))
        else:
            out.append(replace(it, target=read_wav(index.parent / rel), confi_mss=conf,
                               pseudo="mss", _stft_cache={}))
    return out


def _print_summary(summary: dict):
    from .report import format_table
    cols = ["n_items", "sdr", "gnsdr", "rpa", "rca"]
    print(format_table([summary], cols))


def cmd_eval(args, argv):
    from .semisup import evaluate, manifest_items, score_items
    manifest = _corpus(args.corpus)
    items = [it for it in manifest_items(manifest, args.split) if it.complete]
    if not items:
        raise ConfigValidationError(f"split {args.split!r} has no fully-labeled items")
    if args.pred_dir:
        pred = Path(args.pred_dir)
        sources, tracks = [], []
        for it in items:
            sources.append(read_wav(_require(pred / f"{it.id}.vocal.wav", "eval --run")))
            tracks.append(read_track(_require(pred / f"{it.id}.f0.txt", "eval --run")))
        result = score_items(items, sources, tracks)
        out_base = Path(args.out) if args.out else None
        cfg = _config(args)
    else:
        if not args.run:
            raise ConfigValidationError("eval needs --run or --pred-dir")
        run = Path(args.run)
        stage = args.stage or (2 if (run / "stage2.ckpt").exists() else 1)
        ckpt = _require(run / f"stage{stage}.ckpt", f"train-stage{stage}")
        cfg = _run_config(args)
        model = _load_model(cfg, ckpt, f"stage{stage}")
        result = evaluate(model, items, cfg)
        out_base = Path(args.out) if args.out else run / f"eval_stage{stage}_{args.split}"
    if out_base is not None:
        outs = [out_base.with_suffix(".json"), out_base.with_suffix(".csv")]
        _claim(outs, args.force)
        out_base.parent.mkdir(parents=True, exist_ok=True)
        from .report import write_rows_csv
        outs[0].write_text(json.dumps(result["summary"], indent=1, sort_keys=True,
                                      default=_json_float) + "\n")
        write_rows_csv(result["items"], outs[1])
        _write_manifest(out_base.parent, "eval", cfg, argv)
    _print_summary(result["summary"])
    return EXIT_OK


def _json_float(v):
    return float(v)


def cmd_gradcheck(args, argv):
    from .checks import run_suite
    reports = run_suite(seed=args.seed, tol=args.tol)
    failed = [name for name, r in reports if not r.passed]
    for name, r in reports:
        print(f"{name:18s} {r.summary()}")
    if failed:
        raise GradCheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_report(args, argv):
    from . import report as rp
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "report"
    logs = sorted(run.glob("stage*_steps.jsonl"))
    if not logs:
        raise MissingArtifactError(f"no step logs in {run}; run `sepitch train-stage1` first")
    products = []
    for lp in logs:
        stem = lp.name.replace("_steps.jsonl", "")
        products += [out / f"{stem}_weights.csv", out / f"{stem}_weights.png",
                     out / f"{stem}_losses.csv", out / f"{stem}_losses.png"]
    evals = sorted(run.glob("eval_*.json"))
    if evals:
        products += [out / "metrics.csv", out / "metrics.txt", out / "metrics.png"]
    _claim(products, args.force)
    out.mkdir(parents=True, exist_ok=True)
    for lp in logs:
        stem = lp.name.replace("_steps.jsonl", "")
        recs = rp.read_step_log(lp)
        if not recs:
            raise ConfigValidationError(f"{lp} is empty")
        traj = rp.weight_trajectories(recs)
        rp.write_trajectory_csv(traj, out / f"{stem}_weights.csv")
        rp.plot_trajectories(traj, out / f"{stem}_weights.png", title=f"{stem} weights by case")
        rows = rp.epoch_rows_from_steps(recs)
        rp.write_rows_csv(rows, out / f"{stem}_losses.csv")
        rp.plot_losses(rows, out / f"{stem}_losses.png")
    if evals:
        summaries = {p.stem: json.loads(p.read_text()) for p in evals}
        rows = rp.metrics_table(summaries)
        cols = ["run", *rp.METRIC_COLUMNS]
        rp.write_rows_csv(rows, out / "metrics.csv", cols)
        (out / "metrics.txt").write_text(rp.format_table(rows, cols) + "\n")
        rp.plot_metrics(rows, out / "metrics.png")
        print(rp.format_table(rows, cols))
    print(f"report written to {out}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sepitch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sepitch {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run=False, corpus=False):
        sp.add_argument("--config", help="flat key=value configuration file")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if corpus:
            sp.add_argument("--corpus", required=True, help="corpus directory from `synth`")
        if run:
            sp.add_argument("--run", required=True, help="run directory")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="configuration overrides")

    sp = sub.add_parser("synth", help="write the synthetic corpus")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=cmd_synth)

    for name, fn, text in (("train-stage1", cmd_train_stage1, "supervised stage"),
                           ("pseudo-label", cmd_pseudo_label, "label single-labeled items"),
                           ("train-stage2", cmd_train_stage2, "retrain with pseudo labels")):
        sp = sub.add_parser(name, help=text)
        common(sp, run=True, corpus=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("eval", help="score a checkpoint or a prediction directory")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run")
    sp.add_argument("--stage", type=int, choices=(1, 2))
    sp.add_argument("--pred-dir", help="directory of <id>.vocal.wav and <id>.f0.txt")
    sp.add_argument("--split", default="test", choices=("train", "test", "val"))
    sp.add_argument("--out", help="output path stem for .json/.csv results")
    common(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every primitive")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck, overrides=[])

    sp = sub.add_parser("report", help="tables and weight-trajectory figures")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args, argv)
    except (ConfigValidationError, ad.ShapeError, ad.ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ad.NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
