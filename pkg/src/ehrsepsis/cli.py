"""Command-line entry point: ``ehrsepsis {synth,prepare,train,evaluate,seraip,report}``.

Every command writes into its own run directory (``--out``, default
``runs/<command>-<timestamp>``) and leaves exactly one ``manifest.json``
there: the command line, the full configuration snapshot, the seed, content
hashes of inputs and outputs, the tool version and the wall-clock duration.
Failures exit nonzero and write a machine-readable ``error.json``.

Heavy modules are imported inside the commands so that ``--deterministic``
can pin the BLAS thread count before numpy loads.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__

log = logging.getLogger("ehrsepsis")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_SCHEMA = 4
EXIT_DIVERGED = 5
EXIT_INSUFFICIENT_DATA = 6

ENV_SEED = "EHRSEPSIS_SEED"
ENV_WORKERS = "EHRSEPSIS_WORKERS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

COHORT_SECTIONS = ("cohort", "departments", "negative_mix")
PIPELINE_SECTIONS = ("prepare", "gb", "mlp", "cnnlstm", "evaluate")
_SKIP_HASH = ("manifest.json", "error.json")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- helpers -------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root, skip=_SKIP_HASH) -> dict[str, str]:
    """``relative path -> sha256`` for every file under ``root`` (or of ``root`` itself)."""
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in skip:
            out[rel] = sha256_file(p)
    return out


def load_config(path):
    """Returns ``(CohortConfig, PipelineConfig, raw_text)``; any problem is a config error."""
    from .pipeline import PipelineConfig
    from .synth import CohortConfig

    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(EXIT_MISSING_INPUT, f"config file {p} not found")
        text = p.read_text()
    try:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        unknown = sorted(set(cp.sections()) - set(COHORT_SECTIONS) - set(PIPELINE_SECTIONS))
        if unknown:
            raise ValueError(f"unknown config section(s) {unknown}")
        return CohortConfig.from_ini(text), PipelineConfig.from_ini(text), text
    except CliError:
        raise
    except Exception as exc:  # parse errors surface as one exit code
        raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from exc


def resolve_seed(flag):
    if flag is not None:
        return flag
    raw = os.environ.get(ENV_SEED)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{ENV_SEED}={raw!r} is not an integer") from None


def resolve_workers(flag, deterministic: bool) -> int:
    if deterministic:
        return 1
    if flag is not None:
        n = flag
    elif os.environ.get(ENV_WORKERS, "").strip():
        try:
            n = int(os.environ[ENV_WORKERS])
        except ValueError:
            raise CliError(EXIT_CONFIG, f"{ENV_WORKERS}={os.environ[ENV_WORKERS]!r} is not an integer") from None
    else:
        from .pipeline import default_workers
        n = default_workers()
    if n < 1:
        raise CliError(EXIT_CONFIG, f"worker count must be >= 1, got {n}")
    return n


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING_INPUT, f"{what} {p} not found")
    return p


def _check_disjoint(out: Path, inputs) -> None:
    # commands never write into (and so never mutate) their inputs
    o = out.resolve()
    for p in inputs:
        q = Path(p).resolve()
        # out may not hold the input, nor sit inside an input directory
        if o == q or o in q.parents or (q.is_dir() and q in o.parents):
            err = CliError(EXIT_CONFIG, f"--out {out} overlaps input {p}")
            err.overlaps_input = True
            raise err


def _parse_horizons(raw):
    if raw is None:
        return None
    try:
        hs = tuple(float(x.strip().lstrip("t-").rstrip("h")) for x in raw.split(",") if x.strip())
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --horizons {raw!r}; expected e.g. 3,10,24") from None
    if not hs or any(h < 0 for h in hs):
        raise CliError(EXIT_CONFIG, f"bad --horizons {raw!r}")
    return hs


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")


class Run:
    """One command invocation: run directory, timing and the manifest."""

    def __init__(self, args, argv):
        self.command = args.command
        self.argv = list(argv)
        self.deterministic = bool(args.deterministic)
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        self.out = Path(args.out) if args.out else Path("runs") / f"{self.command}-{stamp}"
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        self.t0 = time.perf_counter()
        self.inputs: dict[str, Path] = {}
        self.config: dict = {}
        self.seed = None
        self.workers = 1
        self.details: dict = {}

    def open(self) -> None:
        _check_disjoint(self.out, self.inputs.values())
        self.out.mkdir(parents=True, exist_ok=True)
        for stale in _SKIP_HASH:
            (self.out / stale).unlink(missing_ok=True)

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "workers": self.workers,
            "config": self.config,
            "inputs": {name: {"path": str(p), "sha256": hash_tree(p)} for name, p in self.inputs.items()},
            "outputs": hash_tree(self.out),
            "started_utc": self.started,
            "duration_s": round(time.perf_counter() - self.t0, 3),
            "details": self.details,
        }

    def finish(self) -> dict:
        m = self.manifest()
        _write_json(self.out / "manifest.json", m)
        return m


# -- commands ------------------------------------------------------------------

def cmd_synth(args, run: Run) -> None:
    from dataclasses import replace

    from .cohort import write_jsonl
    from .synth import generate_cohort, validate_cohort

    cohort_cfg, _, _ = load_config(args.config)
    seed = resolve_seed(args.seed)
    if seed is not None:
        cohort_cfg = replace(cohort_cfg, seed=seed)
    if args.n is not None:
        cohort_cfg = replace(cohort_cfg, n_admissions=args.n)
    if args.profile is not None:
        cohort_cfg = replace(cohort_cfg, profile=args.profile)
    try:
        cohort_cfg.validate()
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid cohort config: {exc}") from exc
    run.seed, run.config = cohort_cfg.seed, {"ini": cohort_cfg.to_ini()}
    run.open()
    adms = generate_cohort(cohort_cfg, workers=run.workers)
    write_jsonl(run.out / "cohort.jsonl", adms)
    report = validate_cohort(adms, cohort_cfg)
    _write_json(run.out / "validation.json", report.to_json())
    for name, detail in report.violations:
        log.warning("synthetic cohort check %s failed: %s", name, detail)
    run.details = {"n_admissions": len(adms), "validation_ok": report.ok,
                   "prevalence": report.prevalence}


def cmd_prepare(args, run: Run) -> None:
    from .cohort import read_jsonl
    from .pipeline import prepare

    src = _require(args.cohort, "cohort file")
    run.inputs = {"cohort": src}
    _, pipe, _ = load_config(args.config)
    seed = resolve_seed(args.seed)
    if seed is not None:
        pipe = pipe.with_seed(seed)
    run.seed, run.config = pipe.prepare.seed, {"prepare": pipe.prepare.to_section()}
    run.open()
    run.details = prepare(read_jsonl(src), pipe.prepare, run.out)


def cmd_train(args, run: Run) -> None:
    from .pipeline import PreparedData, train_model

    prepared = _require(args.prepared, "prepared directory")
    run.inputs = {"prepared": prepared}
    _, pipe, _ = load_config(args.config)
    seed = resolve_seed(args.seed)
    if seed is not None:
        pipe = pipe.with_seed(seed)
    section = getattr(pipe, args.model)
    run.seed, run.config = section.seed, {args.model: section.to_section()}
    run.open()
    run.details = train_model(PreparedData(prepared), args.model, pipe, run.out)


def _scored_cases(args, run: Run, ecfg):
    from .pipeline import PreparedData, load_scorer, read_cases, score_cases

    prep = PreparedData(run.inputs["prepared"])
    scorer = load_scorer(run.inputs["model"])
    if getattr(args, "cases", None):
        return scorer, read_cases(run.inputs["cases"])
    ids = getattr(prep.split, args.split)
    return scorer, score_cases(prep, scorer, ids, ecfg, workers=run.workers)


def _eval_inputs(args, run: Run):
    from dataclasses import replace

    run.inputs = {"prepared": _require(args.prepared, "prepared directory"),
                  "model": _require(args.model_file, "model file")}
    if getattr(args, "cases", None):
        run.inputs["cases"] = _require(args.cases, "cases file")
    _, pipe, _ = load_config(args.config)
    ecfg = pipe.evaluate
    hs = _parse_horizons(args.horizons)
    if hs is not None:
        ecfg = replace(ecfg, horizons_h=hs)
    return ecfg


def cmd_evaluate(args, run: Run) -> None:
    from .pipeline import evaluate_cases, write_cases

    ecfg = _eval_inputs(args, run)
    run.config = {"evaluate": ecfg.to_section(), "split": args.split}
    run.open()
    scorer, cases = _scored_cases(args, run, ecfg)
    write_cases(run.out / "cases.jsonl", cases)
    run.details = evaluate_cases(cases, ecfg, run.out, model_name=args.name or scorer.kind)


def cmd_seraip(args, run: Run) -> None:
    from dataclasses import replace

    from .pipeline import seraip

    ecfg = _eval_inputs(args, run)
    if args.tau is not None:
        if not 0.0 < args.tau < 1.0:
            raise CliError(EXIT_CONFIG, f"--tau must lie in (0, 1), got {args.tau}")
        ecfg = replace(ecfg, tau=args.tau, tau_by_department={})
    run.config = {"evaluate": ecfg.to_section(), "split": args.split}
    run.open()
    _, cases = _scored_cases(args, run, ecfg)
    report = seraip(cases, ecfg, run.out)
    run.details = {"rows": len(report.rows), "footnotes": len(report.footnotes)}


def cmd_report(args, run: Run) -> None:
    """Collect evaluate/seraip run directories into one comparison table and overlay plots."""
    from .evaluation import curves_svg

    dirs = [_require(d, "run directory") for d in args.runs]
    run.inputs = {f"run{k}": d for k, d in enumerate(dirs)}
    run.open()
    rows, seraip_rows, curves = [], [], {}
    for k, d in enumerate(dirs):
        label = f"{k}:{d.name}"
        summ = d / "summary.json"
        if summ.is_file():
            doc = json.loads(summ.read_text())
            if "horizons" not in doc:
                raise CliError(EXIT_SCHEMA, f"{summ} is not an evaluation summary")
            for tag, b in doc["horizons"].items():
                rows.append({"run": label, "model": doc.get("model", ""), "horizon": tag, "n": b["n"],
                             "n_positive": b["n_positive"], "n_skipped": b["n_skipped"],
                             "auroc": b.get("auroc", ""), "average_precision": b.get("average_precision", "")})
                for kind in ("roc", "pr"):
                    path = d / f"{kind}_{tag}.csv"
                    if path.is_file():
                        with open(path, newline="") as fh:
                            r = list(csv.reader(fh))[1:]
                        xs = [float(x[0]) for x in r]
                        ys = [float(x[1]) for x in r]
                        curves.setdefault((kind, tag), []).append((f"{doc.get('model', '')} ({label})", xs, ys))
        ser = d / "seraip.csv"
        if ser.is_file():
            with open(ser, newline="") as fh:
                for r in csv.DictReader(fh):
                    seraip_rows.append({"run": label, **r})
        if not summ.is_file() and not ser.is_file():
            raise CliError(EXIT_MISSING_INPUT, f"{d} holds neither summary.json nor seraip.csv")
    cols = ["run", "model", "horizon", "n", "n_positive", "n_skipped", "auroc", "average_precision"]
    with open(run.out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)
    if seraip_rows:
        with open(run.out / "seraip_all.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, list(seraip_rows[0]))
            w.writeheader()
            w.writerows(seraip_rows)
    import numpy as np

    for (kind, tag), cs in sorted(curves.items()):
        cs = [(n, np.array(x), np.array(y)) for n, x, y in cs]
        if kind == "roc":
            svg = curves_svg(cs, f"ROC {tag}", "1 - specificity", "sensitivity", diagonal=True, ylim=(0, 1))
        else:
            svg = curves_svg(cs, f"PR {tag}", "recall", "precision", ylim=(0, 1))
        (run.out / f"{kind}_{tag}.svg").write_text(svg)
    lines = ["| model | horizon | n | positives | AUROC | AP |", "|---|---|---|---|---|---|"]
    for r in rows:
        fmt = (lambda v: f"{v:.3f}" if isinstance(v, float) else "n/a")
        lines.append(f"| {r['model']} ({r['run']}) | {r['horizon']} | {r['n']} | {r['n_positive']} "
                     f"| {fmt(r['auroc'])} | {fmt(r['average_precision'])} |")
    (run.out / "report.md").write_text("\n".join(lines) + "\n")
    run.details = {"evaluations": len(rows), "seraip_rows": len(seraip_rows)}


COMMANDS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "seraip": cmd_seraip, "report": cmd_report}


# -- argument parsing and error mapping ------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help=f"master seed (overrides the config and ${ENV_SEED})")
    common.add_argument("--deterministic", action="store_true",
                        help="single worker, single BLAS thread, ordered execution")
    common.add_argument("--workers", type=int, help=f"worker processes (default ${ENV_WORKERS} or CPU count, max 4)")
    common.add_argument("--out", help="run directory (default runs/<command>-<timestamp>)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="ehrsepsis", description="Early sepsis prediction pipeline on EHR event data.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic admissions cohort")
    p.add_argument("--n", type=int, help="number of admissions (overrides the config)")
    p.add_argument("--profile", help="vital completeness profile: fig4, full or sparse60")

    p = sub.add_parser("prepare", parents=[common], help="label, filter, split and featurize a cohort")
    p.add_argument("cohort", help="admissions JSONL file")

    p = sub.add_parser("train", parents=[common], help="train one model family")
    p.add_argument("prepared", help="prepared directory")
    p.add_argument("--model", required=True, choices=("gb", "mlp", "cnnlstm"))

    for name, helptext in (("evaluate", "ROC/PR/DCA/calibration at each horizon"),
                           ("seraip", "sequential risk table per department and horizon")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("prepared", help="prepared directory")
        p.add_argument("model_file", help="model.json (gb) or model.bin (mlp, cnnlstm)")
        p.add_argument("--horizons", help="hours before the label time, e.g. 3,10,24")
        p.add_argument("--split", default="test", choices=("test", "validation"))
        p.add_argument("--cases", help="reuse a cases.jsonl from an evaluate run instead of rescoring")
        if name == "evaluate":
            p.add_argument("--name", help="model name used in plot titles")
        else:
            p.add_argument("--tau", type=float, help="decision threshold for every department")

    p = sub.add_parser("report", parents=[common], help="compare evaluate and seraip runs")
    p.add_argument("runs", nargs="+", help="evaluate or seraip run directories")
    return ap


def exit_code_for(exc: BaseException) -> int:
    from .cohort import InsufficientNegatives, SchemaError
    from .evaluation import MetricError
    from .nn.serialize import ModelFormatError
    from .nn.train import TrainingDiverged
    from .synth import ConfigError

    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ConfigError, configparser.Error)):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING_INPUT
    if isinstance(exc, (SchemaError, ModelFormatError)):
        return EXIT_SCHEMA
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, (InsufficientNegatives, MetricError)):
        return EXIT_INSUFFICIENT_DATA
    return EXIT_ERROR


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.deterministic:
        for var in _THREAD_VARS:
            os.environ[var] = "1"
    run = Run(args, argv)
    try:
        run.workers = resolve_workers(args.workers, args.deterministic)
        COMMANDS[args.command](args, run)
        m = run.finish()
    except KeyboardInterrupt:
        raise
    except BaseException as exc:  # noqa: BLE001 - every failure becomes an exit code
        code = exit_code_for(exc)
        doc = {"command": args.command, "code": code, "error": type(exc).__name__, "message": str(exc)}
        if code == EXIT_ERROR:
            log.exception("unexpected failure")
        print(json.dumps(doc), file=sys.stderr)
        if not getattr(exc, "overlaps_input", False):
            try:
                run.out.mkdir(parents=True, exist_ok=True)
                _write_json(run.out / "error.json", doc)
            except OSError:
                pass
        return code
    print(json.dumps({"command": args.command, "run_dir": str(run.out), "duration_s": m["duration_s"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
