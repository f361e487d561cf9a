"""Command-line interface: ``nnpassport {train,attack,verify,report,gen-passport,dataset-gen}``.

Every run lives in one directory holding a config snapshot, the artifacts, and
``manifest.json`` with their SHA-256 hashes. A ``.lock`` file keeps two writers
out of the same directory.

Exit codes: 0 success or positive verdict, 1 negative verdict or incomplete
runs, 2 usage/config/artifact errors, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .data import load_dataset, write_idx
from .errors import NumericsError, PassportToolkitError, VerificationError
from .experiment import (ProtectionRun, arch_from_config, dataset_from_config, make_passport, protect, run_attack,
                         thresholds_from, train_reference)
from .models import build_model
from .passports import model_hash
from .persistence import atomic_write, load_checkpoint, load_passport, save_checkpoint, save_passport
from .verify import MetricsRecord, SignatureCurve, classify_protection, export_histogram, verify_ownership

log = logging.getLogger("nnpassport")

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_FILE = "config.json"
MODEL_FILE = "model.ckpt"
REFERENCE_FILE = "reference.ckpt"
PASSPORT_FILE = "passport.nnpp"
METRICS_FILE = "metrics.json"
EVIDENCE_FILE = "evidence.json"
MANIFEST_FILE = "manifest.json"
TELEMETRY_FILE = "telemetry.csv"
LOCK_FILE = ".lock"


class ArtifactError(PassportToolkitError):
    """A run directory is missing files or its manifest does not match."""


# run directories ------------------------------------------------------------

def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextlib.contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ArtifactError(f"{out} is locked by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ArtifactError(f"missing artifact {path}") from None
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"unreadable artifact {path}: {exc}") from None


def update_manifest(out: Path) -> dict:
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name not in (MANIFEST_FILE, LOCK_FILE)
                   and not p.name.startswith("."))
    manifest = {"version": __version__, "files": {p.name: file_hash(p) for p in files}}
    write_json(out / MANIFEST_FILE, manifest)
    return manifest


def check_manifest(out: Path, names) -> None:
    """Every listed artifact must exist and hash to its manifest entry."""
    path = out / MANIFEST_FILE
    if not path.exists():
        return
    recorded = read_json(path).get("files", {})
    for name in names:
        p = out / name
        if not p.exists():
            raise ArtifactError(f"missing artifact {p}")
        if name in recorded and file_hash(p) != recorded[name]:
            raise ArtifactError(f"{p} does not match its manifest hash; the run directory was modified")


def load_run(out: Path) -> ProtectionRun:
    needed = [CONFIG_FILE, MODEL_FILE, PASSPORT_FILE, METRICS_FILE]
    for name in needed:
        if not (out / name).exists():
            raise ArtifactError(f"missing artifact {out / name}; run `nnpassport train --out {out}` first")
    check_manifest(out, needed)
    config = load_config(out / CONFIG_FILE)
    dataset = dataset_from_config(config)
    model = load_checkpoint(out / MODEL_FILE)
    passport = load_passport(out / PASSPORT_FILE)
    model.bind(passport)
    reference = load_checkpoint(out / REFERENCE_FILE) if (out / REFERENCE_FILE).exists() else None
    metrics = read_json(out / METRICS_FILE)
    return ProtectionRun(config, dataset, model, passport, None, reference, metrics.get("A_o"),
                         recorded_accuracy=metrics["A_p"])


# commands -------------------------------------------------------------------

def cmd_train(args, config) -> int:
    out = Path(args.out)
    with run_lock(out):
        run = protect(config, baseline=args.baseline)
        write_json(out / CONFIG_FILE, config)
        save_checkpoint(run.model, out / MODEL_FILE)
        save_passport(run.passport, out / PASSPORT_FILE)
        if run.reference is not None:
            save_checkpoint(run.reference, out / REFERENCE_FILE)
        if run.result.telemetry is not None:
            run.result.telemetry.to_csv(out / TELEMETRY_FILE)
        metrics = {"kind": run.model.kind.value, "seed": config["seed"], "A_p": run.valid_accuracy,
                   "train_accuracy": run.result.train_accuracy, "initial_loss": run.result.initial_loss,
                   "final_loss": run.result.final_loss, "chance": run.dataset.chance, "attacks": {}}
        if run.baseline_accuracy is not None:
            metrics["A_o"] = run.baseline_accuracy
            metrics["I"] = run.baseline_accuracy - run.valid_accuracy
        write_json(out / METRICS_FILE, metrics)
        write_json(out / EVIDENCE_FILE, run.evidence())
        update_manifest(out)
    line = f"A_p={run.valid_accuracy:.2f}"
    if run.baseline_accuracy is not None:
        line += f" A_o={run.baseline_accuracy:.2f} I={metrics['I']:.2f}"
    print(f"trained {run.model.kind.value} {config['architecture']['name']} -> {out}  {line}")
    return EXIT_OK


def cmd_attack(args, config) -> int:
    out = Path(args.out)
    with run_lock(out):
        run = load_run(out)
        before = file_hash(out / MODEL_FILE)
        entries = run.config["attacks"]
        if args.kind:
            entries = [e for e in entries if e["kind"] in args.kind] + \
                      [{"kind": k} for k in args.kind if k not in {e["kind"] for e in entries}]
        metrics = read_json(out / METRICS_FILE)
        bin_width = run.config["histogram_bin_width"]
        for entry in entries:
            report = run_attack(run, entry, args.trials, args.budget_epochs)
            kind = report.attack_kind
            report.write(out / f"attack_{kind}.csv", out / f"attack_{kind}.json")
            export_histogram(report.accuracies, bin_width, out / f"hist_{kind}.csv",
                             metrics.get("A_o"), metrics["A_p"])
            record = MetricsRecord(metrics.get("A_o", metrics["A_p"]), metrics["A_p"], report.accuracies)
            metrics["attacks"][kind] = {"A_t": report.accuracies, "S": record.strengths, "A_t_mean": report.mean,
                                        "A_t_std": report.std, "S_mean": record.strength,
                                        "S_std": record.strength_std}
            if "A_o" in metrics:
                v = classify_protection(record, thresholds_from(run.config))
                metrics["attacks"][kind]["verdict"] = {"functionality_preserving": v.functionality_preserving,
                                                       "well_protected": v.well_protected}
            print(f"{kind}: {len(report.accuracies)} trials  A_t={report.mean:.2f} ({report.std:.2f})  "
                  f"S={record.strength:.2f}")
        if file_hash(out / MODEL_FILE) != before:
            raise ArtifactError("the attack modified the protected checkpoint")
        write_json(out / METRICS_FILE, metrics)
        update_manifest(out)
    return EXIT_OK


def cmd_verify(args, config) -> int:
    out = Path(args.out) if args.out else None
    suspect_path = Path(args.suspect) if args.suspect else (out / MODEL_FILE if out else None)
    passport_path = Path(args.passport) if args.passport else (out / PASSPORT_FILE if out else None)
    evidence_path = Path(args.evidence) if args.evidence else (out / EVIDENCE_FILE if out else None)
    if suspect_path is None or passport_path is None or evidence_path is None:
        raise ArtifactError("verify needs --out or all of --suspect, --passport and --evidence")
    if evidence_path.parent and (evidence_path.parent / MANIFEST_FILE).exists():
        check_manifest(evidence_path.parent, [evidence_path.name])
    evidence = read_json(evidence_path)
    try:
        curve = SignatureCurve.from_dict(evidence["signature_curve"])
        mp, kind, test_hash = float(evidence["M_p"]), evidence["kind"], evidence["test_hash"]
        dataset = load_dataset(evidence["dataset"])
        thresholds = thresholds_from({"thresholds": evidence.get("thresholds", config["thresholds"])})
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"evidence store {evidence_path} is incomplete or corrupt: {exc}") from None
    suspect = load_checkpoint(suspect_path)
    claimed = load_passport(passport_path)
    try:
        result = verify_ownership(suspect, claimed, mp, curve, dataset, thresholds, kind=kind,
                                  expected_test_hash=test_hash)
    except VerificationError as exc:
        print(f"verification negative: {exc}")
        return EXIT_NEGATIVE
    result.evidence["suspect_hash"] = model_hash(suspect)
    verdict_path = Path(args.verdict) if args.verdict else (out / "verdict.json" if out else None)
    if verdict_path is not None:
        result.write(verdict_path)
    print(json.dumps({"verdict": result.evidence["verdict"], "measured_M_p": result.evidence["measured_M_p"],
                      "recorded_M_p": mp}, sort_keys=True))
    return EXIT_OK if result.positive else EXIT_NEGATIVE


VARIANTS = ("V1", "V2", "V3")
ATTACKS = ("T1", "T2", "T3", "RevEng")


def fmt_cell(values) -> str:
    if not values:
        return "-"
    return f"{np.mean(values):.2f} ({np.std(values):.2f})"


def build_report(root: Path) -> tuple[str, list[str]]:
    """Tables of strength S and inconsistency I, one cell per variant x attack."""
    runs, incomplete = [], []
    for d in sorted({p.parent for p in root.rglob(CONFIG_FILE)}):
        if not (d / METRICS_FILE).exists():
            incomplete.append(f"{d}: no {METRICS_FILE}")
            continue
        try:
            runs.append(read_json(d / METRICS_FILE))
        except ArtifactError as exc:
            incomplete.append(str(exc))
            continue
        if not runs[-1].get("attacks"):
            incomplete.append(f"{d}: no attack results")
    strength = {(v, t): [] for v in VARIANTS for t in ATTACKS}
    inconsistency = {v: [] for v in VARIANTS}
    for m in runs:
        v = m.get("kind")
        if v not in VARIANTS:
            continue
        if "I" in m:
            inconsistency[v].append(m["I"])
        for t, rec in m.get("attacks", {}).items():
            if t in ATTACKS:
                strength[(v, t)].extend(rec["S"])
    lines = ["Protection strength S = A_p - A_t, mean (std) over all trials", "",
             "| variant | " + " | ".join(ATTACKS) + " |", "|---" * (len(ATTACKS) + 1) + "|"]
    for v in VARIANTS:
        lines.append(f"| {v} | " + " | ".join(fmt_cell(strength[(v, t)]) for t in ATTACKS) + " |")
    lines += ["", "Performance inconsistency I = A_o - A_p, mean (std) over runs", "",
              "| variant | I |", "|---|---|"]
    for v in VARIANTS:
        lines.append(f"| {v} | {fmt_cell(inconsistency[v])} |")
    lines += ["", f"runs: {len(runs)}"]
    return "\n".join(lines) + "\n", incomplete


def cmd_report(args, config) -> int:
    root = Path(args.out)
    if not root.is_dir():
        print(f"no run directory at {root}", file=sys.stderr)
        return EXIT_NEGATIVE
    text, incomplete = build_report(root)
    if "runs: 0" in text:
        print(f"no completed runs under {root}", file=sys.stderr)
        return EXIT_NEGATIVE
    atomic_write(root / "report.md", text.encode())
    print(text, end="")
    if incomplete:
        print("incomplete runs:", file=sys.stderr)
        for line in incomplete:
            print(f"  {line}", file=sys.stderr)
        return EXIT_NEGATIVE
    return EXIT_OK


def cmd_gen_passport(args, config) -> int:
    out = Path(args.out)
    with run_lock(out):
        dataset = dataset_from_config(config)
        model = build_model(arch_from_config(config, dataset))
        reference = None
        if config["passport"]["type"] != "random_pattern":
            if (out / REFERENCE_FILE).exists():
                reference = load_checkpoint(out / REFERENCE_FILE)
            else:
                reference = train_reference(config, dataset).model
                save_checkpoint(reference, out / REFERENCE_FILE)
        passport = make_passport(config, model, dataset, reference)
        save_passport(passport, out / PASSPORT_FILE)
        update_manifest(out)
    print(f"passport {passport.passport_type.value} for {passport.num_passport_layers} layers -> "
          f"{out / PASSPORT_FILE}  fingerprint {passport.fingerprint()[:16]}")
    return EXIT_OK


def cmd_dataset_gen(args, config) -> int:
    out = Path(args.out)
    with run_lock(out):
        ds = dataset_from_config(config)
        to_u8 = lambda x: np.clip(np.rint(x[:, 0] * 255), 0, 255).astype(np.uint8)
        write_idx(out / "train-images.idx", to_u8(ds.train_x))
        write_idx(out / "train-labels.idx", ds.train_y.astype(np.uint8))
        write_idx(out / "test-images.idx", to_u8(ds.test_x))
        write_idx(out / "test-labels.idx", ds.test_y.astype(np.uint8))
        write_json(out / "dataset.json", {"kind": "idx", "images": str(out / "train-images.idx"),
                                          "labels": str(out / "train-labels.idx"),
                                          "test_images": str(out / "test-images.idx"),
                                          "test_labels": str(out / "test-labels.idx"),
                                          "num_classes": ds.num_classes})
        update_manifest(out)
    print(f"{len(ds.train_y)} train / {len(ds.test_y)} test images -> {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "verify": cmd_verify, "report": cmd_report,
            "gen-passport": cmd_gen_passport, "dataset-gen": cmd_dataset_gen}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnpassport", description="Passport-based CNN ownership toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a protected network")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--baseline", action="store_true", help="also train the passport-free twin and record A_o")

    p = sub.add_parser("attack", parents=[common], help="run the configured attacks against a trained run")
    p.add_argument("--out", required=True, help="run directory produced by train")
    p.add_argument("--kind", action="append", choices=ATTACKS, help="restrict to these attacks (repeatable)")
    p.add_argument("--trials", type=int, help="fake-passport trials per attack")
    p.add_argument("--budget-epochs", type=int, help="reverse-engineering training budget")

    p = sub.add_parser("verify", parents=[common], help="verify ownership of a suspect network")
    p.add_argument("--out", help="run directory holding the owner's evidence")
    p.add_argument("--suspect", help="suspect checkpoint (default: the run's model.ckpt)")
    p.add_argument("--passport", help="claimed passport (default: the run's passport.nnpp)")
    p.add_argument("--evidence", help="evidence store (default: the run's evidence.json)")
    p.add_argument("--verdict", help="where to write the verdict JSON")

    p = sub.add_parser("report", parents=[common], help="summarize runs below a directory")
    p.add_argument("--out", required=True, help="directory containing run directories")

    p = sub.add_parser("gen-passport", parents=[common], help="generate a passport file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("dataset-gen", parents=[common], help="write the configured dataset as IDX files")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, args.override, args.seed)
        return COMMANDS[args.command](args, config)
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PassportToolkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
