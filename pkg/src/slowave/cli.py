"""Command-line entry point.

Subcommands:
  synth    generate synthetic cohorts (EDF + ground-truth sidecars + manifest)
  train    fit a detection system on a cohort manifest -> model bundle JSON
  predict  score one EDF with a model bundle (prints wall time)
  eval     LOSO/LOIO cross-validation -> metrics CSV + JSON
  report   degrees-of-slowing report for one EDF -> JSON + scalp-value CSV

Full pipelines are driven by JSON configs (unknown keys are rejected);
flags override seeds/paths. Exit code 1 carries a machine-readable error
JSON on stderr. SLOWAVE_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import shallow
from .detect import degrees_of_slowing, CnnDetector, ShallowDetector, UlsThresholdDetector, UlsNormalizer
from .edf import Recording, read_edf
from .errors import ConfigError, EdfFormatError, LeakageError, ModelError, SlowaveError
from .eval import LoioFold, LoioPlan, make_loio_plan, results_csv, run_loio, run_loso
from .preprocess import PreprocessConfig, preprocess_recording
from .synth import GroundTruth, SynthConfig, SlowingSpec, generate_cohort, load_manifest, write_cohort
from .systems import SlowingSystem, SubjectData, SystemConfig, prepare_subject
from .systems import _FittedDetector, _subject_histogram_features, FittedSystem

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "slowave-bundle"
BUNDLE_VERSION = 1


class ModelInputMismatch(SlowaveError):
    """Recording shape does not match what the model bundle was trained on."""


_ERROR_KINDS = {
    ModelInputMismatch: "model_input_mismatch",
    ConfigError: "config_error",
    EdfFormatError: "edf_format_error",
    LeakageError: "leakage_error",
    ModelError: "model_error",
}


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _load_json(path: str | Path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} file {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# synth


_SYNTH_SITE_KEYS = {
    "site", "n_subjects", "duration_s", "fs", "one_over_f_exponent",
    "background_amplitude", "alpha_amplitude", "alpha_freq_hz",
    "noise_amplitude", "delta_boost", "slowing_fraction", "seed", "slowing",
}
_SLOWING_KEYS = {
    "band", "amplitude", "burst_duration_s", "coverage_slowing",
    "coverage_slow_free", "generalized_fraction", "focal_channels",
}


def _site_config(doc: dict, seed_offset: int, default_seed: int) -> SynthConfig:
    _check_keys(doc, _SYNTH_SITE_KEYS, "synth site config")
    doc = dict(doc)
    slowing_doc = doc.pop("slowing", None)
    if slowing_doc is not None:
        _check_keys(slowing_doc, _SLOWING_KEYS, "slowing config")
        for key in ("burst_duration_s", "coverage_slowing", "coverage_slow_free", "focal_channels"):
            if key in slowing_doc:
                slowing_doc[key] = tuple(slowing_doc[key])
        doc["slowing"] = SlowingSpec(**slowing_doc)
    doc.setdefault("seed", default_seed + seed_offset)
    try:
        return SynthConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad synth site config: {exc}") from exc


def cmd_synth(args: argparse.Namespace) -> int:
    doc = _load_json(args.config, "synth config")
    _check_keys(doc, {"sites", "seed"}, "synth config")
    sites = doc.get("sites")
    if not sites:
        raise ConfigError("synth config needs a non-empty 'sites' list")
    default_seed = args.seed if args.seed is not None else doc.get("seed", 0)
    out_dir = Path(args.out)
    manifest = None
    for offset, site_doc in enumerate(sites):
        cfg = _site_config(site_doc, offset, default_seed)
        cohort = generate_cohort(cfg)
        manifest = write_cohort(cohort, out_dir, site=cfg.site)
        logger.info("site %s: %d subjects written", cfg.site, len(cohort))
    print(f"manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# shared cohort loading


def _system_config(doc: dict) -> SystemConfig:
    _check_keys(
        doc,
        {
            "system", "level", "n_bins", "classifier_kind", "uls_feature",
            "uls_theta", "normalizer_max_recordings", "shallow_kind",
            "cnn", "detector_cap_per_subject",
        },
        "system config",
    )
    doc = dict(doc)
    cnn_doc = doc.pop("cnn", None)
    kwargs = dict(doc)
    if cnn_doc is not None:
        _check_keys(
            cnn_doc,
            {"n_conv_layers", "n_fc_layers", "n_filters", "kernel_len",
             "lr", "patience", "max_iters", "batch_size"},
            "cnn config",
        )
        arch_keys = {k: v for k, v in cnn_doc.items()
                     if k in ("n_conv_layers", "n_fc_layers", "n_filters", "kernel_len")}
        train_keys = {k: v for k, v in cnn_doc.items()
                      if k in ("lr", "patience", "max_iters", "batch_size")}
        try:
            kwargs["arch"] = cnn_mod.CnnArch(**arch_keys)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        kwargs["train"] = cnn_mod.TrainConfig(**train_keys)
    try:
        return SystemConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad system config: {exc}") from exc


def _load_subjects(
    manifest_path: str | Path,
    notch_hz: float,
    sites: list[str] | None = None,
) -> list[SubjectData]:
    entries = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    subjects = []
    pp_cfg = PreprocessConfig(notch_hz=notch_hz)
    for entry in entries:
        if sites and entry["site"] not in sites:
            continue
        rec = read_edf(base / entry["edf"])
        rec.meta["subject_id"] = entry["subject_id"]
        rec.meta["site_id"] = entry["site"]
        gt = GroundTruth.from_json_dict(_load_json(base / entry["ground_truth"], "ground truth"))
        processed, _ = preprocess_recording(rec, pp_cfg)
        subjects.append(prepare_subject(processed, gt))
    if not subjects:
        raise ConfigError("no subjects matched the manifest/site selection")
    return subjects


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    doc = _load_json(args.config, "train config")
    _check_keys(doc, {"manifest", "notch_hz", "seed", "sites", "system_config"}, "train config")
    if "manifest" not in doc or "system_config" not in doc:
        raise ConfigError("train config needs 'manifest' and 'system_config'")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    sys_cfg = _system_config(doc["system_config"])
    subjects = _load_subjects(doc["manifest"], doc.get("notch_hz", 50.0), doc.get("sites"))
    fitted = SlowingSystem(sys_cfg).fit(subjects, subjects, seed=seed)
    bundle = _bundle_to_json(sys_cfg, fitted, subjects[0].n_channels)
    out = Path(args.out)
    out.write_text(json.dumps(bundle))
    print(f"model bundle: {out}")
    return 0


def _bundle_to_json(cfg: SystemConfig, fitted: FittedSystem, n_channels: int) -> dict:
    det = fitted.detector
    detector_doc: dict = {"kind": det.kind}
    if det.kind == "uls":
        detector_doc.update(
            feature=cfg.uls_feature, theta=det.uls_theta, normalizer_c=det.normalizer_c
        )
    elif det.kind == "shallow":
        detector_doc["model"] = det.shallow_model.to_json_dict()
    else:
        detector_doc["model"] = det.cnn_model.to_json_dict()
    return {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "system": cfg.system,
        "level": cfg.level,
        "n_bins": cfg.n_bins,
        "n_channels": n_channels,
        "detector": detector_doc,
        "classifier": fitted.classifier.to_json_dict() if fitted.classifier else None,
    }


def _bundle_from_json(doc: dict) -> tuple[SystemConfig, FittedSystem, int]:
    if doc.get("format") != BUNDLE_FORMAT:
        raise ModelError(f"not a {BUNDLE_FORMAT} document")
    if doc.get("version") != BUNDLE_VERSION:
        raise ModelError(f"unsupported bundle version {doc.get('version')!r}")
    det_doc = doc["detector"]
    kind = det_doc["kind"]
    from .spectral import FEATURE_NAMES, UP_FEATURES

    if kind == "uls":
        det = _FittedDetector(
            kind="uls",
            uls_feature_col=FEATURE_NAMES.index(det_doc["feature"]),
            uls_theta=det_doc["theta"],
            uls_up=det_doc["feature"] in UP_FEATURES,
            normalizer_c=det_doc.get("normalizer_c"),
        )
        cfg_extra = {"uls_feature": det_doc["feature"], "uls_theta": det_doc["theta"]}
    elif kind == "shallow":
        det = _FittedDetector(kind="shallow", shallow_model=shallow.ShallowModel.from_json_dict(det_doc["model"]))
        cfg_extra = {}
    else:
        det = _FittedDetector(kind="cnn", cnn_model=cnn_mod.CnnModel.from_json_dict(det_doc["model"]))
        cfg_extra = {}
    cfg = SystemConfig(
        system=doc["system"], level=doc["level"], n_bins=doc["n_bins"], **cfg_extra
    )
    classifier = (
        shallow.ShallowModel.from_json_dict(doc["classifier"]) if doc.get("classifier") else None
    )
    return cfg, FittedSystem(cfg, det, classifier), int(doc["n_channels"])


# ---------------------------------------------------------------------------
# predict


def _load_and_prepare_edf(
    path: str | Path, notch_hz: float, expected_channels: int | None
) -> SubjectData:
    rec = read_edf(path)
    if expected_channels is not None and rec.n_channels != expected_channels:
        raise ModelInputMismatch(
            f"model was trained on {expected_channels} channels, "
            f"recording has {rec.n_channels}"
        )
    processed, mask = preprocess_recording(rec, PreprocessConfig(notch_hz=notch_hz))
    return prepare_subject(processed)


def _parallel_scores(det: _FittedDetector, subject: SubjectData, jobs: int) -> np.ndarray:
    if jobs <= 1:
        return det.histogram_values(subject)
    chunks = np.array_split(np.arange(subject.spectra.shape[0]), jobs)

    def work(idx: np.ndarray) -> np.ndarray:
        piece = SubjectData(
            subject.subject_id, subject.site, subject.eeg_label,
            subject.n_channels, subject.n_segments,
            subject.spectra[idx], subject.features8[idx],
        )
        return det.histogram_values(piece)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(work, chunks))
    return np.concatenate(parts)


def cmd_predict(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    bundle_doc = _load_json(args.model, "model bundle")
    cfg, fitted, n_channels = _bundle_from_json(bundle_doc)
    subject = _load_and_prepare_edf(args.edf, args.notch_hz, n_channels)
    from .detect import build_histogram, histogram_features

    values = _parallel_scores(fitted.detector, subject, args.jobs)
    report: dict = {
        "system": cfg.system,
        "level": cfg.level,
        "n_segments": subject.n_segments,
        "n_channels": subject.n_channels,
    }
    if cfg.level == "eeg":
        hist = build_histogram(values, cfg.n_bins, fitted.detector.histogram_mode)
        row = histogram_features(values, hist).vector()
        score = float(fitted.classifier.predict_score(row[None, :])[0])
        report["eeg_score"] = score
        report["eeg_label"] = int(score > 0.5)
    elif cfg.level == "segment":
        per_seg = values.reshape(subject.n_segments, subject.n_channels)
        rows = []
        for i in range(subject.n_segments):
            hist = build_histogram(per_seg[i], cfg.n_bins, fitted.detector.histogram_mode)
            rows.append(histogram_features(per_seg[i], hist).vector())
        scores = fitted.classifier.predict_score(np.vstack(rows))
        report["segment_scores"] = [float(s) for s in scores]
        report["segment_labels"] = [int(s > 0.5) for s in scores]
    else:
        scores = _parallel_scores(fitted.detector, subject, args.jobs)
        report["channel_window_score_mean"] = float(np.mean(scores))
        report["channel_window_slow_fraction"] = float(np.mean(scores > 0.5))
    elapsed = time.perf_counter() - t0
    print(f"wall-time: {elapsed:.3f}s")
    if args.out:
        Path(args.out).write_text(json.dumps(report))
    else:
        print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace) -> int:
    doc = _load_json(args.config, "eval config")
    _check_keys(
        doc,
        {"manifest", "notch_hz", "seed", "sites", "system_config", "mode", "plan"},
        "eval config",
    )
    mode = args.mode or doc.get("mode")
    if mode not in ("loso", "loio"):
        raise ConfigError("eval mode must be 'loso' or 'loio'")
    sys_doc = dict(doc.get("system_config", {}))
    if args.system:
        sys_doc["system"] = args.system
    if args.level:
        sys_doc["level"] = args.level
    sys_cfg = _system_config(sys_doc)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    subjects = _load_subjects(doc["manifest"], doc.get("notch_hz", 50.0), doc.get("sites"))
    system = SlowingSystem(sys_cfg)
    if mode == "loso":
        result = run_loso(subjects, system, seed=seed)
    else:
        site_map: dict[str, list[SubjectData]] = {}
        for s in subjects:
            site_map.setdefault(s.site, []).append(s)
        plan_doc = doc.get("plan") or {}
        _check_keys(plan_doc, {"eval_sites", "channel_only", "excluded_from_training"}, "plan")
        plan = make_loio_plan(
            sorted(site_map),
            eval_sites=plan_doc.get("eval_sites"),
            channel_only=tuple(plan_doc.get("channel_only", ())),
            excluded_from_training=tuple(plan_doc.get("excluded_from_training", ())),
        )
        result = run_loio(site_map, system, plan, seed=seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = f"{sys_cfg.system}_{sys_cfg.level}_{mode}"
    (out_dir / f"{name}.csv").write_text(results_csv({sys_cfg.system: result}))
    (out_dir / f"{name}.json").write_text(json.dumps(result.to_json_dict()))
    print(f"results: {out_dir / (name + '.csv')}")
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args: argparse.Namespace) -> int:
    bundle_doc = _load_json(args.model, "model bundle")
    cfg, fitted, n_channels = _bundle_from_json(bundle_doc)
    rec = read_edf(args.edf)
    if rec.n_channels != n_channels:
        raise ModelInputMismatch(
            f"model was trained on {n_channels} channels, recording has {rec.n_channels}"
        )
    processed, mask = preprocess_recording(rec, PreprocessConfig(notch_hz=args.notch_hz))
    det = fitted.detector
    if det.kind == "uls":
        from .spectral import FEATURE_NAMES

        detector = UlsThresholdDetector(
            feature=FEATURE_NAMES[det.uls_feature_col],
            theta=det.uls_theta,
            normalizer=(
                UlsNormalizer(FEATURE_NAMES[det.uls_feature_col], det.normalizer_c)
                if det.normalizer_c else None
            ),
        )
    elif det.kind == "shallow":
        detector = ShallowDetector(det.shallow_model)
    else:
        detector = CnnDetector(det.cnn_model)
    report = degrees_of_slowing(processed, detector, rejected=mask)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.edf).stem
    (out_dir / f"{stem}_degrees.json").write_text(json.dumps(report.to_json_dict()))
    (out_dir / f"{stem}_scalp.csv").write_text(report.scalp_csv())
    print(f"category: {report.category}")
    return 0


# ---------------------------------------------------------------------------
# parser / main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slowave",
        description="Detect pathological slowing in scalp EEG at channel, segment, and recording level.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cohort")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a detection system")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="score one EDF recording")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--edf", required=True)
    p_pred.add_argument("--out", default=None)
    p_pred.add_argument("--notch-hz", type=float, default=50.0)
    p_pred.add_argument("--jobs", type=int, default=1)
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="cross-validate a system on a cohort")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--mode", choices=("loso", "loio"), default=None)
    p_eval.add_argument("--system", choices=("uls", "ssls", "sdls"), default=None)
    p_eval.add_argument("--level", choices=("channel", "segment", "eeg"), default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--jobs", type=int, default=1)
    p_eval.set_defaults(func=cmd_eval)

    p_rep = sub.add_parser("report", help="degrees-of-slowing report for one EDF")
    p_rep.add_argument("--model", required=True)
    p_rep.add_argument("--edf", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--notch-hz", type=float, default=50.0)
    p_rep.set_defaults(func=cmd_report)
    return parser


def _error_kind(exc: Exception) -> str:
    for cls, kind in _ERROR_KINDS.items():
        if isinstance(exc, cls):
            return kind
    if isinstance(exc, (OSError, FileNotFoundError)):
        return "io_error"
    return "error"


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SLOWAVE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SlowaveError, OSError, ValueError) as exc:
        payload = {"error": {"kind": _error_kind(exc), "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
