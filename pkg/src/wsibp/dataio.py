"""Bit-exact text file formats for datasets, models, predictions, and reports.

Files are JSON-structured and human-diffable. Floats are written as decimal
text with 17 significant digits so that every 64-bit value survives a
write/read cycle exactly; identical in-memory objects always serialize to
identical bytes. Integers are accepted anywhere a float is expected; any
other type mismatch rejects with an error naming the file, the element, and
the offending index. See ``docs/formats.md`` for worked examples.
"""

from __future__ import annotations

import json
import math
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .decode import MetricsReport
from .inference import FitReport, TrainedModel, VARIANTS
from .sampler import GenConfig
from .types import (
    ACTION,
    CONCEPTS,
    SUBJECT,
    ConceptSpace,
    Dataset,
    LabelTuple,
    Track,
    ValidationError,
    VariationalState,
    VideoBag,
    dedup_labels,
)

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# writer: deterministic JSON with full-precision floats


def _fmt_scalar(x) -> str:
    if x is None:
        return "null"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValidationError(f"cannot serialize non-finite number {x!r}")
        return format(x, ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    raise ValidationError(f"cannot serialize {type(x).__name__} value {x!r}")


def _is_scalar(x) -> bool:
    return x is None or isinstance(x, (bool, int, float, str, np.bool_, np.integer, np.floating))


def _write(obj, parts: list[str], indent: int) -> None:
    pad = "  " * indent
    if isinstance(obj, Mapping):
        if not obj:
            parts.append("{}")
            return
        parts.append("{\n")
        for n, (key, value) in enumerate(obj.items()):
            parts.append(f"{pad}  {json.dumps(str(key))}: ")
            _write(value, parts, indent + 1)
            parts.append(",\n" if n < len(obj) - 1 else "\n")
        parts.append(pad + "}")
        return
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        items = list(obj)
        if not items:
            parts.append("[]")
            return
        if all(_is_scalar(v) for v in items):
            parts.append("[" + ", ".join(_fmt_scalar(v) for v in items) + "]")
            return
        parts.append("[\n")
        for n, value in enumerate(items):
            parts.append(pad + "  ")
            _write(value, parts, indent + 1)
            parts.append(",\n" if n < len(items) - 1 else "\n")
        parts.append(pad + "]")
        return
    parts.append(_fmt_scalar(obj))


def dump_text(obj) -> str:
    parts: list[str] = []
    _write(obj, parts, 0)
    parts.append("\n")
    return "".join(parts)


def _save(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_text(obj))


# ---------------------------------------------------------------------------
# reader helpers: no silent coercion


class _Reader:
    def __init__(self, path):
        self.path = str(path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                self.root = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{self.path}: not valid JSON: {e}") from e

    def fail(self, msg: str):
        raise ValidationError(f"{self.path}: {msg}")

    def number(self, value, where: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"expected a number at {where}, got {value!r}")
        if not math.isfinite(float(value)):
            self.fail(f"non-finite number at {where}")
        return float(value)

    def integer(self, value, where: str) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(f"expected an integer at {where}, got {value!r}")
        return value

    def string(self, value, where: str) -> str:
        if not isinstance(value, str):
            self.fail(f"expected a string at {where}, got {value!r}")
        return value

    def obj(self, value, where: str) -> dict:
        if not isinstance(value, dict):
            self.fail(f"expected an object at {where}, got {type(value).__name__}")
        return value

    def array(self, value, where: str) -> list:
        if not isinstance(value, list):
            self.fail(f"expected an array at {where}, got {type(value).__name__}")
        return value

    def get(self, mapping: dict, key: str, where: str):
        if key not in mapping:
            self.fail(f"missing key {key!r} in {where}")
        return mapping[key]

    def vector(self, value, where: str) -> np.ndarray:
        arr = self.array(value, where)
        return np.asarray([self.number(v, f"{where}[{n}]") for n, v in enumerate(arr)])

    def matrix(self, value, where: str) -> np.ndarray:
        rows = [self.vector(v, f"{where}[{n}]") for n, v in enumerate(self.array(value, where))]
        if rows and any(r.shape != rows[0].shape for r in rows):
            self.fail(f"ragged matrix at {where}")
        return np.asarray(rows) if rows else np.zeros((0, 0))

    def check_version(self, kind: str) -> dict:
        root = self.obj(self.root, "top level")
        version = self.get(root, "format_version", "top level")
        if version != FORMAT_VERSION:
            self.fail(f"unknown format_version {version!r} (supported: {FORMAT_VERSION})")
        if "kind" in root and root["kind"] != kind:
            self.fail(f"expected a {kind!r} file, found {root['kind']!r}")
        return root


def _space_doc(space: ConceptSpace) -> dict:
    return {
        "num_subjects": space.num_subjects,
        "num_actions": space.num_actions,
        "num_background": space.num_background,
        "feature_dims": {c: space.feature_dims[c] for c in CONCEPTS},
    }


def _read_space(r: _Reader, doc, where: str) -> ConceptSpace:
    doc = r.obj(doc, where)
    dims = r.obj(r.get(doc, "feature_dims", where), f"{where}.feature_dims")
    return ConceptSpace(
        num_subjects=r.integer(r.get(doc, "num_subjects", where), f"{where}.num_subjects"),
        num_actions=r.integer(r.get(doc, "num_actions", where), f"{where}.num_actions"),
        num_background=r.integer(r.get(doc, "num_background", where), f"{where}.num_background"),
        feature_dims={
            c: r.integer(r.get(dims, c, f"{where}.feature_dims"), f"{where}.feature_dims.{c}")
            for c in CONCEPTS
        },
    )


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(dataset: Dataset, path) -> None:
    videos = []
    for bag in dataset.videos:
        tracks = []
        for t in bag.tracks:
            doc = {"feat_subject": t.feat_subject, "feat_action": t.feat_action}
            doc["ground_truth"] = None if t.ground_truth is None else list(t.ground_truth)
            tracks.append(doc)
        videos.append(
            {
                "id": bag.id,
                "labels": [[lab.subject, lab.action] for lab in bag.labels],
                "tracks": tracks,
            }
        )
    _save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "dataset",
            "concept_space": _space_doc(dataset.space),
            "videos": videos,
        },
        path,
    )


def _read_optional_class(r: _Reader, value, where: str) -> Optional[int]:
    if value is None:
        return None
    return r.integer(value, where)


def load_dataset(path) -> Dataset:
    r = _Reader(path)
    root = r.check_version("dataset")
    space = _read_space(r, r.get(root, "concept_space", "top level"), "concept_space")
    videos = []
    for vdoc in r.array(r.get(root, "videos", "top level"), "videos"):
        vdoc = r.obj(vdoc, "videos[]")
        vid = r.string(r.get(vdoc, "id", "video"), "video id")
        labels = []
        for n, ldoc in enumerate(r.array(r.get(vdoc, "labels", f"video {vid}"), f"video {vid} labels")):
            pair = r.array(ldoc, f"video {vid} label {n}")
            if len(pair) != 2:
                r.fail(f"label {n} of video {vid} must be a [subject, action] pair")
            s = _read_optional_class(r, pair[0], f"video {vid} label {n} subject")
            a = _read_optional_class(r, pair[1], f"video {vid} label {n} action")
            try:
                labels.append(LabelTuple(s, a))
            except ValidationError as e:
                r.fail(f"video {vid} label {n}: {e}")
        tracks = []
        for j, tdoc in enumerate(r.array(r.get(vdoc, "tracks", f"video {vid}"), f"video {vid} tracks")):
            tdoc = r.obj(tdoc, f"video {vid} track {j}")
            feats = {}
            for c in CONCEPTS:
                vec = r.vector(r.get(tdoc, f"feat_{c}", f"video {vid} track {j}"), f"video {vid} track {j} feat_{c}")
                want = space.feature_dims[c]
                if vec.shape[0] != want:
                    r.fail(f"feat_{c} length {vec.shape[0]} ≠ {want} at video {vid} track {j}")
                feats[c] = vec
            gt = tdoc.get("ground_truth")
            if gt is not None:
                gt = r.array(gt, f"video {vid} track {j} ground_truth")
                if len(gt) != 2:
                    r.fail(f"ground_truth of video {vid} track {j} must have two entries")
                gt = (
                    _read_optional_class(r, gt[0], f"video {vid} track {j} ground_truth subject"),
                    _read_optional_class(r, gt[1], f"video {vid} track {j} ground_truth action"),
                )
            tracks.append(Track(feat_subject=feats[SUBJECT], feat_action=feats[ACTION], ground_truth=gt))
        videos.append(VideoBag(id=vid, tracks=tracks, labels=dedup_labels(labels)))
    try:
        return Dataset(space=space, videos=videos)
    except ValidationError as e:
        r.fail(str(e))


# ---------------------------------------------------------------------------
# model files


def save_model(model: TrainedModel, path) -> None:
    _save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "model",
            "concept_space": _space_doc(model.space),
            "variant": model.variant,
            "alpha": model.alpha,
            "penalty_c": model.penalty_c,
            "k_max": model.k_max,
            "channels": [
                {
                    "name": ch["name"],
                    "dim": ch["dim"],
                    "sigma_n2": ch["sigma_n2"],
                    "sigma_a2": ch["sigma_a2"],
                    "phi": model.phi[ch["name"]],
                    "sigma_k2": model.sigma_k2[ch["name"]],
                }
                for ch in model.channels
            ],
            "meta": model.meta,
        },
        path,
    )


def load_model(path) -> TrainedModel:
    r = _Reader(path)
    root = r.check_version("model")
    space = _read_space(r, r.get(root, "concept_space", "top level"), "concept_space")
    variant = r.string(r.get(root, "variant", "top level"), "variant")
    if variant not in VARIANTS:
        r.fail(f"unknown variant {variant!r}")
    k_max = r.integer(r.get(root, "k_max", "top level"), "k_max")
    channels = []
    phi = {}
    sigma_k2 = {}
    for n, cdoc in enumerate(r.array(r.get(root, "channels", "top level"), "channels")):
        cdoc = r.obj(cdoc, f"channels[{n}]")
        name = r.string(r.get(cdoc, "name", f"channels[{n}]"), f"channels[{n}].name")
        dim = r.integer(r.get(cdoc, "dim", f"channels[{n}]"), f"channels[{n}].dim")
        p = r.matrix(r.get(cdoc, "phi", f"channels[{n}]"), f"channels[{n}].phi")
        s = r.vector(r.get(cdoc, "sigma_k2", f"channels[{n}]"), f"channels[{n}].sigma_k2")
        if p.shape != (k_max, dim):
            r.fail(f"channels[{n}].phi has shape {p.shape}, expected ({k_max}, {dim})")
        if s.shape != (k_max,):
            r.fail(f"channels[{n}].sigma_k2 has length {s.shape[0]}, expected {k_max}")
        if not np.all(s > 0):
            r.fail(f"channels[{n}].sigma_k2 must be strictly positive")
        channels.append(
            {
                "name": name,
                "dim": dim,
                "sigma_n2": r.number(r.get(cdoc, "sigma_n2", f"channels[{n}]"), f"channels[{n}].sigma_n2"),
                "sigma_a2": r.number(r.get(cdoc, "sigma_a2", f"channels[{n}]"), f"channels[{n}].sigma_a2"),
            }
        )
        phi[name] = p
        sigma_k2[name] = s
    meta = root.get("meta", {})
    return TrainedModel(
        space=space,
        variant=variant,
        alpha=r.number(r.get(root, "alpha", "top level"), "alpha"),
        penalty_c=r.number(r.get(root, "penalty_c", "top level"), "penalty_c"),
        k_max=k_max,
        channels=channels,
        phi=phi,
        sigma_k2=sigma_k2,
        meta=meta if isinstance(meta, dict) else {},
    )


# ---------------------------------------------------------------------------
# predictions


def save_predictions(state: VariationalState, dataset: Dataset, mode: str, path, seed: int = 0) -> None:
    bags = []
    for i, bag in enumerate(dataset.videos):
        bags.append(
            {
                "id": bag.id,
                "tau": state.tau[i],
                "nu": state.nu_bag(i),
            }
        )
    _save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "predictions",
            "mode": mode,
            "seed": seed,
            "k_max": int(state.k_max),
            "concept_space": _space_doc(dataset.space),
            "bags": bags,
        },
        path,
    )


def load_predictions(path) -> tuple[VariationalState, list[str], dict]:
    """Read a predictions file into a state plus the bag ids and header info."""
    r = _Reader(path)
    root = r.check_version("predictions")
    k_max = r.integer(r.get(root, "k_max", "top level"), "k_max")
    taus, nus, ids = [], [], []
    offsets = [0]
    for n, bdoc in enumerate(r.array(r.get(root, "bags", "top level"), "bags")):
        bdoc = r.obj(bdoc, f"bags[{n}]")
        ids.append(r.string(r.get(bdoc, "id", f"bags[{n}]"), f"bags[{n}].id"))
        tau = r.matrix(r.get(bdoc, "tau", f"bags[{n}]"), f"bags[{n}].tau")
        nu = r.matrix(r.get(bdoc, "nu", f"bags[{n}]"), f"bags[{n}].nu")
        if tau.shape != (k_max, 2):
            r.fail(f"bags[{n}].tau has shape {tau.shape}, expected ({k_max}, 2)")
        if nu.ndim != 2 or nu.shape[1] != k_max:
            r.fail(f"bags[{n}].nu has shape {nu.shape}, expected (*, {k_max})")
        taus.append(tau)
        nus.append(nu)
        offsets.append(offsets[-1] + nu.shape[0])
    state = VariationalState(
        tau=np.asarray(taus) if taus else np.zeros((0, k_max, 2)),
        nu=np.vstack(nus) if nus else np.zeros((0, k_max)),
        offsets=np.asarray(offsets, dtype=np.int64),
        phi={},
        sigma_k2={},
    )
    header = {
        "mode": r.string(r.get(root, "mode", "top level"), "mode"),
        "seed": root.get("seed", 0),
        "space": _read_space(r, r.get(root, "concept_space", "top level"), "concept_space"),
    }
    return state, ids, header


# ---------------------------------------------------------------------------
# fit reports and metrics


def _metrics_doc(metrics: MetricsReport) -> dict:
    return {
        "subject_accuracy": metrics.subject_accuracy,
        "action_accuracy": metrics.action_accuracy,
        "pairwise_accuracy": metrics.pairwise_accuracy,
        "mean_average_precision": metrics.mean_average_precision,
        "localization_hit_rate": metrics.localization_hit_rate,
        "per_class": {
            concept: {str(c): stats for c, stats in classes.items()}
            for concept, classes in metrics.per_class.items()
        },
    }


def save_report(report: FitReport, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "fit_report",
        "variant": report.variant,
        "seed": report.seed,
        "objective_trace": [[n, v] for n, v in enumerate(report.objective_trace)],
        "inner_iterations": report.inner_iterations,
        "outer_iterations": report.outer_iterations,
        "inner_converged": report.inner_converged,
        "outer_converged": report.outer_converged,
        "final_objective": report.final_objective,
        "sigma_n2": report.sigma_n2,
        "sigma_a2": report.sigma_a2,
        "constraint_violations": report.constraint_violations,
        "decoded": report.decoded,
        "metrics": None if report.metrics is None else _metrics_doc(report.metrics),
    }
    _save(doc, path)


def save_metrics(metrics: MetricsReport, sweep: dict, path, seed: int = 0, theta_bg: float = 0.5) -> None:
    _save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "metrics",
            "seed": seed,
            "theta_bg": theta_bg,
            "metrics": _metrics_doc(metrics),
            "threshold_sweep": sweep,
        },
        path,
    )


def load_json(path) -> dict:
    """Plain structural load (reports, metrics); schema is caller's concern."""
    r = _Reader(path)
    return r.obj(r.root, "top level")


# ---------------------------------------------------------------------------
# generator configs


def load_gen_config(path, seed_override: Optional[int] = None) -> GenConfig:
    r = _Reader(path)
    root = r.check_version("gen_config")
    space = _read_space(r, r.get(root, "concept_space", "top level"), "concept_space")
    tpv = r.get(root, "tracks_per_video", "top level")
    if isinstance(tpv, list):
        pair = [r.integer(v, "tracks_per_video") for v in tpv]
        if len(pair) != 2:
            r.fail("tracks_per_video range must have two entries")
        tracks_per_video = (pair[0], pair[1])
    else:
        tracks_per_video = r.integer(tpv, "tracks_per_video")
    sigmas = {}
    for key in ("sigma_n2", "sigma_a2"):
        doc = r.get(root, key, "top level")
        if isinstance(doc, dict):
            sigmas[key] = {c: r.number(r.get(doc, c, key), f"{key}.{c}") for c in CONCEPTS}
        else:
            sigmas[key] = r.number(doc, key)
    seed = r.integer(root.get("seed", 0), "seed")
    if seed_override is not None:
        seed = seed_override
    try:
        return GenConfig(
            space=space,
            num_videos=r.integer(r.get(root, "num_videos", "top level"), "num_videos"),
            tracks_per_video=tracks_per_video,
            alpha=r.number(r.get(root, "alpha", "top level"), "alpha"),
            sigma_n2=sigmas["sigma_n2"],
            sigma_a2=sigmas["sigma_a2"],
            label_noise=r.number(root.get("label_noise", 0.0), "label_noise"),
            seed=seed,
        )
    except ValidationError as e:
        r.fail(str(e))
