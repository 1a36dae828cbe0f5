"""Versioned, checksummed single-file persistence for trained model bundles.

The format is human-inspectable JSON: a thin envelope carrying the format
version, a sha256 checksum of the canonical payload serialization, and the
payload itself.  Floats round-trip bit-exactly through their shortest repr;
NaN (missing markers inside the imputer's reference rows) is encoded as null.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .dataset import FeatureSchema, TargetKind
from .evaluation import ImportanceReport, MetricsReport
from .learners.base import TrainedModel
from .preprocess import ImputerModel, ScalerModel
from .learners.gp import GpModel
from .learners.linear import LinearModel
from .learners.net import NetModel
from .learners.trees import ForestModel, GbtModel, _StackedTrees

FORMAT_VERSION = 1


class BundleIntegrityError(RuntimeError):
    """File is corrupt, truncated, or fails its checksum."""


class BundleVersionError(RuntimeError):
    """File was written by an unsupported (newer) format version."""


def _array_out(arr: np.ndarray) -> list:
    if arr.dtype.kind == "f":
        flat = [None if math.isnan(v) else float(v) for v in arr.ravel().tolist()]
    else:
        flat = [int(v) for v in arr.ravel().tolist()]
    return [list(arr.shape), flat]


def _array_in(obj: list, dtype) -> np.ndarray:
    shape, flat = obj
    if np.dtype(dtype).kind == "f":
        data = [math.nan if v is None else float(v) for v in flat]
    else:
        data = flat
    return np.array(data, dtype=dtype).reshape(shape)


def _model_out(model: TrainedModel) -> dict[str, Any]:
    if isinstance(model, LinearModel):
        return {
            "family": "linear",
            "coefficients": _array_out(model.coefficients),
            "intercept": model.intercept,
            "degree": model.degree,
            "n_features": model.n_features,
            "lam": model.lam,
            "rho": model.rho,
            "tag": model.tag,
        }
    if isinstance(model, GbtModel):
        return {
            "family": "gbt",
            "base_score": model.base_score,
            "learning_rate": model.learning_rate,
            "nodes": _trees_out(model.trees),
            "n_features": model.n_features,
            "max_depth": model.max_depth,
            "best_round": model.best_round,
        }
    if isinstance(model, ForestModel):
        return {
            "family": "rf",
            "nodes": _trees_out(model.trees),
            "n_features": model.n_features,
            "max_depth": model.max_depth,
        }
    if isinstance(model, GpModel):
        return {
            "family": "gp",
            "kernel": model.kernel,
            "ell": model.ell,
            "sf2": model.sf2,
            "noise": model.noise,
            "inducing": _array_out(model.inducing),
            "weights": _array_out(model.weights),
            "y_mean": model.y_mean,
            "y_std": model.y_std,
            "n_features": model.n_features,
        }
    if isinstance(model, NetModel):
        return {
            "family": "ffn",
            "widths": list(model.widths),
            "params": [_array_out(p) for p in model.params],
            "y_mean": model.y_mean,
            "y_std": model.y_std,
            "n_features": model.n_features,
        }
    raise TypeError(f"cannot serialize model of type {type(model).__name__}")


def _trees_out(trees: _StackedTrees) -> dict[str, Any]:
    return {
        "feature": _array_out(trees.feature),
        "threshold": _array_out(trees.threshold),
        "left": _array_out(trees.left),
        "right": _array_out(trees.right),
        "value": _array_out(trees.value),
        "offsets": _array_out(trees.offsets),
    }


def _trees_in(obj: Mapping[str, Any]) -> _StackedTrees:
    return _StackedTrees(
        feature=_array_in(obj["feature"], np.int32),
        threshold=_array_in(obj["threshold"], np.float64),
        left=_array_in(obj["left"], np.int32),
        right=_array_in(obj["right"], np.int32),
        value=_array_in(obj["value"], np.float64),
        offsets=_array_in(obj["offsets"], np.int64),
    )


def _model_in(obj: Mapping[str, Any]) -> TrainedModel:
    family = obj["family"]
    if family == "linear":
        return LinearModel(
            coefficients=_array_in(obj["coefficients"], np.float64),
            intercept=float(obj["intercept"]),
            degree=int(obj["degree"]),
            n_features=int(obj["n_features"]),
            lam=float(obj["lam"]),
            rho=float(obj["rho"]),
            tag=obj["tag"],
        )
    if family == "gbt":
        return GbtModel(
            base_score=float(obj["base_score"]),
            learning_rate=float(obj["learning_rate"]),
            trees=_trees_in(obj["nodes"]),
            n_features=int(obj["n_features"]),
            max_depth=int(obj["max_depth"]),
            best_round=int(obj["best_round"]),
        )
    if family == "rf":
        return ForestModel(
            trees=_trees_in(obj["nodes"]),
            n_features=int(obj["n_features"]),
            max_depth=int(obj["max_depth"]),
        )
    if family == "gp":
        return GpModel(
            kernel=obj["kernel"],
            ell=float(obj["ell"]),
            sf2=float(obj["sf2"]),
            noise=float(obj["noise"]),
            inducing=_array_in(obj["inducing"], np.float64),
            weights=_array_in(obj["weights"], np.float64),
            y_mean=float(obj["y_mean"]),
            y_std=float(obj["y_std"]),
            n_features=int(obj["n_features"]),
        )
    if family == "ffn":
        return NetModel(
            params=tuple(_array_in(p, np.float64) for p in obj["params"]),
            widths=tuple(int(w) for w in obj["widths"]),
            y_mean=float(obj["y_mean"]),
            y_std=float(obj["y_std"]),
            n_features=int(obj["n_features"]),
        )
    raise BundleIntegrityError(f"unknown model family {family!r}")


def _metrics_out(m: MetricsReport) -> dict[str, Any]:
    return m.as_dict()


def _metrics_in(obj: Mapping[str, Any]) -> MetricsReport:
    return MetricsReport(
        rmse=float(obj["rmse"]),
        r2=float(obj["r2"]),
        mape=None if obj["mape"] is None else float(obj["mape"]),
        maape=None if obj["maape"] is None else float(obj["maape"]),
        excluded_count=int(obj["excluded_count"]),
    )


def _importance_out(rep: ImportanceReport | None) -> dict[str, Any] | None:
    if rep is None:
        return None
    return {
        "feature_names": list(rep.feature_names),
        "mean_decrease": _array_out(rep.mean_decrease),
        "sd_decrease": _array_out(rep.sd_decrease),
        "baseline_r2": rep.baseline_r2,
        "repeats": rep.repeats,
    }


def _importance_in(obj: Mapping[str, Any] | None) -> ImportanceReport | None:
    if obj is None:
        return None
    return ImportanceReport(
        feature_names=tuple(obj["feature_names"]),
        mean_decrease=_array_in(obj["mean_decrease"], np.float64),
        sd_decrease=_array_in(obj["sd_decrease"], np.float64),
        baseline_r2=float(obj["baseline_r2"]),
        repeats=int(obj["repeats"]),
    )


@dataclass(frozen=True)
class LearnerEntry:
    """Leaderboard line for one candidate learner."""

    tag: str
    status: str  # "ok" | "failed"
    best_hp: dict
    metrics: dict[str, MetricsReport]  # keyed train/validation/test
    n_trials: int
    best_objective: float | None


@dataclass(frozen=True)
class Leaderboard:
    entries: tuple[LearnerEntry, ...]

    def entry(self, tag: str) -> LearnerEntry:
        for e in self.entries:
            if e.tag == tag:
                return e
        raise KeyError(tag)

    def successful(self) -> list[LearnerEntry]:
        return [e for e in self.entries if e.status == "ok"]


@dataclass(frozen=True)
class ModelBundle:
    """Self-contained prediction artifact for one target."""

    format_version: int
    target_kind: TargetKind
    schema: FeatureSchema
    imputer: ImputerModel
    scaler: ScalerModel
    model: TrainedModel
    learner_tag: str
    hyperparams: dict
    leaderboard: Leaderboard
    feature_stats: dict[str, dict[str, float]]
    importance: ImportanceReport | None
    provenance: dict = field(default_factory=dict)

    def checksum(self) -> str:
        return hashlib.sha256(_payload_json(self).encode()).hexdigest()


def _payload(bundle: ModelBundle) -> dict[str, Any]:
    return {
        "format_version": bundle.format_version,
        "target_kind": bundle.target_kind.value,
        "schema": list(bundle.schema.names),
        "imputer": {
            "k": bundle.imputer.k,
            "reference": _array_out(bundle.imputer.reference),
            "means": _array_out(bundle.imputer.means),
        },
        "scaler": {
            "mean": _array_out(bundle.scaler.mean),
            "sd": _array_out(bundle.scaler.sd),
            "zero_variance": [bool(v) for v in bundle.scaler.zero_variance],
        },
        "model": _model_out(bundle.model),
        "learner_tag": bundle.learner_tag,
        "hyperparams": bundle.hyperparams,
        "leaderboard": [
            {
                "tag": e.tag,
                "status": e.status,
                "best_hp": e.best_hp,
                "metrics": {k: _metrics_out(v) for k, v in e.metrics.items()},
                "n_trials": e.n_trials,
                "best_objective": e.best_objective,
            }
            for e in bundle.leaderboard.entries
        ],
        "feature_stats": bundle.feature_stats,
        "importance": _importance_out(bundle.importance),
        "provenance": bundle.provenance,
    }


def _payload_json(bundle: ModelBundle) -> str:
    return json.dumps(_payload(bundle), sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_bundle(bundle: ModelBundle, path: str) -> str:
    """Write the bundle; returns its checksum."""
    payload_json = _payload_json(bundle)
    checksum = hashlib.sha256(payload_json.encode()).hexdigest()
    envelope = (
        '{"format_version":%d,"checksum":"%s","payload":%s}'
        % (bundle.format_version, checksum, payload_json)
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(envelope)
    return checksum


def load_bundle(path: str) -> ModelBundle:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        envelope = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BundleIntegrityError(f"{path}: not a well-formed bundle ({exc})") from None
    if not isinstance(envelope, dict) or "payload" not in envelope:
        raise BundleIntegrityError(f"{path}: missing payload section")
    version = envelope.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise BundleVersionError(
            f"{path}: written by format version {version}; this build reads <= {FORMAT_VERSION}"
        )
    payload = envelope["payload"]
    payload_json = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    checksum = hashlib.sha256(payload_json.encode()).hexdigest()
    if checksum != envelope.get("checksum"):
        raise BundleIntegrityError(f"{path}: checksum mismatch; file is corrupt")

    target_kind = TargetKind(payload["target_kind"])
    schema = FeatureSchema(target_kind=target_kind, names=tuple(payload["schema"]))
    imputer = ImputerModel(
        k=int(payload["imputer"]["k"]),
        reference=_array_in(payload["imputer"]["reference"], np.float64),
        means=_array_in(payload["imputer"]["means"], np.float64),
    )
    scaler = ScalerModel(
        mean=_array_in(payload["scaler"]["mean"], np.float64),
        sd=_array_in(payload["scaler"]["sd"], np.float64),
        zero_variance=np.array(payload["scaler"]["zero_variance"], dtype=bool),
    )
    leaderboard = Leaderboard(
        entries=tuple(
            LearnerEntry(
                tag=e["tag"],
                status=e["status"],
                best_hp=e["best_hp"],
                metrics={k: _metrics_in(v) for k, v in e["metrics"].items()},
                n_trials=int(e["n_trials"]),
                best_objective=None if e["best_objective"] is None else float(e["best_objective"]),
            )
            for e in payload["leaderboard"]
        )
    )
    return ModelBundle(
        format_version=version,
        target_kind=target_kind,
        schema=schema,
        imputer=imputer,
        scaler=scaler,
        model=_model_in(payload["model"]),
        learner_tag=payload["learner_tag"],
        hyperparams=payload["hyperparams"],
        leaderboard=leaderboard,
        feature_stats=payload["feature_stats"],
        importance=_importance_in(payload["importance"]),
        provenance=payload["provenance"],
    )
