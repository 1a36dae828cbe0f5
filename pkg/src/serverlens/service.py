"""HTTP prediction service over three loaded model bundles.

Stateless per request: every prediction flows through the bundles' own
imputer, scaler, and winning model.  Request schemas are strict; unknown
fields are rejected with an error naming the field so what-if users catch
typos instead of silently getting imputed defaults.
"""

from __future__ import annotations

import logging
import os
from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict

from .bundle import ModelBundle
from .dataset import LEVELS, TargetKind, date_to_ordinal
from .pipeline import PredictionCurves, predict_targets

log = logging.getLogger("serverlens.service")

#: request field -> (schema feature, type, unit)
REQUEST_FIELDS: dict[str, tuple[str, str, str]] = {
    "cc": ("CC", "number", "chips"),
    "cpc": ("CPC", "number", "cores/chip"),
    "tpc": ("TPC", "number", "threads/core"),
    "cf": ("CF", "number", "MHz"),
    "cs_l1d": ("CS_L1D", "number", "KB/core"),
    "cs_l1i": ("CS_L1I", "number", "KB/core"),
    "cs_l2": ("CS_L2", "number", "MB/core"),
    "cs_l3": ("CS_L3", "number", "MB/chip"),
    "mmc": ("MMC", "number", "modules"),
    "mms": ("MMS", "number", "GB/module"),
    "ddc": ("DDC", "number", "drives"),
    "dds": ("DDS", "number", "GB/drive"),
    "ddt": ("DDT", "enum", "drive type"),
    "had_date": ("HAD", "date", "availability date"),
}


class PredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cc: float | None = None
    cpc: float | None = None
    tpc: float | None = None
    cf: float | None = None
    cs_l1d: float | None = None
    cs_l1i: float | None = None
    cs_l2: float | None = None
    cs_l3: float | None = None
    mmc: float | None = None
    mms: float | None = None
    ddc: float | None = None
    dds: float | None = None
    ddt: Literal["HDD", "SSD"] | None = None
    had_date: str | None = None


class PredictResponse(BaseModel):
    power_curve: list[tuple[float, float]]
    max_throughput: float
    perf_to_power_curve: list[tuple[float, float]]
    eq1_composed_curve: list[tuple[float, float]]
    imputed_fields: list[str]
    sanity_flags: list[str]
    provenance: dict[str, str]


_FEATURE_TO_FIELD = {feat: fld for fld, (feat, _, _) in REQUEST_FIELDS.items()}
_FEATURE_TO_FIELD["DDT_HDD"] = "ddt"
_FEATURE_TO_FIELD["DDT_SSD"] = "ddt"


def _request_to_config(req: PredictRequest) -> dict:
    config: dict[str, float | str | None] = {}
    for fld, (feature, kind, _) in REQUEST_FIELDS.items():
        v = getattr(req, fld)
        if v is None:
            continue
        if kind == "date":
            try:
                config[feature] = float(date_to_ordinal(str(v)))
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=f"had_date: {exc}") from None
        elif fld == "ddt":
            config["DDT"] = v
        else:
            config[feature] = float(v)
    return config


def _curve(levels, values) -> list[tuple[float, float]]:
    return [(float(l), float(v)) for l, v in zip(levels, values)]


def create_app(bundles: dict[TargetKind, ModelBundle]) -> FastAPI:
    for kind in TargetKind:
        if kind not in bundles:
            raise ValueError(f"service needs a bundle for target {kind.value}")
    base_features = [n for n in bundles[TargetKind.POWER].schema.names if n != "L"]
    for kind, b in bundles.items():
        other = [n for n in b.schema.names if n != "L"]
        if other != base_features:
            raise ValueError(f"bundle {kind.value} disagrees on the feature schema")

    checksums = {kind.value: b.checksum() for kind, b in bundles.items()}
    app = FastAPI(title="serverlens prediction service", version="1")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "bundles": checksums}

    @app.get("/schema")
    def schema() -> dict:
        stats = bundles[TargetKind.POWER].feature_stats
        fields = []
        for fld, (feature, kind, unit) in REQUEST_FIELDS.items():
            entry: dict = {"name": fld, "type": kind, "unit": unit}
            if kind == "enum":
                entry["options"] = ["HDD", "SSD"]
            elif kind == "date":
                had = stats.get("HAD", {})
                entry["observed_min"] = had.get("observed_min")
                entry["observed_max"] = had.get("observed_max")
            else:
                st = stats.get(feature, {})
                entry["observed_min"] = st.get("observed_min")
                entry["observed_max"] = st.get("observed_max")
            fields.append(entry)
        return {"features": fields, "levels": list(LEVELS)}

    @app.get("/importance")
    def importance() -> dict:
        out: dict[str, list] = {}
        for kind, b in bundles.items():
            if b.importance is None:
                out[kind.value] = []
                continue
            out[kind.value] = [
                {
                    "feature": name,
                    "field": _FEATURE_TO_FIELD.get(name, name),
                    "mean_r2_decrease": mean,
                    "sd_r2_decrease": sd,
                }
                for name, mean, sd in b.importance.ranking()
            ]
        return out

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest) -> PredictResponse:
        config = _request_to_config(req)
        try:
            curves: PredictionCurves = predict_targets(bundles, config)
        except HTTPException:
            raise
        except Exception:
            log.exception("prediction failed for config %r", config)
            raise HTTPException(status_code=500, detail="prediction failed") from None
        return PredictResponse(
            power_curve=_curve(curves.levels, curves.power_curve),
            max_throughput=curves.max_throughput,
            perf_to_power_curve=_curve(curves.levels, curves.perf_curve),
            eq1_composed_curve=_curve(curves.levels, curves.eq1_curve),
            imputed_fields=sorted(
                {_FEATURE_TO_FIELD.get(f, f) for f in curves.imputed_features}
            ),
            sanity_flags=list(curves.flags),
            provenance={**curves.learner_tags, **{f"checksum_{k}": v for k, v in checksums.items()}},
        )

    return app


def serve_http(bundles: dict[TargetKind, ModelBundle], port: int = 8100) -> None:
    """Run the service until interrupted; SERVERLENS_PORT overrides ``port``."""
    import uvicorn

    env_port = os.environ.get("SERVERLENS_PORT")
    if env_port:
        port = int(env_port)
    uvicorn.run(create_app(bundles), host="0.0.0.0", port=port)
