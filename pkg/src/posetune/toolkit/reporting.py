"""Evaluation reports and the ablation harness over identity strategies."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field

from ..backbone.unet import ModelConfig, ModelContext
from ..errors import ConfigurationError
from ..oneshot import TuneConfig, tune
from ..pipeline import PipelineConfig, transfer
from ..vcm import STRATEGY_LABELS, parse_strategy
from .metrics import pair_metrics
from .providers import toy_face_embed

METRIC_COLUMNS = ("psnr", "ssim", "perceptual", "feature_cos")


@dataclass
class EvalReport:
    """Per-pair metric rows plus per-group aggregate means.

    Header notes record the metric conventions (uniform 8x8 SSIM window,
    extractor name) so numbers are interpretable later.
    """

    rows: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def add_row(self, pair_id: str, metrics: dict, group: str = "") -> None:
        row = {"pair": pair_id, "group": group}
        row.update({k: float(metrics[k]) for k in METRIC_COLUMNS})
        self.rows.append(row)

    def groups(self) -> list:
        seen = []
        for row in self.rows:
            if row["group"] not in seen:
                seen.append(row["group"])
        return seen

    def aggregates(self) -> list:
        out = []
        for group in self.groups():
            rows = [r for r in self.rows if r["group"] == group]
            agg = {"group": group, "count": len(rows)}
            for col in METRIC_COLUMNS:
                agg[col] = sum(r[col] for r in rows) / len(rows)
            out.append(agg)
        return out

    def to_dict(self) -> dict:
        return {"header": self.header, "rows": self.rows, "aggregates": self.aggregates()}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair", "group", *METRIC_COLUMNS])
            for row in self.rows:
                writer.writerow([row["pair"], row["group"], *(repr(row[c]) for c in METRIC_COLUMNS)])
            for agg in self.aggregates():
                writer.writerow([f"mean[{agg['group']}]", agg["group"],
                                 *(repr(agg[c]) for c in METRIC_COLUMNS)])

    @classmethod
    def read_json(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(rows=data["rows"], header=data.get("header", {}))


def default_header(extractor: str) -> dict:
    return {
        "ssim": "uniform 8x8 window, channel-mean grayscale",
        "psnr": "10*log10(1/MSE), capped at 100 dB",
        "perceptual": f"1 - cosine over extractor '{extractor}'",
        "feature_cos": f"cosine over extractor '{extractor}'",
    }


def run_ablation(fixtures, strategies, tune_cfg: TuneConfig | None = None,
                 pipe_cfg: PipelineConfig | None = None,
                 model_cfg: ModelConfig | None = None,
                 extractor: str = "toy-randproj",
                 identity_neutral: bool = False) -> EvalReport:
    """Tune once per fixture, transfer once per identity strategy with shared
    seeds, and score against the fixture target."""
    if not fixtures:
        raise ConfigurationError("ablation needs a non-empty fixture set")
    strategies = [parse_strategy(s) for s in strategies]
    tune_cfg = tune_cfg or TuneConfig()
    pipe_cfg = pipe_cfg or PipelineConfig()
    model_cfg = model_cfg or ModelConfig()
    report = EvalReport(header=default_header(extractor))
    report.header["strategies"] = [STRATEGY_LABELS[s] for s in strategies]
    for fixture in fixtures:
        ctx = ModelContext.build(model_cfg)
        ckpt = tune(ctx, fixture.source, fixture.description, tune_cfg, pipe_cfg.injection)
        face = toy_face_embed(fixture.source, model_cfg.d_face)
        for strategy in strategies:
            cfg = dataclasses.replace(
                pipe_cfg, injection=dataclasses.replace(pipe_cfg.injection, strategy=strategy)
            )
            result = transfer(ckpt, fixture.source, fixture.description,
                              fixture.target_pose, face, cfg,
                              identity_neutral=identity_neutral)
            metrics = pair_metrics(result.image, fixture.target, extractor)
            report.add_row(fixture.pair_id, metrics, group=STRATEGY_LABELS[strategy])
    return report
