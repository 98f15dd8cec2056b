"""Workspace-as-database orchestration for the CLI.

The pipeline config is one JSON file validated as a whole before any stage
runs. Every artifact embeds the hash of the config scope that produced it
(training hash for checkpoints, sensitivity hash for reports, ...), and
stages refuse to consume artifacts whose recorded hash no longer matches
the active config unless forced. The eval grid is content-addressed per
cell, which is what makes ``reproduce`` idempotent.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .allocator import SplitRatios, assign_precision, ratios_for_budget
from .errors import ContractError, ParameterError
from .evaluation import GridConfig, LatencyConfig, TaskSuite, measure_latency
from .gptq import GptqConfig, gptq_quantize_model
from .model import MODE_AR, MODE_DIFFUSION, ModelCheckpoint
from .quant import QuantPlan, rtn_quantize_model, uniform_plan
from .reporting import emit
from .sensitivity import (SensitivityConfig, compute_sensitivities, load_report,
                          rank_sensitivities, save_report)
from .trainer import TrainConfig, calibration_batches, train

ENV_WORKSPACE = "PTQLAB_WORKSPACE"
MODELS = (MODE_AR, MODE_DIFFUSION)


@dataclass
class PipelineConfig:
    workspace: str
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    suite: TaskSuite = field(default_factory=TaskSuite)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    gptq_group_size: int = 128
    gptq_damping: float = 0.01
    gptq_column_order: str = "ascending"
    assign_ratios: tuple = (0.5, 0.5, 0.0)
    assign_levels: tuple = (16, 8, 4)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        doc = json.loads(Path(path).read_text())
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {"workspace", "seed", "train", "suite", "latency", "sensitivity",
                 "grid", "gptq", "assign"}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        if "workspace" not in doc:
            raise ParameterError("config needs a 'workspace' entry")
        seed = int(doc.get("seed", 0))
        train_cfg = TrainConfig(seed=seed, **doc.get("train", {}))
        suite = TaskSuite(**doc.get("suite", {}))
        latency = LatencyConfig(**doc.get("latency", {}))
        sens = SensitivityConfig(seed=seed, **doc.get("sensitivity", {}))
        grid_doc = dict(doc.get("grid", {}))
        if "bits" in grid_doc:
            grid_doc["bits"] = tuple(grid_doc["bits"])
        if "hawq_splits" in grid_doc:
            grid_doc["hawq_splits"] = tuple(tuple(s) for s in grid_doc["hawq_splits"])
        grid = GridConfig(**grid_doc)
        gptq_doc = doc.get("gptq", {})
        assign_doc = doc.get("assign", {})
        cfg = cls(workspace=doc["workspace"], seed=seed, train=train_cfg, suite=suite,
                  latency=latency, sensitivity=sens, grid=grid,
                  gptq_group_size=int(gptq_doc.get("group_size", 128)),
                  gptq_damping=float(gptq_doc.get("damping", 0.01)),
                  gptq_column_order=str(gptq_doc.get("column_order", "ascending")),
                  assign_ratios=tuple(assign_doc.get("ratios", (0.5, 0.5, 0.0))),
                  assign_levels=tuple(assign_doc.get("levels", (16, 8, 4))))
        SplitRatios(*cfg.assign_ratios)  # validate eagerly
        if cfg.gptq_column_order not in ("ascending", "by_diag_desc"):
            raise ParameterError(f"unknown gptq column_order {cfg.gptq_column_order!r}")
        if cfg.gptq_damping <= 0:
            raise ParameterError("gptq damping must be > 0")
        return cfg

    # -- scope hashes -------------------------------------------------------

    def train_hash(self, mode: str) -> str:
        cfg = dataclasses.replace(self.train, mode=mode, log_path=None)
        return _hash({"train": cfg.to_dict(), "seed": self.seed})

    def sensitivity_hash(self, mode: str) -> str:
        return _hash({"parent": self.train_hash(mode), "sens": self.sensitivity.to_dict()})

    def plan_hash(self, mode: str) -> str:
        return _hash({"parent": self.sensitivity_hash(mode),
                      "ratios": list(self.assign_ratios), "levels": list(self.assign_levels)})


def _hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        root = os.environ.get(ENV_WORKSPACE) or cfg.workspace
        self.root = Path(root)
        self.cfg = cfg

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def checkpoint_path(self, mode: str) -> Path:
        return self.path("checkpoints", f"{mode}.ckpt")

    def require_checkpoint(self, mode: str, force: bool = False) -> ModelCheckpoint:
        path = self.checkpoint_path(mode)
        if not path.exists():
            raise ContractError(f"missing checkpoint {path}; run `ptqlab train` first")
        ckpt = ModelCheckpoint.load(path)
        want = self.cfg.train_hash(mode)
        got = ckpt.meta.get("pipeline_train_hash")
        if got != want and not force:
            raise ContractError(
                f"checkpoint {path} was produced by train hash {got}, current config "
                f"gives {want}; re-run `ptqlab train` or pass --force")
        return ckpt


# ---------------------------------------------------------------------------
# Stages


def stage_train(ws: Workspace, force: bool = False) -> dict:
    """Train the AR/diffusion pair (skipped when hashes already match)."""
    out = {}
    for mode in MODELS:
        path = ws.checkpoint_path(mode)
        want = ws.cfg.train_hash(mode)
        if path.exists() and not force:
            try:
                existing = ws.require_checkpoint(mode)
                out[mode] = {"checkpoint": str(path), "reused": True,
                             "train_hash": want,
                             "heldout_loss_final": existing.meta["heldout_loss_final"]}
                continue
            except ContractError:
                pass  # stale hash: retrain
        cfg = dataclasses.replace(ws.cfg.train, mode=mode, seed=ws.cfg.seed,
                                  log_path=str(ws.path("logs", f"train_{mode}.csv")))
        ckpt = train(cfg)
        ckpt.meta["pipeline_train_hash"] = want
        ckpt.save(path)
        out[mode] = {"checkpoint": str(path), "reused": False, "train_hash": want,
                     "heldout_loss_final": ckpt.meta["heldout_loss_final"]}
    return out


def stage_sensitivity(ws: Workspace, mode: str, force: bool = False) -> dict:
    ckpt = ws.require_checkpoint(mode, force)
    cfg = ws.cfg
    batches = calibration_batches(TrainConfig(**ckpt.meta["train_config"]),
                                  cfg.sensitivity.n_batches)
    records = compute_sensitivities(ckpt, batches, cfg.sensitivity)
    json_path = ws.path("sensitivity", f"{mode}.json")
    csv_path = ws.path("sensitivity", f"{mode}.csv")
    save_report(records, cfg.sensitivity, json_path, csv_path)
    doc = json.loads(json_path.read_text())
    doc["config_hash"] = cfg.sensitivity_hash(mode)
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"report": str(json_path), "csv": str(csv_path),
            "n_records": len(records), "config_hash": doc["config_hash"]}


def stage_assign(ws: Workspace, mode: str, ratios=None, levels=None,
                 budget: float | None = None, force: bool = False) -> dict:
    cfg = ws.cfg
    json_path = ws.path("sensitivity", f"{mode}.json")
    if not json_path.exists():
        raise ContractError(f"missing sensitivity report {json_path}; "
                            f"run `ptqlab sensitivity --model {mode}` first")
    doc = json.loads(json_path.read_text())
    want = cfg.sensitivity_hash(mode)
    if doc.get("config_hash") != want and not force:
        raise ContractError(f"sensitivity report hash {doc.get('config_hash')} does not match "
                            f"current config {want}; re-run `ptqlab sensitivity` or pass --force")
    records, _ = load_report(json_path)
    ranked = rank_sensitivities(records, cfg.grid.rank_mode)
    levels = tuple(levels or cfg.assign_levels)
    if budget is not None:
        ckpt = ws.require_checkpoint(mode, force)
        sized = [(r.path, ckpt.n_params(r.path)) for r in ranked]
        split, achieved = ratios_for_budget(sized, budget)
    else:
        split = SplitRatios(*(ratios or cfg.assign_ratios))
        achieved = None
    plan = assign_precision(ranked, split, group_size=cfg.gptq_group_size, levels=levels)
    label = "-".join(str(b) for b in dict.fromkeys(levels))
    plan_path = ws.path("plans", f"{mode}_split_{label}.json")
    plan.save(plan_path)
    doc = json.loads(plan_path.read_text())
    doc["config_hash"] = cfg.plan_hash(mode)
    plan_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    out = {"plan": str(plan_path), "ratios": list(split.as_tuple()),
           "config_hash": cfg.plan_hash(mode)}
    if achieved is not None:
        out["achieved_avg_bits"] = achieved
    return out


def stage_quantize(ws: Workspace, mode: str, method: str, bits: int | None = None,
                   plan_path=None, force: bool = False) -> dict:
    import csv as _csv

    ckpt = ws.require_checkpoint(mode, force)
    if plan_path is not None:
        plan = QuantPlan.load(plan_path)
        label = Path(plan_path).stem
    elif bits is not None:
        plan = uniform_plan(ckpt, bits, group_size=ws.cfg.gptq_group_size)
        label = f"{bits}bit"
    else:
        raise ParameterError("quantize needs --bits or --plan")
    out_path = ws.path("quantized", f"{mode}_{method}_{label}.ckpt")
    report_rows = []
    if method == "rtn":
        quantized = rtn_quantize_model(ckpt, plan)
    elif method == "gptq":
        if bits is None:
            raise ParameterError("gptq quantization is uniform; pass --bits")
        train_cfg = TrainConfig(**ckpt.meta["train_config"])
        batches = calibration_batches(train_cfg, ws.cfg.grid.n_calibration_batches)
        quantized, report_rows = gptq_quantize_model(
            ckpt, batches, GptqConfig(bits=bits, group_size=ws.cfg.gptq_group_size,
                                      damping=ws.cfg.gptq_damping,
                                      column_order=ws.cfg.gptq_column_order))
    else:
        raise ParameterError(f"unknown method {method!r} (rtn or gptq)")
    quantized.save(out_path)
    plan_sidecar = ws.path("quantized", f"{mode}_{method}_{label}.plan.json")
    plan.save(plan_sidecar)
    result = {"checkpoint": str(out_path), "plan": str(plan_sidecar)}
    if report_rows:
        report_path = ws.path("quantized", f"{mode}_{method}_{label}.layers.csv")
        with open(report_path, "w", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=list(report_rows[0]))
            writer.writeheader()
            writer.writerows(report_rows)
        result["layer_report"] = str(report_path)
    return result


def stage_bench(ws: Workspace, mode: str, force: bool = False) -> dict:
    ckpt = ws.require_checkpoint(mode, force)
    unit = "ar_token" if mode == MODE_AR else "diffusion_step"
    cfg = dataclasses.replace(ws.cfg.latency, unit_of_work=unit)
    with _bench_lock(ws):
        res = measure_latency(ckpt, cfg)
    return {"mode": mode, "unit_of_work": unit, "mean_ms": res.mean_ms,
            "std_ms": res.std_ms, "warmup_runs": res.warmup_runs,
            "timed_runs": res.timed_runs, "timer_warning": res.timer_warning}


class _bench_lock:
    """File lock so only one latency benchmark runs in a workspace at a time."""

    def __init__(self, ws: Workspace, timeout_s: float = 600.0):
        self.path = ws.path("bench.lock")
        self.timeout_s = timeout_s

    def __enter__(self):
        deadline = time.monotonic() + self.timeout_s
        while True:
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(fd, str(os.getpid()).encode())
                os.close(fd)
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise ContractError(f"benchmark lock {self.path} is held; remove it if stale")
                time.sleep(0.05)

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def stage_eval(ws: Workspace, force: bool = False) -> dict:
    from .evaluation import run_experiment_grid

    ar = ws.require_checkpoint(MODE_AR, force)
    diff = ws.require_checkpoint(MODE_DIFFUSION, force)
    with _bench_lock(ws):
        results = run_experiment_grid(ar, diff, ws.cfg.suite, ws.cfg.latency,
                                      grid=ws.cfg.grid, sens_cfg=ws.cfg.sensitivity,
                                      cache_dir=ws.path("cache"), seed=ws.cfg.seed)
    failed = [r for r in results if r.status != "ok"]
    return {"results": results, "n_cells": len(results), "n_failed": len(failed)}


def stage_report(ws: Workspace, results=None) -> dict:
    if results is None:
        results = stage_eval(ws)["results"]
    written = emit(results, ws.path("report"))
    return {name: str(path) for name, path in written.items()}


def reproduce(ws: Workspace, force: bool = False) -> dict:
    """train -> grid -> report, idempotent through the eval cache."""
    trained = stage_train(ws, force)
    evaled = stage_eval(ws, force)
    report = stage_report(ws, evaled["results"])
    return {"train": trained,
            "eval": {"n_cells": evaled["n_cells"], "n_failed": evaled["n_failed"]},
            "report": report}
