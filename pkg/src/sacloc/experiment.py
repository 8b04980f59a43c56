"""Train/evaluate cells of (attention mode, seed) and compare modes statistically."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import VideoRecord, load_dataset, load_synth_config
from .localizer import LocalizerConfig, EpochLog, decode_segments, predict, save_run, train
from .metrics import EvalConfig, Segment, evaluate_map, students_t

log = logging.getLogger(__name__)

RESULTS_HEADER = ("method", "seed", "iou", "map")


@dataclass
class CellResult:
    method: str
    seed: int
    maps: dict  # iou -> mAP in [0, 1]
    history: list
    detections: list
    attention: list  # (video_id, appearance, motion)
    params: dict


def detect(params, records: Sequence[VideoRecord], config: LocalizerConfig,
           threshold: float = 0.5) -> tuple[list[Segment], list[tuple]]:
    """Decoded detections for every record plus mean modality attention per video."""
    dets, attention = [], []
    for rec in records:
        fr = predict(params, rec.features, config)
        dets.extend(decode_segments(fr.probs.value, threshold, rec.id))
        if fr.modality is not None:
            a_m = fr.modality.value.ravel()
            attention.append((rec.id, float(a_m[0]), float(a_m[1])))
    return dets, attention


def score_detections(dets, records_or_gts, classes: Sequence[int], eval_config: EvalConfig) -> dict:
    gts = []
    for r in records_or_gts:
        gts.extend(r.annotations if isinstance(r, VideoRecord) else [r])
    return {iou: evaluate_map(dets, gts, classes, iou, eval_config.ap_mode)[0]
            for iou in eval_config.iou_thresholds}


def run_cell(train_set, test_set, config: LocalizerConfig, eval_config: EvalConfig) -> CellResult:
    params, history = train(train_set, config)
    dets, attention = detect(params, test_set, config)
    maps = score_detections(dets, test_set, range(1, config.classes + 1), eval_config)
    return CellResult(config.attention_mode, config.seed, maps, history, dets, attention, params)


def format_map(value: float) -> str:
    return f"{100.0 * value:.2f}"


def results_rows(cells: Sequence[CellResult]) -> list[tuple]:
    rows = []
    for c in cells:
        for iou, m in c.maps.items():
            rows.append((c.method, c.seed, f"{iou:g}", format_map(m)))
    return rows


def write_results_csv(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["iou"] = float(r["iou"])
        r["map"] = float(r["map"])
    return rows


def write_summary_csv(path, cells: Sequence[CellResult], ious: Sequence[float]) -> None:
    """One row per (mode, seed) cell, one mAP column per IoU threshold."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed"] + [f"map@{iou:g}" for iou in ious])
    for c in cells:
        w.writerow([c.method, c.seed] + [format_map(c.maps[iou]) for iou in ious])
    Path(path).write_text(buf.getvalue())


def write_detections(path, dets: Sequence[Segment]) -> None:
    Path(path).write_text(json.dumps([d.to_json() for d in dets], indent=1) + "\n")


def read_detections(path) -> list[Segment]:
    return [Segment.from_json(d) for d in json.loads(Path(path).read_text())]


def _cell_job(args):
    data_dir, config, eval_config = args
    train_set = load_dataset(data_dir, "train")
    test_set = load_dataset(data_dir, "test")
    return run_cell(train_set, test_set, config, eval_config)


def experiment_matrix(data_dir, base: LocalizerConfig, modes: Sequence[str], seeds: Sequence[int],
                      out_dir, eval_config: EvalConfig | None = None, baseline: str = "none",
                      treatment: str = "sac", threads: int | None = None, figures: bool = True) -> dict:
    """Train and score every (mode, seed) cell, then t-test treatment vs baseline per IoU.

    Writes ``results.csv`` (one row per cell and IoU), ``summary.csv`` (one
    row per cell), ``ttest_iou<thr>.json`` per threshold,
    ``modality_attention.csv`` and one run directory per cell.  Cells may
    run in parallel (``threads`` or ``SAC_THREADS``); outputs are always
    written in (mode, seed) order.
    """
    eval_config = eval_config or EvalConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = [replace(base, attention_mode=m, seed=s) for m in modes for s in seeds]
    threads = threads or int(os.environ.get("SAC_THREADS", "1") or 1)
    jobs = [(str(data_dir), c, eval_config) for c in configs]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell_job, jobs))
    else:
        train_set = load_dataset(data_dir, "train")
        test_set = load_dataset(data_dir, "test")
        cells = []
        for c in configs:
            log.info("cell mode=%s seed=%d", c.attention_mode, c.seed)
            cells.append(run_cell(train_set, test_set, c, eval_config))

    for cell, cfg in zip(cells, configs):
        run_dir = out / "runs" / f"{cell.method}_seed{cell.seed}"
        save_run(run_dir, cell.params, cfg, cell.history)
        write_detections(run_dir / "detections.json", cell.detections)
    write_results_csv(out / "results.csv", results_rows(cells))
    write_summary_csv(out / "summary.csv", cells, eval_config.iou_thresholds)

    lines = ["method,seed,video_id,appearance,motion"]
    for c in cells:
        for vid, a, m in c.attention:
            lines.append(f"{c.method},{c.seed},{vid},{a:.10g},{m:.10g}")
    (out / "modality_attention.csv").write_text("\n".join(lines) + "\n")

    reports = {}
    if baseline in modes and treatment in modes:
        for iou in eval_config.iou_thresholds:
            treat = [100 * c.maps[iou] for c in cells if c.method == treatment]
            base_scores = [100 * c.maps[iou] for c in cells if c.method == baseline]
            if len(treat) < 2 or len(base_scores) < 2:
                continue
            rep = students_t(treat, base_scores)
            rep.extra.update({"iou": iou, "group1": treatment, "group2": baseline})
            reports[iou] = rep
            (out / f"ttest_iou{iou:g}.json").write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n")

    if figures:
        from .plotting import plot_experiment
        labels = {r.id: r.label for r in load_dataset(data_dir, "test")}
        plot_experiment(out, cells, reports, load_synth_config(data_dir), labels)
    return {"cells": cells, "ttests": reports}
