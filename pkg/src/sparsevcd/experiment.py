"""Experiment execution: metric runs over a corpus, hyperparameter sweeps,
timing benchmarks, and attention-distribution dumps.

Outputs are byte-deterministic for a fixed config and corpus: rows are
buffered, sorted, and written with a fixed column order; wall-clock columns
stay empty unless timing capture is explicitly enabled (the ``bench``
entry point covers timing questions).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparsevcd import metrics
from sparsevcd.config import DecodeConfig, ExperimentConfig, SparsifyConfig, flatten_config
from sparsevcd.corpus import TOKEN_BOS, TOKEN_NO, TOKEN_YES, Corpus, load_corpus
from sparsevcd.decoding import decode
from sparsevcd.errors import ConfigError
from sparsevcd.models import ImageDescriptor, ToyTransformer, model_from_config
from sparsevcd.rng import combine

SWEEP_AXES = ("alpha", "beta", "lambda", "stop_layer", "sparsity")

METRIC_COLUMNS = [
    "seed", "n_examples", "chair", "recall", "accuracy", "attn_error_mean",
    "empty_generated", "tps", "wall_seconds", "peak_memory_elements", "error",
]


@dataclass
class ResultRow:
    """One (config, seed) aggregate over a corpus."""

    config: dict[str, object]
    seed: int
    n_examples: int = 0
    chair: float | None = None
    recall: float | None = None
    accuracy: float | None = None
    attn_error_mean: float | None = None
    empty_generated: float | None = None
    tps: float | None = None
    wall_seconds: float | None = None
    peak_memory_elements: int | None = None
    error: str = ""
    sweep_axis: str = ""
    sweep_value: object = ""
    diagnostics: list[dict] = field(default_factory=list)


def _extract_prediction(tokens, yes_id: int, no_id: int) -> str:
    for t in tokens:
        if t == yes_id:
            return "yes"
        if t == no_id:
            return "no"
    return ""


def _example_model(cfg: ExperimentConfig, shared, run_seed: int, index: int):
    if cfg.model.kind == "transformer":
        return shared
    # fresh composer noise per (run seed, example): keeps models immutable
    # while giving per-example variation inside one seed
    per_example = dataclasses.replace(
        cfg.model, seed=combine(cfg.model.seed, run_seed, index))
    return model_from_config(per_example)


def run_seed_row(cfg: ExperimentConfig, corpus: Corpus, run_seed: int,
                 collect_diagnostics: bool = False) -> ResultRow:
    """Decode every corpus example under one seed and aggregate the metrics."""
    scfg = cfg.effective_sparsify()
    dcfg = cfg.effective_decode()
    finding_set = set(corpus.finding_ids)
    yes_id = int(corpus.meta.get("yes_id", TOKEN_YES))
    no_id = int(corpus.meta.get("no_id", TOKEN_NO))
    shared = model_from_config(cfg.model) if cfg.model.kind == "transformer" else None
    row = ResultRow(config=flatten_config(cfg), seed=run_seed,
                    n_examples=len(corpus.examples))
    chairs, recalls, errors, empties = [], [], [], []
    preds, labels = [], []
    total_tokens = 0
    total_wall = 0.0
    peak_mem = 0
    for idx, example in enumerate(corpus.examples):
        model = _example_model(cfg, shared, run_seed, idx)
        session = dataclasses.replace(dcfg, seed=combine(run_seed, idx))
        prompt = example.question if example.question else [TOKEN_BOS]
        try:
            timing, result = metrics.measure_run(
                lambda: decode(model, example.image, prompt, scfg, session))
        except Exception as exc:  # noqa: BLE001 - a failed session aborts the row
            row.error = f"{example.id}: {type(exc).__name__}: {exc}"
            row.chair = row.recall = row.accuracy = None
            return row
        generated = set(result.tokens) & finding_set
        reference = set(example.report) & finding_set
        chairs.append(metrics.chair(generated, reference))
        empties.append(1.0 if not generated else 0.0)
        if reference:
            recalls.append(metrics.recall(generated, reference))
        if example.question is not None and example.label is not None:
            preds.append(_extract_prediction(result.tokens, yes_id, no_id))
            labels.append(example.label)
        step_errors = [d.attn_error_mean for d in result.diagnostics]
        errors.append(sum(step_errors) / len(step_errors) if step_errors else 0.0)
        total_tokens += len(result.tokens)
        total_wall += timing.wall_seconds
        peak_mem = max(peak_mem, result.memory_elements)
        if collect_diagnostics:
            row.diagnostics.append({
                "example": example.id,
                "tokens": result.tokens,
                "steps": [{
                    "step": d.step,
                    "chosen": d.chosen,
                    "p_theta_chosen": d.p_theta_chosen,
                    "p_theta_max": d.p_theta_max,
                    "plausible_size": d.plausible_size,
                    "attn_error_mean": d.attn_error_mean,
                    "cache_rows": d.cache_rows,
                    "retained_raw": d.retained_raw,
                } for d in result.diagnostics],
            })
    row.chair = sum(chairs) / len(chairs) if chairs else None
    row.recall = sum(recalls) / len(recalls) if recalls else None
    row.accuracy = (metrics.closed_ended_accuracy(preds, labels)
                    if preds else None)
    row.attn_error_mean = sum(errors) / len(errors) if errors else None
    row.empty_generated = sum(empties) / len(empties) if empties else None
    row.tps = (total_tokens / total_wall) if total_wall > 0 else 0.0
    row.wall_seconds = total_wall
    row.peak_memory_elements = peak_mem
    return row


def _row_task(cfg_dict: dict, corpus_path: str, run_seed: int,
              sweep_axis: str, sweep_value) -> ResultRow:
    from sparsevcd.config import experiment_from_dict
    cfg = experiment_from_dict(cfg_dict)
    corpus = load_corpus(corpus_path)
    row = run_seed_row(cfg, corpus, run_seed)
    row.sweep_axis = sweep_axis
    row.sweep_value = sweep_value
    return row


def _config_as_dict(cfg: ExperimentConfig) -> dict:
    out = {
        "model": dataclasses.asdict(cfg.model),
        "sparsify": dataclasses.asdict(cfg.sparsify),
        "decode": dataclasses.asdict(cfg.decode),
        "ablation": dataclasses.asdict(cfg.ablation),
        "corpus": cfg.corpus,
        "seeds": list(cfg.seeds),
        "out_csv": cfg.out_csv,
        "out_diagnostics": cfg.out_diagnostics,
        "timing": cfg.timing,
        "workers": cfg.workers,
    }
    return out


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    """One row per seed over the configured corpus."""
    cfg.validate()
    corpus = load_corpus(cfg.corpus)
    collect = bool(cfg.out_diagnostics)
    rows = [run_seed_row(cfg, corpus, seed, collect_diagnostics=collect)
            for seed in cfg.seeds]
    rows.sort(key=lambda r: r.seed)
    return rows


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    out = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model),
        sparsify=dataclasses.replace(cfg.sparsify),
        decode=dataclasses.replace(cfg.decode),
        ablation=dataclasses.replace(cfg.ablation),
    )
    if axis == "alpha":
        out.decode.alpha = float(value)
    elif axis == "beta":
        out.sparsify.beta = float(value)
    elif axis == "lambda":
        out.sparsify.lambda_ = float(value)
    elif axis == "stop_layer":
        out.decode.stop_layer = int(value)
    elif axis == "sparsity":
        out.sparsify.sparsity_rate = float(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")
    return out


def sweep(cfg: ExperimentConfig, axis: str, grid) -> list[ResultRow]:
    """Cartesian product of the grid with the base config; rows come back
    sorted by (grid position, seed)."""
    cfg.validate()
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid must be non-empty")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")
    tasks = []
    for gi, value in enumerate(grid):
        varied = apply_axis(cfg, axis, value)
        for seed in cfg.seeds:
            tasks.append((gi, value, varied, seed))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_row_task, _config_as_dict(varied), cfg.corpus,
                                   seed, axis, value)
                       for (_gi, value, varied, seed) in tasks]
            rows = [f.result() for f in futures]
    else:
        corpus = load_corpus(cfg.corpus)
        rows = []
        for _gi, value, varied, seed in tasks:
            row = run_seed_row(varied, corpus, seed)
            row.sweep_axis = axis
            row.sweep_value = value
            rows.append(row)
    rows.sort(key=lambda r: (grid.index(r.sweep_value), r.seed))
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(path: str | Path, rows: list[ResultRow],
                   timing: bool = False) -> list[str]:
    """Write result rows with a fixed column order; returns the header.

    Timing columns are left empty unless ``timing`` is set, keeping default
    outputs byte-identical across runs.
    """
    if not rows:
        raise ValueError("write_rows_csv: no rows")
    config_cols = sorted(rows[0].config.keys())
    header = ["sweep_axis", "sweep_value"] + config_cols + METRIC_COLUMNS
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            record = [_fmt(row.sweep_axis), _fmt(row.sweep_value)]
            record += [_fmt(row.config[c]) for c in config_cols]
            for col in METRIC_COLUMNS:
                if col in ("tps", "wall_seconds") and not timing:
                    record.append("")
                else:
                    record.append(_fmt(getattr(row, col)))
            writer.writerow(record)
    return header


def write_diagnostics(path: str | Path, rows: list[ResultRow]) -> None:
    lines = []
    for row in rows:
        for rec in row.diagnostics:
            payload = dict(rec)
            payload["seed"] = row.seed
            lines.append(json.dumps(payload, sort_keys=True,
                                    separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# --------------------------------------------------------------------- bench

def _bench_session(model, image, prompt, scfg: SparsifyConfig,
                   dcfg: DecodeConfig):
    timing, result = metrics.measure_run(
        lambda: decode(model, image, prompt, scfg, dcfg))
    return timing


def bench_sparse_vs_full(cfg: ExperimentConfig, prefix_len: int = 2048,
                         decode_len: int = 16, repeats: int = 5) -> dict:
    """Paired wall-time comparison: compacted sparse decoding at rate 0.5
    versus full decoding over the same prefix. Contrastive fusion and
    calibration are off in both arms to isolate the sparsification cost."""
    if cfg.model.kind != "transformer":
        raise ConfigError("bench requires the transformer model")
    model = model_from_config(cfg.model)
    image = ImageDescriptor((4, 5), tokens_per_finding=4)
    n_prompt = max(1, prefix_len - image.n_tokens)
    prompt = [TOKEN_BOS] * n_prompt
    base = dataclasses.replace(cfg.decode, alpha=0.0, gamma_apc=0.0,
                               max_len=decode_len, mode="greedy", eos_id=-1)
    full_s = dataclasses.replace(cfg.sparsify, sparsity_rate=1.0, beta=0.0,
                                 sac_enabled=False, mode="logical")
    sparse_s = dataclasses.replace(cfg.sparsify, sparsity_rate=0.5, beta=0.0,
                                   sac_enabled=False, mode="compacted")
    full_times, sparse_times, sparse_rows, full_rows = [], [], [], []
    for rep in range(repeats):
        dcfg = dataclasses.replace(base, seed=rep)
        t_full = _bench_session(model, image, prompt, full_s, dcfg)
        t_sparse = _bench_session(model, image, prompt, sparse_s, dcfg)
        full_times.append(t_full.wall_seconds)
        sparse_times.append(t_sparse.wall_seconds)
        full_rows.append(t_full.peak_rows)
        sparse_rows.append(t_sparse.peak_rows)
    full_med = statistics.median(full_times)
    sparse_med = statistics.median(sparse_times)
    return {
        "prefix_len": prefix_len,
        "decode_len": decode_len,
        "repeats": repeats,
        "full_median_seconds": full_med,
        "sparse_median_seconds": sparse_med,
        "sparse_faster": sparse_med < full_med,
        "full_peak_rows": max(full_rows),
        "sparse_peak_rows": max(sparse_rows),
    }


def bench_stop_layers(cfg: ExperimentConfig, grid=None, repeats: int = 5,
                      prefix_len: int = 96, decode_len: int = 24) -> dict:
    """Median decoding throughput per contrastive-branch stop layer."""
    if cfg.model.kind != "transformer":
        raise ConfigError("bench requires the transformer model")
    model = model_from_config(cfg.model)
    if grid is None:
        grid = list(range(model.layers + 1))
    image = ImageDescriptor((4, 5), tokens_per_finding=4)
    n_prompt = max(1, prefix_len - image.n_tokens)
    prompt = [TOKEN_BOS] * n_prompt
    scfg = dataclasses.replace(cfg.sparsify, sparsity_rate=1.0, beta=0.0,
                               sac_enabled=False, mode="logical")
    out = {}
    for ell in grid:
        times = []
        for rep in range(repeats):
            dcfg = dataclasses.replace(cfg.decode, alpha=0.3, gamma_apc=0.0,
                                       stop_layer=int(ell), max_len=decode_len,
                                       mode="greedy", eos_id=-1, seed=rep)
            timing = _bench_session(model, image, prompt, scfg, dcfg)
            times.append(timing.tps)
        out[int(ell)] = statistics.median(times)
    return out


# ------------------------------------------------------------- attention stats

DENSITY_BINS = 20


def dump_attention_stats(cfg: ExperimentConfig, out_dir: str | Path,
                         corpus: Corpus | None = None) -> dict:
    """Per-step sorted attention scores and visual-vs-text density histograms.

    Requires the transformer model (the composer's attention is degenerate
    and carries no information)."""
    if cfg.model.kind != "transformer":
        raise ConfigError("attention stats require the transformer model; "
                          "the composer has no meaningful attention")
    model = model_from_config(cfg.model)
    if not isinstance(model, ToyTransformer):
        raise ConfigError("attention stats require the transformer model")
    if corpus is not None and corpus.examples:
        example = corpus.examples[0]
        image, prompt = example.image, (example.question or [TOKEN_BOS])
    else:
        image = ImageDescriptor((4, 5, 6), tokens_per_finding=3)
        prompt = [TOKEN_BOS]
    scfg = cfg.effective_sparsify()
    dcfg = cfg.effective_decode()
    result = decode(model, image, prompt, scfg, dcfg, diag_level="full")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores_path = out_dir / "sorted_scores.csv"
    density_path = out_dir / "attention_density.csv"

    final_layer = model.layers - 1
    vis_counts = np.zeros(DENSITY_BINS, dtype=np.int64)
    txt_counts = np.zeros(DENSITY_BINS, dtype=np.int64)
    n_rows_written = 0
    with open(scores_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "rank", "score"])
        for step_idx, rec in enumerate(result.forward_records):
            per_head = [r for r in rec["rows"] if r["layer"] == final_layer]
            if not per_head:
                continue
            stacked = np.asarray([r["row"] for r in per_head])
            mean_row = np.add.accumulate(stacked, axis=0)[-1] / len(per_head)
            vis = per_head[0]["visual"]
            order = np.argsort(mean_row, kind="stable")
            for rank, idx in enumerate(order):
                writer.writerow([step_idx, rank, repr(float(mean_row[idx]))])
                n_rows_written += 1
            bins = np.minimum((mean_row * DENSITY_BINS).astype(np.int64),
                              DENSITY_BINS - 1)
            for b, is_vis in zip(bins, vis):
                if is_vis:
                    vis_counts[b] += 1
                else:
                    txt_counts[b] += 1
    with open(density_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "visual_count", "text_count"])
        for b in range(DENSITY_BINS):
            writer.writerow([repr(b / DENSITY_BINS), repr((b + 1) / DENSITY_BINS),
                             int(vis_counts[b]), int(txt_counts[b])])
    return {
        "sorted_scores": str(scores_path),
        "density": str(density_path),
        "rows_written": n_rows_written,
        "steps": len(result.forward_records),
    }
