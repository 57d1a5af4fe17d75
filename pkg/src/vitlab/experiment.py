"""Config-driven patch-size sweeps, results tables and attention-map export.

Layout of a sweep's output::

    <out_dir>/<dataset>/<patch>/<seed>/checkpoint.bin
                                        log.csv
                                        metrics.json
    <out_dir>/<dataset>/runs.csv        one row per run plus ensemble rows
    <out_dir>/<dataset>/summary.csv     mean and std over seeds
    <out_dir>/<dataset>/results.md      the summary as a markdown table
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .adapt import AdaptationPlan, adapt
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .cost import model_flops
from .data import AugmentationPolicy, DatasetBundle, load_dataset
from .metrics import MetricsReport, PredictionSet, aggregate_runs, ensemble_average, evaluate
from .train import TrainConfig, fit, write_log_csv
from .vit import PRESETS, PatchSpec, ViT, ViTConfig, extract_attention_map, init_weights

log = logging.getLogger(__name__)

RUN_HEADER = ["dataset", "dims", "patch_size", "seed", "acc", "bal_acc", "auc", "gflops"]
SUMMARY_HEADER = ["dataset", "dims", "patch_size", "acc_mean", "acc_std", "bal_acc_mean", "bal_acc_std",
                  "auc_mean", "auc_std", "gflops"]
SEED_ENV = "VITLAB_SEED"


class ConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    pass


def _known(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass
class ExperimentConfig:
    dataset: str
    name: Optional[str] = None
    dims: int = 2
    model: Union[str, Dict[str, int]] = "vit_small"
    patch_sizes: List[int] = field(default_factory=lambda: [1, 2, 4, 7, 14, 28])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    train: Dict[str, object] = field(default_factory=dict)
    augmentation: Optional[Dict[str, object]] = field(default_factory=dict)
    pretrained: Optional[str] = None
    fresh_patch_embed: bool = False
    drop_rate: float = 0.0
    ensemble: List[int] = field(default_factory=lambda: [1, 2, 4])
    out_dir: str = "results"

    def __post_init__(self):
        self.patch_sizes = sorted(int(p) for p in self.patch_sizes)
        self.seeds = [int(s) for s in self.seeds]
        self.ensemble = sorted(int(p) for p in self.ensemble)
        if not self.patch_sizes or len(set(self.patch_sizes)) != len(self.patch_sizes):
            raise ConfigError(f"patch_sizes must be non-empty and distinct, got {self.patch_sizes}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be non-empty and distinct, got {self.seeds}")
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        stray = [p for p in self.ensemble if p not in self.patch_sizes]
        if stray:
            raise ConfigError(f"ensemble members {stray} are not in patch_sizes")
        if isinstance(self.model, str):
            if self.model not in PRESETS:
                raise ConfigError(f"unknown model preset {self.model!r}; choose from {sorted(PRESETS)} or give L/d/h")
        elif set(self.model) != {"L", "d", "h"}:
            raise ConfigError(f"custom model needs exactly the keys L, d, h; got {sorted(self.model)}")
        bad = set(self.train) - _known(TrainConfig) - {"seed"}
        if bad:
            raise ConfigError(f"unknown train keys: {sorted(bad)}")
        if self.augmentation is not None:
            bad = set(self.augmentation) - _known(AugmentationPolicy)
            if bad:
                raise ConfigError(f"unknown augmentation keys: {sorted(bad)}")
        try:
            self.train_config(0)
            self.policy()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(raw) - _known(cls)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in raw:
            raise ConfigError("config is missing the required key 'dataset'")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        cfg = cls.from_dict(raw)
        # relative paths in a config file resolve against the file's directory
        cfg.dataset = str((path.parent / cfg.dataset).resolve())
        if cfg.pretrained:
            cfg.pretrained = str((path.parent / cfg.pretrained).resolve())
        return cfg

    @property
    def dataset_name(self) -> str:
        return (self.name or Path(self.dataset).stem).lower()

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def policy(self) -> Optional[AugmentationPolicy]:
        if self.augmentation is None:
            return None
        return AugmentationPolicy(**self.augmentation)

    def vit_config(self, patch: int, image_shape: Sequence[int], num_classes: int) -> ViTConfig:
        if isinstance(self.model, str):
            L, d, h = PRESETS[self.model]
        else:
            L, d, h = self.model["L"], self.model["d"], self.model["h"]
        if self.dims == 3:
            D, H, W, C = image_shape
            spec = PatchSpec(patch, H=H, W=W, D=D, C=C)
        else:
            H, W, C = image_shape
            spec = PatchSpec(patch, H=H, W=W, C=C)
        return ViTConfig(L, d, h, spec, num_classes, drop_rate=self.drop_rate)

    def check_patch_sizes(self, image_shape: Sequence[int]):
        extents = image_shape[:-1]
        bad = [p for p in self.patch_sizes if any(e % p for e in extents)]
        if bad:
            raise ConfigError(f"patch sizes {bad} do not divide the input extents {tuple(extents)}")

    def with_env_seeds(self) -> "ExperimentConfig":
        raw = os.environ.get(SEED_ENV)
        if not raw:
            return self
        try:
            seeds = [int(s) for s in raw.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be a comma-separated list of integers, got {raw!r}") from None
        return dataclasses.replace(self, seeds=seeds)


# -- single run ------------------------------------------------------------------

def run_dir(cfg: ExperimentConfig, patch: int, seed: int, out_dir=None) -> Path:
    return Path(out_dir or cfg.out_dir) / cfg.dataset_name / str(patch) / str(seed)


def _write_atomic(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def _load_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    bundle = load_dataset(cfg.dataset, cfg.dataset_name)
    if bundle.dims != cfg.dims:
        raise ConfigError(f"dataset {bundle.name} is {bundle.dims}D but the config says dims={cfg.dims}")
    return bundle


def initial_weights(cfg: ExperimentConfig, vcfg: ViTConfig, seed: int) -> Dict[str, np.ndarray]:
    if not cfg.pretrained:
        return init_weights(vcfg, seed)
    plan = AdaptationPlan(vcfg.patch, vcfg.num_classes, fresh_patch_embed=cfg.fresh_patch_embed,
                          reuse_head=False, seed=seed)
    return adapt(load_checkpoint(cfg.pretrained), plan).tensors


def execute_run(cfg: ExperimentConfig, patch: int, seed: int, out_dir=None,
                bundle: Optional[DatasetBundle] = None) -> dict:
    """Train one (patch size, seed) pair and write its artifacts."""
    bundle = bundle or _load_bundle(cfg)
    tcfg = cfg.train_config(seed)
    vcfg = cfg.vit_config(patch, bundle.image_shape, bundle.num_classes)
    dtype = np.float64 if tcfg.precision == "float64" else np.float32
    model = ViT(vcfg, initial_weights(cfg, vcfg, seed), dtype=dtype)
    result = fit(model, bundle, tcfg, cfg.policy())

    best = result.checkpoint.to_model(dtype)
    test = bundle.splits["test"]
    probs = best.predict_proba(test.images, tcfg.eval_batch_size)
    report = evaluate(PredictionSet(probs, test.labels))

    dest = run_dir(cfg, patch, seed, out_dir)
    dest.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, dest / "checkpoint.bin")
    write_log_csv(result.log, dest / "log.csv")
    record = {
        "dataset": cfg.dataset_name, "dims": cfg.dims, "patch_size": patch, "seed": seed,
        **report.as_dict(),
        "gflops": model_flops(vcfg, "paper").gflops,
        "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
        "confusion": report.confusion.tolist(),
        "test_labels": test.labels.tolist(),
        "test_probabilities": probs.tolist(),
    }
    # metrics.json is the completion marker for --resume, so it goes last
    _write_atomic(dest / "metrics.json", json.dumps(record, indent=1) + "\n")
    log.info("%s p=%d seed=%d bal_acc=%.4f", cfg.dataset_name, patch, seed, report.bal_acc)
    return record


def _read_record(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _run_worker(cfg: ExperimentConfig, patch: int, seed: int, out_dir) -> dict:
    logging.basicConfig(level=logging.INFO)
    return execute_run(cfg, patch, seed, out_dir)


# -- tables ------------------------------------------------------------------------

def ensemble_label(members: Sequence[int]) -> str:
    return "+".join(str(p) for p in members)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _csv_text(header: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def write_results_csv(rows: Sequence[dict], path, aggregated: bool = False):
    header = SUMMARY_HEADER if aggregated else RUN_HEADER
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_csv_text(header, rows).encode("utf-8"))


def _report(rec: dict) -> MetricsReport:
    return MetricsReport(rec["acc"], rec["bal_acc"], rec["auc"], np.asarray(rec.get("confusion", [])))


def ensemble_rows(cfg: ExperimentConfig, records: Dict[tuple, dict]) -> List[dict]:
    if not cfg.ensemble:
        return []
    label = ensemble_label(cfg.ensemble)
    rows = []
    for seed in cfg.seeds:
        members = []
        for p in cfg.ensemble:
            rec = records[(p, seed)]
            members.append(PredictionSet(rec["test_probabilities"], rec["test_labels"], {"patch_size": p, "seed": seed}))
        report = evaluate(ensemble_average(members))
        rows.append({
            "dataset": cfg.dataset_name, "dims": cfg.dims, "patch_size": label, "seed": seed,
            **report.as_dict(),
            "gflops": sum(records[(p, seed)]["gflops"] for p in cfg.ensemble),
        })
    return rows


def summary_rows(cfg: ExperimentConfig, run_rows: Sequence[dict]) -> List[dict]:
    groups: Dict[str, List[dict]] = {}
    for r in run_rows:
        groups.setdefault(str(r["patch_size"]), []).append(r)
    order = [str(p) for p in cfg.patch_sizes] + ([ensemble_label(cfg.ensemble)] if cfg.ensemble else [])
    out = []
    for key in order:
        rows = groups[key]
        agg = aggregate_runs([_report(r) for r in rows])
        out.append({
            "dataset": cfg.dataset_name, "dims": cfg.dims, "patch_size": rows[0]["patch_size"],
            "acc_mean": agg["acc"][0], "acc_std": agg["acc"][1],
            "bal_acc_mean": agg["bal_acc"][0], "bal_acc_std": agg["bal_acc"][1],
            "auc_mean": agg["auc"][0], "auc_std": agg["auc"][1],
            "gflops": float(np.mean([r["gflops"] for r in rows])),
        })
    return out


def markdown_table(summary: Sequence[dict]) -> str:
    lines = [
        "| Patch size | GFLOPs | Acc | Bal. Acc | AUC |",
        "|---|---|---|---|---|",
    ]
    for r in summary:
        p = r["patch_size"]
        label = f"({p.replace('+', ', ')})" if isinstance(p, str) else str(p)
        cells = [f"{r[m + '_mean']:.4f} ± {r[m + '_std']:.4f}" for m in ("acc", "bal_acc", "auc")]
        lines.append(f"| {label} | {r['gflops']:.4f} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- sweep -------------------------------------------------------------------------

def run_sweep(cfg: ExperimentConfig, out_dir=None, parallel: int = 1, resume: bool = False) -> Path:
    """Run every (patch size, seed) pair, then ensemble, aggregate and write tables.

    With ``resume`` a run whose ``metrics.json`` exists is not retrained.
    On failure the completed rows are flushed to ``runs.csv`` before
    :class:`SweepError` is raised.
    """
    out_dir = Path(out_dir or cfg.out_dir)
    bundle = _load_bundle(cfg)
    cfg.check_patch_sizes(bundle.image_shape)
    root = out_dir / cfg.dataset_name

    records: Dict[tuple, dict] = {}
    todo = []
    for p in cfg.patch_sizes:
        for s in cfg.seeds:
            marker = run_dir(cfg, p, s, out_dir) / "metrics.json"
            if resume and marker.exists():
                records[(p, s)] = _read_record(marker)
                log.info("resume: skipping p=%d seed=%d", p, s)
            else:
                todo.append((p, s))

    failure = None
    if parallel > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {pool.submit(_run_worker, cfg, p, s, out_dir): (p, s) for p, s in todo}
            done, pending = wait(futures, return_when=FIRST_EXCEPTION)
            for f in pending:
                f.cancel()
            for f in done:
                if f.exception() is None:
                    records[futures[f]] = f.result()
                elif failure is None:
                    failure = (futures[f], f.exception())
    else:
        for p, s in todo:
            try:
                records[(p, s)] = execute_run(cfg, p, s, out_dir, bundle)
            except Exception as exc:  # flush what finished, then report
                failure = ((p, s), exc)
                break

    run_rows = [{k: records[key][k] for k in RUN_HEADER}
                for key in sorted(records)]
    if failure is not None:
        write_results_csv(run_rows, root / "runs.csv")
        (p, s), exc = failure
        raise SweepError(f"run p={p} seed={s} failed: {exc}") from exc

    run_rows += ensemble_rows(cfg, records)
    summary = summary_rows(cfg, run_rows)
    write_results_csv(run_rows, root / "runs.csv")
    write_results_csv(summary, root / "summary.csv", aggregated=True)
    (root / "results.md").write_bytes(markdown_table(summary).encode("utf-8"))
    return root


# -- attention maps ----------------------------------------------------------------

def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_attention_heatmap(ckpt: Checkpoint, image: np.ndarray, path) -> Dict[str, Path]:
    """Write ``<stem>_image.png``, ``<stem>_grid.png`` and the heatmap at ``path``.

    The grid file shows the image tinted by the heatmap with patch borders
    drawn in red (omitted when patches are narrower than 3 pixels).
    """
    from PIL import Image

    cfg = ckpt.config()
    if cfg.patch.dims != 2:
        raise NotImplementedError("attention heatmaps are only supported for 2D checkpoints")
    amap = extract_attention_map(image, cfg, ckpt.tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    paths = {"heatmap": path,
             "image": stem.with_name(stem.name + "_image.png"),
             "grid": stem.with_name(stem.name + "_grid.png")}

    rgb = np.asarray(image, dtype=np.float64)
    heat = amap.heatmap
    Image.fromarray(_to_u8(heat)).save(paths["heatmap"], format="PNG")
    Image.fromarray(_to_u8(rgb)).save(paths["image"], format="PNG")

    overlay = 0.6 * rgb + 0.4 * np.stack([heat, np.zeros_like(heat), np.zeros_like(heat)], axis=-1)
    p = cfg.patch.p
    if p >= 3:
        overlay[p::p, :, :] = (1.0, 0.0, 0.0)
        overlay[:, p::p, :] = (1.0, 0.0, 0.0)
    Image.fromarray(_to_u8(overlay)).save(paths["grid"], format="PNG")
    return paths
