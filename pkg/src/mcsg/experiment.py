"""Grid orchestration: data preparation, GAN training and reuse, sample
generation, U-Net training/evaluation, the append-only result store,
statistics and plots.

Outputs live under ``<out>/<dataset_case>/``::

    split.json                     patient split and derived seeds
    gan/<variant>-<key>.ckpt       trained GANs (shared by every count)
    gan/<variant>-<key>_steplog.csv
    generated/<method>-<key>/<count>/   volume containers + fid.json
    models/<label-slug>.ckpt       best-validation U-Nets
    reports/<label-slug>.json|csv  per-patient test DSC
    results.jsonl                  one record per completed grid point
    results.csv, dsc_matrix.csv, friedman.json, directions.csv, scores.csv
    plot.csv, plot.png
"""

from __future__ import annotations

import csv
import dataclasses
import fcntl
import hashlib
import json
import logging
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy
from .config import GENERATED_COUNTS, ExperimentConfig, derive_seed, grid_labels, grid_points, method_label
from .data import (
    Dataset,
    DataError,
    DatasetSplit,
    generate_synthetic_volumes,
    load_volume_dataset,
    normalize_volume,
    save_volume_dataset,
    split_dataset,
    subsample_patients,
    volumes_to_dataset,
)
from .gan.networks import GanConfig, Variant
from .gan.training import GanState, load_checkpoint, save_checkpoint, train_gan
from .segmentation import UNetConfig, evaluate_model, save_unet, train_unet
from .stats import (
    DirectionMatrix,
    FriedmanResult,
    RandomProjectionExtractor,
    StatsError,
    compute_fid,
    direction_report,
    friedman_test,
    nemenyi_directions,
)
from .synthesis import (
    generate_bsg,
    generate_mcsg,
    load_generated,
    samples_to_dataset,
    save_generated,
)

log = logging.getLogger(__name__)

# GAN variants each generation method depends on
METHOD_GANS = {"BSG": (Variant.BSG,), "MCSG": (Variant.MSG, Variant.CSG)}


def slugify(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower()


def _short_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:10]


# -- result store ---------------------------------------------------------------


class ResultStore:
    """Append-only JSON-lines record file; appends are serialized by an advisory lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def find(self, config_hash: str) -> dict | None:
        for rec in self.records():
            if rec["config_hash"] == config_hash:
                return rec
        return None

    def append(self, record: dict) -> bool:
        """Add ``record`` unless its hash is already stored; returns whether it was written."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path.with_suffix(".lock"), "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                if self.find(record["config_hash"]) is not None:
                    return False
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                return True
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)

    def latest_by_label(self, dataset_case: str | None = None) -> dict[str, dict]:
        out = {}
        for rec in self.records():
            if dataset_case is None or rec["dataset_case"] == dataset_case:
                out[rec["label"]] = rec
        return out


# -- data --------------------------------------------------------------------------


@dataclass
class CaseData:
    split: DatasetSplit
    gan_train: Dataset
    num_classes: int
    num_modalities: int
    generated_slices: int


def load_case_volumes(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic":
        spec = cfg.synthetic.shapes_spec(cfg.resolution)
        return generate_synthetic_volumes(cfg.synthetic.patients, spec, seed=derive_seed(cfg.seed, "data"))
    root = Path(cfg.dataset)
    if not (root / "dataset.json").exists():
        raise DataError(f"missing dataset: {root} has no dataset.json")
    return load_volume_dataset(root)[0]


def prepare_case(cfg: ExperimentConfig) -> CaseData:
    volumes = [normalize_volume(v, cfg.normalization) for v in load_case_volumes(cfg)]
    full = volumes_to_dataset(volumes, cfg.resolution, keep_empty=True)
    if cfg.patients > len(full.patients):
        raise DataError(f"case asks for {cfg.patients} patients, dataset has {len(full.patients)}")
    case = subsample_patients(full, cfg.patients, seed=derive_seed(cfg.seed, "subsample"))
    split = split_dataset(case, seed=derive_seed(cfg.seed, "split"))
    train = split.train
    if not cfg.keep_empty_gan:
        train = Dataset([p for p in train.pairs if p.mask.any()], train.num_classes, train.num_modalities)
    n_slices = cfg.slices_per_generated_patient
    if n_slices is None:
        n_slices = max(1, int(round(float(np.median(list(split.train.slices_per_patient().values()))))))
    return CaseData(split, train, full.num_classes, full.num_modalities, n_slices)


# -- runner ------------------------------------------------------------------------


@dataclass
class GridSummary:
    records: list[dict]
    counters: Counter
    friedman: FriedmanResult | None = None
    directions: DirectionMatrix | None = None
    outputs: dict = field(default_factory=dict)


class ExperimentRunner:
    """Runs grid points of one dataset case, reusing GANs and generated sets between them."""

    def __init__(self, cfg: ExperimentConfig):
        self.base = cfg
        self.case_dir = Path(cfg.out) / cfg.case_id
        self.store = ResultStore(self.case_dir / "results.jsonl")
        self.counters: Counter = Counter()
        self._data: CaseData | None = None
        self._gans: dict[Variant, GanState] = {}

    @property
    def seeds(self) -> dict[str, int]:
        stages = ["data", "subsample", "split", "unet", "fid"]
        stages += [f"gan-{v.value}" for v in Variant] + [f"generate-{m}" for m in METHOD_GANS]
        return {s: derive_seed(self.base.seed, s) for s in stages}

    # data ----------------------------------------------------------------------

    def data(self) -> CaseData:
        if self._data is None:
            self._data = prepare_case(self.base)
            self._write_split()
        return self._data

    def _write_split(self):
        d = self._data
        self.case_dir.mkdir(parents=True, exist_ok=True)
        info = {
            "dataset_case": self.base.case_id,
            "master_seed": self.base.seed,
            "seeds": self.seeds,
            "train": list(d.split.train.patients),
            "validation": list(d.split.validation.patients),
            "test": list(d.split.test.patients),
            "slices": {k: len(getattr(d.split, k)) for k in ("train", "validation", "test")},
            "gan_train_slices": len(d.gan_train),
            "generated_slices_per_patient": d.generated_slices,
        }
        (self.case_dir / "split.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")

    def export_data(self) -> Path:
        """Write the case's preprocessed source volumes next to the split file."""
        volumes = [normalize_volume(v, self.base.normalization) for v in load_case_volumes(self.base)]
        self.data()
        root = self.case_dir / "data"
        if not (root / "dataset.json").exists():
            save_volume_dataset(volumes, root, {"normalized": True, "normalization": self.base.normalization})
        return root

    # GANs ----------------------------------------------------------------------

    def gan_config(self, variant: Variant) -> GanConfig:
        d = self.data()
        return dataclasses.replace(
            self.base.gan,
            variant=variant,
            resolution=self.base.resolution,
            image_channels=0 if variant is Variant.MSG else d.num_modalities,
            mask_channels=d.num_classes + 1,
            seed=derive_seed(self.base.seed, f"gan-{variant.value}"),
        )

    def gan_path(self, variant: Variant) -> Path:
        key = _short_hash(self.gan_config(variant).to_dict())
        return self.case_dir / "gan" / f"{variant.value}-{key}.ckpt"

    def gan(self, variant: Variant) -> GanState:
        if variant in self._gans:
            return self._gans[variant]
        path = self.gan_path(variant)
        if path.exists():
            state = load_checkpoint(path)
        else:
            gcfg = self.gan_config(variant)
            path.parent.mkdir(parents=True, exist_ok=True)
            steplog = path.with_name(path.stem + "_steplog.csv")
            steplog.unlink(missing_ok=True)
            log.info("training %s GAN for %d steps", variant.value, gcfg.total_steps)
            state, _ = train_gan(gcfg, self.data().gan_train, steplog_path=steplog)
            save_checkpoint(state, path)
            self.counters["gan_trainings"] += 1
        self._gans[variant] = state
        return state

    # generated samples ---------------------------------------------------------

    def generated_root(self, method: str, count: int) -> Path:
        key = _short_hash(
            {
                "gans": [self.gan_config(v).to_dict() for v in METHOD_GANS[method]],
                "psi": self.base.truncation_psi,
                "slices": self.data().generated_slices,
                "seed": derive_seed(self.base.seed, f"generate-{method}"),
            }
        )
        return self.case_dir / "generated" / f"{method}-{key}" / str(count)

    def generated(self, method: str, count: int) -> tuple[Dataset, dict]:
        if method not in METHOD_GANS:
            raise ValueError(f"method {method!r} generates no samples")
        d = self.data()
        root = self.generated_root(method, count)
        if (root / "dataset.json").exists():
            samples = load_generated(root)
            fid = json.loads((root / "fid.json").read_text())
        else:
            seed = derive_seed(self.base.seed, f"generate-{method}")
            psi = self.base.truncation_psi
            if method == "BSG":
                samples = generate_bsg(self.gan(Variant.BSG), count, d.generated_slices, seed, psi)
            else:
                samples = generate_mcsg(
                    self.gan(Variant.MSG), self.gan(Variant.CSG), count, d.generated_slices, seed, psi
                )
            save_generated(samples, root, d.num_classes)
            extractor = RandomProjectionExtractor(self.base.fid_dim, seed=derive_seed(self.base.seed, "fid"))
            res = compute_fid(extractor, d.split.train.images(), np.stack([s.image for s in samples]))
            fid = {"fid": res.fid, "extractor": res.extractor, "n_real": res.n_real, "n_generated": res.n_generated}
            (root / "fid.json").write_text(json.dumps(fid, indent=1, sort_keys=True) + "\n")
            self.counters["generations"] += 1
        return samples_to_dataset(samples, d.num_classes), fid

    # segmentation ----------------------------------------------------------------

    def unet_config(self, cfg: ExperimentConfig) -> UNetConfig:
        d = self.data()
        overrides = cfg.unet_overrides.get(cfg.label, {})
        return dataclasses.replace(
            cfg.unet,
            in_channels=d.num_modalities,
            num_classes=d.num_classes + 1,
            seed=derive_seed(cfg.seed, "unet"),
            **overrides,
        )

    def run(self, cfg: ExperimentConfig) -> dict:
        """One grid point: (generate) -> train U-Net -> evaluate -> persist.  Completed hashes are skipped."""
        if cfg.case_id != self.base.case_id or cfg.seed != self.base.seed:
            raise ValueError("grid point belongs to a different dataset case")
        h = cfg.config_hash()
        existing = self.store.find(h)
        if existing is not None:
            self.counters["skipped"] += 1
            return existing
        t0 = time.perf_counter()
        d = self.data()
        generated, fid = (None, None) if cfg.method == "BL" else self.generated(cfg.method, cfg.generated_count)
        policy = AugmentPolicy.for_dataset(cfg.dataset_name) if cfg.augmentation else None
        ucfg = self.unet_config(cfg)
        model, hist = train_unet(ucfg, d.split.train, d.split.validation, generated, policy)
        self.counters["unet_trainings"] += 1
        report = evaluate_model(model, d.split.test)
        slug = slugify(cfg.label)
        (self.case_dir / "models").mkdir(parents=True, exist_ok=True)
        (self.case_dir / "reports").mkdir(parents=True, exist_ok=True)
        save_unet(model, self.case_dir / "models" / f"{slug}.ckpt")
        report.meta.update({"label": cfg.label, "config_hash": h})
        report.to_json(self.case_dir / "reports" / f"{slug}.json")
        report.to_csv(self.case_dir / "reports" / f"{slug}.csv")
        record = {
            "config_hash": h,
            "dataset_case": cfg.case_id,
            "label": cfg.label,
            "method": cfg.method,
            "augmentation": cfg.augmentation,
            "generated_count": cfg.generated_count,
            "seed": cfg.seed,
            "seeds": self.seeds,
            "per_patient_dsc": report.patient_means(),
            "per_patient_class_dsc": report.per_patient_dsc,
            "mean_dsc": report.mean_dsc,
            "standard_error": report.standard_error,
            "fid": fid,
            "best_epoch": hist.best_epoch,
            "val_dsc": hist.val_dsc,
            "unet": ucfg.to_dict(),
            "wall_time": time.perf_counter() - t0,
        }
        self.store.append(record)
        return record


def run_experiment(cfg: ExperimentConfig, runner: ExperimentRunner | None = None) -> dict:
    return (runner or ExperimentRunner(cfg)).run(cfg)


def run_grid(cfg: ExperimentConfig, points=None, statistics: bool = True, plots: bool = True) -> GridSummary:
    """Every (method, augmentation, count) point of the case, then statistics and plots."""
    runner = ExperimentRunner(cfg)
    points = grid_points() if points is None else points
    records = []
    for method, aug, count in points:
        rec = runner.run(cfg.with_method(method, aug, count))
        log.info("%s: mean DSC %.4f", rec["label"], rec["mean_dsc"])
        records.append(rec)
    summary = GridSummary(records, runner.counters)
    write_results_csv(runner.store, runner.case_dir, cfg.case_id)
    if statistics:
        summary.friedman, summary.directions = run_statistics(runner.store, runner.case_dir, cfg.case_id)
    if plots:
        summary.outputs.update(emit_plots(runner.store, runner.case_dir, cfg.case_id))
    return summary


# -- statistics and plots ---------------------------------------------------------


def _f(x) -> str:
    return repr(float(x))


def write_results_csv(store: ResultStore, out_dir: str | Path, dataset_case: str | None = None) -> Path:
    """Timing-free summary of the store, one row per method label in grid order."""
    by_label = store.latest_by_label(dataset_case)
    order = [l for l in grid_labels() if l in by_label] + sorted(set(by_label) - set(grid_labels()))
    path = Path(out_dir) / "results.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "config_hash", "generated_count", "augmentation", "mean_dsc", "standard_error", "fid"])
        for label in order:
            r = by_label[label]
            fid = "" if r["fid"] is None else _f(r["fid"]["fid"])
            w.writerow([label, r["config_hash"], r["generated_count"], int(r["augmentation"]), _f(r["mean_dsc"]), _f(r["standard_error"]), fid])
    return path


def score_matrix(store: ResultStore, dataset_case: str | None = None, labels=None):
    """``(labels, patients, N x k matrix)`` of per-test-patient mean DSC."""
    labels = list(grid_labels() if labels is None else labels)
    by_label = store.latest_by_label(dataset_case)
    missing = [l for l in labels if l not in by_label]
    if missing:
        raise StatsError(f"incomplete grid: {len(missing)} method(s) missing, e.g. {missing[:3]}")
    patients = sorted(by_label[labels[0]]["per_patient_dsc"])
    for l in labels[1:]:
        if sorted(by_label[l]["per_patient_dsc"]) != patients:
            raise StatsError(f"mismatched test cohorts: {l!r} differs from {labels[0]!r}")
    matrix = np.array([[by_label[l]["per_patient_dsc"][p] for l in labels] for p in patients], dtype=np.float64)
    return labels, patients, matrix


def run_statistics(
    store: ResultStore,
    out_dir: str | Path,
    dataset_case: str | None = None,
    alpha: float = 0.05,
    labels=None,
) -> tuple[FriedmanResult, DirectionMatrix]:
    """Friedman test then Nemenyi directions over the per-patient DSC matrix; writes the tables."""
    labels, patients, matrix = score_matrix(store, dataset_case, labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fr = friedman_test(matrix)
    dm = nemenyi_directions(matrix, alpha=alpha, methods=labels)
    with open(out_dir / "dsc_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", *labels])
        for p, row in zip(patients, matrix):
            w.writerow([p, *map(_f, row)])
    friedman = {
        "chi2": fr.chi2,
        "p_value": fr.p_value,
        "avg_ranks": dict(zip(labels, map(float, fr.avg_ranks))),
        "degenerate": fr.degenerate,
        "n_blocks": len(patients),
        "k": len(labels),
        "alpha": alpha,
        "critical_difference": dm.critical_difference,
        "blocks": "per-test-patient mean DSC",
    }
    (out_dir / "friedman.json").write_text(json.dumps(friedman, indent=1, sort_keys=True) + "\n")
    direction_report(dm, out_dir / "directions.csv")
    by_label = store.latest_by_label(dataset_case)
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_dsc", "standard_error", "avg_rank", "score"])
        for i, l in enumerate(labels):
            r = by_label[l]
            w.writerow([l, _f(r["mean_dsc"]), _f(r["standard_error"]), _f(fr.avg_ranks[i]), int(dm.scores[i])])
    return fr, dm


def plot_series(store: ResultStore, dataset_case: str | None = None) -> dict[str, list[dict]]:
    """Series name -> points sorted by x; BL anchors each series at x = 0."""
    by_label = store.latest_by_label(dataset_case)
    series: dict[str, list[dict]] = {}
    for method in ("BSG", "MCSG"):
        for aug in (False, True):
            pts = [
                by_label[method_label(method, aug, c)]
                for c in GENERATED_COUNTS
                if method_label(method, aug, c) in by_label
            ]
            if not pts:
                continue
            bl = by_label.get(method_label("BL", aug, 0))
            name = method_label(method, aug, 0).rsplit(" + ", 1)[0]
            series[name] = ([bl] if bl else []) + pts
    if not series:
        for aug in (False, True):
            bl = by_label.get(method_label("BL", aug, 0))
            if bl:
                series[bl["label"]] = [bl]
    return series


def emit_plots(store: ResultStore, out_dir: str | Path, dataset_case: str | None = None) -> dict[str, Path]:
    """Mean test DSC (+/- SE) against the number of added generated patients."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = plot_series(store, dataset_case)
    if not series:
        raise StatsError("no records to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "plot.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "generated_count", "method", "mean_dsc", "standard_error"])
        for name, pts in series.items():
            for r in pts:
                w.writerow([name, r["generated_count"], r["label"], _f(r["mean_dsc"]), _f(r["standard_error"])])
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in series.items():
        x = [r["generated_count"] for r in pts]
        y = [r["mean_dsc"] for r in pts]
        e = [r["standard_error"] for r in pts]
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=name)
    ax.set_xlabel("generated patients added (0 = BL)")
    ax.set_ylabel("mean test DSC")
    ax.set_title(dataset_case or "")
    ax.legend(fontsize=8)
    fig.tight_layout()
    png_path = out_dir / "plot.png"
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return {"plot_csv": csv_path, "plot_png": png_path}
