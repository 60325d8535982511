"""Subject-disjoint splits, evaluation protocols and report generation."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aeri as aeri_mod
from . import gazenet
from .augment import single_transform_ablation
from .checkpoint import Checkpoint
from .data import EyeArrays, load_dataset
from .errors import DataIOError, ProtocolError, TrainingError
from .metrics import angular_error, estimate_noise_variance
from .synth import DatasetManifest

log = logging.getLogger(__name__)

# published full-scale results, kept as metadata for reports; never asserted
REFERENCE_RESULTS = {
    "mpiigaze_loso": (4.64, 0.73),
    "eyediap_5fold": (5.86, 0.80),
    "utmultiview_3fold": (5.30, 0.57),
}

ROW_FIELDS = ("id", "subject", "fold", "pitch_pred", "yaw_pred", "pitch_gt", "yaw_gt", "error_deg", "noise_var")


@dataclass
class DatasetIndex:
    samples: list  # dicts: id, subject, image, label, optional iris_mask / vis_mask
    source: str = "synthetic"
    root: Path | None = None

    def __post_init__(self):
        ids = [s["id"] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ProtocolError("sample ids are not unique")
        if any(not s.get("subject") for s in self.samples):
            raise ProtocolError("every sample needs a subject id")
        if self.source not in ("synthetic", "external-normalized"):
            raise ProtocolError(f"unknown source tag {self.source!r}")

    @classmethod
    def from_manifest(cls, manifest) -> "DatasetIndex":
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.load(manifest)
        source = "synthetic" if manifest.version.startswith("msgaze-synth") else "external-normalized"
        return cls([dict(e) for e in manifest.entries], source, manifest.root)

    def subjects(self) -> list:
        return sorted({s["subject"] for s in self.samples})

    def __len__(self):
        return len(self.samples)

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(self.samples, seed=0, version=self.source,
                               counts={"total": len(self.samples)}, root=self.root)

    def load(self) -> EyeArrays:
        return load_dataset(self.manifest())


@dataclass
class FoldPlan:
    folds: list  # (train subjects, test subjects) as sorted tuples
    protocol: str

    def validate(self, subjects) -> None:
        subjects = set(subjects)
        seen = []
        for train, test in self.folds:
            if set(train) & set(test):
                raise ProtocolError("train and test subjects overlap")
            if set(train) | set(test) != subjects:
                raise ProtocolError("fold does not cover the subject set")
            seen.extend(test)
        if sorted(seen) != sorted(subjects):
            raise ProtocolError("test folds do not partition the subjects")

    def to_dict(self):
        return {"protocol": self.protocol, "folds": [{"train": list(a), "test": list(b)} for a, b in self.folds]}


def _subject_list(index) -> list:
    if isinstance(index, DatasetIndex):
        return index.subjects()
    return sorted(set(index))


def split_loso(index) -> FoldPlan:
    """One fold per subject, holding that subject out."""
    subjects = _subject_list(index)
    if len(subjects) < 2:
        raise ProtocolError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    folds = [(tuple(s for s in subjects if s != held), (held,)) for held in subjects]
    plan = FoldPlan(folds, "loso")
    plan.validate(subjects)
    return plan


def split_kfold_subjects(index, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle subjects with ``seed`` and cut them into k near-equal test groups."""
    subjects = _subject_list(index)
    if k < 2:
        raise ProtocolError(f"k must be >= 2, got {k}")
    if k > len(subjects):
        raise ProtocolError(f"k={k} exceeds the number of subjects ({len(subjects)})")
    order = np.random.default_rng(seed).permutation(len(subjects))
    groups = np.array_split(order, k)
    folds = []
    for g in groups:
        test = tuple(sorted(subjects[i] for i in g))
        folds.append((tuple(s for s in subjects if s not in test), test))
    plan = FoldPlan(folds, "kfold")
    plan.validate(subjects)
    return plan


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    config_hash: str = ""
    runtime: float = 0.0
    failed_folds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failed_folds)

    def errors(self) -> np.ndarray:
        return np.array([r["error_deg"] for r in self.rows], dtype=np.float64)

    def mean_error(self) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean(self.errors()))

    def fold_means(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault(r["fold"], []).append(r["error_deg"])
        return {f: float(np.mean(v)) for f, v in sorted(out.items())}

    def fold_std(self) -> float:
        """Population standard deviation of the per-fold mean errors."""
        means = list(self.fold_means().values())
        return float(np.std(means)) if means else float("nan")

    def aggregates(self) -> dict:
        fm = self.fold_means()
        return {
            "n_rows": len(self.rows),
            "mean_error": self.mean_error(),
            "fold_means": {str(k): v for k, v in fm.items()},
            "mean_of_fold_means": float(np.mean(list(fm.values()))) if fm else float("nan"),
            "fold_std": self.fold_std(),
            "partial": self.partial,
            "failed_folds": self.failed_folds,
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
                w.writeheader()
                for r in self.rows:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
            summary = {"aggregates": self.aggregates(), "config_hash": self.config_hash,
                       "runtime": self.runtime, "meta": self.meta}
            path.with_suffix(".json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        except OSError as exc:
            raise DataIOError(f"cannot write report {path}: {exc}") from exc
        return path

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        path = Path(path)
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise DataIOError(f"cannot read report {path}: {exc}") from exc
        floats = set(ROW_FIELDS) - {"id", "subject", "fold"}
        for r in rows:
            for k in floats:
                r[k] = float(r[k])
            r["fold"] = int(r["fold"])
        report = cls(rows)
        side = path.with_suffix(".json")
        if side.exists():
            s = json.loads(side.read_text())
            report.config_hash = s.get("config_hash", "")
            report.runtime = s.get("runtime", 0.0)
            report.failed_folds = s.get("aggregates", {}).get("failed_folds", [])
            report.meta = s.get("meta", {})
        return report


def make_rows(data: EyeArrays, pred: np.ndarray, fold: int = 0) -> list:
    if data.gaze is None:
        raise ProtocolError("evaluation needs gaze labels")
    err = np.atleast_1d(angular_error(data.gaze, pred))
    rows = []
    for i in range(len(data)):
        rows.append({
            "id": data.ids[i],
            "subject": data.subjects[i],
            "fold": int(fold),
            "pitch_pred": float(pred[i, 0]),
            "yaw_pred": float(pred[i, 1]),
            "pitch_gt": float(data.gaze[i, 0]),
            "yaw_gt": float(data.gaze[i, 1]),
            "error_deg": float(err[i]),
            "noise_var": estimate_noise_variance(data.images[i]),
        })
    return rows


def evaluate(ckpt, data: EyeArrays, fold: int = 0, config_hash: str = "") -> EvalReport:
    """Predict with a gaze checkpoint and report per-sample errors."""
    t0 = time.perf_counter()
    pred = gazenet.predict_gaze(ckpt, data.images, data.masks)
    return EvalReport(make_rows(data, pred, fold), config_hash, time.perf_counter() - t0)


def inject_noise(data: EyeArrays, sigmas, seed: int = 0) -> EyeArrays:
    """Copies of ``data`` with Gaussian noise of each sigma; ids get a suffix."""
    rng = np.random.default_rng(seed)
    parts = []
    for s in sigmas:
        noisy = data.images.astype(np.float64) + rng.normal(0.0, s, data.images.shape) if s else data.images
        parts.append(EyeArrays(
            ids=[f"{i}_n{s:g}" for i in data.ids],
            subjects=list(data.subjects),
            images=np.clip(np.rint(noisy), 0, 255).astype(np.uint8),
            gaze=data.gaze,
            masks=None,
        ))
    return EyeArrays(
        ids=sum((p.ids for p in parts), []),
        subjects=sum((p.subjects for p in parts), []),
        images=np.concatenate([p.images for p in parts]),
        gaze=None if data.gaze is None else np.concatenate([p.gaze for p in parts]),
    )


def run_protocol(index: DatasetIndex, fold_plan: FoldPlan, train_cfg: gazenet.GazeTrainConfig,
                 aeri_ckpt, config_hash: str = "", data: EyeArrays | None = None) -> EvalReport:
    """Export masks once with the frozen network, then train and test per fold.

    A fold whose training aborts is recorded in ``failed_folds`` and the
    report is marked partial.
    """
    t0 = time.perf_counter()
    fold_plan.validate(index.subjects())
    data = index.load() if data is None else data
    aeri = aeri_ckpt if isinstance(aeri_ckpt, aeri_mod.AeriUNet) else aeri_mod.load_aeri(aeri_ckpt)
    aeri = aeri_mod.freeze(aeri)
    if data.masks is None:
        data.masks = aeri_mod.export_masks(aeri, data.images, train_cfg.threshold)
    subjects = np.array(data.subjects)
    rows, failed = [], []
    for f, (train_s, test_s) in enumerate(fold_plan.folds):
        tr = np.flatnonzero(np.isin(subjects, list(train_s)))
        te = np.flatnonzero(np.isin(subjects, list(test_s)))
        try:
            ckpt = gazenet.train_gaze(data.subset(tr), train_cfg, aeri=aeri)
        except TrainingError as exc:
            log.warning("fold %d aborted: %s", f, exc)
            failed.append({"fold": f, "error": str(exc)})
            continue
        test = data.subset(te)
        rows.extend(make_rows(test, gazenet.predict_gaze(ckpt, test.images, test.masks), f))
    if not rows:
        raise ProtocolError(f"all {len(fold_plan.folds)} folds failed")
    return EvalReport(rows, config_hash, time.perf_counter() - t0, failed,
                      meta={"protocol": fold_plan.protocol, "n_folds": len(fold_plan.folds),
                            "kind": train_cfg.kind, "reference": REFERENCE_RESULTS})


def robustness_curve(report: EvalReport, n_bins: int = 10, out_csv=None, out_png=None) -> list:
    """Mean angular error per noise-variance quantile bin.

    Tied quantile edges are merged, so a report whose rows all share one
    noise level yields a single bin.
    """
    if not report.rows:
        raise ProtocolError("empty report")
    if n_bins < 1:
        raise ProtocolError("n_bins must be >= 1")
    noise = np.array([r["noise_var"] for r in report.rows])
    err = report.errors()
    edges = np.unique(np.quantile(noise, np.linspace(0, 1, n_bins + 1)))
    which = np.searchsorted(edges[1:-1], noise, side="right") if len(edges) > 2 else np.zeros(len(noise), int)
    table = []
    for b in range(max(len(edges) - 1, 1)):
        sel = which == b
        if not sel.any():
            continue
        table.append({
            "bin": b,
            "lo": float(edges[b]),
            "hi": float(edges[min(b + 1, len(edges) - 1)]),
            "count": int(sel.sum()),
            "mean_noise_var": float(noise[sel].mean()),
            "mean_error_deg": float(err[sel].mean()),
        })
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
    if out_png is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([t["mean_noise_var"] for t in table], [t["mean_error_deg"] for t in table], "o-")
        ax.set_xlabel("estimated noise variance")
        ax.set_ylabel("mean angular error (deg)")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
    return table


def gaze_histograms(report: EvalReport, bins: int = 30) -> dict:
    """2-D histograms (ground truth x prediction) in degrees for pitch and yaw."""
    if not report.rows:
        raise ProtocolError("empty report")
    out = {}
    for axis in ("pitch", "yaw"):
        gt = np.degrees([r[f"{axis}_gt"] for r in report.rows])
        pr = np.degrees([r[f"{axis}_pred"] for r in report.rows])
        lo, hi = min(gt.min(), pr.min()), max(gt.max(), pr.max())
        if hi - lo < 1e-9:
            lo, hi = lo - 1.0, hi + 1.0
        counts, edges, _ = np.histogram2d(gt, pr, bins=bins, range=[[lo, hi], [lo, hi]])
        out[axis] = (counts, edges)
    return out


def heatmap_export(report: EvalReport, out_path, bins: int = 30) -> dict:
    """Write ``<stem>_pitch.png`` and ``<stem>_yaw.png``; returns counts and paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    hists = gaze_histograms(report, bins)
    paths = {}
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        for axis, (counts, edges) in hists.items():
            fig, ax = plt.subplots(figsize=(4.5, 4))
            im = ax.imshow(counts.T, origin="lower", cmap="viridis",
                           extent=[edges[0], edges[-1], edges[0], edges[-1]], aspect="equal")
            ax.plot([edges[0], edges[-1]], [edges[0], edges[-1]], "w--", lw=0.8)
            ax.set_xlabel(f"ground-truth {axis} (deg)")
            ax.set_ylabel(f"predicted {axis} (deg)")
            fig.colorbar(im, ax=ax, label="count")
            fig.tight_layout()
            p = out_path.with_name(f"{out_path.stem}_{axis}.png")
            fig.savefig(p, dpi=120)
            plt.close(fig)
            paths[axis] = p
    except OSError as exc:
        raise DataIOError(f"cannot write heatmaps at {out_path}: {exc}") from exc
    return {"counts": {k: v[0] for k, v in hists.items()}, "edges": {k: v[1] for k, v in hists.items()},
            "paths": paths}


def arrow_overlay(images, pred, out_path, gt=None, cols: int = 4, length: float = 18.0) -> Path:
    """Grid of eye images with predicted gaze (green) and optional truth (red)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    images, pred = np.asarray(images), np.asarray(pred, dtype=np.float64)
    n = len(images)
    rows = max(1, -(-n // cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 1.5 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i in range(n):
        ax = axes.ravel()[i]
        h, w = images[i].shape
        ax.imshow(images[i], cmap="gray", vmin=0, vmax=255)
        sets = [(pred[i], "lime")] + ([(np.asarray(gt)[i], "red")] if gt is not None else [])
        for (p, y), color in sets:
            dx, dy = -np.cos(p) * np.sin(y), -np.sin(p)
            ax.arrow(w / 2, h / 2, length * dx, length * dy, color=color, width=0.6, head_width=2.5)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def ablation_suite(index: DatasetIndex, fold_plan: FoldPlan, kinds, cfg: gazenet.GazeTrainConfig,
                   aeri_ckpt, augment_ablation: bool = False, aeri_data=None,
                   aeri_cfg: aeri_mod.AeriTrainConfig | None = None, out_csv=None) -> list:
    """One protocol run per variant kind at a shared seed.

    With ``augment_ablation`` the mask network is additionally retrained on
    ``aeri_data`` once per augmentation row (none, each transform alone,
    all) and the full model is evaluated with each.
    """
    from dataclasses import replace

    data = index.load()
    aeri = aeri_mod.load_aeri(aeri_ckpt) if not isinstance(aeri_ckpt, aeri_mod.AeriUNet) else aeri_ckpt
    data.masks = aeri_mod.export_masks(aeri, data.images, cfg.threshold)
    table = []
    for kind in kinds:
        kcfg = replace(cfg, kind=kind)
        report = run_protocol(index, fold_plan, kcfg, aeri, data=data)
        n_params = gazenet.count_parameters(gazenet.build_msgazenet(kcfg.arch()))
        table.append({"kind": kind, "mean_error_deg": report.mean_error(), "std_deg": report.fold_std(),
                      "n_params": n_params, "partial": report.partial})
        log.info("ablation %s", json.dumps(table[-1]))
    if augment_ablation:
        if aeri_data is None or aeri_cfg is None:
            raise ProtocolError("augmentation ablation needs mask-network data and config")
        for name, aug in single_transform_ablation():
            ck = aeri_mod.train_aeri(aeri_data, replace(aeri_cfg, augment=aug))
            d = index.load()
            report = run_protocol(index, fold_plan, replace(cfg, kind="full"), ck, data=d)
            table.append({"kind": f"augment:{name}", "mean_error_deg": report.mean_error(),
                          "std_deg": report.fold_std(),
                          "n_params": gazenet.count_parameters(gazenet.build_msgazenet(cfg.arch())),
                          "partial": report.partial})
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
    return table
