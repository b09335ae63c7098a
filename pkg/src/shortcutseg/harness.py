"""Config-driven experiment runs: data, training, probes and report bundles.

Each run is split into three stages so the CLI can execute them separately:
``build_data`` (deterministic from the config), ``train_models`` and
``probe_models``.  ``run_experiment`` chains all three.
"""
from __future__ import annotations

import json
import logging
import pickle
import time
from pathlib import Path

import numpy as np
from sklearn.pipeline import Pipeline

from .config import SEED_DATASET, SEED_INIT, ExperimentConfig
from .dataio import Dataset, MarkerColorSpec, inpaint_dataset, load_dataset, split
from .errors import FormatError, UsageError
from .estimators import MarkerInpainter, UNetSegmenter
from .metrics import recall
from .phantom import (
    MARKER_STREAM,
    generate_dataset,
    generate_scene,
    inject_markers,
    make_frozen_sequence,
    quarter_crop,
)
from .probes import (
    BandSpec,
    band_index_map,
    banded_dice,
    centroid_distribution,
    covered,
    frame_stability,
    lesion_extent,
    aggregate_stability,
    marker_saliency_ratio,
    paired_shortcut_eval,
    predict_masks,
    saliency_map,
    translation_sweep,
)
from .reports import ReportBundle, SaliencyReport, render_reports
from .segnet import (
    SegModel,
    TrainHistory,
    init_unet,
    load_checkpoint,
    output_geometry,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
PICKLE_FILE = "bundle.pkl"


# ----------------------------------------------------------------------------
# data


def _scenes(config: ExperimentConfig, split_index: int, n: int, placement: str | None = None,
            marked: bool = False, ids_prefix: str = "") -> tuple[Dataset, np.ndarray]:
    """Generated split plus the marker footprints ([N,H,W], all False when unmarked)."""
    spec = config.scene_spec(placement)
    mspec = config.marker_spec()
    images, masks, ids, present, cents, prints = [], [], [], [], [], []
    for i in range(n):
        seed = config.scene_seed(split_index, i)
        scene = generate_scene(spec, seed)
        image, fp, flag = scene.image, np.zeros(scene.mask.shape, dtype=bool), False
        if marked and scene.mask.any():
            image, flag, fp = inject_markers(scene.image, scene.mask, mspec,
                                             np.random.default_rng([seed, MARKER_STREAM]), return_footprint=True)
        images.append(image)
        masks.append(scene.mask)
        ids.append(f"{ids_prefix}{i:05d}")
        present.append(flag)
        cents.append(scene.centroid)
        prints.append(fp)
    return Dataset(np.stack(images), np.stack(masks), ids, present, cents), np.stack(prints)


def _quarter_cropped(ds: Dataset, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    pairs = [quarter_crop(im, m, rng) for im, m in zip(ds.images, ds.masks)]
    return Dataset(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), list(ds.ids))


def build_data(config: ExperimentConfig) -> dict[str, object]:
    """All datasets an experiment needs, generated (or loaded) deterministically."""
    d = config["data"]
    if config.kind == "audit":
        return {"audit": load_dataset(d["ingest_path"], target_size=d["target_size"])}
    if config.kind == "padding_shortcut":
        if d["ingest_path"]:
            full = load_dataset(d["ingest_path"], target_size=d["target_size"])
            tr, va, te = split(full, seed=config.stream(SEED_DATASET))
            return {"train": tr, "val": va, "test": _quarter_cropped(te, config.stream(SEED_DATASET))}
        return {"train": _scenes(config, TRAIN, d["n_train"], "centered")[0],
                "val": _scenes(config, VAL, d["n_val"], "centered")[0],
                "test": _scenes(config, TEST, d["n_test"], "quarter_crop")[0]}
    # marker_shortcut: the clean test split uses the same scene seeds as the marked one
    marked_test, footprints = _scenes(config, TEST, d["n_test"], marked=True)
    return {"train": _scenes(config, TRAIN, d["n_train"], marked=True)[0],
            "val": _scenes(config, VAL, d["n_val"], marked=True)[0],
            "test_marked": marked_test, "test_footprints": footprints,
            "test_clean": _scenes(config, TEST, d["n_test"])[0]}


def write_data(config: ExperimentConfig, out_dir) -> list[Path]:
    """Generate the experiment's datasets on disk in the phantom directory layout."""
    if config.kind == "audit":
        raise UsageError("audit experiments ingest data; there is nothing to generate")
    out_dir = Path(out_dir)
    d = config["data"]
    placements = {"padding_shortcut": ("centered", "centered", "quarter_crop")}.get(
        config.kind, (d["placement"],) * 3)
    marks = config.marker_spec() if config.kind == "marker_shortcut" else None
    roots = []
    for (name, idx, n), placement in zip((("train", TRAIN, d["n_train"]), ("val", VAL, d["n_val"]),
                                          ("test", TEST, d["n_test"])), placements):
        spec = config.scene_spec(placement)
        generate_dataset(out_dir / name, n, spec, marks, base_seed=config.scene_seed(idx, 0))
        roots.append(out_dir / name)
        if marks is not None and name == "test":
            generate_dataset(out_dir / "test_clean", n, spec, None, base_seed=config.scene_seed(idx, 0))
            roots.append(out_dir / "test_clean")
    return roots


# ----------------------------------------------------------------------------
# training


def _color_spec(config: ExperimentConfig) -> MarkerColorSpec:
    m = config["markers"]
    return MarkerColorSpec(tuple(m["color"]), m["tolerance"])


def model_plan(config: ExperimentConfig, channels: int) -> dict[str, tuple]:
    """name -> (UNetConfig, TrainSchedule, training-set key)."""
    if config.kind == "padding_shortcut":
        plan = {"M_ori": (config.unet_config(channels), config.schedule("none"), "train"),
                "M_crop": (config.unet_config(channels), config.schedule(config["schedule"]["augmentation"]),
                           "train")}
        if config["probes"]["valid_control"]:
            plan["M_valid"] = (config.unet_config(channels, depth=config["probes"]["valid_depth"], padding="valid"),
                               config.schedule("none"), "train")
        return plan
    if config.kind == "marker_shortcut":
        return {"baseline": (config.unet_config(channels), config.schedule("none"), "train"),
                "mitigated": (config.unet_config(channels), config.schedule("none"), "train_inpainted")}
    return {}


def train_models(config: ExperimentConfig, data: dict, progress=None) -> tuple[dict, dict]:
    """Train every model of the experiment; returns (models, histories)."""
    channels = data["train"].images.shape[1] if "train" in data else 1
    if config.kind == "marker_shortcut":
        spec = _color_spec(config)
        data.setdefault("train_inpainted", inpaint_dataset(data["train"], spec))
        data.setdefault("val_inpainted", inpaint_dataset(data["val"], spec))
    models, histories = {}, {}
    for name, (ucfg, schedule, key) in model_plan(config, channels).items():
        val = data["val_inpainted" if key == "train_inpainted" else "val"]
        log.info("training %s (%s, %d epochs)", name, ucfg.padding_mode.value, schedule.epochs)
        cb = None if progress is None else (lambda e, l, v, _n=name: progress(_n, e, l, v))
        model = init_unet(ucfg, seed=config.stream(SEED_INIT))
        models[name], histories[name] = train(model, data[key], val if len(val) else None, schedule, progress=cb)
    return models, histories


def save_models(models: dict[str, SegModel], histories: dict[str, TrainHistory], out_dir) -> dict[str, str]:
    ckdir = Path(out_dir) / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, model in models.items():
        paths[name] = str(save_checkpoint(model, ckdir / f"{name}.ssck"))
    hist = {k: {"loss": h.loss, "val_dice": h.val_dice} for k, h in histories.items()}
    (ckdir / "histories.json").write_text(json.dumps(hist, indent=2, sort_keys=True) + "\n")
    return paths


def load_models(config: ExperimentConfig, out_dir, channels: int) -> tuple[dict, dict]:
    ckdir = Path(out_dir) / "checkpoints"
    models = {}
    for name in model_plan(config, channels):
        path = ckdir / f"{name}.ssck"
        if not path.exists():
            raise FileNotFoundError(f"{path}: checkpoint missing; run the train step first")
        models[name] = load_checkpoint(path)
    histories = {}
    hist_path = ckdir / "histories.json"
    if hist_path.exists():
        try:
            raw = json.loads(hist_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{hist_path}: not valid JSON") from exc
        histories = {k: TrainHistory(v["loss"], v["val_dice"]) for k, v in raw.items()}
    return models, histories


def predictor(config: ExperimentConfig, name: str, model: SegModel, data: dict | None = None):
    """What the probes evaluate: the bare model, or inpainting + model for the mitigated run."""
    if config.kind == "marker_shortcut" and name == "mitigated":
        m = config["markers"]
        inpainter = MarkerInpainter(color=tuple(m["color"]), tolerance=m["tolerance"])
        if data is not None:
            inpainter.fit(data["train"].images[:1])
        return Pipeline([("inpaint", inpainter), ("unet", UNetSegmenter.from_model(model))])
    return model


# ----------------------------------------------------------------------------
# probes


def _border_recall(preds: np.ndarray, gts: np.ndarray, spec: BandSpec) -> float:
    """Mean recall on the outermost band over images with foreground there."""
    h, w = gts.shape[-2:]
    outer = band_index_map(h, w, spec) == spec.n_bands - 1
    vals = [recall(p[outer], g[outer]) for p, g in zip(preds, gts) if g[outer].any()]
    return float(np.mean(vals)) if vals else float("nan")


def _probe_padding(config: ExperimentConfig, data: dict, models: dict, bundle: ReportBundle) -> None:
    p = config["probes"]
    spec = BandSpec(p["n_bands"])
    test = data["test"]
    bundle.add("data", "centroids", centroid_distribution(data["train"].masks, bins=p["centroid_bins"]))
    scene_spec = config.scene_spec("centered")
    for name, model in models.items():
        preds = predict_masks(model, test.images)
        h, w = test.masks.shape[-2:]
        cover = covered(model, h, w)
        banded = banded_dice(preds, test.masks, spec, coverage=None if cover.all() else cover)
        bundle.add(name, "banded", banded)
        limit = None
        if not cover.all():
            # keep the whole lesion inside the footprint so only translation varies
            oh, ow, _, _ = output_geometry(model.config, h, w)
            ex, ey = lesion_extent(scene_spec, p["sweep_seed"])
            limit = min(oh, ow) / 2 - max(ex, ey) - 1
        if not config["data"]["ingest_path"] and (limit is None or limit > 0):
            sweep = translation_sweep(model, scene_spec, p["sweep_steps"], seed=p["sweep_seed"],
                                      angle=np.deg2rad(p["sweep_angle"]), max_offset=limit)
            bundle.add(name, "sweep", sweep)
        bundle.summary[name] = {
            "band_mean": banded.band_mean, "band_spread": banded.spread,
            "inner_minus_outer": banded.band_mean[0] - banded.band_mean[-1],
            "overall_dice": banded.overall_mean,
            "border_band_recall": _border_recall(preds, test.masks, spec),
        }
        if "sweep" in bundle.reports[name]:
            sw = bundle.reports[name]["sweep"]
            bundle.summary[name].update(sweep_recall_center=sw.recall[0], sweep_recall_border=sw.recall[-1],
                                        sweep_recall_spread=sw.recall_spread)


def _probe_marker(config: ExperimentConfig, data: dict, models: dict, bundle: ReportBundle) -> None:
    mk, p = config["markers"], config["probes"]
    marked, clean, prints = data["test_marked"], data["test_clean"], data["test_footprints"]
    mspec = config.marker_spec()
    sequences = []
    for i in range(len(clean)):
        if len(sequences) == mk["n_sequences"]:
            break
        if clean.masks[i].any():
            frames = make_frozen_sequence(clean.images[i], clean.masks[i], mspec, mk["sequence_length"])
            sequences.append((clean.ids[i], np.stack(frames), clean.masks[i]))
    for name, model in models.items():
        pred = predictor(config, name, model, data)
        paired = paired_shortcut_eval(pred, marked, clean)
        bundle.add(name, "paired", paired)
        stab = [frame_stability(pred, frames, gt, video_id=sid) for sid, frames, gt in sequences]
        if stab:
            bundle.add(name, "stability", stab)
        summary = {"marked_mean": paired.marked_mean, "clean_mean": paired.clean_mean,
                   "mean_delta": paired.mean_delta}
        if stab:
            agg = aggregate_stability(stab)
            summary.update(stability_mean=agg.mean, stability_std=agg.std)
        bundle.summary[name] = summary
    base = models.get("baseline")
    if base is not None and p["saliency_images"]:
        rng = np.random.default_rng(config.stream(MARKER_STREAM))
        ids, fg, bg, ratios = [], [], [], []
        for i in range(len(marked)):
            if len(ids) == p["saliency_images"]:
                break
            if not prints[i].any():
                continue
            sal = saliency_map(base, marked.images[i], method=p["saliency_method"])
            ratio = marker_saliency_ratio(sal, prints[i], marked.masks[i], rng)
            ids.append(marked.ids[i])
            fg.append(float(sal[prints[i]].mean()))
            bg.append(fg[-1] / ratio if ratio else float("nan"))
            ratios.append(ratio)
        report = SaliencyReport(ids, fg, bg, ratios)
        bundle.add("baseline", "saliency", report)
        bundle.summary["baseline"]["saliency_fraction_ratio_ge_2"] = report.fraction_above


def probe_models(config: ExperimentConfig, data: dict, models: dict, histories: dict,
                 checkpoints: dict | None = None) -> ReportBundle:
    bundle = ReportBundle(config.kind, config.to_dict(), histories=dict(histories),
                          checkpoints=dict(checkpoints or {}))
    if config.kind == "padding_shortcut":
        _probe_padding(config, data, models, bundle)
    elif config.kind == "marker_shortcut":
        _probe_marker(config, data, models, bundle)
    return bundle


# ----------------------------------------------------------------------------
# entry points


def _finish(bundle: ReportBundle, out_dir, started: float) -> ReportBundle:
    bundle.timings["total_seconds"] = round(time.time() - started, 3)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.ini").write_text(ExperimentConfig.from_dict(bundle.config).to_ini())
        with open(out_dir / PICKLE_FILE, "wb") as fh:
            pickle.dump(bundle, fh)
        render_reports(bundle, out_dir)
    return bundle


def run_experiment(config: ExperimentConfig, out_dir=None, progress=None, save: bool = True) -> ReportBundle:
    """Full pipeline for any experiment kind; writes checkpoints and reports when ``save``."""
    config.validate()
    if config.kind == "audit":
        return run_audit(config, out_dir, save=save)
    started = time.time()
    out_dir = Path(out_dir) if out_dir is not None else config.out_dir
    data = build_data(config)
    t0 = time.time()
    models, histories = train_models(config, data, progress)
    train_seconds = time.time() - t0
    checkpoints = save_models(models, histories, out_dir) if save else {}
    bundle = probe_models(config, data, models, histories, checkpoints)
    bundle.timings["train_seconds"] = round(train_seconds, 3)
    bundle = _finish(bundle, out_dir if save else None, started)
    bundle.models = models
    return bundle


def run_padding_experiment(config: ExperimentConfig, out_dir=None, progress=None, save: bool = True) -> ReportBundle:
    if config.kind != "padding_shortcut":
        raise UsageError(f"expected a padding_shortcut config, got {config.kind!r}")
    return run_experiment(config, out_dir, progress, save)


def run_marker_experiment(config: ExperimentConfig, out_dir=None, progress=None, save: bool = True) -> ReportBundle:
    if config.kind != "marker_shortcut":
        raise UsageError(f"expected a marker_shortcut config, got {config.kind!r}")
    return run_experiment(config, out_dir, progress, save)


def run_audit(config: ExperimentConfig, out_dir=None, save: bool = True) -> ReportBundle:
    """Centroid audit of an external dataset, plus banded Dice when a predictions folder is given."""
    if config.kind != "audit":
        raise UsageError(f"expected an audit config, got {config.kind!r}")
    config.validate()
    started = time.time()
    root = Path(config["data"]["ingest_path"])
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: audit directory does not exist")
    if not any(root.iterdir()):
        raise UsageError(f"{root}: audit directory is empty")
    data = load_dataset(root, target_size=config["data"]["target_size"])
    p = config["probes"]
    bundle = ReportBundle("audit", config.to_dict())
    cent = centroid_distribution(data.masks, bins=p["centroid_bins"])
    bundle.add("data", "centroids", cent)
    bundle.summary["data"] = {"central_fraction": cent.central_fraction, "n_masks": len(data),
                              "n_empty": cent.n_empty}
    if p["predictions_path"]:
        preds = load_dataset_masks(p["predictions_path"], data.ids, config["data"]["target_size"])
        banded = banded_dice(preds, data.masks, BandSpec(p["n_bands"]))
        bundle.add("predictions", "banded", banded)
        bundle.summary["predictions"] = {"band_mean": banded.band_mean, "band_spread": banded.spread}
    out_dir = Path(out_dir) if out_dir is not None else config.out_dir
    return _finish(bundle, out_dir if save else None, started)


def load_dataset_masks(folder, ids: list[str], target_size: int) -> np.ndarray:
    """Predicted masks stored as ``<folder>/<stem>.png`` for every stem in ``ids``."""
    from .imaging import read_mask, resize_mask

    folder = Path(folder)
    missing = [s for s in ids if not (folder / f"{s}.png").exists()]
    if missing:
        raise FileNotFoundError(f"{folder}: missing predicted masks for {', '.join(missing)}")
    return np.stack([resize_mask(read_mask(folder / f"{s}.png"), target_size, target_size) for s in ids])


def load_bundle(out_dir) -> ReportBundle:
    path = Path(out_dir) / PICKLE_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path}: no saved bundle; run an experiment first")
    try:
        with open(path, "rb") as fh:
            bundle = pickle.load(fh)
    except (pickle.UnpicklingError, EOFError) as exc:
        raise FormatError(f"{path}: corrupted bundle") from exc
    if not isinstance(bundle, ReportBundle):
        raise FormatError(f"{path}: not a report bundle")
    return bundle
