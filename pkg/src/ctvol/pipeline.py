"""The end-to-end commands behind the ``ctvol`` CLI.

Layout of the output directory::

    index.json                      sample ids + per-source shape/spacing
    slices/{image,lung,infection}/{source_id}_{slice:04}.png
    split.json
    augmented/...                   (augment command)
    loss_log.csv                    (train)
    metrics.json                    (eval)
    predictions/{lung,infection}/{sample_id}.png
    predictions/{source_id}_{lung,infection}.nii.gz
    reports/{patient_id}.json, reports/prioritization.csv
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import re
from pathlib import Path

import numpy as np

from . import augment as aug
from .config import ConfigError
from .metrics import ConfusionCounts, dataset_counts, iou
from .phantom import PhantomSpec, generate_phantom
from .segnet import ModelConfig, TrainState, build_model, load_checkpoint, save_checkpoint, train_step
from .volume_io import (
    DatasetSplit,
    SliceSample,
    Volume3D,
    VolumeIOError,
    binarize,
    decode_slice_image,
    export_slice_image,
    extract_slices,
    read_nifti,
    save_nifti,
    slice_name,
    split_dataset,
)
from .volumetry import build_report, prioritization_rows

log = logging.getLogger("ctvol")

KINDS = ("image", "lung", "infection")
TRIPLET = re.compile(r"^(?P<sid>.+)_(?P<kind>ct|lung|infection)\.nii(\.gz)?$")


class MissingArtifact(ConfigError):
    pass


class DataError(VolumeIOError):
    pass


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

def write_atomic(path: Path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path, what: str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}")
    return json.loads(path.read_text())


def out_dir(cfg) -> Path:
    return Path(cfg["paths"]["output_dir"])


def find_triplets(input_dir: Path) -> dict:
    """Map source id -> {"ct": path, "lung": path, "infection": path}."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise MissingArtifact(f"input directory {input_dir} does not exist")
    found: dict = {}
    for p in sorted(input_dir.iterdir()):
        m = TRIPLET.match(p.name)
        if m:
            found.setdefault(m["sid"], {})[m["kind"]] = p
    return found


# ---------------------------------------------------------------------------
# generate-phantoms
# ---------------------------------------------------------------------------

def cmd_generate_phantoms(cfg) -> list[str]:
    spec = PhantomSpec.from_dict({"seed": cfg["seed"], **cfg["phantom"]["spec"]})
    n = int(cfg["phantom"]["n"])
    if n < 1:
        raise ConfigError("phantom.n must be >= 1")
    dest = Path(cfg["paths"]["input_dir"])
    dest.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        ph = generate_phantom(spec, i)
        save_nifti(ph.ct, dest / f"{ph.patient_id}_ct.nii.gz")
        save_nifti(ph.lung, dest / f"{ph.patient_id}_lung.nii.gz")
        save_nifti(ph.infection, dest / f"{ph.patient_id}_infection.nii.gz")
        ids.append(ph.patient_id)
    log.info("wrote %d phantom triplets to %s", n, dest)
    return ids


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def load_triplet(paths: dict) -> tuple[Volume3D, Volume3D, Volume3D]:
    missing = [k for k in ("ct", "lung", "infection") if k not in paths]
    if missing:
        raise DataError(f"incomplete triplet, missing {missing}")
    ct = read_nifti(paths["ct"])
    lung = read_nifti(paths["lung"])
    inf = read_nifti(paths["infection"])
    lung = Volume3D.mask(lung.voxels, lung.spacing)
    inf = Volume3D.mask(inf.voxels, inf.spacing)
    if not ct.shape == lung.shape == inf.shape:
        raise DataError(f"shape mismatch ct {ct.shape}, lung {lung.shape}, infection {inf.shape}")
    return ct, lung, inf


def cmd_convert(cfg) -> dict:
    """Slice every NIfTI triplet into PNGs and write ``index.json``.

    A triplet that fails to parse is reported and skipped; the other ones
    are still converted, but the index is only written when all succeed.
    """
    triplets = find_triplets(Path(cfg["paths"]["input_dir"]))
    if not triplets:
        raise DataError("no volumes found")
    dest = out_dir(cfg)
    window = tuple(cfg["window"])
    sources = {}
    samples = []
    failures = []
    for sid, paths in triplets.items():
        try:
            ct, lung, inf = load_triplet(paths)
        except (VolumeIOError, OSError) as exc:
            log.error("failed to read %s: %s", sid, exc)
            failures.append({"source_id": sid, "error": str(exc)})
            continue
        images = extract_slices(ct, window)
        lungs = extract_slices(lung)
        infs = extract_slices(inf)
        for k, arrays in enumerate(zip(images, lungs, infs)):
            name = slice_name(sid, k)
            for kind, arr in zip(KINDS, arrays):
                write_atomic(dest / "slices" / kind / f"{name}.png", export_slice_image(arr))
            samples.append({"id": name, "source_id": sid, "slice_index": k})
        sources[sid] = {"shape": list(ct.shape), "spacing": list(ct.spacing), "slices": ct.shape[2]}
    if failures:
        raise DataError(f"{len(failures)} of {len(triplets)} volumes failed to convert: "
                        + "; ".join(f"{f['source_id']}: {f['error']}" for f in failures))
    index = {"window": list(window), "sources": sources, "samples": samples}
    write_json(dest / "index.json", index)
    log.info("converted %d volumes into %d slices", len(sources), len(samples))
    return index


def load_index(cfg) -> dict:
    return read_json(out_dir(cfg) / "index.json", "slice index (run `convert` first)")


def load_sample(cfg, entry: dict) -> SliceSample:
    base = out_dir(cfg) / "slices"
    arrays = []
    for kind in KINDS:
        p = base / kind / f"{entry['id']}.png"
        if not p.exists():
            raise MissingArtifact(f"slice image {p} is missing")
        arrays.append(decode_slice_image(p.read_bytes()))
    return SliceSample(arrays[0], binarize(arrays[1]), binarize(arrays[2]),
                       entry["source_id"], entry["slice_index"])


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def cmd_split(cfg) -> DatasetSplit:
    index = load_index(cfg)
    unit = cfg["split"]["unit"]
    if unit == "patient":
        ids = sorted(index["sources"])
    else:
        ids = [s["id"] for s in index["samples"]]
    split = split_dataset(ids, tuple(cfg["split"]["fractions"]), cfg["seed"])
    write_json(out_dir(cfg) / "split.json", {**split.to_dict(), "unit": unit})
    log.info("split %d %ss into %d/%d/%d", len(ids), unit,
             len(split.train_ids), len(split.val_ids), len(split.test_ids))
    return split


def subset_entries(cfg, index: dict, subset: str) -> list[dict]:
    samples = index["samples"]
    if subset == "all":
        return list(samples)
    split = read_json(out_dir(cfg) / "split.json", "split file (run `split` first)")
    chosen = set(split[f"{subset}_ids"])
    key = "source_id" if split.get("unit", "patient") == "patient" else "id"
    return [s for s in samples if s[key] in chosen]


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def load_augspec(cfg) -> aug.AugSpec:
    spec = cfg["augment"]["spec"]
    if spec is None:
        return aug.default_spec(seed=cfg["seed"])
    if isinstance(spec, str):
        p = Path(spec)
        if not p.exists():
            raise MissingArtifact(f"augmentation spec {p} not found")
        return aug.AugSpec.from_json(p.read_text())
    return aug.AugSpec.from_dict(spec)


def cmd_augment(cfg) -> list[str]:
    """Write ``augment.copies`` augmented versions of every indexed slice."""
    index = load_index(cfg)
    spec = load_augspec(cfg)
    dest = out_dir(cfg) / "augmented"
    copies = int(cfg["augment"]["copies"])
    entries = []
    for i, entry in enumerate(index["samples"]):
        s = load_sample(cfg, entry)
        for c in range(copies):
            a = aug.apply_pipeline(spec, i * copies + c, s)
            name = f"{entry['id']}_aug{c}"
            for kind, arr in zip(KINDS, (a.image, a.lung_mask, a.infection_mask)):
                write_atomic(dest / kind / f"{name}.png", export_slice_image(arr))
            entries.append({"id": name, "source_id": entry["source_id"],
                            "slice_index": entry["slice_index"], "sample_index": i * copies + c})
    write_json(dest / "index.json", {"spec": spec.to_dict(), "samples": entries})
    return [e["id"] for e in entries]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def to_batch(samples, channels: int):
    images = np.stack([s.image for s in samples])[:, None]
    if channels > 1:
        images = np.repeat(images, channels, axis=1)
    lung = np.stack([s.lung_mask for s in samples]).astype(np.float64)
    inf = np.stack([s.infection_mask for s in samples]).astype(np.float64)
    return images.astype(np.float64), lung, inf


def batch_order(n: int, batch_size: int, steps: int, seed: int):
    """Yield index arrays, one per step, walking seeded per-epoch permutations."""
    epoch = 0
    order = np.random.default_rng([seed, epoch]).permutation(n)
    pos = 0
    for _ in range(steps):
        idx = []
        while len(idx) < min(batch_size, n):
            if pos == n:
                epoch += 1
                order = np.random.default_rng([seed, epoch]).permutation(n)
                pos = 0
            idx.append(order[pos])
            pos += 1
        yield np.array(idx)


def cmd_train(cfg) -> dict:
    index = load_index(cfg)
    entries = subset_entries(cfg, index, "train")
    if not entries:
        raise ConfigError("the training split is empty")
    tcfg = cfg["train"]
    mcfg = ModelConfig.from_dict(cfg["model"])
    seed = cfg["seed"]
    samples = [load_sample(cfg, e) for e in entries]
    spec = load_augspec(cfg) if tcfg["augment"] else None

    state = TrainState(build_model(mcfg, seed))
    ckpt_path = Path(cfg["paths"]["checkpoint"])
    every = int(tcfg.get("checkpoint_every") or 0)
    rows = []
    bs = int(tcfg["batch_size"])
    for step, idx in enumerate(batch_order(len(samples), bs, int(tcfg["steps"]), seed)):
        chosen = [samples[i] for i in idx]
        if spec is not None:
            chosen = [aug.apply_pipeline(spec, step * bs + j, s) for j, s in enumerate(chosen)]
        value = train_step(state, to_batch(chosen, mcfg.input_channels), float(tcfg["lr"]))
        rows.append((state.step, value))
        if step % 100 == 0:
            log.info("step %d loss %.5f", state.step, value)
        if every and state.step % every == 0:
            save_checkpoint(ckpt_path, state.model, state.step, seed)
    save_checkpoint(ckpt_path, state.model, state.step, seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for step, value in rows:
        w.writerow([step, repr(value)])
    write_atomic(out_dir(cfg) / "loss_log.csv", buf.getvalue())
    return {"steps": state.step, "final_loss": rows[-1][1] if rows else None}


# ---------------------------------------------------------------------------
# eval / infer
# ---------------------------------------------------------------------------

def load_model(cfg):
    path = Path(cfg["paths"]["checkpoint"])
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found (run `train` first)")
    return load_checkpoint(path).model()


def predict_samples(model, samples, batch_size: int = 16) -> list[np.ndarray]:
    """Binary (2, H, W) prediction per sample, in input order."""
    out = []
    for i in range(0, len(samples), batch_size):
        images, _, _ = to_batch(samples[i:i + batch_size], model.cfg.input_channels)
        out.extend(model.predict(images))
    return out


def cmd_eval(cfg) -> dict:
    index = load_index(cfg)
    entries = subset_entries(cfg, index, cfg["eval"]["subset"])
    if not entries:
        raise ConfigError(f"eval subset {cfg['eval']['subset']!r} is empty")
    samples = [load_sample(cfg, e) for e in entries]
    gts = [np.stack([s.lung_mask, s.infection_mask]) for s in samples]
    if cfg["eval"]["ground_truth_as_prediction"]:
        preds = [g.copy() for g in gts]
    else:
        preds = predict_samples(load_model(cfg), samples)
    lung_c, inf_c = dataset_counts(zip(preds, gts))
    per_slice = [
        {"id": e["id"], "lung_iou": iou(lc), "infection_iou": iou(ic),
         "lung_counts": lc.to_dict(), "infection_counts": ic.to_dict()}
        for e, lc, ic in zip(entries, lung_c, inf_c)
    ]
    if cfg["eval"]["reduction"] == "mean":
        lung_iou = float(np.mean([p["lung_iou"] for p in per_slice]))
        inf_iou = float(np.mean([p["infection_iou"] for p in per_slice]))
    else:
        lung_iou = iou(sum(lung_c, ConfusionCounts()))
        inf_iou = iou(sum(inf_c, ConfusionCounts()))
    result = {"subset": cfg["eval"]["subset"], "reduction": cfg["eval"]["reduction"],
              "lung_iou": lung_iou, "infection_iou": inf_iou, "per_slice": per_slice}
    write_json(out_dir(cfg) / "metrics.json", result)
    log.info("%s IoU lung %.4f infection %.4f", cfg["eval"]["subset"], lung_iou, inf_iou)
    return result


def cmd_infer(cfg) -> list[str]:
    """Predict masks for every slice of the chosen sources and restack them."""
    index = load_index(cfg)
    chosen = {e["source_id"] for e in subset_entries(cfg, index, cfg["infer"]["subset"])}
    model = load_model(cfg)
    dest = out_dir(cfg) / "predictions"
    written = []
    for sid in sorted(chosen):
        entries = sorted((e for e in index["samples"] if e["source_id"] == sid),
                         key=lambda e: e["slice_index"])
        meta = index["sources"][sid]
        if len(entries) != meta["slices"]:
            raise DataError(f"{sid}: index lists {len(entries)} of {meta['slices']} slices")
        preds = predict_samples(model, [load_sample(cfg, e) for e in entries])
        for e, p in zip(entries, preds):
            write_atomic(dest / "lung" / f"{e['id']}.png", export_slice_image(p[0]))
            write_atomic(dest / "infection" / f"{e['id']}.png", export_slice_image(p[1]))
        stack = np.stack(preds, axis=-1)  # (2, nx, ny, nz)
        for c, kind in enumerate(("lung", "infection")):
            vol = Volume3D.mask(stack[c], meta["spacing"])
            path = dest / f"{sid}_{kind}.nii.gz"
            save_nifti(vol, path.with_name(path.name + ".tmp.nii.gz"))
            os.replace(path.with_name(path.name + ".tmp.nii.gz"), path)
        written.append(sid)
    return written


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(cfg) -> list:
    thresholds = tuple(cfg["triage"]["thresholds"])
    if cfg["report"]["ground_truth"]:
        triplets = find_triplets(Path(cfg["paths"]["input_dir"]))
        pairs = {sid: (p.get("lung"), p.get("infection")) for sid, p in triplets.items()}
    else:
        pred_dir = out_dir(cfg) / "predictions"
        pairs = {}
        if pred_dir.is_dir():
            for p in sorted(pred_dir.glob("*_lung.nii.gz")):
                sid = p.name[: -len("_lung.nii.gz")]
                pairs[sid] = (p, pred_dir / f"{sid}_infection.nii.gz")
    if not pairs:
        raise MissingArtifact("no masks to report on (run `infer`, or set report.ground_truth=true)")
    reports = []
    for sid, (lung_p, inf_p) in sorted(pairs.items()):
        if lung_p is None or inf_p is None or not Path(inf_p).exists():
            raise MissingArtifact(f"{sid}: lung or infection mask missing")
        lung = read_nifti(lung_p)
        inf = read_nifti(inf_p)
        report = build_report(sid, Volume3D.mask(lung.voxels, lung.spacing),
                              Volume3D.mask(inf.voxels, inf.spacing), thresholds)
        reports.append(report)
    dest = out_dir(cfg) / "reports"
    for r in reports:
        write_json(dest / f"{r.patient_id}.json", r.to_dict())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "percent", "severity"])
    for pid, pct, sev in prioritization_rows(reports):
        w.writerow([pid, repr(pct), sev])
    write_atomic(dest / "prioritization.csv", buf.getvalue())
    return reports
