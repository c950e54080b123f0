"""Stage orchestration: generate -> preprocess -> train -> segment ->
post-process -> measure -> evaluate -> report.

Every stage reads and writes only documented files under the output
directory and records a completion marker holding digests of its inputs
and its config section; rerunning a completed stage with unchanged inputs
is a no-op. One seed (``config["seed"]``) governs all randomness.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import volio
from .config import config_digest, measure_config_from, phantom_spec_from, segnet_config_from
from .diff import save_checkpoint, load_checkpoint
from .errors import FormatError, MissingInputError
from .geometry import GeoMeasurements, measure_organ
from .grid import LabelMask, OrganId, SubregionMask, bounding_box_of
from .metrics import (
    MeasurementReport,
    OrganMetrics,
    OrganReport,
    emit_report,
    measurement_mse,
    precision_recall,
    roc_auc,
)
from .phantom import PhantomSpec, generate_dataset, truth_from_dict
from .preprocess import resample_isotropic, resample_mask, resample_subregions, zscore_normalize
from .rpn import (
    MeasureNet,
    MeasurementOutput,
    ORGAN_QUANTITIES,
    box_from_array,
    box_to_array,
    build_measure_samples,
    run_measurement,
    train_measurement,
)
from .segnet import (
    SegSample,
    load_segnet_checkpoint,
    predict_segmentation,
    segnet_config_dict,
    train_segmentation,
)
from .diff import component_rng

STAGES = (
    "gen-phantoms",
    "preprocess",
    "train-seg",
    "segment",
    "postprocess",
    "train-measure",
    "measure",
    "evaluate",
)

_STAGE_CONFIG_KEYS = {
    "gen-phantoms": ("seed", "phantom"),
    "preprocess": ("seed", "phantom", "preprocess"),
    "train-seg": ("seed", "segnet"),
    "segment": ("seed", "segnet"),
    "postprocess": ("seed", "postproc"),
    "train-measure": ("seed", "measure", "eval"),
    "measure": ("seed", "measure", "eval"),
    "evaluate": ("seed", "postproc", "eval"),
}


def make_timestamps() -> dict:
    """Reproducible timestamp: honors SOURCE_DATE_EPOCH, defaults to epoch 0."""
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    iso = datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return {"generated": iso}


def _truth_quantities(organ: OrganId, truth) -> dict:
    """Raw-unit target values for one organ from its analytic truth."""
    values = {"volume_cc": truth.volume_cc}
    if organ in (OrganId.RIGHT_KIDNEY, OrganId.LEFT_KIDNEY):
        values["length_mm"] = truth.length_mm
        values["cortical_thickness_mm"] = truth.cortical_thickness_mm
    elif organ is OrganId.LIVER:
        values["lobe_right_cc"] = truth.lobe_volumes_cc[0]
        values["lobe_left_cc"] = truth.lobe_volumes_cc[1]
    elif organ is OrganId.SPLEEN:
        values["surface_area_cm2"] = truth.surface_area_cm2
    elif organ is OrganId.PROSTATE:
        values["ap_diameter_mm"] = truth.ap_diameter_mm
    return values


class Pipeline:
    def __init__(self, cfg: dict, threads: int = 1, progress=None):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.out = Path(cfg["out_dir"])
        self.digest = config_digest(cfg)
        self._progress = progress

    # -- plumbing -----------------------------------------------------------

    def _note(self, stage: str, event: str, **extra):
        if self._progress is not None:
            self._progress({"stage": stage, "event": event, **extra})

    def _stage_digest(self, stage: str, inputs: list[Path]) -> dict:
        h = hashlib.sha256()
        for path in sorted(str(p) for p in inputs):
            p = Path(path)
            h.update(path.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
        section = {k: self.cfg[k] for k in _STAGE_CONFIG_KEYS[stage]}
        return {
            "inputs": h.hexdigest(),
            "config": hashlib.sha256(
                json.dumps(section, sort_keys=True).encode()
            ).hexdigest(),
        }

    def _marker(self, stage: str) -> Path:
        return self.out / ".stages" / f"{stage}.json"

    def _should_skip(self, stage: str, inputs: list[Path], outputs: list[Path]) -> bool:
        marker = self._marker(stage)
        if not marker.exists():
            return False
        if not all(p.exists() for p in outputs):
            return False
        try:
            recorded = json.loads(marker.read_text())
        except json.JSONDecodeError:
            return False
        return recorded == self._stage_digest(stage, inputs)

    def _mark_done(self, stage: str, inputs: list[Path]):
        marker = self._marker(stage)
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(json.dumps(self._stage_digest(stage, inputs), sort_keys=True))

    @staticmethod
    def _require(path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingInputError(path, stage)
        return path

    def _split_dir(self, kind: str, split: str) -> Path:
        return self.out / kind / split

    def _manifest(self, split: str, stage: str) -> dict:
        path = self._require(self.out / "phantoms" / split / "manifest.json", stage)
        return json.loads(path.read_text())

    def _case_stems(self, split: str, stage: str) -> list[str]:
        return [c["stem"] for c in self._manifest(split, stage)["cases"]]

    def _volume_files(self, directory: Path) -> list[Path]:
        return sorted(directory.glob("*.json")) + sorted(directory.glob("*.raw"))

    def _truths(self, split: str, stage: str) -> dict:
        """{stem: {OrganId: OrganTruth}} from the phantom truth files."""
        out = {}
        for case in self._manifest(split, stage)["cases"]:
            out[case["stem"]] = truth_from_dict(case["truth"])
        return out

    # -- stages ---------------------------------------------------------------

    def gen_phantoms(self):
        stage = "gen-phantoms"
        spec = phantom_spec_from(self.cfg)
        seed = self.cfg["seed"]
        counts = (self.cfg["phantom"]["train_count"], self.cfg["phantom"]["eval_count"])
        outputs = [self.out / "phantoms" / split / "manifest.json" for split in ("train", "eval")]
        if self._should_skip(stage, [], outputs):
            self._note(stage, "skip")
            return
        self._note(stage, "start", train=counts[0], eval=counts[1])
        generate_dataset(counts[0], seed, spec, self.out / "phantoms" / "train", self.threads)
        generate_dataset(counts[1], seed + counts[0], spec, self.out / "phantoms" / "eval", self.threads)
        self._mark_done(stage, [])
        self._note(stage, "done")

    def preprocess(self):
        stage = "preprocess"
        target = self.cfg["preprocess"]["target_mm"]
        inputs = []
        for split in ("train", "eval"):
            self._manifest(split, stage)
            inputs += self._volume_files(self.out / "phantoms" / split)
            inputs.append(self.out / "phantoms" / split / "manifest.json")
        outputs = [self._split_dir("preprocessed", s) / "done.json" for s in ("train", "eval")]
        if self._should_skip(stage, inputs, outputs):
            self._note(stage, "skip")
            return
        self._note(stage, "start", target_mm=target)
        for split in ("train", "eval"):
            out_dir = self._split_dir("preprocessed", split)
            out_dir.mkdir(parents=True, exist_ok=True)
            for stem in self._case_stems(split, stage):
                src = self.out / "phantoms" / split
                grid = volio.read_volume(self._require(src / f"{stem}.json", stage).with_suffix(""))
                mask = volio.read_volume(src / f"{stem}_mask")
                sub = volio.read_subregions(src / f"{stem}_subregions")
                grid = zscore_normalize(resample_isotropic(grid, target))
                mask = resample_mask(mask, target)
                sub = resample_subregions(sub, target)
                volio.write_volume(grid, out_dir / stem)
                volio.write_volume(mask, out_dir / f"{stem}_mask")
                volio.write_volume(sub, out_dir / f"{stem}_subregions")
            (out_dir / "done.json").write_text(json.dumps({"cases": self._case_stems(split, stage)}))
        self._mark_done(stage, inputs)
        self._note(stage, "done")

    def _load_preprocessed(self, split: str, stage: str):
        d = self._split_dir("preprocessed", split)
        samples = []
        for stem in self._case_stems(split, stage):
            self._require(d / f"{stem}.json", stage)
            grid = volio.read_volume(d / stem)
            mask = volio.read_volume(d / f"{stem}_mask")
            samples.append(SegSample(id=stem, image=grid, mask=mask))
        return samples

    def train_seg(self):
        stage = "train-seg"
        d = self._split_dir("preprocessed", "train")
        self._require(d / "done.json", stage)
        inputs = self._volume_files(d)
        ckpt = self.out / "checkpoints" / "segnet.ckpt"
        log_path = self.out / "checkpoints" / "segnet_log.csv"
        if self._should_skip(stage, inputs, [ckpt, log_path]):
            self._note(stage, "skip")
            return
        self._note(stage, "start")
        samples = self._load_preprocessed("train", stage)
        config = segnet_config_from(self.cfg)
        net, log = train_segmentation(samples, config, self.cfg["seed"])
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "kind": "segnet",
            "config": segnet_config_dict(config),
            "seed": self.cfg["seed"],
            "epochs": config.total_epochs,
            "schedule": {"kind": "cosine", "lr0": config.lr0, "total_epochs": config.total_epochs,
                         "lr_min": config.lr_min},
        }
        save_checkpoint(ckpt, net.checkpoint_entries(), meta)
        with log_path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "step", "lr", "loss", "val_dice"])
            for row in log:
                writer.writerow([row.epoch, row.step, repr(row.lr), repr(row.loss),
                                 "" if np.isnan(row.val_dice) else repr(row.val_dice)])
        self._mark_done(stage, inputs)
        self._note(stage, "done", steps=len(log))

    def segment(self):
        stage = "segment"
        ckpt = self._require(self.out / "checkpoints" / "segnet.ckpt", stage)
        d = self._split_dir("preprocessed", "eval")
        self._require(d / "done.json", stage)
        inputs = self._volume_files(d) + [ckpt]
        pred_dir = self.out / "predictions"
        stems = self._case_stems("eval", stage)
        outputs = [pred_dir / f"{s}_pred_mask.json" for s in stems]
        if self._should_skip(stage, inputs, outputs):
            self._note(stage, "skip")
            return
        self._note(stage, "start", cases=len(stems))
        net, _meta = load_segnet_checkpoint(ckpt)
        pred_dir.mkdir(parents=True, exist_ok=True)
        for sample in self._load_preprocessed("eval", stage):
            pred = predict_segmentation(sample.image, net, threads=self.threads)
            volio.write_volume(pred.mask, pred_dir / f"{sample.id}_pred_mask")
            for organ in OrganId:
                volio.write_volume(pred.prob_grid(organ), pred_dir / f"{sample.id}_prob_c{int(organ)}")
        self._mark_done(stage, inputs)
        self._note(stage, "done")

    def postprocess(self):
        stage = "postprocess"
        from .postproc import remove_small_components

        pred_dir = self.out / "predictions"
        stems = self._case_stems("eval", stage)
        inputs = []
        for s in stems:
            inputs.append(self._require(pred_dir / f"{s}_pred_mask.json", stage))
            inputs.append(self._require(pred_dir / f"{s}_pred_mask.raw", stage))
        outputs = [pred_dir / f"{s}_clean_mask.json" for s in stems]
        if self._should_skip(stage, inputs, outputs):
            self._note(stage, "skip")
            return
        self._note(stage, "start")
        for s in stems:
            mask = volio.read_volume(pred_dir / f"{s}_pred_mask")
            clean = remove_small_components(
                mask, self.cfg["postproc"]["min_voxels"], self.cfg["postproc"]["connectivity"]
            )
            volio.write_volume(clean, pred_dir / f"{s}_clean_mask")
        self._mark_done(stage, inputs)
        self._note(stage, "done")

    def train_measure(self):
        stage = "train-measure"
        d = self._split_dir("preprocessed", "train")
        self._require(d / "done.json", stage)
        inputs = self._volume_files(d)
        ckpt = self.out / "checkpoints" / "measure.ckpt"
        log_path = self.out / "checkpoints" / "measure_log.csv"
        if self._should_skip(stage, inputs, [ckpt, log_path]):
            self._note(stage, "skip")
            return
        self._note(stage, "start")
        config = measure_config_from(self.cfg)
        scales = self.cfg["eval"]["scales"]
        truths = self._truths("train", stage)
        rng = component_rng(self.cfg["seed"], "measure", "patches")
        samples = []
        for sample in self._load_preprocessed("train", stage):
            organ_boxes, organ_q = {}, {}
            for organ in OrganId:
                box = bounding_box_of(sample.mask, organ)
                if box is None:
                    continue
                organ_boxes[organ] = box
                raw = _truth_quantities(organ, truths[sample.id][organ])
                organ_q[organ] = np.array(
                    [raw[q] / scales[q] for q in ORGAN_QUANTITIES[organ]], dtype=np.float64
                )
            samples += build_measure_samples(
                sample.image.data, organ_boxes, organ_q, config.patch, rng,
                per_organ=self.cfg["measure"]["patches_per_organ"],
            )
        net, log = train_measurement(samples, config, self.cfg["seed"])
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "kind": "measure",
            "seed": self.cfg["seed"],
            "config": {
                "patch": list(config.patch),
                "channels": list(config.channels),
                "anchor_scales": list(config.anchor_scales),
                "roi_grid": list(config.roi_grid),
                "hidden": config.hidden,
                "total_steps": config.total_steps,
                "steps_per_epoch": config.steps_per_epoch,
            },
        }
        save_checkpoint(ckpt, net.checkpoint_entries(), meta)
        with log_path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss"])
            for step, loss in log:
                writer.writerow([step, repr(loss)])
        self._mark_done(stage, inputs)
        self._note(stage, "done", steps=len(log), patches=len(samples))

    def _load_measure_net(self, ckpt: Path) -> MeasureNet:
        arrays, meta = load_checkpoint(ckpt)
        if meta.get("kind") != "measure":
            raise FormatError(f"{ckpt}: not a measurement checkpoint")
        config = measure_config_from(self.cfg)
        net = MeasureNet(config, seed=0)
        net.load_entries(arrays)
        return net

    def measure(self):
        stage = "measure"
        ckpt = self._require(self.out / "checkpoints" / "measure.ckpt", stage)
        d = self._split_dir("preprocessed", "eval")
        self._require(d / "done.json", stage)
        inputs = self._volume_files(d) + [ckpt]
        pred_dir = self.out / "predictions"
        stems = self._case_stems("eval", stage)
        outputs = [pred_dir / f"{s}_measure.json" for s in stems]
        if self._should_skip(stage, inputs, outputs):
            self._note(stage, "skip")
            return
        self._note(stage, "start")
        net = self._load_measure_net(ckpt)
        pred_dir.mkdir(parents=True, exist_ok=True)
        for sample in self._load_preprocessed("eval", stage):
            results = run_measurement(sample.image.data, net)
            doc = {o.name: m.to_dict() for o, m in sorted(results.items())}
            (pred_dir / f"{sample.id}_measure.json").write_text(
                json.dumps(doc, sort_keys=True, indent=1) + "\n"
            )
        self._mark_done(stage, inputs)
        self._note(stage, "done")

    def evaluate(self):
        stage = "evaluate"
        pred_dir = self.out / "predictions"
        stems = self._case_stems("eval", stage)
        d = self._split_dir("preprocessed", "eval")
        inputs = []
        for s in stems:
            inputs.append(self._require(pred_dir / f"{s}_clean_mask.json", stage))
            inputs.append(self._require(pred_dir / f"{s}_clean_mask.raw", stage))
            inputs.append(self._require(pred_dir / f"{s}_measure.json", stage))
            for organ in OrganId:
                inputs.append(self._require(pred_dir / f"{s}_prob_c{int(organ)}.raw", stage))
        outputs = [self.out / "report.json", self.out / "roc.csv"]
        if self._should_skip(stage, inputs, outputs):
            self._note(stage, "skip")
            return
        self._note(stage, "start")
        scales = self.cfg["eval"]["scales"]
        truths = self._truths("eval", stage)
        counts = {o: np.zeros(3, dtype=np.int64) for o in OrganId}  # tp, fp, fn
        roc_scores = {o: [] for o in OrganId}
        roc_truth = {o: [] for o in OrganId}
        learned_vals = {o: [] for o in OrganId}
        learned_truth_vals = {o: [] for o in OrganId}
        learned_scores = {o: [] for o in OrganId}
        learned_boxes = {o: [] for o in OrganId}
        geo_dicts = {o: [] for o in OrganId}
        for s in stems:
            gt = volio.read_volume(d / f"{s}_mask")
            sub = volio.read_subregions(d / f"{s}_subregions")
            clean = volio.read_volume(pred_dir / f"{s}_clean_mask")
            measures = json.loads((pred_dir / f"{s}_measure.json").read_text())
            for organ in OrganId:
                p = clean.labels == int(organ)
                t = gt.labels == int(organ)
                counts[organ] += (
                    int(np.count_nonzero(p & t)),
                    int(np.count_nonzero(p & ~t)),
                    int(np.count_nonzero(~p & t)),
                )
                prob = volio.read_volume(pred_dir / f"{s}_prob_c{int(organ)}")
                roc_scores[organ].append(prob.data.reshape(-1))
                roc_truth[organ].append(t.reshape(-1))
                geo_dicts[organ].append(measure_organ(clean, organ, sub).to_dict())
                if organ.name in measures:
                    m = measures[organ.name]
                    raw_truth = _truth_quantities(organ, truths[s][organ])
                    for q in ORGAN_QUANTITIES[organ]:
                        learned_vals[organ].append(m["quantities"][q] / scales[q])
                        learned_truth_vals[organ].append(raw_truth[q] / scales[q])
                    learned_scores[organ].append(m["score"])
                    learned_boxes[organ].append(m)
        organs = []
        for organ in OrganId:
            tp, fp, fn = counts[organ]
            precision = tp / (tp + fp) if tp + fp else None
            recall = tp / (tp + fn) if tp + fn else None
            auc, roc_points = roc_auc(
                np.concatenate(roc_scores[organ]), np.concatenate(roc_truth[organ])
            )
            mse = mse_raw = None
            learned = None
            if learned_vals[organ]:
                pv = np.array(learned_vals[organ])
                tv = np.array(learned_truth_vals[organ])
                mse = measurement_mse(pv, tv)
                qscale = np.array(
                    [scales[q] for q in ORGAN_QUANTITIES[organ]]
                    * (len(pv) // len(ORGAN_QUANTITIES[organ]))
                )
                mse_raw = measurement_mse(pv * qscale, tv * qscale)
                n_q = len(ORGAN_QUANTITIES[organ])
                per_case = pv.reshape(-1, n_q) * np.array([scales[q] for q in ORGAN_QUANTITIES[organ]])
                mean_q = {
                    q: float(v) for q, v in zip(ORGAN_QUANTITIES[organ], per_case.mean(axis=0))
                }
                first = learned_boxes[organ][0]
                learned = MeasurementOutput(
                    organ=organ,
                    quantities=mean_q,
                    score=float(np.mean(learned_scores[organ])),
                    box=box_from_array(np.array(first["box"][0] + first["box"][1], dtype=float)),
                )
            # average the geometric path over evaluation cases
            keys = [k for k in geo_dicts[organ][0] if k not in ("provenance", "lobe_volumes_cc")]
            agg = {}
            for k in keys:
                vals = [g[k] for g in geo_dicts[organ] if g[k] is not None]
                agg[k] = float(np.mean(vals)) if vals else None
            lobe_lists = [g["lobe_volumes_cc"] for g in geo_dicts[organ] if g["lobe_volumes_cc"]]
            lobes = None
            if lobe_lists:
                right = [l[0] for l in lobe_lists if l[0] is not None]
                left = [l[1] for l in lobe_lists if l[1] is not None]
                lobes = (
                    float(np.mean(right)) if right else None,
                    float(np.mean(left)) if left else None,
                )
            geo = GeoMeasurements(
                volume_cc=agg["volume_cc"],
                length_mm=agg["length_mm"],
                ap_diameter_mm=agg["ap_diameter_mm"],
                z_extent_mm=agg["z_extent_mm"],
                surface_area_cm2=agg["surface_area_cm2"],
                cortical_thickness_mm=agg["cortical_thickness_mm"],
                lobe_volumes_cc=lobes,
            )
            organs.append(
                OrganReport(
                    organ=organ,
                    geometric=geo,
                    learned=learned,
                    metrics=OrganMetrics(precision, recall, auc, mse, mse_raw),
                    roc=tuple(roc_points),
                )
            )
        report = MeasurementReport(
            organs=tuple(organs),
            config_digest=self.digest,
            seed=self.cfg["seed"],
            timestamps=make_timestamps(),
        )
        emit_report(report, self.out)
        self._mark_done(stage, inputs)
        self._note(stage, "done")

    def run_all(self):
        self.gen_phantoms()
        self.preprocess()
        self.train_seg()
        self.segment()
        self.postprocess()
        self.train_measure()
        self.measure()
        self.evaluate()

    def run_stage(self, name: str):
        method = {
            "gen-phantoms": self.gen_phantoms,
            "preprocess": self.preprocess,
            "train-seg": self.train_seg,
            "segment": self.segment,
            "postprocess": self.postprocess,
            "train-measure": self.train_measure,
            "measure": self.measure,
            "evaluate": self.evaluate,
            "run-all": self.run_all,
        }[name]
        method()
