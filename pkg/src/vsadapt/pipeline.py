"""Self-training bookkeeping: LR schedule, dataset manifests, external runner.

Training and inference are delegated to an external command. The contract is
file based: the runner receives a manifest JSON path and an output directory;
in predict mode it must leave one probability map per manifest entry in that
directory, named ``<case_id>.nii.gz`` (or ``.nii``), a 4D NIfTI whose last
axis indexes classes.
"""
from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .augment import KINDS, AugmentationSpec, apply_augmentation, default_specs, reduce_tumor_signal
from .ensemble import argmax_labels, ensemble_probs
from .postprocess import keep_largest_component
from .volume import LabelVolume, ValidationError, read_nifti, read_probability_map, write_nifti

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

FAKE = "fake_hrT2"
AT = "AT"
REAL = "real_hrT2"
PSEUDO = "pseudo_labeled"
AUG_PSEUDO = "augmented_pseudo"
PROVENANCES = (FAKE, AT, REAL, PSEUDO, AUG_PSEUDO)
_NEEDS_LABEL = (FAKE, AT, PSEUDO, AUG_PSEUDO)

# Which pools make up each training round. Round 3 swaps the AT copies for the
# eight augmented real-hrT2 sets: 210 + 210 + 8 * 210 = 2100.
ROUND_COMPOSITION = {
    1: (FAKE, AT),
    2: (FAKE, AT, PSEUDO),
    3: (FAKE, PSEUDO, AUG_PSEUDO),
}


class DependencyError(RuntimeError):
    """A round was requested before the pools it depends on exist."""

    def __init__(self, provenance: str, message: str = ""):
        super().__init__(f"missing pool {provenance!r}" + (f": {message}" if message else ""))
        self.provenance = provenance


class RunnerError(RuntimeError):
    def __init__(self, returncode: int, stdout: str, stderr: str, command: Sequence[str]):
        super().__init__(f"runner exited with status {returncode}: {' '.join(command)}\n{stderr}{stdout}")
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr


class CaseValidationError(ValidationError):
    def __init__(self, case_id: str, message: str):
        super().__init__(f"case {case_id}: {message}")
        self.case_id = case_id


# -- learning-rate schedule -------------------------------------------------

@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    epochs_const: int
    epochs_decay: int
    stage: int = 1
    batch_size: int | None = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs_const < 0 or self.epochs_decay < 1:
            raise ValueError("need epochs_const >= 0 and epochs_decay >= 1")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay

    @classmethod
    def for_stage(cls, stage: int) -> "ScheduleSpec":
        return CUT_STAGES[stage]


CUT_STAGES = {
    1: ScheduleSpec(base_lr=0.001, epochs_const=50, epochs_decay=50, stage=1, batch_size=32),
    2: ScheduleSpec(base_lr=0.0002, epochs_const=5, epochs_decay=5, stage=2, batch_size=1),
}


def lr_at_epoch(spec: ScheduleSpec, epoch: int) -> float:
    """Constant ``base_lr``, then a linear ramp that is exactly 0 at the last epoch.

    The ramp spans ``epochs_decay - 1`` intervals, so the first decay epoch
    still uses ``base_lr``.
    """
    total = spec.total_epochs
    if not 0 <= epoch < total:
        raise IndexError(f"epoch {epoch} outside [0, {total})")
    if epoch < spec.epochs_const:
        return spec.base_lr
    if spec.epochs_decay == 1:
        return 0.0
    # ratio first: exact 1.0 at the first decay epoch, and monotone after rounding
    return spec.base_lr * ((total - 1 - epoch) / (spec.epochs_decay - 1))


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image_path: str
    provenance: str
    source_case_id: str
    label_path: str | None = None
    augmentation: dict | None = None
    label_round: int | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance in (PSEUDO, AUG_PSEUDO):
            if not self.label_path:
                raise ValidationError(f"{self.case_id}: {self.provenance} entries need a pseudo-label")
            if self.label_round is None:
                raise ValidationError(f"{self.case_id}: pseudo-labels must record the round that produced them")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class DatasetManifest:
    round: int
    entries: tuple[ManifestEntry, ...]
    created: str
    schema_version: int = SCHEMA_VERSION
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.round < 0:
            raise ValueError("round must be >= 0")
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.case_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest case_ids must be unique")
        for e in self.entries:
            if e.label_round is not None and e.label_round >= self.round and e.provenance in (PSEUDO, AUG_PSEUDO):
                raise ValidationError(
                    f"{e.case_id}: pseudo-label from round {e.label_round} cannot train round {self.round}"
                )

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.provenance] = out.get(e.provenance, 0) + 1
        return out

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "round": self.round,
            "created": self.created,
            "metadata": self.metadata,
            "counts": self.counts(),
            "entries": [e.to_dict() for e in self.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported manifest schema {doc.get('schema_version')!r}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(doc["round"], tuple(entries), doc["created"], doc["schema_version"], doc.get("metadata", {}))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def default_created() -> str:
    """UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.replace(microsecond=0).isoformat()


def _entry_key(e: ManifestEntry):
    kind = (e.augmentation or {}).get("kind")
    return (e.source_case_id, KINDS.index(kind) if kind in KINDS else -1, e.case_id)


def _to_entries(records: Iterable[Mapping], provenance: str) -> list[ManifestEntry]:
    out = []
    for r in records:
        out.append(ManifestEntry(
            case_id=str(r["case_id"]),
            image_path=str(r["image"]),
            provenance=provenance,
            source_case_id=str(r.get("source_case_id", r["case_id"])),
            label_path=None if r.get("label") is None else str(r["label"]),
            augmentation=r.get("augmentation"),
            label_round=r.get("label_round"),
        ))
    return sorted(out, key=_entry_key)


def _check_composition(round: int, by_prov: dict[str, list[ManifestEntry]]) -> None:
    for prov in _NEEDS_LABEL:
        for e in by_prov.get(prov, []):
            if not e.label_path:
                raise ValidationError(f"{e.case_id}: {prov} entries need a label")
    if AT in by_prov:
        fakes = {e.source_case_id for e in by_prov[FAKE]}
        at = [e.source_case_id for e in by_prov[AT]]
        if len(at) != len(fakes) or set(at) != fakes:
            raise ValidationError("the AT pool must hold exactly one copy per fake hrT2 case")
    if AUG_PSEUDO in by_prov:
        reals = {e.source_case_id for e in by_prov[PSEUDO]}
        per_case: dict[str, set] = {}
        for e in by_prov[AUG_PSEUDO]:
            if e.source_case_id not in reals:
                raise ValidationError(f"{e.case_id}: augmented case has no pseudo-labelled original")
            per_case.setdefault(e.source_case_id, set()).add((e.augmentation or {}).get("kind"))
        for case in reals:
            if per_case.get(case) != set(KINDS):
                raise ValidationError(f"real case {case} does not carry all eight augmentations")


def assemble_round(round: int, pools: Mapping[str, Sequence[Mapping]], created: str | None = None,
                   metadata: dict | None = None) -> DatasetManifest:
    """Build the training manifest for self-training round 1, 2 or 3.

    ``pools`` maps a provenance name to records with ``case_id``, ``image``,
    ``label`` and, for pseudo-labelled pools, ``label_round``; augmented
    records also carry ``source_case_id`` and ``augmentation``.
    """
    if round not in ROUND_COMPOSITION:
        raise ValueError(f"round must be one of {sorted(ROUND_COMPOSITION)}, got {round}")
    by_prov = {}
    for prov in ROUND_COMPOSITION[round]:
        records = pools.get(prov)
        if not records:
            raise DependencyError(prov, f"round {round} needs {', '.join(ROUND_COMPOSITION[round])}")
        try:
            by_prov[prov] = _to_entries(records, prov)
        except ValidationError as exc:
            raise DependencyError(prov, str(exc)) from exc
    _check_composition(round, by_prov)
    entries = [e for prov in ROUND_COMPOSITION[round] for e in by_prov[prov]]
    return DatasetManifest(round, tuple(entries), created or default_created(), metadata=dict(metadata or {}))


def predict_manifest(records: Sequence[Mapping], model_round: int, created: str | None = None,
                     metadata: dict | None = None) -> DatasetManifest:
    """Inference list for the model trained in ``model_round``."""
    entries = sorted(
        (ManifestEntry(str(r["case_id"]), str(r["image"]), REAL, str(r.get("source_case_id", r["case_id"])),
                       augmentation=r.get("augmentation")) for r in records),
        key=_entry_key,
    )
    meta = {"mode": "predict", **(metadata or {})}
    return DatasetManifest(model_round, tuple(entries), created or default_created(), metadata=meta)


# -- pool builders ----------------------------------------------------------

def build_at_pool(fake_pool: Sequence[Mapping], out_dir, factor: float = 0.5) -> list[dict]:
    """Write a tumour-dimmed copy of every fake hrT2 image; labels are shared."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for r in sorted(fake_pool, key=lambda r: str(r["case_id"])):
        img = read_nifti(r["image"], as_label=False)
        lbl = read_nifti(r["label"], as_label=True)
        path = out_dir / f"{r['case_id']}_AT.nii.gz"
        write_nifti(reduce_tumor_signal(img, lbl, factor), path)
        out.append({"case_id": f"{r['case_id']}_AT", "source_case_id": str(r["case_id"]),
                    "image": str(path), "label": str(r["label"])})
    return out


def build_augmented_images(real_pool: Sequence[Mapping], specs: Sequence[AugmentationSpec], out_dir) -> list[dict]:
    """Eight augmented copies of every real hrT2 image, ready for prediction.

    Case ``i`` (in case_id order) uses stream ``(i,)`` of each spec, matching
    :func:`vsadapt.augment.expand_dataset`.
    """
    if sorted(s.kind for s in specs) != sorted(KINDS):
        raise ValueError("need exactly one spec per augmentation kind")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for i, r in enumerate(sorted(real_pool, key=lambda r: str(r["case_id"]))):
        img = read_nifti(r["image"], as_label=False)
        for spec in specs:
            cid = f"{r['case_id']}_{spec.kind}"
            path = out_dir / f"{cid}.nii.gz"
            write_nifti(apply_augmentation(img, spec, stream=(i,)), path)
            out.append({"case_id": cid, "source_case_id": str(r["case_id"]), "image": str(path),
                        "augmentation": {**spec.to_dict(), "stream": [i]}})
    return out


# -- external runner --------------------------------------------------------

def _render(runner: str | Sequence[str], **values) -> list[str]:
    tokens = shlex.split(runner) if isinstance(runner, str) else list(runner)
    return [t.format(**values) for t in tokens]


def _find_prediction(outdir: Path, case_id: str) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        p = outdir / f"{case_id}{suffix}"
        if p.exists():
            return p
    return None


def _load_prediction(outdir: Path, case_id: str):
    path = _find_prediction(outdir, case_id)
    if path is None:
        raise CaseValidationError(case_id, f"no probability map in {outdir}")
    try:
        return read_probability_map(path)
    except (ValueError, OSError) as exc:
        raise CaseValidationError(case_id, str(exc)) from exc


def run_model(manifest: DatasetManifest, runner, mode: str, workdir, variant: str = "default",
              postprocess: bool = True, workers: int = 4) -> dict:
    """Invoke the external runner on ``manifest``.

    ``runner`` is a command template; ``{manifest}``, ``{outdir}``, ``{mode}``
    and ``{variant}`` are substituted per argument. In predict mode every map
    is validated before any pseudo-label is written, so a bad case leaves no
    partial output. Returns ``{"outdir": ..., "predictions": {case_id: {...}}}``.
    """
    if mode not in ("train", "predict"):
        raise ValueError(f"mode must be train or predict, got {mode!r}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest_path = manifest.write(workdir / f"manifest_{mode}_{variant}.json")
    outdir = workdir / f"{mode}_{variant}"
    outdir.mkdir(exist_ok=True)
    cmd = _render(runner, manifest=manifest_path, outdir=outdir, mode=mode, variant=variant)
    log.info("running %s", " ".join(cmd))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RunnerError(proc.returncode, proc.stdout, proc.stderr, cmd)
    result = {"outdir": str(outdir), "manifest": str(manifest_path), "predictions": {}}
    if mode == "train":
        return result

    ids = [e.case_id for e in manifest.entries]
    with ThreadPoolExecutor(max(1, workers)) as pool:
        maps = dict(zip(ids, pool.map(lambda cid: _load_prediction(outdir, cid), ids)))

    label_dir = workdir / f"pseudo_{variant}"
    label_dir.mkdir(exist_ok=True)
    for cid in ids:
        labels = argmax_labels(maps[cid])
        if postprocess:
            labels = keep_largest_component(labels, class_id=1)
        label_path = label_dir / f"{cid}.nii.gz"
        write_nifti(labels, label_path)
        result["predictions"][cid] = {
            "probabilities": str(_find_prediction(outdir, cid)),
            "label": str(label_path),
        }
    return result


def pseudo_pool(predict: DatasetManifest, predictions: Mapping[str, Mapping]) -> list[dict]:
    """Turn a predict manifest plus run_model output into pseudo-labelled records."""
    out = []
    for e in predict.entries:
        rec = {"case_id": e.case_id, "source_case_id": e.source_case_id, "image": e.image_path,
               "label": predictions[e.case_id]["label"], "label_round": predict.round}
        if e.augmentation is not None:
            rec["augmentation"] = e.augmentation
        out.append(rec)
    return out


# -- full loop --------------------------------------------------------------

@dataclass
class SelfTrainingConfig:
    tumour_factor: float = 0.5
    augment_seed: int = 0
    augment_label_round: int = 1
    postprocess_pseudo: bool = True
    final_variants: tuple[str, ...] = ("combined", "nonsmooth_dice")
    created: str | None = None


def run_self_training(fake_pool: Sequence[Mapping], real_pool: Sequence[Mapping], runner, workdir,
                      config: SelfTrainingConfig | None = None) -> dict:
    """Rounds 1 -> 3 around an external runner.

    Returns the three training manifests, the pools built on the way and the
    train results of the final variants (to be ensembled at inference).
    """
    cfg = config or SelfTrainingConfig()
    workdir = Path(workdir)
    created = cfg.created or default_created()
    pools: dict[str, list] = {FAKE: list(fake_pool)}
    pools[AT] = build_at_pool(fake_pool, workdir / "at", cfg.tumour_factor)

    m1 = assemble_round(1, pools, created)
    run_model(m1, runner, "train", workdir / "round1")

    reals = [{"case_id": r["case_id"], "image": r["image"]} for r in real_pool]
    pred1 = predict_manifest(reals, 1, created)
    res = run_model(pred1, runner, "predict", workdir / "round1", postprocess=cfg.postprocess_pseudo)
    pools[PSEUDO] = pseudo_pool(pred1, res["predictions"])

    m2 = assemble_round(2, pools, created)
    run_model(m2, runner, "train", workdir / "round2")

    aug = build_augmented_images(real_pool, default_specs(cfg.augment_seed), workdir / "augmented")
    pred_aug = predict_manifest(aug, cfg.augment_label_round, created)
    res = run_model(pred_aug, runner, "predict", workdir / f"round{cfg.augment_label_round}",
                    variant="augmented", postprocess=cfg.postprocess_pseudo)
    pools[AUG_PSEUDO] = pseudo_pool(pred_aug, res["predictions"])

    m3 = assemble_round(3, pools, created)
    finals = {v: run_model(m3, runner, "train", workdir / "round3", variant=v) for v in cfg.final_variants}
    return {"manifests": {1: m1, 2: m2, 3: m3}, "pools": pools, "final_models": finals}


def ensemble_predict(records: Sequence[Mapping], runner, workdir, variants: Sequence[str],
                     weights: Sequence[float] | None = None, keep_largest: bool = True,
                     created: str | None = None) -> dict[str, LabelVolume]:
    """Predict ``records`` with each final variant, average, argmax, clean up."""
    workdir = Path(workdir)
    manifest = predict_manifest(records, 3, created)
    per_variant = {
        v: run_model(manifest, runner, "predict", workdir, variant=v, postprocess=False)["predictions"]
        for v in variants
    }
    out = {}
    for e in manifest.entries:
        maps = [read_probability_map(per_variant[v][e.case_id]["probabilities"]) for v in variants]
        labels = argmax_labels(ensemble_probs(maps, weights))
        out[e.case_id] = keep_largest_component(labels, 1) if keep_largest else labels
    return out

