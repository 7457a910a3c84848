"""Stand-in for an external segmentation runner.

    python stub_runner.py MODE MANIFEST OUTDIR [VARIANT]

train: records what it was given in OUTDIR/model.json.
predict: writes OUTDIR/<case_id>.nii.gz, a softmax over simple intensity
scores (bright -> VS, dark -> cochlea). VARIANT only changes the softmax
temperature. STUB_FAIL=1 makes it exit 1; STUB_BAD_CASE=<id> writes a map
for that case whose class vectors sum to 0.8.
"""
import json
import os
import sys
from pathlib import Path

import numpy as np

from vsadapt.volume import read_nifti, write_class_array

TEMPERATURE = {"combined": 3.0, "nonsmooth_dice": 5.0}


def predict(image: np.ndarray, sharpness: float) -> np.ndarray:
    scores = np.stack([np.zeros_like(image), image - 1.5, -image - 1.5]) * sharpness
    scores -= scores.max(axis=0)
    e = np.exp(scores)
    return e / e.sum(axis=0)


def main(argv):
    mode, manifest_path, outdir = argv[:3]
    variant = argv[3] if len(argv) > 3 else "default"
    if os.environ.get("STUB_FAIL"):
        print("stub runner asked to fail", file=sys.stderr)
        return 1
    manifest = json.loads(Path(manifest_path).read_text())
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if mode == "train":
        summary = {"round": manifest["round"], "variant": variant, "counts": manifest["counts"]}
        (outdir / "model.json").write_text(json.dumps(summary, sort_keys=True))
        return 0
    bad = os.environ.get("STUB_BAD_CASE")
    for entry in manifest["entries"]:
        vol = read_nifti(entry["image_path"], as_label=False)
        probs = predict(vol.data.astype(np.float64), TEMPERATURE.get(variant, 4.0))
        if entry["case_id"] == bad:
            probs = probs * 0.8
        write_class_array(probs, vol.spacing, outdir / f"{entry['case_id']}.nii.gz")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
